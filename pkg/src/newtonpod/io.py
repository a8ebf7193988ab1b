"""Plain-text persistence of matrices, trajectories and bases.

Matrix files start with a ``rows cols`` line followed by one row per line in
``%.17g`` format, so values round-trip exactly.  Vectors are stored as
``n x 1`` matrices.  Metadata goes into a JSON sidecar next to the data file.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .pod_core import PodBasis
from .theta_stepper import TimeGrid, Trajectory

PathLike = Union[str, Path]

__all__ = [
    "save_matrix",
    "load_matrix",
    "save_vector",
    "load_vector",
    "save_trajectory",
    "load_trajectory",
    "save_basis",
    "load_basis",
    "write_json",
    "read_json",
]


def save_matrix(path: PathLike, A) -> None:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError("only 1-D and 2-D arrays can be stored")
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]}\n")
        if A.size:
            np.savetxt(fh, A, fmt="%.17g")


def load_matrix(path: PathLike) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: first line must be 'rows cols'")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, ndmin=2) if rows * cols else np.zeros((rows, cols))
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: expected {rows}x{cols} values, found shape {data.shape}")
    return data


def save_vector(path: PathLike, x) -> None:
    save_matrix(path, np.asarray(x, dtype=float).reshape(-1, 1))


def load_vector(path: PathLike) -> np.ndarray:
    A = load_matrix(path)
    if A.shape[1] != 1:
        raise ValueError(f"{path}: expected a single column, found {A.shape[1]}")
    return A[:, 0]


def write_json(path: PathLike, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike):
    return json.loads(Path(path).read_text())


def _sidecar(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_trajectory(path: PathLike, traj: Trajectory) -> None:
    save_matrix(path, traj.values)
    tg = traj.time_grid
    write_json(_sidecar(path), {"T": tg.T, "K_steps": tg.K_steps, "space_tag": traj.space_tag})


def load_trajectory(path: PathLike) -> Trajectory:
    meta = read_json(_sidecar(path))
    values = load_matrix(path)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{path}: trajectory contains non-finite values")
    return Trajectory(values, TimeGrid(meta["T"], meta["K_steps"]), meta["space_tag"])


def save_basis(directory: PathLike, name: str, basis: PodBasis, **extra) -> dict:
    """Write ``name.txt`` (modes), ``name_eigenvalues.txt`` and ``name.json``."""
    d = Path(directory)
    save_matrix(d / f"{name}.txt", basis.vectors)
    save_vector(d / f"{name}_eigenvalues.txt", basis.eigenvalues)
    meta = {"gram_tag": basis.gram_tag, "cutoff_used": basis.cutoff_used,
            "size": basis.size, "n_dof": basis.n_dof, **extra}
    write_json(d / f"{name}.json", meta)
    return meta


def load_basis(directory: PathLike, name: str) -> PodBasis:
    d = Path(directory)
    meta = read_json(d / f"{name}.json")
    vectors = load_matrix(d / f"{name}.txt")
    eigenvalues = load_vector(d / f"{name}_eigenvalues.txt")
    return PodBasis(vectors, eigenvalues, meta["gram_tag"], meta["cutoff_used"])
