"""Two-stage snapshot generation from the simplified Newton steps.

Stage one collects the control-free part ``v`` and the control impulse
response ``w`` of the first step and compresses them into ``B1``.  Stage two
expands the cubic term over products of ``{ybar} + B1``, compresses those into
an H-orthonormal nonlinearity basis ``c``, and collects the impulse responses
of the second step (``r``, ``beta``, ``gamma``) into ``B2``.  ``B12`` is the POD
of ``{ybar} + B1 + B2``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from math import comb
from typing import Optional

import numpy as np

from .newton_pipeline import LinearizedOperator, first_stage_parts, second_stage_parts
from .pod_core import EmptyBasisError, PodBasis, correlation_matrix, g_orthonormalize, pod_basis
from .theta_stepper import Trajectory

log = logging.getLogger(__name__)

__all__ = [
    "SnapshotPipelineConfig",
    "FirstStage",
    "SecondStage",
    "PipelineResult",
    "generate_first_stage",
    "nonlinearity_candidates",
    "nonlinearity_basis",
    "generate_second_stage",
    "combine_bases",
    "run_pipeline",
]


@dataclass(frozen=True)
class SnapshotPipelineConfig:
    cutoff_first: float = 1e-8
    cutoff_nonlin: float = 1e-8
    cutoff_second: float = 1e-8
    cutoff_combined: float = 1e-8
    include_ybar: bool = True
    max_nonlin_basis: Optional[int] = None
    max_candidates: int = 20000
    weighting: str = "coefficient"

    def __post_init__(self):
        for name in ("cutoff_first", "cutoff_nonlin", "cutoff_second", "cutoff_combined"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weighting not in ("coefficient", "uniform"):
            raise ValueError(f"weighting must be 'coefficient' or 'uniform', got {self.weighting!r}")
        if self.max_nonlin_basis is not None and self.max_nonlin_basis < 1:
            raise ValueError("max_nonlin_basis must be at least 1")


@dataclass
class FirstStage:
    v: Trajectory
    w: Trajectory
    B1: PodBasis

    @property
    def coefficient_scales(self) -> np.ndarray:
        """RMS size of the B1 coefficients over the first-stage snapshots."""
        n_snap = self.v.values.shape[0] + self.w.values.shape[0]
        return np.sqrt(self.B1.eigenvalues[:self.B1.size] / n_snap)


@dataclass
class SecondStage:
    r: Trajectory
    beta: np.ndarray   # (p, K+1, n)
    gamma: np.ndarray  # (m, K+1, n)
    B2: Optional[PodBasis]
    beta_weights: Optional[np.ndarray] = None
    gamma_weights: Optional[np.ndarray] = None

    def snapshots(self, weighted: bool = True) -> np.ndarray:
        """All second-stage rows as columns (scaled by the stage weights)."""
        n = self.r.n_dof
        beta, gamma = self.beta, self.gamma
        if weighted and self.beta_weights is not None:
            beta = beta * self.beta_weights[:, None, None]
        if weighted and self.gamma_weights is not None:
            gamma = gamma * self.gamma_weights[:, None, None]
        parts = [self.r.values, beta.reshape(-1, n), gamma.reshape(-1, n)]
        return np.concatenate(parts, axis=0).T


@dataclass
class PipelineResult:
    ybar: np.ndarray
    first: FirstStage
    nonlin: PodBasis
    second: SecondStage
    B12: PodBasis


def generate_first_stage(lin: LinearizedOperator, y0,
                         cfg: SnapshotPipelineConfig = SnapshotPipelineConfig()) -> FirstStage:
    v, w = first_stage_parts(lin, y0)
    S = np.concatenate([v.values, w.values], axis=0).T
    B1 = pod_basis(S, lin.ops.G_W, cutoff=cfg.cutoff_first, gram_tag="W")
    log.info("first stage: %d snapshots -> |B1| = %d", S.shape[1], B1.size)
    return FirstStage(v, w, B1)


def nonlinearity_candidates(ops, ybar, first_basis: np.ndarray,
                            include_ybar: bool = True, max_candidates: int = 20000) -> np.ndarray:
    """H-Riesz representers of ``int a b c phi_i`` over multisets of size 3.

    The factors run over ``{ybar} + B1`` (or ``B1`` alone).  Returns the
    candidates as columns.
    """
    n = ops.n_dof
    factors = [np.asarray(first_basis, dtype=float).reshape(n, -1)]
    if include_ybar:
        factors.insert(0, np.asarray(ybar, dtype=float)[:, None])
    F = np.concatenate(factors, axis=1)
    s = F.shape[1]
    count = comb(s + 2, 3)
    if s == 0:
        raise ValueError("no factors for the nonlinearity basis")
    if count > max_candidates:
        raise ValueError(
            f"{count} nonlinearity candidates exceed the cap {max_candidates}; "
            "increase cutoff_first to shrink B1")
    idx = np.array(list(itertools.combinations_with_replacement(range(s), 3)))
    loads = ops.triple_product(F[:, idx[:, 0]], F[:, idx[:, 1]], F[:, idx[:, 2]])
    return ops.solve_mass(loads)


def nonlinearity_basis(lin: LinearizedOperator, first: FirstStage,
                       cfg: SnapshotPipelineConfig = SnapshotPipelineConfig()) -> PodBasis:
    """H-orthonormal basis ``c`` for the cubic term along ``ybar + span(B1)``.

    With coefficient weighting each ``psi_i`` enters the products scaled by
    its RMS coefficient, so the POD ranks products by their actual size in
    ``N(ybar + d1)``.  The span of the candidates does not change.
    """
    factors = first.B1.vectors
    if cfg.weighting == "coefficient":
        factors = factors * first.coefficient_scales[None, :]
    cand = nonlinearity_candidates(lin.ops, lin.ybar, factors, cfg.include_ybar,
                                   cfg.max_candidates)
    basis = pod_basis(cand, lin.ops.M, cutoff=cfg.cutoff_nonlin, gram_tag="H")
    if cfg.max_nonlin_basis is not None and basis.size > cfg.max_nonlin_basis:
        basis = basis.truncated(cfg.max_nonlin_basis)
    log.info("nonlinearity basis: %d candidates -> %d vectors", cand.shape[1], basis.size)
    return basis


def generate_second_stage(lin: LinearizedOperator, first: FirstStage, nonlin: PodBasis,
                          cfg: SnapshotPipelineConfig = SnapshotPipelineConfig(),
                          threads: int = 1) -> SecondStage:
    """Second-step responses and their POD ``B2``.

    With coefficient weighting ``beta_i`` is scaled by the RMS coefficient of
    ``psi_i`` and ``gamma_j`` by ``b`` times the singular value of ``c_j``,
    i.e. by the typical size of the signal it is convolved with.
    """
    B1 = first.B1
    r, beta, gamma = second_stage_parts(lin, B1.vectors, nonlin.vectors, threads)
    stage = SecondStage(r, beta, gamma, None)
    if cfg.weighting == "coefficient":
        stage.beta_weights = first.coefficient_scales
        stage.gamma_weights = lin.params.b * np.sqrt(nonlin.eigenvalues[:nonlin.size])
    S = stage.snapshots()
    try:
        stage.B2 = pod_basis(S, lin.ops.G_W, cutoff=cfg.cutoff_second, gram_tag="W")
    except EmptyBasisError:
        # nothing above the cutoff: B12 falls back to {ybar} + B1
        lam = np.linalg.eigvalsh(correlation_matrix(S, lin.ops.G_W))[::-1].clip(0.0)
        stage.B2 = PodBasis(np.zeros((lin.ops.n_dof, 0)), lam, "W", cfg.cutoff_second)
    log.info("second stage: %d snapshots -> |B2| = %d", S.shape[1], stage.B2.size)
    return stage


def combine_bases(ybar, B1: PodBasis, B2: Optional[PodBasis], G_W,
                  cutoff: float = 1e-8, n_second: Optional[int] = None,
                  include_ybar: bool = True) -> PodBasis:
    """W-orthonormal basis of ``span({ybar} + B1 + B2)``.

    ``{ybar} + B1`` is kept exactly; the (leading ``n_second``) ``B2`` vectors
    are orthogonalized against it and their remainder is compressed by POD
    with ``cutoff``.  The ``B2`` order therefore controls truncation.
    """
    head = B1.vectors
    if include_ybar:
        yb = np.asarray(ybar, dtype=float)
        res = yb - head @ (head.T @ (G_W @ yb))
        res = res - head @ (head.T @ (G_W @ res))
        nrm_y = np.sqrt(max(yb @ (G_W @ yb), 0.0))
        nrm_r = np.sqrt(max(res @ (G_W @ res), 0.0))
        if nrm_r > 1e-10 * nrm_y:
            head = np.column_stack([res / nrm_r, head])
    head = g_orthonormalize(head, G_W) if head.shape[1] else head
    lam = np.ones(head.shape[1])
    if B2 is not None and B2.size and (n_second is None or n_second > 0):
        j = B2.size if n_second is None else min(n_second, B2.size)
        R = B2.vectors[:, :j]
        for _ in range(2):
            R = R - head @ (head.T @ (G_W @ R))
        try:
            tail = pod_basis(R, G_W, cutoff=cutoff, gram_tag="W")
        except EmptyBasisError:
            tail = None
        if tail is not None:
            head = g_orthonormalize(np.column_stack([head, tail.vectors]), G_W)
            lam = np.concatenate([lam, tail.eigenvalues])
    if head.shape[1] == 0:
        raise EmptyBasisError("empty combined basis")
    return PodBasis(head, lam, "W", cutoff)


def run_pipeline(lin: LinearizedOperator, y0,
                 cfg: SnapshotPipelineConfig = SnapshotPipelineConfig(),
                 threads: int = 1) -> PipelineResult:
    first = generate_first_stage(lin, y0, cfg)
    nonlin = nonlinearity_basis(lin, first, cfg)
    second = generate_second_stage(lin, first, nonlin, cfg, threads)
    B12 = combine_bases(lin.ybar, first.B1, second.B2, lin.ops.G_W,
                        cfg.cutoff_combined, include_ybar=cfg.include_ybar)
    return PipelineResult(lin.ybar, first, nonlin, second, B12)
