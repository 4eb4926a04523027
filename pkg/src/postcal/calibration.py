"""Chi-square calibration of design weights to arbitrary target vectors.

The weight set minimizing sum((w' - w)^2 / w) subject to the p calibration
constraints sum_i w'_i y_i = t has the closed form

    w'_i(t) = w_i * (1 + (t - T_ht)' G^{-1} y_i),

where G = sum_i w_i y_i y_i' is the weighted cross-product of the design
vectors and T_ht the Horvitz-Thompson total vector.  The multiplicative
factor is the familiar g-weight of regression calibration.  G and its
factorization are computed once per sample and shared across all targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.linalg import lapack

from .errors import DataError, NumericalError, RankDeficiencyError
from .frame import CalibrationSpec, SampleSet

# A pivot below p * max(diag G) * 2^-50 is treated as numerically zero.
_PIVOT_RELATIVE_TOL = 2.0 ** -50


@dataclass(frozen=True)
class GramMatrix:
    """p x p calibration cross-product with its factorization and rank.

    ``factor`` is the lower Cholesky factor and exists only at full rank.
    Immutable; safe to share across worker threads.
    """

    g: np.ndarray
    factor: np.ndarray | None
    rank: int
    condition_estimate: float
    deficient_blocks: tuple[str, ...]
    spec: CalibrationSpec

    @property
    def p(self) -> int:
        return self.g.shape[0]

    @property
    def full_rank(self) -> bool:
        return self.rank == self.p

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve G x = rhs through the cached triangular factor."""
        if self.factor is None:
            raise RankDeficiencyError(
                f"cross-product matrix has rank {self.rank} < {self.p}; "
                f"deficient blocks: {list(self.deficient_blocks)}",
                self.deficient_blocks,
            )
        return sla.cho_solve((self.factor, True), rhs)


@dataclass(frozen=True)
class CalibratedWeights:
    """Calibrated weight set for one target vector.

    ``g_factors`` are the per-record multiplicative adjustments; negative
    calibrated weights are counted but never truncated, since truncation
    would break the exact calibration property.
    """

    weights: np.ndarray
    g_factors: np.ndarray
    target: np.ndarray
    negative_count: int


def compute_gram(sample: SampleSet, spec: CalibrationSpec) -> GramMatrix:
    """Accumulate G = sum_i w_i y_i y_i' and factorize it.

    The matrix is formed as Z'Z with Z = sqrt(w) * Y, which keeps it
    symmetric positive semi-definite by construction.  Rank is determined by
    a pivoted Cholesky factorization with a scale-relative pivot tolerance;
    when deficient, the error names the (variable, domain) blocks that could
    not be pivoted (typically empty variable-domain cells).
    """
    Y = sample.design_matrix(spec)
    Z = Y * np.sqrt(sample.weights)[:, None]
    g = Z.T @ Z
    g = (g + g.T) / 2.0

    p = spec.p
    max_diag = float(np.max(np.diag(g))) if p else 0.0
    tol = p * max_diag * _PIVOT_RELATIVE_TOL
    _, piv, rank, _ = lapack.dpstrf(g, tol=tol, lower=1)
    rank = int(rank)

    deficient: tuple[str, ...] = ()
    factor = None
    condition = float("inf")
    if rank == p:
        try:
            factor = sla.cholesky(g, lower=True)
        except sla.LinAlgError:
            rank = p - 1  # borderline indefiniteness; treat as deficient
        else:
            condition = float(np.linalg.cond(g))
    if factor is None:
        # Unpivoted trailing columns are the dependent blocks; report empty
        # variable-domain cells (zero diagonal) first for readability.
        rejected = sorted(int(j) - 1 for j in piv[rank:])
        zero_diag = [j for j in rejected if g[j, j] <= tol]
        dependent = [j for j in rejected if j not in zero_diag]
        deficient = tuple(
            spec.describe_block(j) + (" [empty]" if j in zero_diag else "")
            for j in zero_diag + dependent
        )
    return GramMatrix(
        g=g,
        factor=factor,
        rank=rank,
        condition_estimate=condition,
        deficient_blocks=deficient,
        spec=spec,
    )


def ht_totals(sample: SampleSet, spec: CalibrationSpec) -> np.ndarray:
    """Horvitz-Thompson total vector T_ht = sum_i w_i y_i."""
    Y = sample.design_matrix(spec)
    return Y.T @ sample.weights


def calibrate(
    sample: SampleSet,
    gram: GramMatrix,
    ht: np.ndarray,
    target: np.ndarray,
) -> CalibratedWeights:
    """Calibrate the design weights so that sum_i w'_i y_i equals ``target``.

    Implemented as a single solve G u = (target - T_ht) followed by
    per-record dot products; the inverse of G is never formed.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (gram.p,):
        raise DataError(
            f"target has shape {target.shape}, expected ({gram.p},)"
        )
    if not np.all(np.isfinite(target)):
        bad = np.nonzero(~np.isfinite(target))[0]
        raise NumericalError(
            f"target has non-finite components at positions {bad.tolist()}"
        )
    u = gram.solve(target - ht)
    Y = sample.design_matrix(gram.spec)
    g_factors = 1.0 + Y @ u
    weights = sample.weights * g_factors
    return CalibratedWeights(
        weights=weights,
        g_factors=g_factors,
        target=target.copy(),
        negative_count=int(np.sum(weights < 0)),
    )


def cell_weighted_moment(
    sample: SampleSet,
    spec: CalibrationSpec,
    mask: np.ndarray,
    values: np.ndarray,
) -> np.ndarray:
    """Cell moment vector sum_{i in c} value_i w_i y_i."""
    Y = sample.design_matrix(spec)
    return Y.T @ (sample.weights * values * mask)


def replicate_direction(gram: GramMatrix, cell_weighted_moment: np.ndarray) -> np.ndarray:
    """Direction a_c solving G a_c = sum_{i in c} value_i w_i y_i.

    The replicate total of the cell is then an affine function of the target:
    fixed HT cell total plus (t - T_ht)' a_c.
    """
    moment = np.asarray(cell_weighted_moment, dtype=float)
    if moment.shape != (gram.p,):
        raise DataError(
            f"moment has shape {moment.shape}, expected ({gram.p},)"
        )
    return gram.solve(moment)
