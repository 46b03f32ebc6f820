"""Local linear trend estimation and bandwidth selection.

The smoother is the multivariate local linear estimator: at a point x the
fitted value is the intercept of a kernel-weighted affine fit, a linear
functional s_x of the observations. Stacking the s_x rows at the sample
sites gives the hat matrix S, from which residuals, cross-validation scores
and dependence-corrected scores are all computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import BandwidthTooSmallError, ConfigError
from .geometry import BandwidthMatrix, RegularGrid, SpatialSample
from .numerics import PRODUCT_KERNELS

_LOCAL_RIDGE = 1e-10
_MIN_NEIGHBORS_FACTOR = 3  # admissibility asks for 3 (d+1) kernel neighbors


@dataclass(frozen=True, eq=False)
class SmootherMatrix:
    """Hat matrix of the local linear smoother at the sample sites."""

    S: np.ndarray
    bandwidth: BandwidthMatrix
    kernel: str = "triweight"

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.S))


@dataclass(frozen=True, eq=False)
class TrendFit:
    """A fitted trend: sample, smoother, fitted values, residuals."""

    sample: SpatialSample
    smoother: SmootherMatrix
    fitted: np.ndarray
    residuals: np.ndarray


_EVAL_CHUNK = 512


def _scaled_kernel(eval_points, locations, bandwidth: BandwidthMatrix, kernel: str,
                   diffs=None):
    """Kernel weights and bandwidth-scaled differences u = H^-1 (x_j - e_i).

    The 1/det(H) normalization is a per-row constant and cancels in the
    local linear weights, so it is omitted. ``diffs`` may be passed in when
    a caller evaluates many bandwidths on fixed points.
    """
    k1 = PRODUCT_KERNELS[kernel]
    if diffs is None:
        diffs = locations[None, :, :] - eval_points[:, None, :]
    if bandwidth.is_diagonal:
        u = diffs / bandwidth.diagonal_scales()[None, None, :]
    else:
        u = diffs @ bandwidth.inverse
    if u.shape[-1] == 2:
        w = k1(u[..., 0]) * k1(u[..., 1])
    else:
        w = np.prod(k1(u), axis=-1)
    return w, u


def _weight_rows(
    eval_points,
    locations,
    bandwidth: BandwidthMatrix,
    kernel: str = "triweight",
    min_neighbors: int | None = None,
    on_singular: str = "raise",
    diffs=None,
):
    """Local linear weight rows for arbitrary evaluation points.

    Returns (rows, bad) where rows is (m, n) and bad lists evaluation-point
    indices with a singular or starved local design. With on_singular
    "raise" any bad point aborts; with "mask" the offending rows are zeroed
    and reported.
    """
    eval_points = np.atleast_2d(np.asarray(eval_points, dtype=np.float64))
    locations = np.asarray(locations, dtype=np.float64)
    m, d = eval_points.shape
    n = locations.shape[0]
    if min_neighbors is None:
        min_neighbors = d + 1

    rows = np.zeros((m, n))
    bad_all = np.zeros(m, dtype=bool)
    counts_all = np.empty(m, dtype=np.int64)
    for start in range(0, m, _EVAL_CHUNK):
        sl = slice(start, min(start + _EVAL_CHUNK, m))
        _weight_rows_chunk(
            eval_points[sl],
            locations,
            bandwidth,
            kernel,
            min_neighbors,
            rows[sl],
            bad_all[sl],
            counts_all[sl],
            None if diffs is None else diffs[sl],
        )

    bad_idx = np.flatnonzero(bad_all)
    if bad_idx.size and on_singular == "raise":
        worst = int(counts_all[bad_idx].min())
        raise BandwidthTooSmallError(
            f"singular local design at {bad_idx.size} evaluation point(s) "
            f"{bad_idx[:8].tolist()}{'...' if bad_idx.size > 8 else ''}; "
            f"smallest effective neighbor count {worst} "
            f"(need >= {min_neighbors})",
            indices=bad_idx.tolist(),
            neighbors=worst,
        )
    return rows, bad_idx.tolist()


def _weight_rows_chunk(
    eval_points, locations, bandwidth, kernel, min_neighbors, rows_out, bad_out,
    counts_out, diffs=None,
):
    m, d = eval_points.shape
    w, u = _scaled_kernel(eval_points, locations, bandwidth, kernel, diffs)
    counts = (w > 0.0).sum(axis=1)
    counts_out[:] = counts
    bad = counts < min_neighbors
    sums = np.where(bad, 1.0, w.sum(axis=1))
    wn = w / sums[:, None]

    # normal-equation moments of the design (1, u_j) with unit-sum weights,
    # so the systems stay O(1) regardless of bandwidth scale
    a = np.empty((m, d + 1, d + 1))
    a[:, 0, 0] = 1.0
    if d == 2:
        u0 = u[..., 0]
        u1 = u[..., 1]
        wu0 = wn * u0
        wu1 = wn * u1
        a[:, 0, 1] = a[:, 1, 0] = wu0.sum(axis=1)
        a[:, 0, 2] = a[:, 2, 0] = wu1.sum(axis=1)
        a[:, 1, 1] = (wu0 * u0).sum(axis=1)
        a[:, 1, 2] = a[:, 2, 1] = (wu0 * u1).sum(axis=1)
        a[:, 2, 2] = (wu1 * u1).sum(axis=1)
    else:
        first = np.einsum("mn,mnd->md", wn, u)
        a[:, 0, 1:] = first
        a[:, 1:, 0] = first
        a[:, 1:, 1:] = np.einsum("mn,mnj,mnk->mjk", wn, u, u)

    good_idx = np.flatnonzero(~bad)
    if good_idx.size:
        coef = _solve_e1(a[good_idx])
        singular = np.flatnonzero(np.isnan(coef[:, 0]))
        if singular.size:
            bad[good_idx[singular]] = True
            good_idx = np.flatnonzero(~bad)
            coef = np.delete(coef, singular, axis=0)
        if good_idx.size:
            if d == 2:
                rows_out[good_idx] = wn[good_idx] * (
                    coef[:, :1]
                    + coef[:, 1:2] * u0[good_idx]
                    + coef[:, 2:3] * u1[good_idx]
                )
            else:
                rows_out[good_idx] = wn[good_idx] * (
                    coef[:, :1] + np.einsum("mk,mnk->mn", coef[:, 1:], u[good_idx])
                )
    bad_out[:] = bad


def _solve_e1(a):
    """Solve A c = e1 for a stack of small SPD-ish systems.

    Falls back to a scaled ridge on rows whose pivots underflow; rows that
    stay singular come back as NaN.
    """
    m, p, _ = a.shape
    e1 = np.zeros((m, p))
    e1[:, 0] = 1.0
    out = np.full((m, p), np.nan)
    try:
        out = np.linalg.solve(a, e1[..., None])[..., 0]
    except np.linalg.LinAlgError:
        for i in range(m):
            out[i] = _solve_e1_single(a[i])
        return out
    # batched solve succeeded but may contain garbage for ill-conditioned
    # rows on some BLAS builds; validate via the residual of the first column
    resid = np.abs(np.einsum("mij,mj->mi", a, out) - e1).max(axis=1)
    shaky = np.flatnonzero(~np.isfinite(resid) | (resid > 1e-6))
    for i in shaky:
        out[i] = _solve_e1_single(a[i])
    return out


def _solve_e1_single(a):
    p = a.shape[0]
    e1 = np.zeros(p)
    e1[0] = 1.0
    for attempt in range(2):
        mat = a if attempt == 0 else a + _LOCAL_RIDGE * np.trace(a) * np.eye(p)
        try:
            sol = np.linalg.solve(mat, e1)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(sol)):
            return sol
    return np.full(p, np.nan)


def local_linear_weights(
    sample: SpatialSample,
    x,
    bandwidth: BandwidthMatrix,
    kernel: str = "triweight",
) -> np.ndarray:
    """Weight vector s_x mapping observations to the fitted value at x.

    The weights reproduce affine functions: they sum to one and are
    orthogonal to the centered coordinates.
    """
    rows, _ = _weight_rows(
        np.asarray(x, dtype=np.float64)[None, :],
        sample.locations,
        bandwidth,
        kernel,
    )
    return rows[0]


def smoother_matrix(
    sample: SpatialSample,
    bandwidth: BandwidthMatrix,
    kernel: str = "triweight",
) -> SmootherMatrix:
    """Hat matrix with row i equal to the weight vector at sample site i."""
    rows, _ = _weight_rows(sample.locations, sample.locations, bandwidth, kernel)
    return SmootherMatrix(S=rows, bandwidth=bandwidth, kernel=kernel)


def apply_smoother(smoother: SmootherMatrix, sample: SpatialSample) -> TrendFit:
    """Build a TrendFit from a precomputed smoother (fixed-design reuse)."""
    fitted = smoother.S @ sample.values
    return TrendFit(
        sample=sample,
        smoother=smoother,
        fitted=fitted,
        residuals=sample.values - fitted,
    )


def fit_trend(
    sample: SpatialSample,
    bandwidth: BandwidthMatrix,
    kernel: str = "triweight",
) -> TrendFit:
    """Fit the trend at the sample sites and return fitted values/residuals."""
    return apply_smoother(smoother_matrix(sample, bandwidth, kernel), sample)


def prediction_weights(
    fit: TrendFit,
    targets,
    on_singular: str = "raise",
):
    """Weight rows mapping observations to trend predictions at targets.

    Returns (rows, bad_indices); with on_singular "mask" failed targets get
    zero rows and are listed instead of raising.
    """
    pts = targets.nodes() if isinstance(targets, RegularGrid) else np.atleast_2d(targets)
    return _weight_rows(
        pts,
        fit.sample.locations,
        fit.smoother.bandwidth,
        fit.smoother.kernel,
        on_singular=on_singular,
    )


def predict_trend(fit: TrendFit, targets) -> np.ndarray:
    """Trend estimate at target points, using the bandwidth of the fit."""
    rows, _ = prediction_weights(fit, targets)
    return rows @ fit.sample.values


# ---------------------------------------------------------------------------
# Bandwidth selection criteria
# ---------------------------------------------------------------------------


def _residual_scores(sample, smoother):
    resid = sample.values - smoother.S @ sample.values
    return resid


def cv_score(sample: SpatialSample, bandwidth, kernel: str = "triweight") -> float:
    """Leave-one-out CV via the hat-diagonal shortcut (exact for linear
    smoothers)."""
    s = bandwidth if isinstance(bandwidth, SmootherMatrix) else smoother_matrix(sample, bandwidth, kernel)
    resid = _residual_scores(sample, s)
    denom = 1.0 - np.diag(s.S)
    if np.any(denom <= 1e-12):
        raise BandwidthTooSmallError(
            "hat diagonal reaches one; bandwidth too small for leave-one-out"
        )
    return float(np.mean((resid / denom) ** 2))


def gcv_score(sample: SpatialSample, bandwidth, kernel: str = "triweight") -> float:
    """Generalized cross-validation score."""
    s = bandwidth if isinstance(bandwidth, SmootherMatrix) else smoother_matrix(sample, bandwidth, kernel)
    resid = _residual_scores(sample, s)
    denom = 1.0 - s.trace / s.n
    if denom <= 1e-12:
        raise BandwidthTooSmallError("tr(S)/n reaches one; bandwidth too small")
    return float(np.mean((resid / denom) ** 2))


def cgcv_score(
    sample: SpatialSample,
    bandwidth,
    correlation: np.ndarray,
    kernel: str = "triweight",
) -> float:
    """Dependence-corrected GCV: the denominator uses tr(S R)/n so that
    positively correlated errors no longer reward undersmoothing."""
    s = bandwidth if isinstance(bandwidth, SmootherMatrix) else smoother_matrix(sample, bandwidth, kernel)
    r = np.asarray(correlation, dtype=np.float64)
    denom = 1.0 - float(np.einsum("ij,ji->", s.S, r)) / s.n
    if denom <= 1e-12:
        raise BandwidthTooSmallError(
            "tr(S R)/n reaches one; bandwidth too small for the given dependence"
        )
    resid = _residual_scores(sample, s)
    return float(np.mean((resid / denom) ** 2))


def mase_score(
    sample: SpatialSample,
    bandwidth,
    true_mean: np.ndarray,
    covariance: np.ndarray,
    kernel: str = "triweight",
) -> float:
    """Mean average squared error of the smoother against a known truth:
    squared-bias term plus tr(S Sigma S^T)/n. Simulation oracle only."""
    s = bandwidth if isinstance(bandwidth, SmootherMatrix) else smoother_matrix(sample, bandwidth, kernel)
    m = np.asarray(true_mean, dtype=np.float64)
    sigma = np.asarray(covariance, dtype=np.float64)
    bias = s.S @ m - m
    var_term = float(np.einsum("ij,ij->", s.S @ sigma, s.S))
    return float(bias @ bias + var_term) / s.n


# ---------------------------------------------------------------------------
# Bandwidth search
# ---------------------------------------------------------------------------


def median_nn_spacing(locations) -> float:
    locs = np.asarray(locations, dtype=np.float64)
    n = locs.shape[0]
    if n < 2:
        raise ConfigError("need at least two sites for a bandwidth grid")
    sq = np.sum(locs**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * locs @ locs.T
    np.fill_diagonal(d2, np.inf)
    return float(np.median(np.sqrt(np.maximum(d2.min(axis=1), 0.0))))


def default_bandwidth_grid(sample: SpatialSample, per_axis: int = 10):
    """Log-spaced diagonal bandwidth grid from half the median nearest
    neighbor spacing up to the full data range per axis."""
    delta = median_nn_spacing(sample.locations)
    lo = 0.5 * delta
    grids = []
    for axis in range(sample.d):
        span = float(np.ptp(sample.locations[:, axis]))
        hi = max(span, 2.0 * lo)
        grids.append(np.geomspace(lo, hi, per_axis))
    axes = np.meshgrid(*grids, indexing="ij")
    combos = np.stack([a.ravel() for a in axes], axis=-1)
    return [BandwidthMatrix.diagonal(*row) for row in combos]


_CRITERIA = ("cv", "gcv", "cgcv", "mase")


def select_bandwidth(
    sample: SpatialSample,
    criterion: str,
    search_grid=None,
    *,
    correlation=None,
    true_mean=None,
    covariance=None,
    kernel: str = "triweight",
):
    """Exhaustive criterion minimization over a diagonal bandwidth grid.

    Inadmissible grid points (fewer than 3(d+1) kernel neighbors somewhere,
    or a degenerate criterion denominator) are skipped. Ties go to the
    larger determinant, i.e. the smoother fit. Raises if nothing on the
    grid is admissible, reporting the smallest admissible scale found by
    doubling the largest candidate.
    """
    if criterion not in _CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}; expected one of {_CRITERIA}")
    if criterion == "cgcv" and correlation is None:
        raise ConfigError("cgcv requires a correlation matrix")
    if criterion == "mase" and (true_mean is None or covariance is None):
        raise ConfigError("mase requires true_mean and covariance")
    if search_grid is None:
        search_grid = default_bandwidth_grid(sample)
    search_grid = list(search_grid)
    if not search_grid:
        raise ConfigError("empty bandwidth search grid")

    min_neighbors = _MIN_NEIGHBORS_FACTOR * (sample.d + 1)
    # the candidate loop re-smooths the same points; share the difference
    # tensor across candidates when it fits comfortably in memory
    diffs = None
    if sample.n * sample.n <= 4_000_000:
        diffs = sample.locations[None, :, :] - sample.locations[:, None, :]
    best = None
    for h in search_grid:
        score = _try_criterion(
            sample, h, criterion, correlation, true_mean, covariance, kernel,
            min_neighbors, diffs,
        )
        if score is None:
            continue
        if best is None:
            best = (score, h)
            continue
        tol = 1e-12 * max(1.0, abs(score), abs(best[0]))
        if score < best[0] - tol:
            best = (score, h)
        elif abs(score - best[0]) <= tol and h.det > best[1].det:
            best = (score, h)
    if best is not None:
        return best[1]

    # nothing admissible: probe upward from the largest candidate and report
    probe = max(search_grid, key=lambda h: h.det)
    scales = probe.diagonal_scales() if probe.is_diagonal else np.diag(probe.entries)
    for _ in range(40):
        scales = scales * 2.0
        h = BandwidthMatrix.diagonal(*scales)
        if (
            _try_criterion(
                sample, h, criterion, correlation, true_mean, covariance, kernel,
                min_neighbors, diffs,
            )
            is not None
        ):
            raise BandwidthTooSmallError(
                "no admissible bandwidth on the search grid; smallest admissible "
                f"diagonal found by doubling is {scales.tolist()}"
            )
    raise BandwidthTooSmallError(
        "no admissible bandwidth on the search grid and doubling the largest "
        "candidate 40 times did not help"
    )


def _try_criterion(
    sample, h, criterion, correlation, true_mean, covariance, kernel, min_neighbors,
    diffs=None,
):
    try:
        rows, _ = _weight_rows(
            sample.locations,
            sample.locations,
            h,
            kernel,
            min_neighbors=min_neighbors,
            diffs=diffs,
        )
    except BandwidthTooSmallError:
        return None
    s = SmootherMatrix(S=rows, bandwidth=h, kernel=kernel)
    try:
        if criterion == "cv":
            return cv_score(sample, s)
        if criterion == "gcv":
            return gcv_score(sample, s)
        if criterion == "cgcv":
            return cgcv_score(sample, s, correlation)
        return mase_score(sample, s, true_mean, covariance)
    except BandwidthTooSmallError:
        return None
