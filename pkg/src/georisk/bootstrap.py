"""Semiparametric bootstrap for unconditional exceedance-probability maps.

The pipeline alternates trend and variogram estimation (independence CV for
the initial bandwidth, dependence-corrected GCV afterwards), factorizes both
the residual-scale and bias-corrected covariance estimates, and then
resamples decorrelated residuals: each replicate recorrelates a resample,
rebuilds responses around the fitted trend, re-smooths them with the same
bandwidth, and adds simple kriging of the replicate's residuals. Exceedance
probabilities are replicate frequencies per map node.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DegenerateScoreError, GeoriskError
from .geometry import BandwidthMatrix, RegularGrid, SpatialSample, pairwise_distances
from .kriging import KrigingSystem, covariance_to_targets
from .numerics import CholeskyFactor, cholesky, solve_lower, solve_spd
from .trend import (
    TrendFit,
    default_bandwidth_grid,
    fit_trend,
    prediction_weights,
    select_bandwidth,
)
from .variogram import (
    BiasCorrectionReport,
    EmpiricalVariogram,
    GAUSSIAN_DIM,
    VariogramModel,
    bias_corrected_variogram,
    correlation_matrix,
    covariance_matrix,
    default_lag_bandwidths,
    default_lag_grid,
    empirical_variogram,
    fit_shapiro_botha,
    select_lag_bandwidth,
)

STREAM_FIELD = 1
STREAM_BOOT = 2
STREAM_SYNTH = 3

_REPLICATE_CHUNK = 128


def rng_stream(seed: int, *path: int) -> np.random.Generator:
    """Deterministic, scheduling-independent generator for (seed, path)."""
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))


# ---------------------------------------------------------------------------
# Pipeline configuration and fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    kernel: str = "triweight"
    bandwidth_per_axis: int = 10
    max_outer: int = 2
    h_tol: float = 0.01
    n_lags: int = 25
    lag_candidates: int = 10
    kernel_dim: float = GAUSSIAN_DIM
    n_nodes: int | None = None
    bias_max_iter: int = 5
    bias_tol: float = 1e-3
    min_pairs: int = 5


@dataclass(frozen=True)
class PipelineReport:
    outer_iterations: int
    h_history: tuple
    h_converged: bool
    lag_bandwidth: float
    bias: BiasCorrectionReport | None
    notes: tuple = ()


@dataclass(frozen=True, eq=False)
class PipelineFit:
    """Everything the bootstrap needs: the fitted trend, both variogram
    models, their covariance factors, and a reusable kriging system built
    on the bias-corrected model."""

    sample: SpatialSample
    trend_fit: TrendFit
    bandwidth: BandwidthMatrix
    lag_grid: np.ndarray
    lag_bandwidth: float
    pilot_uncorrected: EmpiricalVariogram
    pilot_corrected: EmpiricalVariogram
    residual_model: VariogramModel
    corrected_model: VariogramModel
    residual_factor: CholeskyFactor
    corrected_factor: CholeskyFactor
    kriging: KrigingSystem
    report: PipelineReport


@contextmanager
def _stage(label: str):
    try:
        yield
    except GeoriskError as err:
        err.stage = label
        message = err.args[0] if err.args else ""
        err.args = (f"[{label}] {message}",) + err.args[1:]
        raise


def _h_scales(h: BandwidthMatrix) -> np.ndarray:
    return h.diagonal_scales() if h.is_diagonal else np.diag(h.entries)


def _rel_change(old: BandwidthMatrix, new: BandwidthMatrix) -> float:
    a = _h_scales(old)
    b = _h_scales(new)
    return float(np.max(np.abs(b - a) / np.maximum(np.abs(a), 1e-300)))


def fit_pipeline(
    sample: SpatialSample,
    config: PipelineConfig | None = None,
    *,
    bandwidth: BandwidthMatrix | None = None,
) -> PipelineFit:
    """Alternating trend/variogram fit.

    Without an explicit ``bandwidth`` the first pass selects it by CV under
    an independence working assumption; each further pass re-selects it with
    the dependence-corrected GCV built from the current bias-corrected
    covariance estimate, stopping after ``max_outer`` passes or when the
    bandwidth moves by less than ``h_tol`` per axis. An explicit bandwidth
    pins the smoother and runs a single pass.
    """
    cfg = config or PipelineConfig()
    notes: list[str] = []
    with _stage("distances"):
        dists = pairwise_distances(sample)
        lag_grid = default_lag_grid(dists, cfg.n_lags)

    search_grid = None
    if bandwidth is None:
        search_grid = default_bandwidth_grid(sample, cfg.bandwidth_per_axis)
        with _stage("initial bandwidth (independence CV)"):
            h = select_bandwidth(sample, "cv", search_grid, kernel=cfg.kernel)
        max_outer = max(1, cfg.max_outer)
    else:
        h = bandwidth
        max_outer = 1

    h_history = [tuple(_h_scales(h))]
    h_converged = False
    outer = 0
    while True:
        outer += 1
        with _stage("trend"):
            trend = fit_trend(sample, h, cfg.kernel)
        with _stage("lag bandwidth"):
            g = _select_lag_bandwidth_with_fallback(
                trend.residuals, dists, lag_grid, cfg, notes
            )
        with _stage("variogram (uncorrected)"):
            pilot_unc = empirical_variogram(
                trend.residuals, dists, lag_grid, g, min_pairs=cfg.min_pairs
            )
            residual_model = fit_shapiro_botha(pilot_unc, cfg.kernel_dim, cfg.n_nodes)
        with _stage("variogram (bias-corrected)"):
            pilot_corr = bias_corrected_variogram(
                trend, dists, lag_grid, g,
                max_iter=cfg.bias_max_iter, tol=cfg.bias_tol, min_pairs=cfg.min_pairs,
            )
            corrected_model = fit_shapiro_botha(pilot_corr, cfg.kernel_dim, cfg.n_nodes)

        if outer >= max_outer:
            break
        if corrected_model.sill <= 1e-14 * max(1.0, float(np.var(sample.values))):
            notes.append("flat corrected variogram; dependence-aware reselection skipped")
            h_converged = True
            break
        with _stage("bandwidth refresh (CGCV)"):
            sigma = covariance_matrix(corrected_model, dists)
            corr = correlation_matrix(sigma)
            h_new = select_bandwidth(
                sample, "cgcv", search_grid, correlation=corr, kernel=cfg.kernel
            )
        h_history.append(tuple(_h_scales(h_new)))
        if _rel_change(h, h_new) < cfg.h_tol:
            h_converged = True
            break
        h = h_new

    with _stage("covariance factorization"):
        sigma_resid = covariance_matrix(residual_model, dists)
        residual_factor = cholesky(sigma_resid, ridge_policy="auto")
        sigma_corr = covariance_matrix(corrected_model, dists)
        corrected_factor = cholesky(sigma_corr, ridge_policy="auto")

    kriging = KrigingSystem(
        locations=sample.locations, factor=corrected_factor, model=corrected_model
    )
    report = PipelineReport(
        outer_iterations=outer,
        h_history=tuple(h_history),
        h_converged=h_converged,
        lag_bandwidth=g,
        bias=pilot_corr.report,
        notes=tuple(notes),
    )
    return PipelineFit(
        sample=sample,
        trend_fit=trend,
        bandwidth=h,
        lag_grid=lag_grid,
        lag_bandwidth=g,
        pilot_uncorrected=pilot_unc,
        pilot_corrected=pilot_corr,
        residual_model=residual_model,
        corrected_model=corrected_model,
        residual_factor=residual_factor,
        corrected_factor=corrected_factor,
        kriging=kriging,
        report=report,
    )


def _select_lag_bandwidth_with_fallback(residuals, dists, lag_grid, cfg, notes):
    candidates = default_lag_bandwidths(dists, cfg.lag_candidates)
    try:
        return select_lag_bandwidth(
            residuals, dists, lag_grid, candidates, min_pairs=cfg.min_pairs
        )
    except DegenerateScoreError:
        # residuals carry no usable variation (e.g. noise-free affine data);
        # the widest candidate keeps every lag admissible
        g = float(np.max(candidates))
        notes.append(
            f"lag-bandwidth cross-validation degenerate; fell back to {g:.6g}"
        )
        return g


def decorrelate_residuals(fit: PipelineFit) -> np.ndarray:
    """Residuals whitened by the residual-scale factor, then centered."""
    e = solve_lower(fit.residual_factor, fit.trend_fit.residuals)
    return e - e.mean()


# ---------------------------------------------------------------------------
# Bootstrap engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapEngine:
    """Precomputed pieces shared by all replicates of one map.

    ``target_rows`` are the trend-smoother rows at the (unmasked) targets,
    ``c0`` the kriging covariances to those targets; ``recorr`` is the
    lower factor used to recorrelate resampled residuals.
    """

    fitted: np.ndarray
    smoother: np.ndarray
    target_rows: np.ndarray
    c0: np.ndarray
    recorr: np.ndarray
    factor: CholeskyFactor
    e: np.ndarray

    @property
    def n(self) -> int:
        return self.fitted.shape[0]

    @property
    def n_targets(self) -> int:
        return self.target_rows.shape[0]

    def replicate_values(self, idx: np.ndarray) -> np.ndarray:
        """Map-node values for a block of resampling index rows."""
        e_star = self.e[idx]  # (b, n)
        eps_star = e_star @ self.recorr.T
        y_star = self.fitted[None, :] + eps_star
        resid_star = y_star - y_star @ self.smoother.T
        alpha = solve_spd(self.factor, resid_star.T)  # (n, b)
        return y_star @ self.target_rows.T + alpha.T @ self.c0.T

    def run(self, n_replicates: int, seed: int, threads: int = 1) -> np.ndarray:
        """(B, n_targets) matrix of replicate values, reproducible for a
        given seed regardless of the thread count."""
        if n_replicates < 1:
            raise ConfigError("need at least one bootstrap replicate")
        n = self.n
        idx = np.empty((n_replicates, n), dtype=np.intp)
        for j in range(n_replicates):
            idx[j] = rng_stream(seed, STREAM_BOOT, j).integers(0, n, size=n)
        out = np.empty((n_replicates, self.n_targets))
        slices = [
            slice(s, min(s + _REPLICATE_CHUNK, n_replicates))
            for s in range(0, n_replicates, _REPLICATE_CHUNK)
        ]
        if threads <= 1:
            for sl in slices:
                out[sl] = self.replicate_values(idx[sl])
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda sl: out.__setitem__(sl, self.replicate_values(idx[sl])), slices))
        return out


def _build_engine(
    trend_fit: TrendFit,
    targets: np.ndarray,
    decorr_factor: CholeskyFactor,
    recorr_factor: CholeskyFactor,
    kriging: KrigingSystem,
):
    """Engine plus target mask; masked targets had singular local designs."""
    rows, bad = prediction_weights(trend_fit, targets, on_singular="mask")
    mask = np.zeros(len(targets), dtype=bool)
    mask[bad] = True
    keep = ~mask
    c0 = covariance_to_targets(kriging, targets[keep])
    e = solve_lower(decorr_factor, trend_fit.residuals)
    e = e - e.mean()
    engine = BootstrapEngine(
        fitted=trend_fit.fitted,
        smoother=trend_fit.smoother.S,
        target_rows=rows[keep],
        c0=c0,
        recorr=recorr_factor.L,
        factor=kriging.factor,
        e=e,
    )
    return engine, mask


def bootstrap_replicate(fit: PipelineFit, e: np.ndarray, rng: np.random.Generator, targets) -> np.ndarray:
    """One bootstrap replicate evaluated at ``targets`` (no masking)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    rows, _ = prediction_weights(fit.trend_fit, targets)
    c0 = covariance_to_targets(fit.kriging, targets)
    engine = BootstrapEngine(
        fitted=fit.trend_fit.fitted,
        smoother=fit.trend_fit.smoother.S,
        target_rows=rows,
        c0=c0,
        recorr=fit.corrected_factor.L,
        factor=fit.kriging.factor,
        e=np.asarray(e, dtype=np.float64),
    )
    idx = rng.integers(0, engine.n, size=engine.n)
    return engine.replicate_values(idx[None, :])[0]


# ---------------------------------------------------------------------------
# Risk maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RiskMap:
    """Per-node exceedance probabilities; masked nodes are NaN."""

    grid: RegularGrid
    threshold: float
    probabilities: np.ndarray
    n_replicates: int
    seed: int
    n_masked: int = 0


def _maps_from_values(grid, values, mask, thresholds, n_replicates, seed):
    maps = []
    keep = ~mask
    for c in thresholds:
        probs = np.full(mask.shape[0], np.nan)
        probs[keep] = (values >= c).mean(axis=0)
        maps.append(
            RiskMap(
                grid=grid,
                threshold=float(c),
                probabilities=probs,
                n_replicates=n_replicates,
                seed=seed,
                n_masked=int(mask.sum()),
            )
        )
    return maps


def risk_maps(
    fit: PipelineFit,
    grid: RegularGrid,
    thresholds,
    n_replicates: int = 1000,
    seed: int = 0,
    threads: int = 1,
) -> list[RiskMap]:
    """Exceedance-probability maps for several thresholds from one shared
    replicate matrix (probabilities are monotone across thresholds)."""
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    engine, mask = _build_engine(
        fit.trend_fit, grid.nodes(), fit.residual_factor, fit.corrected_factor, fit.kriging
    )
    values = engine.run(n_replicates, seed, threads)
    return _maps_from_values(grid, values, mask, thresholds, n_replicates, seed)


def risk_map(
    fit: PipelineFit,
    grid: RegularGrid,
    threshold: float,
    n_replicates: int = 1000,
    seed: int = 0,
    threads: int = 1,
) -> RiskMap:
    """Single-threshold convenience wrapper around risk_maps."""
    return risk_maps(fit, grid, [threshold], n_replicates, seed, threads)[0]


MODES = ("theoretical", "residual", "corrected")


def risk_map_mode(
    sample: SpatialSample,
    mode: str,
    grid: RegularGrid,
    thresholds,
    n_replicates: int = 1000,
    seed: int = 0,
    *,
    config: PipelineConfig | None = None,
    fit: PipelineFit | None = None,
    true_model=None,
    bandwidth: BandwidthMatrix | None = None,
    threads: int = 1,
) -> list[RiskMap]:
    """Bootstrap maps with the covariance role played by a chosen estimate.

    Decorrelation always whitens with the residual-scale factor; the modes
    differ in the covariance used to recorrelate and krige: the
    bias-corrected model ("corrected", the full pipeline), the raw
    residual-scale model ("residual"), or a known true model
    ("theoretical", only available when ``true_model`` and a bandwidth are
    supplied by a simulation harness).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    thresholds = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))

    if mode == "theoretical":
        if true_model is None or bandwidth is None:
            raise ConfigError(
                "theoretical mode needs the simulation truth (true_model and bandwidth)"
            )
        if fit is None:
            fit = fit_pipeline(sample, config, bandwidth=bandwidth)
        dists = pairwise_distances(sample)
        sigma = covariance_matrix(true_model, dists)
        factor = cholesky(sigma, ridge_policy="auto")
        kriging = KrigingSystem(locations=sample.locations, factor=factor, model=true_model)
        engine, mask = _build_engine(
            fit.trend_fit, grid.nodes(), fit.residual_factor, factor, kriging
        )
        values = engine.run(n_replicates, seed, threads)
        return _maps_from_values(grid, values, mask, thresholds, n_replicates, seed)

    if fit is None:
        fit = fit_pipeline(sample, config, bandwidth=bandwidth)
    if mode == "corrected":
        return risk_maps(fit, grid, thresholds, n_replicates, seed, threads)
    # residual mode: decorrelate and recorrelate at the residual scale
    kriging = KrigingSystem(
        locations=fit.sample.locations,
        factor=fit.residual_factor,
        model=fit.residual_model,
    )
    engine, mask = _build_engine(
        fit.trend_fit, grid.nodes(), fit.residual_factor, fit.residual_factor, kriging
    )
    values = engine.run(n_replicates, seed, threads)
    return _maps_from_values(grid, values, mask, thresholds, n_replicates, seed)
