"""Scoring, the method-by-noise benchmark grid, and latent-space trajectory analysis."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import (
    LinearStateModel,
    WindowFilterConfig,
    ekf_filter,
    ema_filter,
    kalman_filter,
    particle_filter,
    per_channel,
    window_filter,
)
from .errors import ContractError
from .model import CbdaeModel, sliding_windows
from .quadtank import NoiseSpec, SimDataset, TankParams, corrupt, excite, Excitation, simulate
from .training import VARIANTS, TrainConfig, train

log = logging.getLogger(__name__)

SIGMA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0)

# Published average RMSE per method at each entry of SIGMA_GRID; kept as a
# reference column only.
PAPER_RMSE = {
    "noisy": (2.165, 2.406, 2.572, 2.850, 3.121, 3.515, 3.929, 4.277),
    "mean": (1.254, 1.269, 1.381, 1.475, 1.634, 1.777, 1.911, 2.115),
    "median": (0.803, 0.917, 1.117, 1.337, 1.583, 1.785, 2.019, 2.173),
    "savitzky_golay": (1.303, 1.313, 1.473, 1.560, 1.757, 1.907, 2.04, 2.207),
    "ema": (1.244, 1.264, 1.375, 1.469, 1.630, 1.773, 1.913, 2.089),
    "kf": (2.005, 2.108, 2.176, 2.259, 2.324, 2.445, 2.548, 2.581),
    "pf": (1.708, 1.774, 1.986, 2.088, 2.334, 2.560, 2.797, 3.026),
    "ekf": (1.773, 1.846, 1.956, 2.041, 2.187, 2.342, 2.497, 2.603),
    "BDAE_NoReg": (0.671, 0.502, 0.577, 0.638, 0.663, 0.647, 0.779, 0.641),
    "BDAE_L1": (0.668, 0.572, 0.58, 0.587, 0.588, 0.668, 0.566, 0.620),
    "CBDAE_h": (0.392, 0.313, 0.326, 0.445, 0.521, 0.569, 0.741, 0.602),
    "CBDAE": (0.276, 0.318, 0.355, 0.394, 0.407, 0.518, 0.489, 0.542),
}

METHOD_LABELS = {
    "noisy": "Original Noisy input",
    "identity": "Identity (pass-through)",
    "mean": "Mean F.",
    "median": "Median F.",
    "savitzky_golay": "SG",
    "ema": "EMA",
    "kf": "KF",
    "ekf": "EKF",
    "pf": "PF",
    "BDAE_NoReg": "BDAE_NoReg",
    "BDAE_L1": "BDAE_L1",
    "CBDAE_h": "CBDAE_h",
    "CBDAE": "CBDAE",
}
CLASSICAL = ("noisy", "identity", "mean", "median", "savitzky_golay", "ema", "kf", "ekf", "pf")
WINDOW_METHODS = ("mean", "median", "savitzky_golay")
METHODS = CLASSICAL + VARIANTS


def paper_reference(method: str, sigma: float) -> float:
    """Published value for a grid cell, NaN when the cell is not in the published grid."""
    row = PAPER_RMSE.get(method)
    for s, v in zip(SIGMA_GRID, row or ()):
        if math.isclose(s, sigma):
            return v
    return math.nan


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RmseResult:
    per_channel: np.ndarray
    average: float


def rmse(clean, estimate, warmup: int = 0) -> RmseResult:
    """Per-channel RMSE over rows ``warmup:``, and its mean over channels."""
    clean = np.asarray(clean, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if clean.shape != estimate.shape:
        raise ContractError(f"length mismatch: clean {clean.shape} vs estimate {estimate.shape}")
    if clean.ndim == 1:
        clean, estimate = clean[:, None], estimate[:, None]
    if warmup < 0 or warmup >= clean.shape[0]:
        raise ContractError(f"warm-up of {warmup} leaves no rows to score")
    err = estimate[warmup:] - clean[warmup:]
    if not np.all(np.isfinite(err)):
        raise ContractError("estimates must be defined after the warm-up")
    per = np.sqrt(np.mean(err**2, axis=0))
    return RmseResult(per, float(per.mean()))


# ---------------------------------------------------------------------------
# benchmark grid


@dataclass
class BenchCell:
    method: str
    sigma: float
    rmse: float
    paper_reference: float
    runtime_s: float
    detail: str = ""

    @property
    def present(self) -> bool:
        return math.isfinite(self.rmse)


@dataclass
class BenchReport:
    cells: list[BenchCell]
    meta: dict = field(default_factory=dict)

    def get(self, method: str, sigma: float) -> BenchCell:
        for c in self.cells:
            if c.method == method and math.isclose(c.sigma, sigma):
                return c
        raise KeyError((method, sigma))

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def sigmas(self) -> list[float]:
        return sorted({c.sigma for c in self.cells})

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "sigma", "rmse", "paper_reference", "runtime_s"])
            for c in self.cells:
                w.writerow([c.method, repr(c.sigma), _fmt(c.rmse), _fmt(c.paper_reference), f"{c.runtime_s:.6f}"])

    @classmethod
    def from_csv(cls, path) -> BenchReport:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        cells = [
            BenchCell(r["method"], float(r["sigma"]), float(r["rmse"] or "nan"), float(r["paper_reference"] or "nan"), float(r["runtime_s"]))
            for r in rows
        ]
        return cls(cells)

    def table(self) -> str:
        """Plain-text grid: one row per method, ``measured (reference)`` per noise level."""
        sig = self.sigmas()
        head = ["method"] + [f"sigma={s:g}" for s in sig]
        rows = [head]
        for m in self.methods():
            row = [METHOD_LABELS.get(m, m)]
            for s in sig:
                c = self.get(m, s)
                ref = "" if math.isnan(c.paper_reference) else f" ({c.paper_reference:.3f})"
                row.append(("absent" if not c.present else f"{c.rmse:.3f}") + ref)
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(v.ljust(wd) for v, wd in zip(r, widths)) for r in rows)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


@dataclass
class BenchConfig:
    """Settings for the classical methods; the window lengths are scanned and the best is reported."""

    windows: tuple[int, ...] = tuple(range(3, 32, 2))
    sg_order: int = 2
    ema_alpha: float = 0.33
    kf_q: float = 1e-3
    particles: int = 1000
    warmup: int | None = None  # defaults to the longest model window minus one
    tank: TankParams = field(default_factory=TankParams)


def _window_best(noisy, clean, kind, cfg: BenchConfig, warmup):
    best = None
    for w in cfg.windows:
        if kind == "savitzky_golay" and w <= cfg.sg_order:
            continue
        est = per_channel(window_filter, noisy, WindowFilterConfig(kind, w, cfg.sg_order))
        score = rmse(clean, est, warmup).average
        if best is None or score < best[0]:
            best = (score, w)
    return best[0], f"w={best[1]}"


def _classical(method, ds: SimDataset, test: slice, cfg: BenchConfig, warmup, seed_seq) -> tuple[float, str]:
    noisy, clean, u = ds.y_noisy[test], ds.y[test], ds.u[test]
    sigma = max(ds.sigma, 1e-3)
    if method in ("noisy", "identity"):
        est = noisy.copy()
        return rmse(clean, est, warmup).average, ""
    if method in WINDOW_METHODS:
        return _window_best(noisy, clean, method, cfg, warmup)
    if method == "ema":
        return rmse(clean, per_channel(ema_filter, noisy, cfg.ema_alpha), warmup).average, f"alpha={cfg.ema_alpha}"
    train_lo, train_hi = ds.split_bounds()["train"]
    u_op = ds.u[train_lo:train_hi].mean(axis=0)
    R = sigma**2 * np.eye(4)
    Q = cfg.kf_q * np.eye(4)
    if method == "kf":
        model = LinearStateModel.from_tanks(cfg.tank, u_op, sigma, cfg.kf_q)
        return rmse(clean, kalman_filter(noisy, u, model).outputs, warmup).average, ""
    if method == "ekf":
        return rmse(clean, ekf_filter(noisy, u, cfg.tank, Q, R).outputs, warmup).average, ""
    if method == "pf":
        rng = np.random.default_rng(seed_seq)
        est = particle_filter(noisy, u, cfg.tank, Q, R, cfg.particles, rng)
        return rmse(clean, est, warmup).average, f"particles={cfg.particles}"
    raise ContractError(f"unknown method {method!r}")


def run_benchmark(
    datasets: dict[float, SimDataset],
    methods=CLASSICAL,
    config: BenchConfig | None = None,
    seed: int = 0,
    models: dict | None = None,
    jobs: int = 1,
) -> BenchReport:
    """Score every (method, sigma) pair on the test split of each dataset.

    ``models`` maps ``(variant, sigma)`` to a trained :class:`CbdaeModel`;
    variants without a model are reported as absent cells. All methods are
    scored on the same rows: the test split minus a common warm-up.
    """
    config = config or BenchConfig()
    models = dict(models or {})
    methods = list(dict.fromkeys(methods))
    for m in methods:
        if m not in METHODS:
            raise ContractError(f"unknown method {m!r}; choose from {METHODS}")
    windows = [mdl.arch.window for mdl in models.values()]
    warmup = config.warmup if config.warmup is not None else max(windows, default=1) - 1
    sigmas = sorted(datasets)

    jobs_list = []
    for si, sigma in enumerate(sigmas):
        for mi, method in enumerate(methods):
            jobs_list.append((si, sigma, mi, method))

    def run(job):
        si, sigma, mi, method = job
        ds = datasets[sigma]
        lo, hi = ds.split_bounds()["test"]
        test = slice(lo, hi)
        t0 = time.perf_counter()
        try:
            if method in VARIANTS:
                mdl = models.get((method, sigma))
                if mdl is None:
                    return BenchCell(method, sigma, math.nan, paper_reference(method, sigma), 0.0, "absent: no trained model")
                est = mdl.denoise_series(ds.split("test").values)[:, 2:]
                score, detail = rmse(ds.y[test], _fill_warmup(est, ds.y_noisy[test]), warmup).average, ""
            else:
                score, detail = _classical(method, ds, test, config, warmup, [seed, si, mi])
        except Exception as exc:  # one failing cell must not sink the grid
            log.error("cell (%s, %s) failed: %s", method, sigma, exc)
            return BenchCell(method, sigma, math.nan, paper_reference(method, sigma), time.perf_counter() - t0, f"absent: {exc}")
        return BenchCell(method, sigma, score, paper_reference(method, sigma), time.perf_counter() - t0, detail)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(run, jobs_list))
    else:
        cells = [run(j) for j in jobs_list]
    cells.sort(key=lambda c: (methods.index(c.method), c.sigma))
    meta = {"seed": seed, "warmup": warmup, "methods": methods, "sigmas": sigmas}
    return BenchReport(cells, meta)


def _fill_warmup(est: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    out = est.copy()
    bad = ~np.isfinite(out)
    out[bad] = fallback[bad]
    return out


# ---------------------------------------------------------------------------
# latent traces


@dataclass
class LatentTrace:
    latents: np.ndarray  # (n, d)
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,)
    projection: np.ndarray  # (n, k)
    label: str = ""

    def to_csv(self, path) -> None:
        write_traces_csv(path, [self])


def pca_project(latents, dims: int = 2, label: str = "", rtol: float = 1e-10) -> LatentTrace:
    """Project mean-centred vectors onto their top ``dims`` principal directions."""
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("need at least two latent vectors of equal dimension")
    mean = X.mean(axis=0)
    Xc = X - mean
    evals, evecs = np.linalg.eigh(Xc.T @ Xc / (X.shape[0] - 1))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = min(dims, int(np.sum(evals > rtol * max(evals[0], 0.0))) if evals[0] > 0 else 0)
    if keep < dims:
        warnings.warn(f"latents span only {keep} direction(s); returning {keep} component(s)", RuntimeWarning, stacklevel=2)
    comps = evecs[:, :keep].T
    # fix signs so repeated runs give identical projections
    flip = np.sign(comps[np.arange(keep), np.argmax(np.abs(comps), axis=1)]) if keep else np.ones(0)
    comps = comps * flip[:, None]
    return LatentTrace(X, mean, comps, np.maximum(evals[:keep], 0.0), Xc @ comps.T, label)


def smoothness_score(trace: LatentTrace) -> float:
    """Mean norm of the second difference of the projection, divided by its RMS spread."""
    P = trace.projection
    if P.shape[0] < 3:
        raise ContractError("a trace needs at least three points")
    spread = math.sqrt(float(np.mean(np.sum((P - P.mean(axis=0)) ** 2, axis=1))))
    if spread == 0.0:
        return 0.0
    d2 = P[2:] - 2.0 * P[1:-1] + P[:-2]
    return float(np.mean(np.linalg.norm(d2, axis=1)) / spread)


def trace_pair_distance(latents_a, latents_b, dims: int = 2) -> float:
    """Mean distance between time-aligned points of two traces in a PCA basis fitted on both.

    Normalised by the RMS spread of the pooled projection, so networks with
    differently scaled latent spaces are comparable.
    """
    A = np.asarray(latents_a, dtype=np.float64)
    B = np.asarray(latents_b, dtype=np.float64)
    if A.shape != B.shape:
        raise ContractError("traces must have equal length and dimension")
    pooled = pca_project(np.concatenate([A, B]), dims)
    P = pooled.projection
    n = A.shape[0]
    spread = math.sqrt(float(np.mean(np.sum(P**2, axis=1))))
    if spread == 0.0:
        return 0.0
    return float(np.mean(np.linalg.norm(P[:n] - P[n:], axis=1)) / spread)


def write_traces_csv(path, traces) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "pc1", "pc2", "label"])
        for tr in traces:
            P = tr.projection
            for t in range(P.shape[0]):
                pcs = [repr(float(P[t, i])) if i < P.shape[1] else "" for i in range(2)]
                w.writerow([t, *pcs, tr.label])


def similar_trajectories(
    params: TankParams,
    duration: int,
    sigma: float,
    seed: int = 0,
    offset: float = 0.05,
    p_imp: float = 0.01,
    excitation: Excitation = Excitation(),
):
    """Two noisy runs driven by the same step schedule, the second with levels raised by ``offset`` V.

    Returns a list of ``(u, y_clean, y_noisy)`` tuples.
    """
    rng = np.random.default_rng([seed, 2])
    u = excite(duration, rng, excitation)
    runs = []
    for i, uu in enumerate((u, np.clip(u + offset, 0.0, 1.0))):
        y = simulate(params, uu)
        noisy, _ = corrupt(y, NoiseSpec(sigma=sigma, p_imp=p_imp), np.random.default_rng([seed, 3, i]))
        runs.append((uu, y, noisy))
    return runs


@dataclass
class LatentComparison:
    label: str
    traces: list[LatentTrace]
    smoothness: float
    pair_distance: float


def latent_comparison(model: CbdaeModel, runs, label: str) -> LatentComparison:
    """Collect h(T) along each run, project per network and score smoothness and trace separation."""
    lat = [model.latents(sliding_windows(np.column_stack([u, noisy]), model.arch.window)) for u, _, noisy in runs]
    pooled = pca_project(np.concatenate(lat), 2, label)
    n = lat[0].shape[0]
    traces = []
    for i, L in enumerate(lat):
        P = (L - pooled.mean) @ pooled.components.T
        traces.append(replace(pooled, latents=L, projection=P, label=f"{label}/run{i + 1}"))
    smooth = float(np.mean([smoothness_score(t) for t in traces]))
    dist = trace_pair_distance(lat[0], lat[1][:n])
    return LatentComparison(label, traces, smooth, dist)


# ---------------------------------------------------------------------------
# desk-scale ablation


@dataclass
class AblationResult:
    report: BenchReport
    models: dict
    logs: dict
    extended_log: object | None = None
    runtime_s: float = 0.0


def run_ablation(
    datasets: dict[float, SimDataset],
    config: TrainConfig,
    variants=("CBDAE", "BDAE_NoReg"),
    extend: dict | None = None,
    bench: BenchConfig | None = None,
    methods=CLASSICAL,
) -> AblationResult:
    """Train each variant per noise level and benchmark them against the classical methods.

    ``extend`` maps ``(variant, sigma)`` to an epoch multiple: that run is
    trained for the longer budget, and the model reported for the grid is the
    best-validation snapshot within the first ``config.epochs`` epochs, so it
    is the same model a plain run would return.
    """
    t0 = time.perf_counter()
    extend = dict(extend or {})
    models, logs, ext_log = {}, {}, None
    for sigma in sorted(datasets):
        ds = datasets[sigma]
        for variant in variants:
            cfg = replace(config, variant=variant)
            mult = extend.get((variant, sigma), 1)
            tracker = _BudgetTracker(config.epochs)
            result = train(ds.split("train"), replace(cfg, epochs=config.epochs * mult), ds.split("val"), on_epoch=tracker)
            if mult > 1:
                ext_log = result.log
                result.model.params.load_snapshot(tracker.best)
            models[(variant, sigma)] = result.model
            logs[(variant, sigma)] = result.log
    report = run_benchmark(datasets, list(methods) + list(variants), bench, config.seed, models)
    return AblationResult(report, models, logs, ext_log, time.perf_counter() - t0)


class _BudgetTracker:
    """Remembers the best-validation weights seen within the first ``budget`` epochs."""

    def __init__(self, budget: int):
        self.budget = budget
        self.best_val = math.inf
        self.best = None
        self.seen = 0

    def __call__(self, rec, model) -> None:
        self.seen += 1
        if self.seen <= self.budget and rec.val_loss < self.best_val:
            self.best_val, self.best = rec.val_loss, model.params.snapshot()
