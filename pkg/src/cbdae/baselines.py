"""Classical denoisers used for comparison.

All filters are causal: the estimate at sample ``n`` uses samples ``<= n``
only. Window filters use a trailing window; the first ``w - 1`` outputs use
the shorter window that is available.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.signal
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericalFault
from .quadtank import TankParams, linearize, sample_jacobian, sample_step, sample_step_batch

log = logging.getLogger(__name__)

WINDOW_KINDS = ("mean", "median", "savitzky_golay")


@dataclass(frozen=True)
class WindowFilterConfig:
    kind: str
    w: int
    order: int = 2

    def __post_init__(self):
        if self.kind not in WINDOW_KINDS:
            raise ContractError(f"unknown window filter {self.kind!r}")
        if self.w < 1:
            raise ContractError("window length must be at least 1")
        if self.kind == "savitzky_golay" and self.order >= self.w:
            raise ContractError("Savitzky-Golay order must be below the window length")


def _sg_weights(length: int, order: int) -> np.ndarray:
    """Weights giving the least-squares polynomial's value at the newest sample."""
    t = np.arange(-length + 1, 1, dtype=np.float64)
    V = np.vander(t, min(order, length - 1) + 1, increasing=True)
    return np.linalg.pinv(V)[0]


def window_filter(x, cfg: WindowFilterConfig) -> np.ndarray:
    """Trailing mean, median or Savitzky-Golay estimate at every sample of a 1-D sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("window_filter works on one channel at a time")
    w = cfg.w
    n = x.size
    out = np.empty(n)
    head = min(w - 1, n)
    for i in range(head):
        seg = x[: i + 1]
        out[i] = _window_value(seg, cfg)
    if n >= w:
        view = sliding_window_view(x, w)
        if cfg.kind == "mean":
            out[w - 1 :] = view.mean(axis=1)
        elif cfg.kind == "median":
            out[w - 1 :] = np.median(view, axis=1)
        else:
            out[w - 1 :] = view @ _sg_weights(w, cfg.order)
    return out


def _window_value(seg: np.ndarray, cfg: WindowFilterConfig) -> float:
    if cfg.kind == "mean":
        return float(seg.mean())
    if cfg.kind == "median":
        return float(np.median(seg))
    return float(seg @ _sg_weights(seg.size, cfg.order))


def ema_filter(x, alpha: float) -> np.ndarray:
    """``s_0 = x_0``, ``s_n = alpha x_n + (1 - alpha) s_{n-1}``."""
    if not 0.0 < alpha <= 1.0:
        raise ContractError("alpha must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    out, _ = scipy.signal.lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
    return out


def per_channel(fn, X: np.ndarray, *args) -> np.ndarray:
    """Apply a 1-D filter to every column of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    return np.column_stack([fn(X[:, c], *args) for c in range(X.shape[1])])


# ---------------------------------------------------------------------------
# Kalman filtering


def _check_psd(M: np.ndarray, name: str) -> None:
    if not np.allclose(M, M.T, atol=1e-12):
        raise ContractError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() < -1e-10:
        raise ContractError(f"{name} must be positive semidefinite")


@dataclass
class LinearStateModel:
    """``x+ = A x + B (u - u_op) + w``, ``y = y_op + C x + v`` with deviations about an operating point."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_op: np.ndarray | None = None
    u_op: np.ndarray | None = None
    y_op: np.ndarray | None = None

    def __post_init__(self):
        self.A, self.B, self.C, self.Q, self.R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (self.A, self.B, self.C, self.Q, self.R))
        nx, nu, ny = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        if self.A.shape != (nx, nx) or self.B.shape[0] != nx or self.C.shape[1] != nx:
            raise DimensionError("inconsistent A, B, C shapes")
        if self.Q.shape != (nx, nx) or self.R.shape != (ny, ny):
            raise DimensionError("Q must be (nx, nx) and R (ny, ny)")
        _check_psd(self.Q, "Q")
        _check_psd(self.R, "R")
        self.x_op = np.zeros(nx) if self.x_op is None else np.asarray(self.x_op, dtype=np.float64)
        self.u_op = np.zeros(nu) if self.u_op is None else np.asarray(self.u_op, dtype=np.float64)
        self.y_op = np.zeros(ny) if self.y_op is None else np.asarray(self.y_op, dtype=np.float64)

    @classmethod
    def from_tanks(cls, params: TankParams, u_op, sigma: float, q: float = 1e-3) -> LinearStateModel:
        A, B, h_op, u_op = linearize(params, u_op)
        r = max(sigma, 1e-6) ** 2
        return cls(A, B, np.eye(4), q * np.eye(4), r * np.eye(4), h_op, u_op, h_op.copy())


@dataclass
class KalmanResult:
    outputs: np.ndarray  # filtered output estimates, (n, ny)
    states: np.ndarray  # filtered states, (n, nx), absolute units for the tank models
    gains: np.ndarray  # Kalman gain per step, (n, nx, ny)
    covariance: np.ndarray  # final filtered covariance


def _gain(P: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    S = H @ P @ H.T + R
    try:
        if np.linalg.cond(S) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        return np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise NumericalFault(f"innovation covariance is not invertible: {exc}") from None


def _update(x, P, K, H, R, innovation):
    x = x + K @ innovation
    IKH = np.eye(P.shape[0]) - K @ H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return x, 0.5 * (P + P.T)


def kalman_filter(y, u, model: LinearStateModel, x0=None, P0=None) -> KalmanResult:
    """Standard predict/update recursion; ``y[n]`` observes the state before ``u[n]`` acts."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64).T).T
    u = np.atleast_2d(np.asarray(u, dtype=np.float64).T).T
    ny, nx = model.C.shape
    if y.shape[1] != ny or u.shape[1] != model.B.shape[1] or u.shape[0] != y.shape[0]:
        raise DimensionError(f"data shapes y{y.shape}, u{u.shape} do not match the model")
    n = y.shape[0]
    C, R = model.C, model.R
    x = np.linalg.lstsq(C, y[0] - model.y_op, rcond=None)[0] if x0 is None else np.asarray(x0, dtype=np.float64) - model.x_op
    P = np.eye(nx) * max(float(np.max(np.diag(R))), 1.0) if P0 is None else np.asarray(P0, dtype=np.float64)
    outputs, states = np.empty((n, ny)), np.empty((n, nx))
    gains = np.empty((n, nx, ny))
    for i in range(n):
        K = _gain(P, C, R)
        x, P = _update(x, P, K, C, R, y[i] - model.y_op - C @ x)
        gains[i] = K
        states[i] = x + model.x_op
        outputs[i] = model.y_op + C @ x
        x = model.A @ x + model.B @ (u[i] - model.u_op)
        P = model.A @ P @ model.A.T + model.Q
        P = 0.5 * (P + P.T)
    return KalmanResult(outputs, states, gains, P)


def ekf_filter(y, u, params: TankParams, Q, R, x0=None, P0=None) -> KalmanResult:
    """Extended Kalman filter on the sampled tank dynamics; all four levels are measured."""
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    Q, R = np.asarray(Q, dtype=np.float64), np.asarray(R, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 4 or u.shape != (y.shape[0], 2):
        raise DimensionError("ekf_filter expects y (n, 4) and u (n, 2)")
    n = y.shape[0]
    H = np.eye(4)
    x = np.clip(y[0], 0.0, None) if x0 is None else np.asarray(x0, dtype=np.float64)
    P = np.eye(4) * max(float(np.max(np.diag(R))), 1.0) if P0 is None else np.asarray(P0, dtype=np.float64)
    states = np.empty((n, 4))
    gains = np.empty((n, 4, 4))
    for i in range(n):
        K = _gain(P, H, R)
        x, P = _update(x, P, K, H, R, y[i] - x)
        x = np.clip(x, 0.0, None)
        gains[i] = K
        states[i] = x
        F = sample_jacobian(params, x, u[i])
        x = sample_step(params, x, u[i])
        P = F @ P @ F.T + Q
        P = 0.5 * (P + P.T)
    return KalmanResult(states.copy(), states, gains, P)


def particle_filter(
    y,
    u,
    params: TankParams,
    Q,
    R,
    n_particles: int = 1000,
    rng: np.random.Generator | None = None,
    x0=None,
    P0=None,
) -> np.ndarray:
    """Bootstrap particle filter; returns the weighted-mean level estimates (n, 4).

    Resamples systematically whenever the effective sample size drops below
    half the particle count.
    """
    if n_particles < 100:
        raise ContractError("use at least 100 particles")
    rng = np.random.default_rng() if rng is None else rng
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 4 or u.shape != (y.shape[0], 2):
        raise DimensionError("particle_filter expects y (n, 4) and u (n, 2)")
    Q, R = np.asarray(Q, dtype=np.float64), np.asarray(R, dtype=np.float64)
    R_inv = np.linalg.inv(R)
    q_chol = np.linalg.cholesky(Q + 1e-300 * np.eye(4)) if np.any(Q) else np.zeros((4, 4))
    mean0 = np.clip(y[0], 0.0, None) if x0 is None else np.asarray(x0, dtype=np.float64)
    cov0 = R if P0 is None else np.asarray(P0, dtype=np.float64)

    def prior():
        if not np.any(cov0):
            return np.tile(mean0, (n_particles, 1))
        return np.clip(rng.multivariate_normal(mean0, cov0, size=n_particles), 0.0, None)

    particles = prior()
    logw = np.zeros(n_particles)
    out = np.empty((y.shape[0], 4))
    for i in range(y.shape[0]):
        d = y[i] - particles
        logw = logw - 0.5 * np.einsum("ij,jk,ik->i", d, R_inv, d)
        if not np.any(np.isfinite(logw)):
            log.warning("particle weights collapsed at step %d; reinitialising from the prior", i)
            particles, logw = prior(), np.zeros(n_particles)
        w = np.exp(logw - logw[np.isfinite(logw)].max())
        w = np.where(np.isfinite(w), w, 0.0)
        w /= w.sum()
        out[i] = w @ particles
        if 1.0 / np.sum(w * w) < n_particles / 2:
            positions = (rng.random() + np.arange(n_particles)) / n_particles
            idx = np.minimum(np.searchsorted(np.cumsum(w), positions), n_particles - 1)
            particles = particles[idx]
            logw = np.zeros(n_particles)
        else:
            logw = np.log(np.maximum(w, 1e-300))
        particles = sample_step_batch(params, particles, u[i])
        particles = np.clip(particles + rng.standard_normal((n_particles, 4)) @ q_chol.T, 0.0, None)
    return out
