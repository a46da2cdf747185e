"""Quadruple-tank process in its non-minimum-phase configuration.

Level dynamics (tanks 1 and 2 at the bottom, 3 and 4 above them)::

    dh1/dt = -a1/A1 sqrt(2g h1) + a3/A1 sqrt(2g h3) + g1 k1 u1 / A1
    dh2/dt = -a2/A2 sqrt(2g h2) + a4/A2 sqrt(2g h4) + g2 k2 u2 / A2
    dh3/dt = -a3/A3 sqrt(2g h3) + (1 - g2) k2 u2 / A3
    dh4/dt = -a4/A4 sqrt(2g h4) + (1 - g1) k1 u1 / A4

Default geometry is Johansson's laboratory rig; pump gains are scaled so that
0..1 V drives the levels across roughly 0..50 cm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg

from .dataio import Series, read_sim_csv, sim_series, write_sim_csv
from .errors import ContractError, SimulationFault

LEVEL_MAX = 50.0


@dataclass(frozen=True)
class TankParams:
    A: tuple[float, float, float, float] = (28.0, 32.0, 28.0, 32.0)
    a: tuple[float, float, float, float] = (0.071, 0.057, 0.071, 0.057)
    g: float = 981.0
    k: tuple[float, float] = (19.0, 19.0)
    gamma: tuple[float, float] = (0.43, 0.34)
    dt: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        vals = list(self.A) + list(self.a) + list(self.k) + list(self.gamma) + [self.g, self.dt, self.tau]
        if min(vals) <= 0:
            raise ContractError("tank parameters must all be positive")
        if not 0.0 < sum(self.gamma) < 1.0:
            raise ContractError(f"non-minimum phase needs 0 < gamma1 + gamma2 < 1, got {sum(self.gamma)}")
        if max(self.gamma) >= 1.0:
            raise ContractError("valve splits must be below 1")
        ratio = self.tau / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ContractError("tau must be an integer multiple of dt")

    @property
    def substeps(self) -> int:
        return int(round(self.tau / self.dt))

    @classmethod
    def from_dict(cls, d: dict) -> TankParams:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown tank keys {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _coeffs(p: TankParams):
    A, a = np.array(p.A), np.array(p.a)
    out = a / A * np.sqrt(2.0 * p.g)
    g1, g2 = p.gamma
    k1, k2 = p.k
    # inflow from pumps: rows are tanks, columns are (u1, u2)
    B = np.array(
        [[g1 * k1 / A[0], 0.0], [0.0, g2 * k2 / A[1]], [0.0, (1 - g2) * k2 / A[2]], [(1 - g1) * k1 / A[3], 0.0]]
    )
    # outflow of tank 3 feeds tank 1, tank 4 feeds tank 2
    feed = np.array([a[2] / A[0], a[3] / A[1]]) * np.sqrt(2.0 * p.g)
    return out, B, feed


def tank_derivative(p: TankParams, h: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Level rates for states ``h`` (..., 4) under inputs ``u`` (..., 2)."""
    out, B, feed = _coeffs(p)
    root = np.sqrt(np.maximum(h, 0.0))
    dh = -out * root + u @ B.T
    dh[..., 0] += feed[0] * root[..., 2]
    dh[..., 1] += feed[1] * root[..., 3]
    return dh


def tank_jacobian(p: TankParams, h: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Analytic d(dh/dt)/dh at ``h`` (4,), with levels floored at ``floor`` cm."""
    out, _, feed = _coeffs(p)
    inv = 0.5 / np.sqrt(np.maximum(h, floor))
    J = np.diag(-out * inv)
    J[0, 2] = feed[0] * inv[2]
    J[1, 3] = feed[1] * inv[3]
    return J


def _rk4(p: TankParams, h, u, dt):
    k1 = tank_derivative(p, h, u)
    k2 = tank_derivative(p, h + 0.5 * dt * k1, u)
    k3 = tank_derivative(p, h + 0.5 * dt * k2, u)
    k4 = tank_derivative(p, h + dt * k3, u)
    return h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_dynamics(p: TankParams, h, u, dt: float | None = None) -> np.ndarray:
    """Advance the levels by one RK4 step of ``dt`` seconds (default ``p.dt``), clamped to [0, 50]."""
    dt = p.dt if dt is None else dt
    if dt <= 0:
        raise ContractError("dt must be positive")
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ContractError("levels must be non-negative")
    new = np.clip(_rk4(p, h, np.asarray(u, dtype=np.float64), dt), 0.0, LEVEL_MAX)
    if not np.all(np.isfinite(new)):
        raise SimulationFault(f"non-finite state {new} from h={h}, u={u}")
    return new


def sample_step(p: TankParams, h, u) -> np.ndarray:
    """Advance by one sampling period (``tau / dt`` sub-steps) with the input held."""
    for _ in range(p.substeps):
        h = step_dynamics(p, h, u)
    return h


def sample_step_batch(p: TankParams, h: np.ndarray, u) -> np.ndarray:
    """Vectorised :func:`sample_step` for many states ``h`` (M, 4)."""
    u = np.asarray(u, dtype=np.float64)
    for _ in range(p.substeps):
        h = np.clip(_rk4(p, h, u, p.dt), 0.0, LEVEL_MAX)
    return h


def sample_jacobian(p: TankParams, h, u, floor: float = 1e-3) -> np.ndarray:
    """Analytic Jacobian of :func:`sample_step` w.r.t. the levels (clamping ignored)."""
    h = np.asarray(h, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    dt = p.dt
    eye = np.eye(4)
    J = eye.copy()
    for _ in range(p.substeps):
        k1 = tank_derivative(p, h, u)
        J1 = tank_jacobian(p, h, floor)
        h2 = h + 0.5 * dt * k1
        k2 = tank_derivative(p, h2, u)
        J2 = tank_jacobian(p, h2, floor) @ (eye + 0.5 * dt * J1)
        h3 = h + 0.5 * dt * k2
        k3 = tank_derivative(p, h3, u)
        J3 = tank_jacobian(p, h3, floor) @ (eye + 0.5 * dt * J2)
        h4 = h + dt * k3
        k4 = tank_derivative(p, h4, u)
        J4 = tank_jacobian(p, h4, floor) @ (eye + dt * J3)
        step_J = eye + dt / 6.0 * (J1 + 2 * J2 + 2 * J3 + J4)
        J = step_J @ J
        h = np.clip(h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), 0.0, LEVEL_MAX)
    return J


def input_matrix(p: TankParams) -> np.ndarray:
    return _coeffs(p)[1]


def steady_state(p: TankParams, u) -> np.ndarray:
    """Equilibrium levels for a constant input, from the flow balances (clamped to 50 cm)."""
    u1, u2 = u
    g1, g2 = p.gamma
    k1, k2 = p.k
    q = np.array(
        [g1 * k1 * u1 + (1 - g2) * k2 * u2, g2 * k2 * u2 + (1 - g1) * k1 * u1, (1 - g2) * k2 * u2, (1 - g1) * k1 * u1]
    )
    h = (q / np.array(p.a)) ** 2 / (2.0 * p.g)
    return np.minimum(h, LEVEL_MAX)


def _scalar_stepper(p: TankParams):
    """Plain-float RK4 sampler; same arithmetic as :func:`sample_step`, without array overhead."""
    out, B, feed = (c.tolist() for c in _coeffs(p))
    o1, o2, o3, o4 = out
    f1, f2 = feed
    dt, n_sub = p.dt, p.substeps
    sqrt = math.sqrt

    def deriv(h1, h2, h3, h4, in1, in2, in3, in4):
        r1, r2, r3, r4 = (sqrt(max(h, 0.0)) for h in (h1, h2, h3, h4))
        return (
            -o1 * r1 + in1 + f1 * r3,
            -o2 * r2 + in2 + f2 * r4,
            -o3 * r3 + in3,
            -o4 * r4 + in4,
        )

    def advance(h, u1, u2):
        ins = [B[i][0] * u1 + B[i][1] * u2 for i in range(4)]
        h = tuple(h)
        for _ in range(n_sub):
            k1 = deriv(*h, *ins)
            k2 = deriv(*(x + 0.5 * dt * k for x, k in zip(h, k1)), *ins)
            k3 = deriv(*(x + 0.5 * dt * k for x, k in zip(h, k2)), *ins)
            k4 = deriv(*(x + dt * k for x, k in zip(h, k3)), *ins)
            h = tuple(
                min(max(x + dt / 6.0 * (a + 2 * b + 2 * c + d), 0.0), LEVEL_MAX)
                for x, a, b, c, d in zip(h, k1, k2, k3, k4)
            )
        if not all(np.isfinite(h)):
            raise SimulationFault(f"non-finite state {h}")
        return h

    return advance


def simulate(p: TankParams, u: np.ndarray, h0=None) -> np.ndarray:
    """Sampled levels (n, 4) for an input sequence (n, 2); sample ``i`` is the state before input ``i`` acts."""
    u = np.asarray(u, dtype=np.float64)
    h = steady_state(p, u[0]) if h0 is None else np.asarray(h0, dtype=np.float64)
    advance = _scalar_stepper(p)
    out = np.empty((u.shape[0], 4))
    h = tuple(float(x) for x in h)
    for i, (u1, u2) in enumerate(u.tolist()):
        out[i] = h
        h = advance(h, u1, u2)
    return out


# ---------------------------------------------------------------------------
# excitation and noise


@dataclass(frozen=True)
class Excitation:
    min_dwell: int = 60
    max_dwell: int = 300
    low: float = 0.1
    high: float = 1.0

    def __post_init__(self):
        if not 1 <= self.min_dwell <= self.max_dwell:
            raise ContractError("need 1 <= min_dwell <= max_dwell")
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ContractError("excitation levels must lie within [0, 1] V")


def excite(duration: int, rng: np.random.Generator, spec: Excitation = Excitation()) -> np.ndarray:
    """Piecewise-constant multi-level steps for both pumps, shape (duration, 2)."""
    if duration <= 0:
        raise ContractError("duration must be positive")
    u = np.empty((duration, 2))
    for ch in range(2):
        i = 0
        while i < duration:
            dwell = int(rng.integers(spec.min_dwell, spec.max_dwell + 1))
            u[i : i + dwell, ch] = rng.uniform(spec.low, spec.high)
            i += dwell
    return u


@dataclass(frozen=True)
class NoiseSpec:
    """White Gaussian noise of ``sigma`` cm plus railing impulses with probability ``p_imp``."""

    sigma: float = 1.0
    p_imp: float = 0.01
    low: float = 0.0
    high: float = LEVEL_MAX
    seed: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ContractError("sigma must be non-negative")
        if not 0.0 <= self.p_imp <= 1.0:
            raise ContractError("p_imp must lie in [0, 1]")


def corrupt(clean: np.ndarray, spec: NoiseSpec, rng: np.random.Generator | None = None):
    """Return ``(noisy, impulse_mask)`` for the clean measurements."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    clean = np.asarray(clean, dtype=np.float64)
    noisy = clean + spec.sigma * rng.standard_normal(clean.shape)
    hits = rng.random(clean.shape) < spec.p_imp
    rails = np.where(rng.random(clean.shape) < 0.5, spec.low, spec.high)
    noisy = np.where(hits, rails, noisy)
    return noisy, hits


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SimDataset:
    step: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_noisy: np.ndarray
    sigma: float
    tau: float = 1.0
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    impulses: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.u.shape[0]

    def series(self) -> Series:
        return sim_series(self.u, self.y, self.y_noisy, self.step)

    def split_bounds(self) -> dict[str, tuple[int, int]]:
        n = len(self)
        a = int(round(n * self.splits[0]))
        b = a + int(round(n * self.splits[1]))
        return {"train": (0, a), "val": (a, b), "test": (b, n)}

    def split(self, name: str) -> Series:
        lo, hi = self.split_bounds()[name]
        return self.series().slice(lo, hi)

    def to_csv(self, path) -> None:
        write_sim_csv(path, self.step, self.u, self.y, self.y_noisy)

    @classmethod
    def from_csv(cls, path, sigma: float = float("nan"), tau: float = 1.0) -> SimDataset:
        d = read_sim_csv(path)
        return cls(d["step"], d["u"], d["y"], d["y_noisy"], sigma, tau)


def generate_dataset(
    params: TankParams,
    sigmas,
    duration: int,
    seed: int = 0,
    p_imp: float = 0.01,
    excitation: Excitation = Excitation(),
) -> dict[float, SimDataset]:
    """One clean trajectory, corrupted once per noise level."""
    rng = np.random.default_rng([seed, 0])
    u = excite(duration, rng, excitation)
    y = simulate(params, u)
    step = np.arange(duration)
    out = {}
    for i, sigma in enumerate(sigmas):
        noise_rng = np.random.default_rng([seed, 1, i])
        noisy, hits = corrupt(y, NoiseSpec(sigma=float(sigma), p_imp=p_imp), noise_rng)
        out[float(sigma)] = SimDataset(step, u, y, noisy, float(sigma), params.tau, impulses=hits)
    return out


# ---------------------------------------------------------------------------
# linearisation for the Kalman filter


def linearize(p: TankParams, u_op) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Discrete-time (A, B, h_op, u_op) around the steady state of ``u_op`` at period ``tau``."""
    u_op = np.asarray(u_op, dtype=np.float64)
    h_op = steady_state(p, u_op)
    Ac = tank_jacobian(p, h_op)
    Bc = input_matrix(p)
    M = np.zeros((6, 6))
    M[:4, :4] = Ac
    M[:4, 4:] = Bc
    E = scipy.linalg.expm(M * p.tau)
    return E[:4, :4], E[:4, 4:], h_op, u_op
