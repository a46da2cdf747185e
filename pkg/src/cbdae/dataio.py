"""Series containers and CSV formats.

Two CSV layouts are understood:

* the simulator layout, ``step,u1,u2,y1..y4,ytilde1..ytilde4``: the model sees
  ``u1,u2,ytilde1..ytilde4`` and the clean ``y`` columns are kept for scoring;
* an external layout described by a JSON sidecar schema::

      {"time_column": "timestamp",
       "inputs": ["feed_rate"],
       "measurements": ["torque", "density"],
       "clean": {"torque": "torque_ref"}}

  The time column may hold numbers (seconds) or ISO-8601 timestamps and must be
  uniformly sampled.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ContractError

SIM_INPUTS = ("u1", "u2")
SIM_CLEAN = ("y1", "y2", "y3", "y4")
SIM_NOISY = ("ytilde1", "ytilde2", "ytilde3", "ytilde4")
SIM_HEADER = ("step",) + SIM_INPUTS + SIM_CLEAN + SIM_NOISY


@dataclass
class Series:
    """A multivariate series as the model sees it.

    ``values`` is (n, N). ``clean``, when known, has the same layout with NaN in
    columns that have no reference; ``score_channels`` lists the columns that
    are scored (the noisy measurements).
    """

    values: np.ndarray
    channel_names: tuple[str, ...]
    input_channels: tuple[int, ...] = ()
    clean: np.ndarray | None = None
    score_channels: tuple[int, ...] = ()
    time: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channel_names):
            raise ContractError(f"values {self.values.shape} do not match {len(self.channel_names)} channel names")
        if self.clean is not None and self.clean.shape != self.values.shape:
            raise ContractError("clean reference must match the values layout")
        if not self.score_channels:
            self.score_channels = tuple(i for i in range(self.n_channels) if i not in self.input_channels)

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> Series:
        return Series(
            self.values[start:stop],
            self.channel_names,
            self.input_channels,
            None if self.clean is None else self.clean[start:stop],
            self.score_channels,
            None if self.time is None else self.time[start:stop],
            dict(self.meta),
        )

    def split_tail(self, fraction: float) -> tuple[Series, Series]:
        """Chronological split; the last ``fraction`` of samples form the second part."""
        cut = len(self) - int(round(len(self) * fraction))
        return self.slice(0, cut), self.slice(cut, len(self))


def write_sim_csv(path, step, u, y, y_noisy) -> None:
    data = np.column_stack([np.asarray(step, dtype=np.float64), u, y, y_noisy])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SIM_HEADER) + "\n")
        fmt = ["%d"] + ["%.17g"] * (data.shape[1] - 1)
        np.savetxt(fh, data, delimiter=",", fmt=fmt)


def read_sim_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != SIM_HEADER:
        raise ContractError(f"{path}: not a simulator CSV (header {header})")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {
        "step": data[:, 0].astype(np.int64),
        "u": data[:, 1:3],
        "y": data[:, 3:7],
        "y_noisy": data[:, 7:11],
    }


def sim_series(u, y, y_noisy, step=None) -> Series:
    values = np.column_stack([u, y_noisy])
    clean = np.column_stack([u, y])
    return Series(
        values,
        SIM_INPUTS + SIM_NOISY,
        input_channels=(0, 1),
        clean=clean,
        score_channels=(2, 3, 4, 5),
        time=None if step is None else np.asarray(step, dtype=np.float64),
    )


def _parse_time(raw: list[str]) -> np.ndarray:
    try:
        return np.array([float(v) for v in raw])
    except ValueError:
        return np.array([datetime.fromisoformat(v).timestamp() for v in raw])


def check_uniform(time: np.ndarray, rtol: float = 1e-6) -> float:
    """Return the sampling period or raise if the series has gaps or jitter."""
    if time.size < 2:
        return 0.0
    dt = np.diff(time)
    period = float(dt[0])
    if period <= 0 or not np.allclose(dt, period, rtol=rtol, atol=0.0):
        bad = int(np.argmax(~np.isclose(dt, period, rtol=rtol, atol=0.0))) + 1
        raise ContractError(f"non-uniform sampling near row {bad}: gaps are not interpolated")
    return period


def read_external_csv(path, schema) -> Series:
    """Load a timestamped CSV whose channel roles are declared in ``schema``."""
    if not isinstance(schema, dict):
        schema = json.loads(Path(schema).read_text())
    unknown = set(schema) - {"time_column", "inputs", "measurements", "clean"}
    if unknown:
        raise ContractError(f"unknown schema keys {sorted(unknown)}")
    inputs = list(schema.get("inputs", []))
    meas = list(schema.get("measurements", []))
    clean_map = dict(schema.get("clean", {}))
    if not meas:
        raise ContractError("schema declares no measurement channels")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"{path}: no data rows")
    missing = [c for c in [schema.get("time_column")] + inputs + meas + list(clean_map.values()) if c and c not in rows[0]]
    if missing:
        raise ContractError(f"{path}: missing columns {missing}")
    names = tuple(inputs + meas)
    values = np.array([[float(r[c]) for c in names] for r in rows])
    time = None
    if schema.get("time_column"):
        time = _parse_time([r[schema["time_column"]] for r in rows])
        check_uniform(time)
    clean = None
    if clean_map:
        clean = np.full(values.shape, np.nan)
        clean[:, : len(inputs)] = values[:, : len(inputs)]
        for m, ref in clean_map.items():
            clean[:, names.index(m)] = [float(r[ref]) for r in rows]
    return Series(
        values,
        names,
        input_channels=tuple(range(len(inputs))),
        clean=clean,
        score_channels=tuple(range(len(inputs), len(names))),
        time=time,
    )


def load_series(path, schema=None) -> Series:
    """Read either CSV layout; the simulator layout is detected from its header."""
    if schema is None:
        d = read_sim_csv(path)
        return sim_series(d["u"], d["y"], d["y_noisy"], d["step"])
    return read_external_csv(path, schema)
