"""Run configuration: one JSON file with a section per command.

Every section is optional; missing keys take the documented defaults and
unknown keys are rejected. Example::

    {
      "seed": 0,
      "simulate": {"sigmas": [1.0, 3.0], "duration": 20000},
      "train": {"data": "data/quadtank_sigma1.csv", "params": {"epochs": 30, "hidden": 32}},
      "tank": {"gamma": [0.43, 0.34]}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ContractError
from .evalbench import CLASSICAL, SIGMA_GRID
from .quadtank import Excitation, TankParams
from .training import TrainConfig


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ContractError(f"section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(f"unknown keys in {where!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class SimulateSection:
    sigmas: tuple[float, ...] = SIGMA_GRID
    duration: int = 20000
    p_imp: float = 0.01
    out_dir: str = "data"
    excitation: dict = field(default_factory=lambda: asdict(Excitation()))

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        _strict(Excitation, self.excitation, "simulate.excitation")


@dataclass
class TrainSection:
    data: str | None = None
    schema: str | None = None
    checkpoint: str = "model.ckpt"
    log: str = "train_log.csv"
    resume: str | None = None
    params: dict = field(default_factory=dict)  # TrainConfig overrides

    def train_config(self, seed: int | None = None) -> TrainConfig:
        d = TrainConfig().to_dict()
        unknown = set(self.params) - set(d)
        if unknown:
            raise ContractError(f"unknown keys in 'train.params': {sorted(unknown)}")
        d.update(self.params)
        if seed is not None:
            d["seed"] = seed
        return TrainConfig.from_dict(d)


@dataclass
class DenoiseSection:
    input: str | None = None
    schema: str | None = None
    checkpoint: str = "model.ckpt"
    output: str = "denoised.csv"


@dataclass
class BenchSection:
    data: dict = field(default_factory=dict)  # sigma (as string) -> simulator CSV
    methods: tuple[str, ...] = CLASSICAL
    checkpoints: dict = field(default_factory=dict)  # variant -> {sigma: path}
    report: str = "bench_report.csv"
    windows: tuple[int, ...] = tuple(range(3, 32, 2))
    ema_alpha: float = 0.33
    kf_q: float = 1e-3
    particles: int = 1000

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.windows = tuple(int(w) for w in self.windows)


@dataclass
class LatentSection:
    checkpoints: dict = field(default_factory=dict)  # variant -> path
    sigma: float = 1.0
    duration: int = 2000
    offset: float = 0.05
    out_dir: str = "latent"


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    simulate: SimulateSection = field(default_factory=SimulateSection)
    train: TrainSection = field(default_factory=TrainSection)
    denoise: DenoiseSection = field(default_factory=DenoiseSection)
    bench: BenchSection = field(default_factory=BenchSection)
    latent: LatentSection = field(default_factory=LatentSection)
    tank: dict = field(default_factory=dict)

    _SECTIONS = {
        "simulate": SimulateSection,
        "train": TrainSection,
        "denoise": DenoiseSection,
        "bench": BenchSection,
        "latent": LatentSection,
    }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {"seed", "jobs", "tank"} | set(cls._SECTIONS)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown top-level config keys {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k in ("seed", "jobs", "tank")}
        for name, sec in cls._SECTIONS.items():
            if name in d:
                kw[name] = _strict(sec, d[name], name)
        cfg = cls(**kw)
        cfg.tank_params()  # validate early
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        """Write the effective configuration; loading it reproduces the run."""
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def tank_params(self) -> TankParams:
        return TankParams.from_dict(self.tank)
