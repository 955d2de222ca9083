"""Experiment configuration: one JSON file with a ``version`` field.

Layout::

    {
      "version": 1,
      "out_dir": "runs/small",
      "seed": 0,                      # synthetic data and pretraining
      "synth": {...} | null,          # SynthConfig fields; null when data.dir is given
      "data": {"dir": null, "split_ratios": [0.8, 0.1, 0.1], "split_seed": 0,
               "unknown_code_policy": "drop", "sliding_window": false,
               "expected_n_diag": null, "expected_n_lab": null},
      "pretrain": {...},              # PretrainHyper fields except seed
      "downstream": {...},            # DownstreamHyper fields except seed, plus
                                      # strict_fidelity / strict_dim
      "tasks": ["dg", "hf"],
      "n_runs": 5,
      "seeds": [0, 1, 2, 3, 4],
      "workers": 1
    }

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ValidationError
from .fusion import DownstreamHyper
from .pretrain import PretrainHyper
from .synth import SynthConfig

VERSION = 1
TASKS = ("dg", "hf")
MODES = ("baseline", "mplite")
POLICIES = ("drop", "error")
STRICT_DIMS = ("diag", "diag+lab")


@dataclass
class DataConfig:
    dir: Path | None = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    unknown_code_policy: str = "drop"
    sliding_window: bool = False
    expected_n_diag: int | None = None
    expected_n_lab: int | None = None


@dataclass
class ExperimentConfig:
    out_dir: Path
    seed: int = 0
    synth: SynthConfig | None = None
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainHyper = field(default_factory=PretrainHyper)
    downstream: DownstreamHyper = field(default_factory=DownstreamHyper)
    strict_fidelity: bool = False
    strict_dim: str = "diag"
    tasks: tuple[str, ...] = TASKS
    seeds: tuple[int, ...] = (0,)
    workers: int = 1

    @property
    def n_runs(self) -> int:
        return len(self.seeds)

    @property
    def data_dir(self) -> Path:
        return self.data.dir if self.data.dir is not None else self.out_dir / "data"

    def stage_dir(self, stage: str) -> Path:
        return self.out_dir / stage

    def pretrain_hyper(self) -> PretrainHyper:
        return dataclasses.replace(self.pretrain, seed=self.seed)

    def downstream_hyper(self, seed: int, n_diag: int, n_lab: int) -> DownstreamHyper:
        proj = self.downstream.projection_dim
        if self.strict_fidelity:
            proj = n_diag if self.strict_dim == "diag" else n_diag + n_lab
        return dataclasses.replace(self.downstream, seed=seed, projection_dim=proj)

    def to_dict(self) -> dict:
        ds = dataclasses.asdict(self.downstream)
        ds.pop("seed")
        ds.update(strict_fidelity=self.strict_fidelity, strict_dim=self.strict_dim)
        pre = dataclasses.asdict(self.pretrain)
        pre.pop("seed")
        data = dataclasses.asdict(self.data)
        data["dir"] = str(self.data.dir) if self.data.dir is not None else None
        data["split_ratios"] = list(self.data.split_ratios)
        return {
            "version": VERSION, "out_dir": str(self.out_dir), "seed": self.seed,
            "synth": self.synth.to_dict() if self.synth is not None else None,
            "data": data, "pretrain": pre, "downstream": ds, "tasks": list(self.tasks),
            "n_runs": self.n_runs, "seeds": list(self.seeds), "workers": self.workers,
        }


def _section(raw: Mapping, name: str) -> dict:
    v = raw.get(name, {})
    if v is None:
        return {}
    if not isinstance(v, Mapping):
        raise ValidationError(f"config section {name!r} must be an object")
    return dict(v)


def _int(v, name: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValidationError(f"{name} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {v}")
    return v


def parse_config(raw: Mapping[str, Any], base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a config dict; raises ``ValidationError`` naming the offending key."""
    base_dir = Path(base_dir)
    if not isinstance(raw, Mapping):
        raise ValidationError("config must be a JSON object")
    if raw.get("version") != VERSION:
        raise ValidationError(f"config version must be {VERSION}, got {raw.get('version')!r}")
    known = {"version", "out_dir", "seed", "synth", "data", "pretrain", "downstream", "tasks", "n_runs", "seeds",
             "workers"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    if "out_dir" not in raw:
        raise ValidationError("config needs out_dir")
    out_dir = base_dir / str(raw["out_dir"])
    seed = _int(raw.get("seed", 0), "seed", 0)

    synth = SynthConfig.from_dict(raw["synth"]) if raw.get("synth") is not None else None

    d = _section(raw, "data")
    dknown = {f.name for f in dataclasses.fields(DataConfig)}
    if set(d) - dknown:
        raise ValidationError(f"unknown data option(s): {', '.join(sorted(set(d) - dknown))}")
    if d.get("dir") is not None:
        d["dir"] = base_dir / str(d["dir"])
    if "split_ratios" in d:
        r = d["split_ratios"]
        if not isinstance(r, (list, tuple)) or len(r) != 3 or not all(isinstance(x, (int, float)) for x in r):
            raise ValidationError("data.split_ratios must be three numbers")
        d["split_ratios"] = tuple(float(x) for x in r)
    data = DataConfig(**d)
    _int(data.split_seed, "data.split_seed", 0)
    if data.unknown_code_policy not in POLICIES:
        raise ValidationError(f"data.unknown_code_policy must be one of {POLICIES}")
    if synth is None and data.dir is None:
        raise ValidationError("config needs either a synth section or data.dir")

    pre = _section(raw, "pretrain")
    if "seed" in pre:
        raise ValidationError("pretrain.seed is not configurable; the top-level seed drives pretraining")
    pretrain = PretrainHyper.from_dict(pre)
    _check_hyper(pretrain, "pretrain")
    if pretrain.activation not in ("relu", "tanh", "sigmoid", "identity"):
        raise ValidationError(f"pretrain.activation {pretrain.activation!r} not supported")

    ds = _section(raw, "downstream")
    strict = ds.pop("strict_fidelity", False)
    strict_dim = ds.pop("strict_dim", "diag")
    if "seed" in ds:
        raise ValidationError("downstream.seed is not configurable; use seeds")
    downstream = DownstreamHyper.from_dict(ds)
    _check_hyper(downstream, "downstream")
    if not 0.0 <= downstream.dropout < 1.0:
        raise ValidationError("downstream.dropout must be in [0, 1)")
    if not isinstance(strict, bool) or strict_dim not in STRICT_DIMS:
        raise ValidationError(f"downstream.strict_fidelity must be a boolean and strict_dim one of {STRICT_DIMS}")

    tasks = raw.get("tasks", list(TASKS))
    if isinstance(tasks, str):
        tasks = [tasks]
    if not tasks or any(t not in TASKS for t in tasks):
        raise ValidationError(f"tasks must be a non-empty subset of {TASKS}")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ValidationError("seeds must be a non-empty list")
    seeds = [_int(s, "seeds[]", 0) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be distinct")
    n_runs = raw.get("n_runs", len(seeds))
    if _int(n_runs, "n_runs", 1) != len(seeds):
        raise ValidationError(f"n_runs is {n_runs} but {len(seeds)} seed(s) are listed")
    workers = _int(raw.get("workers", 1), "workers", 1)

    return ExperimentConfig(out_dir, seed, synth, data, pretrain, downstream, strict, strict_dim,
                            tuple(dict.fromkeys(tasks)), tuple(seeds), workers)


def _check_hyper(h, name: str) -> None:
    for key in ("batch_size", "epochs", "hidden"):
        _int(getattr(h, key), f"{name}.{key}", 1)
    if not (h.lr_start > 0 and h.lr_end > 0):
        raise ValidationError(f"{name} learning rates must be positive")
    if h.schedule not in ("geometric", "step"):
        raise ValidationError(f"{name}.schedule must be 'geometric' or 'step'")


def load_config(path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a config file and apply flag overrides (``out_dir``, ``seed``, ``tasks``)."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    raw = copy.deepcopy(raw)
    overrides = overrides or {}
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    base = path.parent
    if overrides.get("out_dir") is not None:
        raw["out_dir"] = str(Path(overrides["out_dir"]).resolve())
    return parse_config(raw, base)
