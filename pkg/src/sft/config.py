"""Run configuration: one JSON document, canonical serialization, two profiles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import td
from .finetune import GATE_SITES, GateFactors, LossWeights, TrainConfig
from .noise import FAMILIES

ARCHS = ("lenet5", "alexnet_s")
PROFILES = ("full", "fast")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    mnist_dir: str = "data/mnist"
    data_dir: str = "data/wmnist"
    out_dir: str = "runs"


@dataclass
class Training:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    pretrain_epochs: int = 15
    finetune_epochs: int = 15
    train_subset: int = 0  # 0 = whole train split
    log_eval_samples: int = 1000  # test samples scored after each epoch
    deterministic: bool = True


@dataclass
class Gating:
    alpha_gate: float = 1.0
    beta_gate: float = 1.0
    alpha_loss: float = 1.0
    gate_sites: str = "parametric"


@dataclass
class Selection:
    zeta: float = 0.9
    lam: float = 0.5
    connectivity: int = 8


@dataclass
class Evaluation:
    eval_samples: int = 0  # 0 = whole test split
    sweep_samples: int = 1000
    noise_seed: int = 0
    levels: list = field(default_factory=lambda: list(range(0, 251, 25)))
    families: list = field(default_factory=lambda: list(FAMILIES))


@dataclass
class RunConfig:
    profile: str = "full"
    arch: str = "lenet5"
    seed: int = 0
    dataset_seed: int = 17
    threads: int = 1
    paths: Paths = field(default_factory=Paths)
    training: Training = field(default_factory=Training)
    gating: Gating = field(default_factory=Gating)
    selection: Selection = field(default_factory=Selection)
    evaluation: Evaluation = field(default_factory=Evaluation)

    def validate(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.gating.gate_sites not in GATE_SITES:
            raise ConfigError(f"gate_sites must be one of {GATE_SITES}, got {self.gating.gate_sites!r}")
        bad = [f for f in self.evaluation.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"unknown noise families {bad}")
        try:
            self.train_config("pretrain")
            self.selection_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def selection_params(self) -> td.SelectionParams:
        s = self.selection
        return td.SelectionParams(s.zeta, s.lam, s.connectivity)

    def train_config(self, phase: str) -> TrainConfig:
        t, g = self.training, self.gating
        epochs = t.pretrain_epochs if phase == "pretrain" else t.finetune_epochs
        return TrainConfig(
            lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay, batch_size=t.batch_size,
            epochs=epochs, seed=self.seed, gate=GateFactors(g.alpha_gate, g.beta_gate),
            loss=LossWeights(g.alpha_loss), deterministic=t.deterministic or self.threads == 1,
            gate_sites=g.gate_sites, selection=self.selection_params(), eval_samples=t.log_eval_samples,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path


_SECTIONS = {"paths": Paths, "training": Training, "gating": Gating, "selection": Selection, "evaluation": Evaluation}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTIONS.get(key) if cls is RunConfig else None
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
            continue
        default = getattr(cls(), key)
        kwargs[key] = _coerce(value, default, f"{where}.{key}")
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def profile_defaults(profile: str) -> RunConfig:
    """Defaults for a profile.

    ``fast`` trains 5+5 epochs on a 10k subset at lr 1e-2; at lr 1e-3 its
    ~800 steps leave the reference far from converged.
    """
    cfg = RunConfig(profile=profile)
    if profile == "fast":
        cfg.training.train_subset = 10000
        cfg.training.lr = 1e-2
        cfg.training.pretrain_epochs = 5
        cfg.training.finetune_epochs = 5
        cfg.training.log_eval_samples = 500
        cfg.evaluation.eval_samples = 2000
        cfg.evaluation.sweep_samples = 300
        cfg.evaluation.levels = [0, 50, 100, 150, 200, 250]
    elif profile != "full":
        raise ConfigError(f"profile must be one of {PROFILES}, got {profile!r}")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def loads(text: str, profile: str | None = None) -> RunConfig:
    """Parse a config document; missing keys come from the profile defaults."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    prof = profile or data.get("profile", "full")
    if not isinstance(prof, str) or prof not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {prof!r}")
    base = asdict(profile_defaults(prof))
    merged = _merge(base, data)
    merged["profile"] = prof
    return _build(RunConfig, merged, "config").validate()


def load(path, profile: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(), profile)
