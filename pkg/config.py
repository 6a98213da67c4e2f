"""
Configuration management for merge-rec.
Handles loading the experiment JSON, the desk preset and validation.
"""
import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from artifacts import digest
from errors import ConfigError
from evaluation import REGIMES
from fisher import ORDERINGS, SamplingSpec
from frameworks import FrameworkSpec
from model import ModelConfig


DESK_ENV_VAR = "MERGE_REC_DESK"

PIPELINES = ("baseline_setting", "finetune_setting")

DEFAULTS: Dict[str, Any] = {
    "data": {"min_seq_len": 5, "max_users": None, "seed": 0},
    "model": {"d_model": 64, "n_heads": 2, "n_layers": 2, "max_len": 50, "dropout": 0.2, "lr": 1e-3},
    "training": {"batch_size": 32, "mask_prob": 0.2},
    "frameworks": [
        {"kind": "cl4srec", "lambda_cl": 0.1},
        {"kind": "duorec_sup", "lambda_cl": 0.1},
        {"kind": "duorec_unsup", "lambda_cl": 0.1},
    ],
    "pipeline": "finetune_setting",
    "epochs": {"baseline": 20, "finetune": 20, "post_merge": 1},
    "fisher": {"method": "topk", "sample_size": 30, "batch_size": 16, "ordering": "prob"},
    "sweep": [],
    "ablation": False,
    "inconsistency_seeds": 0,
    "plane_samples": 100,
    "plane_epsilon": 1.0,
    "topk_sizes": [10, 30, 50],
    "merge": {"mode": "fisher", "lambdas": None, "epsilon": 1e-12},
    "eval": {"pools": ["full", "random", "popular"], "ks": [10, 20], "random_k": 100, "popular_k": 100, "split": "test"},
    "seed": 0,
    "out_dir": "runs",
    "threads": 1,
}

# Small enough for the whole pipeline to run in minutes on a laptop CPU
DESK_PRESET: Dict[str, Any] = {
    "data": {
        "min_seq_len": 3,
        "max_users": 200,
        "synthetic": {"num_users": 200, "num_items": 240, "min_len": 6, "max_len": 24, "num_patterns": 12, "noise": 0.2},
    },
    "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "max_len": 20},
    "epochs": {"baseline": 10, "finetune": 5, "post_merge": 1},
    "fisher": {"batch_size": 8},
}


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; lists and scalars in `override` replace those in `base`."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def desk_enabled() -> bool:
    return os.environ.get(DESK_ENV_VAR, "").strip() not in ("", "0", "false", "False")


# ========================
# TYPED SETTINGS
# ========================

@dataclass(frozen=True)
class DataSettings:
    ratings_path: Optional[Path] = None
    dataset_path: Optional[Path] = None
    synthetic: Optional[Dict[str, Any]] = None
    min_seq_len: int = 5
    max_users: Optional[int] = None
    seed: int = 0  # synthetic generation and user subsampling


@dataclass(frozen=True)
class ModelSettings:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 50
    dropout: float = 0.2
    lr: float = 1e-3

    def to_model_config(self, num_items: int) -> ModelConfig:
        return ModelConfig(
            num_items=num_items, d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            max_len=self.max_len, dropout=self.dropout, lr=self.lr,
        )


@dataclass(frozen=True)
class EpochSettings:
    baseline: int = 20
    finetune: int = 20
    post_merge: int = 1


@dataclass(frozen=True)
class FisherSettings:
    method: str = "topk"
    sample_size: int = 30
    batch_size: int = 16
    ordering: str = "prob"

    @property
    def sampling(self) -> SamplingSpec:
        return SamplingSpec(self.method, self.sample_size)


@dataclass(frozen=True)
class MergeSettings:
    mode: str = "fisher"
    lambdas: Optional[Tuple[float, ...]] = None
    epsilon: float = 1e-12


@dataclass(frozen=True)
class EvalSettings:
    pools: Tuple[str, ...] = ("full", "random", "popular")
    ks: Tuple[int, ...] = (10, 20)
    random_k: int = 100
    popular_k: int = 100
    split: str = "test"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSettings
    model: ModelSettings
    batch_size: int
    mask_prob: float
    frameworks: Tuple[FrameworkSpec, ...]
    pipeline: str
    epochs: EpochSettings
    fisher: FisherSettings
    sweep: Tuple[SamplingSpec, ...] = ()
    ablation: bool = False
    inconsistency_seeds: int = 0
    plane_samples: int = 100
    plane_epsilon: float = 1.0
    topk_sizes: Tuple[int, ...] = (10, 30, 50)
    merge: MergeSettings = field(default_factory=MergeSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seed: int = 0
    out_dir: Path = Path("runs")
    threads: int = 1
    desk: bool = False

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["frameworks"] = [f.to_dict() for f in self.frameworks]
        payload["sweep"] = [{"method": s.method, "sample_size": s.n} for s in self.sweep]
        return json.loads(json.dumps(payload, default=str))

    def digest(self) -> str:
        """Digest of the settings every compatible artifact shares (data, model, batching)."""
        payload = self.to_dict()
        return digest({k: payload[k] for k in ("data", "model", "batch_size", "mask_prob")})


# ========================
# LOADER
# ========================

class Config:
    """Manages application configuration."""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = Path(config_path) if config_path else None
        self.config_data: Dict[str, Any] = {}
        self.desk = False

    def load(self) -> Tuple[bool, Optional[str]]:
        """
        Load configuration file (optional) on top of defaults and, when
        MERGE_REC_DESK is set, the desk preset. Explicit file values win.

        Returns:
            Tuple of (success, error_message)
        """
        user: Dict[str, Any] = {}
        if self.config_path is not None:
            if not self.config_path.exists():
                return False, f"Config file not found: {self.config_path}"
            try:
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    user = json.load(f)
            except json.JSONDecodeError as e:
                return False, f"Invalid JSON in {self.config_path}: {e}"
            except Exception as e:
                return False, f"Error reading {self.config_path}: {e}"
            if not isinstance(user, dict):
                return False, f"{self.config_path} must hold a JSON object"

        self.desk = desk_enabled()
        base = deep_merge(DEFAULTS, DESK_PRESET) if self.desk else DEFAULTS
        self.config_data = deep_merge(base, user)
        user_data = user.get("data", {}) if isinstance(user.get("data"), dict) else {}
        if "synthetic" not in user_data and (user_data.get("ratings_path") or user_data.get("dataset_path")):
            self.config_data["data"].pop("synthetic", None)
        return True, None

    def apply_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                        threads: Optional[int] = None):
        """CLI global flags beat the file."""
        if seed is not None:
            self.config_data["seed"] = seed
        if out_dir is not None:
            self.config_data["out_dir"] = out_dir
        if threads is not None:
            self.config_data["threads"] = threads

    def save_config(self, path: Path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.config_data, f, indent=2)

    def _resolve(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value).expanduser()
        if not p.is_absolute() and self.config_path is not None:
            p = self.config_path.parent / p
        return p

    def experiment(self) -> ExperimentConfig:
        """
        Typed, validated view of the loaded configuration.

        Raises:
            ConfigError: missing data source, unreadable path or invalid value
        """
        c = self.config_data
        try:
            d = c["data"]
            data = DataSettings(
                ratings_path=self._resolve(d.get("ratings_path")),
                dataset_path=self._resolve(d.get("dataset_path")),
                synthetic=d.get("synthetic"),
                min_seq_len=int(d.get("min_seq_len", 5)),
                max_users=int(d["max_users"]) if d.get("max_users") is not None else None,
                seed=int(d.get("seed", 0)),
            )
            model = ModelSettings(**{k: c["model"][k] for k in asdict(ModelSettings()) if k in c["model"]})
            frameworks = tuple(FrameworkSpec.from_dict(f) for f in c["frameworks"])
            epochs = EpochSettings(**c["epochs"])
            fisher = FisherSettings(**c["fisher"])
            sweep = tuple(SamplingSpec(s["method"], int(s.get("sample_size", 1))) for s in c.get("sweep", []))
            m = c["merge"]
            merge = MergeSettings(
                mode=m.get("mode", "fisher"),
                lambdas=tuple(float(x) for x in m["lambdas"]) if m.get("lambdas") is not None else None,
                epsilon=float(m.get("epsilon", 1e-12)),
            )
            e = c["eval"]
            evaluation = EvalSettings(
                pools=tuple(e.get("pools", REGIMES)),
                ks=tuple(int(k) for k in e.get("ks", (10, 20))),
                random_k=int(e.get("random_k", 100)),
                popular_k=int(e.get("popular_k", 100)),
                split=e.get("split", "test"),
            )
            exp = ExperimentConfig(
                data=data,
                model=model,
                batch_size=int(c["training"]["batch_size"]),
                mask_prob=float(c["training"]["mask_prob"]),
                frameworks=frameworks,
                pipeline=c["pipeline"],
                epochs=epochs,
                fisher=fisher,
                sweep=sweep,
                ablation=bool(c.get("ablation", False)),
                inconsistency_seeds=int(c.get("inconsistency_seeds", 0)),
                plane_samples=int(c.get("plane_samples", 100)),
                plane_epsilon=float(c.get("plane_epsilon", 1.0)),
                topk_sizes=tuple(int(k) for k in c.get("topk_sizes", (10, 30, 50))),
                merge=merge,
                eval=evaluation,
                seed=int(c["seed"]),
                out_dir=Path(c["out_dir"]),
                threads=int(c["threads"]),
                desk=self.desk,
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid configuration: {err}", stage="config")
        validate_experiment(exp)
        return exp


def validate_experiment(exp: ExperimentConfig) -> None:
    d = exp.data
    sources = [s for s in (d.ratings_path, d.dataset_path, d.synthetic) if s]
    if len(sources) != 1:
        raise ConfigError("data needs exactly one of ratings_path, dataset_path or synthetic", stage="config")
    for path in (d.ratings_path, d.dataset_path):
        if path is not None and not path.is_file():
            raise ConfigError(f"data file not found: {path}", stage="config")
    if d.min_seq_len < 3:
        raise ConfigError("min_seq_len must be >= 3", stage="config")
    if d.max_users is not None and d.max_users < 1:
        raise ConfigError("max_users must be >= 1", stage="config")
    if exp.pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {', '.join(PIPELINES)}", stage="config")
    if not exp.frameworks:
        raise ConfigError("at least one framework is required", stage="config")
    labels = [f.label for f in exp.frameworks]
    if len(set(labels)) != len(labels) or "baseline" in labels:
        raise ConfigError("framework labels must be unique and not 'baseline' (set 'name')", stage="config")
    if exp.batch_size < 1 or not 0.0 < exp.mask_prob < 1.0:
        raise ConfigError("training batch_size must be >= 1 and mask_prob in (0, 1)", stage="config")
    if min(exp.epochs.baseline, exp.epochs.finetune, exp.epochs.post_merge) < 0:
        raise ConfigError("epoch counts must be >= 0", stage="config")
    if exp.fisher.batch_size < 1:
        raise ConfigError("fisher batch_size must be >= 1", stage="config")
    if exp.fisher.ordering not in ORDERINGS:
        raise ConfigError(f"fisher ordering must be one of {', '.join(ORDERINGS)}", stage="config")
    exp.fisher.sampling  # validates method / size
    if exp.merge.mode not in ("uniform", "fisher"):
        raise ConfigError("merge mode must be uniform or fisher", stage="config")
    if exp.merge.lambdas is not None:
        if len(exp.merge.lambdas) != len(exp.frameworks) or any(x <= 0 for x in exp.merge.lambdas):
            raise ConfigError("merge lambdas need one positive value per framework", stage="config")
    if exp.merge.epsilon <= 0:
        raise ConfigError("merge epsilon must be > 0", stage="config")
    if any(p not in REGIMES for p in exp.eval.pools) or not exp.eval.pools:
        raise ConfigError(f"eval pools must be drawn from {', '.join(REGIMES)}", stage="config")
    if 10 not in exp.eval.ks or any(k < 1 for k in exp.eval.ks):
        raise ConfigError("eval ks must be positive and include 10", stage="config")
    if exp.eval.split not in ("test", "valid"):
        raise ConfigError("eval split must be test or valid", stage="config")
    if exp.topk_sizes != tuple(sorted(exp.topk_sizes)) or any(k < 1 for k in exp.topk_sizes):
        raise ConfigError("topk_sizes must be positive and ascending", stage="config")
    if exp.plane_epsilon <= 0:
        raise ConfigError("plane_epsilon must be > 0", stage="config")
    if exp.inconsistency_seeds < 0 or exp.plane_samples < 0 or exp.threads < 1:
        raise ConfigError("inconsistency_seeds, plane_samples must be >= 0 and threads >= 1", stage="config")
