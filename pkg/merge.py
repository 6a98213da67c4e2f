"""
Uniform and Fisher-weighted merging of same-architecture checkpoints.

    uniform: theta* = mean_m theta_m
    fisher:  theta*_j = sum_m lambda_m F_mj theta_mj / sum_m lambda_m F_mj

Coordinates no posterior constrains (sum_m lambda_m F_mj < epsilon) fall back
to the uniform mean. Merging is pure: files are read and written only by
apply_recipe / MergedCheckpoint.save.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from artifacts import digest, file_sha256, write_sidecar
from errors import ArchMismatchError, ConfigError, MergeError, ValidationError
from fisher import FisherDiag, load_fisher
from model import ModelConfig, ParamVector, ensure_same_arch, load_checkpoint, save_checkpoint


MODES = ("uniform", "fisher")
DEFAULT_EPSILON = 1e-12

FisherLike = Union[FisherDiag, np.ndarray]


# ========================
# RECIPES
# ========================

@dataclass(frozen=True)
class RecipeEntry:
    checkpoint: Path
    fisher: Optional[Path] = None
    weight: float = 1.0  # lambda_m


@dataclass(frozen=True)
class MergeRecipe:
    entries: List[RecipeEntry]
    mode: str = "fisher"
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown merge mode '{self.mode}' (expected uniform or fisher)")
        if not self.entries:
            raise ConfigError("merge recipe has no entries")
        if self.epsilon <= 0:
            raise ConfigError("merge epsilon must be > 0")
        for entry in self.entries:
            if entry.weight <= 0:
                raise ConfigError(f"lambda for {entry.checkpoint} must be > 0, got {entry.weight}")
            if self.mode == "fisher" and entry.fisher is None:
                raise ConfigError(f"fisher merge needs a fisher file for {entry.checkpoint}")

    @property
    def lambdas(self) -> List[float]:
        return [e.weight for e in self.entries]

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], base_dir: Optional[Path] = None) -> "MergeRecipe":
        base = Path(base_dir) if base_dir else None

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return base / p if base is not None and not p.is_absolute() else p

        try:
            entries = [
                RecipeEntry(resolve(e["checkpoint"]), resolve(e.get("fisher")), float(e.get("lambda", 1.0)))
                for e in payload["entries"]
            ]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed recipe entry: {e}")
        return cls(entries, payload.get("mode", "fisher"), float(payload.get("epsilon", DEFAULT_EPSILON)))

    @classmethod
    def from_json(cls, path: Path) -> "MergeRecipe":
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"recipe file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in recipe {path}: {e}")
        return cls.from_dict(payload, base_dir=path.parent)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "epsilon": self.epsilon,
            "entries": [
                {"checkpoint": str(e.checkpoint), "fisher": str(e.fisher) if e.fisher else None, "lambda": e.weight}
                for e in self.entries
            ],
        }

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass
class MergedCheckpoint:
    params: ParamVector
    provenance: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: Path, extra: Optional[Dict[str, Any]] = None) -> Path:
        path = save_checkpoint(self.params, path)
        write_sidecar(path, {**self.provenance, **(extra or {}), "arch_hash": f"{self.params.arch_hash:016x}"})
        return path


# ========================
# PURE MERGES
# ========================

def _check_arch(items: Sequence[Any]) -> None:
    try:
        ensure_same_arch(items)
    except ArchMismatchError as e:
        raise MergeError(str(e))


def _fisher_values(fisher: FisherLike) -> np.ndarray:
    return fisher.values if isinstance(fisher, FisherDiag) else np.asarray(fisher, dtype=np.float64)


def _normalised_lambdas(lambdas: Sequence[float]) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    return (lam / lam.sum())[:, None]


def fallback_mask(fishers: Sequence[FisherLike], lambdas: Sequence[float], epsilon: float) -> np.ndarray:
    """Coordinates where sum_m lambda_m F_mj (lambda as given) is below epsilon."""
    F = np.stack([_fisher_values(f) for f in fishers])
    lam = np.asarray(lambdas, dtype=np.float64)[:, None]
    return (lam * F).sum(axis=0) < epsilon


def merge_uniform(params_list: Sequence[ParamVector]) -> ParamVector:
    """Coordinatewise arithmetic mean; a single entry is returned as is."""
    if not params_list:
        raise MergeError("nothing to merge")
    _check_arch(params_list)
    if len(params_list) == 1:
        return params_list[0]
    stack = np.stack([p.flat() for p in params_list])
    merged = np.clip(stack.mean(axis=0), stack.min(axis=0), stack.max(axis=0))
    return ParamVector.from_flat(params_list[0].config, merged)


def fisher_merge(
    params_list: Sequence[ParamVector],
    fishers: Sequence[FisherLike],
    lambdas: Optional[Sequence[float]] = None,
    epsilon: float = DEFAULT_EPSILON,
) -> ParamVector:
    """
    Fisher-weighted mean of parameter vectors.

    The ratio uses lambda normalised by its sum, so rescaling all lambdas
    (or all Fisher values by a power of two) leaves the result bit-identical.
    The fallback test uses the raw sum_m lambda_m F_mj. The result is
    clipped to the per-coordinate [min, max] of the members.

    Raises:
        MergeError: arch mismatch or mismatched list lengths
        ValidationError: negative or non-finite Fisher value
    """
    if not params_list:
        raise MergeError("nothing to merge")
    if len(fishers) != len(params_list):
        raise MergeError(f"{len(params_list)} checkpoints but {len(fishers)} fishers")
    lambdas = [1.0] * len(params_list) if lambdas is None else [float(x) for x in lambdas]
    if len(lambdas) != len(params_list) or any(x <= 0 for x in lambdas):
        raise MergeError("need one positive lambda per checkpoint")
    _check_arch([*params_list, *[f for f in fishers if isinstance(f, FisherDiag)]])

    thetas = np.stack([p.flat() for p in params_list])
    F = np.stack([_fisher_values(f) for f in fishers])
    if F.shape != thetas.shape:
        raise MergeError(f"fisher shape {F.shape} does not match parameters {thetas.shape}")
    if not np.all(np.isfinite(F)):
        raise ValidationError("fisher contains non-finite values")
    if np.any(F < 0):
        raise ValidationError(f"fisher has {int(np.sum(F < 0))} negative coordinates")
    if len(params_list) == 1:
        return params_list[0]

    weights = _normalised_lambdas(lambdas) * F
    total = weights.sum(axis=0)
    floor = fallback_mask(F, lambdas, epsilon)

    merged = np.empty(thetas.shape[1], dtype=np.float64)
    on = ~floor
    merged[on] = (weights[:, on] * thetas[:, on]).sum(axis=0) / total[on]
    merged[floor] = thetas[:, floor].mean(axis=0)
    merged = np.clip(merged, thetas.min(axis=0), thetas.max(axis=0))
    return ParamVector.from_flat(params_list[0].config, merged)


def merge_fisher(recipe: MergeRecipe, config: ModelConfig, logger=None) -> MergedCheckpoint:
    """Load a fisher-mode recipe from disk and merge it."""
    if recipe.mode != "fisher":
        raise ConfigError("merge_fisher needs a recipe with mode 'fisher'")
    return apply_recipe(recipe, config, logger)


def apply_recipe(recipe: MergeRecipe, config: ModelConfig, logger=None) -> MergedCheckpoint:
    params_list = [load_checkpoint(e.checkpoint, config) for e in recipe.entries]
    if recipe.mode == "fisher":
        fishers = [load_fisher(e.fisher, config) for e in recipe.entries]
        merged = fisher_merge(params_list, fishers, recipe.lambdas, recipe.epsilon)
        floor = int(fallback_mask(fishers, recipe.lambdas, recipe.epsilon).sum())
    else:
        merged = merge_uniform(params_list)
        floor = 0
    if not merged.all_finite():
        raise MergeError("merged checkpoint has non-finite coordinates")

    provenance = {
        "recipe_digest": recipe.digest(),
        "mode": recipe.mode,
        "epsilon": recipe.epsilon,
        "fallback_coordinates": floor,
        "entries": [
            {
                "checkpoint": str(e.checkpoint),
                "checkpoint_sha256": file_sha256(e.checkpoint),
                "fisher": str(e.fisher) if e.fisher else None,
                "fisher_sha256": file_sha256(e.fisher) if e.fisher else None,
                "lambda": e.weight,
            }
            for e in recipe.entries
        ],
    }
    if logger:
        logger.info(f"🧪 Merged {len(recipe.entries)} checkpoint(s) ({recipe.mode}); {floor} fallback coordinate(s)")
    return MergedCheckpoint(merged, provenance)


# ========================
# VERIFICATION HELPERS
# ========================

def merge_objective(
    theta: Union[ParamVector, np.ndarray],
    params_list: Sequence[ParamVector],
    fishers: Sequence[FisherLike],
    lambdas: Optional[Sequence[float]] = None,
) -> float:
    """-1/2 sum_m lambda_m sum_j F_mj (theta_j - theta_mj)**2; maximised by fisher_merge."""
    x = theta.flat() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    lambdas = [1.0] * len(params_list) if lambdas is None else lambdas
    total = 0.0
    for lam, p, f in zip(lambdas, params_list, fishers):
        total += float(lam) * float(np.sum(_fisher_values(f) * (x - p.flat()) ** 2))
    return -0.5 * total


def merge_objective_grad(
    theta: Union[ParamVector, np.ndarray],
    params_list: Sequence[ParamVector],
    fishers: Sequence[FisherLike],
    lambdas: Optional[Sequence[float]] = None,
) -> np.ndarray:
    x = theta.flat() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=np.float64)
    lambdas = [1.0] * len(params_list) if lambdas is None else lambdas
    grad = np.zeros_like(x)
    for lam, p, f in zip(lambdas, params_list, fishers):
        grad -= float(lam) * _fisher_values(f) * (x - p.flat())
    return grad


def posterior_sample(
    params: ParamVector, fisher: FisherLike, count: int, epsilon: float, rng: np.random.Generator
) -> List[ParamVector]:
    """Independent Gaussian draws around params with per-coordinate variance 1 / (F + epsilon)."""
    if epsilon <= 0:
        raise ConfigError("posterior epsilon must be > 0")
    if isinstance(fisher, FisherDiag):
        _check_arch([params, fisher])
    theta = params.flat()
    F = _fisher_values(fisher)
    if F.shape != theta.shape:
        raise MergeError("fisher does not align with the parameters")
    std = 1.0 / np.sqrt(F + epsilon)
    return [ParamVector.from_flat(params.config, theta + std * rng.standard_normal(theta.size)) for _ in range(count)]
