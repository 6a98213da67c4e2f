"""
Diagonal Fisher information of a trained recommender.

The exact form enumerates every (sequence, item) pair:

    F = 1/N * sum_i sum_j p(v_j | s_i) * (grad log p(v_j | s_i))**2

The batch-wise form groups probability-sorted sequences into batches of BS
and spends one backward pass per (batch, selected item):

    sum_batches sum_j (sum_i p(v_j | s_i)) * (grad sum_i log p(v_j | s_i))**2

which is exact for BS = 1 and an approximation otherwise. Items are chosen
per batch by one of four strategies (random, topk, model, target).
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from artifacts import (
    read_f32_segments, read_header, read_name, read_u32, read_u64,
    write_f32_segments, write_header, write_name, write_u32, write_u64,
)
from data import LeaveOneOutSplit, eval_windows, next_item_windows
from errors import ArchMismatchError, ArtifactError, ConfigError, NumericError, ValidationError
from model import BackwardCounter, GradientContext, ModelConfig, ParamVector, compute_arch_hash, probabilities, segment_shapes


FISHER_MAGIC = b"MRGF"
FISHER_VERSION = 1

METHODS = ("random", "topk", "model", "target")
METHOD_ALIASES = {"model_based": "model", "target_item": "target", "top-k": "topk"}
ORDERINGS = ("prob", "random", "none")

# Published mean cumulative top-k mass at k = 10, 30, 50 on the full dataset
REFERENCE_TOPK_MASS = {10: 0.381, 30: 0.569, 50: 0.658}


@dataclass(frozen=True)
class SamplingSpec:
    method: str
    n: int = 1

    def __post_init__(self):
        method = METHOD_ALIASES.get(self.method, self.method)
        if method not in METHODS:
            raise ConfigError(f"unknown sampling method '{self.method}' (expected one of {', '.join(METHODS)})")
        object.__setattr__(self, "method", method)
        if method == "target":
            object.__setattr__(self, "n", 1)
        if self.n < 1:
            raise ConfigError(f"sample size must be >= 1, got {self.n}")

    def validate_for(self, num_items: int) -> None:
        if self.method in ("random", "topk") and self.n > num_items:
            raise ConfigError(f"{self.method} sampling of {self.n} distinct items but |V| = {num_items}")

    @property
    def label(self) -> str:
        return "target" if self.method == "target" else f"{self.method}(n={self.n})"


@dataclass(frozen=True)
class FisherMeta:
    method: str
    sample_size: int
    batch_size: int
    num_sequences: int
    seed: int
    ordering: str = "prob"
    sort_key: str = "top1"
    num_batches: int = 0
    backward_passes: int = 0
    rescaled: bool = False  # no |V|/n factor for random sampling

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class FisherDiag:
    config: ModelConfig
    values: np.ndarray
    meta: FisherMeta

    def __post_init__(self):
        total = sum(int(np.prod(s)) for s in segment_shapes(self.config).values())
        if self.values.shape != (total,):
            raise ArchMismatchError(f"Fisher vector has {self.values.size} entries, layout needs {total}")

    @property
    def arch_hash(self) -> int:
        return compute_arch_hash(self.config)

    def segments(self) -> Dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in segment_shapes(self.config).items():
            size = int(np.prod(shape))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NumericError("Fisher contains non-finite values")
        if np.any(self.values < 0):
            raise ValidationError(f"Fisher has {int(np.sum(self.values < 0))} negative coordinates")


# ========================
# EXACT ENUMERATION
# ========================

def full_fisher_diag(
    params: ParamVector, split: LeaveOneOutSplit, counter: Optional[BackwardCounter] = None
) -> FisherDiag:
    """Oracle: every sequence, every item. Desk scale only."""
    config = params.config
    windows, positions, _ = next_item_windows(split.train_prefixes, config.max_len, config.mask_token)
    counter = counter or BackwardCounter()
    acc = np.zeros(len(params), dtype=np.float64)
    for i in range(windows.shape[0]):
        ctx = GradientContext(params, windows[i:i + 1], positions[i:i + 1], counter)
        p = ctx.probs[0]
        for j in range(1, config.num_items + 1):
            g = ctx.grad(j)
            acc += p[j - 1] * g * g
    N = windows.shape[0]
    meta = FisherMeta(
        method="full", sample_size=config.num_items, batch_size=1, num_sequences=N, seed=0,
        ordering="none", num_batches=N, backward_passes=counter.count,
    )
    return FisherDiag(config, acc / max(N, 1), meta)


# ========================
# BATCH-WISE ESTIMATION
# ========================

def sort_sequences_by_prob(split: LeaveOneOutSplit, params: ParamVector) -> List[int]:
    """Rows ordered by descending top-1 probability, ties by ascending user id."""
    config = params.config
    windows, positions, _ = next_item_windows(split.train_prefixes, config.max_len, config.mask_token)
    top1 = probabilities(params, windows, positions).max(axis=1) if len(windows) else np.zeros(0)
    return sorted(range(split.num_users), key=lambda r: (-top1[r], split.user_ids[r]))


def select_items(
    batch_probs: np.ndarray,
    spec: SamplingSpec,
    rng: np.random.Generator,
    targets: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Items for one batch, from its (B, |V|) probability matrix.

    random  n distinct items, uniform without replacement
    topk    n items with the largest batch-summed probability, ties to the lower id
    model   n draws with replacement proportional to the batch-summed probability
    target  each window's own target (one per window)
    """
    num_items = batch_probs.shape[1]
    spec.validate_for(num_items)
    if spec.method == "target":
        if targets is None:
            raise ConfigError("target sampling needs the batch targets")
        return np.asarray(targets, dtype=np.int64)
    psum = batch_probs.sum(axis=0)
    if spec.method == "random":
        return rng.choice(num_items, size=spec.n, replace=False).astype(np.int64) + 1
    if spec.method == "topk":
        return np.argsort(-psum, kind="stable")[:spec.n].astype(np.int64) + 1
    weights = psum / psum.sum()
    return rng.choice(num_items, size=spec.n, replace=True, p=weights).astype(np.int64) + 1


def expected_backward_passes(num_sequences: int, batch_size: int, spec: SamplingSpec) -> int:
    num_batches = -(-num_sequences // batch_size)
    return num_batches * spec.n


def estimate_fisher(
    params: ParamVector,
    split: LeaveOneOutSplit,
    spec: SamplingSpec,
    batch_size: int,
    seed: int,
    ordering: str = "prob",
    counter: Optional[BackwardCounter] = None,
    logger=None,
    progress: bool = False,
) -> FisherDiag:
    """
    Batch-wise Fisher estimate over the training prefixes.

    random/topk/target contributions are weighted by the batch-summed
    probability of the item; model draws are averaged unweighted. The sum is
    divided by the number of sequences N.
    """
    config = params.config
    spec.validate_for(config.num_items)
    if batch_size < 1:
        raise ConfigError("Fisher batch size must be >= 1")
    if ordering not in ORDERINGS:
        raise ConfigError(f"unknown batch ordering '{ordering}'")

    rng = np.random.default_rng(seed)
    windows, positions, targets = next_item_windows(split.train_prefixes, config.max_len, config.mask_token)
    N = windows.shape[0]
    if ordering == "prob":
        order = sort_sequences_by_prob(split, params)
    elif ordering == "random":
        order = [int(r) for r in np.random.default_rng([seed, 1]).permutation(N)]
    else:
        order = list(range(N))

    counter = counter or BackwardCounter()
    start_count = counter.count
    acc = np.zeros(len(params), dtype=np.float64)
    batches = [order[i:i + batch_size] for i in range(0, N, batch_size)]

    for rows in tqdm(batches, desc=f"fisher {spec.label}", disable=not progress):
        ctx = GradientContext(params, windows[rows], positions[rows], counter)
        probs = ctx.probs
        items = select_items(probs, spec, rng, targets[rows])
        if spec.method == "target":
            g = ctx.grad(items)
            weight = probs[np.arange(len(rows)), items - 1].sum()
            acc += weight * g * g
        elif spec.method == "model":
            for j in items:
                g = ctx.grad(int(j))
                acc += g * g / spec.n
        else:
            for j in items:
                g = ctx.grad(int(j))
                acc += probs[:, j - 1].sum() * g * g

    if not np.all(np.isfinite(acc)):
        raise NumericError(f"non-finite Fisher accumulation ({spec.label})")

    meta = FisherMeta(
        method=spec.method, sample_size=spec.n, batch_size=batch_size, num_sequences=N, seed=int(seed),
        ordering=ordering, num_batches=len(batches), backward_passes=counter.count - start_count,
    )
    if logger:
        logger.debug(f"  Fisher {spec.label}: {len(batches)} batches, {meta.backward_passes} backward passes")
    return FisherDiag(config, acc / max(N, 1), meta)


def batching_fidelity(
    params: ParamVector, split: LeaveOneOutSplit, spec: SamplingSpec, batch_size: int, seed: int
) -> Dict[str, float]:
    """
    Deviation of probability-sorted vs randomly shuffled batching from the
    exact Fisher. The batch-wise form is not scale-matched to the exact one,
    so a scale-normalised deviation (each estimate rescaled to the oracle's
    total mass) is reported next to the raw one.
    """
    oracle = full_fisher_diag(params, split).values
    out: Dict[str, float] = {}
    for ordering in ("prob", "random"):
        est = estimate_fisher(params, split, spec, batch_size, seed, ordering=ordering).values
        out[f"{ordering}_mad"] = float(np.mean(np.abs(est - oracle)))
        scale = oracle.sum() / est.sum() if est.sum() > 0 else 0.0
        out[f"{ordering}_mad_normalised"] = float(np.mean(np.abs(est * scale - oracle)))
    return out


def cumulative_topk_mass(params: ParamVector, split: LeaveOneOutSplit, sizes: Sequence[int]) -> List[float]:
    """Mean over evaluation sequences of the probability mass in the top-k items."""
    sizes = [int(k) for k in sizes]
    if any(k < 1 for k in sizes) or sizes != sorted(sizes):
        raise ConfigError(f"sizes must be positive and ascending, got {sizes}")
    config = params.config
    windows, _ = eval_windows(split, config.max_len)
    probs = probabilities(params, windows, config.max_len - 1)
    cumulative = np.cumsum(-np.sort(-probs, axis=1), axis=1)
    return [float(cumulative[:, min(k, config.num_items) - 1].mean()) for k in sizes]


# ========================
# FISHER FILES
# ========================

def save_fisher(fisher: FisherDiag, path: Path) -> Path:
    """MRGF: magic, u32 version, u64 arch_hash, metadata (method, n, BS, N, seed), float32 segments."""
    path = Path(path)
    meta = fisher.meta
    with open(path, "wb") as f:
        write_header(f, FISHER_MAGIC, FISHER_VERSION)
        write_u64(f, fisher.arch_hash)
        write_name(f, meta.method)
        write_u32(f, meta.sample_size)
        write_u32(f, meta.batch_size)
        write_u32(f, meta.num_sequences)
        write_u64(f, meta.seed)
        write_f32_segments(f, list(fisher.segments().items()))
    return path


def load_fisher(path: Path, config: ModelConfig) -> FisherDiag:
    expected = compute_arch_hash(config)
    with open(path, "rb") as f:
        read_header(f, FISHER_MAGIC, FISHER_VERSION)
        arch_hash = read_u64(f, "arch_hash")
        if arch_hash != expected:
            raise ArchMismatchError(f"{path}: arch_hash {arch_hash:016x} != expected {expected:016x}")
        method = read_name(f)
        n = read_u32(f, "sample size")
        bs = read_u32(f, "batch size")
        N = read_u32(f, "sequence count")
        seed = read_u64(f, "seed")
        segments = read_f32_segments(f)
    if [name for name, _ in segments] != list(segment_shapes(config)):
        raise ArtifactError(f"{path}: segment table does not match the layout")
    values = np.concatenate([v for _, v in segments]) if segments else np.zeros(0)
    meta = FisherMeta(method=method, sample_size=n, batch_size=bs, num_sequences=N, seed=seed)
    return FisherDiag(config, values, meta)


def round_fisher_to_storage(fisher: FisherDiag) -> FisherDiag:
    """Round through the float32 file precision."""
    return FisherDiag(fisher.config, fisher.values.astype(np.float32).astype(np.float64), fisher.meta)
