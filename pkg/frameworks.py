"""
Contrastive-learning frameworks that differentiate the merge recipes.

baseline      masked-item cross-entropy only
cl4srec       two independently augmented views (crop / mask / reorder)
duorec_sup    partner sequence with the same next-item target
duorec_unsup  same sequence encoded twice under independent dropout
duorec_both   mean of the supervised and unsupervised terms
"""
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from data import LeaveOneOutSplit, MaskedBatch, pad_window
from errors import ConfigError, ContrastiveError
from model import DTYPE, ModelConfig, ParamVector, representations


KINDS = ("baseline", "cl4srec", "duorec_sup", "duorec_unsup", "duorec_both")

# table label and the "pos" column for each kind
ROW_LABELS = {
    "baseline": ("baseline", ""),
    "cl4srec": ("cl4srec", ""),
    "duorec_sup": ("duorec", "sup"),
    "duorec_unsup": ("duorec", "unsup"),
    "duorec_both": ("duorec", "-"),
}


@dataclass(frozen=True)
class FrameworkSpec:
    kind: str
    lambda_cl: float = 0.1
    temperature: float = 1.0
    crop: float = 0.6
    mask: float = 0.3
    reorder: float = 0.3
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown framework kind '{self.kind}' (expected one of {', '.join(KINDS)})")
        if self.lambda_cl < 0:
            raise ConfigError("lambda_cl must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        for label, ratio in (("crop", self.crop), ("mask", self.mask), ("reorder", self.reorder)):
            if not 0.0 < ratio < 1.0:
                raise ConfigError(f"{label} ratio must be in (0, 1), got {ratio}")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "FrameworkSpec":
        if "kind" not in payload:
            raise ConfigError("framework block needs a 'kind'")
        return cls(
            kind=payload["kind"],
            lambda_cl=float(payload.get("lambda_cl", 0.1)),
            temperature=float(payload.get("temperature", 1.0)),
            crop=float(payload.get("crop", 0.6)),
            mask=float(payload.get("mask", 0.3)),
            reorder=float(payload.get("reorder", 0.3)),
            name=payload.get("name"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class PositivePairBatch:
    z1: torch.Tensor
    z2: torch.Tensor
    partners: Tuple[Optional[int], ...] = ()

    def __post_init__(self):
        if self.z1.shape != self.z2.shape:
            raise ContrastiveError(f"pair shapes differ: {tuple(self.z1.shape)} vs {tuple(self.z2.shape)}")


# ========================
# AUGMENTATIONS
# ========================

def augment_crop(seq: Sequence[int], eta: float, rng: np.random.Generator) -> List[int]:
    """Contiguous window of max(1, floor(eta * len)) items at a uniform start."""
    seq = list(seq)
    if len(seq) < 2:
        return seq
    length = max(1, int(eta * len(seq)))
    start = int(rng.integers(0, len(seq) - length + 1))
    return seq[start:start + length]


def augment_mask(seq: Sequence[int], gamma: float, rng: np.random.Generator, mask_token: int) -> List[int]:
    """Each position replaced by mask_token independently with probability gamma."""
    hits = rng.random(len(seq)) < gamma
    return [mask_token if hit else int(item) for item, hit in zip(seq, hits)]


def augment_reorder(seq: Sequence[int], beta: float, rng: np.random.Generator) -> List[int]:
    """Shuffle a uniformly placed contiguous span of floor(beta * len) items."""
    seq = list(seq)
    span = int(beta * len(seq))
    if span < 2:
        return seq
    start = int(rng.integers(0, len(seq) - span + 1))
    seq[start:start + span] = [int(x) for x in rng.permutation(seq[start:start + span])]
    return seq


def augment_view(seq: Sequence[int], spec: FrameworkSpec, rng: np.random.Generator, mask_token: int) -> List[int]:
    """One augmentation, chosen uniformly, per view."""
    choice = int(rng.integers(3))
    if choice == 0:
        return augment_crop(seq, spec.crop, rng)
    if choice == 1:
        return augment_mask(seq, spec.mask, rng, mask_token)
    return augment_reorder(seq, spec.reorder, rng)


# ========================
# CONTRASTIVE LOSS
# ========================

def info_nce(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Mean over all 2B anchors of -log softmax of the positive among the
    anchor's 2B - 1 non-self candidates (cosine similarity / temperature).
    """
    B = z1.shape[0]
    if B < 2:
        raise ContrastiveError(f"info_nce needs a batch of at least 2 pairs, got {B}")
    reps = torch.cat([F.normalize(z1, dim=-1), F.normalize(z2, dim=-1)], dim=0)
    sim = reps @ reps.T / temperature
    self_mask = torch.eye(2 * B, dtype=torch.bool)
    sim = sim.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(B) + B, torch.arange(B)])
    return F.cross_entropy(sim, targets)


# ========================
# PAIR CONSTRUCTION
# ========================

def _unpack(params: Union[ParamVector, Dict[str, torch.Tensor]], config: Optional[ModelConfig]):
    if isinstance(params, ParamVector):
        return params.segments, params.config
    if config is None:
        raise ConfigError("a ModelConfig is required with raw segments")
    return params, config


def contrastive_windows(split: LeaveOneOutSplit, rows: Sequence[Optional[int]], T: int) -> np.ndarray:
    return np.asarray([pad_window(split.contrastive_inputs[r], T) for r in rows], dtype=np.int64).reshape(len(rows), T)


def supervised_partners(rows: Sequence[int], split: LeaveOneOutSplit, rng: np.random.Generator) -> Tuple[Optional[int], ...]:
    """
    For each row, a uniformly chosen other row with the same next-item
    target; None when the target is unique (or the prefix has no target).
    """
    partners: List[Optional[int]] = []
    for row in rows:
        target = split.contrastive_targets[row]
        candidates = [r for r in split.rows_by_target.get(target, ()) if r != row] if target is not None else []
        partners.append(int(candidates[int(rng.integers(len(candidates)))]) if candidates else None)
    return tuple(partners)


def duorec_supervised_pairs(
    params, batch: MaskedBatch, split: LeaveOneOutSplit, rng: np.random.Generator,
    config: Optional[ModelConfig] = None,
) -> PositivePairBatch:
    """Same-target partners; rows without one fall back to a dropout pair of themselves."""
    seg, config = _unpack(params, config)
    partners = supervised_partners(batch.rows, split, rng)
    seed_a, seed_b = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    own = contrastive_windows(split, batch.rows, config.max_len)
    other = contrastive_windows(split, [p if p is not None else r for p, r in zip(partners, batch.rows)], config.max_len)
    z1 = representations(seg, own, config, seed_a if config.dropout > 0 else None)
    z2 = representations(seg, other, config, seed_b if config.dropout > 0 else None)
    return PositivePairBatch(z1, z2, partners)


def duorec_unsupervised_pairs(
    params, windows: np.ndarray, seed1: int, seed2: int, config: Optional[ModelConfig] = None,
) -> PositivePairBatch:
    """Two forward passes of the same windows under independent dropout seeds."""
    seg, config = _unpack(params, config)
    if config.dropout <= 0.0:
        raise ContrastiveError("dropout-based pairs need dropout > 0 (the two views would be identical)")
    z1 = representations(seg, windows, config, seed1)
    z2 = representations(seg, windows, config, seed2)
    return PositivePairBatch(z1, z2)


def cl4srec_pairs(
    params, batch: MaskedBatch, split: LeaveOneOutSplit, spec: FrameworkSpec, rng: np.random.Generator,
    config: Optional[ModelConfig] = None,
) -> PositivePairBatch:
    seg, config = _unpack(params, config)
    T = config.max_len
    views1, views2 = [], []
    for row in batch.rows:
        seq = split.contrastive_inputs[row]
        views1.append(pad_window(augment_view(seq, spec, rng, config.mask_token), T))
        views2.append(pad_window(augment_view(seq, spec, rng, config.mask_token), T))
    seed_a, seed_b = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    z1 = representations(seg, np.asarray(views1, dtype=np.int64), config, seed_a if config.dropout > 0 else None)
    z2 = representations(seg, np.asarray(views2, dtype=np.int64), config, seed_b if config.dropout > 0 else None)
    return PositivePairBatch(z1, z2)


# ========================
# LOSS SPEC
# ========================

@dataclass(frozen=True)
class FrameworkLoss:
    """Loss settings consumed by model.train_step."""

    framework: FrameworkSpec
    lambda_cl: float
    split: Optional[LeaveOneOutSplit] = None

    def with_split(self, split: LeaveOneOutSplit) -> "FrameworkLoss":
        return replace(self, split=split)

    def _unsup(self, seg, batch: MaskedBatch, config: ModelConfig, rng: np.random.Generator) -> torch.Tensor:
        seed1, seed2 = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
        windows = contrastive_windows(self.split, batch.rows, config.max_len)
        pairs = duorec_unsupervised_pairs(seg, windows, seed1, seed2, config)
        return info_nce(pairs.z1, pairs.z2, self.framework.temperature)

    def _sup(self, seg, batch: MaskedBatch, config: ModelConfig, rng: np.random.Generator) -> torch.Tensor:
        pairs = duorec_supervised_pairs(seg, batch, self.split, rng, config)
        return info_nce(pairs.z1, pairs.z2, self.framework.temperature)

    def contrastive_term(self, seg: Dict[str, torch.Tensor], batch: MaskedBatch, config: ModelConfig,
                         rng: np.random.Generator) -> torch.Tensor:
        kind = self.framework.kind
        if kind == "baseline" or batch.size < 2:
            return torch.zeros((), dtype=DTYPE)
        if self.split is None:
            raise ConfigError(f"framework '{kind}' needs the training split (call with_split)")
        if kind == "cl4srec":
            pairs = cl4srec_pairs(seg, batch, self.split, self.framework, rng, config)
            return info_nce(pairs.z1, pairs.z2, self.framework.temperature)
        if kind == "duorec_sup":
            return self._sup(seg, batch, config, rng)
        if kind == "duorec_unsup":
            return self._unsup(seg, batch, config, rng)
        return 0.5 * (self._sup(seg, batch, config, rng) + self._unsup(seg, batch, config, rng))


def build_loss_spec(framework: FrameworkSpec, split: Optional[LeaveOneOutSplit] = None) -> FrameworkLoss:
    """baseline always trains with lambda_cl = 0; every other kind keeps its configured weight."""
    if framework.kind not in KINDS:
        raise ConfigError(f"unknown framework kind '{framework.kind}'")
    lambda_cl = 0.0 if framework.kind == "baseline" else float(framework.lambda_cl)
    return FrameworkLoss(framework=framework, lambda_cl=lambda_cl, split=split)
