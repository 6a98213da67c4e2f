"""
Compact bidirectional-attention sequential recommender.

The model is written functionally over a dict of named parameter segments so
that the same code serves training (leaf tensors owned by an Adam state),
Fisher estimation (fresh leaves per gradient context) and merging (plain
flat vectors). Everything runs in float64 on CPU; gradients come from
torch.autograd over this fixed architecture.

Architecture: item + learned position embeddings, n_layers pre-norm encoder
layers (bidirectional multi-head attention, GELU feed-forward of width
4*d_model), a final layer norm and an output projection tied to the item
embedding plus a per-item bias.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from artifacts import digest_u64, read_f32_segments, read_header, read_u64, write_f32_segments, write_header, write_u64
from data import IGNORE_LABEL, PAD_ID, MaskedBatch
from debug_utils import maybe_dump_tensors
from errors import ArchMismatchError, ArtifactError, ConfigError, InputError, TrainingError


DTYPE = torch.float64

CHECKPOINT_MAGIC = b"MRGC"
CHECKPOINT_VERSION = 1

LAYER_NORM_EPS = 1e-5

_SCORING_WORKERS: int = 1


def configure_threads(workers: int) -> None:
    """
    Pin torch to one intra-op thread and let `workers` fan out independent
    scoring chunks instead. Chunk results are concatenated in order, so the
    output does not depend on the worker count.
    """
    global _SCORING_WORKERS
    if workers < 1:
        raise ConfigError(f"threads must be >= 1, got {workers}")
    torch.set_num_threads(1)
    _SCORING_WORKERS = int(workers)


def _map_chunks(fn, total: int, chunk: int) -> list:
    starts = range(0, total, chunk)
    if _SCORING_WORKERS == 1 or len(starts) < 2:
        return [fn(i) for i in starts]
    with ThreadPoolExecutor(max_workers=_SCORING_WORKERS) as pool:
        return list(pool.map(fn, starts))


# ========================
# CONFIG AND PARAMETERS
# ========================

@dataclass(frozen=True)
class ModelConfig:
    num_items: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 50
    dropout: float = 0.2
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    init_std: float = 0.02

    def __post_init__(self):
        if self.num_items < 1:
            raise ConfigError("num_items must be >= 1")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len (T) must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def vocab_size(self) -> int:
        return self.num_items + 2

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    def arch(self) -> Dict[str, int]:
        """Fields that determine the parameter layout."""
        return {
            "num_items": self.num_items,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "max_len": self.max_len,
        }

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["betas"] = list(self.betas)
        return payload


def segment_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical (name-sorted) segment layout."""
    d, V = config.d_model, config.num_items
    shapes: Dict[str, Tuple[int, ...]] = {
        "item_embedding": (config.vocab_size, d),
        "item_bias": (V,),
        "pos_embedding": (config.max_len, d),
        "final_norm.scale": (d,),
        "final_norm.shift": (d,),
    }
    for layer in range(config.n_layers):
        p = f"layer{layer}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}_weight"] = (d, d)
        shapes[f"{p}.attn_norm.scale"] = (d,)
        shapes[f"{p}.attn_norm.shift"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, 4 * d)
        shapes[f"{p}.ffn.b1"] = (4 * d,)
        shapes[f"{p}.ffn.w2"] = (4 * d, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ffn_norm.scale"] = (d,)
        shapes[f"{p}.ffn_norm.shift"] = (d,)
    return {name: shapes[name] for name in sorted(shapes)}


def compute_arch_hash(config: ModelConfig) -> int:
    shapes = segment_shapes(config)
    return digest_u64({"segments": [[n, list(s)] for n, s in shapes.items()], "config": config.arch()})


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Named-segment parameter vector; the unit of merging."""

    config: ModelConfig
    segments: Dict[str, torch.Tensor] = field(repr=False)

    def __post_init__(self):
        shapes = segment_shapes(self.config)
        if list(self.segments) != list(shapes):
            raise ArchMismatchError("segment names do not match the canonical layout")
        for name, shape in shapes.items():
            if tuple(self.segments[name].shape) != shape:
                raise ArchMismatchError(f"segment {name} has shape {tuple(self.segments[name].shape)}, expected {shape}")

    @property
    def arch_hash(self) -> int:
        return compute_arch_hash(self.config)

    @property
    def names(self) -> List[str]:
        return list(self.segments)

    def __len__(self) -> int:
        return sum(t.numel() for t in self.segments.values())

    def flat(self) -> np.ndarray:
        return torch.cat([t.reshape(-1) for t in self.segments.values()]).numpy().astype(np.float64)

    def segment_slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for name, t in self.segments.items():
            out[name] = slice(start, start + t.numel())
            start += t.numel()
        return out

    @classmethod
    def from_flat(cls, config: ModelConfig, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        shapes = segment_shapes(config)
        total = sum(math.prod(s) for s in shapes.values())
        if values.shape != (total,):
            raise ArchMismatchError(f"flat vector has {values.size} entries, layout needs {total}")
        segments, start = {}, 0
        for name, shape in shapes.items():
            size = math.prod(shape)
            segments[name] = torch.tensor(values[start:start + size], dtype=DTYPE).reshape(shape)
            start += size
        return cls(config, segments)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.segments.values())


def ensure_same_arch(params: Sequence[Any]) -> int:
    """All items (ParamVector or FisherDiag) must share one arch_hash."""
    hashes = {p.arch_hash for p in params}
    if len(hashes) > 1:
        raise ArchMismatchError(f"arch_hash mismatch: {sorted(f'{h:016x}' for h in hashes)}")
    return hashes.pop()


def round_to_storage(params: ParamVector) -> ParamVector:
    """Round through the float32 checkpoint precision."""
    return ParamVector.from_flat(params.config, params.flat().astype(np.float32).astype(np.float64))


def init_params(config: ModelConfig, seed: int) -> ParamVector:
    """Normal(0, init_std) everywhere except layer norms (scale 1, shift 0)."""
    gen = torch.Generator().manual_seed(int(seed))
    segments = {}
    for name, shape in segment_shapes(config).items():
        if name.endswith(".scale"):
            segments[name] = torch.ones(shape, dtype=DTYPE)
        elif name.endswith(".shift"):
            segments[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            segments[name] = torch.randn(shape, generator=gen, dtype=DTYPE) * config.init_std
    return ParamVector(config, segments)


# ========================
# FORWARD
# ========================

@dataclass
class ForwardOutput:
    logits: torch.Tensor   # (Q, |V|), column j-1 is item j
    probs: torch.Tensor    # (Q, |V|)


class BackwardCounter:
    """Counts backward passes so cost can be asserted without timing."""

    def __init__(self):
        self.count = 0

    def tick(self) -> None:
        self.count += 1


def _as_windows(windows, config: ModelConfig) -> torch.Tensor:
    w = torch.as_tensor(np.asarray(windows), dtype=torch.long)
    if w.dim() == 1:
        w = w.unsqueeze(0)
    if w.dim() != 2 or w.shape[1] != config.max_len:
        raise InputError(f"windows must have shape (B, {config.max_len}), got {tuple(w.shape)}")
    if bool(((w < 0) | (w > config.mask_token)).any()):
        raise InputError(f"item id outside 0..{config.mask_token}")
    return w


def _as_positions(positions, batch: int, config: ModelConfig) -> torch.Tensor:
    p = torch.as_tensor(np.asarray(positions), dtype=torch.long).reshape(-1)
    if p.numel() == 1 and batch > 1:
        p = p.expand(batch)
    if p.numel() != batch or bool(((p < 0) | (p >= config.max_len)).any()):
        raise InputError(f"query positions must be {batch} values in 0..{config.max_len - 1}")
    return p


def _dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator]) -> torch.Tensor:
    if gen is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def encode(
    seg: Dict[str, torch.Tensor],
    windows: torch.Tensor,
    config: ModelConfig,
    dropout_seed: Optional[int] = None,
) -> torch.Tensor:
    """Hidden states (B, T, d) for left-padded windows."""
    B, T = windows.shape
    H = config.n_heads
    dh = config.d_model // H
    gen = torch.Generator().manual_seed(int(dropout_seed)) if dropout_seed is not None else None
    p = config.dropout

    x = seg["item_embedding"][windows] + seg["pos_embedding"][:T].unsqueeze(0)
    x = _dropout(x, p, gen)

    key_pad = (windows == PAD_ID)[:, None, None, :]
    attn_bias = torch.zeros(key_pad.shape, dtype=DTYPE).masked_fill(key_pad, float("-inf"))

    for layer in range(config.n_layers):
        pre = f"layer{layer}"
        h = F.layer_norm(x, (config.d_model,), seg[f"{pre}.attn_norm.scale"], seg[f"{pre}.attn_norm.shift"], LAYER_NORM_EPS)
        q = (h @ seg[f"{pre}.attn.q_weight"]).view(B, T, H, dh).transpose(1, 2)
        k = (h @ seg[f"{pre}.attn.k_weight"]).view(B, T, H, dh).transpose(1, 2)
        v = (h @ seg[f"{pre}.attn.v_weight"]).view(B, T, H, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + attn_bias
        attn = _dropout(torch.softmax(scores, dim=-1), p, gen)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, config.d_model)
        x = x + _dropout(ctx @ seg[f"{pre}.attn.o_weight"], p, gen)

        h = F.layer_norm(x, (config.d_model,), seg[f"{pre}.ffn_norm.scale"], seg[f"{pre}.ffn_norm.shift"], LAYER_NORM_EPS)
        ff = F.gelu(h @ seg[f"{pre}.ffn.w1"] + seg[f"{pre}.ffn.b1"]) @ seg[f"{pre}.ffn.w2"] + seg[f"{pre}.ffn.b2"]
        x = x + _dropout(ff, p, gen)

    return F.layer_norm(x, (config.d_model,), seg["final_norm.scale"], seg["final_norm.shift"], LAYER_NORM_EPS)


def output_logits(seg: Dict[str, torch.Tensor], hidden: torch.Tensor) -> torch.Tensor:
    """Tied output projection over items 1..|V|."""
    items = seg["item_embedding"][1:-1]
    return hidden @ items.T + seg["item_bias"]


def representations(
    seg: Dict[str, torch.Tensor], windows, config: ModelConfig, dropout_seed: Optional[int] = None
) -> torch.Tensor:
    """Final-position encoder outputs, L2-normalised (contrastive interface)."""
    w = _as_windows(windows, config)
    hidden = encode(seg, w, config, dropout_seed)
    return F.normalize(hidden[:, -1, :], dim=-1)


def forward(params: ParamVector, windows, query_positions, dropout_seed: Optional[int] = None) -> ForwardOutput:
    """Logits and probabilities at one query position per window."""
    config = params.config
    w = _as_windows(windows, config)
    pos = _as_positions(query_positions, w.shape[0], config)
    with torch.no_grad():
        hidden = encode(params.segments, w, config, dropout_seed)
        logits = output_logits(params.segments, hidden[torch.arange(w.shape[0]), pos])
    return ForwardOutput(logits=logits, probs=torch.softmax(logits, dim=-1))


def probabilities(params: ParamVector, windows, query_positions, chunk: int = 256) -> np.ndarray:
    """p(v_j | s) as a float64 (N, |V|) array, evaluated in chunks."""
    windows = np.asarray(windows)
    positions = np.array(np.broadcast_to(np.asarray(query_positions), (windows.shape[0],)))
    parts = _map_chunks(
        lambda i: forward(params, windows[i:i + chunk], positions[i:i + chunk]).probs.numpy(), windows.shape[0], chunk
    )
    if not parts:
        return np.zeros((0, params.config.num_items))
    return np.concatenate(parts, axis=0)


def score_items(params: ParamVector, windows, chunk: int = 256) -> np.ndarray:
    """Logits at the final position for every window (N, |V|)."""
    windows = np.asarray(windows)
    T = params.config.max_len
    parts = _map_chunks(
        lambda i: forward(params, windows[i:i + chunk], np.full(min(chunk, windows.shape[0] - i), T - 1)).logits.numpy(),
        windows.shape[0],
        chunk,
    )
    if not parts:
        return np.zeros((0, params.config.num_items))
    return np.concatenate(parts, axis=0)


# ========================
# GRADIENTS
# ========================

class GradientContext:
    """
    One forward graph over a batch of windows; each `grad` call is one
    backward pass of the batch-summed log-probability of the given item(s).
    """

    def __init__(self, params: ParamVector, windows, positions, counter: Optional[BackwardCounter] = None):
        self.params = params
        self.counter = counter
        config = params.config
        w = _as_windows(windows, config)
        pos = _as_positions(positions, w.shape[0], config)
        self.leaves = {n: t.detach().clone().requires_grad_(True) for n, t in params.segments.items()}
        hidden = encode(self.leaves, w, config)
        self.log_probs = torch.log_softmax(output_logits(self.leaves, hidden[torch.arange(w.shape[0]), pos]), dim=-1)
        self.batch = w.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return self.log_probs.detach().exp().numpy()

    def grad(self, items: Union[int, Sequence[int], np.ndarray]) -> np.ndarray:
        idx = torch.as_tensor(np.asarray(items), dtype=torch.long).reshape(-1)
        if idx.numel() == 1:
            idx = idx.expand(self.batch)
        if idx.numel() != self.batch:
            raise InputError(f"expected 1 or {self.batch} items, got {idx.numel()}")
        if bool(((idx < 1) | (idx > self.params.config.num_items)).any()):
            raise InputError(f"item id outside 1..{self.params.config.num_items}")
        total = self.log_probs.gather(1, (idx - 1).unsqueeze(1)).sum()
        names = list(self.leaves)
        grads = torch.autograd.grad(total, [self.leaves[n] for n in names], retain_graph=True, allow_unused=True)
        if self.counter is not None:
            self.counter.tick()
        return torch.cat([
            (g if g is not None else torch.zeros_like(self.leaves[n])).reshape(-1)
            for n, g in zip(names, grads)
        ]).numpy()


def grad_sum_log_prob(
    params: ParamVector,
    windows,
    positions,
    items: Union[int, Sequence[int]],
    counter: Optional[BackwardCounter] = None,
) -> np.ndarray:
    """Gradient of sum_i log p(item_i | window_i) in a single backward pass."""
    return GradientContext(params, windows, positions, counter).grad(items)


def grad_log_prob(
    params: ParamVector, window, position: int, item: int, counter: Optional[BackwardCounter] = None
) -> np.ndarray:
    """Exact gradient of log p(item | window) at `position` (dropout off)."""
    return grad_sum_log_prob(params, np.asarray(window).reshape(1, -1), [position], item, counter)


# ========================
# TRAINING STEP
# ========================

class LossSpec(Protocol):
    lambda_cl: float

    def contrastive_term(self, seg: Dict[str, torch.Tensor], batch: MaskedBatch, config: ModelConfig,
                         rng: np.random.Generator) -> torch.Tensor: ...


class AdamState:
    """torch.optim.Adam over leaf copies of a ParamVector's segments."""

    def __init__(self, params: ParamVector, lr: Optional[float] = None, betas: Optional[Tuple[float, float]] = None):
        self.config = params.config
        self.tensors = {n: t.detach().clone().requires_grad_(True) for n, t in params.segments.items()}
        self.optimizer = torch.optim.Adam(
            list(self.tensors.values()),
            lr=lr if lr is not None else params.config.lr,
            betas=tuple(betas if betas is not None else params.config.betas),
            weight_decay=0.0,
        )

    def load(self, params: ParamVector) -> None:
        with torch.no_grad():
            for name, t in params.segments.items():
                self.tensors[name].copy_(t)

    def snapshot(self) -> ParamVector:
        return ParamVector(self.config, {n: t.detach().clone() for n, t in self.tensors.items()})


@dataclass
class TrainStepResult:
    params: ParamVector
    ce_loss: float
    cl_loss: float


def masked_cross_entropy(seg: Dict[str, torch.Tensor], batch: MaskedBatch, config: ModelConfig,
                         dropout_seed: Optional[int]) -> torch.Tensor:
    inputs = _as_windows(batch.inputs, config)
    labels = torch.as_tensor(batch.labels, dtype=torch.long)
    hidden = encode(seg, inputs, config, dropout_seed)
    selected = labels != IGNORE_LABEL
    logits = output_logits(seg, hidden[selected])
    return F.cross_entropy(logits, labels[selected] - 1)


def train_step(
    params: ParamVector,
    batch: MaskedBatch,
    loss_spec: Optional[LossSpec],
    optimizer_state: AdamState,
    rng: np.random.Generator,
) -> TrainStepResult:
    """
    One Adam update on masked-item cross-entropy plus lambda_cl times the
    framework's contrastive term.

    Raises:
        TrainingError: loss is not finite (tensors dumped when debugging is on)
    """
    config = params.config
    optimizer_state.load(params)
    seg = optimizer_state.tensors
    dropout_seed = int(rng.integers(0, 2**31 - 1))

    ce = masked_cross_entropy(seg, batch, config, dropout_seed)
    lambda_cl = float(loss_spec.lambda_cl) if loss_spec is not None else 0.0
    if lambda_cl > 0.0:
        cl = loss_spec.contrastive_term(seg, batch, config, rng)
        loss = ce + lambda_cl * cl
    else:
        cl = torch.zeros((), dtype=DTYPE)
        loss = ce

    if not bool(torch.isfinite(loss)):
        diagnostics = {
            "ce_loss": float(ce.detach()),
            "cl_loss": float(cl.detach()),
            "batch_rows": list(batch.rows),
            "params_finite": params.all_finite(),
        }
        maybe_dump_tensors({"inputs": batch.inputs, "labels": batch.labels, **diagnostics}, name="non_finite_loss")
        raise TrainingError("non-finite training loss", diagnostics=diagnostics)

    optimizer_state.optimizer.zero_grad()
    loss.backward()
    optimizer_state.optimizer.step()
    return TrainStepResult(optimizer_state.snapshot(), float(ce.detach()), float(cl.detach()))


# ========================
# CHECKPOINT FILES
# ========================

def save_checkpoint(params: ParamVector, path: Path) -> Path:
    """MRGC: magic, u32 version, u64 arch_hash, then the float32 segment table."""
    path = Path(path)
    with open(path, "wb") as f:
        write_header(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        write_u64(f, params.arch_hash)
        write_f32_segments(f, [(n, t.numpy()) for n, t in params.segments.items()])
    return path


def load_checkpoint(path: Path, config: ModelConfig) -> ParamVector:
    """
    Raises:
        ArchMismatchError: the file was written for a different architecture
        ArtifactError: bad magic, version or truncated file
    """
    expected = compute_arch_hash(config)
    shapes = segment_shapes(config)
    with open(path, "rb") as f:
        read_header(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        arch_hash = read_u64(f, "arch_hash")
        if arch_hash != expected:
            raise ArchMismatchError(f"{path}: arch_hash {arch_hash:016x} != expected {expected:016x}")
        segments = read_f32_segments(f)
    if [n for n, _ in segments] != list(shapes):
        raise ArtifactError(f"{path}: segment table does not match the layout")
    return ParamVector(config, {
        n: torch.tensor(values, dtype=DTYPE).reshape(shapes[n]) for n, values in segments
    })
