"""
Interaction ingestion, per-user sequences, leave-one-out split and masked
training batches.

Item ids are remapped to a dense 1..|V| space. Id 0 is the pad token and
|V|+1 the mask token; both are reserved and never appear in sequences.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from artifacts import read_header, read_u32, write_header, write_u32
from errors import ConfigError, DataError, EmptyDatasetError, ParseError


PAD_ID = 0
IGNORE_LABEL = -100

DATASET_MAGIC = b"MRGD"
DATASET_VERSION = 1

DEFAULT_MIN_SEQ_LEN = 5
DEFAULT_MASK_PROB = 0.2
DEFAULT_WINDOW = 50


# ========================
# DOMAIN TYPES
# ========================

@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class SequenceDataset:
    """Per-user chronological item sequences over dense item ids."""

    user_ids: Tuple[int, ...]
    sequences: Tuple[Tuple[int, ...], ...]
    item_map: Tuple[int, ...]  # item_map[dense_id - 1] -> original item id
    popularity: np.ndarray = field(compare=False, repr=False)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_map)

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    def decode_items(self, dense_ids: Iterable[int]) -> List[int]:
        """Map dense ids back to the original item ids."""
        return [self.item_map[i - 1] for i in dense_ids]


@dataclass(frozen=True)
class LeaveOneOutSplit:
    user_ids: Tuple[int, ...]
    train_prefixes: Tuple[Tuple[int, ...], ...]
    valid_targets: Tuple[int, ...]
    test_targets: Tuple[int, ...]
    num_items: int

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    def sequence(self, row: int) -> Tuple[int, ...]:
        return self.train_prefixes[row] + (self.valid_targets[row], self.test_targets[row])

    @cached_property
    def contrastive_inputs(self) -> Tuple[Tuple[int, ...], ...]:
        """Training prefix without its last item (whole prefix when it has one item)."""
        return tuple(p[:-1] if len(p) >= 2 else p for p in self.train_prefixes)

    @cached_property
    def contrastive_targets(self) -> Tuple[Optional[int], ...]:
        return tuple(p[-1] if len(p) >= 2 else None for p in self.train_prefixes)

    @cached_property
    def rows_by_target(self) -> Dict[int, Tuple[int, ...]]:
        index: Dict[int, List[int]] = {}
        for row, target in enumerate(self.contrastive_targets):
            if target is not None:
                index.setdefault(target, []).append(row)
        return {t: tuple(rows) for t, rows in index.items()}

    @cached_property
    def histories(self) -> Tuple[frozenset, ...]:
        return tuple(frozenset(self.sequence(r)) for r in range(self.num_users))


@dataclass(frozen=True)
class MaskedBatch:
    inputs: np.ndarray       # (B, T) int64, left-padded
    labels: np.ndarray       # (B, T) int64, IGNORE_LABEL where not masked
    pad_mask: np.ndarray     # (B, T) bool, True at pad positions
    rows: Tuple[int, ...]    # split rows the batch was drawn from
    mask_token: int

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


# ========================
# INGESTION
# ========================

def parse_ratings(stream: Iterable[str]) -> List[Interaction]:
    """
    Parse "UserID::MovieID::Rating::Timestamp" lines.

    Blank lines are skipped. LF and CRLF endings are both accepted.

    Raises:
        ParseError: with the 1-based line number of the first bad line
    """
    interactions: List[Interaction] = []
    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if line_no == 1:
            line = line.lstrip("\ufeff")
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", line_no)
        try:
            user_id, item_id, rating, timestamp = (int(p.strip()) for p in parts)
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line_no) from None
        if user_id < 1 or item_id < 1:
            raise ParseError("user and item ids must be >= 1", line_no)
        if not 1 <= rating <= 5:
            raise ParseError(f"rating {rating} outside 1..5", line_no)
        if timestamp < 0:
            raise ParseError("negative timestamp", line_no)
        interactions.append(Interaction(user_id, item_id, rating, timestamp))
    return interactions


def read_ratings(path: Path) -> List[Interaction]:
    with open(path, "r", encoding="utf-8", newline=None) as f:
        return parse_ratings(f)


def subsample_users(interactions: Sequence[Interaction], max_users: Optional[int], seed: int) -> List[Interaction]:
    """Keep a seed-fixed subset of at most max_users users, file order preserved."""
    users = sorted({x.user_id for x in interactions})
    if max_users is None or len(users) <= max_users:
        return list(interactions)
    rng = np.random.default_rng(seed)
    keep = set(int(u) for u in rng.choice(users, size=max_users, replace=False))
    return [x for x in interactions if x.user_id in keep]


def generate_synthetic(
    num_users: int,
    num_items: int,
    min_len: int,
    max_len: int,
    num_patterns: int,
    noise: float,
    seed: int,
    pattern_len: int = 8,
) -> List[Interaction]:
    """
    Interactions with planted sequential patterns.

    Each pattern is a fixed cycle of items. A user follows one or two
    patterns in order, with `noise` probability of a uniformly random item
    at each step. Original item ids are spread out (3*k + 1) so the dense
    remapping is exercised.
    """
    rng = np.random.default_rng(seed)
    patterns = [rng.choice(num_items, size=min(pattern_len, num_items), replace=False) + 1 for _ in range(num_patterns)]
    interactions: List[Interaction] = []
    for user in range(1, num_users + 1):
        length = int(rng.integers(min_len, max_len + 1))
        followed = rng.choice(num_patterns, size=min(2, num_patterns), replace=False)
        primary = patterns[int(followed[0])]
        secondary = patterns[int(followed[-1])]
        pos = int(rng.integers(len(primary)))
        t = int(rng.integers(0, 10_000))
        for step in range(length):
            if rng.random() < noise:
                item = int(rng.integers(1, num_items + 1))
            else:
                cycle = secondary if (step // 6) % 2 else primary
                item = int(cycle[pos % len(cycle)])
                pos += 1
            t += int(rng.integers(1, 600))
            interactions.append(Interaction(user, 3 * item + 1, int(rng.integers(1, 6)), t))
    return interactions


# ========================
# DATASET CONSTRUCTION
# ========================

def build_dataset(interactions: Sequence[Interaction], min_seq_len: int = DEFAULT_MIN_SEQ_LEN) -> SequenceDataset:
    """
    Group interactions per user, order by (timestamp, file order), drop short
    users and remap item ids densely (ascending original id).

    Raises:
        ConfigError: min_seq_len < 3
        EmptyDatasetError: no user survives the length filter
    """
    if min_seq_len < 3:
        raise ConfigError(f"min_seq_len must be >= 3, got {min_seq_len}")

    per_user: "OrderedDict[int, List[Tuple[int, int, int]]]" = OrderedDict()
    for order, x in enumerate(interactions):
        per_user.setdefault(x.user_id, []).append((x.timestamp, order, x.item_id))

    kept: Dict[int, List[int]] = {}
    for user_id, events in per_user.items():
        if len(events) < min_seq_len:
            continue
        events.sort()  # (timestamp, file order) is a strict total order
        kept[user_id] = [item for _, _, item in events]

    if not kept:
        raise EmptyDatasetError(f"no user has >= {min_seq_len} interactions")

    item_map = tuple(sorted({item for seq in kept.values() for item in seq}))
    dense = {orig: i + 1 for i, orig in enumerate(item_map)}

    user_ids = sorted(kept)
    sequences = [[dense[i] for i in kept[u]] for u in user_ids]
    return _dataset_from_parts(user_ids, sequences, item_map)


def _dataset_from_parts(user_ids, sequences, item_map) -> SequenceDataset:
    # popularity counts training positions only (everything before the valid target)
    popularity = np.zeros(len(item_map) + 1, dtype=np.int64)
    for seq in sequences:
        np.add.at(popularity, np.asarray(seq[:-2], dtype=np.int64), 1)
    popularity.setflags(write=False)
    return SequenceDataset(tuple(user_ids), tuple(tuple(s) for s in sequences), tuple(item_map), popularity)


def split_leave_one_out(dataset: SequenceDataset) -> LeaveOneOutSplit:
    """Last item -> test target, second-to-last -> valid target, rest -> training prefix."""
    prefixes, valid, test = [], [], []
    for user_id, seq in zip(dataset.user_ids, dataset.sequences):
        if len(seq) < 3:
            raise DataError(f"user {user_id} has a sequence of length {len(seq)} < 3")
        prefixes.append(tuple(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    return LeaveOneOutSplit(
        user_ids=dataset.user_ids,
        train_prefixes=tuple(prefixes),
        valid_targets=tuple(valid),
        test_targets=tuple(test),
        num_items=dataset.num_items,
    )


# ========================
# WINDOWS AND BATCHES
# ========================

def pad_window(seq: Sequence[int], T: int) -> List[int]:
    """Most recent <= T items, left-padded with PAD_ID."""
    tail = list(seq[-T:]) if T > 0 else []
    return [PAD_ID] * (T - len(tail)) + tail


def make_masked_batch(
    train_prefixes: Sequence[Sequence[int]],
    T: int,
    mask_prob: float,
    rng: np.random.Generator,
    mask_token: int,
    rows: Optional[Sequence[int]] = None,
) -> MaskedBatch:
    """
    Cloze batch: each real position is masked independently with
    probability mask_prob, and at least one position per sequence is masked.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ConfigError(f"mask_prob must be in (0, 1), got {mask_prob}")

    B = len(train_prefixes)
    inputs = np.zeros((B, T), dtype=np.int64)
    labels = np.full((B, T), IGNORE_LABEL, dtype=np.int64)
    for b, prefix in enumerate(train_prefixes):
        window = np.asarray(pad_window(prefix, T), dtype=np.int64)
        real = np.flatnonzero(window != PAD_ID)
        chosen = rng.random(real.size) < mask_prob
        if real.size and not chosen.any():
            chosen[int(rng.integers(real.size))] = True
        masked = real[chosen]
        labels[b, masked] = window[masked]
        window[masked] = mask_token
        inputs[b] = window

    return MaskedBatch(
        inputs=inputs,
        labels=labels,
        pad_mask=inputs == PAD_ID,
        rows=tuple(rows) if rows is not None else tuple(range(B)),
        mask_token=mask_token,
    )


def next_item_windows(
    train_prefixes: Sequence[Sequence[int]], T: int, mask_token: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Windows used for Fisher estimation: the prefix without its last item,
    followed by a mask token queried at position T-1. The target is the
    last prefix item, so no validation or test item is touched.

    Returns:
        (windows (N, T), positions (N,), targets (N,))
    """
    windows = np.asarray([pad_window(list(p[:-1]) + [mask_token], T) for p in train_prefixes], dtype=np.int64)
    positions = np.full(len(train_prefixes), T - 1, dtype=np.int64)
    targets = np.asarray([p[-1] for p in train_prefixes], dtype=np.int64)
    return windows.reshape(len(train_prefixes), T), positions, targets


def eval_windows(split: LeaveOneOutSplit, T: int, which: str = "test") -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluation windows: full visible history with a mask token appended.

    Returns:
        (windows (U, T), targets (U,))
    """
    if which == "test":
        histories = [p + (v,) for p, v in zip(split.train_prefixes, split.valid_targets)]
        targets = split.test_targets
    elif which == "valid":
        histories = list(split.train_prefixes)
        targets = split.valid_targets
    else:
        raise ConfigError(f"unknown evaluation split '{which}'")
    windows = np.asarray([pad_window(list(h) + [split.mask_token], T) for h in histories], dtype=np.int64)
    return windows.reshape(len(histories), T), np.asarray(targets, dtype=np.int64)


# ========================
# PERSISTENCE
# ========================

def save_dataset(dataset: SequenceDataset, path: Path) -> Path:
    """MRGD: magic, u32 version, u32 |U|, u32 |V|, |V| x u32 original ids, then per user (u32 id, u32 len, items)."""
    path = Path(path)
    with open(path, "wb") as f:
        write_header(f, DATASET_MAGIC, DATASET_VERSION)
        write_u32(f, dataset.num_users)
        write_u32(f, dataset.num_items)
        f.write(np.asarray(dataset.item_map, dtype="<u4").tobytes())
        for user_id, seq in zip(dataset.user_ids, dataset.sequences):
            write_u32(f, user_id)
            write_u32(f, len(seq))
            f.write(np.asarray(seq, dtype="<u4").tobytes())
    return path


def load_dataset(path: Path) -> SequenceDataset:
    with open(path, "rb") as f:
        read_header(f, DATASET_MAGIC, DATASET_VERSION)
        num_users = read_u32(f, "user count")
        num_items = read_u32(f, "item count")
        item_map = [read_u32(f, "item map") for _ in range(num_items)]
        user_ids, sequences = [], []
        for _ in range(num_users):
            user_ids.append(read_u32(f, "user id"))
            length = read_u32(f, "sequence length")
            seq = [read_u32(f, "item id") for _ in range(length)]
            if any(not 1 <= i <= num_items for i in seq):
                raise DataError(f"user {user_ids[-1]} has an item id outside 1..{num_items}")
            sequences.append(seq)
    if not user_ids:
        raise EmptyDatasetError(f"{path} holds no users")
    return _dataset_from_parts(user_ids, sequences, item_map)
