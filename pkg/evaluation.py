"""
Leave-one-out ranking evaluation, error inconsistency and weight-plane projection.

Pools:
    full     every item 1..|V|
    random   the target plus k items the user never interacted with (seed-fixed per user)
    popular  the k most popular training items, identical for all users; the
             target is not added, so users whose target is unpopular score 0
"""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from data import LeaveOneOutSplit, eval_windows
from errors import ConfigError, DegeneratePlaneError, InconsistencyError, InputError
from model import ParamVector, score_items


REGIMES = ("full", "random", "popular")
DEFAULT_KS = (10, 20)
CORRECT_THRESHOLD = 0.5  # NDCG@10 > 0.5  <=>  rank <= 2

# Reference rows printed next to desk-scale results (NDCG@10: full / random / popular)
REFERENCE_MERGE_ROW = {"full": 0.1386, "random": 0.5618, "popular": 0.0428}
REFERENCE_INCONSISTENCY = {"cl4srec": (0.0805, 0.1141), "duorec": (0.0867, 0.1118)}  # (similar, dissimilar)

PLANE_TOLERANCE = 1e-10


# ========================
# CANDIDATE POOLS
# ========================

def training_popularity(split: LeaveOneOutSplit) -> np.ndarray:
    """Interaction counts over the training prefixes, indexed by item id (index 0 unused)."""
    counts = np.zeros(split.num_items + 1, dtype=np.int64)
    for prefix in split.train_prefixes:
        np.add.at(counts, np.asarray(prefix, dtype=np.int64), 1)
    return counts


@dataclass(frozen=True)
class CandidatePool:
    regime: str = "full"
    k: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown pool regime '{self.regime}' (expected one of {', '.join(REGIMES)})")
        if self.regime != "full" and self.k < 1:
            raise ConfigError(f"{self.regime} pool size must be >= 1")

    def metadata(self) -> Dict[str, Any]:
        meta: Dict[str, Any] = {"regime": self.regime}
        if self.regime == "random":
            meta.update(k=self.k, seed=self.seed, target_included=True)
        elif self.regime == "popular":
            meta.update(k=self.k, target_included=False)
        return meta

    def resolve(self, split: LeaveOneOutSplit, targets: Sequence[int]) -> List[np.ndarray]:
        """Candidate item ids per user row."""
        V = split.num_items
        if self.regime == "full":
            everything = np.arange(1, V + 1, dtype=np.int64)
            return [everything] * split.num_users
        if self.regime == "popular":
            counts = training_popularity(split)[1:]
            top = np.argsort(-counts, kind="stable")[:min(self.k, V)] + 1
            return [top.astype(np.int64)] * split.num_users

        pools = []
        all_items = np.arange(1, V + 1, dtype=np.int64)
        for row, user_id in enumerate(split.user_ids):
            seen = np.fromiter(split.histories[row], dtype=np.int64)
            unseen = np.setdiff1d(all_items, seen, assume_unique=True)
            rng = np.random.default_rng([int(self.seed), int(user_id)])
            sampled = rng.choice(unseen, size=min(self.k, unseen.size), replace=False) if unseen.size else unseen
            pools.append(np.concatenate([[int(targets[row])], np.sort(sampled)]).astype(np.int64))
        return pools


# ========================
# METRICS
# ========================

def target_rank(scores: np.ndarray, candidates: np.ndarray, target: int) -> Optional[int]:
    """1-indexed rank of target among candidates (ties to the lower id), None if absent."""
    hits = np.flatnonzero(candidates == target)
    if hits.size == 0:
        return None
    s = scores[hits[0]]
    ahead = np.sum(scores > s) + np.sum((scores == s) & (candidates < target))
    return int(ahead) + 1


def ndcg_at_k(scores: Sequence[float], target: int, k: int, candidates: Optional[Sequence[int]] = None) -> float:
    """
    Single-relevant-item NDCG@k: 1/log2(rank + 1) within the cutoff, else 0.

    Without `candidates`, scores[i] is the score of item i + 1.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.arange(1, scores.size + 1) if candidates is None else np.asarray(candidates, dtype=np.int64)
    rank = target_rank(scores, candidates, int(target))
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class EvalReport:
    label: str
    pool: Dict[str, Any]
    ks: Tuple[int, ...]
    user_ids: Tuple[int, ...]
    per_user: Dict[int, np.ndarray] = field(repr=False)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def means(self) -> Dict[int, float]:
        return {k: float(v.mean()) if v.size else 0.0 for k, v in self.per_user.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "pool": self.pool,
            "ks": list(self.ks),
            "means": {f"ndcg@{k}": m for k, m in self.means.items()},
            "user_ids": list(self.user_ids),
            "per_user": {f"ndcg@{k}": [float(x) for x in v] for k, v in self.per_user.items()},
            "provenance": self.provenance,
        }

    def save_json(self, path: Path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load_json(cls, path: Path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "EvalReport":
        ks = tuple(payload["ks"])
        return cls(
            label=payload["label"],
            pool=payload["pool"],
            ks=ks,
            user_ids=tuple(payload["user_ids"]),
            per_user={k: np.asarray(payload["per_user"][f"ndcg@{k}"], dtype=np.float64) for k in ks},
            provenance=payload.get("provenance", {}),
        )


def evaluate_scores(
    score_matrix: np.ndarray,
    split: LeaveOneOutSplit,
    pool: CandidatePool,
    ks: Sequence[int] = DEFAULT_KS,
    targets: Optional[Sequence[int]] = None,
    label: str = "",
) -> EvalReport:
    """NDCG@k per user from a (U, |V|) score matrix whose column j-1 scores item j."""
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise ConfigError(f"k must be >= 1, got {list(ks)}")
    if score_matrix.shape != (split.num_users, split.num_items):
        raise InputError(f"score matrix shape {score_matrix.shape} != ({split.num_users}, {split.num_items})")
    targets = split.test_targets if targets is None else targets
    candidates = pool.resolve(split, targets)
    per_user = {k: np.zeros(split.num_users, dtype=np.float64) for k in ks}
    for row in range(split.num_users):
        cand = candidates[row]
        scores = score_matrix[row, cand - 1]
        rank = target_rank(scores, cand, int(targets[row]))
        for k in ks:
            per_user[k][row] = 1.0 / math.log2(rank + 1) if rank is not None and rank <= k else 0.0
    return EvalReport(label, pool.metadata(), ks, tuple(split.user_ids), per_user)


def evaluate(
    params: ParamVector,
    split: LeaveOneOutSplit,
    pool: CandidatePool,
    ks: Sequence[int] = DEFAULT_KS,
    which: str = "test",
    label: str = "",
) -> EvalReport:
    """Score every user's masked final position and compute NDCG@k on the pool."""
    windows, targets = eval_windows(split, params.config.max_len, which)
    scores = score_items(params, windows)
    report = evaluate_scores(scores, split, pool, ks, targets=targets, label=label)
    report.provenance = {"arch_hash": f"{params.arch_hash:016x}", "split": which}
    return report


# ========================
# ERROR INCONSISTENCY
# ========================

def error_inconsistency(a: EvalReport, b: EvalReport, threshold: float = CORRECT_THRESHOLD, k: int = 10) -> float:
    """Fraction of users on which exactly one of the two models has NDCG@k > threshold."""
    if a.user_ids != b.user_ids:
        raise InconsistencyError(f"user sets differ between '{a.label}' and '{b.label}'")
    if a.pool != b.pool:
        raise InconsistencyError(f"pools differ between '{a.label}' and '{b.label}'")
    if k not in a.per_user or k not in b.per_user:
        raise InconsistencyError(f"both reports need NDCG@{k}")
    if not a.user_ids:
        return 0.0
    correct_a = a.per_user[k] > threshold
    correct_b = b.per_user[k] > threshold
    return float(np.mean(correct_a ^ correct_b))


@dataclass
class InconsistencyReport:
    threshold: float = CORRECT_THRESHOLD
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, a: EvalReport, b: EvalReport, relation: str) -> float:
        if relation not in ("similar", "dissimilar"):
            raise ConfigError(f"relation must be similar or dissimilar, got '{relation}'")
        value = error_inconsistency(a, b, self.threshold)
        self.rows.append({"a": a.label, "b": b.label, "relation": relation, "inconsistency": value})
        return value

    def mean(self, relation: str) -> Optional[float]:
        values = [r["inconsistency"] for r in self.rows if r["relation"] == relation]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "note": "correct means NDCG@10 > 0.5, i.e. target rank <= 2",
            "pairs": self.rows,
            "mean_similar": self.mean("similar"),
            "mean_dissimilar": self.mean("dissimilar"),
        }


# ========================
# WEIGHT PLANE
# ========================

Vector = Union[ParamVector, np.ndarray]


def _vec(x: Vector) -> np.ndarray:
    return x.flat() if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64).ravel()


@dataclass(frozen=True)
class PlaneBasis:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    @classmethod
    def through(cls, t1: Vector, t2: Vector, t3: Vector) -> "PlaneBasis":
        o, a, b = _vec(t1), _vec(t2), _vec(t3)
        if not (o.shape == a.shape == b.shape):
            raise DegeneratePlaneError("plane points have different sizes")
        u = a - o
        nu = np.linalg.norm(u)
        scale = max(nu, np.linalg.norm(b - o), 1.0)
        if nu <= PLANE_TOLERANCE * scale:
            raise DegeneratePlaneError("first two plane points coincide")
        e1 = u / nu
        w = (b - o) - np.dot(b - o, e1) * e1
        nw = np.linalg.norm(w)
        if nw <= PLANE_TOLERANCE * scale:
            raise DegeneratePlaneError("plane points are collinear")
        return cls(o, e1, w / nw)

    def project(self, p: Vector) -> Tuple[float, float]:
        d = _vec(p) - self.origin
        return float(np.dot(d, self.e1)), float(np.dot(d, self.e2))

    def reconstruct(self, x: float, y: float) -> np.ndarray:
        return self.origin + x * self.e1 + y * self.e2


def plane_projection(
    t1: Vector, t2: Vector, t3: Vector, points: Sequence[Tuple[str, Vector]] = ()
) -> List[Tuple[str, float, float]]:
    """(label, x, y) for the three plane points (labelled c1..c3) and every extra point."""
    basis = PlaneBasis.through(t1, t2, t3)
    rows = [(label, *basis.project(p)) for label, p in (("c1", t1), ("c2", t2), ("c3", t3))]
    rows.extend((label, *basis.project(p)) for label, p in points)
    return rows


def write_plane_csv(rows: Sequence[Tuple[str, float, float]], path: Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "x", "y"])
        for label, x, y in rows:
            writer.writerow([label, repr(float(x)), repr(float(y))])
    return path


def read_plane_csv(path: Path) -> List[Tuple[str, float, float]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["label", "x", "y"]:
            raise InputError(f"{path}: expected header label,x,y")
        return [(r["label"], float(r["x"]), float(r["y"])) for r in reader]


def render_plane_png(rows: Sequence[Tuple[str, float, float]], path: Path, logger=None) -> Optional[Path]:
    """Scatter of the projected points, grouped by label prefix. Skipped when matplotlib is missing."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        if logger:
            logger.warning("matplotlib not installed; skipping plane PNG")
        return None

    groups: Dict[str, List[Tuple[float, float]]] = {}
    for label, x, y in rows:
        groups.setdefault(label.split(":")[0], []).append((x, y))

    fig, ax = plt.subplots(figsize=(6, 5))
    for name, pts in groups.items():
        xs, ys = zip(*pts)
        big = len(pts) == 1
        ax.scatter(xs, ys, s=60 if big else 8, alpha=1.0 if big else 0.4, label=name, marker="*" if big else "o")
    ax.set_xlabel("e1")
    ax.set_ylabel("e2")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
