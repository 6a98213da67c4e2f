"""
Orchestrates the merge experiment: ingest, train each framework, estimate
Fisher, merge, post-merge epoch, evaluate and the side analyses (sampling
sweep, recipe ablation, error inconsistency, top-k mass, weight plane).
"""
import json
import math
import re
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from artifacts import derive_seed, file_sha256, write_sidecar
from config import ExperimentConfig
from data import (
    LeaveOneOutSplit, SequenceDataset, build_dataset, generate_synthetic, load_dataset, read_ratings,
    save_dataset, split_leave_one_out, subsample_users,
)
from errors import ArtifactError, MergeRecError, UsageError
from evaluation import (
    REFERENCE_INCONSISTENCY, REFERENCE_MERGE_ROW, CandidatePool, EvalReport, InconsistencyReport, evaluate,
    plane_projection, render_plane_png, write_plane_csv,
)
from fisher import (
    REFERENCE_TOPK_MASS, FisherDiag, SamplingSpec, cumulative_topk_mass, estimate_fisher,
    expected_backward_passes, round_fisher_to_storage, save_fisher,
)
from frameworks import ROW_LABELS, FrameworkSpec
from logging_utils import render_table
from merge import fisher_merge, merge_uniform, posterior_sample
from model import ModelConfig, ParamVector, configure_threads, round_to_storage, save_checkpoint
from training import Trainer


REFERENCE_NOTE = "published (not reproduced at this scale)"
BASELINE = FrameworkSpec("baseline", lambda_cl=0.0)


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label).strip("_")


def row_label(framework: FrameworkSpec) -> str:
    if framework.name:
        return framework.name
    name, pos = ROW_LABELS[framework.kind]
    return f"{name} ({pos})" if pos and pos != "-" else name


# ========================
# MANIFEST AND ARTIFACTS
# ========================

@dataclass
class RunManifest:
    config_digest: str
    seed: int
    threads: int
    config: Dict[str, Any] = field(default_factory=dict)
    stages: List[Dict[str, Any]] = field(default_factory=list)
    reports: Dict[str, Any] = field(default_factory=dict)
    status: str = "running"
    started: str = field(default_factory=lambda: datetime.now().isoformat())
    finished: Optional[str] = None

    def outputs(self) -> Dict[str, str]:
        """Every output artifact (stage/name) mapped to its sha256."""
        return {f"{s['stage']}/{name}": sha for s in self.stages for name, sha in s.get("outputs", {}).items()}

    def backward_passes(self) -> Dict[str, Tuple[int, int]]:
        return {
            s["stage"]: (s["backward_passes"], s["expected_backward_passes"])
            for s in self.stages if s.get("backward_passes") is not None
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "seed": self.seed,
            "threads": self.threads,
            "config": self.config,
            "stages": self.stages,
            "reports": self.reports,
            "status": self.status,
            "started": self.started,
            "finished": self.finished,
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, default=str)
        return path

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return cls(**payload)


def compare_manifests(old: RunManifest, new: RunManifest) -> List[str]:
    """Artifacts whose hash differs (or is missing) between two runs."""
    a, b = old.outputs(), new.outputs()
    return sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))


TREND_QUORUM = 2 / 3
EXACT_CHECKS = ("backward_passes_match",)


@dataclass
class TrendCheck:
    """One acceptance check tallied over independent seeds."""
    name: str
    passed: int
    total: int
    quorum: float

    @property
    def required(self) -> int:
        return math.ceil(self.quorum * self.total - 1e-9)

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed >= self.required

    def to_row(self) -> Dict[str, Any]:
        return {
            "check": self.name,
            "passed": f"{self.passed}/{self.total}",
            "required": str(self.required),
            "status": "ok" if self.ok else "FAIL",
        }


def aggregate_trends(manifests: Sequence[RunManifest], quorum: float = TREND_QUORUM) -> List[TrendCheck]:
    """
    Tally per-seed acceptance checks. Trend checks pass when at least
    `quorum` of the seeds that report them agree; EXACT_CHECKS must hold on
    every seed.
    """
    if not manifests:
        raise UsageError("trend checks need at least one manifest")
    if not 0.0 < quorum <= 1.0:
        raise UsageError(f"quorum must be in (0, 1], got {quorum}")
    seeds = [m.seed for m in manifests]
    if len(set(seeds)) != len(seeds):
        raise UsageError(f"trend checks need distinct seeds, got {seeds}")

    tallies: Dict[str, List[bool]] = {}
    for m in manifests:
        acceptance = m.reports.get("acceptance")
        if acceptance is None:
            raise ArtifactError(f"manifest for seed {m.seed} has no acceptance report (status {m.status})")
        for name, value in acceptance.items():
            if isinstance(value, (bool, np.bool_)):
                tallies.setdefault(name, []).append(bool(value))

    return [
        TrendCheck(name, sum(values), len(values), 1.0 if name in EXACT_CHECKS else quorum)
        for name, values in tallies.items()
    ]


class ArtifactStore:
    """Writes artifacts under one run directory, each with a provenance sidecar."""

    def __init__(self, root: Path, config_digest: str):
        self.root = Path(root)
        self.config_digest = config_digest

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _sidecar(self, path: Path, kind: str, label: str, arch_hash: Optional[int], meta: Dict[str, Any]) -> str:
        payload = {"config_digest": self.config_digest, "kind": kind, "label": label, **meta}
        if arch_hash is not None:
            payload["arch_hash"] = f"{arch_hash:016x}"
        write_sidecar(path, payload)
        return file_sha256(path)

    def checkpoint(self, params: ParamVector, label: str, **meta) -> Tuple[Path, str]:
        path = save_checkpoint(params, self.path("checkpoints", f"{slug(label)}.ckpt"))
        meta = {"num_items": params.config.num_items, **meta}
        return path, self._sidecar(path, "checkpoint", label, params.arch_hash, meta)

    def fisher(self, fisher: FisherDiag, label: str, **meta) -> Tuple[Path, str]:
        path = save_fisher(fisher, self.path("fisher", f"{slug(label)}.fisher"))
        return path, self._sidecar(path, "fisher", label, fisher.arch_hash, {**fisher.meta.to_dict(), **meta})

    def dataset(self, dataset: SequenceDataset) -> Tuple[Path, str]:
        path = save_dataset(dataset, self.path("dataset.mrgd"))
        return path, self._sidecar(path, "dataset", "dataset", None, {"num_users": dataset.num_users, "num_items": dataset.num_items})

    def json(self, payload: Any, *parts: str) -> Tuple[Path, str]:
        path = self.path(*parts)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=str)
        return path, file_sha256(path)


# ========================
# DATA
# ========================

def load_interactions_dataset(exp: ExperimentConfig, logger=None) -> SequenceDataset:
    """Ratings file, dataset file or synthetic generator, then user subsampling."""
    d = exp.data
    if d.dataset_path is not None:
        dataset = load_dataset(d.dataset_path)
        if logger:
            logger.info(f"📂 Loaded dataset {d.dataset_path}: {dataset.num_users} users, {dataset.num_items} items")
        return dataset
    if d.ratings_path is not None:
        interactions = read_ratings(d.ratings_path)
        source = str(d.ratings_path)
    else:
        interactions = generate_synthetic(**d.synthetic, seed=derive_seed(d.seed, "synthetic"))
        source = "synthetic"
    interactions = subsample_users(interactions, d.max_users, derive_seed(d.seed, "subsample"))
    dataset = build_dataset(interactions, d.min_seq_len)
    if logger:
        logger.info(f"📂 Ingested {source}: {len(interactions)} interactions, "
                    f"{dataset.num_users} users, {dataset.num_items} items")
    return dataset


# ========================
# WORKFLOW
# ========================

class ExperimentWorkflow:
    """Manages the end-to-end merge experiment for one master seed."""

    def __init__(self, exp: ExperimentConfig, logger, raw_config: Optional[Dict[str, Any]] = None,
                 progress: bool = False):
        self.exp = exp
        self.logger = logger
        self.progress = progress
        self.out_dir = Path(exp.out_dir)
        self.store = ArtifactStore(self.out_dir, exp.digest())
        self.manifest = RunManifest(exp.digest(), exp.seed, exp.threads, config=raw_config or exp.to_dict())
        self.tables: Dict[str, Dict[str, Any]] = {}

        self.dataset: Optional[SequenceDataset] = None
        self.split: Optional[LeaveOneOutSplit] = None
        self.model_config: Optional[ModelConfig] = None
        self.trainer: Optional[Trainer] = None
        self.baseline: Optional[ParamVector] = None
        self.members: Dict[str, ParamVector] = {}
        self.fishers: Dict[str, FisherDiag] = {}
        self.merges: Dict[str, ParamVector] = {}
        self.raw_merges: Dict[str, ParamVector] = {}
        self.reports: Dict[str, Dict[str, EvalReport]] = {}
        self.pools = [
            CandidatePool(regime, exp.eval.random_k if regime == "random" else exp.eval.popular_k,
                          derive_seed(exp.seed, "pool", regime))
            for regime in exp.eval.pools
        ]

    # ---- plumbing ----

    def seed(self, *labels: Any) -> int:
        return derive_seed(self.exp.seed, *labels)

    @contextmanager
    def stage(self, name: str) -> Iterator[Dict[str, Any]]:
        record: Dict[str, Any] = {"stage": name, "inputs": {}, "outputs": {}, "seed": None,
                                  "backward_passes": None, "expected_backward_passes": None}
        t0 = time.perf_counter()
        try:
            yield record
        except (Exception, KeyboardInterrupt) as e:
            if isinstance(e, MergeRecError):
                e.stage = e.stage or name
                message = e.message
            elif isinstance(e, KeyboardInterrupt):
                message = "interrupted"
            else:
                message = f"{type(e).__name__}: {e}"
            record.update(status="failed", error=message, seconds=round(time.perf_counter() - t0, 3))
            self.manifest.stages.append(record)
            self.manifest.status = "failed"
            self.manifest.finished = datetime.now().isoformat()
            self.manifest.save(self.out_dir / "manifest.json")
            self.logger.log_stage(name, record["inputs"], record["outputs"], record["seed"], status="failed",
                                  warnings=[message])
            raise
        record.update(status="ok", seconds=round(time.perf_counter() - t0, 3))
        self.manifest.stages.append(record)
        self.logger.log_stage(name, record["inputs"], record["outputs"], record["seed"],
                              backward_passes=record["backward_passes"])

    def table(self, title: str, rows: List[Dict[str, Any]], columns: Sequence[str]) -> None:
        self.tables[title] = {"columns": list(columns), "rows": rows}
        self.logger.log_summary(title, rows, columns)

    # ---- stages ----

    def prepare_data(self) -> None:
        with self.stage("ingest") as rec:
            self.dataset = load_interactions_dataset(self.exp, self.logger)
            self.split = split_leave_one_out(self.dataset)
            self.model_config = self.exp.model.to_model_config(self.dataset.num_items)
            path, sha = self.store.dataset(self.dataset)
            rec["seed"] = self.exp.data.seed
            rec["outputs"]["dataset"] = sha
        self.trainer = Trainer(self.split, self.model_config, self.exp.batch_size, self.exp.mask_prob,
                               logger=self.logger, progress=self.progress)

    def train(self, framework: FrameworkSpec, label: str, epochs: int, seed: int,
              init: Optional[ParamVector] = None) -> ParamVector:
        with self.stage(f"train:{label}") as rec:
            result = self.trainer.train(framework, epochs, seed, init=init, label=label)
            params = round_to_storage(result.params)
            _, sha = self.store.checkpoint(params, label, framework=framework.to_dict(), epochs=epochs, seed=seed)
            rec["seed"] = seed
            rec["outputs"]["checkpoint"] = sha
            if result.history:
                rec["final_ce"], rec["final_cl"] = result.history[-1][1], result.history[-1][2]
        return params

    def train_baseline(self) -> None:
        self.baseline = self.train(BASELINE, "baseline", self.exp.epochs.baseline, self.seed("train", "baseline"))

    def train_member(self, framework: FrameworkSpec, label: str, seed: int) -> ParamVector:
        if self.exp.pipeline == "finetune_setting":
            return self.train(framework, label, self.exp.epochs.finetune, seed, init=self.baseline)
        return self.train(framework, label, self.exp.epochs.baseline, seed)

    def train_members(self) -> None:
        self.train_baseline()
        for fw in self.exp.frameworks:
            self.members[fw.label] = self.train_member(fw, fw.label, self.seed("train", fw.label))

    def estimate(self, label: str, params: ParamVector, spec: SamplingSpec, tag: str = "") -> FisherDiag:
        name = f"{label}@{tag}" if tag else label
        seed = self.seed("fisher", name)
        with self.stage(f"fisher:{name}") as rec:
            fisher = estimate_fisher(params, self.split, spec, self.exp.fisher.batch_size, seed,
                                     ordering=self.exp.fisher.ordering, logger=self.logger, progress=self.progress)
            fisher = round_fisher_to_storage(fisher)
            _, sha = self.store.fisher(fisher, name)
            rec["seed"] = seed
            rec["outputs"]["fisher"] = sha
            rec["backward_passes"] = fisher.meta.backward_passes
            rec["expected_backward_passes"] = expected_backward_passes(
                self.split.num_users, self.exp.fisher.batch_size, spec)
        return fisher

    def merge(self, labels: Sequence[str], fishers: Sequence[FisherDiag], tag: str) -> Dict[str, ParamVector]:
        """Fisher and uniform merges of `labels`, each followed by the post-merge epoch(s)."""
        lambdas = self._lambdas(labels)
        params_list = [self.members[l] for l in labels]
        rounded: Dict[str, ParamVector] = {}
        with self.stage(f"merge:{tag}") as rec:
            raw = {
                "fisher": fisher_merge(params_list, fishers, lambdas, self.exp.merge.epsilon),
                "uniform": merge_uniform(params_list),
            }
            for mode, params in raw.items():
                params = round_to_storage(params)
                rounded[mode] = params
                self.raw_merges[f"{mode}@{tag}"] = params
                _, sha = self.store.checkpoint(params, f"merged_{mode}_{tag}", members=list(labels),
                                               lambdas=lambdas, mode=mode, epsilon=self.exp.merge.epsilon)
                rec["outputs"][f"{mode}_raw"] = sha
        return {
            mode: self.train(BASELINE, f"post_merge_{mode}_{tag}", self.exp.epochs.post_merge,
                             self.seed("post_merge", mode, tag), init=params)
            for mode, params in rounded.items()
        }

    def _lambdas(self, labels: Sequence[str]) -> List[float]:
        if self.exp.merge.lambdas is None:
            return [1.0] * len(labels)
        by_label = {fw.label: lam for fw, lam in zip(self.exp.frameworks, self.exp.merge.lambdas)}
        return [by_label[l] for l in labels]

    def evaluate(self, label: str, params: ParamVector) -> Dict[str, EvalReport]:
        reports = {}
        with self.stage(f"eval:{label}") as rec:
            for pool in self.pools:
                report = evaluate(params, self.split, pool, self.exp.eval.ks, which=self.exp.eval.split, label=label)
                reports[pool.regime] = report
            rec["seed"] = next((p.seed for p in self.pools if p.regime == "random"), None)
            _, sha = self.store.json({r: rep.to_dict() for r, rep in reports.items()}, "reports", f"eval_{slug(label)}.json")
            rec["outputs"]["report"] = sha
        self.reports[label] = reports
        return reports

    def _row(self, label: str, reports: Dict[str, EvalReport], k: int = 10) -> Dict[str, Any]:
        return {"model": label, **{r: rep.means[k] for r, rep in reports.items()}}

    # ---- main table ----

    def run_main(self) -> None:
        labels = [fw.label for fw in self.exp.frameworks]
        spec = self.exp.fisher.sampling
        for label in labels:
            self.fishers[label] = self.estimate(label, self.members[label], spec)
        self.merges = self.merge(labels, [self.fishers[l] for l in labels], "main")

        rows = [self._row("baseline", self.evaluate("baseline", self.baseline))]
        for fw in self.exp.frameworks:
            rows.append(self._row(row_label(fw), self.evaluate(fw.label, self.members[fw.label])))
        rows.append(self._row("uniform", self.evaluate("uniform", self.merges["uniform"])))
        rows.append(self._row("fisher", self.evaluate("fisher", self.merges["fisher"])))
        rows.append({"model": f"fisher, {REFERENCE_NOTE}", **{r: REFERENCE_MERGE_ROW[r] for r in self.exp.eval.pools}})
        self.table("NDCG@10 by candidate pool", rows, ["model", *self.exp.eval.pools])

        if 20 in self.exp.eval.ks:
            rows20 = [self._row(label, reps, k=20) for label, reps in self.reports.items()]
            self.table("NDCG@20 by candidate pool", rows20, ["model", *self.exp.eval.pools])

    # ---- side analyses ----

    def run_sweep(self) -> None:
        labels = [fw.label for fw in self.exp.frameworks]
        rows = []
        for spec in self.exp.sweep:
            tag = f"{spec.method}_n{spec.n}"
            fishers = [self.estimate(l, self.members[l], spec, tag=tag) for l in labels]
            merged = self.merge(labels, fishers, tag)["fisher"]
            reports = self.evaluate(f"fisher[{tag}]", merged)
            full = reports.get("full") or next(iter(reports.values()))
            rows.append({
                "method": spec.method, "n": spec.n,
                "ndcg@10": full.means[10], "ndcg@20": full.means.get(20),
                "backward": sum(f.meta.backward_passes for f in fishers),
            })
        if rows:
            self.table("Fisher sampling sweep (first pool)", rows, ["method", "n", "ndcg@10", "ndcg@20", "backward"])

    def run_ablation(self) -> None:
        labels = [fw.label for fw in self.exp.frameworks]
        if len(labels) < 2:
            self.logger.warning("Ablation needs at least two recipe members; skipped")
            return
        first = self.exp.eval.pools[0]
        weakest = min(labels, key=lambda l: (self.reports[l][first].means[10], l))
        kept = [l for l in labels if l != weakest]
        merged = self.merge(kept, [self.fishers[l] for l in kept], "ablation")["fisher"]
        reports = self.evaluate(f"fisher (w.o. {weakest})", merged)
        rows = [
            self._row("fisher (with)", self.reports["fisher"]),
            self._row(f"fisher (w.o. {weakest})", reports),
        ]
        self.table("Recipe ablation", rows, ["model", *self.exp.eval.pools])

    def run_inconsistency(self) -> InconsistencyReport:
        report = InconsistencyReport()
        pool = self.exp.eval.pools[0]
        labels = [fw.label for fw in self.exp.frameworks]
        for fw in self.exp.frameworks:
            for i in range(1, self.exp.inconsistency_seeds + 1):
                label = f"{fw.label}#seed{i}"
                params = self.train_member(fw, label, self.seed("inconsistency", fw.label, i))
                reports = self.evaluate(label, params)
                report.add(self.reports[fw.label][pool], reports[pool], "similar")
        for i, a in enumerate(labels):
            for b in labels[i + 1:]:
                report.add(self.reports[a][pool], self.reports[b][pool], "dissimilar")
        self.store.json(report.to_dict(), "reports", "inconsistency.json")

        rows = [{"pair": f"{r['a']} | {r['b']}", "relation": r["relation"], "inconsistency": r["inconsistency"]}
                for r in report.rows]
        rows.append({"pair": "mean", "relation": "similar", "inconsistency": report.mean("similar")})
        rows.append({"pair": "mean", "relation": "dissimilar", "inconsistency": report.mean("dissimilar")})
        for name, (sim, dis) in REFERENCE_INCONSISTENCY.items():
            rows.append({"pair": f"{name}, {REFERENCE_NOTE}", "relation": "similar", "inconsistency": sim})
            rows.append({"pair": f"{name}, {REFERENCE_NOTE}", "relation": "dissimilar", "inconsistency": dis})
        self.table(f"Error inconsistency ({pool} pool, correct = NDCG@10 > 0.5)", rows, ["pair", "relation", "inconsistency"])
        return report

    def run_topk_mass(self) -> None:
        sizes = sorted(set(self.exp.topk_sizes) | {self.model_config.num_items})
        rows = []
        for label, params in [("baseline", self.baseline), *self.members.items()]:
            masses = cumulative_topk_mass(params, self.split, sizes)
            rows.append({"model": label, **{f"k={k}": m for k, m in zip(sizes, masses)}})
        rows.append({"model": f"{REFERENCE_NOTE}, non-gating", **{f"k={k}": v for k, v in REFERENCE_TOPK_MASS.items()}})
        self.store.json(rows, "reports", "topk_mass.json")
        self.table("Cumulative top-k probability mass", rows, ["model", *[f"k={k}" for k in sizes]])

    def run_plane(self) -> Optional[Path]:
        labels = [fw.label for fw in self.exp.frameworks]
        if len(labels) < 3:
            self.logger.warning("Weight plane needs three recipe members; skipped")
            return None
        with self.stage("viz-plane") as rec:
            points = []
            for label in labels:
                rng = np.random.default_rng(self.seed("plane", label))
                fisher = self.fishers[label]
                # posterior precision is the summed (not averaged) Fisher; plane_epsilon acts as a prior
                precision = fisher.values * fisher.meta.num_sequences
                samples = posterior_sample(self.members[label], precision, self.exp.plane_samples,
                                           self.exp.plane_epsilon, rng)
                points.extend((f"{label}:sample", s) for s in samples)
            points.append(("uniform", self.raw_merges["uniform@main"]))
            points.append(("fisher", self.raw_merges["fisher@main"]))
            rows = plane_projection(*(self.members[l] for l in labels[:3]), points)
            rows = [(labels[int(lab[1]) - 1] if lab in ("c1", "c2", "c3") else lab, x, y) for lab, x, y in rows]
            csv_path = write_plane_csv(rows, self.store.path("plane.csv"))
            rec["outputs"]["plane.csv"] = file_sha256(csv_path)
            render_plane_png(rows, self.store.path("plane.png"), self.logger)
        return csv_path

    def acceptance(self) -> Dict[str, Any]:
        first = self.exp.eval.pools[0]
        fisher = self.reports["fisher"][first].means[10]
        uniform = self.reports["uniform"][first].means[10]
        members = [self.reports[fw.label][first].means[10] for fw in self.exp.frameworks]
        summary: Dict[str, Any] = {
            "pool": first,
            "fisher_ge_min_member": bool(fisher >= min(members)),
            "fisher_ge_uniform": bool(fisher >= uniform),
        }
        if "inconsistency" in self.manifest.reports:
            inc = self.manifest.reports["inconsistency"]
            if inc["mean_similar"] is not None and inc["mean_dissimilar"] is not None:
                summary["dissimilar_gt_similar"] = bool(inc["mean_dissimilar"] > inc["mean_similar"])
        budget = self.manifest.backward_passes()
        summary["backward_passes_match"] = all(got == want for got, want in budget.values())
        self.table("Trend checks", [{"check": k, "value": str(v)} for k, v in summary.items()], ["check", "value"])
        return summary

    # ---- entry ----

    def run(self) -> RunManifest:
        configure_threads(self.exp.threads)
        self.logger.info(f"\n🚀 Starting {self.exp.pipeline} with {len(self.exp.frameworks)} framework(s), seed {self.exp.seed}")
        self.prepare_data()
        self.train_members()
        self.run_main()
        if self.exp.sweep:
            self.run_sweep()
        if self.exp.ablation:
            self.run_ablation()
        if self.exp.inconsistency_seeds > 0:
            self.manifest.reports["inconsistency"] = self.run_inconsistency().to_dict()
        self.run_topk_mass()
        if self.exp.plane_samples > 0:
            self.run_plane()

        self.manifest.reports["acceptance"] = self.acceptance()
        self.manifest.reports["tables"] = self.tables
        (self.store.path("reports", "tables.txt")).write_text(
            "\n\n".join(f"{title}\n{render_table(t['rows'], t['columns'])}" for title, t in self.tables.items()),
            encoding="utf-8",
        )
        self.manifest.status = "ok"
        self.manifest.finished = datetime.now().isoformat()
        self.manifest.save(self.out_dir / "manifest.json")
        self.logger.info(f"✅ Run complete: {self.out_dir / 'manifest.json'}")
        return self.manifest


def run_pipeline(exp: ExperimentConfig, logger, raw_config: Optional[Dict[str, Any]] = None,
                 progress: bool = False) -> RunManifest:
    return ExperimentWorkflow(exp, logger, raw_config, progress).run()
