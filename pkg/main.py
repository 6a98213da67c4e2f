#!/usr/bin/env python3
"""
merge-rec - CLI entrypoint
Fisher-weighted merging of contrastively trained sequential recommenders.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from artifacts import check_compatible, derive_seed, file_sha256, read_sidecar, write_sidecar
from config import Config, ExperimentConfig
from data import LeaveOneOutSplit, SequenceDataset, load_dataset, save_dataset, split_leave_one_out
from debug_utils import set_debug_dump_tensors
from errors import MergeRecError, UsageError
from evaluation import (
    REFERENCE_MERGE_ROW, REGIMES, CandidatePool, EvalReport, InconsistencyReport, evaluate, plane_projection,
    render_plane_png, write_plane_csv,
)
from fisher import (
    METHODS, ORDERINGS, REFERENCE_TOPK_MASS, SamplingSpec, cumulative_topk_mass, estimate_fisher, load_fisher,
    save_fisher,
)
from frameworks import KINDS, FrameworkSpec
from logging_utils import RunLogger
from merge import MODES, MergeRecipe, apply_recipe, posterior_sample
from model import ModelConfig, ParamVector, configure_threads, load_checkpoint, round_to_storage, save_checkpoint
from pipeline import (
    BASELINE, REFERENCE_NOTE, TREND_QUORUM, RunManifest, aggregate_trends, compare_manifests, load_interactions_dataset,
    run_pipeline,
)
from training import Trainer


# ========================
# SHARED HELPERS
# ========================

def load_experiment(args, logger: RunLogger) -> Tuple[Config, ExperimentConfig]:
    config = Config(config_path=args.config)
    success, error = config.load()
    if not success:
        raise UsageError(error, stage="config")
    config.apply_overrides(seed=args.seed, out_dir=args.out_dir, threads=args.threads)
    exp = config.experiment()
    configure_threads(exp.threads)
    if exp.desk:
        logger.info("🪑 Desk preset active (MERGE_REC_DESK)")
    logger.debug(f"Config digest {exp.digest()[:12]}, seed {exp.seed}")
    return config, exp


def load_data(args, exp: ExperimentConfig, logger) -> SequenceDataset:
    """--dataset file when given, otherwise the configured data source."""
    if getattr(args, "dataset", None):
        return load_dataset(Path(args.dataset))
    return load_interactions_dataset(exp, logger)


def load_split(args, exp: ExperimentConfig, logger) -> Tuple[LeaveOneOutSplit, ModelConfig]:
    dataset = load_data(args, exp, logger)
    return split_leave_one_out(dataset), exp.model.to_model_config(dataset.num_items)


def output_path(args, exp: ExperimentConfig, default: str) -> Path:
    path = Path(args.output) if args.output else Path(exp.out_dir) / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def stamp(path: Path, exp: ExperimentConfig, kind: str, **meta) -> str:
    write_sidecar(path, {"config_digest": exp.digest(), "kind": kind, **meta})
    return file_sha256(path)


def framework_from_args(name: str, exp: ExperimentConfig) -> FrameworkSpec:
    if name == "baseline":
        return BASELINE
    for fw in exp.frameworks:
        if name in (fw.label, fw.kind):
            return fw
    if name in KINDS:
        return FrameworkSpec(name)
    raise UsageError(f"unknown framework '{name}'", stage="train")


def load_labelled(paths: List[str], model_config: ModelConfig) -> List[Tuple[str, ParamVector]]:
    """Checkpoints with the label their sidecar records (file stem otherwise)."""
    check_compatible([Path(p) for p in paths])
    out = []
    for p in paths:
        meta = read_sidecar(Path(p)) or {}
        out.append((meta.get("label", Path(p).stem), load_checkpoint(Path(p), model_config)))
    return out


def num_items_for(checkpoint: Path, args, exp: ExperimentConfig, logger) -> int:
    if getattr(args, "num_items", None):
        return args.num_items
    meta = read_sidecar(checkpoint) or {}
    if "num_items" in meta:
        return int(meta["num_items"])
    return load_data(args, exp, logger).num_items


def write_json(payload, path: Path, logger) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    logger.info(f"✅ Wrote {path}")
    return path


# ========================
# SUBCOMMANDS
# ========================

def cmd_ingest(args, exp: ExperimentConfig, logger) -> int:
    dataset = load_interactions_dataset(exp, logger)
    path = save_dataset(dataset, output_path(args, exp, "dataset.mrgd"))
    sha = stamp(path, exp, "dataset", num_users=dataset.num_users, num_items=dataset.num_items)
    logger.log_stage("ingest", outputs={"dataset": sha}, seed=exp.data.seed)
    logger.info(f"✅ Wrote {path}")
    return 0


def cmd_train(args, exp: ExperimentConfig, logger) -> int:
    split, model_config = load_split(args, exp, logger)
    framework = framework_from_args(args.framework, exp)
    init = None
    if args.init:
        check_compatible([Path(args.init)])
        init = load_checkpoint(Path(args.init), model_config)
    if args.epochs is not None:
        epochs = args.epochs
    else:
        epochs = exp.epochs.finetune if init is not None else exp.epochs.baseline
    seed = derive_seed(exp.seed, "train", framework.label)

    trainer = Trainer(split, model_config, exp.batch_size, exp.mask_prob, logger=logger, progress=args.progress)
    params = round_to_storage(trainer.train(framework, epochs, seed, init=init).params)
    path = save_checkpoint(params, output_path(args, exp, f"{framework.label}.ckpt"))
    sha = stamp(path, exp, "checkpoint", label=framework.label, framework=framework.to_dict(), epochs=epochs,
                seed=seed, num_items=model_config.num_items, arch_hash=f"{params.arch_hash:016x}")
    inputs = {"init": file_sha256(Path(args.init))} if args.init else {}
    logger.log_stage(f"train:{framework.label}", inputs=inputs, outputs={"checkpoint": sha}, seed=seed)
    logger.info(f"✅ Wrote {path}")
    return 0


def cmd_fisher(args, exp: ExperimentConfig, logger) -> int:
    split, model_config = load_split(args, exp, logger)
    ckpt = Path(args.checkpoint)
    check_compatible([ckpt])
    params = load_checkpoint(ckpt, model_config)
    spec = SamplingSpec(args.method or exp.fisher.method, args.n if args.n is not None else exp.fisher.sample_size)
    batch_size = args.batch_size or exp.fisher.batch_size
    seed = derive_seed(exp.seed, "fisher", ckpt.stem)

    fisher = estimate_fisher(params, split, spec, batch_size, seed, ordering=args.ordering or exp.fisher.ordering,
                             logger=logger, progress=args.progress)
    path = save_fisher(fisher, output_path(args, exp, f"{ckpt.stem}.fisher"))
    ckpt_sha = file_sha256(ckpt)
    sha = stamp(path, exp, "fisher", label=ckpt.stem, checkpoint_sha256=ckpt_sha,
                arch_hash=f"{fisher.arch_hash:016x}", **fisher.meta.to_dict())
    logger.log_stage(f"fisher:{ckpt.stem}", inputs={"checkpoint": ckpt_sha}, outputs={"fisher": sha},
                     seed=seed, backward_passes=fisher.meta.backward_passes)
    logger.info(f"✅ Wrote {path} ({fisher.meta.backward_passes} backward passes)")
    return 0


def cmd_merge(args, exp: ExperimentConfig, logger) -> int:
    recipe = MergeRecipe.from_json(Path(args.recipe))
    if args.mode:
        recipe = MergeRecipe(recipe.entries, args.mode, recipe.epsilon)
    inputs = [e.checkpoint for e in recipe.entries]
    if recipe.mode == "fisher":
        inputs += [e.fisher for e in recipe.entries]
    check_compatible(inputs)

    model_config = exp.model.to_model_config(num_items_for(recipe.entries[0].checkpoint, args, exp, logger))
    merged = apply_recipe(recipe, model_config, logger)
    path = merged.save(output_path(args, exp, f"merged_{recipe.mode}.ckpt"), extra={
        "config_digest": exp.digest(), "kind": "checkpoint", "label": f"merged_{recipe.mode}",
        "num_items": model_config.num_items,
    })
    logger.log_stage(f"merge:{recipe.mode}", inputs={str(p): file_sha256(p) for p in inputs},
                     outputs={"checkpoint": file_sha256(path)})
    logger.info(f"✅ Wrote {path}")
    return 0


def cmd_eval(args, exp: ExperimentConfig, logger) -> int:
    split, model_config = load_split(args, exp, logger)
    regimes = args.pools or list(exp.eval.pools)
    ks = args.ks or list(exp.eval.ks)
    pools = [
        CandidatePool(r, exp.eval.random_k if r == "random" else exp.eval.popular_k, derive_seed(exp.seed, "pool", r))
        for r in regimes
    ]

    results = {}
    rows = []
    for label, params in load_labelled(args.checkpoints, model_config):
        reports = {p.regime: evaluate(params, split, p, ks, which=exp.eval.split, label=label) for p in pools}
        results[label] = {r: rep.to_dict() for r, rep in reports.items()}
        for k in ks:
            rows.append({"model": label, "k": k, **{r: rep.means[k] for r, rep in reports.items()}})
    if 10 in ks:
        rows.append({"model": f"fisher, {REFERENCE_NOTE}", "k": 10, **{r: REFERENCE_MERGE_ROW[r] for r in regimes}})
    logger.log_summary("NDCG by candidate pool", rows, ["model", "k", *regimes])
    write_json(results, output_path(args, exp, "eval.json"), logger)
    return 0


def cmd_inconsistency(args, exp: ExperimentConfig, logger) -> int:
    """Pairs drawn from eval.json files written by `eval`; one file may hold several models."""
    def reports_of(paths: List[str]) -> List[EvalReport]:
        out = []
        for path in paths:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
            for label, by_pool in payload.items():
                if args.pool not in by_pool:
                    raise UsageError(f"{path}: model '{label}' has no '{args.pool}' pool", stage="inconsistency")
                out.append(EvalReport.from_dict(by_pool[args.pool]))
        return out

    report = InconsistencyReport(threshold=args.threshold)
    for relation, groups in (("similar", args.similar or []), ("dissimilar", args.dissimilar or [])):
        for group in groups:
            members = reports_of(group)
            for i, a in enumerate(members):
                for b in members[i + 1:]:
                    report.add(a, b, relation)
    if not report.rows:
        raise UsageError("need at least one --similar or --dissimilar group with two models", stage="inconsistency")

    rows = [{"pair": f"{r['a']} | {r['b']}", "relation": r["relation"], "inconsistency": r["inconsistency"]}
            for r in report.rows]
    for relation in ("similar", "dissimilar"):
        if report.mean(relation) is not None:
            rows.append({"pair": "mean", "relation": relation, "inconsistency": report.mean(relation)})
    logger.log_summary(f"Error inconsistency (NDCG@10 > {args.threshold})", rows, ["pair", "relation", "inconsistency"])
    write_json(report.to_dict(), output_path(args, exp, "inconsistency.json"), logger)
    return 0


def cmd_viz_plane(args, exp: ExperimentConfig, logger) -> int:
    if args.fishers and len(args.fishers) > 3:
        raise UsageError("at most one fisher per centroid", stage="viz-plane")
    model_config = exp.model.to_model_config(num_items_for(Path(args.centroids[0]), args, exp, logger))
    centroids = load_labelled(args.centroids, model_config)

    points: List[Tuple[str, ParamVector]] = []
    for (label, params), fisher_path in zip(centroids, args.fishers or []):
        fisher = load_fisher(Path(fisher_path), model_config)
        rng = np.random.default_rng(derive_seed(exp.seed, "plane", label))
        precision = fisher.values * fisher.meta.num_sequences
        samples = posterior_sample(params, precision, args.samples, exp.plane_epsilon, rng)
        points.extend((f"{label}:sample", s) for s in samples)
    points.extend(load_labelled(args.points or [], model_config))

    rows = plane_projection(*(p for _, p in centroids), points)
    rows = [(centroids[int(lab[1]) - 1][0] if lab in ("c1", "c2", "c3") else lab, x, y) for lab, x, y in rows]
    path = write_plane_csv(rows, output_path(args, exp, "plane.csv"))
    if args.png:
        render_plane_png(rows, path.with_suffix(".png"), logger)
    logger.info(f"✅ Wrote {path} ({len(rows)} points)")
    return 0


def cmd_topk_mass(args, exp: ExperimentConfig, logger) -> int:
    split, model_config = load_split(args, exp, logger)
    sizes = sorted(set(args.sizes or exp.topk_sizes) | {model_config.num_items})
    columns = [f"k={k}" for k in sizes]
    rows = []
    for label, params in load_labelled(args.checkpoints, model_config):
        masses = cumulative_topk_mass(params, split, sizes)
        rows.append({"model": label, **dict(zip(columns, masses))})
    rows.append({"model": f"{REFERENCE_NOTE}, non-gating", **{f"k={k}": v for k, v in REFERENCE_TOPK_MASS.items()}})
    logger.log_summary("Cumulative top-k probability mass", rows, ["model", *columns])
    write_json(rows, output_path(args, exp, "topk_mass.json"), logger)
    return 0


def cmd_pipeline(args, exp: ExperimentConfig, logger, config: Config) -> int:
    run_pipeline(exp, logger, raw_config=config.config_data, progress=args.progress)
    return 0


def cmd_replay(args, logger) -> int:
    """Re-run the configuration a manifest recorded and compare artifact hashes."""
    previous = RunManifest.load(Path(args.replay))
    replay = Config()
    replay.config_data = previous.config
    replay.apply_overrides(out_dir=args.out_dir, threads=args.threads)
    exp = replay.experiment()
    configure_threads(exp.threads)
    manifest = run_pipeline(exp, logger, raw_config=replay.config_data, progress=args.progress)
    mismatched = compare_manifests(previous, manifest)
    if mismatched:
        logger.error(f"Replay differs on {len(mismatched)} artifact(s): {', '.join(mismatched[:5])}")
        return 1
    logger.info("✅ Replay reproduced every artifact hash")
    return 0


def cmd_trend(args, logger) -> int:
    """Tally the acceptance checks of several seeds' manifests."""
    manifests = []
    for path in args.manifests:
        if not Path(path).exists():
            raise UsageError(f"manifest not found: {path}")
        manifests.append(RunManifest.load(Path(path)))
    checks = aggregate_trends(manifests, quorum=args.quorum)
    logger.log_summary(
        f"Trend checks over seeds {', '.join(str(m.seed) for m in manifests)}",
        [c.to_row() for c in checks],
        ["check", "passed", "required", "status"],
    )
    if args.output:
        write_json({c.name: {"passed": c.passed, "total": c.total, "ok": c.ok} for c in checks}, Path(args.output), logger)
    failed = [c.name for c in checks if not c.ok]
    if failed:
        logger.error(f"Trend checks below quorum: {', '.join(failed)}")
        return 1
    logger.info(f"✅ All {len(checks)} trend checks hold")
    return 0


# ========================
# ENTRYPOINT
# ========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merge-rec",
        description="merge-rec - Fisher-weighted merging of contrastive sequential recommenders",
    )
    parser.add_argument('--config', default=None, help='Path to experiment JSON (built-in defaults otherwise)')
    parser.add_argument('--seed', type=int, default=None, help='Master seed (overrides config)')
    parser.add_argument('--out-dir', default=None, help='Output directory (overrides config)')
    parser.add_argument('--threads', type=int, default=None, help='Torch CPU threads (overrides config)')
    parser.add_argument('--verbose', action='store_true', help='Enable verbose/debug logging')
    parser.add_argument('--progress', action='store_true', help='Show progress bars')
    parser.add_argument('-d', '--dump-tensors', action='store_true',
                        help='Enable debug mode: dump tensors when a numeric failure occurs')
    parser.add_argument('--log-file', default=None, help='Log file (default: <out-dir>/merge_rec.log)')

    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('ingest', help='Build the sequence dataset from the configured source')
    p.add_argument('--output', default=None)

    p = sub.add_parser('train', help='Train one framework')
    p.add_argument('--framework', required=True, help=f"baseline, a configured label, or one of {', '.join(KINDS)}")
    p.add_argument('--dataset', default=None)
    p.add_argument('--init', default=None, help='Checkpoint to fine-tune from')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--output', default=None)

    p = sub.add_parser('fisher', help='Estimate the diagonal Fisher of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', default=None)
    p.add_argument('--method', choices=METHODS, default=None)
    p.add_argument('--n', type=int, default=None, help='Sample size')
    p.add_argument('--batch-size', type=int, default=None)
    p.add_argument('--ordering', choices=ORDERINGS, default=None)
    p.add_argument('--output', default=None)

    p = sub.add_parser('merge', help='Merge checkpoints from a recipe JSON')
    p.add_argument('--recipe', required=True)
    p.add_argument('--mode', choices=MODES, default=None, help='Override the recipe mode')
    p.add_argument('--dataset', default=None)
    p.add_argument('--num-items', type=int, default=None, help='|V| when the checkpoint sidecar lacks it')
    p.add_argument('--output', default=None)

    p = sub.add_parser('eval', help='NDCG@k on the candidate pools')
    p.add_argument('checkpoints', nargs='+')
    p.add_argument('--dataset', default=None)
    p.add_argument('--pools', nargs='+', choices=REGIMES, default=None)
    p.add_argument('--ks', nargs='+', type=int, default=None)
    p.add_argument('--output', default=None)

    p = sub.add_parser('inconsistency', help='Error inconsistency between eval reports')
    p.add_argument('--similar', nargs='+', action='append', help='eval.json files of one framework (repeatable)')
    p.add_argument('--dissimilar', nargs='+', action='append', help='eval.json files of different frameworks (repeatable)')
    p.add_argument('--pool', default='full', choices=REGIMES)
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--output', default=None)

    p = sub.add_parser('viz-plane', help='Project checkpoints onto the plane through three centroids')
    p.add_argument('--centroids', nargs=3, required=True)
    p.add_argument('--fishers', nargs='+', default=None, help='Fisher per centroid, for posterior samples')
    p.add_argument('--samples', type=int, default=100)
    p.add_argument('--points', nargs='+', default=None, help='Extra checkpoints to project')
    p.add_argument('--dataset', default=None)
    p.add_argument('--num-items', type=int, default=None)
    p.add_argument('--png', action='store_true')
    p.add_argument('--output', default=None)

    p = sub.add_parser('topk-mass', help='Cumulative top-k probability mass')
    p.add_argument('checkpoints', nargs='+')
    p.add_argument('--dataset', default=None)
    p.add_argument('--sizes', nargs='+', type=int, default=None)
    p.add_argument('--output', default=None)

    p = sub.add_parser('pipeline', help='Run the full experiment')
    p.add_argument('--replay', default=None, help='Manifest to replay and compare artifact hashes against')

    p = sub.add_parser('trend', help='Check acceptance trends over the manifests of several seeds')
    p.add_argument('manifests', nargs='+')
    p.add_argument('--quorum', type=float, default=TREND_QUORUM, help='Fraction of seeds a trend check must hold on')
    p.add_argument('--output', default=None)

    return parser


COMMANDS = {
    'ingest': cmd_ingest,
    'train': cmd_train,
    'fisher': cmd_fisher,
    'merge': cmd_merge,
    'eval': cmd_eval,
    'inconsistency': cmd_inconsistency,
    'viz-plane': cmd_viz_plane,
    'topk-mass': cmd_topk_mass,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entrypoint."""
    args = build_parser().parse_args(argv)

    out_dir = Path(args.out_dir or ".")
    logger = RunLogger(log_file=args.log_file or str(out_dir / "merge_rec.log"), verbose=args.verbose)
    set_debug_dump_tensors(args.dump_tensors, out_dir)

    try:
        if args.command == 'pipeline' and args.replay:
            return cmd_replay(args, logger)
        if args.command == 'trend':
            return cmd_trend(args, logger)
        config, exp = load_experiment(args, logger)
        if args.command == 'pipeline':
            return cmd_pipeline(args, exp, logger, config)
        return COMMANDS[args.command](args, exp, logger)
    except MergeRecError as e:
        if not e.stage:
            e.stage = args.command
        logger.error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("\n\n⚠️  Interrupted by user")
        return 130
    except Exception as e:
        logger.error(f"\n❌ Unexpected error: {e}")
        import traceback
        logger.debug(traceback.format_exc())
        return 1
    finally:
        logger.close()


if __name__ == '__main__':
    sys.exit(main())
