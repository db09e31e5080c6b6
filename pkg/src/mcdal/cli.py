"""Command-line surface: score stacks, run selection rounds, evaluate, study, simulate.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.  Every
randomized command takes an explicit --seed; no hidden entropy.  Each run
writes a reproducibility block (config + seeds + versions + timestamp) next
to its outputs; timestamps appear nowhere else, so reruns with identical
inputs produce byte-identical outputs.
"""

import argparse
import concurrent.futures
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as mcio
from .evaluation import ConfusionMatrix, accumulate, iou_report
from .metrics import Measure, acquisition_value, compute
from .pool import (
    SPLITS,
    ScoreRecord,
    StopConfig,
    compute_thresholds,
    random_baseline_round,
    scan_and_select,
    seed_initial,
)
from .seeding import derive_rng
from .sim import (
    ExperimentConfig,
    MockPredictor,
    SyntheticWorld,
    generate_dataset,
    run_experiment,
)
from .study import (
    DEFAULT_REPEATS,
    DEFAULT_T_GRID,
    StabilityConfig,
    run_stability,
    write_stability_csv,
)


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


MEASURE_CHOICES = [m.value for m in Measure]


def data_root_for(args, manifest_path=None) -> Path:
    if getattr(args, "data_root", None):
        return Path(args.data_root)
    env = os.environ.get("MCDAL_DATA_ROOT")
    if env:
        return Path(env)
    if manifest_path is not None:
        return Path(manifest_path).parent
    return Path.cwd()


def guard_overwrite(path, force: bool):
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")


def write_run_block(target, command: str, args: argparse.Namespace):
    """Reproducibility block: config, seeds, versions.  Timestamps live only here."""
    target = Path(target)
    config = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k not in ("func", "json") and not k.startswith("_")
    }
    block = {
        "command": command,
        "config": config,
        "versions": {
            "mcdal": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if target.is_dir() or target.suffix == "":
        path = target / "run_config.json"
    else:
        path = target.with_name(target.name + ".run.json")
    mcio._atomic_write_text(path, json.dumps(block, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_init(args) -> dict:
    manifest = mcio.load_manifest(args.manifest)
    guard_overwrite(args.state, args.force)
    state = seed_initial(manifest, args.p_percent, args.seed)
    mcio.save_pool_state(state, args.state)
    write_run_block(Path(args.state), "init", args)
    return {
        "state": str(args.state),
        "labeled": {s: len(state.splits[s].labeled) for s in SPLITS},
        "unlabeled": {s: len(state.splits[s].unlabeled) for s in SPLITS},
    }


def _score_entry(entry, split, root, args, measure):
    if not entry.stack_path:
        return None, (entry.id, split, "no stack_path in manifest")
    path = mcio.resolve_path(entry.stack_path, root)
    try:
        stack = mcio.read_stack(path, image_id=entry.id)
        if args.passes is not None:
            stack = stack.with_passes(args.passes)
        scores = compute(stack, measure, normalized=True)
        if args.maps_dir:
            mcio.write_tensor(
                scores.per_pixel.astype(np.float32),
                Path(args.maps_dir) / f"{entry.id}.mcds",
            )
        record = ScoreRecord(
            image_id=entry.id,
            split=split,
            eu_img=acquisition_value(scores),
            measure=measure,
            iteration_scored=args.iteration,
        )
        return record, None
    except (OSError, ValueError, mcio.TensorFileError) as exc:
        return None, (entry.id, split, str(exc))


def cmd_uncertainty(args) -> dict:
    manifest = mcio.load_manifest(args.manifest)
    root = data_root_for(args, args.manifest)
    measure = Measure(args.measure)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for split in splits:
        if split not in manifest.splits:
            raise UsageError(f"manifest has no split {split!r}")
    guard_overwrite(args.out, args.force)
    jobs = max(1, args.jobs)
    work = [(entry, split) for split in splits for entry in manifest.splits[split]]
    if jobs == 1:
        results = [_score_entry(e, s, root, args, measure) for e, s in work]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(
                pool.map(lambda pair: _score_entry(*pair, root, args, measure), work)
            )
    records = [r for r, _ in results if r is not None]
    errors = [e for _, e in results if e is not None]
    if errors and args.strict:
        raise RuntimeError(
            f"scoring failed for {len(errors)} image(s); first: {errors[0]}"
        )
    mcio.write_scores(records, args.out, errors=errors)
    write_run_block(Path(args.out), "uncertainty", args)
    if work and not records:
        raise RuntimeError(f"all {len(errors)} images failed to score")
    return {
        "out": str(args.out),
        "scored": len(records),
        "failed": len(errors),
        "measure": measure.value,
    }


def _audit_round(audit_dir, round_, seed, runlog, state, manifest_sizes=None):
    audit_dir = Path(audit_dir)
    doc = {"seed": seed, **round_.to_dict()}
    path = audit_dir / f"round_{round_.iteration:04d}_{round_.mode}.json"
    guard_overwrite(path, force=False)
    mcio._atomic_write_text(path, json.dumps(doc, indent=2) + "\n")
    if runlog:
        sizes = manifest_sizes or {
            s: len(state.splits[s].all_ids()) for s in SPLITS
        }
        thresholds = round_.thresholds
        row = {
            "iteration": round_.iteration,
            "mode": round_.mode,
            "pct_train": 100.0 * len(state.splits["train"].labeled) / sizes["train"],
            "pct_val": 100.0 * len(state.splits["val"].labeled) / sizes["val"],
            "selected_train": len(round_.selected["train"]),
            "selected_val": len(round_.selected["val"]),
            "discarded_train": len(round_.discarded["train"]),
            "discarded_val": len(round_.discarded["val"]),
            "tr_train": thresholds["train"].threshold if thresholds else None,
            "tr_val": thresholds["val"].threshold if thresholds else None,
            "eu_mean_train": thresholds["train"].mean if thresholds else None,
            "eu_std_train": thresholds["train"].std if thresholds else None,
            "eu_mean_val": thresholds["val"].mean if thresholds else None,
            "eu_std_val": thresholds["val"].std if thresholds else None,
            "test_mean_iou": None,
        }
        mcio.append_runlog(runlog, row)


def cmd_select(args) -> dict:
    state = mcio.load_pool_state(args.state)
    records, _ = mcio.read_scores(args.scores)
    by_id = {r.image_id: r for r in records}
    measures = {r.measure for r in records}
    if len(measures) > 1:
        raise UsageError(f"score file mixes measures: {sorted(m.value for m in measures)}")
    thresholds = {}
    for split in SPLITS:
        labeled = state.splits[split].labeled
        missing = [i for i in labeled if i not in by_id]
        if missing:
            raise RuntimeError(
                f"{split}: {len(missing)} labeled image(s) have no score, "
                f"first: {missing[0]!r}"
            )
        split_records = [
            ScoreRecord(i, split, by_id[i].eu_img, by_id[i].measure, by_id[i].iteration_scored)
            for i in labeled
        ]
        thresholds[split] = compute_thresholds(split_records, args.s_factor)

    def scorer(image_id):
        record = by_id.get(image_id)
        if record is None:
            raise RuntimeError(f"unlabeled image {image_id!r} has no score")
        return record.eu_img

    round_ = scan_and_select(
        state,
        thresholds,
        scorer,
        cap=args.cap,
        rng_seed=args.seed,
        measure=measures.pop() if measures else None,
    )
    mcio.save_pool_state(state, args.state)
    audit_dir = Path(args.audit_dir) if args.audit_dir else Path(args.state).parent / "audit"
    _audit_round(audit_dir, round_, args.seed, args.runlog, state)
    write_run_block(audit_dir, "select", args)
    return {
        "iteration": round_.iteration,
        "selected": round_.selected_counts(),
        "discarded": {s: len(round_.discarded[s]) for s in SPLITS},
        "scanned": round_.scanned,
        "thresholds": {s: thresholds[s].threshold for s in SPLITS},
    }


def cmd_baseline(args) -> dict:
    state = mcio.load_pool_state(args.state)
    paired = mcio.load_pool_state(args.paired)
    uncertainty_rounds = [r for r in paired.history if r.mode == "uncertainty"]
    if not uncertainty_rounds:
        raise UsageError(f"{args.paired} has no uncertainty round to pair with")
    counts = uncertainty_rounds[-1].selected_counts()
    round_ = random_baseline_round(state, counts, rng_seed=args.seed)
    mcio.save_pool_state(state, args.state)
    audit_dir = Path(args.audit_dir) if args.audit_dir else Path(args.state).parent / "audit"
    _audit_round(audit_dir, round_, args.seed, args.runlog, state)
    write_run_block(audit_dir, "baseline", args)
    return {"iteration": round_.iteration, "selected": round_.selected_counts()}


def cmd_evaluate(args) -> dict:
    manifest = mcio.load_manifest(args.manifest)
    root = data_root_for(args, args.manifest)
    cm = ConfusionMatrix(args.classes, ignore_label=args.ignore_label)
    for entry in manifest.splits["test"]:
        gt = mcio.read_label_map(mcio.resolve_path(entry.label_path, root))
        pred_path = Path(args.pred_dir) / f"{entry.id}.mcds"
        if not pred_path.exists():
            raise RuntimeError(f"no prediction for {entry.id!r} at {pred_path}")
        pred = mcio.read_label_map(pred_path)
        try:
            accumulate(cm, gt, pred)
        except ValueError as exc:  # bad data content is a runtime failure, not usage
            raise RuntimeError(f"{entry.id}: {exc}") from exc
    report = iou_report(cm)
    header = (
        ["iteration", "pct_data"]
        + [f"iou_{c}" for c in range(args.classes)]
        + ["mean_iou"]
    )
    out = Path(args.out)
    line = ",".join(
        [str(args.iteration), mcio.format_number(args.pct_data)]
        + [
            "" if v is None else mcio.format_number(v)
            for v in report.per_class_iou
        ]
        + [mcio.format_number(report.mean_iou)]
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    new_file = not out.exists()
    if not new_file:
        existing = out.read_text().splitlines()[0]
        if existing != ",".join(header):
            raise UsageError(f"{out} has a different class layout; use a new file")
    with open(out, "a") as handle:
        if new_file:
            handle.write(",".join(header) + "\n")
        handle.write(line + "\n")
    write_run_block(out, "evaluate", args)
    return {
        "mean_iou": report.mean_iou,
        "per_class_iou": report.per_class_iou,
        "pixels": cm.total(),
    }


def cmd_stability(args) -> dict:
    guard_overwrite(args.out, args.force)
    t_grid = (
        tuple(int(v) for v in args.t_grid.split(",")) if args.t_grid else DEFAULT_T_GRID
    )
    if args.stacks_template:
        if not args.manifest:
            raise UsageError("--stacks-template requires --manifest")
        manifest = mcio.load_manifest(args.manifest)
        root = data_root_for(args, args.manifest)
        image_ids = tuple(manifest.ids(args.split))

        def source(image_id, t, repeat):
            path = args.stacks_template.format(id=image_id, t=t, rep=repeat)
            stack = mcio.read_stack(mcio.resolve_path(path, root), image_id=image_id)
            # Tolerate over-provisioned exports; fewer passes than t is an error.
            return stack if stack.num_passes == t else stack.with_passes(t)

    else:
        world = SyntheticWorld(
            height=args.sim_size, width=args.sim_size, rng_seed=args.seed
        )
        dataset = generate_dataset(world, max(args.sim_train, 1), 1, 1)
        train_ids = dataset.split_ids("train")
        subset = train_ids[: args.sim_images]
        predictor = MockPredictor(
            world,
            noise_floor=args.noise_floor,
            noise_gain=args.noise_gain,
            rng_seed=args.seed,
        ).fit(train_ids, dataset.families)
        image_ids = tuple(subset)

        def source(image_id, t, repeat):
            rng = derive_rng(args.seed, "stability", t, repeat, image_id)
            return predictor.forward(
                image_id, dataset.labels[image_id], dataset.families[image_id], t, rng
            )

    config = StabilityConfig(
        image_ids=image_ids,
        t_grid=t_grid,
        repeats=args.repeats,
        measure=Measure(args.measure),
        rng_seed=args.seed,
    )
    report = run_stability(config, source)
    write_stability_csv(report, args.out)
    write_run_block(Path(args.out), "stability", args)
    means = report.means()
    return {
        "out": str(args.out),
        "t_values": len(report.entries),
        "repeats": report.repeats,
        "mean_at_max_t": means[max(means)],
    }


def cmd_simulate(args) -> dict:
    out = Path(args.out)
    guard_overwrite(out / "runlog.csv", args.force)
    world = SyntheticWorld(height=args.size, width=args.size, rng_seed=args.seed)
    config = ExperimentConfig(
        p_percent=args.p_percent,
        s_factor=args.s_factor,
        t_passes=args.passes,
        measure=Measure(args.measure),
        cap=args.cap,
        max_rounds=args.max_rounds,
        eval_passes=args.eval_passes,
        eval_repeats=args.eval_repeats,
        noise_floor=args.noise_floor,
        noise_gain=args.noise_gain,
        logit_margin=args.logit_margin,
        seed=args.seed,
        stop=StopConfig(
            min_selected_per_round=args.min_selected,
            patience_rounds=args.patience,
            miou_improvement_epsilon=args.miou_epsilon,
        ),
    )
    result = run_experiment(
        world,
        config,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        out_dir=out,
    )
    write_run_block(out, "simulate", args)
    summary = result.summary
    return {
        "out": str(out),
        "rounds_run": summary["rounds_run"],
        "stop_reason": summary["stop_reason"],
        "final_miou_uncertainty": summary["final_miou_uncertainty"],
        "final_miou_random": summary["final_miou_random"],
        "oversampled_rare": summary["oversampled_rare"],
    }


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcdal",
        description="MC-dropout uncertainty scoring and threshold-based active learning",
    )
    parser.add_argument("--data-root", help="base dir for relative paths (or $MCDAL_DATA_ROOT)")
    parser.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="seed initial labeled pools from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--state", required=True, help="output pool-state JSON")
    p.add_argument("--p-percent", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("uncertainty", help="score stacks into a per-image CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output score CSV")
    p.add_argument("--measure", choices=MEASURE_CHOICES, default=Measure.MUTUAL_INFORMATION.value)
    p.add_argument("--passes", type=int, help="use only the first N passes of each stack")
    p.add_argument("--splits", default="train,val")
    p.add_argument("--maps-dir", help="also write per-pixel maps here")
    p.add_argument("--iteration", type=int, default=0, help="iteration tag for the records")
    p.add_argument("--strict", action="store_true", help="fail on the first scoring error")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("select", help="run one threshold-selection round")
    p.add_argument("--state", required=True, help="pool-state JSON, updated in place")
    p.add_argument("--scores", required=True, help="score CSV from `uncertainty`")
    p.add_argument("--s-factor", type=float, required=True)
    p.add_argument("--cap", type=int)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--audit-dir")
    p.add_argument("--runlog", help="append an audit CSV row here")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("baseline", help="count-matched random round paired to an uncertainty state")
    p.add_argument("--state", required=True, help="baseline pool-state JSON, updated in place")
    p.add_argument("--paired", required=True, help="uncertainty pool-state JSON to mirror")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--audit-dir")
    p.add_argument("--runlog")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="meanIoU of predictions over the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True, help="directory of <id>.mcds label maps")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--ignore-label", type=int)
    p.add_argument("--out", required=True, help="report CSV (appended)")
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--pct-data", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stability", help="forward-pass-count stability sweep")
    p.add_argument("--out", required=True, help="output CSV with columns T,mean,std")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--measure", choices=MEASURE_CHOICES, default=Measure.MUTUAL_INFORMATION.value)
    p.add_argument("--t-grid", help="comma-separated pass counts (default: 1..10,20..200)")
    p.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    p.add_argument("--stacks-template", help="path template with {id} {t} {rep} for exported stacks")
    p.add_argument("--manifest", help="manifest for --stacks-template mode")
    p.add_argument("--split", default="val")
    p.add_argument("--sim-images", type=int, default=16, help="synthetic study subset size")
    p.add_argument("--sim-train", type=int, default=200, help="synthetic training-exposure size")
    p.add_argument("--sim-size", type=int, default=8, help="synthetic image side")
    p.add_argument("--noise-floor", type=float, default=0.28)
    p.add_argument("--noise-gain", type=float, default=25.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("simulate", help="full paired uncertainty-vs-random experiment")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=64, help="synthetic image side")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=600)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--p-percent", type=float, default=5.0)
    p.add_argument("--s-factor", type=float, default=1.5)
    p.add_argument("--passes", type=int, default=50)
    p.add_argument("--measure", choices=MEASURE_CHOICES, default=Measure.MUTUAL_INFORMATION.value)
    p.add_argument("--cap", type=int)
    p.add_argument("--max-rounds", type=int, default=8)
    p.add_argument("--eval-passes", type=int, default=1)
    p.add_argument("--eval-repeats", type=int, default=3)
    p.add_argument("--noise-floor", type=float, default=0.28)
    p.add_argument("--noise-gain", type=float, default=25.0)
    p.add_argument("--logit-margin", type=float, default=1.0)
    p.add_argument("--min-selected", type=int, default=1)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--miou-epsilon", type=float, default=0.002)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (mcio.ManifestError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for key, value in summary.items():
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
