"""Synthetic segmentation world and stochastic mock predictor.

Enables the full uncertainty-vs-random selection experiment end to end at
desk scale, with no neural network.  Images belong to pattern families drawn
from an intentionally unbalanced distribution; the mock predictor's per-pass
noise shrinks with its exposure to a family, so images from under-represented
families produce more varied passes and higher mutual information, exactly
the behavior threshold-based selection is meant to exploit.

"Training" the mock predictor just recounts the family histogram of the
labeled pools; that isolates the acquisition logic, which is what this
module exists to exercise.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as mcio
from .evaluation import ConfusionMatrix, accumulate, iou_report
from .metrics import Measure, PredictionStack, acquisition_score
from .pool import (
    SPLITS,
    PoolState,
    ScoreRecord,
    StopConfig,
    check_stop,
    compute_thresholds,
    random_baseline_round,
    scan_and_select,
    seed_initial,
)
from .seeding import derive_rng


@dataclass(frozen=True)
class PatternFamily:
    """One generative template: a scene kind plus the classes it paints."""

    name: str
    kind: str  # "gradient" | "stripes" | "bands" | "blobs"
    classes: tuple[int, ...]


@dataclass
class SyntheticWorld:
    class_count: int = 5
    height: int = 64
    width: int = 64
    rng_seed: int = 0
    families: tuple[PatternFamily, ...] = ()
    frequencies: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.families:
            self.families, self.frequencies = _default_families()
        self.families = tuple(self.families)
        self.frequencies = tuple(float(f) for f in self.frequencies)
        if len(self.families) != len(self.frequencies):
            raise ValueError("one frequency per family is required")
        if abs(sum(self.frequencies) - 1.0) > 1e-9:
            raise ValueError(f"family frequencies sum to {sum(self.frequencies)}, not 1")
        covered = set()
        for family in self.families:
            if any(c >= self.class_count for c in family.classes):
                raise ValueError(f"family {family.name!r} uses out-of-range classes")
            if len(family.classes) < 2:
                raise ValueError(f"family {family.name!r} needs at least two classes")
            covered.update(family.classes)
        if covered != set(range(self.class_count)):
            missing = sorted(set(range(self.class_count)) - covered)
            raise ValueError(f"classes {missing} are unreachable from any family")

    def family(self, name: str) -> PatternFamily:
        for fam in self.families:
            if fam.name == name:
                return fam
        raise KeyError(name)

    def rare_families(self) -> set[str]:
        """Families rarer than the uniform share 1 / n_families."""
        uniform = 1.0 / len(self.families)
        return {
            fam.name
            for fam, freq in zip(self.families, self.frequencies)
            if freq < uniform
        }


def _default_families() -> tuple[tuple[PatternFamily, ...], tuple[float, ...]]:
    families = (
        PatternFamily("open-scene", "gradient", (0, 1)),
        PatternFamily("striped", "stripes", (0, 1)),
        PatternFamily("spotted-2", "blobs", (0, 2)),
        PatternFamily("spotted-3", "blobs", (0, 1, 3)),
        PatternFamily("spotted-4", "blobs", (0, 4)),
    )
    return families, (0.50, 0.25, 0.11, 0.08, 0.06)


def _draw_blob(labels: np.ndarray, value: int, rng: np.random.Generator):
    h, w = labels.shape
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    radius = int(rng.integers(max(1, h // 8), max(2, h // 3) + 1))
    yy, xx = np.ogrid[:h, :w]
    labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2] = value


def render_family(family: PatternFamily, height: int, width: int, rng) -> np.ndarray:
    """Render one label map for a family; deterministic given the generator."""
    labels = np.full((height, width), family.classes[0], dtype=np.uint8)
    if family.kind == "gradient":
        # Diagonal split with a random slope and offset.
        slope = float(rng.uniform(-1.0, 1.0))
        offset = float(rng.uniform(0.2, 0.8)) * height
        yy, xx = np.ogrid[:height, :width]
        labels[yy > offset + slope * xx] = family.classes[1]
    elif family.kind == "stripes":
        period = int(rng.integers(2, max(3, width // 6) + 1))
        phase = int(rng.integers(0, 2 * period))
        xx = np.arange(width)
        mask = ((xx + phase) // period) % 2 == 1
        labels[:, mask] = family.classes[1]
    elif family.kind == "bands":
        band = int(rng.integers(max(1, height // 8), max(2, height // 3)))
        top = int(rng.integers(0, height - band + 1))
        labels[top : top + band] = family.classes[1]
    elif family.kind == "blobs":
        if len(family.classes) > 2:
            band = int(rng.integers(max(1, height // 8), max(2, height // 3)))
            top = int(rng.integers(0, height - band + 1))
            labels[top : top + band] = family.classes[1]
        for _ in range(int(rng.integers(1, 4))):
            _draw_blob(labels, family.classes[-1], rng)
    else:
        raise ValueError(f"unknown family kind {family.kind!r}")
    return labels


@dataclass
class SyntheticDataset:
    manifest: mcio.Manifest
    labels: dict[str, np.ndarray]
    families: dict[str, str]  # image id -> family name

    def split_ids(self, split: str) -> list[str]:
        return self.manifest.ids(split)


def generate_dataset(
    world: SyntheticWorld, n_train: int, n_val: int, n_test: int, out_dir=None
) -> SyntheticDataset:
    """Sample a dataset deterministically from the world seed.

    With out_dir set, label maps land in out_dir/labels and a manifest.json
    is written; the same tree a real-data run would consume.
    """
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    for split, size in sizes.items():
        if size < 1:
            raise ValueError(f"n_{split} must be >= 1, got {size}")
    frequencies = np.array(world.frequencies)
    splits: dict[str, list[mcio.ManifestEntry]] = {}
    labels: dict[str, np.ndarray] = {}
    families: dict[str, str] = {}
    for split, size in sizes.items():
        entries = []
        for index in range(size):
            rng = derive_rng(world.rng_seed, "dataset", split, index)
            fam = world.families[int(rng.choice(len(world.families), p=frequencies))]
            image_id = f"{split}-{index:05d}"
            labels[image_id] = render_family(fam, world.height, world.width, rng)
            families[image_id] = fam.name
            entries.append(
                mcio.ManifestEntry(
                    id=image_id,
                    label_path=f"labels/{image_id}.mcds",
                    meta={"family": fam.name},
                )
            )
        splits[split] = entries
    manifest = mcio.Manifest(splits=splits)
    if out_dir is not None:
        out_dir = Path(out_dir)
        for image_id, label in labels.items():
            mcio.write_label_map(label, out_dir / "labels" / f"{image_id}.mcds")
        mcio.save_manifest(manifest, out_dir / "manifest.json")
    return SyntheticDataset(manifest=manifest, labels=labels, families=families)


@dataclass
class MockPredictor:
    """Signal-plus-noise stand-in for a segmentation model under MC dropout.

    Emits T softmax maps of (base logits + Gaussian noise); the noise scale
    for an image is noise_floor + noise_gain / (1 + familiarity of its
    family), where familiarity counts labeled-pool exposures.  Base logits
    put logit_margin on the true class and a runner-up tilt on the pixel's
    within-family partner class, so mistakes confuse classes that co-occur
    in a scene instead of spraying uniformly into unrelated classes.
    """

    world: SyntheticWorld
    noise_floor: float = 0.25
    noise_gain: float = 3.0
    logit_margin: float = 2.0
    confusion_tilt: float = 0.5  # runner-up logit as a fraction of logit_margin
    context_suppression: float = 4.0  # logit penalty on classes absent from the scene
    rng_seed: int = 0
    familiarity: Counter = field(default_factory=Counter)

    def fit(self, labeled_ids, families: dict[str, str]):
        """Recount family exposures from the current labeled pool."""
        self.familiarity = Counter(families[i] for i in labeled_ids)
        return self

    def noise_scale(self, family_name: str) -> float:
        return self.noise_floor + self.noise_gain / (1.0 + self.familiarity[family_name])

    def _base_logits(self, label_map: np.ndarray, family_name: str) -> np.ndarray:
        # Classes outside the scene's family are suppressed (a model rarely
        # hallucinates classes with no contextual support), the pixel's
        # within-family partner class gets a runner-up tilt, the true class
        # the full margin.  Mistakes therefore confuse co-occurring classes.
        c = self.world.class_count
        gt = label_map[None].astype(np.int64)
        classes = self.world.family(family_name).classes
        base = np.full(
            (c,) + label_map.shape,
            np.float32(-self.context_suppression * self.logit_margin),
            dtype=np.float32,
        )
        base[list(classes)] = 0.0
        partner_of = {
            g: classes[(i + 1) % len(classes)] for i, g in enumerate(classes)
        }
        partner = np.vectorize(partner_of.__getitem__, otypes=[np.int64])(gt)
        np.put_along_axis(
            base, partner, np.float32(self.confusion_tilt * self.logit_margin), axis=0
        )
        np.put_along_axis(base, gt, np.float32(self.logit_margin), axis=0)
        return base

    def forward(
        self, image_id: str, label_map: np.ndarray, family_name: str, t: int, rng=None
    ) -> PredictionStack:
        """T stochastic softmax passes for one image."""
        if t < 1:
            raise ValueError(f"need at least one pass, got {t}")
        if rng is None:
            rng = derive_rng(self.rng_seed, "forward", image_id)
        base = self._base_logits(label_map, family_name)
        sigma = self.noise_scale(family_name)
        logits = base[None] + np.float32(sigma) * rng.standard_normal(
            (t,) + base.shape, dtype=np.float32
        )
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        return PredictionStack(image_id, logits)

    def predict(
        self, image_id: str, label_map: np.ndarray, family_name: str, passes: int, rng
    ) -> np.ndarray:
        """Argmax of the mean over `passes` stochastic passes."""
        stack = self.forward(image_id, label_map, family_name, passes, rng)
        mean = stack.passes.astype(np.float64).mean(axis=0)
        return np.argmax(mean, axis=0).astype(np.uint8)


@dataclass
class ExperimentConfig:
    p_percent: float = 5.0
    s_factor: float = 1.5
    t_passes: int = 50
    measure: Measure = Measure.MUTUAL_INFORMATION
    cap: int | None = None
    max_rounds: int = 8
    eval_passes: int = 1
    eval_repeats: int = 3
    noise_floor: float = 0.28
    noise_gain: float = 25.0
    logit_margin: float = 1.0
    confusion_tilt: float = 0.5
    context_suppression: float = 4.0
    seed: int = 0
    stop: StopConfig = field(default_factory=StopConfig)

    def __post_init__(self):
        self.measure = Measure(self.measure)
        if isinstance(self.stop, dict):
            self.stop = StopConfig(**self.stop)


@dataclass
class ExperimentResult:
    rows: list[dict]
    summary: dict
    state_uncertainty: PoolState
    state_random: PoolState
    miou_uncertainty: list[float]
    miou_random: list[float]


def _evaluate(predictor, dataset, test_ids, passes, repeats, tag, seed, iteration) -> float:
    """Test meanIoU, averaged over independent stochastic evaluation repeats."""
    mious = []
    for repeat in range(repeats):
        cm = ConfusionMatrix(predictor.world.class_count)
        for image_id in test_ids:
            rng = derive_rng(seed, "eval", tag, iteration, repeat, image_id)
            pred = predictor.predict(
                image_id, dataset.labels[image_id], dataset.families[image_id], passes, rng
            )
            accumulate(cm, dataset.labels[image_id], pred)
        mious.append(iou_report(cm).mean_iou)
    return float(np.mean(mious))


def _runlog_row(state, split_sizes, mode, iteration, thresholds, round_, miou) -> dict:
    pct = {
        s: 100.0 * len(state.splits[s].labeled) / split_sizes[s] for s in SPLITS
    }
    row = {
        "iteration": iteration,
        "mode": mode,
        "pct_train": pct["train"],
        "pct_val": pct["val"],
        "selected_train": len(round_.selected["train"]) if round_ else 0,
        "selected_val": len(round_.selected["val"]) if round_ else 0,
        "discarded_train": len(round_.discarded["train"]) if round_ else 0,
        "discarded_val": len(round_.discarded["val"]) if round_ else 0,
        "tr_train": thresholds["train"].threshold if thresholds else None,
        "tr_val": thresholds["val"].threshold if thresholds else None,
        "eu_mean_train": thresholds["train"].mean if thresholds else None,
        "eu_std_train": thresholds["train"].std if thresholds else None,
        "eu_mean_val": thresholds["val"].mean if thresholds else None,
        "eu_std_val": thresholds["val"].std if thresholds else None,
        "test_mean_iou": miou,
    }
    return row


def run_experiment(
    world: SyntheticWorld,
    config: ExperimentConfig,
    n_train: int = 2000,
    n_val: int = 600,
    n_test: int = 400,
    out_dir=None,
    dataset: SyntheticDataset | None = None,
) -> ExperimentResult:
    """Paired uncertainty/random trajectories over a synthetic dataset.

    Two pool states start from one identical random seed set; model A selects
    by per-image uncertainty against per-split thresholds, model B mirrors A's
    per-round counts with uniform random picks.  Both "models" are mock
    predictors whose familiarity histograms derive from their own labeled
    pools.  Returns per-round log rows plus a summary with final test meanIoU
    for both trajectories and rare-family selection statistics.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if dataset is None:
        dataset = generate_dataset(
            world, n_train, n_val, n_test,
            out_dir=(out_dir / "dataset") if out_dir else None,
        )
    split_sizes = {s: len(dataset.split_ids(s)) for s in SPLITS}
    test_ids = dataset.split_ids("test")

    state_a = seed_initial(dataset.manifest, config.p_percent, config.seed)
    state_b = state_a.clone()  # identical initial pools by construction

    def make_predictor():
        return MockPredictor(
            world,
            noise_floor=config.noise_floor,
            noise_gain=config.noise_gain,
            logit_margin=config.logit_margin,
            confusion_tilt=config.confusion_tilt,
            context_suppression=config.context_suppression,
            rng_seed=config.seed,
        )

    predictor_a = make_predictor()
    predictor_b = make_predictor()

    def refit(predictor, state):
        labeled = [i for s in SPLITS for i in state.splits[s].labeled]
        predictor.fit(labeled, dataset.families)

    def scorer_for(predictor, tag, iteration):
        def scorer(image_id):
            rng = derive_rng(config.seed, "score", tag, iteration, image_id)
            stack = predictor.forward(
                image_id,
                dataset.labels[image_id],
                dataset.families[image_id],
                config.t_passes,
                rng,
            )
            return acquisition_score(stack, config.measure)

        return scorer

    rare = world.rare_families()
    rows: list[dict] = []
    round_stats: list[dict] = []
    refit(predictor_a, state_a)
    refit(predictor_b, state_b)
    miou_a = [_evaluate(predictor_a, dataset, test_ids, config.eval_passes, config.eval_repeats, "A", config.seed, 0)]
    miou_b = [_evaluate(predictor_b, dataset, test_ids, config.eval_passes, config.eval_repeats, "B", config.seed, 0)]
    rows.append(_runlog_row(state_a, split_sizes, "uncertainty", 0, None, None, miou_a[0]))
    rows.append(_runlog_row(state_b, split_sizes, "random", 0, None, None, miou_b[0]))

    stop_reason = "max_rounds"
    for _ in range(config.max_rounds):
        iteration = state_a.iteration + 1
        scorer_a = scorer_for(predictor_a, "A", state_a.iteration)
        thresholds = {}
        for split in SPLITS:
            records = [
                ScoreRecord(
                    image_id=i,
                    split=split,
                    eu_img=scorer_a(i),
                    measure=config.measure,
                    iteration_scored=state_a.iteration,
                )
                for i in state_a.splits[split].labeled
            ]
            thresholds[split] = compute_thresholds(records, config.s_factor)

        pool_ids = [i for s in SPLITS for i in state_a.splits[s].unlabeled]
        pool_rare = sum(dataset.families[i] in rare for i in pool_ids)
        round_a = scan_and_select(
            state_a,
            thresholds,
            scorer_a,
            cap=config.cap,
            rng_seed=config.seed,
            measure=config.measure,
        )
        round_b = random_baseline_round(
            state_b, round_a.selected_counts(), rng_seed=config.seed
        )
        refit(predictor_a, state_a)
        refit(predictor_b, state_b)
        miou_a.append(
            _evaluate(predictor_a, dataset, test_ids, config.eval_passes, config.eval_repeats, "A", config.seed, iteration)
        )
        miou_b.append(
            _evaluate(predictor_b, dataset, test_ids, config.eval_passes, config.eval_repeats, "B", config.seed, iteration)
        )
        rows.append(
            _runlog_row(state_a, split_sizes, "uncertainty", iteration, thresholds, round_a, miou_a[-1])
        )
        rows.append(
            _runlog_row(state_b, split_sizes, "random", iteration, None, round_b, miou_b[-1])
        )
        selected_ids = [i for s in SPLITS for i in round_a.selected[s]]
        round_stats.append(
            {
                "iteration": iteration,
                "pool_size": len(pool_ids),
                "pool_rare": pool_rare,
                "selected": len(selected_ids),
                "selected_rare": sum(dataset.families[i] in rare for i in selected_ids),
            }
        )
        decision = check_stop(state_a, config.stop, miou_a)
        if decision.stop:
            stop_reason = decision.reason
            break

    selected_total = sum(r["selected"] for r in round_stats)
    selected_rare = sum(r["selected_rare"] for r in round_stats)
    expected_rare = sum(
        r["selected"] * (r["pool_rare"] / r["pool_size"]) if r["pool_size"] else 0.0
        for r in round_stats
    )
    summary = {
        "seed": config.seed,
        "rounds_run": state_a.iteration,
        "stop_reason": stop_reason,
        "final_miou_uncertainty": miou_a[-1],
        "final_miou_random": miou_b[-1],
        "miou_uncertainty": miou_a,
        "miou_random": miou_b,
        "rare_families": sorted(rare),
        "selected_total": selected_total,
        "selected_rare": selected_rare,
        "expected_rare_under_proportional_sampling": expected_rare,
        "oversampled_rare": selected_rare > expected_rare,
        "rounds": round_stats,
    }
    result = ExperimentResult(
        rows=rows,
        summary=summary,
        state_uncertainty=state_a,
        state_random=state_b,
        miou_uncertainty=miou_a,
        miou_random=miou_b,
    )
    if out_dir is not None:
        for row in rows:
            mcio.append_runlog(out_dir / "runlog.csv", row)
        mcio.save_pool_state(state_a, out_dir / "state_uncertainty.json")
        mcio.save_pool_state(state_b, out_dir / "state_random.json")
        audit = out_dir / "audit"
        for state in (state_a, state_b):
            for round_ in state.history:
                doc = {"seed": config.seed, **round_.to_dict()}
                path = audit / f"round_{round_.iteration:04d}_{round_.mode}.json"
                mcio._atomic_write_text(path, json.dumps(doc, indent=2) + "\n")
        mcio._atomic_write_text(
            out_dir / "summary.json", json.dumps(summary, indent=2) + "\n"
        )
    return result
