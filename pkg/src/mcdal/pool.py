"""Pool-based selection state machine.

Tracks labeled / unlabeled / discarded image pools for the train and val
splits, computes per-split selection thresholds from the labeled pool's
per-image uncertainty, runs shuffle-and-scan selection rounds with a
permanent low-uncertainty discard rule, mirrors each round with a
count-matched random baseline, and decides when to stop.

Determinism: every trajectory is a pure function of (manifest, seeds,
scores, config).  Per-round randomness derives from (seed, iteration,
split), never from carried generator state, so a state reloaded from disk
continues exactly as the uninterrupted run would.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import Measure
from .seeding import derive_rng

SPLITS = ("train", "val")

# Images this far below the labeled-pool mean are permanently discarded.
DISCARD_STD_FACTOR = 1.5


@dataclass
class ThresholdSpec:
    """Selection threshold mean + s_factor * std over labeled-pool scores."""

    s_factor: float
    mean: float
    std: float
    threshold: float
    split: str

    def to_dict(self) -> dict:
        return {
            "s_factor": self.s_factor,
            "mean": self.mean,
            "std": self.std,
            "threshold": self.threshold,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ThresholdSpec":
        return cls(**raw)


@dataclass
class ScoreRecord:
    """Per-image uncertainty score, tagged with the iteration it was computed at."""

    image_id: str
    split: str
    eu_img: float
    measure: Measure
    iteration_scored: int = 0

    def __post_init__(self):
        self.measure = Measure(self.measure)
        if not math.isfinite(self.eu_img):
            raise ValueError(f"score for {self.image_id!r} is not finite")
        if self.eu_img < -1e-6:
            raise ValueError(f"score for {self.image_id!r} is negative: {self.eu_img}")
        if self.measure is not Measure.TOTAL_VARIANCE and self.eu_img > 1.0 + 1e-6:
            raise ValueError(
                f"score for {self.image_id!r} exceeds the measure's range: {self.eu_img}"
            )


@dataclass
class SelectionRound:
    iteration: int
    mode: str  # "uncertainty" | "random"
    measure: Measure | None
    thresholds: dict[str, ThresholdSpec] | None
    selected: dict[str, list[str]]
    discarded: dict[str, list[str]]
    scanned: dict[str, int]
    cap: int | None = None

    def selected_counts(self) -> dict[str, int]:
        return {split: len(self.selected[split]) for split in SPLITS}

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "mode": self.mode,
            "measure": self.measure.value if self.measure else None,
            "thresholds": {k: v.to_dict() for k, v in self.thresholds.items()}
            if self.thresholds
            else None,
            "selected": self.selected,
            "discarded": self.discarded,
            "scanned": self.scanned,
            "cap": self.cap,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "SelectionRound":
        thresholds = raw.get("thresholds")
        return cls(
            iteration=raw["iteration"],
            mode=raw["mode"],
            measure=Measure(raw["measure"]) if raw.get("measure") else None,
            thresholds={k: ThresholdSpec.from_dict(v) for k, v in thresholds.items()}
            if thresholds
            else None,
            selected={k: list(v) for k, v in raw["selected"].items()},
            discarded={k: list(v) for k, v in raw["discarded"].items()},
            scanned=dict(raw["scanned"]),
            cap=raw.get("cap"),
        )


@dataclass
class SplitPools:
    labeled: list[str] = field(default_factory=list)
    unlabeled: list[str] = field(default_factory=list)
    discarded: list[str] = field(default_factory=list)

    def all_ids(self) -> list[str]:
        return self.labeled + self.unlabeled + self.discarded


@dataclass
class PoolState:
    splits: dict[str, SplitPools]
    iteration: int
    rng_seed: int
    history: list[SelectionRound] = field(default_factory=list)

    def validate(self):
        for name, pools in self.splits.items():
            groups = (pools.labeled, pools.unlabeled, pools.discarded)
            total = sum(len(g) for g in groups)
            union = set().union(*map(set, groups))
            if len(union) != total:
                raise ValueError(f"{name} pools overlap or contain duplicates")
        if len(self.history) != self.iteration:
            raise ValueError(
                f"history length {len(self.history)} != iteration {self.iteration}"
            )

    def clone(self) -> "PoolState":
        return PoolState.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "rng_seed": self.rng_seed,
            "splits": {
                name: {
                    "labeled": list(p.labeled),
                    "unlabeled": list(p.unlabeled),
                    "discarded": list(p.discarded),
                }
                for name, p in self.splits.items()
            },
            "history": [r.to_dict() for r in self.history],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PoolState":
        state = cls(
            splits={
                name: SplitPools(
                    labeled=list(p["labeled"]),
                    unlabeled=list(p["unlabeled"]),
                    discarded=list(p["discarded"]),
                )
                for name, p in raw["splits"].items()
            },
            iteration=raw["iteration"],
            rng_seed=raw["rng_seed"],
            history=[SelectionRound.from_dict(r) for r in raw.get("history", [])],
        )
        state.validate()
        return state


def seed_initial(manifest, p_percent: float, rng_seed: int) -> PoolState:
    """Label an initial ceil(P% * n) random sample of each split.

    `manifest` is anything with an ids(split) method (an io.Manifest) or a
    plain {split: [ids]} mapping.
    """
    if not 0 < p_percent < 100:
        raise ValueError(f"p_percent must be in (0, 100), got {p_percent}")
    ids_of = manifest.ids if hasattr(manifest, "ids") else lambda s: list(manifest[s])
    splits = {}
    for split in SPLITS:
        ids = list(ids_of(split))
        if not ids:
            raise ValueError(f"{split} split is empty")
        count = math.ceil(p_percent / 100.0 * len(ids))
        rng = derive_rng(rng_seed, "seed-initial", split)
        chosen = set(rng.choice(len(ids), size=count, replace=False).tolist())
        splits[split] = SplitPools(
            labeled=[ids[i] for i in sorted(chosen)],
            unlabeled=[ids[i] for i in range(len(ids)) if i not in chosen],
        )
    state = PoolState(splits=splits, iteration=0, rng_seed=int(rng_seed))
    state.validate()
    return state


def compute_thresholds(scores, s_factor: float) -> ThresholdSpec:
    """Threshold = mean + s_factor * population std of the labeled scores."""
    if not scores:
        raise ValueError("cannot compute a threshold from zero scores")
    if not math.isfinite(s_factor):
        raise ValueError("s_factor must be finite")
    splits = {rec.split for rec in scores}
    if len(splits) != 1:
        raise ValueError(f"scores mix splits: {sorted(splits)}")
    values = np.array([rec.eu_img for rec in scores], dtype=np.float64)
    mean = float(values.mean())
    std = float(values.std())  # population std: the pool is the whole population
    return ThresholdSpec(
        s_factor=float(s_factor),
        mean=mean,
        std=std,
        threshold=mean + float(s_factor) * std,
        split=splits.pop(),
    )


def discard_rule(eu_img: float, mean: float, std: float) -> bool:
    """True when an image falls strictly below mean - 1.5 * std."""
    if std < 0:
        raise ValueError("std must be non-negative")
    return eu_img < mean - DISCARD_STD_FACTOR * std


def scan_and_select(
    state: PoolState,
    thresholds: dict[str, ThresholdSpec],
    scorer,
    cap: int | None = None,
    rng_seed: int | None = None,
    measure: Measure | None = None,
) -> SelectionRound:
    """Run one uncertainty selection round, advancing `state` in place.

    Each split's unlabeled pool is shuffled deterministically, then scored in
    order via scorer(image_id).  Images strictly above the split threshold are
    selected; images strictly below mean - 1.5 std are discarded for good; the
    split's scan halts once `cap` images are selected or the pool is exhausted.
    """
    state.validate()
    for split in SPLITS:
        if split not in thresholds:
            raise ValueError(f"missing thresholds for split {split!r}")
    if cap is not None and cap <= 0:
        raise ValueError(f"cap must be positive, got {cap}")
    seed = state.rng_seed if rng_seed is None else rng_seed

    selected = {s: [] for s in SPLITS}
    discarded = {s: [] for s in SPLITS}
    scanned = {s: 0 for s in SPLITS}
    for split in SPLITS:
        pools = state.splits[split]
        spec = thresholds[split]
        rng = derive_rng(seed, "scan", state.iteration, split)
        order = [pools.unlabeled[i] for i in rng.permutation(len(pools.unlabeled))]
        floor = spec.mean - DISCARD_STD_FACTOR * spec.std
        for image_id in order:
            eu = float(scorer(image_id))
            scanned[split] += 1
            if eu > spec.threshold:
                selected[split].append(image_id)
            elif eu < floor:
                discarded[split].append(image_id)
            if cap is not None and len(selected[split]) >= cap:
                break

    round_ = SelectionRound(
        iteration=state.iteration + 1,
        mode="uncertainty",
        measure=Measure(measure) if measure else None,
        thresholds=dict(thresholds),
        selected=selected,
        discarded=discarded,
        scanned=scanned,
        cap=cap,
    )
    _apply_round(state, round_)
    return round_


def random_baseline_round(
    state: PoolState, counts: dict[str, int], rng_seed: int
) -> SelectionRound:
    """Select exactly `counts[split]` uniform-random unlabeled images per split.

    The count-matched twin of an uncertainty round; no discard rule applies.
    """
    state.validate()
    selected = {s: [] for s in SPLITS}
    for split in SPLITS:
        pools = state.splits[split]
        count = int(counts.get(split, 0))
        if count > len(pools.unlabeled):
            raise ValueError(
                f"{split}: cannot sample {count} from {len(pools.unlabeled)} unlabeled"
            )
        rng = derive_rng(rng_seed, "baseline", state.iteration, split)
        chosen = rng.choice(len(pools.unlabeled), size=count, replace=False)
        selected[split] = [pools.unlabeled[i] for i in sorted(chosen.tolist())]
    round_ = SelectionRound(
        iteration=state.iteration + 1,
        mode="random",
        measure=None,
        thresholds=None,
        selected=selected,
        discarded={s: [] for s in SPLITS},
        scanned={s: len(selected[s]) for s in SPLITS},
        cap=None,
    )
    _apply_round(state, round_)
    return round_


def _apply_round(state: PoolState, round_: SelectionRound):
    for split in SPLITS:
        pools = state.splits[split]
        moved = set(round_.selected[split]) | set(round_.discarded[split])
        pools.labeled.extend(round_.selected[split])
        pools.discarded.extend(round_.discarded[split])
        pools.unlabeled = [i for i in pools.unlabeled if i not in moved]
    state.iteration += 1
    state.history.append(round_)
    state.validate()


@dataclass
class StopConfig:
    min_selected_per_round: int = 1
    patience_rounds: int = 3
    miou_improvement_epsilon: float = 0.002
    # Passed through to model adapters; histogram-style retraining ignores it.
    warm_start: bool = True

    def __post_init__(self):
        if self.min_selected_per_round < 0:
            raise ValueError("min_selected_per_round must be >= 0")
        if self.patience_rounds < 1:
            raise ValueError("patience_rounds must be >= 1")
        if self.miou_improvement_epsilon < 0:
            raise ValueError("miou_improvement_epsilon must be >= 0")


@dataclass
class StopDecision:
    stop: bool
    reason: str | None = None


def check_stop(state: PoolState, config: StopConfig, miou_history=()) -> StopDecision:
    """First matching stop reason: exhausted, few_uncertain, no_improvement.

    `miou_history` is the test meanIoU per completed evaluation, oldest first.
    """
    if all(not state.splits[s].unlabeled for s in SPLITS):
        return StopDecision(True, "exhausted")
    if state.history:
        last = state.history[-1]
        if all(
            len(last.selected[s]) < config.min_selected_per_round for s in SPLITS
        ):
            return StopDecision(True, "few_uncertain")
    series = list(miou_history)
    if len(series) > config.patience_rounds:
        reference = series[0]
        stale = 0
        for value in series[1:]:
            if value > reference + config.miou_improvement_epsilon:
                reference = value
                stale = 0
            else:
                stale += 1
        if stale >= config.patience_rounds:
            return StopDecision(True, "no_improvement")
    return StopDecision(False)
