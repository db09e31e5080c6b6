"""Forward-pass-count stability study.

Sweeps the number of stochastic passes T over a grid, repeating each value
with fresh passes, and reports the mean and standard deviation across repeats
of the dataset-average per-image uncertainty.  The mean stabilizes and the
spread collapses as T grows, which is what justifies a fixed operating T.
"""

from dataclasses import dataclass, field

import numpy as np

from .metrics import Measure, acquisition_score
from . import io as mcio

DEFAULT_T_GRID = tuple(range(1, 11)) + tuple(range(20, 201, 10))
DEFAULT_REPEATS = 5


class StabilityStudyError(RuntimeError):
    pass


@dataclass
class StabilityConfig:
    image_ids: tuple[str, ...]
    t_grid: tuple[int, ...] = DEFAULT_T_GRID
    repeats: int = DEFAULT_REPEATS
    measure: Measure = Measure.MUTUAL_INFORMATION
    rng_seed: int = 0

    def __post_init__(self):
        self.measure = Measure(self.measure)
        self.image_ids = tuple(self.image_ids)
        self.t_grid = tuple(int(t) for t in self.t_grid)
        if not self.image_ids:
            raise ValueError("the study needs at least one image")
        if not self.t_grid or any(t < 1 for t in self.t_grid):
            raise ValueError("t_grid must contain positive pass counts")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class StabilityEntry:
    t: int
    mean: float
    std: float
    raw: tuple[float, ...]


@dataclass
class StabilityReport:
    entries: list[StabilityEntry]
    repeats: int
    measure: Measure
    single_sample: bool = False  # std is 0 by convention when repeats == 1

    def means(self) -> dict[int, float]:
        return {e.t: e.mean for e in self.entries}

    def stds(self) -> dict[int, float]:
        return {e.t: e.std for e in self.entries}


def run_stability(config: StabilityConfig, stack_source) -> StabilityReport:
    """Sweep T x repeats over the dataset.

    stack_source(image_id, t, repeat) must yield an independent fresh
    PredictionStack per (t, repeat) cell.
    """
    entries = []
    for t in config.t_grid:
        dataset_means = []
        for repeat in range(config.repeats):
            per_image = []
            for image_id in config.image_ids:
                try:
                    stack = stack_source(image_id, t, repeat)
                except Exception as exc:
                    raise StabilityStudyError(
                        f"stack source failed at T={t} repeat={repeat} "
                        f"image={image_id!r}: {exc}"
                    ) from exc
                per_image.append(acquisition_score(stack, config.measure))
            dataset_means.append(float(np.mean(per_image)))
        values = np.array(dataset_means, dtype=np.float64)
        # Sample std across repeats (run-to-run variability); one repeat -> 0.
        std = float(values.std(ddof=1)) if config.repeats > 1 else 0.0
        entries.append(
            StabilityEntry(t=t, mean=float(values.mean()), std=std, raw=tuple(values))
        )
    return StabilityReport(
        entries=entries,
        repeats=config.repeats,
        measure=config.measure,
        single_sample=config.repeats == 1,
    )


def write_stability_csv(report: StabilityReport, path):
    lines = ["T,mean,std"]
    for entry in report.entries:
        lines.append(
            f"{entry.t},{mcio.format_number(entry.mean)},{mcio.format_number(entry.std)}"
        )
    mcio._atomic_write_text(path, "\n".join(lines) + "\n")
