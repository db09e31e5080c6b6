"""Epistemic-uncertainty measures over stacked stochastic forward passes.

A segmentation model run T times with dropout active yields, per image, a
[T, C, H, W] stack of per-class probability maps.  This module turns such a
stack into per-pixel uncertainty maps (variation ratio, total variance,
predictive entropy, mutual information, margin of confidence) and into a
single per-image score, the pixel mean of the chosen map.

Numeric conventions:
  * all accumulation happens in float64 regardless of input dtype;
  * reductions over passes/classes sum in sorted order, so permuting passes
    (or class labels) reproduces per-pixel maps bit-for-bit;
  * 0 * log2(0) == 0, enforced by clamping probabilities to [1e-12, 1]
    inside logarithms only;
  * argmax and modal-class ties resolve to the lowest class index.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Tolerances for stack validation.
SUM_TOLERANCE = 1e-4
VALUE_TOLERANCE = 1e-6
LOG_EPS = 1e-12
# Mutual information is >= 0 up to float noise; anything below this is a bug.
MI_NEGATIVE_SLACK = -1e-6


class Measure(str, Enum):
    VARIATION_RATIO = "variation-ratio"
    TOTAL_VARIANCE = "total-variance"
    PREDICTIVE_ENTROPY = "predictive-entropy"
    MUTUAL_INFORMATION = "mutual-information"
    MARGIN = "margin"


@dataclass
class PredictionStack:
    """T stochastic forward passes for one image, layout [T, C, H, W].

    Values are stored float32 (the on-disk precision); every math path
    upcasts to float64 before accumulating.  Validated on construction:
    class probabilities at each (pass, pixel) must sum to 1 within 1e-4
    and lie in [-1e-6, 1 + 1e-6] before being clamped to [0, 1].
    """

    image_id: str
    passes: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.passes, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"stack must be [T, C, H, W], got shape {arr.shape}")
        t, c, h, w = arr.shape
        if t < 1:
            raise ValueError("stack needs at least one forward pass")
        if c < 2:
            raise ValueError(f"stack needs at least two classes, got {c}")
        if h < 1 or w < 1:
            raise ValueError(f"stack needs at least one pixel, got {h}x{w}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"stack for {self.image_id!r} contains non-finite values")
        lo = float(arr.min())
        hi = float(arr.max())
        if lo < -VALUE_TOLERANCE or hi > 1.0 + VALUE_TOLERANCE:
            raise ValueError(
                f"stack for {self.image_id!r} has values outside [0, 1]: "
                f"min={lo:.3e} max={hi:.3e}"
            )
        np.clip(arr, 0.0, 1.0, out=arr)
        sums = arr.sum(axis=1, dtype=np.float64)
        bad = np.abs(sums - 1.0) > SUM_TOLERANCE
        if bad.any():
            ti, hi_, wi = (int(i) for i in np.argwhere(bad)[0])
            raise ValueError(
                f"stack for {self.image_id!r}: class probabilities at "
                f"(t={ti}, h={hi_}, w={wi}) sum to {sums[ti, hi_, wi]:.6f}, not 1"
            )
        self.passes = arr

    @property
    def num_passes(self) -> int:
        return self.passes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.passes.shape[1]

    @property
    def height(self) -> int:
        return self.passes.shape[2]

    @property
    def width(self) -> int:
        return self.passes.shape[3]

    def with_passes(self, count: int) -> "PredictionStack":
        """Return a stack truncated to the first `count` passes."""
        if not 1 <= count <= self.num_passes:
            raise ValueError(f"pass count {count} outside [1, {self.num_passes}]")
        return PredictionStack(self.image_id, self.passes[:count])


@dataclass
class MeanPrediction:
    """Average of the T passes and its argmax class per pixel."""

    probs: np.ndarray  # [C, H, W] float64
    predicted_class: np.ndarray  # [H, W] int


@dataclass
class VoteStats:
    """Per-pass argmax votes and the modal class per pixel."""

    votes: np.ndarray  # [T, H, W] int, argmax class of each pass
    modal_class: np.ndarray  # [H, W] int
    modal_count: np.ndarray  # [H, W] int, frequency of the modal class in [1, T]


@dataclass
class UncertaintyScores:
    measure: Measure
    per_pixel: np.ndarray  # [H, W] float64
    per_image: float  # pixel mean of per_pixel


def _ordered_sum(values: np.ndarray, axis: int) -> np.ndarray:
    # Sort before reducing: the sum becomes a function of the multiset of
    # addends, so axis permutations cannot flip the last ulp.
    return np.sort(values, axis=axis).sum(axis=axis)


def _passes64(stack: PredictionStack) -> np.ndarray:
    return np.ascontiguousarray(stack.passes, dtype=np.float64)


def _entropy_map(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in bits over axis 0 of a [C, ...] probability array."""
    logs = np.log2(np.clip(probs, LOG_EPS, 1.0))
    return -_ordered_sum(probs * logs, axis=0)


def image_uncertainty(per_pixel: np.ndarray) -> float:
    """Per-image uncertainty: the mean over all pixels of a per-pixel map."""
    arr = np.asarray(per_pixel, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("per-pixel map is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("per-pixel map contains non-finite values")
    return float(arr.sum(dtype=np.float64) / arr.size)


def _scores(measure: Measure, per_pixel: np.ndarray) -> UncertaintyScores:
    return UncertaintyScores(measure, per_pixel, image_uncertainty(per_pixel))


def mean_prediction(stack: PredictionStack) -> MeanPrediction:
    """Average the T passes per pixel; argmax ties go to the lowest class."""
    passes = _passes64(stack)
    probs = _ordered_sum(passes, axis=0) / stack.num_passes
    return MeanPrediction(probs=probs, predicted_class=np.argmax(probs, axis=0))


def vote_stats(stack: PredictionStack) -> VoteStats:
    votes = np.argmax(stack.passes, axis=1)  # [T, H, W]
    class_ids = np.arange(stack.num_classes)
    counts = (votes[:, None, :, :] == class_ids[None, :, None, None]).sum(axis=0)
    modal_class = np.argmax(counts, axis=0)
    modal_count = np.take_along_axis(counts, modal_class[None], axis=0)[0]
    return VoteStats(votes=votes, modal_class=modal_class, modal_count=modal_count)


def variation_ratio(stack: PredictionStack) -> UncertaintyScores:
    """Dispersion of the per-pass argmax votes around their modal class.

    1 - f/T where f is the modal vote count; 0 when all passes agree,
    at most 1 - 1/C at maximal dispersion.
    """
    stats = vote_stats(stack)
    per_pixel = 1.0 - stats.modal_count.astype(np.float64) / stack.num_passes
    return _scores(Measure.VARIATION_RATIO, per_pixel)


def total_variance(stack: PredictionStack) -> UncertaintyScores:
    """Sum over classes and passes of squared deviation from the mean, / T."""
    passes = _passes64(stack)
    probs = _ordered_sum(passes, axis=0) / stack.num_passes
    sq = np.square(passes - probs[None])
    t, c, h, w = sq.shape
    per_pixel = _ordered_sum(sq.reshape(t * c, h, w), axis=0) / stack.num_passes
    return _scores(Measure.TOTAL_VARIANCE, per_pixel)


def predictive_entropy(stack: PredictionStack, normalized: bool = True) -> UncertaintyScores:
    """Shannon entropy (bits) of the mean prediction, optionally / log2(C)."""
    mean = mean_prediction(stack)
    per_pixel = _entropy_map(mean.probs)
    if normalized:
        per_pixel = per_pixel / np.log2(stack.num_classes)
    return _scores(Measure.PREDICTIVE_ENTROPY, per_pixel)


def mutual_information(stack: PredictionStack, normalized: bool = True) -> UncertaintyScores:
    """Entropy of the mean prediction minus the mean per-pass entropy.

    High where passes disagree confidently; 0 when all passes are identical.
    Tiny negatives from float noise (>= -1e-6) are clamped to 0.
    """
    passes = _passes64(stack)
    probs = _ordered_sum(passes, axis=0) / stack.num_passes
    entropy_of_mean = _entropy_map(probs)
    per_pass = -_ordered_sum(passes * np.log2(np.clip(passes, LOG_EPS, 1.0)), axis=1)
    # Mean of per-pass differences, not difference of means: when all passes
    # are identical the terms cancel bitwise and the result is exactly 0.
    per_pixel = _ordered_sum(entropy_of_mean[None] - per_pass, axis=0) / stack.num_passes
    if normalized:
        per_pixel = per_pixel / np.log2(stack.num_classes)
    low = float(per_pixel.min())
    if low < MI_NEGATIVE_SLACK:
        raise ValueError(f"mutual information fell below float-noise slack: {low:.3e}")
    per_pixel = np.maximum(per_pixel, 0.0)
    return _scores(Measure.MUTUAL_INFORMATION, per_pixel)


def margin_of_confidence(stack: PredictionStack) -> UncertaintyScores:
    """Mean per-pass gap between the predicted class and the runner-up.

    The predicted class is fixed per pixel from the mean prediction.  This is
    a confidence (1 = certain); acquisition_score applies the (1 - M) / 2
    flip so all measures rank "higher = more uncertain".
    """
    passes = _passes64(stack)
    mean = mean_prediction(stack)
    idx = mean.predicted_class[None, None, :, :]
    predicted = np.take_along_axis(passes, idx, axis=1)[:, 0]
    others = passes.copy()
    np.put_along_axis(others, idx, -np.inf, axis=1)
    runner_up = others.max(axis=1)
    per_pixel = _ordered_sum(predicted - runner_up, axis=0) / stack.num_passes
    return _scores(Measure.MARGIN, per_pixel)


_DISPATCH = {
    Measure.VARIATION_RATIO: variation_ratio,
    Measure.TOTAL_VARIANCE: total_variance,
    Measure.PREDICTIVE_ENTROPY: predictive_entropy,
    Measure.MUTUAL_INFORMATION: mutual_information,
    Measure.MARGIN: margin_of_confidence,
}


def compute(stack: PredictionStack, measure: Measure, normalized: bool = True) -> UncertaintyScores:
    """Compute one measure for a stack (entropy/MI honor `normalized`)."""
    measure = Measure(measure)
    if measure in (Measure.PREDICTIVE_ENTROPY, Measure.MUTUAL_INFORMATION):
        return _DISPATCH[measure](stack, normalized=normalized)
    return _DISPATCH[measure](stack)


def acquisition_value(scores: UncertaintyScores) -> float:
    """Per-image acquisition score, oriented so higher means more uncertain."""
    if scores.measure is Measure.MARGIN:
        return (1.0 - scores.per_image) / 2.0
    return scores.per_image


def acquisition_score(stack: PredictionStack, measure: Measure) -> float:
    return acquisition_value(compute(stack, measure, normalized=True))


def measure_bounds(measure: Measure, num_classes: int, normalized: bool = True) -> tuple[float, float]:
    """Valid [low, high] range of a measure's per-pixel values."""
    measure = Measure(measure)
    if measure is Measure.VARIATION_RATIO:
        return 0.0, 1.0 - 1.0 / num_classes
    if measure is Measure.TOTAL_VARIANCE:
        return 0.0, float("inf")
    if measure is Measure.MARGIN:
        return -1.0, 1.0
    top = 1.0 if normalized else float(np.log2(num_classes))
    return 0.0, top
