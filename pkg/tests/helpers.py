"""Shared test utilities: random stack generators."""

import numpy as np

from mcdal.metrics import PredictionStack


def random_stack(rng, t=None, c=None, h=None, w=None, kind=None, image_id="img"):
    """A random valid PredictionStack; `kind` picks the generating process."""
    t = int(t if t is not None else rng.integers(1, 9))
    c = int(c if c is not None else rng.integers(2, 6))
    h = int(h if h is not None else rng.integers(1, 5))
    w = int(w if w is not None else rng.integers(1, 5))
    kind = kind or rng.choice(["dirichlet", "softmax", "spiky"])
    if kind == "dirichlet":
        alpha = np.full(c, float(rng.uniform(0.2, 3.0)))
        probs = rng.dirichlet(alpha, size=(t, h, w)).transpose(0, 3, 1, 2)
    elif kind == "softmax":
        # Correlated passes: one base logit map plus per-pass noise.
        base = rng.normal(0.0, 2.0, size=(1, c, h, w))
        noise = rng.normal(0.0, float(rng.uniform(0.0, 1.5)), size=(t, c, h, w))
        logits = base + noise
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
    else:  # spiky: near one-hot passes with occasional disagreement
        winners = rng.integers(0, c, size=(t, h, w))
        probs = np.full((t, c, h, w), 1e-6)
        np.put_along_axis(probs, winners[:, None], 1.0, axis=1)
        probs /= probs.sum(axis=1, keepdims=True)
    return PredictionStack(image_id, probs.astype(np.float32))


def stack_from_pixel(passes_per_pixel, image_id="px"):
    """Build a 1x1 stack from a [T][C] list of per-pass class probabilities."""
    arr = np.asarray(passes_per_pixel, dtype=np.float64)[:, :, None, None]
    return PredictionStack(image_id, arr)
