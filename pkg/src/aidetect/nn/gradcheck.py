"""Central finite-difference checks of analytic gradients (float64)."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import Dropout, Layer, SoftmaxCrossEntropy

# gradients below this magnitude are compared absolutely. Float64 central
# differences at h = 1e-5 carry about 1e-11 of rounding noise, which the
# floor turns into a relative error near 1e-5; vanishing LSTM gradients
# through long series routinely fall to 1e-10 and below.
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    checked: int = 0


def rel_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _prepare(layer: Layer) -> Layer:
    layer = copy.deepcopy(layer).astype(np.float64)
    layer.train()
    for _, sub in layer.named_layers():
        if isinstance(sub, Dropout):
            sub.reuse_mask = True
    return layer


def _entries(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def central_difference(loss, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = loss()
    flat[i] = orig - h
    down = loss()
    flat[i] = orig
    return (up - down) / (2 * h)


def _robust_difference(loss, flat, i, h, scale, min_h=1e-8) -> float:
    """Central difference, halving the step while it straddles a kink.

    On a smooth stretch the estimates at ``h`` and ``h / 2`` agree to
    O(h^2) plus rounding noise of order ``eps * scale / h``; when they
    disagree by more, a ReLU or max-pool switch lies inside the stencil and
    the step is shrunk until it no longer does.
    """
    coarse = central_difference(loss, flat, i, h)
    while h > min_h:
        fine = central_difference(loss, flat, i, h / 2)
        noise = 1024 * np.finfo(np.float64).eps * scale / h
        if abs(coarse - fine) <= 1e-6 * max(abs(coarse), abs(fine)) + noise:
            return coarse
        coarse, h = fine, h / 2
    return coarse


def _sweep(loss, named, h, limit, rng, report: GradCheckReport) -> None:
    scale = max(abs(loss()), 1.0)
    for name, data, analytic in named:
        flat, aflat = data.reshape(-1), analytic.reshape(-1)
        worst = 0.0
        for i in _entries(flat.size, limit, rng):
            worst = max(worst, rel_error(aflat[i], _robust_difference(loss, flat, i, h, scale)))
            report.checked += 1
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)


def grad_check(
    model: Layer,
    images: np.ndarray | None,
    series: np.ndarray | None,
    labels: np.ndarray,
    h: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare every parameter tensor's backprop gradient with central differences.

    The loss is the mean softmax cross-entropy of the model's logits. With
    ``max_entries`` set, that many randomly chosen entries per tensor are
    probed instead of all of them. The model is copied to float64 first and
    left untouched.

    The default step is wider than the per-layer one: whole-model
    gradients can be as small as 1e-7, where the rounding noise of an
    h = 1e-5 difference through hundreds of operations is no longer
    negligible. Kinks inside the wider stencil are handled by step halving.
    """
    m = _prepare(model)
    ce = SoftmaxCrossEntropy()
    img = None if images is None else np.asarray(images, dtype=np.float64)
    ser = None if series is None else np.asarray(series, dtype=np.float64)

    def loss() -> float:
        return ce.forward(m.forward(img, ser), labels)

    m.zero_grad()
    loss()
    m.backward(ce.backward())
    named = [(n, p.data, p.grad.copy()) for n, p in m.named_params()]
    report = GradCheckReport(0.0)
    _sweep(loss, named, h, max_entries, np.random.default_rng(seed), report)
    return report


def layer_grad_check(
    layer: Layer, x: np.ndarray, h: float = 1e-5, max_entries: int | None = None, seed: int = 0
) -> GradCheckReport:
    """Check one layer's input and parameter gradients.

    Uses the scalar loss ``sum(forward(x) * r)`` for a fixed random ``r``,
    so the upstream gradient is ``r`` itself.
    """
    lay = _prepare(layer)
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(lay.forward(x).shape)

    def loss() -> float:
        return float((lay.forward(x) * r).sum())

    lay.zero_grad()
    loss()
    dx = lay.backward(r)
    named = [(n, p.data, p.grad.copy()) for n, p in lay.named_params()]
    if dx is not None:
        named.insert(0, ("input", x, np.asarray(dx)))
    report = GradCheckReport(0.0)
    _sweep(loss, named, h, max_entries, rng, report)
    return report
