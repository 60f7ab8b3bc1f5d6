"""Central finite-difference checks of the tape's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from algnet.tensor import Tensor, backward, get_tape, no_grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    checked: int = 0
    worst: str = ""
    skipped: int = 0
    details: list[tuple[str, float]] = field(default_factory=list)

    def update(self, label: str, analytic, numeric, floor: float = 1e-8) -> None:
        err = float(np.max(relative_error(analytic, numeric, floor), initial=0.0))
        self.checked += int(np.size(analytic))
        self.details.append((label, err))
        if err >= self.max_rel_error:
            self.max_rel_error, self.worst = err, label

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def _evaluate(fn: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(fn().data)


def analytic_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    get_tape().reset()
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    loss = fn()
    backward(loss)
    return [t.grad.copy() for t in inputs]


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    names: Sequence[str] | None = None,
    h: float = 1e-4,
    max_entries: int | None = None,
    directions: int = 0,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    kink_tol: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    Every entry is checked unless ``max_entries`` caps the number of sampled
    coordinates per input; ``directions`` adds random directional-derivative
    checks over all inputs jointly. ``floor`` bounds the relative-error
    denominator from below, so gradients under the finite-difference
    resolution are compared absolutely. With ``kink_tol`` set, a sampled
    coordinate whose forward and backward one-sided slopes differ by more
    than that relative amount straddles a non-differentiable point (a ReLU
    or abs kink within h); it is counted in ``skipped`` and another
    coordinate of the same input is drawn instead.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
    grads = analytic_gradients(fn, inputs)
    report = GradCheckReport()
    for t, g, name in zip(inputs, grads, names):
        flat = t.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            order, want = np.arange(flat.size), flat.size
        else:
            order, want = rng.permutation(flat.size), max_entries
        kept, numeric = [], []
        f0 = _evaluate(fn) if kink_tol is not None else 0.0
        for i in order:
            if len(kept) == want:
                break
            orig = flat[i]
            flat[i] = orig + h
            fp = _evaluate(fn)
            flat[i] = orig - h
            fm = _evaluate(fn)
            flat[i] = orig
            if kink_tol is not None and want < flat.size:
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > kink_tol * max(abs(right), abs(left), floor):
                    report.skipped += 1
                    continue
            kept.append(i)
            numeric.append((fp - fm) / (2 * h))
        idx = np.asarray(kept, dtype=np.intp)
        report.update(name, g.reshape(-1)[idx], np.asarray(numeric), floor)
    for k in range(directions):
        vs = [rng.standard_normal(t.shape) for t in inputs]
        # unit direction, so the perturbation really has length h
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        originals = [t.data.copy() for t in inputs]
        for t, v, o in zip(inputs, vs, originals):
            t.data[...] = o + h * v
        fp = _evaluate(fn)
        for t, v, o in zip(inputs, vs, originals):
            t.data[...] = o - h * v
        fm = _evaluate(fn)
        for t, o in zip(inputs, originals):
            t.data[...] = o
        report.update(f"direction{k}", analytic, (fp - fm) / (2 * h), floor)
    return report
