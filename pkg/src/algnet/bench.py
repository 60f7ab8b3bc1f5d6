"""Timing and agreement of the scan evaluation strategies."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from algnet.ssm import (DiscreteStep, causal_conv, discretize, parallel_scan_output, sequential_scan,
                        ssm_conv_kernel)

MODES = ("sequential", "parallel", "conv")


@dataclass
class BenchRow:
    mode: str
    k: int
    seconds: float
    deviation: float


def max_relative_deviation(y: np.ndarray, ref: np.ndarray) -> float:
    """Normwise: largest absolute difference over the largest reference magnitude."""
    scale = float(np.max(np.abs(ref)))
    diff = float(np.max(np.abs(np.asarray(y, np.float64) - np.asarray(ref, np.float64))))
    return diff / scale if scale > 0 else diff


def scan_problem(k: int, state: int, channels: int, time_invariant: bool, dtype, seed: int = 0):
    """Random SSM inputs for one length-``k`` sequence, batch 1."""
    rng = np.random.default_rng([seed, k, state, channels])
    x = rng.standard_normal((1, k, channels))
    a = -np.exp(rng.uniform(np.log(0.5), np.log(state), size=(channels, state)))
    if time_invariant:
        delta = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(channels, 1)))
        b = rng.standard_normal((channels, state))
        C = rng.standard_normal(state)
        a_bar, b_bar = discretize(a, b, delta)
        step = DiscreteStep(np.broadcast_to(a_bar, (1, k, channels, state)).astype(dtype),
                            (b_bar[None, None] * x[..., None]).astype(dtype))
        Cs = np.broadcast_to(C, (1, k, state)).astype(dtype)
        return step, Cs, x.astype(dtype), (a_bar, b_bar, C)
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(1, k, channels)))
    Bm = rng.standard_normal((1, k, state))
    Cs = rng.standard_normal((1, k, state))
    a_bar, b_bar = discretize(a[None, None], Bm[:, :, None, :], delta[..., None])
    step = DiscreteStep(a_bar.astype(dtype), (b_bar * x[..., None]).astype(dtype))
    return step, Cs.astype(dtype), x.astype(dtype), None


def run_mode(mode: str, step, C, x, ti_params, chunk=None) -> np.ndarray:
    if mode == "sequential":
        return sequential_scan(step, C)
    if mode == "parallel":
        return parallel_scan_output(step, C, chunk=chunk)
    if mode == "conv":
        if ti_params is None:
            raise ValueError("conv mode needs time-invariant parameters; a selective SSM has no convolution form")
        a_bar, b_bar, Cv = ti_params
        kernel = ssm_conv_kernel(a_bar, b_bar, Cv, x.shape[1])        # (D, k)
        y = causal_conv(np.moveaxis(x, 1, -1), kernel)                 # (1, D, k)
        return np.moveaxis(y, -1, 1).astype(x.dtype)
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def bench_scan(ks: Sequence[int], state: int, channels: int, modes: Sequence[str],
               time_invariant: bool = False, repeats: int = 5, dtype=np.float32) -> list[BenchRow]:
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown modes {bad}; choose from {MODES}")
    if "conv" in modes and not time_invariant:
        raise ValueError("conv mode requires --time-invariant; the selective SSM has no convolution form")
    if repeats < 1 or min(ks, default=1) < 1 or state < 1 or channels < 1:
        raise ValueError("k, state, channels and repeats must be positive")
    rows = []
    for k in ks:
        step, C, x, ti = scan_problem(k, state, channels, time_invariant, dtype)
        ref = sequential_scan(step, C)
        for mode in modes:
            run_mode(mode, step, C, x, ti)  # warm-up (numba compilation)
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                y = run_mode(mode, step, C, x, ti)
                best = min(best, time.perf_counter() - t0)
            rows.append(BenchRow(mode, k, best, max_relative_deviation(y, ref)))
    return rows


def bench_table(rows: Sequence[BenchRow]) -> str:
    lines = ["mode\tk\tseconds\tmax_rel_dev"]
    lines += [f"{r.mode}\t{r.k}\t{r.seconds:.6e}\t{r.deviation:.3e}" for r in rows]
    return "\n".join(lines) + "\n"
