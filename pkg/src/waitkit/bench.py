"""Forward-cost benchmark: recompute baseline vs incremental pipeline.

Reports median single-threaded wall time and the exact multiply-accumulate
tally of one forward pass per variant, at matched model dimensions. Only
matrix-product MACs are counted (the dominant term).
"""

from __future__ import annotations

import csv
import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import no_grad
from .training import ConfigError, N_RESERVED
from .transformer import (
    IncrementalModel,
    TeacherModel,
    average_embedding_states,
    encode_bidirectional,
    encode_waitk_recompute,
)
from .waitk import WaitKSchedule

VARIANTS = ("baseline_bi", "incremental_ael", "offline")

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def _single_thread():
    if threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=1)


@dataclass
class BenchResult:
    variant: str
    n: int
    t_steps: int
    k: int
    median_secs: float
    mac_count: int
    trials: int


def _make_runner(variant, cfg, n, k, t_steps, batch, seed):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(N_RESERVED, cfg.src_vocab, size=(batch, n))
    schedule = WaitKSchedule(k, n)
    if variant == "offline":
        model = TeacherModel(cfg, seed=seed)

        def run():
            for row in tokens:
                encode_bidirectional(model.encoder, row)

    elif variant == "baseline_bi":
        model = TeacherModel(cfg, seed=seed)

        def run():
            for row in tokens:
                encode_waitk_recompute(model.encoder, row, schedule, t_steps)

    elif variant == "incremental_ael":
        model = IncrementalModel(cfg, seed=seed)

        def run():
            for row in tokens:
                z, e = model.encoder.forward(row[None, :], causal=True)
                states = average_embedding_states(
                    T.tslice(e, (0,)), T.tslice(z, (0,)), model.bridge_w
                )
                states.full_h()

    else:
        raise ConfigError(
            f"unknown variant {variant!r}, expected one of {VARIANTS}"
        )
    return run


def bench_forward(variant, n, k, cfg, t_steps=None, batch=1, trials=5,
                  seed=0):
    """Median wall time over trials plus the MAC count of one forward pass.

    One warm-up run precedes timing; timing runs are pinned to a single
    BLAS thread when thread control is available.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    t_steps = n if t_steps is None else t_steps
    run = _make_runner(variant, cfg, n, k, t_steps, batch, seed)
    with no_grad():
        run()  # warm-up
        T.mac_counter.reset()
        run()
        macs = T.mac_counter.count
        times = []
        with _single_thread():
            for _ in range(trials):
                start = time.perf_counter()
                run()
                times.append(time.perf_counter() - start)
    return BenchResult(
        variant=variant,
        n=n,
        t_steps=t_steps,
        k=k,
        median_secs=float(np.median(times)),
        mac_count=macs,
        trials=trials,
    )


def scaling_sweep(n_values, k_values, cfg, csv_path=None, trials=5, seed=0):
    """BenchResult rows for all variants over the n x k grid (t_steps = n)."""
    results = []
    for n in n_values:
        for k in k_values:
            for variant in VARIANTS:
                results.append(
                    bench_forward(variant, n, k, cfg, trials=trials, seed=seed)
                )
    if csv_path is not None:
        write_bench_csv(csv_path, results)
    return results


def write_bench_csv(path, results):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "n", "T", "k", "median_secs", "mac_count"])
        for r in results:
            writer.writerow(
                [r.variant, r.n, r.t_steps, r.k, f"{r.median_secs:.6f}",
                 r.mac_count]
            )
