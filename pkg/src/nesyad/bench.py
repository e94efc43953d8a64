"""Per-window latency of the distilled detector versus DDPM profile scoring."""
from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rff
from .ddpm import DdpmModel, reconstruction_profile
from .metrics import percentiles_ns
from .signals import Window

# desk budget chosen here; no external real-time deadline is implied
RFF_BUDGET_NS = 1_000_000


@dataclass
class BenchmarkReport:
    rff_ns: dict[str, int]
    ddpm_ns: dict[str, int]
    speedup: float
    iterations: int
    warmup: int
    host: str
    rff_samples: np.ndarray
    ddpm_samples: np.ndarray

    def to_text(self) -> str:
        lines = [f"host: {self.host}",
                 f"iterations: {self.iterations} (warmup {self.warmup} excluded)"]
        for name, q in (("rff", self.rff_ns), ("ddpm", self.ddpm_ns)):
            lines.append(f"{name}: " + " ".join(f"{k}={v}ns" for k, v in q.items()))
        lines.append(f"speedup (ddpm_p50 / rff_p50): {self.speedup:.1f}x")
        verdict = "within" if self.rff_ns["p50"] < RFF_BUDGET_NS else "over"
        lines.append(f"rff p50 {verdict} the 1 ms desk budget (artifact-defined)")
        return "\n".join(lines)


def host_description() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} "
            f"{platform.system()} python {platform.python_version()} numpy {np.__version__}")


def _time(fn, items: Sequence, iterations: int, warmup: int) -> np.ndarray:
    n = len(items)
    for i in range(warmup):
        fn(items[i % n])
    out = np.empty(iterations, dtype=np.int64)
    clock = time.perf_counter_ns
    for i in range(iterations):
        item = items[i % n]
        t0 = clock()
        fn(item)
        out[i] = clock() - t0
    return out


def run_benchmark(clf: rff.DistilledClassifier, model: DdpmModel, windows: Sequence[Window],
                  iterations: int = 10_000, warmup: int = 1_000, seed: int = 0) -> BenchmarkReport:
    """Time both paths on the same normalized windows."""
    if model.profile is None:
        raise ValueError("DDPM checkpoint carries no profile statistics; run score first")
    flats = [w.flat().copy() for w in windows]
    rff_t = _time(lambda x: rff.predict_prob(x, clf), flats, iterations, warmup)
    ddpm_t = _time(lambda w: reconstruction_profile(w, model.net, model.schedule, model.profile, seed),
                   list(windows), iterations, warmup)
    rq, dq = percentiles_ns(rff_t), percentiles_ns(ddpm_t)
    return BenchmarkReport(rq, dq, dq["p50"] / max(rq["p50"], 1), iterations, warmup,
                           host_description(), rff_t, ddpm_t)
