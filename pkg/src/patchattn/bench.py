"""Closed-form memory/compute models and measured search counters."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .annfield import SearchParams, run
from .core import PatchView

BYTES_PER_ENTRY = 4

METHODS = ("full", "psal_k", "psal_aggreg", "local")

COMPLEXITY = {
    "full": "O(n^2)",
    "psal_k": "O(kn)",
    "psal_aggreg": "O(p^2 n)",
    "local": "O(w^2 n)",
}


@dataclass(frozen=True)
class MemoryModel:
    method: str
    n: int
    k: int = 3
    p: int = 7
    w: int = 50
    d: int = 7 * 7 * 16
    bytes_per_entry: int = BYTES_PER_ENTRY

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("n", "k", "p", "w", "d", "bytes_per_entry"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def model_bytes(model: MemoryModel) -> int:
    """Bytes held by the attention matrix (or candidate table) of each method."""
    entries = {
        "full": model.n * model.n,
        "psal_k": model.k * model.n,
        "psal_aggreg": model.p * model.p * model.n,
        "local": model.w * model.w * model.n,
    }[model.method]
    return model.bytes_per_entry * entries


def search_rounds(window_max: int, decay: float = 0.5) -> int:
    """Random-search probes per candidate for radii ``window_max * decay**i >= 1``."""
    return math.floor(math.log(window_max) / math.log(1.0 / decay) + 1e-12) + 1


def max_score_evaluations(n: int, k: int, n_iter: int, window_max: int,
                          decay: float = 0.5) -> int:
    """Upper bound on score evaluations of one search run.

    Init costs ``k`` per query; each propagation pass at most ``16 k``
    (4 directions x 4 jump lengths x k candidates); each random search
    at most ``k`` probes per round.
    """
    per_iter = 16 * k + k * search_rounds(window_max, decay)
    return n * (k + n_iter * per_iter)


def model_flops(model: MemoryModel, n_iter: int = 5) -> int:
    """Multiply-adds for the score computations, counted as 2 flops each."""
    if model.method == "full":
        evals = model.n * model.n
    elif model.method == "local":
        evals = model.w * model.w * model.n
    else:
        side = max(1, math.isqrt(model.n))
        evals = max_score_evaluations(model.n, model.k, n_iter, side)
    return 2 * model.d * evals


@dataclass
class OpCounter:
    score_evaluations: int = 0
    peak_entries: int = 0

    def add(self, evaluations: int) -> None:
        self.score_evaluations += evaluations

    def observe_entries(self, entries: int) -> None:
        self.peak_entries = max(self.peak_entries, entries)

    def merge(self, other: "OpCounter") -> "OpCounter":
        return OpCounter(self.score_evaluations + other.score_evaluations,
                         max(self.peak_entries, other.peak_entries))


def count_ops(queries: PatchView, keys: PatchView, params: SearchParams | None = None,
              ) -> OpCounter:
    counter = OpCounter()
    run(queries, keys, params, counter=counter)
    return counter


def human_bytes(n: int, system: str = "si") -> str:
    base, units = ((1000, ["B", "kB", "MB", "GB", "TB"]) if system == "si"
                   else (1024, ["B", "KiB", "MiB", "GiB", "TiB"]))
    value = float(n)
    unit = units[0]
    for unit in units:
        if value < base or unit == units[-1]:
            break
        value /= base
    if unit == units[0]:
        return f"{int(value)} B"
    return f"{value:.3g} {unit}"


def bench_rows(sides, k: int = 3, p: int = 7, w: int = 50):
    """Rows of ``(method, n, bytes, si, iec, complexity)`` for square images."""
    rows = []
    for side in sides:
        n = side * side
        for method in METHODS:
            b = model_bytes(MemoryModel(method, n, k=k, p=p, w=w))
            rows.append((method, n, b, human_bytes(b, "si"), human_bytes(b, "iec"),
                         COMPLEXITY[method]))
    return rows
