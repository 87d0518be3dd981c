"""Approximate nearest-neighbour fields between two patch views.

A field stores, for every query pixel, up to ``k`` key indices sorted by
descending similarity together with their scores. Search follows the
PatchMatch scheme: random initialisation, then alternating jump-flood
propagation and shrinking-window random search.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numba
import numpy as np

from . import _kernels
from .core import PatchView
from .similarity import DegenerateInputError, Metric

#: Largest ``queries x keys`` product an exhaustive oracle accepts by default.
EXACT_CAP = 2**26


class ConfigurationError(ValueError):
    pass


class OracleCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchParams:
    n_iter: int = 5
    k: int = 3
    seed: int = 0
    window_max: int | None = None
    window_decay: float = 0.5
    metric: Metric = Metric.NEG_L2
    n_threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if self.n_iter < 0:
            raise ConfigurationError(f"n_iter must be >= 0, got {self.n_iter}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.window_decay < 1.0:
            raise ConfigurationError(f"window_decay must lie in (0, 1), got {self.window_decay}")
        if self.window_max is not None and self.window_max < 1:
            raise ConfigurationError(f"window_max must be >= 1, got {self.window_max}")
        if self.n_threads < 1:
            raise ConfigurationError(f"n_threads must be >= 1, got {self.n_threads}")

    def resolved_window(self, keys: PatchView) -> int:
        return self.window_max if self.window_max is not None else max(keys.shape)


@dataclass(frozen=True, eq=False)
class ANNField:
    """Per-query candidate lists.

    ``indices[i, c]`` is the linear key index ``y * key_width + x`` of the
    ``c``-th best candidate of query ``i``; ``scores[i, c]`` is its cached
    similarity. Rows are sorted by descending score.
    """

    indices: np.ndarray
    scores: np.ndarray
    query_shape: tuple[int, int]
    key_shape: tuple[int, int]
    metric: Metric = Metric.NEG_L2

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_queries(self) -> int:
        return self.indices.shape[0]

    def best(self) -> np.ndarray:
        return self.indices[:, 0]

    def best_scores(self) -> np.ndarray:
        return self.scores[:, 0]

    def positions(self) -> np.ndarray:
        """Candidate positions as an ``(n, k, 2)`` array of ``(x, y)``."""
        y, x = np.divmod(self.indices, self.key_shape[1])
        return np.stack([x, y], axis=-1)

    def copy(self) -> "ANNField":
        return replace(self, indices=self.indices.copy(), scores=self.scores.copy())

    def validate(self) -> None:
        """Raise ``AssertionError`` if a structural invariant is broken."""
        n_keys = self.key_shape[0] * self.key_shape[1]
        assert self.indices.shape == self.scores.shape
        assert self.n_queries == self.query_shape[0] * self.query_shape[1]
        assert np.all((self.indices >= 0) & (self.indices < n_keys)), "candidate out of bounds"
        srt = np.sort(self.indices, axis=1)
        assert not np.any(srt[:, 1:] == srt[:, :-1]), "duplicate candidate"
        assert np.all(self.scores[:, :-1] >= self.scores[:, 1:]), "scores not descending"

    def to_bytes(self) -> bytes:
        """Binary dump; see :data:`BINARY_LAYOUT`."""
        header = _HEADER.pack(_MAGIC, 1, *self.query_shape, *self.key_shape, self.k,
                              self.metric.code)
        rec = np.empty(self.indices.size, dtype=_RECORD)
        rec["query"] = np.repeat(np.arange(self.n_queries, dtype=np.uint32), self.k)
        rec["key"] = self.indices.ravel()
        rec["score"] = self.scores.ravel()
        return header + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ANNField":
        magic, version, hq, wq, hk, wk, k, code = _HEADER.unpack_from(data)
        if magic != _MAGIC or version != 1:
            raise ValueError("not an ANN field dump")
        rec = np.frombuffer(data, dtype=_RECORD, offset=_HEADER.size)
        if rec.size != hq * wq * k:
            raise ValueError(f"truncated field dump: {rec.size} records, expected {hq * wq * k}")
        metric = next(m for m in Metric if m.code == code)
        return cls(rec["key"].astype(np.int64).reshape(-1, k),
                   rec["score"].astype(np.float64).reshape(-1, k),
                   (hq, wq), (hk, wk), metric)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# query key score  query={self.query_shape} key={self.key_shape} "
                  f"k={self.k} metric={self.metric.value}\n")
        for q in range(self.n_queries):
            for c in range(self.k):
                buf.write(f"{q} {self.indices[q, c]} {float(self.scores[q, c])!r}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".txt":
            path.write_text(self.to_text())
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ANNField":
        return cls.from_bytes(Path(path).read_bytes())


_MAGIC = b"ANNF"
_HEADER = struct.Struct("<4s7I")
_RECORD = np.dtype([("query", "<u4"), ("key", "<u4"), ("score", "<f8")])

BINARY_LAYOUT = """\
little-endian; header = 4s magic 'ANNF', u32 version (1), u32 query height,
u32 query width, u32 key height, u32 key width, u32 k, u32 metric code
(0 dot, 1 neg_l2, 2 cosine); then height*width*k records of
(u32 query index, u32 key index, f64 score) in query order, best first."""


Hook = Callable[[str, int, ANNField], None]


def _operands(queries: PatchView, keys: PatchView, metric: Metric):
    if queries.patch_size != keys.patch_size:
        raise ConfigurationError("queries and keys must use the same patch size")
    if queries.channels != keys.channels:
        raise ConfigurationError(
            f"channel mismatch: queries have {queries.channels}, keys {keys.channels}")
    if metric is Metric.COSINE:
        qn = _patch_norms(queries)
        kn = _patch_norms(keys)
        if np.any(qn == 0.0) or np.any(kn == 0.0):
            raise DegenerateInputError("cosine similarity needs non-zero patches")
    else:
        qn = kn = np.ones((1, 1))
    return queries.padded, keys.padded, queries.patch_size, metric.code, qn, kn


def _patch_norms(view: PatchView) -> np.ndarray:
    m = view.matrix()
    return np.sqrt(np.einsum("ij,ij->i", m, m)).reshape(view.shape)


def _threads(n: int) -> bool:
    if n <= 1:
        return False
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return True


def _draw_key(rng: np.random.Generator) -> np.uint64:
    return np.uint64(rng.integers(0, 2**63, dtype=np.int64))


def _charge(counter, counts: np.ndarray) -> None:
    if counter is not None:
        counter.add(int(counts.sum()))


def init_random(queries: PatchView, keys: PatchView, params: SearchParams,
                rng: np.random.Generator, counter=None) -> ANNField:
    """Give every query ``k`` distinct, uniformly drawn key positions."""
    k = params.k
    if k > keys.n_patches:
        raise ConfigurationError(f"k={k} exceeds the number of key positions ({keys.n_patches})")
    Qpad, Kpad, p, code, qn, kn = _operands(queries, keys, params.metric)
    idx = np.empty((queries.n_patches, k), dtype=np.int64)
    sc = np.empty((queries.n_patches, k))
    counts = np.zeros(queries.n_patches, dtype=np.int64)
    kernel = _kernels.init_random_par if _threads(params.n_threads) else _kernels.init_random_seq
    kernel(Qpad, Kpad, p, code, qn, kn, *queries.shape, *keys.shape, k, _draw_key(rng),
           idx, sc, counts)
    _charge(counter, counts)
    if counter is not None:
        counter.observe_entries(idx.size)
    return ANNField(idx, sc, queries.shape, keys.shape, params.metric)


def propagate_jumpflood(queries: PatchView, keys: PatchView, field: ANNField,
                        n_threads: int = 1, counter=None) -> ANNField:
    """One jump-flood pass with offsets 1, 2, 4, 8 in the four axis directions.

    Single-threaded passes read the field as updated so far in raster
    order. Multi-threaded passes read a snapshot taken at pass start.
    """
    Qpad, Kpad, p, code, qn, kn = _operands(queries, keys, field.metric)
    out = field.copy()
    counts = np.zeros(field.n_queries, dtype=np.int64)
    if _threads(n_threads):
        _kernels.propagate_par(Qpad, Kpad, p, code, qn, kn, *queries.shape, *keys.shape,
                               out.indices, out.scores, field.indices.copy(), counts)
    else:
        _kernels.propagate_seq(Qpad, Kpad, p, code, qn, kn, *queries.shape, *keys.shape,
                               out.indices, out.scores, out.indices, counts)
    _charge(counter, counts)
    return out


def random_search(queries: PatchView, keys: PatchView, field: ANNField, params: SearchParams,
                  rng: np.random.Generator, counter=None) -> ANNField:
    """Probe one random position per candidate in windows of radius
    ``window_max * decay**i`` until the radius drops below one pixel."""
    Qpad, Kpad, p, code, qn, kn = _operands(queries, keys, field.metric)
    out = field.copy()
    counts = np.zeros(field.n_queries, dtype=np.int64)
    kernel = (_kernels.random_search_par if _threads(params.n_threads)
              else _kernels.random_search_seq)
    kernel(Qpad, Kpad, p, code, qn, kn, *queries.shape, *keys.shape, out.indices, out.scores,
           _draw_key(rng), float(params.resolved_window(keys)), float(params.window_decay),
           counts)
    _charge(counter, counts)
    return out


def run(queries: PatchView, keys: PatchView, params: SearchParams | None = None, *,
        hook: Hook | None = None, counter=None) -> ANNField:
    """Random init followed by ``n_iter`` rounds of propagation + random search.

    ``hook(stage, iteration, field)`` is called after every stage, with
    stage one of ``"init"``, ``"propagate"``, ``"random_search"``.
    """
    params = params or SearchParams()
    rng = np.random.default_rng(params.seed)
    field = init_random(queries, keys, params, rng, counter=counter)
    if hook is not None:
        hook("init", 0, field)
    for it in range(params.n_iter):
        field = propagate_jumpflood(queries, keys, field, params.n_threads, counter=counter)
        if hook is not None:
            hook("propagate", it, field)
        field = random_search(queries, keys, field, params, rng, counter=counter)
        if hook is not None:
            hook("random_search", it, field)
    return field


def exact_nn(queries: PatchView, keys: PatchView, k: int = 1, metric="neg_l2", *,
             force: bool = False, n_threads: int = 1) -> ANNField:
    """Exhaustive top-``k``; ties go to the smaller key index."""
    metric = Metric.parse(metric)
    if k < 1 or k > keys.n_patches:
        raise ConfigurationError(f"k must lie in [1, {keys.n_patches}], got {k}")
    work = queries.n_patches * keys.n_patches
    if work > EXACT_CAP and not force:
        raise OracleCapError(
            f"exhaustive search needs {work} score evaluations, above the cap of "
            f"{EXACT_CAP} (2**26); pass force=True to run anyway")
    Qpad, Kpad, p, code, qn, kn = _operands(queries, keys, metric)
    idx = np.empty((queries.n_patches, k), dtype=np.int64)
    sc = np.empty((queries.n_patches, k))
    kernel = _kernels.exact_topk_par if _threads(n_threads) else _kernels.exact_topk_seq
    kernel(Qpad, Kpad, p, code, qn, kn, *queries.shape, *keys.shape, idx, sc)
    return ANNField(idx, sc, queries.shape, keys.shape, metric)


def candidate_scores(queries: PatchView, keys: PatchView, field: ANNField) -> np.ndarray:
    """Recompute ``s(Q_i, K_j)`` for every stored candidate."""
    Qpad, Kpad, p, code, qn, kn = _operands(queries, keys, field.metric)
    return _kernels.gather_scores(Qpad, Kpad, p, code, qn, kn, queries.width, keys.width,
                                  field.indices)
