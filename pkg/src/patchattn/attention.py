"""Attention outputs from ANN fields, plus the dense reference.

Every function returns an ``(H_q, W_q, C_v)`` map. ``V`` is a map with
the key image's spatial extent; row ``j`` of the value matrix is the
pixel of ``V`` at key position ``j``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .annfield import EXACT_CAP, ANNField, OracleCapError, candidate_scores
from .core import PatchView, check_feature_map, check_patch_size
from .similarity import Metric, pairwise_scores


class Mode(str, enum.Enum):
    HARD = "hard"
    SOFT_KNN = "soft_knn"
    AGGREGATION = "aggregation"


class ModeError(ValueError):
    pass


#: Default softmax temperature for neg_l2 on [0, 1] images.
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class AttentionConfig:
    metric: Metric = Metric.NEG_L2
    temperature: float | None = DEFAULT_TEMPERATURE
    mode: Mode = Mode.SOFT_KNN
    patch_size: int = 7
    k: int = 3

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        object.__setattr__(self, "mode", Mode(self.mode))
        check_patch_size(self.patch_size)
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.mode is Mode.HARD:
            if self.k != 1:
                raise ModeError("hard attention uses exactly one candidate (k=1)")
            object.__setattr__(self, "temperature", None)
        elif self.temperature is None or not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def value_matrix(V, key_shape) -> np.ndarray:
    V = check_feature_map(V, name="V")
    if V.shape[:2] != tuple(key_shape):
        raise ValueError(f"V has spatial shape {V.shape[:2]}, keys have {tuple(key_shape)}")
    return V.reshape(-1, V.shape[2])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def full_attention(Q: PatchView, K: PatchView, V, metric="neg_l2", temperature=1.0, *,
                   stride: int = 1, force: bool = False, chunk: int = 2048) -> np.ndarray:
    """Dense softmax attention over every key (or every ``stride``-th key
    along both axes), computed in query chunks."""
    metric = Metric.parse(metric)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    Vm = value_matrix(V, K.shape)
    Km = K.matrix(stride)
    Vs = Vm.reshape(*K.shape, -1)[::stride, ::stride].reshape(Km.shape[0], -1)
    work = Q.n_patches * Km.shape[0]
    if work > EXACT_CAP and not force:
        raise OracleCapError(
            f"full attention needs {work} score evaluations, above the cap of {EXACT_CAP} "
            "(2**26); pass force=True to run anyway")
    Qm = Q.matrix()
    Km = np.asarray(Km, dtype=np.float64)
    kk = np.einsum("ij,ij->i", Km, Km)
    out = np.empty((Q.n_patches, Vs.shape[1]))
    for start in range(0, Q.n_patches, chunk):
        S = _dense_scores(np.asarray(Qm[start:start + chunk], dtype=np.float64), Km, kk, metric)
        S *= 1.0 / temperature
        S -= S.max(axis=1, keepdims=True)
        np.exp(S, out=S)
        out[start:start + chunk] = (S @ Vs) / S.sum(axis=1, keepdims=True)
    return out.reshape(*Q.shape, -1)


def _dense_scores(Qc, Km, kk, metric) -> np.ndarray:
    """``pairwise_scores`` with the key-side norms computed once by the caller."""
    if metric is Metric.DOT:
        return Qc @ Km.T
    qq = np.einsum("ij,ij->i", Qc, Qc)
    if metric is Metric.NEG_L2:
        S = Qc @ Km.T
        S *= 2.0
        S -= qq[:, None]
        S -= kk[None, :]
        return np.minimum(S, 0.0, out=S)
    return pairwise_scores(Qc, Km, metric)


def hard_attention(field: ANNField, V) -> np.ndarray:
    """Copy the value at each query's single match."""
    if field.k != 1:
        raise ModeError(f"hard attention needs a k=1 field, got k={field.k}")
    Vm = value_matrix(V, field.key_shape)
    return Vm[field.indices[:, 0]].reshape(*field.query_shape, -1)


def soft_knn_weights(Q: PatchView, K: PatchView, field: ANNField, temperature: float):
    S = candidate_scores(Q, K, field)
    return S, _softmax_rows(S / temperature)


def soft_knn_attention(Q: PatchView, K: PatchView, V, field: ANNField,
                       temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Softmax over each query's stored candidates, scores recomputed from ``Q`` and ``K``."""
    if field.k < 1:
        raise AssertionError("empty candidate list")
    Vm = value_matrix(V, field.key_shape)
    _, W = soft_knn_weights(Q, K, field, temperature)
    out = np.einsum("nk,nkc->nc", W, Vm[field.indices])
    return out.reshape(*field.query_shape, -1)


def aggregation_attention(Q: PatchView, K: PatchView, V, field: ANNField,
                          temperature: float = DEFAULT_TEMPERATURE, *,
                          _raw: bool = False) -> np.ndarray:
    """Softmax over the candidates voted by every spatial neighbour.

    Neighbour ``i'`` of query ``i`` (within the patch window) with match
    ``j'`` votes for key ``j = j' - (i' - i)`` with logit
    ``s(Q_i', K_j') / t``. Votes landing on the same ``j`` are kept as
    separate terms. ``_raw`` normalises the raw similarities instead of
    exponentiating them; it exists for comparison only.
    """
    Vm = value_matrix(V, field.key_shape)
    S = candidate_scores(Q, K, field)
    out = np.empty((field.n_queries, Vm.shape[1]))
    _kernels.aggregation_forward(S, field.indices, *field.query_shape, *field.key_shape,
                                 Q.radius, 1.0 / temperature, Vm, out, _raw)
    return out.reshape(*field.query_shape, -1)


def attend(Q: PatchView, K: PatchView, V, field: ANNField, config: AttentionConfig) -> np.ndarray:
    if config.mode is Mode.HARD:
        return hard_attention(field, V)
    if config.mode is Mode.SOFT_KNN:
        return soft_knn_attention(Q, K, V, field, config.temperature)
    return aggregation_attention(Q, K, V, field, config.temperature)
