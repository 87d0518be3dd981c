"""Patch similarity functions. Higher always means more similar."""
from __future__ import annotations

import enum

import numpy as np


class DegenerateInputError(ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class Metric(str, enum.Enum):
    DOT = "dot"
    NEG_L2 = "neg_l2"
    COSINE = "cosine"

    @classmethod
    def parse(cls, value) -> "Metric":
        if isinstance(value, Metric):
            return value
        aliases = {"l2": cls.NEG_L2, "neg_l2": cls.NEG_L2, "dot": cls.DOT, "cosine": cls.COSINE}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown metric {value!r}; expected one of dot, l2, cosine") from None

    @property
    def code(self) -> int:
        """Integer tag used by the compiled kernels."""
        return _CODES[self]


_CODES = {Metric.DOT: 0, Metric.NEG_L2: 1, Metric.COSINE: 2}


def _pair(q, k):
    q = np.asarray(q, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float64).ravel()
    if q.shape != k.shape or q.size == 0:
        raise ValueError(f"patch vectors must be non-empty and equal length, got {q.size} and {k.size}")
    return q, k


def _norms(q, k):
    nq = np.sqrt(q @ q)
    nk = np.sqrt(k @ k)
    if nq == 0.0 or nk == 0.0:
        raise DegenerateInputError("cosine similarity is undefined for a zero vector")
    return nq, nk


def score(q, k, metric="neg_l2") -> float:
    q, k = _pair(q, k)
    metric = Metric.parse(metric)
    if metric is Metric.DOT:
        return float(q @ k)
    if metric is Metric.NEG_L2:
        diff = q - k
        return float(-(diff @ diff))
    nq, nk = _norms(q, k)
    return float((q @ k) / (nq * nk))


def score_grad(q, k, metric="neg_l2") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ds/dq, ds/dk)``."""
    q, k = _pair(q, k)
    metric = Metric.parse(metric)
    if metric is Metric.DOT:
        return k.copy(), q.copy()
    if metric is Metric.NEG_L2:
        diff = q - k
        return -2.0 * diff, 2.0 * diff
    nq, nk = _norms(q, k)
    s = (q @ k) / (nq * nk)
    return k / (nq * nk) - s * q / nq**2, q / (nq * nk) - s * k / nk**2


def pairwise_scores(Qm: np.ndarray, Km: np.ndarray, metric="neg_l2") -> np.ndarray:
    """Dense ``(m, n)`` score matrix between patch rows.

    Uses the Gram expansion, so neg_l2 carries rounding of order
    ``1e-15 * (|q|^2 + |k|^2)``.
    """
    metric = Metric.parse(metric)
    Qm = np.asarray(Qm, dtype=np.float64)
    Km = np.asarray(Km, dtype=np.float64)
    G = Qm @ Km.T
    if metric is Metric.DOT:
        return G
    if metric is Metric.NEG_L2:
        qq = np.einsum("ij,ij->i", Qm, Qm)
        kk = np.einsum("ij,ij->i", Km, Km)
        return np.minimum(2.0 * G - qq[:, None] - kk[None, :], 0.0)
    nq = np.sqrt(np.einsum("ij,ij->i", Qm, Qm))
    nk = np.sqrt(np.einsum("ij,ij->i", Km, Km))
    if np.any(nq == 0.0) or np.any(nk == 0.0):
        raise DegenerateInputError("cosine similarity is undefined for a zero vector")
    return G / nq[:, None] / nk[None, :]
