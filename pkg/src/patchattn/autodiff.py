"""Reverse-mode gradients for the attention layers and a 3x3 convolution.

Candidate indices are constants during backward: gradients reach ``Q``
and ``K`` only through the similarity scores of the stored candidates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .annfield import ANNField, _operands, candidate_scores
from .attention import (aggregation_attention, hard_attention, soft_knn_attention,
                        soft_knn_weights, value_matrix)
from .core import PatchView, check_feature_map, fold_padding


class ContractError(ValueError):
    """Shapes passed to a backward function do not match the forward pass."""


@dataclass
class GradBundle:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(self.dQ + other.dQ, self.dK + other.dK, self.dV + other.dV)


class Tape:
    """Records backward closures during a forward pass and replays them once.

    Each entry maps an output name to the names of its inputs;
    gradients reaching the same name from several consumers are summed.
    """

    def __init__(self):
        self._entries: list[tuple[tuple[str | None, ...], str, Callable]] = []
        self._consumed = False

    def record(self, inputs: Sequence[str | None], output: str,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        if self._consumed:
            raise RuntimeError("tape already replayed; record a new forward pass")
        self._entries.append((tuple(inputs), output, backward))

    def backward(self, seeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        if self._consumed:
            raise RuntimeError("tape already replayed")
        self._consumed = True
        grads = dict(seeds)
        for inputs, output, fn in reversed(self._entries):
            g = grads.get(output)
            if g is None:
                continue
            for name, gi in zip(inputs, fn(g)):
                if name is None or gi is None:
                    continue
                grads[name] = grads[name] + gi if name in grads else gi
        return grads


def _upstream(upstream, query_shape, n_channels) -> np.ndarray:
    U = np.asarray(upstream, dtype=np.float64)
    expected = (*query_shape, n_channels)
    if U.shape != expected:
        raise ContractError(f"upstream gradient has shape {U.shape}, expected {expected}")
    return U.reshape(-1, n_channels)


def _check_views(Q: PatchView, K: PatchView, field: ANNField):
    if Q.shape != tuple(field.query_shape) or K.shape != tuple(field.key_shape):
        raise ContractError("Q/K spatial shapes do not match the field")


def scores_backward(Q: PatchView, K: PatchView, field: ANNField, dS: np.ndarray):
    """Map ``dL/dS`` over stored candidates to ``dL/dQ`` and ``dL/dK``."""
    Qpad, Kpad, p, code, qn, kn = _operands(Q, K, field.metric)
    dQpad = np.zeros(Qpad.shape)
    dKpad = np.zeros(Kpad.shape)
    _kernels.scores_backward(Qpad, Kpad, p, code, qn, kn, Q.width, K.width, field.indices,
                             np.ascontiguousarray(dS, dtype=np.float64), dQpad, dKpad)
    return fold_padding(dQpad, Q.radius), fold_padding(dKpad, K.radius)


def backward_hard(Q: PatchView, K: PatchView, V, field: ANNField, upstream) -> GradBundle:
    """Hard attention is a gather: only ``V`` receives gradient."""
    _check_views(Q, K, field)
    Vm = value_matrix(V, field.key_shape)
    U = _upstream(upstream, field.query_shape, Vm.shape[1])
    if field.k != 1:
        raise ContractError(f"hard attention needs k=1, got k={field.k}")
    dV = np.zeros_like(Vm)
    np.add.at(dV, field.indices[:, 0], U)
    return GradBundle(np.zeros(Q.source.shape), np.zeros(K.source.shape),
                      dV.reshape(*field.key_shape, -1))


def backward_soft_knn(Q: PatchView, K: PatchView, V, field: ANNField, temperature: float,
                      upstream) -> GradBundle:
    _check_views(Q, K, field)
    Vm = value_matrix(V, field.key_shape)
    U = _upstream(upstream, field.query_shape, Vm.shape[1])
    _, W = soft_knn_weights(Q, K, field, temperature)
    idx = field.indices
    dV = np.zeros_like(Vm)
    np.add.at(dV, idx.ravel(), (W[:, :, None] * U[:, None, :]).reshape(-1, Vm.shape[1]))
    g = np.einsum("nc,nkc->nk", U, Vm[idx])
    dS = W * (g - (W * g).sum(axis=1, keepdims=True)) / temperature
    dQ, dK = scores_backward(Q, K, field, dS)
    return GradBundle(dQ, dK, dV.reshape(*field.key_shape, -1))


def backward_aggregation(Q: PatchView, K: PatchView, V, field: ANNField, temperature: float,
                         upstream) -> GradBundle:
    _check_views(Q, K, field)
    Vm = value_matrix(V, field.key_shape)
    U = _upstream(upstream, field.query_shape, Vm.shape[1])
    S = candidate_scores(Q, K, field)
    dS = np.zeros_like(S)
    dV = np.zeros_like(Vm)
    _kernels.aggregation_backward(S, field.indices, *field.query_shape, *field.key_shape,
                                  Q.radius, 1.0 / temperature, Vm, U, dS, dV)
    dQ, dK = scores_backward(Q, K, field, dS)
    return GradBundle(dQ, dK, dV.reshape(*field.key_shape, -1))


# -- convolution --------------------------------------------------------------

def _conv_operands(x, weights, bias):
    x = check_feature_map(x, name="x")
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4 or weights.shape[:2] != (3, 3):
        raise ContractError(f"weights must have shape (3, 3, C_in, C_out), got {weights.shape}")
    if weights.shape[2] != x.shape[2]:
        raise ContractError(f"input has {x.shape[2]} channels, weights expect {weights.shape[2]}")
    if bias.shape != (weights.shape[3],):
        raise ContractError(f"bias must have shape ({weights.shape[3]},), got {bias.shape}")
    return x, weights, bias


def conv3x3_forward(x, weights, bias) -> np.ndarray:
    """Stride-1 cross-correlation with replicate padding."""
    x, weights, bias = _conv_operands(x, weights, bias)
    cols = PatchView(x, 3).matrix()
    out = cols @ weights.reshape(-1, weights.shape[3]) + bias
    return out.reshape(x.shape[0], x.shape[1], -1)


def conv3x3_backward(x, weights, bias, upstream):
    """Return ``(dx, dweights, dbias)``."""
    x, weights, bias = _conv_operands(x, weights, bias)
    H, W, Cin = x.shape
    Cout = weights.shape[3]
    U = np.asarray(upstream, dtype=np.float64)
    if U.shape != (H, W, Cout):
        raise ContractError(f"upstream gradient has shape {U.shape}, expected {(H, W, Cout)}")
    U = U.reshape(-1, Cout)
    cols = PatchView(x, 3).matrix()
    dweights = (cols.T @ U).reshape(weights.shape)
    dbias = U.sum(axis=0)
    dcols = (U @ weights.reshape(-1, Cout).T).reshape(H, W, 3, 3, Cin)
    dpad = np.zeros((H + 2, W + 2, Cin))
    for dy in range(3):
        for dx in range(3):
            dpad[dy:dy + H, dx:dx + W] += dcols[:, :, dy, dx]
    return fold_padding(dpad, 1), dweights, dbias


def conv3x3_taped(tape: Tape, x_name: str, w_name: str, b_name: str, out_name: str,
                  x, weights, bias) -> np.ndarray:
    out = conv3x3_forward(x, weights, bias)
    tape.record((x_name, w_name, b_name), out_name,
                lambda g: conv3x3_backward(x, weights, bias, g))
    return out


# -- finite differences ---------------------------------------------------------

def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5,
                       entries: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit).

    ``entries`` restricts the probe to a subset of flat indices; other
    entries are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for e in range(flat.size) if entries is None else entries:
        orig = flat[e]
        flat[e] = orig + step
        fp = f(x)
        flat[e] = orig - step
        fm = f(x)
        flat[e] = orig
        grad[e] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric) -> float:
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} seed={self.seed} rel_err={self.error:.3e}"


_FORWARD = {
    "soft_knn": soft_knn_attention,
    "aggregation": aggregation_attention,
}
_BACKWARD = {
    "soft_knn": backward_soft_knn,
    "aggregation": backward_aggregation,
}


def check_attention_gradients(mode: str, seed: int, size: int = 6, channels: int = 2,
                              k: int = 3, patch_size: int = 3, metric="neg_l2",
                              temperature: float = 0.5, step: float = 1e-5,
                              tol: float = 1e-5, perturb: float = 0.0) -> list[CheckResult]:
    """Compare analytic ``dQ, dK, dV`` with central differences on a random
    instance. The field is computed once and frozen. ``perturb`` adds a
    deliberate error to the analytic gradient (negative control)."""
    from .annfield import SearchParams, run

    rng = np.random.default_rng(seed)
    Qx = rng.random((size, size, channels))
    Kx = rng.random((size, size, channels))
    V = rng.random((size, size, 2))
    U = rng.standard_normal((size, size, 2))
    view = lambda a: PatchView(a, patch_size)
    k_eff = 1 if mode == "hard" else k
    field = run(view(Qx), view(Kx), SearchParams(n_iter=2, k=k_eff, seed=seed, metric=metric))

    if mode == "hard":
        grads = backward_hard(view(Qx), view(Kx), V, field, U)
        numeric_dV = central_difference(lambda v: float(np.sum(hard_attention(field, v) * U)), V)
        zero = not np.any(grads.dQ) and not np.any(grads.dK)
        err = relative_error(grads.dV + perturb, numeric_dV)
        return [CheckResult("hard.dQ=dK=0", seed, 0.0 if zero else 1.0, zero),
                CheckResult("hard.dV", seed, err, err < tol)]

    forward, backward = _FORWARD[mode], _BACKWARD[mode]
    grads = backward(view(Qx), view(Kx), V, field, temperature, U)
    loss_q = lambda q: float(np.sum(forward(view(q), view(Kx), V, field, temperature) * U))
    loss_k = lambda kk: float(np.sum(forward(view(Qx), view(kk), V, field, temperature) * U))
    loss_v = lambda v: float(np.sum(forward(view(Qx), view(Kx), v, field, temperature) * U))
    out = []
    for name, analytic, f, x in (("dQ", grads.dQ, loss_q, Qx), ("dK", grads.dK, loss_k, Kx),
                                 ("dV", grads.dV, loss_v, V)):
        err = relative_error(analytic + perturb, central_difference(f, x, step))
        out.append(CheckResult(f"{mode}.{name}", seed, err, err < tol))
    return out


def check_conv_gradients(seed: int, size: int = 4, cin: int = 2, cout: int = 3,
                         step: float = 1e-5, tol: float = 1e-5,
                         perturb: float = 0.0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((size, size, cin))
    w = rng.standard_normal((3, 3, cin, cout))
    b = rng.standard_normal(cout)
    U = rng.standard_normal((size, size, cout))
    dx, dw, db = conv3x3_backward(x, w, b, U)
    checks = (
        ("conv.dx", dx, lambda a: float(np.sum(conv3x3_forward(a, w, b) * U)), x),
        ("conv.dw", dw, lambda a: float(np.sum(conv3x3_forward(x, a, b) * U)), w),
        ("conv.db", db, lambda a: float(np.sum(conv3x3_forward(x, w, a) * U)), b),
    )
    out = []
    for name, analytic, f, arg in checks:
        err = relative_error(analytic + perturb, central_difference(f, arg, step))
        out.append(CheckResult(name, seed, err, err < tol))
    return out

