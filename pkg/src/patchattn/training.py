"""Toy guided colorization network used to compare attention modes.

Network: a shared 3x3 convolution (1 -> ``features`` channels) embeds the
gray target and the gray reference; attention with those embeddings as
queries/keys copies colours from the RGB reference; a 3x3 convolution
(3 -> 3) plus a residual gray image produces the prediction. The loss is
the mean squared error over pixels and channels. The ANN field is
recomputed on the current embeddings at every step and held fixed
during backward.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .annfield import SearchParams, run
from .attention import Mode, aggregation_attention, hard_attention, soft_knn_attention
from .autodiff import (Tape, backward_aggregation, backward_hard, backward_soft_knn,
                       conv3x3_taped)
from .core import PatchView, check_feature_map


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ColorizerConfig:
    mode: Mode = Mode.SOFT_KNN
    k: int = 3
    patch_size: int = 3
    features: int = 16
    steps: int = 500
    optimizer: str = "momentum"
    learning_rate: float = 0.5
    momentum: float = 0.9
    temperature: float = 0.1
    n_iter: int = 5
    metric: str = "neg_l2"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.HARD and self.k != 1:
            object.__setattr__(self, "k", 1)
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"optimizer must be 'momentum' or 'adam', got {self.optimizer!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    losses: list[float]
    qk_grad_norms: list[float]
    output: np.ndarray = field(repr=False)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def to_gray(rgb: np.ndarray) -> np.ndarray:
    return rgb.mean(axis=2, keepdims=True)


def init_weights(features: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "w1": rng.standard_normal((3, 3, 1, features)) * math.sqrt(2.0 / 9.0),
        "b1": np.zeros(features),
        "w2": rng.standard_normal((3, 3, 3, 3)) * 1e-3,
        "b2": np.zeros(3),
    }


def forward(weights, gray, ref_gray, ref_rgb, config: ColorizerConfig, step_seed: int,
            tape: Tape | None = None):
    """Return the RGB prediction; records backward closures on ``tape``."""
    tape = tape if tape is not None else Tape()
    fq = conv3x3_taped(tape, None, "w1", "b1", "fq", gray, weights["w1"], weights["b1"])
    fk = conv3x3_taped(tape, None, "w1", "b1", "fk", ref_gray, weights["w1"], weights["b1"])
    Q = PatchView(fq, config.patch_size)
    K = PatchView(fk, config.patch_size)
    params = SearchParams(n_iter=config.n_iter, k=config.k, seed=step_seed, metric=config.metric)
    ann = run(Q, K, params)
    t = config.temperature
    if config.mode is Mode.HARD:
        att = hard_attention(ann, ref_rgb)
        backward = lambda g: _split(backward_hard(Q, K, ref_rgb, ann, g))
    elif config.mode is Mode.SOFT_KNN:
        att = soft_knn_attention(Q, K, ref_rgb, ann, t)
        backward = lambda g: _split(backward_soft_knn(Q, K, ref_rgb, ann, t, g))
    else:
        att = aggregation_attention(Q, K, ref_rgb, ann, t)
        backward = lambda g: _split(backward_aggregation(Q, K, ref_rgb, ann, t, g))
    tape.record(("fq", "fk"), "att", backward)
    pred = conv3x3_taped(tape, "att", "w2", "b2", "conv2", att, weights["w2"], weights["b2"])
    tape.record(("conv2",), "pred", lambda g: (g,))
    return pred + gray, tape


def _split(bundle):
    return bundle.dQ, bundle.dK


class _Momentum:
    def __init__(self, lr, beta):
        self.lr, self.beta, self.state = lr, beta, {}

    def update(self, weights, grads):
        for name, g in grads.items():
            v = self.state.get(name, 0.0) * self.beta + g
            self.state[name] = v
            weights[name] = weights[name] - self.lr * v


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def update(self, weights, grads):
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            weights[name] = weights[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def train_toy_colorizer(target_rgb, reference_rgb, config: ColorizerConfig | None = None,
                        ) -> TrainResult:
    """Train on one (gray target, colour reference) pair.

    ``target_rgb`` is the ground truth; the network only sees its gray
    version. Returns the weights, the loss before every update plus the
    final loss (``steps + 1`` values), and the norm of the first
    convolution's gradient at every step.
    """
    config = config or ColorizerConfig()
    target = check_feature_map(target_rgb, name="target_rgb")
    ref = check_feature_map(reference_rgb, name="reference_rgb")
    if target.shape[2] != 3 or ref.shape[2] != 3:
        raise ValueError("target and reference must be RGB")
    gray, ref_gray = to_gray(target), to_gray(ref)
    rng = np.random.default_rng(config.seed)
    weights = init_weights(config.features, rng)
    opt = (_Momentum(config.learning_rate, config.momentum) if config.optimizer == "momentum"
           else _Adam(config.learning_rate))
    n = target.size
    losses, qk_norms = [], []
    for step in range(config.steps + 1):
        pred, tape = forward(weights, gray, ref_gray, ref, config, _step_seed(config.seed, step))
        resid = pred - target
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean(resid**2))
        if not math.isfinite(loss):
            raise TrainingError(step, loss)
        losses.append(loss)
        if step == config.steps:
            break
        grads = tape.backward({"pred": 2.0 * resid / n})
        grads = {name: grads[name] for name in weights}
        qk_norms.append(float(np.sqrt(np.sum(grads["w1"]**2) + np.sum(grads["b1"]**2))))
        opt.update(weights, grads)
    return TrainResult(weights, losses, qk_norms, pred)


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(float(loss))])
