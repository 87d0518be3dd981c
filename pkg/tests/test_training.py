import csv

import numpy as np
import pytest

from patchattn.autodiff import Tape
from patchattn.core import load_image
from patchattn.training import (ColorizerConfig, TrainingError, forward, init_weights, to_gray,
                                train_toy_colorizer, write_loss_csv)

from helpers import FIXTURES


@pytest.fixture(scope="module")
def pair():
    return (load_image(FIXTURES / "color_target_32.png"),
            load_image(FIXTURES / "color_reference_32.png"))


def test_zero_steps_is_untrained_forward(pair):
    target, ref = pair
    config = ColorizerConfig(steps=0)
    result = train_toy_colorizer(target, ref, config)
    assert len(result.losses) == 1 and result.qk_grad_norms == []
    weights = init_weights(config.features, np.random.default_rng(config.seed))
    seed = int(np.random.SeedSequence([config.seed, 0]).generate_state(1)[0])
    pred, _ = forward(weights, to_gray(target.astype(np.float64)),
                      to_gray(ref.astype(np.float64)), ref.astype(np.float64), config, seed)
    np.testing.assert_array_equal(result.output, pred)


def test_self_pair_loss_halves(pair):
    target, _ = pair
    result = train_toy_colorizer(target, target, ColorizerConfig(steps=60))
    assert result.final_loss < 0.5 * result.initial_loss


def test_hard_mode_trains_only_value_path(pair):
    target, ref = pair
    result = train_toy_colorizer(target, ref, ColorizerConfig(mode="hard", k=3, steps=8))
    assert result.qk_grad_norms == [0.0] * 8
    assert result.final_loss < result.initial_loss


def test_soft_mode_has_qk_gradient(pair):
    target, ref = pair
    result = train_toy_colorizer(target, ref, ColorizerConfig(steps=3))
    assert all(g > 0 for g in result.qk_grad_norms)


def test_deterministic(pair):
    target, ref = pair
    config = ColorizerConfig(mode="aggregation", k=1, steps=4)
    assert train_toy_colorizer(target, ref, config).losses == \
        train_toy_colorizer(target, ref, config).losses


def test_adam_runs(pair):
    target, ref = pair
    result = train_toy_colorizer(target, ref, ColorizerConfig(steps=5, optimizer="adam",
                                                              learning_rate=0.01))
    assert result.final_loss < result.initial_loss


def test_divergence_reports_step(pair):
    target, ref = pair
    with pytest.raises(TrainingError) as info:
        train_toy_colorizer(target, ref, ColorizerConfig(steps=60, learning_rate=1e6))
    assert info.value.step > 0 and not np.isfinite(info.value.loss)


def test_config_validation(pair):
    assert ColorizerConfig(mode="hard", k=3).k == 1
    with pytest.raises(ValueError):
        ColorizerConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        ColorizerConfig(steps=-1)
    gray = pair[0][:, :, :1]
    with pytest.raises(ValueError):
        train_toy_colorizer(gray, pair[1], ColorizerConfig(steps=0))


def test_tape_is_single_use(pair):
    target, ref = pair
    w = init_weights(4, np.random.default_rng(0))
    g = to_gray(target.astype(np.float64))
    _, tape = forward(w, g, to_gray(ref.astype(np.float64)), ref.astype(np.float64),
                      ColorizerConfig(features=4), 0, Tape())
    tape.backward({"pred": np.ones_like(target, dtype=np.float64)})
    with pytest.raises(RuntimeError):
        tape.backward({"pred": np.ones_like(target, dtype=np.float64)})


def test_loss_csv(tmp_path):
    write_loss_csv([0.5, 0.25], tmp_path / "loss.csv")
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows == [["step", "loss"], ["0", "0.5"], ["1", "0.25"]]
