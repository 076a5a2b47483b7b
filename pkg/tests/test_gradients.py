import math

import numpy as np
import pytest

from ecgformer import layers as L
from ecgformer.model import ModelConfig, ModelParams, param_shapes
from ecgformer.training import loss_and_grad

from . import gradcheck

SEEDS = range(10)
TOL = 1e-4


@pytest.mark.parametrize("layer", sorted(gradcheck.LAYERS))
@pytest.mark.parametrize("seed", SEEDS)
def test_layer_gradients(layer, seed):
    errs = gradcheck.LAYERS[layer](seed)
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("seed", SEEDS)
def test_model_gradients_reduced(seed):
    errs = gradcheck.model(seed)
    assert set(errs) == set(param_shapes(gradcheck.REDUCED))
    assert max(errs.values()) < TOL, errs


def test_model_gradients_without_rr():
    errs = gradcheck.model(0, ModelConfig(input_len=12, embed_dim=4, kernel=2, heads=2, hidden=8, use_rr=False))
    assert "rr_w" not in errs and max(errs.values()) < TOL


def test_key_bias_gradient_is_zero():
    cfg = gradcheck.REDUCED
    rng = np.random.default_rng(1)
    p = ModelParams(cfg, {n: rng.normal(0, 0.5, s) for n, s in param_shapes(cfg).items()})
    _, g = loss_and_grad(p, rng.standard_normal((3, 12)), rng.uniform(-2, 2, (3, 2)), [0, 1, 2])
    assert np.max(np.abs(g["bk"])) < 1e-12


def test_cross_entropy_examples():
    loss, d = L.cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5))
    big = np.full((2, 5), -1e3)
    big[0, 1] = big[1, 4] = 1e3
    loss, d = L.cross_entropy(big, np.array([1, 4]))
    assert loss == pytest.approx(0, abs=1e-12) and np.max(np.abs(d)) < 1e-12
