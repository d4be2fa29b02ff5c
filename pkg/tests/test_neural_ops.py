import numpy as np
import pytest
from scipy.special import expit

from bincell.toolkit.exceptions import ShapeMismatchError, ValidationError
from bincell.toolkit.interface import Point
from bincell.toolkit.neural_ops import (
    DsaKernel,
    attention_rollout,
    dsa_forward,
    instance_normalize,
    patch_positions,
    select_key_patches,
)

UNIFORM = [1 / 3, 1 / 3, 1 / 3]


def test_dsa_zero_kernel(rng):
    features = rng.normal(size=(4, 6, 5))
    attention, out = dsa_forward(features, DsaKernel())
    assert attention.shape == (1, 6, 5)
    np.testing.assert_array_equal(attention, 0.5)
    np.testing.assert_allclose(out, 1.5 * features, rtol=1e-14)


def test_dsa_zero_features(rng):
    kernel = DsaKernel(rng.normal(size=(2, 3, 3)), bias=0.7)
    _, out = dsa_forward(np.zeros((3, 4, 4)), kernel)
    np.testing.assert_array_equal(out, 0.0)


def test_dsa_single_tap():
    weights = np.zeros((2, 3, 3))
    weights[0, 1, 1] = 0.7
    attention, out = dsa_forward(np.full((3, 1, 1), 2.0), DsaKernel(weights, -0.3))
    assert attention[0, 0, 0] == pytest.approx(expit(0.7 * 2.0 - 0.3))
    assert out[1, 0, 0] == pytest.approx(2.0 * (1 + expit(1.1)))


def test_dsa_dilation():
    weights = np.zeros((2, 3, 3))
    weights[0, 0, 0] = 1.5
    features = np.zeros((1, 5, 5))
    features[0, 0, 0] = 1.0
    attention, _ = dsa_forward(features, DsaKernel(weights))
    expected = np.full((5, 5), 0.5)
    # the top left tap reaches two pixels up and left
    expected[2, 2] = expit(1.5)
    np.testing.assert_allclose(attention[0], expected)


def test_dsa_validation():
    with pytest.raises(ValidationError):
        DsaKernel(np.zeros((1, 3, 3)))
    with pytest.raises(ValidationError):
        DsaKernel(dilation=1)
    with pytest.raises(ShapeMismatchError):
        dsa_forward(np.zeros((4, 4)))


def test_instance_normalize_hand_case():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    np.testing.assert_allclose(
        instance_normalize(x).ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3
    )


def test_instance_normalize_fixed_points():
    np.testing.assert_allclose(instance_normalize(np.full((1, 2, 3, 3), 7.0)), 0.0)
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    np.testing.assert_allclose(instance_normalize(x), x, atol=1e-3)


def test_instance_normalize_statistics(rng):
    x = rng.normal(loc=3, scale=5, size=(2, 3, 8, 8))
    result = instance_normalize(x)
    assert np.abs(result.mean(axis=(2, 3))).max() <= 1e-6
    np.testing.assert_allclose(result.std(axis=(2, 3)), 1.0, atol=1e-3)
    with pytest.raises(ShapeMismatchError):
        instance_normalize(np.zeros((3, 8, 8)))


def test_instance_normalize_idempotent(rng):
    x = rng.normal(loc=-2, scale=4, size=(3, 2, 6, 6))
    once = instance_normalize(x)
    np.testing.assert_allclose(instance_normalize(once), once, atol=1e-3)


def _random_attention(rng, shape):
    scores = rng.uniform(0.01, 1, shape)
    return scores / scores.sum(axis=-1, keepdims=True)


@pytest.mark.parametrize("residual", [False, True])
def test_select_follows_head_permutation(rng, residual):
    layers = _random_attention(rng, (3, 5, 7, 7))
    selected = select_key_patches(layers, residual=residual)
    order = rng.permutation(5)
    permuted = select_key_patches(layers[:, order], residual=residual)
    assert permuted == [selected[head] for head in order]


@pytest.mark.parametrize("residual", [False, True])
def test_select_ignores_row_rescaling(rng, residual):
    layers = _random_attention(rng, (3, 4, 6, 6))
    rescaled = layers.copy()
    rescaled[1] *= rng.uniform(0.1, 10, (4, 6, 1))
    rescaled[1] /= rescaled[1].sum(axis=-1, keepdims=True)
    assert select_key_patches(rescaled, residual=residual) == select_key_patches(
        layers, residual=residual
    )


def test_select_single_layer():
    layers = [
        [
            [[0.1, 0.6, 0.3], UNIFORM, UNIFORM],
            [[0.2, 0.3, 0.5], UNIFORM, UNIFORM],
        ]
    ]
    assert select_key_patches(layers) == [1, 2]


def test_select_identity_attention():
    layers = np.tile(np.eye(4), (3, 2, 1, 1))
    assert select_key_patches(layers) == [1, 1]


def test_select_two_layers():
    first = [
        [[0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.6, 0.2, 0.2]],
        [[0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.0, 0.5, 0.5]],
    ]
    second = [
        [[0.5, 0.25, 0.25], [0.0, 1.0, 0.0], [0.5, 0.0, 0.5]],
        [[0.2, 0.6, 0.2], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
    ]
    joint = attention_rollout([first, second])
    np.testing.assert_allclose(joint[0, 0], [0.275, 0.325, 0.4])
    np.testing.assert_allclose(joint[1, 0], [0.2, 0.44, 0.36])
    assert select_key_patches([first]) == [1, 1]
    assert select_key_patches([first, second]) == [2, 1]


def test_rollout_residual():
    layers = [[[[0.1, 0.6, 0.3], UNIFORM, UNIFORM]]]
    joint = attention_rollout(layers, residual=True)
    np.testing.assert_allclose(joint[0, 0], [0.55, 0.3, 0.15])
    np.testing.assert_allclose(joint.sum(axis=-1), 1.0)


def test_rollout_validation():
    with pytest.raises(ValidationError):
        attention_rollout([[[[0.5, 0.6], [0.5, 0.5]]]])
    with pytest.raises(ShapeMismatchError):
        attention_rollout([np.full((1, 2, 2), 0.5), np.full((2, 2, 2), 0.5)])
    with pytest.raises(ShapeMismatchError):
        attention_rollout([])
    with pytest.raises(ValueError):
        select_key_patches([[[[0.5, 0.5], [0.5, 0.5]]]], query_row=2)


def test_patch_positions():
    assert patch_positions([1, 5], 4, 16) == [Point(8.0, 8.0), Point(8.0, 24.0)]
    assert patch_positions([5], 4, 16, class_token=False) == [Point(24.0, 24.0)]
    with pytest.raises(ValueError):
        patch_positions([0], 4, 16)
