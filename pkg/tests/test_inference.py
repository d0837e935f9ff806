import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelnext import build_network, forward, gaussian_weight_map, plan_windows, sliding_window_predict, tiny_config
from voxelnext.errors import ContractError
from voxelnext.ops import softmax_channels
from voxelnext.tensor import no_grad


@pytest.fixture(scope="module")
def net():
    return build_network(tiny_config(num_classes=3), seed=11)


def test_weight_map_examples():
    assert gaussian_weight_map((1, 1, 1)).tolist() == [[[1.0]]]
    w = gaussian_weight_map((5, 6, 7))
    for axis in range(3):
        assert np.array_equal(w, np.flip(w, axis))
    line = gaussian_weight_map((5, 1, 1), sigma_scale=1 / 8)[:, 0, 0]
    sigma = 5 / 8
    ref = [max(math.exp(-((i - 2) ** 2) / (2 * sigma**2)), 1e-3) for i in range(5)]
    np.testing.assert_allclose(line, ref, rtol=1e-12)
    assert w.min() >= 1e-3 and w.max() == 1.0


def test_single_window_equals_direct_forward(net):
    x = np.random.default_rng(0).normal(size=(16, 32, 16)).astype(np.float32)
    labels, probs = sliding_window_predict(net, x, (16, 32, 16))
    with no_grad():
        direct = softmax_channels(forward(net, x[None, None])[0]).data[0]
    assert np.abs(probs - direct).max() <= 1e-5
    assert np.array_equal(labels, np.argmax(direct, axis=0))


def test_bias_driven_constant_field_is_uniform():
    # With zero padding a generic net is not translation invariant on a constant patch,
    # so the property is checked on a purely bias-driven net.
    net = build_network(tiny_config(num_classes=3), seed=12)
    for name, p in net.named_parameters():
        if name.endswith("weight"):
            p.data[...] = 0.0
        elif name.endswith("beta") or name.endswith("bias"):
            p.data[...] = np.random.default_rng(len(name)).uniform(-1, 1, p.shape)
    _, single = sliding_window_predict(net, np.full((32, 32, 32), 0.7, np.float32), (32, 32, 32))
    centre = single[:, 16, 16, 16]
    for overlap in (0.0, 0.5, 0.75):
        _, probs = sliding_window_predict(net, np.full((40, 44, 36), 0.7, np.float32), (32, 32, 32), overlap)
        assert np.abs(probs.reshape(3, -1) - centre[:, None]).max() <= 1e-5


def test_argmax_invariant_to_weight_scale(net):
    x = np.random.default_rng(3).normal(size=(40, 36, 20)).astype(np.float32)
    a, _ = sliding_window_predict(net, x, (16, 16, 16), 0.5)
    b, _ = sliding_window_predict(net, x, (16, 16, 16), 0.5, weight_scale=7.5)
    assert np.array_equal(a, b)


@settings(max_examples=20, deadline=None)
@given(
    st.tuples(st.integers(5, 70), st.integers(5, 70), st.integers(5, 70)),
    st.sampled_from([16, 32]),
    st.floats(0.0, 0.9),
)
def test_plan_coverage_invariants(extents, patch, overlap):
    plan = plan_windows(extents, (patch,) * 3, overlap)
    cover = plan.coverage()
    assert cover.min() >= 1
    for o in plan.origins:
        assert all(0 <= a and a + patch <= n for a, n in zip(o, plan.padded_extents))
    # accumulated weights are strictly positive everywhere
    den = np.zeros(plan.padded_extents)
    for o in plan.origins:
        den[tuple(slice(a, a + patch) for a in o)] += plan.weight_map
    assert den.min() > 0


@settings(max_examples=20, deadline=None)
@given(
    st.tuples(st.integers(10, 40), st.integers(10, 40), st.integers(10, 40)),
    st.sampled_from([0.0, 0.25, 0.5]),
    st.integers(0, 1000),
)
def test_predictions_are_distributions(extents, overlap, seed):
    net = build_network(tiny_config(base_channels=4, num_classes=2), seed=seed)
    x = np.random.default_rng(seed).normal(size=extents).astype(np.float32)
    labels, probs = sliding_window_predict(net, x, (16, 16, 16), overlap)
    assert labels.shape == extents and probs.shape == (2, *extents)
    assert probs.min() >= 0 and np.abs(probs.sum(axis=0) - 1).max() <= 1e-5


def test_bad_arguments(net):
    with pytest.raises(ContractError):
        sliding_window_predict(net, np.zeros((16, 16)), (16, 16, 16))
    with pytest.raises(ContractError):
        sliding_window_predict(net, np.zeros((16, 16, 16)), (16, 24, 16))
    with pytest.raises(ContractError):
        plan_windows((32, 32, 32), (16, 16, 16), overlap=1.0)
    with pytest.raises(ContractError):
        gaussian_weight_map((4, 4, 4), sigma_scale=0.0)
