import numpy as np
import pytest

from oracles import network_forward_oracle
from voxelnext import build_network, count_parameters, forward, scale_config, tiny_config
from voxelnext.errors import ConfigError, ContractError
from voxelnext.network import NetworkConfig, layer_names
from voxelnext.tensor import Tensor, precision


def _block_params(cin, cout, ratio, k=3, res=False, grn=True):
    hidden = ratio * cin
    n = cin * k**3 + cin  # depthwise
    n += 2 * cin  # instance norm
    n += cin * hidden + hidden  # expansion
    n += 2 * hidden if grn else 0
    n += hidden * cout + cout  # compression
    if res:
        n += cin * cout + cout
    return n


def _closed_form_count(cfg: NetworkConfig) -> int:
    w = cfg.widths
    B, R = cfg.stage_blocks, cfg.expansion_ratios
    total = cfg.in_channels * w[0] + w[0]
    for i in range(4):
        total += B[i] * _block_params(w[i], w[i], R[i], cfg.kernel, grn=cfg.grn)
        total += _block_params(w[i], w[i + 1], R[i + 1], cfg.kernel, res=True, grn=cfg.grn)
    total += B[4] * _block_params(w[4], w[4], R[4], cfg.kernel, grn=cfg.grn)
    for pos, i in enumerate((3, 2, 1, 0)):
        slot = 5 + pos
        total += _block_params(w[i + 1], w[i], R[slot], cfg.kernel, res=True, grn=cfg.grn)
        total += B[slot] * _block_params(w[i], w[i], R[slot], cfg.kernel, grn=cfg.grn)
    total += sum(w[k] * cfg.num_classes + cfg.num_classes for k in range(cfg.deep_supervision_levels))
    return total


def test_tiny_count_matches_layer_arithmetic():
    for cfg in (tiny_config(), tiny_config(base_channels=4, num_classes=3, grn=False), tiny_config(deep_supervision_levels=5)):
        assert count_parameters(build_network(cfg)) == _closed_form_count(cfg)
    assert count_parameters(build_network(tiny_config())) == 256166


def test_large_layout_count_matches_layer_arithmetic():
    assert _closed_form_count(NetworkConfig()) == 61_970_376


def test_stem_parameter_count():
    net = build_network(tiny_config())
    assert net.modules["stem"].weight.size + net.modules["stem"].bias.size == 16


def test_count_of_empty_mapping():
    assert count_parameters({}) == 0


def test_scale_config():
    base = NetworkConfig()
    assert scale_config(base, "base") is base
    wide = scale_config(base, "width_x2")
    assert wide.base_channels == 64 and wide.replace(base_channels=32) == base
    assert scale_config(wide, "width_x2").base_channels == 128
    with pytest.raises(ConfigError):
        scale_config(base, "depth_x2")


def test_config_validation_names_field():
    with pytest.raises(ConfigError) as exc:
        tiny_config(stage_blocks=(1,) * 8)
    assert exc.value.field == "stage_blocks"
    with pytest.raises(ConfigError) as exc:
        tiny_config(kernel=2)
    assert exc.value.field == "kernel"
    with pytest.raises(ConfigError):
        tiny_config(deep_supervision_levels=6)
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({**tiny_config().to_dict(), "dropout": 0.1})
    assert NetworkConfig.from_dict(tiny_config().to_dict()) == tiny_config()


def test_output_levels_halve():
    net = build_network(tiny_config(deep_supervision_levels=4, num_classes=3), seed=2)
    x = np.random.default_rng(0).normal(size=(1, 1, 32, 32, 32)).astype(np.float32)
    outs = forward(net, x)
    assert [o.shape for o in outs] == [(1, 3, 32 >> k, 32 >> k, 32 >> k) for k in range(4)]


def test_patch_extent_error_names_axis():
    net = build_network(tiny_config())
    with pytest.raises(ContractError, match="axis H"):
        forward(net, np.zeros((1, 1, 16, 24, 16), np.float32))


def test_grn_identity_at_init():
    net = build_network(tiny_config(), seed=3)
    x = np.random.default_rng(1).normal(size=(2, 1, 16, 32, 16)).astype(np.float32)
    a = [o.data for o in forward(net, x)]
    b = [o.data for o in forward(net, x, bypass_grn=True)]
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_forward_matches_straight_line_oracle():
    cfg = tiny_config(base_channels=4, deep_supervision_levels=3)
    with precision(np.float64):
        net = build_network(cfg, seed=7)
        rng = np.random.default_rng(8)
        # perturb GRN and norm parameters so those paths are exercised
        for name, p in net.named_parameters():
            if ".grn." in name or ".norm." in name:
                p.data[...] += rng.uniform(-0.5, 0.5, p.shape)
        x = rng.normal(size=(1, 1, 16, 16, 16))
        outs = forward(net, Tensor(x))
    ref = network_forward_oracle(net.state_dict(), x, 3)
    for o, r in zip(outs, ref):
        np.testing.assert_allclose(o.data, r, rtol=1e-9, atol=1e-10)


def test_forward_deterministic_and_patch_size_independent():
    net = build_network(tiny_config(), seed=4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 32, 32, 32)).astype(np.float32)
    assert np.array_equal(forward(net, x)[0].data, forward(net, x)[0].data)
    y = forward(net, rng.normal(size=(1, 1, 48, 16, 32)).astype(np.float32))[0]
    assert y.shape == (1, 2, 48, 16, 32) and np.isfinite(y.data).all()


def test_parameter_names_unique_and_layer_names():
    net = build_network(NetworkConfig(base_channels=2))
    names = [n for n, _ in net.named_parameters()]
    assert len(names) == len(set(names))
    layers = layer_names(build_network(tiny_config()))
    assert layers[0] == "stem" and "enc0.block0.act" in layers and "dec0.block0.grn" in layers


def test_encoder_decoder_symmetry():
    net = build_network(tiny_config(), seed=0)
    sizes = {n: p.size for n, p in net.named_parameters()}
    for i in range(4):
        enc = sum(v for n, v in sizes.items() if n.startswith(f"enc{i}."))
        dec = sum(v for n, v in sizes.items() if n.startswith(f"dec{i}."))
        assert enc == dec


def test_state_dict_round_trip_and_strictness():
    a = build_network(tiny_config(), seed=0)
    b = build_network(tiny_config(), seed=1)
    assert b.load_state_dict(a.state_dict()) == []
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    state = a.state_dict()
    state.pop("stem.bias")
    with pytest.raises(ContractError):
        b.load_state_dict(state)
    assert b.load_state_dict(state, strict=False) == ["stem.bias"]
