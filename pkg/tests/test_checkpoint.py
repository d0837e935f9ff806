import json

import numpy as np
import pytest

from voxelnext import build_network, count_parameters, forward, tiny_config
from voxelnext.checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from voxelnext.errors import CheckpointError
from voxelnext.optim import AdamWState


@pytest.fixture()
def saved(tmp_path):
    net = build_network(tiny_config(), seed=5)
    path = save_checkpoint(net, tmp_path / "ckpt.json", note="unit")
    return net, path


def test_round_trip_is_bitwise(saved):
    net, path = saved
    back = load_checkpoint(path)
    assert count_parameters(back) == count_parameters(net)
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    assert read_checkpoint(path).metadata == {"note": "unit"}


def test_manifest_layout(saved):
    _, path = saved
    manifest = json.loads(path.read_text())
    assert manifest["format_version"] == FORMAT_VERSION
    blob = path.with_name(manifest["blob"]).read_bytes()
    assert len(blob) == manifest["blob_nbytes"]
    offset = 0
    for e in manifest["parameters"]:
        assert e["offset"] == offset and e["nbytes"] == 4 * int(np.prod(e["shape"]))
        offset += e["nbytes"]


def test_load_at_larger_patch(saved):
    _, path = saved
    net = load_checkpoint(path, tiny_config())
    out = forward(net, np.random.default_rng(0).normal(size=(1, 1, 48, 48, 48)).astype(np.float32))
    assert out[0].shape == (1, 2, 48, 48, 48) and np.isfinite(out[0].data).all()


def test_corrupt_shape_names_parameter(saved):
    _, path = saved
    manifest = json.loads(path.read_text())
    entry = manifest["parameters"][3]
    entry["shape"] = entry["shape"][::-1] + [1]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=entry["name"].replace(".", r"\.")):
        read_checkpoint(path)


def test_version_and_truncation_errors(saved):
    _, path = saved
    manifest = json.loads(path.read_text())
    blob = path.with_name(manifest["blob"])
    data = blob.read_bytes()
    blob.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)
    blob.write_bytes(data)
    manifest["format_version"] = "voxelnext-ckpt-0"
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)
    path.write_text("{not json")
    with pytest.raises(CheckpointError):
        read_checkpoint(path)


def test_config_mismatch_rejected(saved):
    _, path = saved
    with pytest.raises(CheckpointError, match="base_channels"):
        load_checkpoint(path, tiny_config(base_channels=4))


def test_optimizer_state_round_trip(tmp_path):
    net = build_network(tiny_config(), seed=1)
    params = [p.data for p in net.parameters()]
    state = AdamWState.for_params(params, weight_decay=0.05)
    for m, v in zip(state.first_moment, state.second_moment):
        m += 0.25
        v += 0.5
    state.step_count = 7
    Checkpoint.from_network(net, state).save(tmp_path / "c.json")
    back = read_checkpoint(tmp_path / "c.json").optimizer
    assert back.step_count == 7 and back.weight_decay == 0.05
    assert all(np.array_equal(a, b) for a, b in zip(back.first_moment, state.first_moment))
