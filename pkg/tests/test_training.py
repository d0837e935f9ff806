import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from voxelnext import build_network, generate_dataset, sliding_window_predict, tiny_config
from voxelnext.data import VolumeSample, preprocess
from voxelnext.errors import ConfigError, ContractError
from voxelnext.losses import deep_supervision_loss, deep_supervision_weights, dice_ce_loss
from voxelnext.metrics import dsc
from voxelnext.tensor import Tensor, grad_check, precision
from voxelnext.training import (
    NO_AUGMENT,
    AugmentConfig,
    TrainConfig,
    TrainLog,
    augment,
    finetune,
    lr_schedule,
    sample_patch,
    train,
)


def _dice_ce_scalar(logits, labels, smooth=1e-5):
    b, k = logits.shape[:2]
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    ce = 0.0
    inter = np.zeros(k)
    den = np.zeros(k)
    for n in range(b):
        for idx in np.ndindex(*labels.shape[1:]):
            lab = labels[(n,) + idx]
            ce -= math.log(p[(n, lab) + idx])
            for c in range(k):
                inter[c] += p[(n, c) + idx] * (lab == c)
                den[c] += p[(n, c) + idx] + (lab == c)
    ce /= labels.size
    dice = [(2 * inter[c] + smooth) / (den[c] + smooth) for c in range(k)]
    return 0.5 * (1 - sum(dice) / k) + 0.5 * ce


# -- losses ---------------------------------------------------------------------


def test_saturated_correct_prediction():
    labels = np.random.default_rng(0).integers(0, 3, (1, 4, 4, 4))
    logits = np.zeros((1, 3, 4, 4, 4))
    for c in range(3):
        logits[:, c][labels == c] = 100.0
    with precision(np.float64):
        assert dice_ce_loss(Tensor(logits), labels).item() <= 1e-3


def test_uniform_logits_balanced_labels():
    labels = (np.indices((1, 4, 4, 4)).sum(axis=0) % 2).astype(np.int64)
    with precision(np.float64):
        loss = dice_ce_loss(Tensor(np.zeros((1, 2, 4, 4, 4))), labels).item()
    # each class: intersection 16, denominator 32 + 32
    dice = (2 * 16 + 1e-5) / (64 + 1e-5)
    assert loss == pytest.approx(0.5 * (1 - dice) + 0.5 * math.log(2), abs=1e-12)


def test_loss_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for k in (2, 3):
        logits = rng.normal(size=(2, k, 4, 4, 4))
        labels = rng.integers(0, k, (2, 4, 4, 4))
        with precision(np.float64):
            got = dice_ce_loss(Tensor(logits), labels).item()
        assert got == pytest.approx(_dice_ce_scalar(logits, labels), abs=1e-6)


def test_loss_label_errors():
    with pytest.raises(ContractError):
        dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2, 2))), np.full((1, 2, 2, 2), 2))
    with pytest.raises(ContractError):
        dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2, 2))), np.zeros((1, 2, 2, 3), dtype=int))


def test_deep_supervision_weights_and_levels():
    np.testing.assert_allclose(deep_supervision_weights(2), [2 / 3, 1 / 3])
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, (1, 8, 8, 8))
    outs = [rng.normal(size=(1, 2, 8 >> k, 8 >> k, 8 >> k)) for k in range(4)]
    with precision(np.float64):
        one = deep_supervision_loss([Tensor(outs[0])], labels).item()
        assert one == dice_ce_loss(Tensor(outs[0]), labels).item()
        total = deep_supervision_loss([Tensor(o) for o in outs], labels).item()
    w = deep_supervision_weights(4)
    expect = sum(
        w[k] * _dice_ce_scalar(outs[k], labels[:, :: 2**k, :: 2**k, :: 2**k]) for k in range(4)
    )
    assert total == pytest.approx(expect, abs=1e-9)
    with pytest.raises(ContractError):
        deep_supervision_loss([Tensor(outs[1])], labels)


def test_loss_grad_checks_on_several_shapes():
    rng = np.random.default_rng(3)
    for shape in [(1, 2, 2, 2, 2), (2, 2, 3, 2, 2), (1, 3, 2, 2, 4), (2, 4, 2, 2, 2), (1, 2, 4, 4, 4)]:
        logits = rng.uniform(-1, 1, shape)
        labels = rng.integers(0, shape[1], (shape[0],) + shape[2:])
        assert grad_check(lambda z: dice_ce_loss(z, labels), [logits]).passed
    outs = [rng.uniform(-1, 1, (1, 2, 4 >> k, 4 >> k, 4 >> k)) for k in range(2)]
    labels = rng.integers(0, 2, (1, 4, 4, 4))
    assert grad_check(lambda a, b: deep_supervision_loss([a, b], labels), outs).passed


# -- schedule ---------------------------------------------------------------------


def test_finetune_schedule_points():
    cfg = TrainConfig.for_phase("finetune", patch_size=(32, 32, 32))
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(25, cfg) == pytest.approx(0.5e-3, abs=1e-18)
    assert lr_schedule(50, cfg) == 1e-3
    assert lr_schedule(299, cfg) == pytest.approx(1e-3 / 250, abs=1e-18)
    assert lr_schedule(300, cfg) == 0.0
    with pytest.raises(ContractError):
        lr_schedule(301, cfg)


def test_pretrain_schedule_starts_at_max():
    cfg = TrainConfig.for_phase("pretrain", patch_size=(32, 32, 32))
    assert lr_schedule(0, cfg) == 1e-3 and cfg.warmup_epochs == 0
    assert (cfg.epochs, cfg.batches_per_epoch, cfg.batch_size) == (1500, 250, 8)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 400), st.data())
def test_schedule_piecewise_linear(epochs, data):
    warm = data.draw(st.integers(0, epochs - 1))
    cfg = TrainConfig(phase="finetune", epochs=epochs, warmup_epochs=warm, patch_size=(16, 16, 16))
    lrs = np.array([lr_schedule(e, cfg) for e in range(epochs + 1)])
    assert lrs.max() == pytest.approx(1e-3) and int(np.argmax(lrs)) == warm
    assert lrs[epochs - 1] > 0 and lrs[-1] == 0
    second = np.diff(lrs, 2)
    kink = warm - 1
    mask = np.ones_like(second, dtype=bool)
    if 0 <= kink < second.size:
        mask[kink] = False
    assert np.abs(second[mask]).max(initial=0.0) <= 1e-15


def test_train_config_validation():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(epochs=10, warmup_epochs=10, patch_size=(32, 32, 32))
    assert exc.value.field == "warmup_epochs"
    with pytest.raises(ConfigError) as exc:
        TrainConfig(patch_size=(32, 24, 32))
    assert exc.value.field == "patch_size"
    with pytest.raises(ConfigError):
        TrainConfig.for_phase("distill")


# -- sampling and augmentation ----------------------------------------------------------


def test_foreground_voxel_always_inside_patch():
    labels = np.zeros((20, 20, 20), dtype=np.int64)
    labels[3, 17, 9] = 1
    sample = VolumeSample(np.arange(8000, dtype=np.float32).reshape(20, 20, 20), labels)
    rng = np.random.default_rng(0)
    for _ in range(200):
        _, lab = sample_patch(sample, (16, 16, 16), 1.0, rng)
        assert lab.sum() == 1


def test_uniform_origins_without_oversampling():
    sample = VolumeSample(np.zeros((23, 23, 23), np.float32), np.zeros((23, 23, 23), np.int64))
    sample.image[...] = np.arange(23 ** 3).reshape(23, 23, 23)
    rng = np.random.default_rng(1)
    counts = np.zeros(8 ** 3)
    for _ in range(10_000):
        img, _ = sample_patch(sample, (16, 16, 16), 0.0, rng)
        o = np.unravel_index(int(img[0, 0, 0]), (23, 23, 23))
        counts[np.ravel_multi_index(o, (8, 8, 8))] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_undersized_volume_is_padded():
    sample = VolumeSample(np.ones((10, 20, 16), np.float32), np.ones((10, 20, 16), np.int64))
    img, lab = sample_patch(sample, (16, 16, 16), 0.5, np.random.default_rng(0))
    assert img.shape == lab.shape == (16, 16, 16)


def test_augment_identity_and_double_flip():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(8, 8, 8)).astype(np.float32)
    lab = rng.integers(0, 3, (8, 8, 8))
    a, b = augment(img, lab, rng, NO_AUGMENT)
    assert np.array_equal(a, img) and np.array_equal(b, lab)
    flip = AugmentConfig(1.0, 0.0, 0.0, 0.1, 0.0)
    a, b = augment(*augment(img, lab, rng, flip), rng, flip)
    assert np.array_equal(a, img) and np.array_equal(b, lab)


def test_augment_preserves_label_counts_and_alignment():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        lab = rng.integers(0, 3, (6, 6, 8))
        img = lab.astype(np.float32) * 10
        a, b = augment(img, lab, rng, AugmentConfig(p_noise=0.0, p_scale=0.0))
        assert np.array_equal(np.bincount(b.ravel(), minlength=3), np.bincount(lab.ravel(), minlength=3))
        assert np.array_equal(a, b.astype(np.float32) * 10)


# -- training loop ------------------------------------------------------------------


def _organ_cases(n, seed=0):
    return [preprocess(s) for s in generate_dataset("organ", n, seed=seed, extent=32)]


def test_lr_zero_leaves_parameters():
    cases = _organ_cases(1)
    net = build_network(tiny_config(), seed=0)
    before = [p.data.copy() for p in net.parameters()]
    cfg = TrainConfig(phase="finetune", epochs=2, warmup_epochs=1, batches_per_epoch=1, batch_size=1, patch_size=(16, 16, 16))
    # the first warmup epoch runs at lr 0; inspect the parameters right after it
    stop = []
    train(cases, net, cfg, callback=lambda e, n, log: stop.append([p.data.copy() for p in n.parameters()]))
    assert all(np.array_equal(a, b) for a, b in zip(before, stop[0]))


def test_training_is_bitwise_reproducible_and_logged(tmp_path):
    cases = _organ_cases(3)
    runs = []
    for _ in range(2):
        net = build_network(tiny_config(), seed=1)
        cfg = TrainConfig(epochs=3, batches_per_epoch=2, batch_size=2, patch_size=(16, 16, 16), seed=4, val_every=1)
        ckpt, log = train(cases, net, cfg, val_dataset=cases[:1])
        runs.append((b"".join(a.tobytes() for a in ckpt.params.values()), log))
    assert runs[0][0] == runs[1][0]
    log = runs[0][1]
    assert [r["epoch"] for r in log.rows] == [0, 1, 2]
    assert [r["lr"] for r in log.rows] == [lr_schedule(e, cfg) for e in range(3)]
    log.write_csv(tmp_path / "log.csv")
    back = TrainLog.read_csv(tmp_path / "log.csv")
    assert back.columns == log.columns
    assert [r["train_loss"] for r in back.rows] == [r["train_loss"] for r in log.rows]


def test_log_rows_must_increase():
    log = TrainLog(2)
    log.append(0, 1e-3, 0.5, None, 0.1)
    with pytest.raises(ContractError):
        log.append(0, 1e-3, 0.5, None, 0.1)


def test_label_out_of_range_rejected():
    cases = [preprocess(s) for s in generate_dataset("multiclass", 1, seed=0, extent=32)]
    with pytest.raises(ContractError):
        train(cases, build_network(tiny_config()), TrainConfig(epochs=1, batches_per_epoch=1, batch_size=1, patch_size=(16, 16, 16)))


@pytest.mark.slow
def test_memorises_single_phantom():
    case = _organ_cases(1, seed=3)
    net = build_network(tiny_config(), seed=2)
    cfg = TrainConfig(epochs=100, batches_per_epoch=2, batch_size=1, patch_size=(32, 32, 32), seed=0, augment=False)
    train(case, net, cfg)
    pred, _ = sliding_window_predict(net, case[0], (32, 32, 32))
    assert dsc(pred == 1, case[0].labels == 1) >= 0.95


def test_finetune_zero_epochs_keeps_backbone_and_runs_at_larger_patch():
    cases = _organ_cases(2)
    net = build_network(tiny_config(), seed=0)
    ckpt, _ = train(cases, net, TrainConfig(epochs=1, batches_per_epoch=1, batch_size=1, patch_size=(32, 32, 32)))
    out, _, _ = finetune(ckpt, cases, TrainConfig(phase="finetune", epochs=0, patch_size=(32, 32, 32)))
    for name, arr in ckpt.params.items():
        assert np.array_equal(out.params[name], arr)
    cfg = TrainConfig(phase="finetune", epochs=2, warmup_epochs=1, batches_per_epoch=1, batch_size=1, patch_size=(48, 48, 48))
    _, log, tuned = finetune(ckpt, cases, cfg, config=ckpt.config.replace(num_classes=3))
    assert len(log.rows) == 2 and tuned.config.num_classes == 3
    with pytest.raises(ConfigError):
        finetune(ckpt, cases, TrainConfig(epochs=1, patch_size=(32, 32, 32)))
