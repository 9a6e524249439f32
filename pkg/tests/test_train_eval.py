import csv
import math

import numpy as np
import pytest
import torch

from mscanet.data import SegmentationSample, SynthConfig, synth_generate
from mscanet.errors import ConfigError, NumericError
from mscanet.metrics import MetricReport
from mscanet.network import NetworkConfig, build_mscanet, load_checkpoint, read_meta
from mscanet.train_eval import (
    TrainConfig,
    cosine_lr,
    evaluate,
    mse_loss,
    predict,
    train,
    write_overlays,
)

FLAGS_OFF = dict(use_mseda=False, use_pcbam=False, use_cab=False)


def small_set(n=4, size=(64, 64), seed=0):
    return synth_generate(SynthConfig(n_images=n, size=size, seed=seed))


def small_model(seed=0, **kw):
    kw = {"depth": 2, "base_channels": 4, **kw}
    return build_mscanet(NetworkConfig(**kw), seed=seed)


def read_log(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# schedule and loss
# ---------------------------------------------------------------------------

def test_cosine_endpoints_exact():
    cfg = TrainConfig(epochs=1000)
    assert cosine_lr(0, cfg) == 1e-3
    assert cosine_lr(1000, cfg) == 1e-5


def test_cosine_midpoint_and_monotone():
    cfg = TrainConfig(epochs=10)
    assert cosine_lr(5, cfg) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)
    lrs = [cosine_lr(e, cfg) for e in range(11)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(11, cfg)


def test_cosine_against_closed_form():
    cfg = TrainConfig(epochs=37, lr_max=2e-3, lr_min=1e-4)
    for e in range(38):
        ref = 1e-4 + 0.5 * (2e-3 - 1e-4) * (1 + math.cos(math.pi * e / 37))
        assert cosine_lr(e, cfg) == pytest.approx(ref, rel=1e-12)


def test_mse_loss_values():
    pred = torch.tensor([[0.5, 1.0], [0.0, 0.25]])
    gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert mse_loss(pred, gt).item() == pytest.approx((0.25 + 0.0625) / 4)
    valid = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert mse_loss(pred, gt, valid).item() == pytest.approx(0.25 / 2)
    assert mse_loss(gt, gt).item() == 0.0
    with pytest.raises(ValueError):
        mse_loss(pred, gt[:1])


@pytest.mark.parametrize(
    "kw",
    [{"epochs": 0}, {"batch_size": 0}, {"lr_min": 1e-2}, {"adam_beta1": 1.0}],
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw).validate()


def test_train_config_round_trip():
    cfg = TrainConfig(epochs=3, seed=5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_writes_log_and_checkpoints(tmp_path):
    data = small_set()
    cfg = TrainConfig(epochs=3, batch_size=2, checkpoint_every=2)
    final = train(small_model(), data, cfg, tmp_path, eval_set=data)
    rows = read_log(tmp_path / "train_log.csv")
    assert rows[0] == ["epoch", "lr", "loss"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert float(rows[1][1]) == 1e-3
    assert all(math.isfinite(float(r[2])) for r in rows[1:])
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["best", "epoch_0002", "final"]
    meta = read_meta(final)
    assert meta["epoch"] == 3 and meta["training"]["epochs"] == 3
    assert set(meta["metrics"]) >= {"miou", "niou", "pd", "fa_e6"}


def test_training_reduces_loss(tmp_path):
    data = small_set()
    train(small_model(**FLAGS_OFF), data, TrainConfig(epochs=15, batch_size=4), tmp_path)
    losses = [float(r[2]) for r in read_log(tmp_path / "train_log.csv")[1:]]
    assert losses[-1] < losses[0]


def test_training_is_deterministic(tmp_path):
    data = small_set()
    cfg = TrainConfig(epochs=2, batch_size=3)
    train(small_model(), data, cfg, tmp_path / "a")
    train(small_model(), data, cfg, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()


def test_resume_matches_uninterrupted(tmp_path):
    data = small_set()
    cfg = TrainConfig(epochs=4, batch_size=2, checkpoint_every=2)
    train(small_model(**FLAGS_OFF), data, cfg, tmp_path / "full")

    train(small_model(**FLAGS_OFF), data, TrainConfig(epochs=4, batch_size=2, checkpoint_every=2), tmp_path / "part")
    ck = tmp_path / "part" / "checkpoints" / "epoch_0002"
    model, meta = load_checkpoint(ck)
    (tmp_path / "part" / "train_log.csv").write_text(
        "\n".join((tmp_path / "part" / "train_log.csv").read_text().splitlines()[:3]) + "\n"
    )
    train(model, data, cfg, tmp_path / "part", resume_from=ck, start_epoch=meta["epoch"])

    full = read_log(tmp_path / "full" / "train_log.csv")
    part = read_log(tmp_path / "part" / "train_log.csv")
    assert [r[:2] for r in full] == [r[:2] for r in part]
    for a, b in zip(full[1:], part[1:]):
        assert float(a[2]) == pytest.approx(float(b[2]), rel=1e-5)


def test_nonfinite_loss_raises(tmp_path):
    model = small_model(**FLAGS_OFF)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="epoch 0"):
        train(model, small_set(), TrainConfig(epochs=1), tmp_path)


def test_empty_training_set(tmp_path):
    with pytest.raises(ValueError):
        train(small_model(), [], TrainConfig(epochs=1), tmp_path)


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------

def test_predict_unpads_to_original_size():
    rng = np.random.default_rng(0)
    samples = [
        SegmentationSample(f"s{i}", rng.random(shape).astype(np.float32), np.zeros(shape, np.uint8))
        for i, shape in enumerate([(30, 30), (32, 28), (30, 30)])
    ]
    probs = predict(small_model(), samples)
    assert [p.shape for p in probs] == [(30, 30), (32, 28), (30, 30)]
    assert all(((p >= 0) & (p <= 1)).all() for p in probs)


def test_predict_batching_does_not_change_output():
    data = small_set(3)
    model = small_model()
    a = predict(model, data, batch_size=1)
    b = predict(model, data, batch_size=8)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-6)


def test_evaluate_report():
    data = small_set(3)
    report = evaluate(small_model(), data)
    assert isinstance(report, MetricReport)
    assert report.n_images == 3
    assert 0 <= report.miou <= 1 and report.fa >= 0
    assert len(report.tp) == 3
    with pytest.raises(ValueError):
        evaluate(small_model(), [])


def test_overlays(tmp_path):
    from PIL import Image

    data = small_set(2)
    probs = [s.mask.astype(float) for s in data]
    write_overlays(data, probs, 0.5, tmp_path)
    for s in data:
        img = np.asarray(Image.open(tmp_path / f"{s.id}.png"))
        assert img.shape == (64, 64, 3)
        # prediction equals ground truth, so the red contour covers the green one
        assert ((img == (255, 0, 0)).all(-1)).any()
