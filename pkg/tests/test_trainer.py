import math

import numpy as np
import pytest
import torch

from uqdepth.datasets import generate_toy_colon
from uqdepth.fusion import ConfigError, DepthModel, ModelConfig
from uqdepth.losses import total_loss
from uqdepth.trainer import (
    Checkpoint,
    TrainConfig,
    apply_parameters,
    config_digest,
    finetune,
    load_checkpoint,
    lr_at,
    pretrain_branch,
    save_checkpoint,
    split_train_val,
    steps_per_epoch,
    train,
)

SMALL = ModelConfig(input_size=32)


@pytest.fixture(scope="module")
def samples():
    return generate_toy_colon(12, 32, seed=5)


def test_lr_schedule():
    cfg = TrainConfig()
    for e in range(25):
        assert lr_at(cfg, e) == pytest.approx(1e-4 * 0.9**e, rel=1e-12)


def test_lr_scheduler_matches(samples):
    cfg = TrainConfig(epochs=3, pretrain_epochs=0, batch_size=12, augment_p=0.0)
    ck = finetune((None, None), samples, cfg, SMALL)
    lr = ck.optimizer_state["param_groups"][0]["lr"]
    assert lr == pytest.approx(1e-4 * 0.9**3, rel=1e-12)


def test_steps_per_epoch():
    assert steps_per_epoch(16660, 10) == 1666
    assert steps_per_epoch(11, 10) == 2


def test_zero_epochs_return_initial_state(samples):
    cfg = TrainConfig(epochs=0, pretrain_epochs=0)
    pre = pretrain_branch("local", [], cfg, SMALL)
    assert pre.epoch == 0 and pre.history["epoch_loss"] == []
    again = pretrain_branch("local", [], cfg, SMALL)
    for k in pre.parameters:
        assert torch.equal(pre.parameters[k], again.parameters[k])
    ck = finetune((pre, None), [], cfg, SMALL)
    assert ck.epoch == 0 and ck.history["epoch_loss"] == []


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        pretrain_branch("global", [], TrainConfig(pretrain_epochs=1), SMALL)


def test_checkpoint_roundtrip(tmp_path, samples):
    cfg = TrainConfig(epochs=1, pretrain_epochs=0, augment_p=0.0)
    ck = finetune((None, None), samples, cfg, SMALL)
    save_checkpoint(ck, tmp_path / "m.uqck")
    back = load_checkpoint(tmp_path / "m.uqck")
    assert back.config_digest == ck.config_digest == config_digest(SMALL)
    assert back.epoch == 1 and back.model_config == ck.model_config
    for k, v in ck.parameters.items():
        assert torch.equal(back.parameters[k], v)
    opt = torch.optim.Adam(DepthModel(SMALL).parameters())
    opt.load_state_dict(back.optimizer_state)


def test_checkpoint_shape_mismatch_names_parameter(tmp_path):
    model = DepthModel(SMALL)
    params = {k: v.clone() for k, v in model.state_dict().items()}
    params["local_uncertainty.conv.weight"] = torch.zeros(1, 3, 3, 3)
    with pytest.raises(ValueError, match="local_uncertainty.conv.weight"):
        apply_parameters(model, params)
    del params["local_uncertainty.conv.weight"]
    with pytest.raises(ValueError, match="missing parameter 'local_uncertainty.conv.weight'"):
        apply_parameters(model, params)


def test_checkpoint_digest_warning(tmp_path):
    model = DepthModel(SMALL)
    ck = Checkpoint({k: v for k, v in model.state_dict().items()}, config_digest=config_digest(SMALL),
                    model_config=SMALL.to_dict())
    save_checkpoint(ck, tmp_path / "m.uqck")
    with pytest.warns(UserWarning, match="digest"):
        load_checkpoint(tmp_path / "m.uqck", expected_digest="0" * 16)


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.uqck").write_bytes(b"garbage" * 10)
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(tmp_path / "bad.uqck")
    model = DepthModel(SMALL)
    save_checkpoint(Checkpoint(dict(model.state_dict())), tmp_path / "t.uqck")
    raw = (tmp_path / "t.uqck").read_bytes()
    (tmp_path / "t.uqck").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ValueError, match="corrupt checkpoint"):
        load_checkpoint(tmp_path / "t.uqck")


def test_single_step_decreases_loss(samples):
    """With a tiny step in eval mode the loss on the same batch must go down."""
    torch.manual_seed(0)
    model = DepthModel(SMALL).double().eval()
    images = torch.from_numpy(np.stack([s.image for s in samples[:4]])).double()
    depths = torch.from_numpy(np.stack([s.depth for s in samples[:4]])).double()
    opt = torch.optim.SGD(model.parameters(), lr=1e-6)
    before, _ = total_loss(model(images), depths, TrainConfig().loss_weights)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after, _ = total_loss(model(images), depths, TrainConfig().loss_weights)
    assert float(after) < float(before.detach())


def test_config_text_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=4, seed=9, fusion_mode="w/o-map", deterministic=False)
    back = TrainConfig.from_text(cfg.to_text())
    assert back == cfg
    path = tmp_path / "c.txt"
    path.write_text("# comment\nepochs = 2\nlambda_edge = 0.5\n")
    loaded = TrainConfig.from_file(path, seed=3)
    assert (loaded.epochs, loaded.seed, loaded.loss_weights.lambda_edge) == (2, 3, 0.5)


@pytest.mark.parametrize("text", ["bogus = 1", "epochs = many", "no equals sign", "fusion_mode = nope"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        TrainConfig.from_text(text)


def test_no_map_mode_zeroes_map_weights():
    w = TrainConfig(fusion_mode="w/o-map").effective_loss_weights()
    assert w.lambda_global == 0 and w.lambda_local == 0 and w.lambda_depth == 1


def test_split_is_stable(samples):
    a = split_train_val(samples, 0.3)
    b = split_train_val(list(reversed(samples)), 0.3)
    assert {s.source_id for s in a[1]} == {s.source_id for s in b[1]}
    assert len(a[0]) + len(a[1]) == len(samples)


def test_train_writes_artifacts(tmp_path, samples):
    cfg = TrainConfig(epochs=1, pretrain_epochs=1, batch_size=6, val_fraction=0.3)
    res = train(samples, cfg, SMALL, out_dir=tmp_path)
    for name in ("checkpoint.uqck", "train_config.txt", "epoch_log.csv", "train_log.csv"):
        assert (tmp_path / name).exists()
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,step,total,map_global,map_local,depth,edge"
    assert all(math.isfinite(x) for x in res.checkpoint.history["epoch_loss"])
