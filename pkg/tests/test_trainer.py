import math

import numpy as np
import pytest
import torch

from dalf.errors import TrainingError
from dalf.geometry import FlowField
from dalf.network import DALFNet
from dalf.synthgen import PairSource, SynthConfig, TrainingPair
from dalf.trainer import TrainConfig, Trainer, load_model, run_stage, total_loss

CROP = 64


def _source(seed=3):
    return PairSource(None, seed=seed, config=SynthConfig(crop=CROP))


def _config(**kw):
    base = dict(crop=CROP, iterations_stage1=40, iterations_stage2=40, seed=2, lr=1e-3,
                checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


def _model(config, seed=0):
    torch.manual_seed(seed)
    model = DALFNet(config.model_config())
    with torch.no_grad():  # positive head bias so detections get accepted from step 0
        model.decoder.head.bias.fill_(2.0)
    return model


def _params(model):
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def test_total_loss_examples():
    assert total_loss(1.0, 0.01, {"distinct": 2.0}, 0.005) == pytest.approx(1.02)
    assert total_loss(0.0, 0.0, {"distinct": 0.0}, 0.005) == 0.0
    assert total_loss(0.7, -0.1, {"distinct": 5.0, "fused": 3.0}, 0.0) == pytest.approx(0.6)
    assert total_loss(1.0, 0.0, {"a": 1.0, "b": 2.0, "c": 3.0}, 0.5) == pytest.approx(4.0)


def test_total_loss_nan_aborts():
    with pytest.raises(TrainingError, match="L_k"):
        total_loss(float("nan"), 0.0, {}, 0.005)
    with pytest.raises(TrainingError):
        total_loss(torch.tensor(1.0), 0.0, {"distinct": torch.tensor(float("inf"))}, 0.005)


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.iterations_stage1, cfg.iterations_stage2, cfg.grad_accum) == (80_000, 100_000, 4)
    assert (cfg.lam, cfg.tau, cfg.c, cfg.margin, cfg.cell, cfg.n_c) == \
        (0.005, 1.5, -7e-5, 0.5, 8, 64)
    with pytest.raises(ValueError):
        TrainConfig(stage=3)
    with pytest.raises(ValueError):
        TrainConfig(distinct_only=True, invariant_only=True)


def test_ablation_flags():
    assert TrainConfig.ablation("C1").loss_kinds() == ("distinct",)
    assert TrainConfig.ablation("C2").loss_kinds() == ("invariant",)
    c3 = TrainConfig.ablation("C3")
    assert not c3.staged and c3.loss_kinds() == ("distinct", "invariant", "fused")
    assert not c3.model_config().attention
    c5 = TrainConfig.ablation("C5")
    assert c5.loss_kinds(1) == ("distinct",) and c5.loss_kinds(2)[-1] == "fused"
    assert c5.model_config().attention


def test_schedule_points():
    cfg = _config(iterations_stage1=40, iterations_stage2=60)
    tr = Trainer(DALFNet(cfg.model_config()), cfg)
    assert tr.difficulty(60) == 1.0
    assert tr.difficulty(0) == pytest.approx(cfg.d0)
    assert not tr.gate_enabled(69) and tr.gate_enabled(71)


def test_accumulation_updates_every_fourth_step():
    cfg = _config()
    model = _model(cfg)
    tr = Trainer(model, cfg, _source())
    before = _params(model)
    flags = []
    for _ in range(8):
        rec = tr.step()
        flags.append(rec.updated)
        now = _params(model)
        changed = any(not torch.equal(before[k], now[k]) for k in now)
        assert changed == rec.updated
        before = now
    assert flags == [False, False, False, True] * 2


def test_breakdown_identity_and_descriptor_path():
    cfg = _config()
    tr = Trainer(_model(cfg), cfg, _source())
    recs = [tr.step() for _ in range(4)]
    assert any(r.n_desc >= 2 and "distinct" in r.l_d for r in recs)
    for r in recs:
        assert abs(r.total - (r.l_k + r.l_p + cfg.lam * sum(r.l_d.values()))) < 1e-9


def test_zero_correspondences_skips_descriptor_loss():
    cfg = _config()
    tr = Trainer(_model(cfg), cfg)
    img = np.random.default_rng(0).uniform(size=(CROP, CROP))
    f = FlowField.identity(CROP, CROP)
    pair = TrainingPair(img, img, FlowField(f.map, np.zeros_like(f.valid)), 0.2)
    rec = tr.step(pair)
    assert rec.l_d == {} and rec.n_desc == 0
    assert rec.l_p != 0.0


def test_stage2_freezes_encoder(tmp_path):
    cfg1 = _config(iterations_stage1=4)
    ckpt1 = run_stage(cfg1, _source(), tmp_path / "s1", model=_model(cfg1))
    cfg2 = _config(iterations_stage1=4, iterations_stage2=4, stage=2)
    final = run_stage(cfg2, _source(), tmp_path / "s2", stage1_checkpoint=ckpt1)
    m1, m2 = load_model(ckpt1), load_model(final)
    s1, s2 = m1.state_dict(), m2.state_dict()
    enc = [k for k in s2 if k.startswith("encoder.")]
    assert enc and all(torch.equal(s1[k], s2[k]) for k in enc)
    assert any(not torch.equal(s1[k], s2[k]) for k in s2 if k.startswith("decoder."))
    assert m2.stage == 2 and m2.iteration == 8


def test_stage2_requires_stage1_checkpoint(tmp_path):
    cfg2 = _config(stage=2)
    with pytest.raises(TrainingError):
        run_stage(cfg2, _source(), tmp_path, stage1_checkpoint=None)
    with pytest.raises(TrainingError):
        run_stage(cfg2, _source(), tmp_path, stage1_checkpoint=tmp_path / "missing.ckpt")


def _trajectory(steps, seed=2):
    cfg = _config(seed=seed)
    tr = Trainer(_model(cfg), cfg, _source())
    return [tr.step().total for _ in range(steps)], tr.model


def test_same_seed_same_trajectory():
    a, ma = _trajectory(100)
    b, mb = _trajectory(100)
    assert a == b
    pa, pb = _params(ma), _params(mb)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)


def test_exact_resume(tmp_path):
    cfg = _config(iterations_stage1=14)
    straight = Trainer(_model(cfg), cfg, _source())
    straight.run()
    part = Trainer(_model(cfg), cfg, _source())
    part.run(n_steps=6)  # stops mid accumulation window
    path = part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(path, _source()).run()
    assert resumed.iteration == straight.iteration == 14
    assert [r.total for r in resumed.history[-8:]] == [r.total for r in straight.history[-8:]]
    pa, pb = _params(straight.model), _params(resumed.model)
    assert all(torch.equal(pa[k], pb[k]) for k in pa)
    sa, sb = straight.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_log_file_written(tmp_path):
    cfg = _config(iterations_stage1=3)
    run_stage(cfg, _source(), tmp_path, model=_model(cfg), log_file=tmp_path / "log.txt")
    lines = (tmp_path / "log.txt").read_text().splitlines()
    assert lines[0].split()[:3] == ["iteration", "L_k", "L_p"]
    assert len(lines) == 4
    assert math.isfinite(float(lines[-1].split()[-1]))
