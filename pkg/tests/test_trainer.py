import hashlib
import json

import numpy as np
import pytest
import torch

from treeadapt import data as D
from treeadapt.trainer import (
    RECORD_KEYS,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    lambda_schedule,
    load_model,
    lr_at,
    make_paired_batches,
    sample_few_shot,
    steps_per_epoch,
    train,
)


@pytest.fixture(scope="module")
def source():
    return D.generate_synthetic(D.SOURCE_PROFILE, 8, 64, seed=10)


@pytest.fixture(scope="module")
def target():
    return D.generate_synthetic(D.TARGET_PROFILE, 6, 64, seed=11)


def small_cfg(**kw):
    base = dict(profile="toy", batch_size=4, epochs=2, seed=0, ot_iterations=20)
    base.update(kw)
    return TrainConfig(**base)


def _params_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


# --- configuration and schedules ----------------------------------------

def test_defaults_follow_the_published_setup():
    cfg = TrainConfig()
    assert (cfg.k_shot, cfg.batch_size, cfg.epochs, cfg.lr, cfg.weight_decay) == (5, 8, 200, 1e-4, 1e-5)
    assert (cfg.lambda_start, cfg.lambda_after, cfg.lambda_switch_epoch) == (0.1, 1.0, 100)
    assert cfg.grad_clip == 10.0
    assert TrainConfig(profile="paper").grad_clip is None
    assert TrainConfig(profile="paper").crop_size == 256


def test_config_validation_and_roundtrip():
    for bad in (dict(k_shot=0), dict(lr=0), dict(mode="joint"), dict(loss="l1"), dict(profile="big")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(seed=3, dab_scales=(4,))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"seed": 1, "learning_rate": 2})


def test_lambda_schedule():
    cfg = TrainConfig(profile="paper")
    assert lambda_schedule(50, cfg) == 0.1
    assert lambda_schedule(99, cfg) == 0.1
    assert lambda_schedule(100, cfg) == 1.0
    toy = TrainConfig(lambda_switch_epoch=5)
    assert lambda_schedule(4, toy) == 0.1
    assert lambda_schedule(5, toy) == 1.0


def test_learning_rate_schedules():
    cfg = TrainConfig(lr=1e-3, epochs=10)
    assert [lr_at(e, cfg) for e in (0, 9)] == [1e-3, 1e-3]
    cos = TrainConfig(lr=1e-3, epochs=10, lr_schedule="cosine")
    assert lr_at(0, cos) == 1e-3
    assert lr_at(5, cos) == pytest.approx(5e-4)
    assert all(lr_at(e, cos) > lr_at(e + 1, cos) > 0 for e in range(9))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")


def test_few_shot_sampling():
    pool = D.generate_synthetic(D.TARGET_PROFILE, 12, 32, seed=0)
    assert {s.name for s in sample_few_shot(pool, 12, 0)} == {s.name for s in pool}
    a = [s.name for s in sample_few_shot(pool, 5, 3)]
    assert a == [s.name for s in sample_few_shot(pool, 5, 3)]
    assert len(set(a)) == 5
    with pytest.raises(ValueError):
        sample_few_shot(pool, 13, 0)


def test_few_shot_seeds_differ_on_large_pool():
    ids = list(range(100))
    pick = lambda seed: sorted(np.random.default_rng(seed).choice(len(ids), 5, replace=False).tolist())  # noqa: E731
    pool = [D.make_sample(np.zeros((8, 8, 3)), [], name=str(i)) for i in ids]
    s0 = sorted(int(s.name) for s in sample_few_shot(pool, 5, 0))
    s1 = sorted(int(s.name) for s in sample_few_shot(pool, 5, 1))
    assert s0 == pick(0) and s1 == pick(1)
    assert s0 != s1


# --- batching -------------------------------------------------------------

def test_steps_per_epoch():
    assert steps_per_epoch(160, 8) == 20
    assert steps_per_epoch(161, 8) == 21


def test_single_target_image_is_augmented_per_draw(source, target):
    cfg = small_cfg(batch_size=8, crop_size=48)
    bs, bt = next(make_paired_batches(source, target[:1], cfg, epoch=0))
    assert len(bs) == len(bt) == 8
    assert all(t.image.shape == (48, 48, 3) for t in bt)
    assert len({t.image.tobytes() for t in bt}) > 1


def test_batches_are_reproducible(source, target):
    def digest(epoch):
        h = hashlib.sha256()
        for bs, bt in make_paired_batches(source, target, small_cfg(), epoch):
            for s in bs + bt:
                h.update(s.image.tobytes())
                h.update(s.points.tobytes())
        return h.hexdigest()

    assert digest(0) == digest(0)
    assert digest(0) != digest(1)
    with pytest.raises(ValueError):
        next(make_paired_batches([], target, small_cfg()))


# --- single step ----------------------------------------------------------

def _fixed_batch(source, target):
    return next(make_paired_batches(source, target, small_cfg(), 0))


def test_record_fields_resum_to_total(source, target):
    tr = Trainer(small_cfg())
    rec = tr.train_step(*_fixed_batch(source, target), epoch=0)
    assert tuple(rec) == RECORD_KEYS
    tdm = rec["l_tdm_s"] + rec["l_tdm_t"] + rec["l_tdm_st"]
    total = tdm + rec["l_hcdfa"] + rec["lambda"] * rec["l_adv_g"]
    assert abs(total - rec["l_total"]) <= 1e-6 * max(1.0, abs(rec["l_total"]))
    assert rec["l_hcdfa"] == pytest.approx(0.3 * rec["l_ds"] + 0.7 * rec["l_dt"], rel=1e-5)
    assert rec["lambda"] == 0.1


def test_small_step_descends(source, target):
    bs, bt = _fixed_batch(source, target)
    from treeadapt.trainer import to_tensors

    tr = Trainer(small_cfg(lr=1e-6, use_adv=False, grad_clip=0, weight_decay=0.0))
    tr.model.eval()  # freeze batch-norm statistics so the two evaluations see the same function
    img_s, dens_s = to_tensors(bs)
    img_t, dens_t = to_tensors(bt)
    before, _, _ = tr.generator_loss(img_s, dens_s, img_t, dens_t, 0.0)
    tr.opt_g.zero_grad()
    before.backward()
    tr.opt_g.step()
    with torch.no_grad():
        after, _, _ = tr.generator_loss(img_s, dens_s, img_t, dens_t, 0.0)
    assert after.item() < before.item()


def test_zero_lambda_with_frozen_discriminator_matches_no_adversary(source, target):
    batches = list(make_paired_batches(source, target, small_cfg(), 0))
    a = Trainer(small_cfg(lambda_start=0.0, lambda_after=0.0, disc_lr=1e-12))
    for p in a.disc.parameters():
        p.requires_grad_(False)
    a.opt_d = torch.optim.SGD([torch.zeros(1, requires_grad=True)], lr=0.0)
    b = Trainer(small_cfg(use_adv=False))
    for step, (bs, bt) in enumerate(batches):
        a.train_step(bs, bt, 0, step)
        b.train_step(bs, bt, 0, step)
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


def test_discriminator_step_leaves_generator_untouched(source, target):
    tr = Trainer(small_cfg())
    bs, bt = _fixed_batch(source, target)
    from treeadapt.trainer import to_tensors

    img_s, dens_s = to_tensors(bs)
    img_t, dens_t = to_tensors(bt)
    _, _, out = tr.generator_loss(img_s, dens_s, img_t, dens_t, 0.1)
    g_before, d_before = _params_hash(tr.model), _params_hash(tr.disc)
    tr.discriminator_step(out)
    assert _params_hash(tr.model) == g_before
    assert _params_hash(tr.disc) != d_before


def test_source_only_mode_uses_one_subnet(source, target):
    tr = Trainer(small_cfg(mode="source_only"))
    rec = tr.train_step(*_fixed_batch(source, target), epoch=0)
    assert rec["l_tdm_t"] == rec["l_tdm_st"] == rec["l_hcdfa"] == rec["l_adv_g"] == 0
    assert rec["l_total"] == pytest.approx(rec["l_tdm_s"])


def test_divergence_is_reported(source, target):
    tr = Trainer(small_cfg())
    bs, bt = _fixed_batch(source, target)
    with torch.no_grad():
        tr.model.decoder.deb.conv3.weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as exc:
        tr.train_step(bs, bt, 0)
    assert "epoch" in exc.value.record


# --- loops, determinism, checkpoints -------------------------------------

def test_same_seed_gives_identical_logs(source, target, tmp_path):
    logs = []
    for run in ("a", "b"):
        tr = Trainer(small_cfg(epochs=1))
        tr.fit(source, target, log_path=tmp_path / f"{run}.jsonl")
        logs.append((tmp_path / f"{run}.jsonl").read_bytes())
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == steps_per_epoch(len(source), 4)


def test_checkpoint_roundtrip_and_resume(source, target, tmp_path):
    tr = Trainer(small_cfg(epochs=2, checkpoint_every=1))
    tr.fit(source, target, ckpt_dir=tmp_path)
    assert (tmp_path / "checkpoint_epoch0000.ckpt").exists()
    path = tmp_path / "checkpoint_last.ckpt"
    back = Trainer.load(path)
    assert back.epoch == 1
    assert back.cfg == tr.cfg
    for (ka, va), (kb, vb) in zip(tr.model.state_dict().items(), back.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    for (ka, va), (kb, vb) in zip(tr.disc.state_dict().items(), back.disc.state_dict().items()):
        assert torch.equal(va, vb)
    x = torch.rand(2, 3, 64, 64)
    assert torch.equal(tr.predict(x), back.predict(x))
    with torch.no_grad():
        assert torch.equal(load_model(path).predict(x)[:, 0], tr.predict(x))
    sa, sb = tr.opt_g.state_dict(), back.opt_g.state_dict()
    for pid in sa["state"]:
        for k, v in sa["state"][pid].items():
            assert torch.equal(torch.as_tensor(v), torch.as_tensor(sb["state"][pid][k]))
            assert torch.as_tensor(v).shape == torch.as_tensor(sb["state"][pid][k]).shape
    # resumed run continues with the next epoch and matches an uninterrupted run
    back.fit(source, target, epochs=3)
    assert back.epoch == 2 and back.history[0]["epoch"] == 2
    tr.fit(source, target, epochs=3)
    assert tr.history[-len(back.history):] == back.history


def test_train_entry_point(tmp_path):
    src = D.generate_synthetic(D.SOURCE_PROFILE, 8, 64, seed=0)
    tgt = D.generate_synthetic(D.TARGET_PROFILE, 6, 64, seed=1)
    D.save_dataset(src, tmp_path / "src", "train")
    D.save_dataset(tgt, tmp_path / "tgt", "train")
    cfg = small_cfg(epochs=1, k_shot=2)
    ckpt = train(cfg, tmp_path / "src", tmp_path / "tgt", tmp_path / "run")
    assert ckpt.exists()
    assert len(json.loads((tmp_path / "run" / "few_shot.json").read_text())) == 2
    rows = [json.loads(line) for line in (tmp_path / "run" / "loss_log.jsonl").read_text().splitlines()]
    assert set(rows[0]) == set(RECORD_KEYS)
    with pytest.raises(FileNotFoundError):
        train(cfg, tmp_path / "missing", tmp_path / "tgt", tmp_path / "run2")


@pytest.mark.slow
def test_short_toy_run_halves_tdm():
    src = D.generate_synthetic(D.SOURCE_PROFILE, 16, 64, seed=20)
    tgt = D.generate_synthetic(D.TARGET_PROFILE, 5, 64, seed=21)
    tr = Trainer(TrainConfig(profile="toy", batch_size=8, epochs=20, lr=1e-3, seed=0))
    hist = tr.fit(src, tgt)
    tdm = [r["l_tdm_s"] + r["l_tdm_t"] + r["l_tdm_st"] for r in hist]
    first, last = np.mean(tdm[:2]), np.mean(tdm[-2:])
    assert last <= 0.5 * first, (first, last)
