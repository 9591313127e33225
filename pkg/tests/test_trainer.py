import numpy as np
import pytest
import torch

from caaegv.exceptions import BadConfig, NonFiniteLoss
from caaegv.losses import LossWeights
from caaegv.nets import params_hash
from caaegv.trainer import CAAETrainer, TrainConfig, TrainLog, sample_prior, simulate_ages, simulate_batch, train

ARCH = dict(enc_channels=(4, 8), gen_channels=(8, 4), dz_hidden=(8,), dimg_channels=(4, 8), fm_channels=(4, 8))


def config(**kw):
    base = dict(batch_size=4, epochs=1, seed=0, image_size=16, n_z=8, arch=ARCH)
    base.update(kw)
    return TrainConfig(**base)


def batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, (n, 16, 16, 3)).astype(np.float32), rng.integers(0, 10, n), rng.integers(0, 2, n))


def test_prior_range_and_moments():
    gen = torch.Generator().manual_seed(0)
    z = sample_prior(10_000, 50, gen)
    assert z.min() >= -1 and z.max() < 1
    assert abs(z.mean().item()) < 0.04
    assert torch.equal(sample_prior(5, 3, torch.Generator().manual_seed(1)),
                       sample_prior(5, 3, torch.Generator().manual_seed(1)))
    with pytest.raises(ValueError):
        sample_prior(0, 3, gen)


def test_config_validation():
    with pytest.raises(BadConfig):
        config(batch_size=0)
    with pytest.raises(BadConfig):
        config(learning_rate=float("nan"))
    with pytest.raises(BadConfig):
        config(epochs=-1)
    assert config(gender_on=False).arch_config().tile_s == 0
    cfg = config(weights={"lambda": 3.0})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_learning_rate_leaves_params_unchanged():
    trainer = CAAETrainer(config(learning_rate=0.0))
    before = params_hash(trainer.nets)
    trainer.train_step(*batch())
    assert params_hash(trainer.nets) == before


def test_train_step_determinism():
    reports = []
    for _ in range(2):
        trainer = CAAETrainer(config())
        reports.append([trainer.train_step(*batch(seed=i)).as_dict() for i in range(3)])
        reports[-1].append(params_hash(trainer.nets))
    assert reports[0] == reports[1]


def test_update_order_touches_only_its_network(monkeypatch):
    trainer = CAAETrainer(config(learning_rate=1e-2))
    nets = trainer.nets
    snapshots = []

    def wrap(opt, label):
        inner = opt.step

        def step(*a, **k):
            before = {n: params_hash(getattr(nets, n)) for n in ("encoder", "generator", "dz", "dimg", "fm")}
            out = inner(*a, **k)
            after = {n: params_hash(getattr(nets, n)) for n in before}
            snapshots.append((label, {n for n in before if before[n] != after[n]}))
            return out
        monkeypatch.setattr(opt, "step", step)

    wrap(trainer.opt_dimg, "dimg")
    wrap(trainer.opt_dz, "dz")
    wrap(trainer.opt_eg, "eg")
    trainer.train_step(*batch())
    assert snapshots == [("dimg", {"dimg"}), ("dz", {"dz"}), ("eg", {"encoder", "generator"})]


def test_dimg_loss_decreases_without_eg_pressure():
    cfg = config(weights=LossWeights(0.0, 0.0, 0.0), learning_rate=1e-3)
    trainer = CAAETrainer(cfg)
    x, g, s = batch(8, seed=5)
    losses = [trainer.train_step(x, g, s).adv_dimg for _ in range(50)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_fm_frozen_during_training():
    cfg = config(epochs=2)
    x, g, s = batch(8)
    trainer = CAAETrainer(cfg)
    h = trainer.nets.fm_hash()
    for _ in range(3):
        trainer.train_step(x, g, s)
    assert trainer.nets.fm_hash() == h


def test_gender_off_ignores_sex():
    x, g, s = batch(4, seed=2)
    trainer = CAAETrainer(config(gender_on=False))
    xt = torch.as_tensor(x).permute(0, 3, 1, 2)
    from caaegv.nets import label_block

    def losses(sexes):
        torch.manual_seed(0)
        labels = label_block(g, sexes, trainer.arch.tile_l, trainer.arch.tile_s)
        parts = {k: v.item() for k, v in trainer.eg_parts(xt, labels).items()}
        prior = sample_prior(4, 8, torch.Generator().manual_seed(0))
        return parts, trainer.dimg_loss(xt, labels).item(), trainer.dz_loss(xt, prior).item()

    assert losses(s) == losses(1 - s)


def test_vgg_off_ignores_feature_extractor():
    x, g, s = batch(4, seed=3)
    a = CAAETrainer(config(vgg_on=False))
    b = CAAETrainer(config(vgg_on=False))
    with torch.no_grad():
        for p in b.nets.fm.parameters():
            p.add_(torch.randn_like(p))
    assert a.train_step(x, g, s).as_dict() == b.train_step(x, g, s).as_dict()


def test_train_writes_checkpoints_and_log(tmp_path):
    x, g, s = batch(10)
    cfg = config(epochs=2, checkpoint_every=3)
    nets, log = train(cfg, x, g, s, out_dir=tmp_path)
    assert len(log) == 2 * 3
    assert (tmp_path / "final" / "weights.bin").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_000003", "step_000006"]
    back = TrainLog.read(tmp_path / "train_log.ndjson")
    assert [r["step"] for r in back.records] == list(range(1, 7))
    assert {"recon", "tv", "adv_dz", "adv_dimg", "feat", "total", "wall_clock"} <= set(back.records[0])


def test_zero_epochs_gives_empty_log(tmp_path):
    x, g, s = batch(4)
    nets, log = train(config(epochs=0), x, g, s, out_dir=tmp_path)
    assert len(log) == 0 and (tmp_path / "final").exists()


def test_train_is_deterministic():
    x, g, s = batch(9)
    runs = [train(config(epochs=2), x, g, s) for _ in range(2)]
    assert params_hash(runs[0][0]) == params_hash(runs[1][0])
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_clock"} for r in log.records]
    assert strip(runs[0][1]) == strip(runs[1][1])


def test_non_finite_loss_names_term():
    x, g, s = batch(4)
    x[0, 0, 0, 0] = np.nan
    trainer = CAAETrainer(config())
    with pytest.raises(NonFiniteLoss) as info:
        trainer.train_step(x, g, s)
    assert info.value.term == "adv_dimg" and info.value.step == 0


def test_simulate_ages_single_encode(monkeypatch):
    trainer = CAAETrainer(config())
    nets = trainer.nets
    calls = []
    orig = nets.encoder.forward
    monkeypatch.setattr(nets.encoder, "forward", lambda x: calls.append(1) or orig(x))
    x, _, _ = batch(1)
    out = simulate_ages(nets, x[0], "male")
    assert out.shape == (10, 16, 16, 3) and len(calls) == 1
    assert np.all(np.abs(out) <= 1)
    many = simulate_batch(nets, batch(3)[0], ["female", "male", "female"])
    assert many.shape == (3, 10, 16, 16, 3)


@pytest.mark.parametrize("gender_on,vgg_on", [(False, False), (True, False), (False, True), (True, True)])
def test_dz_prefers_prior_after_first_step(gender_on, vgg_on):
    from caaegv.dataset import load_images, synthetic_records
    from caaegv.experiment import FAST_ARCH
    from caaegv.nets import to_nchw

    recs = synthetic_records(160, seed=0, identities=100)
    x = to_nchw(load_images(recs, 64))
    g, s = np.array([r.group for r in recs]), np.array([r.sex_index for r in recs])
    trainer = CAAETrainer(TrainConfig(seed=0, image_size=64, n_z=50, batch_size=32, arch=dict(FAST_ARCH),
                                      gender_on=gender_on, vgg_on=vgg_on))
    trainer.train_step(x[:32], g[:32], s[:32])
    with torch.no_grad():
        z = trainer.nets.encoder(x[32:])
        prior = sample_prior(len(z), 50, torch.Generator().manual_seed(9))
        assert torch.sigmoid(trainer.nets.dz(prior)).mean() > torch.sigmoid(trainer.nets.dz(z)).mean()
