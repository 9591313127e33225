import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caaegv.exceptions import BadConfig, DomainError, ShapeMismatch
from caaegv.losses import (ABLATIONS, Ablation, LossReport, LossWeights, compose_eg_loss,
                           dimg_discriminator_loss, discriminator_loss_from_logits, dz_discriminator_loss,
                           feature_loss, generator_adversarial_loss, generator_loss_from_logits,
                           reconstruction_loss, tv_loss)


def tv_oracle(img):
    h, w, c = img.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                if i + 1 < h:
                    total += (img[i + 1, j, k] - img[i, j, k]) ** 2
                if j + 1 < w:
                    total += (img[i, j + 1, k] - img[i, j, k]) ** 2
    return total / (h * w)


def mse_oracle(a, b):
    flat_a, flat_b = a.ravel().tolist(), b.ravel().tolist()
    return sum((p - q) ** 2 for p, q in zip(flat_a, flat_b)) / len(flat_a)


def test_identities_are_exact_zero():
    x = np.random.default_rng(0).uniform(-1, 1, (8, 8, 3))
    assert reconstruction_loss(x, x).item() == 0.0
    assert tv_loss(np.full((8, 8, 3), 0.37)).item() == 0.0
    f = np.random.default_rng(1).normal(size=(2, 16, 4, 4))
    assert feature_loss(f, f).item() == 0.0


def test_worked_values():
    assert reconstruction_loss(np.zeros((2, 2, 3)), np.ones((2, 2, 3))).item() == pytest.approx(1.0, abs=1e-9)
    # one vertical edge between two 1-wide columns of 0 and 1 on a 2x2x1 image
    img = np.array([[[0.0], [1.0]], [[0.0], [1.0]]])
    assert tv_loss(img).item() == pytest.approx(0.5, abs=1e-9)
    half = np.full(4, 0.5)
    assert dz_discriminator_loss(half, half).item() == pytest.approx(1.38629, abs=1e-5)
    assert dz_discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert generator_adversarial_loss(half).item() == pytest.approx(0.69315, abs=1e-5)


def test_near_perfect_discriminator_limit():
    assert dz_discriminator_loss([1 - 1e-12], [1e-12]).item() < 1e-6
    assert generator_adversarial_loss([1e-6]).item() == pytest.approx(-math.log(1e-6), rel=1e-9)


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.5, -0.1, float("nan")])
def test_scores_outside_open_interval(bad):
    with pytest.raises(DomainError):
        dz_discriminator_loss([0.5, bad], [0.5])
    with pytest.raises(DomainError):
        dimg_discriminator_loss([0.5], [bad])
    with pytest.raises(DomainError):
        generator_adversarial_loss([bad])


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ShapeMismatch):
        feature_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeMismatch):
        tv_loss(np.zeros((4, 4)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-1, 1)))
def test_tv_matches_loop_oracle(img):
    assert tv_loss(img).item() == pytest.approx(tv_oracle(img), rel=1e-12, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mse_and_feature_match_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (2, 5, 5, 3)), rng.uniform(-1, 1, (2, 5, 5, 3))
    assert reconstruction_loss(a, b).item() == pytest.approx(mse_oracle(a, b), rel=1e-12)
    assert reconstruction_loss(a, b).item() == pytest.approx(reconstruction_loss(b, a).item(), rel=1e-15)
    assert feature_loss(a, b).item() == pytest.approx(mse_oracle(a, b), rel=1e-12)
    assert reconstruction_loss(a, b).item() >= 0


def test_tv_batch_is_mean_of_images():
    rng = np.random.default_rng(3)
    batch = rng.uniform(-1, 1, (4, 6, 6, 3))
    assert tv_loss(batch).item() == pytest.approx(np.mean([tv_oracle(b) for b in batch]), rel=1e-12)


# within +-15 the probability path stays above its log floor
@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-15, 15), min_size=1, max_size=8), st.lists(st.floats(-15, 15), min_size=1, max_size=8))
def test_logit_losses_match_probability_losses(real, fake):
    rl, fl = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)
    from_logits = discriminator_loss_from_logits(rl, fl).item()
    from_probs = dz_discriminator_loss(torch.sigmoid(rl), torch.sigmoid(fl)).item()
    assert from_logits == pytest.approx(from_probs, rel=1e-9, abs=1e-9)
    assert generator_loss_from_logits(fl).item() == pytest.approx(
        generator_adversarial_loss(torch.sigmoid(fl)).item(), rel=1e-9, abs=1e-9)
    assert generator_loss_from_logits(fl, saturating=True).item() == pytest.approx(
        generator_adversarial_loss(torch.sigmoid(fl), saturating=True).item(), rel=1e-9, abs=1e-9)


def test_discriminator_losses_loop_oracle():
    rng = np.random.default_rng(11)
    real, fake = rng.uniform(0.01, 0.99, 50), rng.uniform(0.01, 0.99, 50)
    expected = -sum(math.log(r) for r in real) / 50 - sum(math.log(1 - f) for f in fake) / 50
    assert dz_discriminator_loss(real, fake).item() == pytest.approx(expected, rel=1e-12)
    assert dimg_discriminator_loss(real, fake).item() == pytest.approx(expected, rel=1e-12)


def test_compose_examples():
    parts = LossReport(recon=0.1, tv=0.02, adv_gen_z=0.7, adv_gen_img=0.9, feat=3.0)
    w = LossWeights()
    full = compose_eg_loss(parts, w, Ablation(True, True))
    assert full == pytest.approx(100 * 0.1 + 10 * 0.02 + 0.7 + 0.9 + 0.01 * 3.0)
    no_v = compose_eg_loss(parts, w, Ablation(True, False))
    assert no_v == pytest.approx(100 * 0.1 + 10 * 0.02 + 0.7 + 0.9)
    nan_feat = compose_eg_loss({**parts.as_dict(), "feat": float("nan")}, w, Ablation(False, False))
    assert nan_feat == pytest.approx(no_v)


def test_weights_and_ablations():
    assert LossWeights().to_dict() == {"lambda": 100.0, "gamma": 10.0, "phi": 0.01}
    assert LossWeights.from_dict({"lambda": 5}).lambda_ == 5.0
    with pytest.raises(BadConfig):
        LossWeights(lambda_=-1)
    with pytest.raises(BadConfig):
        LossWeights(phi=float("inf"))
    assert [a.name for a in ABLATIONS.values()] == list(ABLATIONS)
    assert Ablation.from_name("CAAE-GV") == Ablation(True, True)
    with pytest.raises(BadConfig):
        Ablation.from_name("CAAE-X")
