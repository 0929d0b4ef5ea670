import numpy as np
import pytest

import ccpc.tensor as T
from ccpc import training as tr
from ccpc.models import GeneratorConfig
from ccpc.shapes import ShapeFamily, generate_dataset
from ccpc.tensor import Tape, Tensor
from ccpc.training import (
    CheckpointRecord,
    LossInputs,
    LossWeights,
    TrainConfig,
    TrainingDiverged,
    TrainingError,
    adv_loss_discriminator,
    adv_loss_generator,
    cloud_extents,
    gradient_penalty,
    reg_loss,
    select_checkpoint,
    total_losses,
    train,
)

TINY_GEN = GeneratorConfig(
    latent_dim=8, label_dim=3, latent_embed=6, label_embed=2,
    features=(8, 8, 3), branching=(1, 4, 4), support=2,
)


def tiny_dataset(count=24, seed=0):
    fam = ShapeFamily(kind="box")
    return generate_dataset(fam, count, n_points=16, seed=seed)


def central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy(); xm = x.copy()
        xp[idx] += h; xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# loss pieces

def test_generator_adv_loss():
    assert adv_loss_generator(Tensor([1.0, 3.0])).item() == -2.0
    assert adv_loss_generator(Tensor([0.0, 0.0, 0.0])).item() == 0.0
    rng = np.random.default_rng(0)
    s = rng.normal(size=32)
    assert adv_loss_generator(Tensor(s)).item() == pytest.approx(-s.mean(), rel=1e-12)


def test_discriminator_adv_loss():
    zero = Tensor(np.zeros(()))
    assert adv_loss_discriminator(Tensor([0.0]), Tensor([1.0]), zero, 10.0).item() == -1.0
    s = Tensor([0.3, -0.4])
    assert adv_loss_discriminator(s, s, zero, 10.0).item() == 0.0
    gp = Tensor(np.asarray(0.7))
    base = adv_loss_discriminator(Tensor([0.1]), Tensor([0.2]), Tensor(np.asarray(0.0)), 1.0).item()
    for lam in (1.0, 5.0, 10.0):
        v = adv_loss_discriminator(Tensor([0.1]), Tensor([0.2]), gp, lam).item()
        assert v == pytest.approx(base + lam * 0.7, rel=1e-6)


def test_reg_loss():
    y = np.array([[0.1, 0.2, 0.3]])
    assert reg_loss(y, y).item() == 0.0
    assert reg_loss(np.array([[3.0, 4.0, 0.0]]), np.zeros((1, 3))).item() == 5.0
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    expected = np.mean([np.linalg.norm(r) for r in a - b])
    assert reg_loss(a, b).item() == pytest.approx(expected, rel=1e-6)


def test_cloud_extents_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 10, 3))
    out = cloud_extents(Tensor(x))
    np.testing.assert_allclose(out.data, x.max(axis=1) - x.min(axis=1), rtol=1e-12)


# ---------------------------------------------------------------------------
# gradient penalty

def test_penalty_zero_for_unit_gradient_score():
    n = 20
    w = np.full(3, 1.0)
    w = w / np.linalg.norm(w) * np.sqrt(n)

    def score_fn(xh):
        pooled = xh.mean(axis=1)  # [B, 3]
        return T.matmul(pooled, Tensor(w.reshape(3, 1))).reshape(pooled.shape[0])

    rng = np.random.default_rng(3)
    xr = rng.normal(size=(4, n, 3))
    xg = rng.normal(size=(4, n, 3))
    with Tape():
        pen = gradient_penalty(score_fn, xr, xg, np.random.default_rng(4))
    assert pen.item() == pytest.approx(0.0, abs=1e-12)


def test_penalty_one_for_constant_score():
    def score_fn(xh):
        return T.scale(xh.sum(axis=(1, 2) if False else 1).sum(axis=1), 0.0)

    rng = np.random.default_rng(5)
    xr = rng.normal(size=(3, 8, 3))
    xg = rng.normal(size=(3, 8, 3))
    with Tape():
        pen = gradient_penalty(score_fn, xr, xg, np.random.default_rng(6))
    assert pen.item() == pytest.approx(1.0, rel=1e-12)


def test_penalty_gradient_matches_fd_two_layer():
    rng = np.random.default_rng(7)
    w1v = rng.normal(size=(3, 6)) * 0.6
    w2v = rng.normal(size=(6, 1)) * 0.6
    xr = rng.normal(size=(4, 5, 3))
    xg = rng.normal(size=(4, 5, 3))

    def penalty_value(w1a, w2a):
        w1, w2 = Tensor(w1a), Tensor(w2a)

        def score_fn(xh):
            b, n, _ = xh.shape
            h = T.leaky_relu(T.matmul(xh.reshape(b * n, 3), w1))
            return T.matmul(h.reshape(b, n, 6).max(axis=1), w2).reshape(b)

        with Tape():
            pen = gradient_penalty(score_fn, xr, xg, np.random.default_rng(8))
        return pen.item()

    w1, w2 = Tensor(w1v), Tensor(w2v)

    def score_fn(xh):
        b, n, _ = xh.shape
        h = T.leaky_relu(T.matmul(xh.reshape(b * n, 3), w1))
        return T.matmul(h.reshape(b, n, 6).max(axis=1), w2).reshape(b)

    with Tape() as tape:
        pen = gradient_penalty(score_fn, xr, xg, np.random.default_rng(8))
        gs = T.grad(pen, [w1, w2], tape)

    fd1 = central_fd(lambda w: penalty_value(w, w2v), w1v)
    fd2 = central_fd(lambda w: penalty_value(w1v, w), w2v)
    for g, fd in ((gs[0].data, fd1), (gs[1].data, fd2)):
        denom = max(np.abs(fd).max(), 1e-8)
        assert np.abs(g - fd).max() / denom < 1e-3


def test_penalty_requires_active_tape():
    with pytest.raises(TrainingError):
        gradient_penalty(lambda x: x.sum(axis=1).sum(axis=1),
                         np.zeros((2, 4, 3)), np.ones((2, 4, 3)), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# total losses and weighting

def _quantities(rng, v_yhat=None):
    s_gen = Tensor(rng.normal(size=8))
    s_real = Tensor(rng.normal(size=8))
    y_cond = rng.uniform(size=(8, 3)).astype(np.float32)
    y_real = rng.uniform(size=(8, 3)).astype(np.float32)
    yhat_gen = Tensor(v_yhat if v_yhat is not None else rng.uniform(size=(8, 3)).astype(np.float32))
    yhat_real = Tensor(rng.uniform(size=(8, 3)).astype(np.float32))
    return LossInputs(scores_gen=s_gen, scores_real=s_real, gp=Tensor(np.asarray(0.3, np.float32)),
                      y_cond=y_cond, y_real=y_real, yhat_gen=yhat_gen, yhat_real=yhat_real,
                      y_gen=Tensor(y_cond.copy()), lambda_gp=10.0, lambda_reg=1.0)


def test_main_loss_with_zero_v_is_plain_sum():
    rng = np.random.default_rng(9)
    q = _quantities(rng)
    weights = LossWeights()
    lg, ld = total_losses("main", weights, q)
    exp_g = adv_loss_generator(q.scores_gen).item() + reg_loss(q.y_cond, q.yhat_gen).item()
    exp_d = (adv_loss_discriminator(q.scores_gen, q.scores_real, q.gp, 10.0).item()
             + reg_loss(q.y_real, q.yhat_real).item())
    assert lg.item() == pytest.approx(exp_g, rel=1e-5)
    assert ld.item() == pytest.approx(exp_d, rel=1e-5)


def test_main_loss_zero_reg_reduces_to_adversarial():
    rng = np.random.default_rng(10)
    q = _quantities(rng)
    q.yhat_gen = Tensor(np.asarray(q.y_cond))  # exact prediction -> reg 0
    lg, _ = total_losses("main", LossWeights(), q)
    assert lg.item() == pytest.approx(adv_loss_generator(q.scores_gen).item(), abs=1e-7)


def test_variant_a_perfect_generator_zeroes_reg():
    rng = np.random.default_rng(11)
    q = _quantities(rng)
    q.y_gen = Tensor(np.asarray(q.y_cond))  # measured extents equal the request
    lg, _ = total_losses("variant_a", LossWeights(), q)
    assert lg.item() == pytest.approx(adv_loss_generator(q.scores_gen).item(), abs=1e-7)


def test_variant_b_discriminator_mixes_cond_half():
    rng = np.random.default_rng(12)
    q = _quantities(rng)
    _, ld = total_losses("variant_b", LossWeights(), q)
    expected = (adv_loss_discriminator(q.scores_gen, q.scores_real, q.gp, 10.0).item()
                + 0.5 * (reg_loss(q.y_real, q.yhat_real).item()
                         + reg_loss(q.y_cond, q.yhat_gen).item()))
    assert ld.item() == pytest.approx(expected, rel=1e-5)


def test_unweighted_variants():
    rng = np.random.default_rng(13)
    q = _quantities(rng)
    lg, ld = total_losses("vanilla_cgan", None, q)
    assert lg.item() == pytest.approx(adv_loss_generator(q.scores_gen).item())
    assert ld.item() == pytest.approx(
        adv_loss_discriminator(q.scores_gen, q.scores_real, q.gp, 10.0).item())
    q.lambda_reg = 2.5
    lg, ld = total_losses("regression_cgan", None, q)
    assert lg.item() == pytest.approx(
        adv_loss_generator(q.scores_gen).item() + 2.5 * reg_loss(q.y_cond, q.y_gen).item(),
        rel=1e-5)


def test_loss_weight_gradient_is_part_times_exp_plus_one():
    weights = LossWeights()
    weights.v_adv.value.data[...] = 0.37
    weights.v_reg.value.data[...] = -0.8
    l_adv_v, l_reg_v = 1.7, 0.45
    with Tape() as tape:
        loss = weights.apply(Tensor(np.asarray(l_adv_v, np.float32)),
                             Tensor(np.asarray(l_reg_v, np.float32)))
    grads = T.backward(loss, tape, accumulate=False)
    assert grads[weights.v_adv].item() == pytest.approx(l_adv_v * np.exp(0.37) + 1, rel=1e-5)
    assert grads[weights.v_reg].item() == pytest.approx(l_reg_v * np.exp(-0.8) + 1, rel=1e-5)


# ---------------------------------------------------------------------------
# config validation and selection

def test_config_variant_discriminator_compatibility():
    assert TrainConfig(variant="main").discriminator_variant == "dual"
    assert TrainConfig(variant="vanilla_cgan").discriminator_variant == "vanilla_concat"
    with pytest.raises(TrainingError):
        TrainConfig(variant="main", discriminator_variant="unconditioned")
    with pytest.raises(TrainingError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainingError):
        TrainConfig(variant="nope")


def test_checkpoint_selector_argmin_product():
    records = [
        CheckpointRecord(epoch=10, fpd=2.0, mse=1.0, path="a"),
        CheckpointRecord(epoch=20, fpd=1.0, mse=1.5, path="b"),
        CheckpointRecord(epoch=30, fpd=4.0, mse=0.1, path="c"),
    ]
    assert select_checkpoint(records).path == "c"
    for r in records:
        r.mse = float("nan")
    assert select_checkpoint(records).path == "b"  # FPD ordering for unconditioned runs


# ---------------------------------------------------------------------------
# training loop

def test_smoke_training_losses_finite_and_params_move(tmp_path):
    clouds = tiny_dataset(24)
    config = TrainConfig(epochs=2, batch_size=8, eval_every=1, sampling="dataset",
                         seed=1, eval_fraction=0.2)
    result = train(config, clouds, tmp_path / "run", gen_config=TINY_GEN)
    assert len(result.records) == 2
    for _, lg, ld in result.losses:
        assert np.isfinite(lg) and np.isfinite(ld)
    assert (tmp_path / "run" / "records.csv").exists()
    assert (tmp_path / "run" / "manifest.json").exists()


def test_training_deterministic_records(tmp_path):
    clouds = tiny_dataset(24)
    config = TrainConfig(epochs=2, batch_size=8, eval_every=1, sampling="kde",
                         seed=3, eval_fraction=0.2)
    r1 = train(config, clouds, tmp_path / "a", gen_config=TINY_GEN)
    r2 = train(config, clouds, tmp_path / "b", gen_config=TINY_GEN)
    assert [(r.epoch, r.fpd, r.mse) for r in r1.records] == \
           [(r.epoch, r.fpd, r.mse) for r in r2.records]
    assert r1.losses == r2.losses


@pytest.mark.parametrize("variant", ["variant_a", "variant_b", "vanilla_cgan",
                                     "regression_cgan", "backbone"])
def test_all_variants_run(tmp_path, variant):
    clouds = tiny_dataset(16)
    config = TrainConfig(epochs=1, batch_size=8, eval_every=1, sampling="dataset",
                         variant=variant, seed=4, eval_fraction=0.2)
    result = train(config, clouds, tmp_path / variant, gen_config=TINY_GEN)
    assert len(result.records) == 1
    if variant == "backbone":
        assert np.isnan(result.records[0].mse)
    else:
        assert np.isfinite(result.records[0].mse)


def test_regression_head_learns_quickly():
    clouds = generate_dataset(ShapeFamily(kind="box"), 64, n_points=32, seed=5)
    mse = tr.train_regression_head(clouds, steps=120, seed=0, batch_size=16)
    assert mse < 20.0


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(TrainingError):
        train(TrainConfig(), [], tmp_path / "x")


def test_adversarial_loss_zero_for_identical_batches():
    s = Tensor(np.random.default_rng(14).normal(size=16))
    assert adv_loss_discriminator(s, s, Tensor(np.zeros(())), 10.0).item() == 0.0
