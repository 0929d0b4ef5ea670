"""Losses, learned loss weighting, WGAN-GP, the alternating training loop,
and checkpoint selection by the FPD*MSE product.

Loss variants:

* ``main``: dual-head discriminator; generator regression pulls the
  discriminator's estimate of the generated cloud toward the requested
  label, discriminator regression is supervised on real clouds only.
* ``variant_a``: generator regression uses the measured extents of the
  generated cloud directly; discriminator regression averages the real
  half with a (measured-extent, estimate) half.
* ``variant_b``: discriminator regression averages the real half with a
  (requested-label, estimate) half.  Known to destabilize training; the
  implementation permits it but asserts nothing about convergence.
* ``vanilla_cgan``: label-concatenating discriminator, purely adversarial.
* ``regression_cgan``: unconditioned discriminator; the generator adds a
  fixed-weight regression between requested label and measured extents.
* ``backbone``: unconditioned generator and discriminator, adversarial
  only (the substrate the B1 baseline resamples from).

The ``main``/``variant_a``/``variant_b`` objectives are wrapped in the
learned-uncertainty form  L = L_adv*exp(v_adv) + v_adv + L_reg*exp(v_reg)
+ v_reg  with both v initialized to zero so the parts start equally
weighted.  The shared pair receives gradient from both players and is
stepped once per iteration by its own Adam.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import ccpc.tensor as T
from ccpc import conditioning as cond
from ccpc import metrics as M
from ccpc.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    PointNetDiscriminator,
    TreeGcnGenerator,
    init_discriminator,
    init_generator,
    save_model_config,
)
from ccpc.shapes import LabeledCloud
from ccpc.tensor import Adam, Parameter, Tape, Tensor

VARIANTS = ("main", "variant_a", "variant_b", "vanilla_cgan", "regression_cgan", "backbone")
WEIGHTED_VARIANTS = ("main", "variant_a", "variant_b")
VARIANT_DISCRIMINATOR = {
    "main": "dual",
    "variant_a": "dual",
    "variant_b": "dual",
    "vanilla_cgan": "vanilla_concat",
    "regression_cgan": "unconditioned",
    "backbone": "unconditioned",
}


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class LossWeights:
    """Trainable log-weights of the adversarial and regression parts."""

    def __init__(self, dtype=np.float32):
        self.v_adv = Parameter(np.zeros((), dtype=dtype), "loss.v_adv")
        self.v_reg = Parameter(np.zeros((), dtype=dtype), "loss.v_reg")

    def parameters(self):
        return [self.v_adv, self.v_reg]

    def apply(self, l_adv: Tensor, l_reg: Tensor) -> Tensor:
        va, vr = self.v_adv.value, self.v_reg.value
        out = T.add(T.add(T.mul(l_adv, T.exp(va)), va), T.add(T.mul(l_reg, T.exp(vr)), vr))
        return out


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_gp: float = 10.0
    critic_iters: int = 1
    batch_size: int = 16
    epochs: int = 300
    sampling: str = "kde"            # uniform | dataset | kde
    variant: str = "main"
    seed: int = 0
    eval_every: int = 50             # epochs between evaluations/checkpoints
    lambda_reg: float = 1.0          # regression_cgan weighting factor
    eval_fraction: float = 0.1
    extractor_seed: int = 0
    discriminator_variant: str | None = None   # derived from variant when None

    def __post_init__(self):
        for name in ("lr", "lambda_gp", "batch_size", "epochs", "critic_iters", "eval_every"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown loss variant {self.variant!r}")
        cond.SamplingStrategy(self.sampling)
        expected = VARIANT_DISCRIMINATOR[self.variant]
        if self.discriminator_variant is None:
            self.discriminator_variant = expected
        elif self.discriminator_variant != expected:
            raise TrainingError(
                f"loss variant {self.variant!r} needs discriminator "
                f"{expected!r}, got {self.discriminator_variant!r}"
            )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        return cls(**obj)


@dataclass
class CheckpointRecord:
    epoch: int
    fpd: float
    mse: float
    path: str

    @property
    def score(self) -> float:
        return self.fpd * self.mse

    def to_row(self) -> dict:
        return {"epoch": self.epoch, "fpd": self.fpd, "mse": self.mse, "score": self.score,
                "path": self.path}


# ---------------------------------------------------------------------------
# loss pieces

def adv_loss_generator(scores_gen: Tensor) -> Tensor:
    """-E[D(x_gen)]"""
    return T.neg(T.as_tensor(scores_gen).mean())


def adv_loss_discriminator(scores_gen, scores_real, gp, lambda_gp: float) -> Tensor:
    """E[D(x_gen)] - E[D(x_real)] + lambda * penalty"""
    base = T.sub(T.as_tensor(scores_gen).mean(), T.as_tensor(scores_real).mean())
    return T.add(base, T.scale(T.as_tensor(gp), lambda_gp))


def reg_loss(y, y_hat) -> Tensor:
    """Mean over the batch of the per-row L2 norm of (y - y_hat)."""
    diff = T.sub(T.as_tensor(y), T.as_tensor(y_hat))
    if diff.data.ndim == 1:
        diff = diff.reshape(1, diff.shape[0])
    return T.l2_norm(diff, axis=1).mean()


def cloud_extents(x: Tensor) -> Tensor:
    """Differentiable per-cloud extents of [B, N, 3]: max - min over points."""
    mx = x.max(axis=1)
    mn = T.neg(T.neg(x).max(axis=1))
    return T.sub(mx, mn)


def gradient_penalty(score_fn, x_real, x_gen, rng: np.random.Generator,
                     labels: tuple | None = None) -> Tensor:
    """Mean of (|grad_xhat D(xhat)|_2 - 1)^2 at per-sample interpolates.

    Must run inside an active tape: the inner gradient is then recorded,
    which keeps the penalty differentiable with respect to the
    discriminator parameters.  For label-conditioned discriminators pass
    ``labels=(y_real, y_cond)``; they are interpolated with the same
    per-sample mixing factor and fed to ``score_fn`` as a second argument.
    """
    xr = np.asarray(x_real.data if isinstance(x_real, Tensor) else x_real)
    xg = np.asarray(x_gen.data if isinstance(x_gen, Tensor) else x_gen)
    if xr.shape != xg.shape:
        raise TrainingError(f"gradient_penalty: shape mismatch {xr.shape} vs {xg.shape}")
    b = xr.shape[0]
    u = rng.uniform(size=(b, 1, 1)).astype(xr.dtype)
    x_hat = Tensor(u * xr + (1.0 - u) * xg)
    stack = T._tape_stack()
    if not stack:
        raise TrainingError("gradient_penalty must be called inside an active tape")
    tape = stack[-1]
    if labels is not None:
        y_hat = u[:, :, 0] * np.asarray(labels[0]) + (1.0 - u[:, :, 0]) * np.asarray(labels[1])
        scores = score_fn(x_hat, Tensor(y_hat.astype(xr.dtype)))
    else:
        scores = score_fn(x_hat)
    if scores is None:
        raise TrainingError("discriminator variant lacks a score output")
    g = T.grad(scores.sum(), [x_hat], tape)[0]
    norms = T.l2_norm(g.reshape(b, g.size // b), axis=1)
    diff = T.sub(norms, Tensor(np.ones(b, dtype=xr.dtype)))
    return T.mul(diff, diff).mean()


@dataclass
class LossInputs:
    """Batch quantities feeding the per-variant loss formulas."""

    scores_gen: Tensor
    scores_real: Tensor | None = None
    gp: Tensor | None = None
    y_cond: np.ndarray | None = None
    y_real: np.ndarray | None = None
    yhat_gen: Tensor | None = None
    yhat_real: Tensor | None = None
    y_gen: Tensor | None = None      # measured extents of generated clouds
    lambda_gp: float = 10.0
    lambda_reg: float = 1.0


def generator_loss(variant: str, weights: LossWeights | None, q: LossInputs) -> Tensor:
    adv = adv_loss_generator(q.scores_gen)
    if variant in ("backbone", "vanilla_cgan"):
        return adv
    if variant == "regression_cgan":
        return T.add(adv, T.scale(reg_loss(q.y_cond, q.y_gen), q.lambda_reg))
    if variant == "variant_a":
        reg = reg_loss(q.y_cond, q.y_gen)
    else:  # main, variant_b share the generator formula
        reg = reg_loss(q.y_cond, q.yhat_gen)
    return weights.apply(adv, reg)


def discriminator_loss(variant: str, weights: LossWeights | None, q: LossInputs) -> Tensor:
    adv = adv_loss_discriminator(q.scores_gen, q.scores_real, q.gp, q.lambda_gp)
    if variant in ("backbone", "vanilla_cgan", "regression_cgan"):
        return adv
    real_half = reg_loss(q.y_real, q.yhat_real)
    if variant == "main":
        reg = real_half
    elif variant == "variant_a":
        reg = T.scale(T.add(real_half, reg_loss(q.y_gen, q.yhat_gen)), 0.5)
    else:  # variant_b
        reg = T.scale(T.add(real_half, reg_loss(q.y_cond, q.yhat_gen)), 0.5)
    return weights.apply(adv, reg)


def total_losses(variant: str, weights: LossWeights | None, q: LossInputs):
    """(L_G, L_D) from one set of batch quantities (test and audit surface)."""
    return generator_loss(variant, weights, q), discriminator_loss(variant, weights, q)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    records: list[CheckpointRecord]
    selected: CheckpointRecord
    run_dir: str
    kde: cond.LabelKDE | None
    losses: list[tuple]     # (epoch, L_G, L_D)


def _dataset_hash(clouds: list[LabeledCloud]) -> str:
    h = hashlib.sha256()
    for c in clouds:
        h.update(c.points.tobytes())
        h.update(np.asarray(c.y, dtype=np.float64).tobytes())
    return h.hexdigest()


def _sample_condition(config, kde, labels, rng, d):
    return cond.sample_label(cond.SamplingStrategy(config.sampling), kde, labels, rng, d=d)


def train(
    config: TrainConfig,
    clouds: list[LabeledCloud],
    out_dir,
    gen_config: GeneratorConfig | None = None,
    quiet: bool = True,
) -> TrainResult:
    if not clouds:
        raise TrainingError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    conditional = config.variant != "backbone"
    d = len(clouds[0].y)
    n_points = clouds[0].points.shape[0]

    base_gen = gen_config or GeneratorConfig(label_dim=d)
    if base_gen.n_points != n_points:
        raise TrainingError(
            f"generator emits {base_gen.n_points} points but dataset clouds have {n_points}"
        )
    if not conditional:
        gen_cfg = GeneratorConfig.unconditioned(base_gen)
    elif base_gen.label_dim != d:
        raise TrainingError(f"generator label_dim {base_gen.label_dim} != dataset label dim {d}")
    else:
        gen_cfg = base_gen
    disc_cfg = DiscriminatorConfig(
        label_dim=d if config.discriminator_variant != "unconditioned" else max(d, 1),
        variant=config.discriminator_variant,
    )

    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 17)))
    order = np.random.default_rng(np.random.SeedSequence((config.seed, 23))).permutation(len(clouds))
    n_eval = max(8, int(round(config.eval_fraction * len(clouds))))
    n_eval = min(n_eval, max(2, len(clouds) - config.batch_size))
    eval_clouds = [clouds[i] for i in order[:n_eval]]
    train_clouds = [clouds[i] for i in order[n_eval:]]
    if len(train_clouds) < config.batch_size:
        raise TrainingError("dataset too small for one batch after the eval split")

    points = np.stack([c.points for c in train_clouds]).astype(np.float32)
    labels = np.stack([c.y for c in train_clouds]).astype(np.float64)
    eval_points = [c.points.astype(np.float64) for c in eval_clouds]
    eval_labels = np.stack([c.y for c in eval_clouds])

    kde = cond.fit_kde(labels) if config.sampling == "kde" or conditional else None
    strategy_kde = kde if config.sampling == "kde" else None
    if config.sampling == "kde" and kde is None:
        raise TrainingError("kde sampling requires a fitted KDE")

    gen = init_generator(gen_cfg, seed=config.seed)
    disc = init_discriminator(disc_cfg, seed=config.seed + 1)
    weights = LossWeights() if config.variant in WEIGHTED_VARIANTS else None

    opt_g = Adam(gen.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    opt_d = Adam(disc.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    opt_v = Adam(weights.parameters(), lr=config.lr, beta1=config.beta1,
                 beta2=config.beta2) if weights else None

    extractor = M.FeatureExtractor(seed=config.extractor_seed)
    save_model_config(out_dir / "model.json", gen_cfg, disc_cfg,
                      extra={"train": config.to_json()})

    batches = len(train_clouds) // config.batch_size
    records: list[CheckpointRecord] = []
    losses: list[tuple] = []

    def draw_conditions(n):
        return np.stack([
            _sample_condition(config, strategy_kde, labels, rng, d) for _ in range(n)
        ]).astype(np.float32)

    def gen_forward_np(n, y_cond=None):
        z = rng.normal(size=(n, gen_cfg.latent_dim)).astype(np.float32)
        return gen.forward(z, y_cond if conditional else None), z

    def check_finite(value, what, epoch):
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite {what}",
                {"epoch": epoch, "seed": config.seed, "value": value,
                 "last_losses": losses[-3:]},
            )

    def evaluate(epoch) -> CheckpointRecord:
        ev_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 31, epoch)))
        z = ev_rng.normal(size=(len(eval_clouds), gen_cfg.latent_dim)).astype(np.float32)
        if conditional:
            out = gen.forward(z, eval_labels.astype(np.float32)).data.astype(np.float64)
            mse = M.dimension_mse(list(out), eval_labels)
        else:
            out = gen.forward(z).data.astype(np.float64)
            mse = float("nan")
        fpd_value = M.fpd(list(out), eval_points, extractor)
        path = out_dir / f"ckpt_epoch{epoch:05d}.ccpc"
        params = gen.parameters() + disc.parameters() + (weights.parameters() if weights else [])
        T.save_checkpoint(path, params)
        return CheckpointRecord(epoch=epoch, fpd=fpd_value, mse=mse, path=str(path))

    def grads_for(result, params):
        return [result[p].data if p in result else np.zeros_like(p.value.data) for p in params]

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_clouds))
        lg_sum = ld_sum = 0.0
        for b in range(batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            x_real = points[idx]
            y_real = labels[idx].astype(np.float32)
            v_grads = {p: np.zeros_like(p.value.data) for p in (weights.parameters() if weights else [])}

            for _ in range(config.critic_iters):
                y_cond = draw_conditions(config.batch_size) if conditional else None
                x_gen_t, _ = gen_forward_np(config.batch_size, y_cond)
                x_gen = x_gen_t.data  # constant for the critic update
                with Tape() as tape:
                    if config.discriminator_variant == "vanilla_concat":
                        s_real, _ = disc.forward(x_real, y_real)
                        s_gen, _ = disc.forward(x_gen, y_cond)
                        gp = gradient_penalty(
                            lambda xh, yh: disc.forward(xh, yh)[0],
                            x_real, x_gen, rng, labels=(y_real, y_cond))
                        q = LossInputs(scores_gen=s_gen, scores_real=s_real, gp=gp,
                                       lambda_gp=config.lambda_gp)
                    else:
                        s_real, yhat_real = disc.forward(x_real)
                        s_gen, yhat_gen = disc.forward(x_gen)
                        gp = gradient_penalty(lambda xh: disc.forward(xh)[0], x_real, x_gen, rng)
                        q = LossInputs(
                            scores_gen=s_gen, scores_real=s_real, gp=gp,
                            y_cond=y_cond, y_real=y_real,
                            yhat_gen=yhat_gen, yhat_real=yhat_real,
                            y_gen=Tensor(np.stack([
                                c.max(axis=0) - c.min(axis=0) for c in x_gen
                            ]).astype(np.float32)) if config.variant == "variant_a" else None,
                            lambda_gp=config.lambda_gp,
                        )
                    loss_d = discriminator_loss(config.variant, weights, q)
                g = T.backward(loss_d, tape, accumulate=False)
                opt_d.step(grads_for(g, opt_d.params))
                for p in v_grads:
                    if p in g:
                        v_grads[p] += g[p].data
                ld = loss_d.item()
                check_finite(ld, "discriminator loss", epoch)

            y_cond = draw_conditions(config.batch_size) if conditional else None
            with Tape() as tape:
                x_g, _ = gen_forward_np(config.batch_size, y_cond)
                if config.discriminator_variant == "vanilla_concat":
                    s_g, yhat_g = disc.forward(x_g, y_cond)
                else:
                    s_g, yhat_g = disc.forward(x_g)
                y_gen_t = cloud_extents(x_g) if config.variant in ("variant_a", "regression_cgan") else None
                q = LossInputs(scores_gen=s_g, y_cond=y_cond, yhat_gen=yhat_g, y_gen=y_gen_t,
                               lambda_reg=config.lambda_reg)
                loss_g = generator_loss(config.variant, weights, q)
                sources = [p.value for p in opt_g.params] + \
                          [p.value for p in (weights.parameters() if weights else [])]
                gs = T.grad(loss_g, sources, tape)
            opt_g.step([g.data for g in gs[: len(opt_g.params)]])
            if weights:
                for p, g in zip(weights.parameters(), gs[len(opt_g.params):]):
                    v_grads[p] += g.data
                opt_v.step([v_grads[p] for p in opt_v.params])
            lg = loss_g.item()
            check_finite(lg, "generator loss", epoch)
            lg_sum += lg
            ld_sum += ld

        losses.append((epoch, lg_sum / batches, ld_sum / batches))
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            rec = evaluate(epoch)
            records.append(rec)
            if not quiet:
                print(f"epoch {epoch}: L_G={losses[-1][1]:.4f} L_D={losses[-1][2]:.4f} "
                      f"FPD={rec.fpd:.4f} MSE={rec.mse:.4f}")

    selected = select_checkpoint(records)
    _write_records(out_dir / "records.csv", records, losses)
    manifest = {
        "command": "train",
        "config": config.to_json(),
        "generator": gen_cfg.to_json(),
        "dataset_hash": _dataset_hash(clouds),
        "selected_checkpoint": selected.path,
        "selected_epoch": selected.epoch,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return TrainResult(records=records, selected=selected, run_dir=str(out_dir),
                       kde=kde, losses=losses)


def select_checkpoint(records: list[CheckpointRecord]) -> CheckpointRecord:
    """Argmin of FPD*MSE; plain FPD for unconditioned runs (MSE undefined)."""
    if not records:
        raise TrainingError("no checkpoint records to select from")
    if any(np.isnan(r.mse) for r in records):
        return min(records, key=lambda r: r.fpd)
    return min(records, key=lambda r: r.score)


def _write_records(path, records, losses) -> None:
    loss_by_epoch = {e: (lg, ld) for e, lg, ld in losses}
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss_g", "loss_d", "fpd", "mse", "score"])
        for r in records:
            lg, ld = loss_by_epoch.get(r.epoch, (float("nan"),) * 2)
            w.writerow([r.epoch, f"{lg:.6f}", f"{ld:.6f}", f"{r.fpd:.6f}",
                        f"{r.mse:.6f}", f"{r.score:.6f}"])


# ---------------------------------------------------------------------------
# supervised sanity path and region evaluation

def train_regression_head(clouds, steps: int, seed: int, batch_size: int = 16) -> float:
    """Supervised extent regression with the discriminator alone.

    Returns the final dimension MSE in percent on the training stream;
    the adversarial path never receives gradient.
    """
    d = len(clouds[0].y)
    disc = init_discriminator(DiscriminatorConfig(label_dim=d), seed=seed)
    reg_params = [p for p in disc.parameters()
                  if p.name.startswith(("disc.stage", "disc.reg"))]
    opt = Adam(reg_params, lr=1e-3)
    rng = np.random.default_rng(seed)
    points = np.stack([c.points for c in clouds]).astype(np.float32)
    labels = np.stack([c.y for c in clouds]).astype(np.float32)
    for _ in range(steps):
        idx = rng.integers(len(clouds), size=batch_size)
        with Tape() as tape:
            _, yhat = disc.forward(points[idx])
            loss = reg_loss(labels[idx], yhat)
            gs = T.grad(loss, [p.value for p in reg_params], tape)
        opt.step([g.data for g in gs])
    _, yhat = disc.forward(points)
    return float(100.0 * np.mean((yhat.data - labels) ** 2))


def evaluate_regions(
    gen: TreeGcnGenerator,
    kde: cond.LabelKDE,
    model: cond.SigmaRegionModel,
    n_per_region: int,
    seed: int,
    ref_clouds=None,
    extractor: M.FeatureExtractor | None = None,
) -> dict[int, dict]:
    """Per-region MSE (and FPD when references are given) of a trained model."""
    out = {}
    extractor = extractor or M.FeatureExtractor()
    for region in (1, 2, 3):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 41, region)))
        ys = np.stack([
            cond.sample_from_region(model, kde, region, rng) for _ in range(n_per_region)
        ]).astype(np.float32)
        z = rng.normal(size=(n_per_region, gen.config.latent_dim)).astype(np.float32)
        clouds = gen.forward(z, ys).data.astype(np.float64)
        entry = {"mse": M.dimension_mse(list(clouds), ys)}
        if ref_clouds is not None:
            entry["fpd"] = M.fpd(list(clouds), ref_clouds, extractor)
        out[region] = entry
    return out
