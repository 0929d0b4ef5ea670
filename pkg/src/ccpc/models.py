"""Tree-graph-convolution generator with label input, and the PointNet
discriminator in its four conditioning variants.

The generator grows a point cloud along a tree: each layer replicates
every node ``b`` times (adding learned per-branch embeddings), pushes the
branched features through a chain of ``support`` linear maps (the loop
term), adds linearly mapped ancestor features from every earlier depth,
and applies a LeakyReLU (omitted on the final layer, which maps to xyz).

The discriminator is a per-point linear stack with a global max-pool;
output heads are plain linear stacks.  The dual-head variant carries both
the adversarial score and the label-regression estimate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import ccpc.tensor as T
from ccpc.tensor import Parameter, Tensor

DISC_VARIANTS = ("dual", "unconditioned", "vanilla_concat", "projection")


class ModelError(Exception):
    pass


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 32
    label_dim: int = 3
    latent_embed: int = 24
    label_embed: int = 8
    features: tuple = (64, 64, 64, 32, 32, 3)   # per-layer conv output widths
    branching: tuple = (1, 2, 2, 2, 2, 16)      # per-layer branch factors
    support: int = 3                            # loop-chain length
    leaky_slope: float = 0.2

    def __post_init__(self):
        if len(self.features) != len(self.branching):
            raise ModelError("features and branching must have one entry per layer")
        if self.features[-1] != 3:
            raise ModelError("final layer must output 3 coordinates")
        if (self.label_dim == 0) != (self.label_embed == 0):
            raise ModelError("label_dim and label_embed must be zero together")
        if self.latent_embed + self.label_embed <= 0:
            raise ModelError("embedding widths must be positive")

    @property
    def n_points(self) -> int:
        return int(np.prod(self.branching))

    @property
    def input_width(self) -> int:
        return self.latent_embed + self.label_embed

    @classmethod
    def paper_scale(cls, label_dim: int = 3) -> "GeneratorConfig":
        return cls(
            latent_dim=96,
            label_dim=label_dim,
            latent_embed=64,
            label_embed=32 if label_dim else 0,
            features=(256, 256, 256, 128, 128, 128, 3),
            branching=(1, 2, 2, 2, 2, 2, 64),
            support=10,
        )

    @classmethod
    def unconditioned(cls, base: "GeneratorConfig" = None) -> "GeneratorConfig":
        base = base or cls()
        return GeneratorConfig(
            latent_dim=base.latent_dim,
            label_dim=0,
            latent_embed=base.latent_embed + base.label_embed,
            label_embed=0,
            features=base.features,
            branching=base.branching,
            support=base.support,
            leaky_slope=base.leaky_slope,
        )

    def to_json(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "label_dim": self.label_dim,
            "latent_embed": self.latent_embed,
            "label_embed": self.label_embed,
            "features": list(self.features),
            "branching": list(self.branching),
            "support": self.support,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        obj = dict(obj)
        obj["features"] = tuple(obj["features"])
        obj["branching"] = tuple(obj["branching"])
        return cls(**obj)


@dataclass(frozen=True)
class DiscriminatorConfig:
    label_dim: int = 3
    stage_widths: tuple = (16, 32, 64, 128, 256)
    head_widths: tuple = (256, 128, 128)
    variant: str = "dual"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.variant not in DISC_VARIANTS:
            raise ModelError(f"unknown discriminator variant {self.variant!r}")
        if self.variant in ("dual", "vanilla_concat", "projection") and self.label_dim <= 0:
            raise ModelError(f"variant {self.variant!r} needs label_dim > 0")

    @classmethod
    def paper_scale(cls, label_dim: int = 3, variant: str = "dual") -> "DiscriminatorConfig":
        return cls(
            label_dim=label_dim,
            stage_widths=(64, 128, 256, 512, 1024),
            head_widths=(1024, 512, 512),
            variant=variant,
        )

    def to_json(self) -> dict:
        return {
            "label_dim": self.label_dim,
            "stage_widths": list(self.stage_widths),
            "head_widths": list(self.head_widths),
            "variant": self.variant,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiscriminatorConfig":
        obj = dict(obj)
        obj["stage_widths"] = tuple(obj["stage_widths"])
        obj["head_widths"] = tuple(obj["head_widths"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# initialization helpers

def xavier_uniform(rng, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def _linear(rng, name, fan_in, fan_out, dtype, params):
    w = Parameter(xavier_uniform(rng, fan_in, fan_out, dtype), f"{name}.weight")
    b = Parameter(np.zeros(fan_out, dtype=dtype), f"{name}.bias")
    params += [w, b]
    return w, b


def _apply_linear(h, w, b):
    return T.add(T.matmul(h, w.value), b.value)


# ---------------------------------------------------------------------------
# generator

class TreeGcnLayer:
    """One fused branch-then-convolve step of the generator tree."""

    def __init__(self, depth, config: GeneratorConfig, rng, dtype, params):
        self.depth = depth
        self.b = config.branching[depth]
        widths = (config.input_width,) + config.features
        self.f_in = widths[depth]
        self.f_out = widths[depth + 1]
        self.activation = depth < len(config.features) - 1
        self.slope = config.leaky_slope
        name = f"gen.layer{depth}"

        self.branch = Parameter(
            (rng.normal(size=(self.b, self.f_in)) * 0.1).astype(dtype), f"{name}.branch"
        )
        chain = []
        for k in range(config.support):
            f_to = self.f_out if k == config.support - 1 else self.f_in
            chain.append(
                Parameter(xavier_uniform(rng, self.f_in, f_to, dtype), f"{name}.loop{k}.weight")
            )
        self.loop = chain
        self.ancestors = [
            Parameter(
                xavier_uniform(rng, widths[a], self.f_out, dtype), f"{name}.anc{a}.weight"
            )
            for a in range(depth + 1)
        ]
        self.bias = Parameter(np.zeros((self.b, self.f_out), dtype=dtype), f"{name}.bias")
        params += [self.branch, *self.loop, *self.ancestors, self.bias]

    def forward(self, tree: list) -> Tensor:
        """tree[a]: [B, n_a, F_a] for depths 0..self.depth; returns [B, n*b, f_out]."""
        x = tree[-1]
        batch, n, _ = x.shape
        nb = n * self.b
        # branch: replicate each node, add a distinct embedding per branch
        xb = T.add(
            x.reshape(batch, n, 1, self.f_in),
            self.branch.value.reshape(1, 1, self.b, self.f_in),
        ).reshape(batch * nb, self.f_in)
        # loop term: chain of linear maps on the branched features
        h = xb
        for w in self.loop:
            h = T.matmul(h, w.value)
        total = h.reshape(batch, nb, self.f_out)
        # ancestor terms, each broadcast down to the new node count
        for ta, w in zip(tree, self.ancestors):
            na = ta.shape[1]
            mapped = T.matmul(ta.reshape(batch * na, ta.shape[2]), w.value)
            rep = nb // na
            mapped = T.broadcast_to(
                mapped.reshape(batch, na, 1, self.f_out), (batch, na, rep, self.f_out)
            ).reshape(batch, nb, self.f_out)
            total = T.add(total, mapped)
        total = T.add(
            total.reshape(batch, n, self.b, self.f_out),
            self.bias.value.reshape(1, 1, self.b, self.f_out),
        ).reshape(batch, nb, self.f_out)
        if self.activation:
            total = T.leaky_relu(total, self.slope)
        return total


class TreeGcnGenerator:
    def __init__(self, config: GeneratorConfig, rng, dtype=np.float32):
        self.config = config
        self.params: list[Parameter] = []
        self.wz, self.bz = _linear(
            rng, "gen.latent_embed", config.latent_dim, config.latent_embed, dtype, self.params
        )
        if config.label_dim:
            self.wy, self.by = _linear(
                rng, "gen.label_embed", config.label_dim, config.label_embed, dtype, self.params
            )
        else:
            self.wy = self.by = None
        self.layers = [
            TreeGcnLayer(d, config, rng, dtype, self.params)
            for d in range(len(config.features))
        ]

    def parameters(self) -> list[Parameter]:
        return self.params

    def forward(self, z, y=None) -> Tensor:
        """z: [B, latent_dim]; y: [B, label_dim] when the model is conditional."""
        z = T.as_tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ModelError(f"latent input has shape {z.shape}, expected [B, {self.config.latent_dim}]")
        h = _apply_linear(z, self.wz, self.bz)
        if self.config.label_dim:
            if y is None:
                raise ModelError("conditional generator needs a label input")
            y = T.as_tensor(y)
            if y.data.ndim != 2 or y.shape[1] != self.config.label_dim:
                raise ModelError(f"label input has shape {y.shape}, expected [B, {self.config.label_dim}]")
            hy = _apply_linear(y, self.wy, self.by)
            h = T.concat([h, hy], axis=1)
        elif y is not None:
            raise ModelError("unconditioned generator takes no label input")
        batch = h.shape[0]
        tree = [h.reshape(batch, 1, self.config.input_width)]
        for layer in self.layers:
            tree.append(layer.forward(tree))
        return tree[-1]

    def generate(self, z, y=None) -> np.ndarray:
        """Tape-free single-cloud convenience: 1-d inputs, [N, 3] output."""
        z = np.asarray(z, dtype=np.float32).reshape(1, -1)
        y = None if y is None else np.asarray(y, dtype=np.float32).reshape(1, -1)
        return self.forward(z, y).data[0]


def generator_forward(gen: TreeGcnGenerator, z, y=None) -> np.ndarray:
    return gen.generate(z, y)


# ---------------------------------------------------------------------------
# discriminator

class PointNetDiscriminator:
    def __init__(self, config: DiscriminatorConfig, rng, dtype=np.float32):
        self.config = config
        self.params: list[Parameter] = []
        self.stages = []
        f_in = 3
        for i, w in enumerate(config.stage_widths):
            self.stages.append(_linear(rng, f"disc.stage{i}", f_in, w, dtype, self.params))
            f_in = w
        pooled = config.stage_widths[-1]

        adv_in = pooled + (config.label_dim if config.variant == "vanilla_concat" else 0)
        self.adv_head = self._head(rng, "disc.adv", adv_in, 1, dtype)
        if config.variant == "dual":
            self.reg_head = self._head(rng, "disc.reg", pooled, config.label_dim, dtype)
        else:
            self.reg_head = None
        if config.variant == "projection":
            self.wproj, self.bproj = _linear(
                rng, "disc.label_proj", config.label_dim, pooled, dtype, self.params
            )

    def _head(self, rng, name, f_in, f_out, dtype):
        widths = list(self.config.head_widths) + [f_out]
        head = []
        for i, w in enumerate(widths):
            head.append(_linear(rng, f"{name}{i}", f_in, w, dtype, self.params))
            f_in = w
        return head

    def parameters(self) -> list[Parameter]:
        return self.params

    def _features(self, x: Tensor) -> Tensor:
        batch, n, _ = x.shape
        h = x.reshape(batch * n, 3)
        for w, b in self.stages:
            h = T.leaky_relu(_apply_linear(h, w, b), self.config.leaky_slope)
        return h.reshape(batch, n, self.config.stage_widths[-1]).max(axis=1)

    @staticmethod
    def _run_head(h: Tensor, head) -> Tensor:
        for w, b in head:
            h = _apply_linear(h, w, b)
        return h

    def forward(self, x, y=None):
        """Returns (scores [B], y_hat [B, d] or None) per the variant contract."""
        x = T.as_tensor(x)
        if x.data.ndim == 2:
            x = x.reshape(1, *x.shape)
        variant = self.config.variant
        if variant in ("dual", "unconditioned") and y is not None:
            raise ModelError(f"variant {variant!r} takes no label input")
        if variant in ("vanilla_concat", "projection") and y is None:
            raise ModelError(f"variant {variant!r} requires a label input")
        pooled = self._features(x)
        if variant == "vanilla_concat":
            y = T.as_tensor(y)
            score = self._run_head(T.concat([pooled, y], axis=1), self.adv_head)
        elif variant == "projection":
            y = T.as_tensor(y)
            proj = _apply_linear(y, self.wproj, self.bproj)
            inner = T.mul(proj, pooled).sum(axis=1, keepdims=True)
            score = T.add(self._run_head(pooled, self.adv_head), inner)
        else:
            score = self._run_head(pooled, self.adv_head)
        score = score.reshape(score.shape[0])
        y_hat = self._run_head(pooled, self.reg_head) if self.reg_head else None
        return score, y_hat

    def scores(self, x) -> Tensor:
        """Adversarial score only; the callable the gradient penalty uses."""
        return self.forward(x)[0] if self.config.variant in ("dual", "unconditioned") else None


def discriminator_forward(disc: PointNetDiscriminator, x, y=None):
    """Single-cloud convenience: scalar score and optional [d] estimate."""
    score, y_hat = disc.forward(np.asarray(x, dtype=np.float32), None if y is None else
                                np.asarray(y, dtype=np.float32).reshape(1, -1))
    return score.item(), (None if y_hat is None else y_hat.data[0])


# ---------------------------------------------------------------------------
# factory + checkpoint sidecar

def init_generator(config: GeneratorConfig, seed: int, dtype=np.float32) -> TreeGcnGenerator:
    return TreeGcnGenerator(config, np.random.default_rng(seed), dtype)


def init_discriminator(config: DiscriminatorConfig, seed: int, dtype=np.float32) -> PointNetDiscriminator:
    return PointNetDiscriminator(config, np.random.default_rng(seed), dtype)


def save_model_config(path, gen_config: GeneratorConfig, disc_config: DiscriminatorConfig,
                      extra: dict | None = None) -> None:
    obj = {"generator": gen_config.to_json(), "discriminator": disc_config.to_json()}
    if extra:
        obj.update(extra)
    Path(path).write_text(json.dumps(obj, indent=2))


def load_model_config(path) -> tuple[GeneratorConfig, DiscriminatorConfig, dict]:
    obj = json.loads(Path(path).read_text())
    gen = GeneratorConfig.from_json(obj["generator"])
    disc = DiscriminatorConfig.from_json(obj["discriminator"])
    extra = {k: v for k, v in obj.items() if k not in ("generator", "discriminator")}
    return gen, disc, extra
