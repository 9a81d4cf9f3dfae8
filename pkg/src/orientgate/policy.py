"""Action-chunking C-VAE transformer with an optional orientation-gated multi-head output.

Both variants share backbone, latent encoder and decoder.  The baseline maps
decoder queries through one linear head; the gated variant runs H linear heads
and mixes them with softmax weights from a 2-layer MLP on the robot->object
vector.  Parameters are created in a fixed order so that, for the same seed,
the shared parameters of the two variants are identical.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tc
from .tensor import ParamStore, Tensor

VARIANTS = ("baseline", "gated")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    attn_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 128
    latent_dim: int = 16
    chunk: int = 16
    action_dim: int = 4
    joint_dim: int = 4             # proprioception: 3 joint angles + gripper state
    num_action_heads: int = 4
    gate_hidden: int = 32
    patch: int = 8
    image_size: int = 64
    variant: str = "gated"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_model % self.attn_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by attn_heads {self.attn_heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.variant == "gated" and self.num_action_heads < 2:
            raise ValueError("gated variant needs at least 2 action heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_kv(self) -> dict:
        return asdict(self)

    @classmethod
    def from_kv(cls, kv: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                kwargs[f.name] = kv[f.name] if f.type in ("str", str) else int(kv[f.name])
        return cls(**kwargs)


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension standardisation of joint inputs and action chunks (fixed, not trained).

    Inputs are fed as (x - mean) / std and head outputs mapped back with
    out * std + mean, so losses and predictions stay in raw units.
    """
    joint_mean: tuple
    joint_std: tuple
    action_mean: tuple
    action_std: tuple

    STD_FLOOR = 1e-2

    @classmethod
    def identity(cls, config: ModelConfig) -> "Normalizer":
        return cls((0.0,) * config.joint_dim, (1.0,) * config.joint_dim,
                   (0.0,) * config.action_dim, (1.0,) * config.action_dim)

    @classmethod
    def fit(cls, joints, actions) -> "Normalizer":
        j = np.asarray(joints, dtype=np.float64).reshape(-1, np.shape(joints)[-1])
        a = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(actions)[-1])

        def stats(x):
            return (tuple(float(np.float32(v)) for v in x.mean(0)),
                    tuple(float(np.float32(v)) for v in np.maximum(x.std(0), cls.STD_FLOOR)))

        return cls(*stats(j), *stats(a))

    def joints(self, x) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - np.float32(self.joint_mean)) / np.float32(self.joint_std))

    def actions(self, x) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - np.float32(self.action_mean)) / np.float32(self.action_std))

    def to_kv(self) -> dict:
        return {f"norm.{f.name}": ",".join(repr(v) for v in getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict, config: ModelConfig) -> "Normalizer":
        if not any(k.startswith("norm.") for k in kv):
            return cls.identity(config)
        return cls(*(tuple(float(v) for v in kv[f"norm.{f.name}"].split(",")) for f in fields(cls)))


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = tc.matmul(x, w)
    return tc.add(y, b) if b is not None else y


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S) -> (B, (S/p)^2, p*p), patches in row-major order."""
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    B, S, S2 = images.shape
    if S != S2 or S % patch:
        raise ValueError(f"backbone: expected square image divisible by {patch}, got {images.shape[1:]}")
    g = S // patch
    return images.reshape(B, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(B, g * g, patch * patch)


class ACTPolicy:
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, store: ParamStore | None = None,
                 norm: Normalizer | None = None):
        self.config = config
        self.norm = norm or Normalizer.identity(config)
        if store is None:
            store = ParamStore()
            self._init_params(store, tc.seed_rng(seed))
        self.store = store

    # ------------------------------------------------------------ parameters

    def _init_params(self, store: ParamStore, rng) -> None:
        c = self.config
        d, ff = c.d_model, c.ff_dim
        P = c.patch * c.patch

        def dense(name, n_in, n_out, bias=True, std=None):
            store.add(f"{name}.w", tc.gaussian_init(rng, (n_in, n_out), std if std is not None else 1 / math.sqrt(n_in)))
            if bias:
                store.add(f"{name}.b", np.zeros(n_out, np.float32))

        def emb(name, *shape):
            store.add(name, tc.gaussian_init(rng, shape, 0.1))

        def norm(name):
            store.add(f"{name}.g", np.ones(d, np.float32))
            store.add(f"{name}.b", np.zeros(d, np.float32))

        def block(prefix, cross=False):
            for part in (("self", "cross") if cross else ("self",)):
                norm(f"{prefix}.{part}.ln")
                for proj in ("q", "k", "v", "o"):
                    dense(f"{prefix}.{part}.{proj}", d, d)
            norm(f"{prefix}.ff.ln")
            dense(f"{prefix}.ff.1", d, ff)
            dense(f"{prefix}.ff.2", ff, d)

        # backbone
        dense("backbone.patch", P, d)
        emb("backbone.row", c.grid, d)
        emb("backbone.col", c.grid, d)
        # latent encoder
        emb("latent_enc.cls", 1, d)
        dense("latent_enc.joint", c.joint_dim, d)
        dense("latent_enc.action", c.action_dim, d)
        emb("latent_enc.pos", c.chunk + 2, d)
        for i in range(c.encoder_layers):
            block(f"latent_enc.layer{i}")
        norm("latent_enc.out_ln")
        dense("latent_enc.proj", d, 2 * c.latent_dim)
        # observation encoder + query decoder
        dense("encoder.z", c.latent_dim, d)
        dense("encoder.joint", c.joint_dim, d)
        emb("encoder.pos", 2, d)
        for i in range(c.encoder_layers):
            block(f"encoder.layer{i}")
        norm("encoder.out_ln")
        emb("decoder.query", c.chunk, d)
        for i in range(c.decoder_layers):
            block(f"decoder.layer{i}", cross=True)
        norm("decoder.out_ln")
        dense("head", d, c.action_dim)
        if c.variant == "gated":
            for h in range(c.num_action_heads):
                dense(f"heads.{h}", d, c.action_dim)
            dense("gate.1", 2, c.gate_hidden, std=1.0)
            dense("gate.2", c.gate_hidden, c.num_action_heads, std=0.0)

    def p(self, name: str) -> Tensor:
        return self.store[name]

    # ------------------------------------------------------------ building blocks

    def _ln(self, x, name):
        return tc.layernorm(x, self.p(f"{name}.g"), self.p(f"{name}.b"))

    def _dense(self, x, name):
        return _linear(x, self.p(f"{name}.w"), self.p(f"{name}.b"))

    def _attention(self, xq: Tensor, xkv: Tensor, name: str) -> Tensor:
        c = self.config
        h, dh = c.attn_heads, c.d_model // c.attn_heads
        B, n, d = xq.shape
        m = xkv.shape[1]
        q = tc.transpose(tc.reshape(self._dense(xq, f"{name}.q"), (B, n, h, dh)), (0, 2, 1, 3))
        k = tc.transpose(tc.reshape(self._dense(xkv, f"{name}.k"), (B, m, h, dh)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(self._dense(xkv, f"{name}.v"), (B, m, h, dh)), (0, 2, 1, 3))
        att = tc.softmax(tc.mul(tc.matmul(q, k), 1.0 / math.sqrt(dh)))
        out = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (B, n, d))
        return self._dense(out, f"{name}.o")

    def _ff(self, x, name):
        return self._dense(tc.relu(self._dense(self._ln(x, f"{name}.ln"), f"{name}.1")), f"{name}.2")

    def _encoder_block(self, x, name):
        y = self._ln(x, f"{name}.self.ln")
        x = tc.add(x, self._attention(y, y, f"{name}.self"))
        return tc.add(x, self._ff(x, f"{name}.ff"))

    def _decoder_block(self, x, memory, name):
        y = self._ln(x, f"{name}.self.ln")
        x = tc.add(x, self._attention(y, y, f"{name}.self"))
        x = tc.add(x, self._attention(self._ln(x, f"{name}.cross.ln"), memory, f"{name}.cross"))
        return tc.add(x, self._ff(x, f"{name}.ff"))

    # ------------------------------------------------------------ components

    def position_table(self) -> Tensor:
        c = self.config
        row = tc.reshape(self.p("backbone.row"), (c.grid, 1, c.d_model))
        col = tc.reshape(self.p("backbone.col"), (1, c.grid, c.d_model))
        return tc.reshape(tc.add(row, col), (c.num_patches, c.d_model))

    def backbone(self, scene) -> Tensor:
        """(B, S, S) images -> (B, patches, d_model) tokens."""
        c = self.config
        scene = np.asarray(scene, dtype=np.float32)
        if scene.shape[-2:] != (c.image_size, c.image_size):
            raise ValueError(f"backbone: expected {c.image_size}x{c.image_size} image, got {scene.shape[-2:]}")
        patches = Tensor(extract_patches(scene, c.patch))
        return tc.add(self._dense(patches, "backbone.patch"), self.position_table())

    def cvae_encode(self, chunk, joints) -> tuple[Tensor, Tensor]:
        c = self.config
        chunk = Tensor(self.norm.actions(np.asarray(chunk, dtype=np.float32).reshape(-1, c.chunk, c.action_dim)))
        joints = Tensor(self.norm.joints(np.asarray(joints, dtype=np.float32).reshape(-1, 1, c.joint_dim)))
        B = chunk.shape[0]
        cls = tc.add(self.p("latent_enc.cls"), Tensor(np.zeros((B, 1, c.d_model), np.float32)))
        x = tc.concat([cls, self._dense(joints, "latent_enc.joint"), self._dense(chunk, "latent_enc.action")], axis=1)
        x = tc.add(x, self.p("latent_enc.pos"))
        for i in range(c.encoder_layers):
            x = self._encoder_block(x, f"latent_enc.layer{i}")
        out = self._dense(self._ln(x[:, 0, :], "latent_enc.out_ln"), "latent_enc.proj")
        return out[:, :c.latent_dim], out[:, c.latent_dim:]

    def decode(self, z, joints, image_tokens: Tensor) -> Tensor:
        """Latent, joints and image tokens -> (B, chunk, d_model) query features."""
        c = self.config
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        z = tc.reshape(z, (-1, 1, c.latent_dim))
        joints = Tensor(self.norm.joints(np.asarray(joints, dtype=np.float32).reshape(-1, 1, c.joint_dim)))
        pos = self.p("encoder.pos")
        zt = tc.add(self._dense(z, "encoder.z"), pos[0:1])
        jt = tc.add(self._dense(joints, "encoder.joint"), pos[1:2])
        B = image_tokens.shape[0]
        if zt.shape[0] != B:
            zt = tc.add(zt, Tensor(np.zeros((B, 1, c.d_model), np.float32)))
        memory = tc.concat([zt, jt, image_tokens], axis=1)
        for i in range(c.encoder_layers):
            memory = self._encoder_block(memory, f"encoder.layer{i}")
        memory = self._ln(memory, "encoder.out_ln")
        x = tc.add(self.p("decoder.query"), Tensor(np.zeros((B, c.chunk, c.d_model), np.float32)))
        for i in range(c.decoder_layers):
            x = self._decoder_block(x, memory, f"decoder.layer{i}")
        return self._ln(x, "decoder.out_ln")

    def head_baseline(self, hidden: Tensor) -> Tensor:
        return self._dense(hidden, "head")

    def gate_weights(self, vector) -> Tensor:
        v = vector if isinstance(vector, Tensor) else Tensor(np.asarray(vector, dtype=np.float32).reshape(-1, 2))
        return tc.softmax(self._dense(tc.relu(self._dense(v, "gate.1")), "gate.2"))

    def head_outputs(self, hidden: Tensor) -> Tensor:
        """All heads at once, (B, chunk, H, action_dim)."""
        c = self.config
        H = c.num_action_heads
        w = tc.concat([self.p(f"heads.{h}.w") for h in range(H)], axis=-1)
        b = tc.concat([self.p(f"heads.{h}.b") for h in range(H)], axis=-1)
        B, k, _ = hidden.shape
        return tc.reshape(_linear(hidden, w, b), (B, k, H, c.action_dim))

    def gated_output(self, hidden: Tensor, weights: Tensor) -> Tensor:
        """Convex combination over heads: sum_h w_h * head_h(hidden)."""
        heads = self.head_outputs(hidden)
        B, _, H, _ = heads.shape
        w = tc.reshape(weights, (B, 1, H, 1))
        return tc.sum_(tc.mul(heads, w), axis=2)

    def _output(self, hidden, vector):
        if self.config.variant == "baseline":
            out = self.head_baseline(hidden)
        elif vector is None:
            raise ValueError("gated variant requires an orientation vector")
        else:
            out = self.gated_output(hidden, self.gate_weights(vector))
        # x * 1 + 0 is exact, so the identity normaliser leaves outputs bit-identical
        return tc.add(tc.mul(out, np.float32(self.norm.action_std)), np.float32(self.norm.action_mean))

    # ------------------------------------------------------------ full passes

    def forward_train(self, scene, joints, chunk, vector=None, rng: np.random.Generator | None = None):
        """Returns (pred_chunk, mu, logvar); ``rng`` draws the reparameterisation noise."""
        if self.config.variant == "gated" and vector is None:
            raise ValueError("gated variant requires an orientation vector")
        mu, logvar = self.cvae_encode(chunk, joints)
        if rng is None:
            z = mu
        else:
            eps = rng.standard_normal(mu.shape).astype(np.float32)
            z = tc.add(mu, tc.mul(tc.exp(tc.mul(logvar, 0.5)), Tensor(eps)))
        hidden = self.decode(z, joints, self.backbone(scene))
        return self._output(hidden, vector), mu, logvar

    def forward_infer(self, scene, joints, vector=None) -> np.ndarray:
        """Deterministic chunk prediction with z at the prior mean, shape (B, chunk, action_dim)."""
        scene = np.asarray(scene, dtype=np.float32)
        if scene.ndim == 2:
            scene = scene[None]
        B = scene.shape[0]
        z = np.zeros((B, self.config.latent_dim), np.float32)
        hidden = self.decode(z, np.asarray(joints, dtype=np.float32).reshape(B, -1), self.backbone(scene))
        return self._output(hidden, vector).data

    # ------------------------------------------------------------ persistence

    def save(self, path, extra: dict | None = None) -> None:
        meta = {f"model.{k}": v for k, v in self.config.to_kv().items()}
        meta.update(self.norm.to_kv())
        meta.update(extra or {})
        tc.save_checkpoint(self.store, path, meta)

    @classmethod
    def load(cls, path) -> tuple["ACTPolicy", dict]:
        store, meta = tc.load_checkpoint(path)
        cfg = ModelConfig.from_kv({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
        return cls(cfg, store=store, norm=Normalizer.from_kv(meta, cfg)), meta
