"""C-VAE objective and the training loop over cross-shuffled chunk samples."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tc
from .data import Dataset, all_chunks, gather, sample_batch
from .policy import ACTPolicy, ModelConfig, Normalizer, VARIANTS
from .tensor import Tensor

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3


@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 16
    lr: float = 1e-4
    beta_kl: float = 10.0
    seed: int = 0
    variant: str = "gated"
    max_steps: int | None = None     # overrides epochs when set
    data: str = ""
    out: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def to_kv(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_kv(cls, kv: dict) -> "TrainConfig":
        casts = {"epochs": int, "batch": int, "lr": float, "beta_kl": float, "seed": int,
                 "max_steps": int, "variant": str, "data": str, "out": str}
        return cls(**{f.name: casts[f.name](kv[f.name]) for f in fields(cls) if f.name in kv})


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """-1/2 * batch-mean of sum_z (1 + logvar - mu^2 - exp(logvar))."""
    inner = tc.sub(tc.sub(tc.add(logvar, 1.0), tc.mul(mu, mu)), tc.exp(logvar))
    return tc.mul(tc.mean(tc.sum_(inner, axis=-1)), -0.5)


def loss(pred: Tensor, gt, mu: Tensor, logvar: Tensor, beta: float = 10.0) -> tuple[Tensor, float, float]:
    """Returns (total, l1, kl); total = mean|pred - gt| + beta * KL."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.data.dtype))
    if pred.shape != gt.shape:
        raise tc.ShapeError(f"loss: pred {pred.shape} vs target {gt.shape}")
    l1 = tc.l1_loss(pred, gt)
    kl = kl_divergence(mu, logvar)
    total = tc.add(l1, tc.mul(kl, beta)) if beta else l1
    value = float(total.data)
    if not math.isfinite(value):
        raise tc.NonFiniteError("loss is not finite")
    return total, float(l1.data), float(kl.data)


def check_compatible(model: ACTPolicy, dataset: Dataset) -> None:
    c = model.config
    geo = dataset.geometry
    if c.chunk != geo.chunk:
        raise ValueError(f"model chunk {c.chunk} != dataset chunk {geo.chunk}")
    if c.image_size != dataset.episodes[0].scene.shape[-1]:
        raise ValueError(f"model image size {c.image_size} != dataset image size {dataset.episodes[0].scene.shape[-1]}")
    if any(ep.T != geo.episode_len for ep in dataset.episodes):
        raise ValueError("episode length disagrees with dataset geometry")


def holdout_l1(model: ACTPolicy, dataset: Dataset, batch: int = 64) -> float:
    """Mean absolute chunk error at z = 0 over every chunk start of ``dataset``."""
    eps, starts = all_chunks(dataset, model.config.chunk)
    total, count = 0.0, 0
    for i in range(0, len(eps), batch):
        b = gather(dataset, eps[i:i + batch], starts[i:i + batch], model.config.chunk)
        pred = model.forward_infer(b.scene, b.proprio, b.vector)
        total += float(np.abs(pred.astype(np.float64) - b.chunk).sum())
        count += b.chunk.size
    return total / count


def train(config: TrainConfig, train_set: Dataset, holdout: Dataset | None = None,
          model_config: ModelConfig | None = None, log_path=None, ckpt_path=None,
          extra_meta: dict | None = None) -> tuple[ACTPolicy, list]:
    """Fit a policy; returns (model, history) where history rows are (step, total, l1, kl)."""
    if not train_set.episodes:
        raise ValueError("empty training set")
    mc = model_config or ModelConfig(variant=config.variant, chunk=train_set.geometry.chunk)
    if mc.variant != config.variant:
        raise ValueError(f"model variant {mc.variant} != train variant {config.variant}")
    norm = Normalizer.fit(np.concatenate([ep.proprio() for ep in train_set.episodes]),
                          np.concatenate([ep.actions for ep in train_set.episodes]))
    model = ACTPolicy(mc, seed=config.seed, norm=norm)
    check_compatible(model, train_set)

    data_rng = tc.seed_rng(config.seed)
    noise_rng = np.random.default_rng([config.seed, 1])
    starts = train_set.geometry.episode_len - mc.chunk + 1
    steps_per_epoch = math.ceil(len(train_set.episodes) * starts / config.batch)
    total_steps = config.max_steps or config.epochs * steps_per_epoch
    gated = mc.variant == "gated"

    meta = {"train.variant": mc.variant, "train.seed": config.seed,
            "train.angles": ",".join(f"{a:g}" for a in train_set.angles)}
    meta.update(extra_meta or {})
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    history = []
    try:
        for step_i in range(total_steps):
            b = sample_batch(train_set, config.batch, data_rng, mc.chunk)
            pred, mu, logvar = model.forward_train(b.scene, b.proprio, b.chunk,
                                                   b.vector if gated else None, noise_rng)
            total, l1, kl = loss(pred, b.chunk, mu, logvar, config.beta_kl)
            value = float(total.data)
            if value > DIVERGENCE_LIMIT:
                raise RuntimeError(f"training diverged at step {step_i}: loss {value:.4g}")
            tc.backward(total)
            tc.adam_step(model.store, config.lr)
            history.append((step_i, value, l1, kl))
            if logf:
                logf.write(f"{step_i} {value:.9g} {l1:.9g} {kl:.9g}\n")
            if (step_i + 1) % steps_per_epoch == 0 or step_i + 1 == total_steps:
                epoch = (step_i + 1) // steps_per_epoch
                msg = f"epoch {epoch} step {step_i + 1}/{total_steps} loss {value:.4f} l1 {l1:.4f} kl {kl:.4f}"
                if holdout is not None and holdout.episodes:
                    msg += f" holdout_l1 {holdout_l1(model, holdout):.4f}"
                log.info(msg)
                if logf:
                    logf.write(f"# {msg}\n")
                    logf.flush()
                if ckpt_path:
                    model.save(ckpt_path, meta)
    finally:
        if logf:
            logf.close()
    return model, history
