"""Gradient-constrained training and anomaly scoring.

The trainer keeps a per-decoder-layer cumulative mean of total-loss weight
gradients (the gradient memory). Each step penalizes misalignment between the
current reconstruction-loss gradients and that memory via a cosine gradient
loss, differentiated through the backward pass (second-order), and the
anomaly score of a sample is recon_error + beta * gradient_loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Var


class NonFiniteLossError(Exception):
    """Training produced a non-finite loss; carries diagnostics."""


@dataclass
class GradientMemory:
    """Cumulative mean of decoder weight gradients, one vector per layer.

    Biases are excluded from the constraint by default; setting
    ``include_biases`` appends each layer's bias gradient to its vector.
    """

    averages: list = field(default_factory=list)   # flattened per-layer vectors
    count: int = 0
    include_biases: bool = False

    @classmethod
    def for_model(cls, model: nn.ModelParams, include_biases: bool = False
                  ) -> "GradientMemory":
        sizes = []
        for w, b in model.decoder:
            sizes.append(w.size + (b.size if include_biases and b is not None else 0))
        dtype = model.decoder[0][0].data.dtype if model.decoder else np.float64
        return cls(averages=[np.zeros(s, dtype=dtype) for s in sizes],
                   count=0, include_biases=include_biases)

    def update(self, layer_grads) -> None:
        """Fold one iteration's gradient vectors into the running mean."""
        if len(layer_grads) != len(self.averages):
            raise ValueError(
                f"memory has {len(self.averages)} layers, got {len(layer_grads)} gradients")
        self.count += 1
        k = self.count
        for i, g in enumerate(layer_grads):
            g = (g.data if isinstance(g, Var) else np.asarray(g)).reshape(-1)
            if g.size != self.averages[i].size:
                raise ValueError(
                    f"layer {i}: gradient length {g.size} != memory length "
                    f"{self.averages[i].size}")
            self.averages[i] = self.averages[i] + (g - self.averages[i]) / k

    def copy(self) -> "GradientMemory":
        return GradientMemory([a.copy() for a in self.averages], self.count,
                              self.include_biases)


@dataclass
class TrainConfig:
    alpha: float = 0.03
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 10
    variant: str = nn.CAE
    seed: int = 0
    latent_weight: float = 0.0       # weight on the KL term; 0 for the CAE
    constrain_biases: bool = False   # include bias grads in the memory/constraint
    memory_source: str = "total"     # "total" (dJ/dphi) | "recon" (dL/dphi)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.variant == nn.CAE and self.latent_weight != 0.0:
            raise ValueError("CAE uses no latent loss (latent_weight must be 0)")
        if self.memory_source not in ("total", "recon"):
            raise ValueError(f"unknown memory_source {self.memory_source!r}")


@dataclass
class ScoreConfig:
    alpha: float = 0.03
    beta: float | None = None        # defaults to 4 * alpha

    def __post_init__(self):
        if self.beta is None:
            self.beta = 4.0 * self.alpha
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class LossBreakdown:
    recon: float
    latent: float
    grad_loss: float
    total_train: float
    anomaly_score: float


def _constraint_param_groups(model: nn.ModelParams, include_biases: bool):
    """Per-decoder-layer tuples of the parameters entering the constraint."""
    groups = []
    for w, b in model.decoder:
        if include_biases and b is not None:
            groups.append((w, b))
        else:
            groups.append((w,))
    return groups


def _layer_vectors(groups, flat_grads):
    """Rebuild one flattened gradient vector per layer from a flat grad list."""
    vectors, i = [], 0
    for group in groups:
        parts = [ad.flatten(flat_grads[i + j]) for j in range(len(group))]
        i += len(group)
        vectors.append(parts[0] if len(parts) == 1 else ad.concat(parts))
    return vectors


def gradient_loss(memory: GradientMemory, current_grads) -> Var:
    """Negative mean cosine alignment of current decoder gradients vs memory.

    The memory side is a constant; the result stays differentiable w.r.t.
    the current gradients (and hence second-order w.r.t. the weights).
    """
    if memory.count < 1:
        raise ValueError("gradient_loss: empty memory (cold start handled by caller)")
    if len(current_grads) != len(memory.averages):
        raise ValueError(
            f"gradient_loss: {len(memory.averages)} memory layers vs "
            f"{len(current_grads)} gradient vectors")
    total = None
    for g, avg in zip(current_grads, memory.averages):
        c = ad.cosine_similarity(ad.flatten(g), avg)
        total = c if total is None else ad.add(total, c)
    return ad.scalar_mul(total, -1.0 / len(memory.averages))


def _reconstruction_loss(model, out, batch, latent_weight):
    """Returns (recon_loss, latent_loss or None) for a forward output."""
    if model.variant == nn.VAE:
        recon = ad.bce_loss(out["reconstruction"], batch)
        latent = ad.kl_div_gaussian(out["mu"], out["logvar"])
        if latent_weight != 1.0:
            latent = ad.scalar_mul(latent, latent_weight)
        return recon, latent
    return ad.mse_loss(out["reconstruction"], batch), None


def train_step(model: nn.ModelParams, memory: GradientMemory, batch,
               config: TrainConfig, adam: nn.AdamState,
               rng: np.random.Generator | None = None) -> LossBreakdown:
    """One constrained training step; mutates model, memory and adam state.

    Order of operations: forward; dL/dphi without updating weights; gradient
    loss against the memory (0 on the cold-start step); total loss J;
    backprop of J through all parameters (second-order through the gradient
    loss); Adam update; memory update with the decoder components of dJ/dphi.
    """
    batch = np.asarray(batch)
    if batch.shape[0] == 0:
        raise ValueError("train_step: empty batch")
    out = nn.forward(model, batch, rng=rng)
    recon, latent = _reconstruction_loss(model, out, batch, config.latent_weight)

    groups = _constraint_param_groups(model, memory.include_biases)
    flat_targets = [p for group in groups for p in group]
    lgrad_val = 0.0
    g_vectors = None
    loss = recon if latent is None else ad.add(recon, latent)
    if config.alpha != 0.0:
        # dL/dphi, obtained without any weight update, kept differentiable
        g_flat = ad.grad(recon, flat_targets, create_graph=True)
        g_vectors = _layer_vectors(groups, g_flat)
        if memory.count >= 1:
            lgrad = gradient_loss(memory, g_vectors)
            lgrad_val = lgrad.item()
            loss = ad.add(loss, ad.scalar_mul(lgrad, config.alpha))

    params = model.parameters()
    full_grads = ad.grad(loss, params)

    recon_val = recon.item()
    latent_val = 0.0 if latent is None else latent.item()
    total_val = loss.item()
    if not math.isfinite(total_val):
        norms = [float(np.linalg.norm(w.data)) for w in model.decoder_weights()]
        raise NonFiniteLossError(
            f"non-finite loss {total_val} at step {adam.step_count + 1}; "
            f"decoder weight norms {norms}")

    nn.adam_step(adam, params, full_grads)

    if config.memory_source == "total":
        by_id = {id(p): g for p, g in zip(params, full_grads)}
        mem_grads = [np.concatenate([by_id[id(p)].data.reshape(-1) for p in group])
                     for group in groups]
    elif g_vectors is not None:
        mem_grads = [g.detach().data for g in g_vectors]
    else:
        mem_grads = [g.data.reshape(-1)
                     for g in _layer_vectors(groups, ad.grad(recon, flat_targets))]
    memory.update(mem_grads)

    return LossBreakdown(recon=recon_val, latent=latent_val, grad_loss=lgrad_val,
                         total_train=total_val,
                         anomaly_score=recon_val + 4.0 * config.alpha * lgrad_val)


def _sample_layer_cosines(model: nn.ModelParams, memory: GradientMemory, image,
                          rng: np.random.Generator | None = None):
    """Per-decoder-layer -cos(memory, dL/dphi) for a single sample.

    Returns (neg_cos list, recon value, latent value). Read-only on the
    model and the memory.
    """
    if memory.count < 1:
        raise ValueError("scoring requires a trained gradient memory")
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    out = nn.forward(model, image, rng=rng)
    recon, latent = _reconstruction_loss(
        model, out, image, 1.0 if model.variant == nn.VAE else 0.0)
    groups = _constraint_param_groups(model, memory.include_biases)
    flat_targets = [p for group in groups for p in group]
    g_flat = ad.grad(recon, flat_targets)
    neg_cos = []
    with ad.no_grad():
        for g, avg in zip(_layer_vectors(groups, g_flat), memory.averages):
            neg_cos.append(-ad.cosine_similarity(g, avg).item())
    return neg_cos, recon.item(), 0.0 if latent is None else latent.item()


def score_sample(model: nn.ModelParams, memory: GradientMemory, image,
                 score_config: ScoreConfig | None = None) -> LossBreakdown:
    """Anomaly score recon + beta * grad_loss for one image; pure."""
    cfg = score_config or ScoreConfig()
    neg_cos, recon_val, latent_val = _sample_layer_cosines(model, memory, image)
    lgrad = float(np.mean(neg_cos))
    return LossBreakdown(
        recon=recon_val, latent=latent_val, grad_loss=lgrad,
        total_train=recon_val + latent_val + cfg.alpha * lgrad,
        anomaly_score=recon_val + cfg.beta * lgrad)


def layer_cosine(model: nn.ModelParams, memory: GradientMemory, image,
                 layer_index: int) -> float:
    """-cos for a single decoder layer (same sign convention as grad_loss)."""
    n_layers = len(memory.averages)
    if not 0 <= layer_index < n_layers:
        raise IndexError(f"layer index {layer_index} out of range [0, {n_layers})")
    neg_cos, _, _ = _sample_layer_cosines(model, memory, image)
    return neg_cos[layer_index]


def score_dataset(model: nn.ModelParams, memory: GradientMemory, images,
                  score_config: ScoreConfig | None = None):
    """Score a stack of images; returns dict of per-sample score arrays."""
    cfg = score_config or ScoreConfig()
    recs, lats, grads, layer_cos = [], [], [], []
    for img in images:
        neg_cos, r, l = _sample_layer_cosines(model, memory, img)
        recs.append(r)
        lats.append(l)
        grads.append(float(np.mean(neg_cos)))
        layer_cos.append(neg_cos)
    recs, lats, grads = np.asarray(recs), np.asarray(lats), np.asarray(grads)
    return {
        "recon": recs,
        "latent": lats,
        "grad": grads,
        "combined": recs + cfg.beta * grads,
        "layers": np.asarray(layer_cos),   # (N, n_decoder_layers)
    }


def _epoch_means(rows):
    keys = ("recon", "latent", "grad_loss", "total_train")
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}


def _eval_losses(model, memory, images, config, batch_size):
    """Mean (recon, latent, grad_loss, total) over a set without updates."""
    groups = _constraint_param_groups(model, memory.include_biases)
    flat_targets = [p for group in groups for p in group]
    recs, lats, lgrads, weights = [], [], [], []
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        out = nn.forward(model, batch, rng=np.random.default_rng(0))
        recon, latent = _reconstruction_loss(model, out, batch, config.latent_weight)
        lgrad_val = 0.0
        if memory.count >= 1:
            g_flat = ad.grad(recon, flat_targets)
            with ad.no_grad():
                lgrad_val = gradient_loss(memory, _layer_vectors(groups, g_flat)).item()
        recs.append(recon.item())
        lats.append(0.0 if latent is None else latent.item())
        lgrads.append(lgrad_val)
        weights.append(len(batch))
    w = np.asarray(weights, dtype=float)
    r = float(np.average(recs, weights=w))
    l = float(np.average(lats, weights=w))
    g = float(np.average(lgrads, weights=w))
    return {"recon": r, "latent": l, "grad_loss": g,
            "total_train": r + l + config.alpha * g}


def calibrate_output_bias(model: nn.ModelParams, images) -> None:
    """Set the output layer's bias so training starts at the dataset mean.

    With a sigmoid output and mostly-dark images, starting from 0.5 drives a
    large uniform error signal that can push the output layer into saturation
    (a stuck all-mean reconstruction) before the latent features form.
    Starting at logit(mean pixel) removes that transient. No-op for layers
    without a sigmoid activation or bias.
    """
    spec = model.decoder_specs[-1]
    bias = model.decoder[-1][1]
    if spec.activation != "sigmoid" or bias is None:
        return
    p = float(np.clip(np.mean(images), 1e-4, 1.0 - 1e-4))
    bias.data[:] = np.log(p / (1.0 - p))


def train(model: nn.ModelParams, train_images, config: TrainConfig,
          val_images=None, log_path=None):
    """Full training loop with seeded shuffling and per-epoch JSON logging.

    The output bias is first calibrated to the dataset mean (see
    calibrate_output_bias). Returns (model, memory, log) where log is a
    list of per-epoch dicts.
    """
    train_images = np.asarray(train_images)
    if train_images.shape[0] == 0:
        raise ValueError("train: empty dataset")
    calibrate_output_bias(model, train_images)
    memory = GradientMemory.for_model(model, include_biases=config.constrain_biases)
    adam = nn.AdamState.for_params(model.parameters(), lr=config.lr)
    shuffle_rng = np.random.default_rng(config.seed)
    vae_rng = np.random.default_rng(config.seed + 1)
    log = []
    n = train_images.shape[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        rows = []
        for start in range(0, n, config.batch_size):
            batch = train_images[order[start:start + config.batch_size]]
            rows.append(train_step(model, memory, batch, config, adam, rng=vae_rng))
        entry = {"epoch": epoch + 1}
        entry.update({f"mean_{k}": v for k, v in _epoch_means(rows).items()})
        if val_images is not None and len(val_images):
            val = _eval_losses(model, memory, np.asarray(val_images), config,
                               config.batch_size)
            entry.update({f"val_{k}": v for k, v in val.items()})
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry) + "\n")
    return model, memory, log
