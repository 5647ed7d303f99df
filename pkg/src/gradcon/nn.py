"""Convolutional autoencoder / variational autoencoder and the Adam optimizer.

Default architecture: four 4x4 conv layers (32, 32, 64, 64 filters) mapping a
32x32 input to a 3x3x64 latent code, with a mirrored transposed-conv decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var

CAE = "cae"
VAE = "vae"

LATENT_CHANNELS = 64
INPUT_SIZE = 32


@dataclass
class LayerSpec:
    kind: str                # "conv" | "conv_transpose"
    in_channels: int
    out_channels: int
    kernel: int = 4
    stride: int = 1
    pad: int = 1
    activation: str = "relu"  # "relu" | "sigmoid" | "none"
    has_bias: bool = True


@dataclass
class ModelParams:
    """Ordered encoder and decoder parameters plus their layer specs."""

    variant: str
    in_channels: int
    encoder_specs: list
    decoder_specs: list
    encoder: list = field(default_factory=list)  # list of (weight Var, bias Var)
    decoder: list = field(default_factory=list)

    def parameters(self):
        """All parameter Vars, encoder first, weight before bias per layer."""
        out = []
        for w, b in self.encoder + self.decoder:
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def decoder_weights(self):
        return [w for w, _ in self.decoder]


def default_layer_specs(variant: str, in_channels: int):
    """Encoder/decoder specs: strides s2,s2,s2,s1 map 32x32 -> 3x3 latent."""
    latent_out = LATENT_CHANNELS * (2 if variant == VAE else 1)
    enc = [
        LayerSpec("conv", in_channels, 32, stride=2),
        LayerSpec("conv", 32, 32, stride=2),
        LayerSpec("conv", 32, 64, stride=2),
        LayerSpec("conv", 64, latent_out, stride=1, activation="none"),
    ]
    dec = [
        LayerSpec("conv_transpose", 64, 64, stride=1),
        LayerSpec("conv_transpose", 64, 32, stride=2),
        LayerSpec("conv_transpose", 32, 32, stride=2),
        LayerSpec("conv_transpose", 32, in_channels, stride=2, activation="sigmoid"),
    ]
    return enc, dec


def _init_layer(spec: LayerSpec, rng: np.random.Generator):
    if spec.kind == "conv":
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        fan_in = spec.in_channels * spec.kernel * spec.kernel
    else:
        # fan-in follows the second weight axis, as in common frameworks;
        # a smaller bound here starves the decoder and stalls training
        shape = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
        fan_in = spec.out_channels * spec.kernel * spec.kernel
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=shape).astype(ad.get_default_dtype())
    weight = Var(w, requires_grad=True)
    bias = None
    if spec.has_bias:
        b = rng.uniform(-bound, bound, size=spec.out_channels)
        bias = Var(b.astype(ad.get_default_dtype()), requires_grad=True)
    return weight, bias


def build_model(variant: str = CAE, in_channels: int = 1, seed: int = 0) -> ModelParams:
    if in_channels not in (1, 3):
        raise ValueError(f"unsupported channel count {in_channels}, expected 1 or 3")
    if variant not in (CAE, VAE):
        raise ValueError(f"unknown variant {variant!r}")
    enc_specs, dec_specs = default_layer_specs(variant, in_channels)
    rng = np.random.default_rng(seed)
    model = ModelParams(variant, in_channels, enc_specs, dec_specs)
    model.encoder = [_init_layer(s, rng) for s in enc_specs]
    model.decoder = [_init_layer(s, rng) for s in dec_specs]
    return model


def param_count(model: ModelParams) -> int:
    total = 0
    for w, b in model.encoder + model.decoder:
        total += w.size
        if b is not None:
            total += b.size
    return total


def _apply_layer(x: Var, spec: LayerSpec, weight: Var, bias) -> Var:
    if spec.kind == "conv":
        out = ad.conv2d(x, weight, bias, stride=spec.stride, pad=spec.pad)
    else:
        out = ad.conv2d_transpose(x, weight, bias, stride=spec.stride, pad=spec.pad)
    if spec.activation == "relu":
        return ad.relu(out)
    if spec.activation == "sigmoid":
        return ad.sigmoid(out)
    return out


def encode(model: ModelParams, batch) -> Var:
    x = ad.as_var(batch)
    if x.data.ndim != 4 or x.shape[1] != model.in_channels \
            or x.shape[2] != INPUT_SIZE or x.shape[3] != INPUT_SIZE:
        raise ad.ShapeMismatchError(
            f"encode: expected (N, {model.in_channels}, {INPUT_SIZE}, {INPUT_SIZE}), "
            f"got {x.shape}")
    for spec, (w, b) in zip(model.encoder_specs, model.encoder):
        x = _apply_layer(x, spec, w, b)
    return x


def decode(model: ModelParams, latent: Var) -> Var:
    x = latent
    for spec, (w, b) in zip(model.decoder_specs, model.decoder):
        x = _apply_layer(x, spec, w, b)
    return x


def forward(model: ModelParams, batch, rng: np.random.Generator | None = None):
    """Run the autoencoder; returns dict with reconstruction and latent nodes.

    For the VAE the final encoder output is split channel-wise into
    (mu, logvar) and the latent is reparameterized: z = mu + exp(logvar/2) * eps.
    """
    h = encode(model, batch)
    if model.variant == VAE:
        c = h.shape[1] // 2
        mu = _channel_slice(h, 0, c)
        logvar = _channel_slice(h, c, 2 * c)
        if rng is None:
            rng = np.random.default_rng(0)
        eps = rng.standard_normal(mu.shape).astype(mu.data.dtype)
        z = ad.add(mu, ad.mul(ad.exp(ad.scalar_mul(logvar, 0.5)), ad.constant(eps)))
        recon = decode(model, z)
        return {"reconstruction": recon, "latent": z, "mu": mu, "logvar": logvar}
    recon = decode(model, h)
    return {"reconstruction": recon, "latent": h}


def _channel_slice(x: Var, start: int, stop: int) -> Var:
    """Differentiable slice along the channel axis of an NCHW tensor."""
    n, c, h, w = x.shape
    sel = np.zeros((stop - start, c), dtype=x.data.dtype)
    sel[np.arange(stop - start), np.arange(start, stop)] = 1.0
    x2 = ad.reshape(ad.transpose(x, (1, 0, 2, 3)), (c, n * h * w))
    out2 = ad.matmul(ad.constant(sel), x2)
    return ad.transpose(ad.reshape(out2, (stop - start, n, h, w)), (1, 0, 2, 3))


@dataclass
class AdamState:
    """Per-parameter moment estimates for the Adam optimizer."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 0.001) -> "AdamState":
        state = cls(lr=lr)
        state.m = [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
        state.v = [np.zeros(p.shape, dtype=p.data.dtype) for p in params]
        return state


def adam_step(state: AdamState, params, grads) -> None:
    """One bias-corrected Adam update, mutating parameter data in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter/gradient count mismatch")
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        gd = g.data if isinstance(g, Var) else np.asarray(g)
        if gd.shape != p.shape:
            raise ad.ShapeMismatchError(
                f"adam_step: grad shape {gd.shape} != param shape {p.shape} at index {i}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gd
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gd * gd
        m_hat = state.m[i] / (1.0 - state.beta1 ** t)
        v_hat = state.v[i] / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
