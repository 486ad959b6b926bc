"""Fusion VAE over flattened LoRA parameters, conditioned on a task vector.

Encoder and decoder are fully connected tanh networks. The encoder reads
``[l; v]`` and emits a diagonal Gaussian ``(mu, log_var)``; the decoder reads
``[z; v]`` and emits the mean reconstruction of ``l``. All gradients are
hand-derived; ``numerics.finite_diff_grad`` is the oracle for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RngStream, stream_id
from .toybase import FlatParams

__all__ = [
    "LOG_VAR_CLAMP",
    "VaeParams",
    "LatentGaussian",
    "LossBreakdown",
    "init_vae",
    "encode",
    "decode",
    "kl_to_standard_normal",
    "recon_loss",
    "elbo_loss",
    "vae_backward",
    "mlp_forward",
    "mlp_backward",
    "encode_batch",
    "decode_batch",
]

LOG_VAR_CLAMP = 10.0

Layer = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class VaeParams:
    """Encoder (phi) and decoder (psi) layers as ``(W, b)`` pairs, W is out x in."""

    encoder: tuple[Layer, ...]
    decoder: tuple[Layer, ...]
    latent_dim: int
    input_dim: int
    cond_dim: int
    # fixed input normalisation: flats enter as (l - shift) / scale, task vectors as v / cond_scale
    shift: np.ndarray | None = None
    scale: float = 1.0
    cond_scale: float = 1.0

    def __post_init__(self):
        if self.shift is None:
            object.__setattr__(self, "shift", np.zeros(self.input_dim, dtype=self.dtype))
        if self.shift.shape != (self.input_dim,) or not self.scale > 0 or not self.cond_scale > 0:
            raise ValueError("normaliser must be a length-D shift and positive scales")
        if self.encoder[0][0].shape[1] != self.input_dim + self.cond_dim:
            raise ValueError("encoder input width must be D + cond_dim")
        if self.encoder[-1][0].shape[0] != 2 * self.latent_dim:
            raise ValueError("encoder output width must be 2 * latent_dim")
        if self.decoder[0][0].shape[1] != self.latent_dim + self.cond_dim:
            raise ValueError("decoder input width must be latent_dim + cond_dim")
        if self.decoder[-1][0].shape[0] != self.input_dim:
            raise ValueError("decoder output width must be D")

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w, _ in self.encoder[:-1])

    @property
    def dtype(self):
        return self.encoder[0][0].dtype

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in (*self.encoder, *self.decoder):
            out.extend((w, b))
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for part, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, (w, b) in enumerate(layers):
                out[f"{part}/{i}/W"] = w
                out[f"{part}/{i}/b"] = b
        return out

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def from_vector(self, vec) -> "VaeParams":
        arrays = []
        pos = 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos:pos + a.size], dtype=a.dtype).reshape(a.shape))
            pos += a.size
        if pos != len(vec):
            raise ValueError("vector length does not match parameter count")
        return self._rebuild(arrays)

    def _rebuild(self, arrays) -> "VaeParams":
        n_enc = len(self.encoder)
        pairs = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)]
        return VaeParams(tuple(pairs[:n_enc]), tuple(pairs[n_enc:]),
                         self.latent_dim, self.input_dim, self.cond_dim,
                         self.shift, self.scale, self.cond_scale)

    def with_normalizer(self, shift, scale: float, cond_scale: float = 1.0) -> "VaeParams":
        return VaeParams(self.encoder, self.decoder, self.latent_dim, self.input_dim,
                         self.cond_dim, np.asarray(shift, dtype=self.dtype), float(scale),
                         float(cond_scale))

    def normalize(self, flats: np.ndarray) -> np.ndarray:
        return (flats - self.shift) / self.scale

    def map(self, fn, *others: "VaeParams") -> "VaeParams":
        """Apply ``fn`` array-wise across this and other same-shaped params."""
        cols = zip(self.arrays(), *(o.arrays() for o in others))
        return self._rebuild([fn(*c) for c in cols])

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], latent_dim: int,
                   input_dim: int, cond_dim: int, shift=None, scale: float = 1.0,
                   cond_scale: float = 1.0) -> "VaeParams":
        def layers(part):
            out, i = [], 0
            while f"{part}/{i}/W" in named:
                out.append((named[f"{part}/{i}/W"], named[f"{part}/{i}/b"]))
                i += 1
            return tuple(out)
        return cls(layers("enc"), layers("dec"), latent_dim, input_dim, cond_dim,
                   shift, scale, cond_scale)


@dataclass(frozen=True, eq=False)
class LatentGaussian:
    mu: np.ndarray
    log_var: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    kl: float
    lambda_kl: float

    @property
    def meta(self) -> float:
        return self.recon + self.lambda_kl * self.kl

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        if other.lambda_kl != self.lambda_kl:
            raise ValueError("cannot sum breakdowns with different lambda_kl")
        return LossBreakdown(self.recon + other.recon, self.kl + other.kl, self.lambda_kl)


def init_vae(D: int, cond_dim: int, d: int, hidden=(128, 128), seed: int = 0,
             dtype=np.float64) -> VaeParams:
    """Gaussian init with 1/sqrt(fan_in) scale; the log-variance head bias starts at -2."""
    if min(D, cond_dim, d) < 1 or any(h < 1 for h in hidden):
        raise ValueError("all VAE dims must be positive")
    rng = RngStream(seed, stream_id("vae-init"))

    def stack(n_in, n_out):
        widths = [n_in, *hidden, n_out]
        layers = []
        for a, b in zip(widths, widths[1:]):
            w = rng.normal((b, a)) / math.sqrt(a)
            layers.append((w.astype(dtype), np.zeros(b, dtype=dtype)))
        return layers

    enc = stack(D + cond_dim, 2 * d)
    w, b = enc[-1]
    b = b.copy()
    b[d:] = -2.0
    enc[-1] = (w * 0.1, b)
    dec = stack(d + cond_dim, D)
    return VaeParams(tuple(enc), tuple(dec), d, D, cond_dim)


# --------------------------------------------------------------------------
# dense MLP pieces


def mlp_forward(layers, x) -> list[np.ndarray]:
    """Activations of a tanh MLP with a linear head; ``x`` is (n, in)."""
    acts = [x]
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        pre = acts[-1] @ w.T + b
        acts.append(np.tanh(pre) if i < last else pre)
    return acts


def mlp_backward(layers, acts, d_out):
    """Returns (per-layer (dW, db), d_input) for upstream gradient ``d_out``."""
    grads = [None] * len(layers)
    g = d_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (1.0 - acts[i + 1] ** 2)
        w = layers[i][0]
        grads[i] = (g.T @ acts[i], g.sum(axis=0))
        g = g @ w
    return grads, g


def encode_batch(params: VaeParams, flats: np.ndarray, conds: np.ndarray):
    """Batched encoder; returns (mu, log_var, raw_log_var, activations)."""
    x = np.concatenate([params.normalize(flats), conds / params.cond_scale], axis=1)
    acts = mlp_forward(params.encoder, x)
    d = params.latent_dim
    out = acts[-1]
    raw = out[:, d:]
    return out[:, :d], np.clip(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP), raw, acts


def decode_batch(params: VaeParams, z: np.ndarray, conds: np.ndarray):
    """Batched decoder; returns (reconstruction in parameter units, activations).

    ``acts[-1]`` is the network output in normalised units.
    """
    acts = mlp_forward(params.decoder, np.concatenate([z, conds / params.cond_scale], axis=1))
    return acts[-1] * params.scale + params.shift, acts


def _vec(x, n, what):
    arr = x.data if isinstance(x, FlatParams) else np.asarray(x)
    if arr.ndim != 1 or arr.size != n:
        raise ValueError(f"{what} must be a vector of length {n}, got shape {arr.shape}")
    return arr


def encode(params: VaeParams, flat, v) -> LatentGaussian:
    l = _vec(flat, params.input_dim, "flat")
    c = _vec(v.data if hasattr(v, "task_id") else v, params.cond_dim, "task vector")
    mu, lv, _, _ = encode_batch(params, l[None], c[None])
    return LatentGaussian(mu[0], lv[0])


def decode(params: VaeParams, z, v, manifest=None):
    """Mean reconstruction; wrapped as FlatParams when a manifest is given."""
    zz = _vec(z, params.latent_dim, "z")
    c = _vec(v.data if hasattr(v, "task_id") else v, params.cond_dim, "task vector")
    out, _ = decode_batch(params, zz[None], c[None])
    return FlatParams(out[0], manifest) if manifest is not None else out[0]


# --------------------------------------------------------------------------
# losses


def kl_to_standard_normal(g: LatentGaussian) -> float:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)) in closed form."""
    mu, lv = np.asarray(g.mu), np.asarray(g.log_var)
    return float(-0.5 * np.sum(1.0 + lv - mu ** 2 - np.exp(lv)))


def recon_loss(original, recon) -> float:
    a = original.data if isinstance(original, FlatParams) else np.asarray(original)
    b = recon.data if isinstance(recon, FlatParams) else np.asarray(recon)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _kl_rows(mu, lv):
    return -0.5 * np.sum(1.0 + lv - mu ** 2 - np.exp(lv), axis=1)


def _draw_eps(rng, eps, shape, dtype):
    if eps is not None:
        eps = np.asarray(eps, dtype=dtype).reshape(shape)
        return eps
    return rng.normal(shape).astype(dtype, copy=False)


def _elbo_terms(params, flat, v, lambda_kl, rng, eps, decoder, need_grad):
    l = _vec(flat, params.input_dim, "flat")[None]
    c = _vec(v.data if hasattr(v, "task_id") else v, params.cond_dim, "task vector")[None]
    mu, lv, raw, enc_acts = encode_batch(params, l, c)
    e = _draw_eps(rng, eps, mu.shape, mu.dtype)
    std = np.exp(0.5 * lv)
    z = mu + std * e
    if decoder is not None:
        out = params.normalize(np.asarray(decoder(z[0], c[0]))[None])
        dec_acts = None
    else:
        _, dec_acts = decode_batch(params, z, c)
        out = dec_acts[-1]
    resid = out - params.normalize(l)
    recon = float(np.mean(resid ** 2))
    kl = float(_kl_rows(mu, lv)[0])
    loss = LossBreakdown(recon, kl, lambda_kl)
    if not need_grad:
        return loss, None
    if decoder is not None:
        raise ValueError("analytic gradients need the real decoder")
    dec_grads, d_in = mlp_backward(params.decoder, dec_acts, 2.0 * resid / resid.size)
    dz = d_in[:, :params.latent_dim]
    d_mu = dz + lambda_kl * mu
    d_lv = dz * e * 0.5 * std + lambda_kl * 0.5 * (np.exp(lv) - 1.0)
    d_lv = d_lv * ((raw >= -LOG_VAR_CLAMP) & (raw <= LOG_VAR_CLAMP))
    enc_grads, _ = mlp_backward(params.encoder, enc_acts, np.concatenate([d_mu, d_lv], axis=1))
    return loss, params._rebuild([a for pair in (*enc_grads, *dec_grads) for a in pair])


def elbo_loss(params: VaeParams, flat, v, rng: RngStream | None = None, *,
              lambda_kl: float = 0.005, eps=None,
              decoder: Callable | None = None) -> LossBreakdown:
    """Single-sample negative ELBO as ``recon + lambda_kl * kl``.

    ``recon`` is measured in the normaliser's units (plain MSE when the
    normaliser is the identity, as after ``init_vae``).

    ``decoder`` replaces the decoder network (test seam); it receives
    ``(z, v)`` and returns a reconstruction of length D.
    """
    return _elbo_terms(params, flat, v, lambda_kl, rng, eps, decoder, need_grad=False)[0]


def vae_backward(params: VaeParams, flat, v, rng: RngStream | None = None, *,
                 lambda_kl: float = 0.005, eps=None) -> tuple[LossBreakdown, VaeParams]:
    """Pathwise gradient of ``elbo_loss`` under the same epsilon draw."""
    return _elbo_terms(params, flat, v, lambda_kl, rng, eps, None, need_grad=True)
