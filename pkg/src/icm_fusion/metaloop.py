"""Meta-training of the Fusion VAE.

Each outer iteration samples a batch of tasks; for every task the VAE encodes
a stored checkpoint with its task vector, samples ``z``, decodes an initial
adapter, adapts it with ``K`` gradient steps on the task loss, re-encodes the
adapted adapter for the KL term, and scores the decoded reconstruction
against the stored checkpoint. Encoder and decoder then take one gradient
step on the summed meta loss.

The meta gradient is first order: the adapted adapter enters the
re-encoding as a constant.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fvae import (LOG_VAR_CLAMP, LossBreakdown, VaeParams, decode_batch, encode_batch,
                   mlp_backward)
from .numerics import RngStream, stream_id
from .taskvec import TaskVector
from .toybase import BaseModel, CheckpointSequence, FlatParams, TaskDataset, flat_task_loss_grad

__all__ = [
    "MetaConfig",
    "CombinedEntry",
    "CombinedDataset",
    "MetaItem",
    "MetaHistory",
    "MetaDivergence",
    "build_combined_dataset",
    "split_holdout",
    "inner_adapt",
    "meta_objective",
    "meta_gradients",
    "meta_step",
    "train_meta",
    "reconstruction_mse",
    "fit_normalizer",
]


class MetaDivergence(FloatingPointError):
    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"non-finite meta loss at iteration {iteration} {detail}".strip())
        self.iteration = iteration


@dataclass(frozen=True)
class MetaConfig:
    meta_iters: int = 2000
    batch_size: int = 4
    gamma: float = 0.05
    beta: float = 1e-2
    K: int = 1
    lambda_kl: float = 0.005
    seed: int = 0
    inner_batch: int = 32
    holdout_frac: float = 0.1

    def __post_init__(self):
        if self.meta_iters < 0 or self.batch_size < 1 or self.K < 0 or self.inner_batch < 1:
            raise ValueError("meta_iters >= 0, batch_size >= 1, K >= 0, inner_batch >= 1 required")
        if not self.gamma >= 0 or not self.beta >= 0:
            raise ValueError("step sizes must be non-negative")
        if not self.lambda_kl >= 0:
            raise ValueError("lambda_kl must be non-negative")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ValueError("holdout_frac must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class CombinedEntry:
    task_id: str
    vector: TaskVector
    flat: FlatParams
    epoch: int = 0


@dataclass(frozen=True, eq=False)
class CombinedDataset:
    entries: tuple[CombinedEntry, ...]

    def __post_init__(self):
        if self.entries:
            m = self.entries[0].flat.manifest
            c = len(self.entries[0].vector)
            for e in self.entries:
                if e.flat.manifest != m or len(e.vector) != c:
                    raise ValueError("combined entries must share one manifest and cond_dim")

    def __len__(self):
        return len(self.entries)

    @property
    def task_ids(self) -> list[str]:
        return sorted({e.task_id for e in self.entries})

    def by_task(self, task_id: str) -> list[CombinedEntry]:
        return [e for e in self.entries if e.task_id == task_id]

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([e.flat.data for e in self.entries]),
                np.stack([e.vector.data for e in self.entries]))


@dataclass(frozen=True, eq=False)
class MetaItem:
    task_id: str
    vector: TaskVector
    flat: FlatParams
    data: TaskDataset
    key: int = 0


@dataclass
class MetaHistory:
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    meta: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.meta)

    def append(self, loss: LossBreakdown, seconds: float):
        self.recon.append(loss.recon)
        self.kl.append(loss.kl)
        self.meta.append(loss.meta)
        self.seconds.append(seconds)

    def smoothed(self, window: int = 100) -> np.ndarray:
        m = np.asarray(self.meta)
        if m.size < window:
            return m.copy()
        c = np.cumsum(np.insert(m, 0, 0.0))
        return (c[window:] - c[:-window]) / window

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "recon", "kl", "meta"])
        for i, (r, k, m) in enumerate(zip(self.recon, self.kl, self.meta), start=1):
            w.writerow([i, repr(r), repr(k), repr(m)])
        return buf.getvalue()


def build_combined_dataset(sequences: Sequence[CheckpointSequence],
                           task_vectors: Mapping[str, TaskVector]) -> CombinedDataset:
    """Pair every retained checkpoint with its task's vector."""
    entries = []
    for seq in sequences:
        if seq.task_id not in task_vectors:
            raise KeyError(f"no task vector for task {seq.task_id!r}")
        if len(seq) == 0:
            raise ValueError(f"task {seq.task_id!r} has an empty retained window")
        v = task_vectors[seq.task_id]
        entries.extend(CombinedEntry(seq.task_id, v, flat, epoch) for epoch, flat in seq.entries)
    return CombinedDataset(tuple(entries))


def split_holdout(sequences: Sequence[CheckpointSequence], frac: float = 0.1):
    """Hold out the last ``floor(frac * n)`` (at least one when n >= 2) checkpoints per task."""
    train, held = [], []
    for seq in sequences:
        n = len(seq)
        k = int(math.floor(frac * n)) if frac > 0 else 0
        if frac > 0 and n >= 2:
            k = max(k, 1)
        train.append(CheckpointSequence(seq.task_id, seq.entries[:n - k], seq.retained_window,
                                        seq.initial, seq.losses))
        held.append(CheckpointSequence(seq.task_id, seq.entries[n - k:], seq.retained_window,
                                       seq.initial, seq.losses))
    return train, held


def inner_adapt(theta_init: FlatParams, task_data: TaskDataset, beta: float, K: int,
                base: BaseModel) -> FlatParams:
    """``K`` plain gradient steps of size ``beta`` on the task loss."""
    if beta == 0 or K == 0:
        return theta_init
    theta = theta_init.data
    for _ in range(K):
        loss, g = flat_task_loss_grad(base, FlatParams(theta, theta_init.manifest), task_data)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite task loss during inner adaptation")
        theta = theta - beta * g
    return FlatParams(theta, theta_init.manifest)


def _sorted_batch(batch: Sequence[MetaItem]) -> list[MetaItem]:
    return sorted(batch, key=lambda it: (it.task_id, it.key, it.flat.data.tobytes()))


def _meta_pass(vae: VaeParams, batch: Sequence[MetaItem], lambda_kl: float, eps: np.ndarray,
               adapted: np.ndarray | None, base: BaseModel | None, beta: float, K: int,
               need_grad: bool):
    flats = np.stack([it.flat.data for it in batch])
    conds = np.stack([it.vector.data for it in batch])
    mu, lv, raw, enc_acts = encode_batch(vae, flats, conds)
    std = np.exp(0.5 * lv)
    z = mu + std * eps
    theta_init, dec_acts = decode_batch(vae, z, conds)
    if adapted is None:
        manifest = batch[0].flat.manifest
        adapted = np.stack([
            inner_adapt(FlatParams(theta_init[i], manifest), it.data, beta, K, base).data
            for i, it in enumerate(batch)
        ])
    mu2, lv2, raw2, enc2_acts = encode_batch(vae, adapted, conds)
    D = vae.input_dim
    resid = dec_acts[-1] - vae.normalize(flats)
    recon_rows = np.mean(resid ** 2, axis=1)
    kl_rows = -0.5 * np.sum(1.0 + lv2 - mu2 ** 2 - np.exp(lv2), axis=1)
    loss = LossBreakdown(float(np.sum(recon_rows)), float(np.sum(kl_rows)), lambda_kl)
    if not need_grad:
        return loss, None, adapted

    dec_grads, d_in = mlp_backward(vae.decoder, dec_acts, 2.0 * resid / D)
    dz = d_in[:, :vae.latent_dim]
    in_range = (raw >= -LOG_VAR_CLAMP) & (raw <= LOG_VAR_CLAMP)
    d1 = np.concatenate([dz, dz * eps * 0.5 * std * in_range], axis=1)
    enc1, _ = mlp_backward(vae.encoder, enc_acts, d1)

    in_range2 = (raw2 >= -LOG_VAR_CLAMP) & (raw2 <= LOG_VAR_CLAMP)
    d2 = np.concatenate([lambda_kl * mu2,
                         lambda_kl * 0.5 * (np.exp(lv2) - 1.0) * in_range2], axis=1)
    enc2, _ = mlp_backward(vae.encoder, enc2_acts, d2)
    enc = tuple((a[0] + b[0], a[1] + b[1]) for a, b in zip(enc1, enc2))
    grads = vae._rebuild([a for pair in (*enc, *dec_grads) for a in pair])
    return loss, grads, adapted


def meta_objective(vae: VaeParams, batch: Sequence[MetaItem], lambda_kl: float,
                   eps: np.ndarray, adapted: np.ndarray) -> LossBreakdown:
    """Summed meta loss with the adapted adapters held fixed (the truncated objective)."""
    return _meta_pass(vae, batch, lambda_kl, eps, adapted, None, 0.0, 0, False)[0]


def meta_gradients(vae: VaeParams, batch: Sequence[MetaItem], lambda_kl: float,
                   eps: np.ndarray, adapted: np.ndarray | None = None,
                   base: BaseModel | None = None, beta: float = 0.0, K: int = 0):
    """Returns (loss, grads, adapted) for the truncated meta objective."""
    return _meta_pass(vae, batch, lambda_kl, eps, adapted, base, beta, K, True)


def meta_step(vae: VaeParams, batch: Sequence[MetaItem], cfg: MetaConfig, rng: RngStream,
              base: BaseModel, iteration: int = 0) -> tuple[VaeParams, LossBreakdown]:
    """One outer update ``(phi, psi) <- (phi, psi) - gamma * grad(sum_i L_meta)``."""
    if not batch:
        raise ValueError("meta_step needs a non-empty batch")
    items = _sorted_batch(batch)
    eps = rng.normal((len(items), vae.latent_dim)).astype(vae.dtype, copy=False)
    try:
        loss, grads, _ = meta_gradients(vae, items, cfg.lambda_kl, eps, None, base, cfg.beta, cfg.K)
    except FloatingPointError as exc:
        raise MetaDivergence(iteration, f"({exc})") from exc
    if not (math.isfinite(loss.meta) and math.isfinite(loss.recon) and math.isfinite(loss.kl)):
        raise MetaDivergence(iteration)
    if cfg.gamma == 0:
        return vae, loss
    gamma = cfg.gamma
    new = vae.map(lambda p, g: (p - gamma * g).astype(p.dtype, copy=False), grads)
    return new, loss


def _iteration_batch(dataset: CombinedDataset, task_data: Mapping[str, TaskDataset],
                     cfg: MetaConfig, rng: RngStream) -> list[MetaItem]:
    task_ids = dataset.task_ids
    if cfg.batch_size > len(task_ids):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds the number of tasks {len(task_ids)}")
    picked = sorted(rng.choice(len(task_ids), size=cfg.batch_size, replace=False))
    batch = []
    for t in picked:
        tid = task_ids[t]
        entries = dataset.by_task(tid)
        k = int(rng.integers(0, len(entries)))
        data = task_data[tid]
        n = len(data)
        idx = np.sort(rng.choice(n, size=min(cfg.inner_batch, n), replace=False))
        batch.append(MetaItem(tid, entries[k].vector, entries[k].flat, data.subset(idx), k))
    return batch


def train_meta(dataset: CombinedDataset, task_data: Mapping[str, TaskDataset], cfg: MetaConfig,
               vae_init: VaeParams, base: BaseModel, progress=None):
    """Run ``cfg.meta_iters`` meta steps; returns (final params, history)."""
    if len(dataset) == 0:
        raise ValueError("combined dataset is empty")
    missing = [t for t in dataset.task_ids if t not in task_data]
    if missing:
        raise KeyError(f"no task data for {missing}")
    vae = vae_init
    history = MetaHistory()
    for it in range(1, cfg.meta_iters + 1):
        t0 = time.perf_counter()
        rng = RngStream(cfg.seed, stream_id("meta-iter", it))
        batch = _iteration_batch(dataset, task_data, cfg, rng)
        vae, loss = meta_step(vae, batch, cfg, rng, base, iteration=it)
        history.append(loss, time.perf_counter() - t0)
        if progress is not None:
            progress(it, loss)
    return vae, history


def fit_normalizer(vae: VaeParams, dataset: CombinedDataset) -> VaeParams:
    """Attach a fixed normaliser: per-coordinate mean shift, pooled-std scale,
    and RMS task-vector scale, all measured on the training entries."""
    flats, conds = dataset.matrices()
    shift = flats.mean(axis=0)
    scale = float(np.std(flats - shift)) or 1.0
    cond_scale = float(np.sqrt(np.mean(conds ** 2))) or 1.0
    return vae.with_normalizer(shift, scale, cond_scale)


def reconstruction_mse(vae: VaeParams, entries: Sequence[CombinedEntry]) -> tuple[float, float]:
    """Mean-of-posterior reconstruction MSE and the pooled variance of the entries."""
    flats = np.stack([e.flat.data for e in entries])
    conds = np.stack([e.vector.data for e in entries])
    mu, _, _, _ = encode_batch(vae, flats, conds)
    recon, _ = decode_batch(vae, mu, conds)
    return float(np.mean((recon - flats) ** 2)), float(np.var(flats))
