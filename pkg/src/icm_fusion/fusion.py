"""ICM fusion through the trained Fusion VAE and the training-free merge baselines.

Baselines act on parameter-space deltas (``ParamDelta``): a fine-tuned
adapter minus the shared initial adapter, whose update ``B @ A`` is zero and
therefore stands in for the base model. A merged delta is added back onto
that initial adapter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .fvae import VaeParams, decode_batch, encode_batch
from .numerics import RngStream, stream_id
from .taskvec import TaskVector, combine_task_vectors
from .toybase import (BaseModel, FlatParams, LoraAdapter, TaskDataset, apply_lora, flatten,
                      task_loss, unflatten)

__all__ = [
    "METHODS",
    "ParamDelta",
    "MergeSpec",
    "icm_fuse",
    "simplex_grid",
    "select_fusion_weights",
    "soup_merge",
    "ta_merge",
    "ties_merge",
    "dare",
    "dare_ties_merge",
    "regmean_merge",
    "regmean_lora_merge",
    "svd_latent_merge",
    "param_deltas",
    "apply_delta",
    "merge_baseline",
]

METHODS = ("icm", "soup", "ta", "ties", "dare_ties", "regmean", "svd_latent")


@dataclass(frozen=True, eq=False)
class ParamDelta:
    data: np.ndarray
    task_id: str = ""

    def __len__(self):
        return self.data.size


@dataclass(frozen=True)
class MergeSpec:
    method: str
    lambda_ta: float | None = None
    density: float = 0.2
    drop_p: float = 0.5
    svd_rank: int = 1
    grid_step: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if not 0.0 <= self.drop_p < 1.0:
            raise ValueError("drop_p must lie in [0, 1)")
        if self.svd_rank < 1:
            raise ValueError("svd_rank must be >= 1")
        if not 0.0 < self.grid_step <= 0.5:
            raise ValueError("grid_step must lie in (0, 0.5]")


def _check_weights(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("fusion weights must be non-negative and sum to 1")
    return w


# --------------------------------------------------------------------------
# ICM fusion


def icm_fuse(vae: VaeParams, entries: Sequence[tuple[FlatParams, TaskVector]],
             weights: Sequence[float]) -> FlatParams:
    """Decode the convex combination of posterior means and task vectors."""
    if not entries:
        raise ValueError("icm_fuse needs at least one entry")
    w = _check_weights(weights, len(entries))
    manifest = entries[0][0].manifest
    if any(f.manifest != manifest for f, _ in entries):
        raise ValueError("entries do not share a manifest")
    flats = np.stack([f.data for f, _ in entries])
    conds = np.stack([v.data for _, v in entries])
    mu, _, _, _ = encode_batch(vae, flats, conds)
    if len(entries) == 1:
        z, v = mu[0], conds[0]
    else:
        order = sorted(range(len(entries)), key=lambda i: (entries[i][1].task_id, w[i]))
        z = np.zeros(vae.latent_dim, dtype=mu.dtype)
        for i in order:
            z = z + w[i] * mu[i]
        v = combine_task_vectors([e[1] for e in entries], w).data
    out, _ = decode_batch(vae, z[None].astype(mu.dtype, copy=False),
                          v[None].astype(mu.dtype, copy=False))
    return FlatParams(out[0], manifest)


def simplex_grid(n: int, step: float) -> list[tuple[float, ...]]:
    """All weight vectors on the simplex whose entries are multiples of ``step``."""
    if not 0.0 < step <= 0.5:
        raise ValueError("grid_step must lie in (0, 0.5]")
    m = round(1.0 / step)
    if abs(m * step - 1.0) > 1e-9:
        raise ValueError("grid_step must divide 1")
    if n == 1:
        return [(1.0,)]
    out = []
    for bars in itertools.combinations(range(m + n - 1), n - 1):
        parts, prev = [], -1
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(m + n - 2 - prev)
        out.append(tuple(p / m for p in parts))
    return out


def select_fusion_weights(vae: VaeParams, entries: Sequence[tuple[FlatParams, TaskVector]],
                          eval_sets: Sequence[TaskDataset], base: BaseModel,
                          grid_step: float = 0.1, return_scores: bool = False):
    """Grid-search the simplex for the weights minimising mean validation loss.

    Exact ties go to the candidate closest to uniform weighting.
    """
    if not eval_sets:
        raise ValueError("select_fusion_weights needs evaluation sets")
    n = len(entries)
    uniform = np.full(n, 1.0 / n)
    best, best_key = None, None
    scores = []
    for cand in simplex_grid(n, grid_step):
        fused = icm_fuse(vae, entries, cand)
        model = apply_lora(base, unflatten(fused))
        loss = float(np.mean([task_loss(model, d) for d in eval_sets]))
        scores.append((cand, loss))
        key = (loss, float(np.sum((np.asarray(cand) - uniform) ** 2)))
        if best_key is None or key < best_key:
            best, best_key = cand, key
    weights = list(best)
    return (weights, scores) if return_scores else weights


# --------------------------------------------------------------------------
# baselines


def _stack(items) -> np.ndarray:
    if not items:
        raise ValueError("merge needs at least one input")
    arrs = [it.data for it in items]
    n = arrs[0].size
    if any(a.size != n for a in arrs):
        raise ValueError("inputs do not share a length")
    return np.stack(arrs)


def _canonical(items) -> list:
    """Input order used for reductions, so mergers are permutation invariant."""
    return sorted(items, key=lambda it: (getattr(it, "task_id", ""), it.data.tobytes()))


def soup_merge(adapters: Sequence[FlatParams]) -> FlatParams:
    """Uniform element-wise mean."""
    items = _canonical(adapters)
    x = _stack(items)
    manifest = items[0].manifest
    if any(a.manifest != manifest for a in items):
        raise ValueError("adapters do not share a manifest")
    return FlatParams(x.mean(axis=0), manifest)


def ta_merge(deltas: Sequence[ParamDelta], lambda_ta: float | None = None) -> ParamDelta:
    """Task arithmetic: ``lambda * sum_i delta_i`` (default lambda = 1/n)."""
    items = _canonical(deltas)
    x = _stack(items)
    lam = 1.0 / len(items) if lambda_ta is None else float(lambda_ta)
    return ParamDelta(lam * x.sum(axis=0), "ta")


def ties_merge(deltas: Sequence[ParamDelta], density: float = 0.2) -> ParamDelta:
    """Trim to the top-``ceil(density * D)`` magnitudes, elect per-coordinate
    signs from the trimmed sum (zero sum elects +), then average the trimmed
    values that agree with the elected sign."""
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    items = _canonical(deltas)
    x = _stack(items)
    n, D = x.shape
    k = math.ceil(density * D)
    trimmed = np.zeros_like(x)
    for i in range(n):
        # stable sort on -|x| keeps the earliest coordinates among equal magnitudes
        keep = np.argsort(-np.abs(x[i]), kind="stable")[:k]
        trimmed[i, keep] = x[i, keep]
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return ParamDelta(merged.astype(x.dtype, copy=False), "ties")


def dare(delta: ParamDelta, drop_p: float, rng: RngStream) -> ParamDelta:
    """Drop each coordinate with probability ``drop_p``; rescale survivors by 1/(1-p)."""
    if not 0.0 <= drop_p < 1.0:
        raise ValueError("drop_p must lie in [0, 1)")
    if drop_p == 0.0:
        return ParamDelta(delta.data.copy(), delta.task_id)
    keep = rng.random(delta.data.shape) >= drop_p
    return ParamDelta(np.where(keep, delta.data / (1.0 - drop_p), 0.0).astype(delta.data.dtype),
                      delta.task_id)


def dare_ties_merge(deltas: Sequence[ParamDelta], drop_p: float, density: float,
                    seed: int = 0) -> ParamDelta:
    """DARE each delta (stream keyed by its task_id), then TIES-merge."""
    sparse = [dare(d, drop_p, RngStream(seed, stream_id("dare", d.task_id))) for d in deltas]
    out = ties_merge(sparse, density)
    return ParamDelta(out.data, "dare_ties")


def regmean_merge(layer_weights: Sequence[Sequence[np.ndarray]],
                  grams: Sequence[Sequence[np.ndarray]], ridge: float = 1e-6) -> list[np.ndarray]:
    """Per layer ``W* = (sum_i G_i)^-1 sum_i G_i W_i``.

    ``layer_weights[i][j]`` is task ``i``'s layer-``j`` matrix in input x output
    orientation and ``grams[i][j]`` the matching input Gram matrix. A ridge of
    ``ridge * trace(G) / dim`` is added to the summed Gram before solving.
    """
    if not layer_weights:
        raise ValueError("regmean needs at least one task")
    n_layers = len(layer_weights[0])
    merged = []
    for j in range(n_layers):
        g_sum = sum(g[j] for g in grams)
        gw_sum = sum(g[j] @ w[j] for g, w in zip(grams, layer_weights))
        dim = g_sum.shape[0]
        eps = ridge * np.trace(g_sum) / dim
        a = g_sum + eps * np.eye(dim)
        try:
            merged.append(np.linalg.solve(a, gw_sum))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"layer {j}: Gram sum singular after ridge") from exc
    return merged


def _refactor(delta_w: np.ndarray, rank: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Truncated-SVD factors with ``(alpha / rank) * B @ A`` equal to the rank-r part."""
    u, s, vt = np.linalg.svd(delta_w, full_matrices=False)
    root = np.sqrt(s[:rank] * rank / alpha)
    return root[:, None] * vt[:rank], u[:, :rank] * root


def regmean_lora_merge(base: BaseModel, adapters: Sequence[FlatParams], probe_inputs: np.ndarray,
                       ridge: float = 1e-6) -> FlatParams:
    """RegMean on each composed update ``(alpha/r) B A``, refactored to rank r.

    Gram matrices come from each adapted model's layer inputs on the probe.
    """
    items = sorted(adapters, key=lambda a: a.data.tobytes())
    loras = [unflatten(a) for a in items]
    weights, grams = [], []
    for lora in loras:
        model = apply_lora(base, lora)
        inputs = model.layer_inputs(probe_inputs)
        weights.append([lora.delta(k).T for k in range(len(lora.layers))])
        grams.append([inputs[j].T @ inputs[j] for j in lora.layers])
    merged = regmean_merge(weights, grams, ridge)
    first = loras[0]
    A, B = [], []
    for w in merged:
        a, b = _refactor(w.T, first.rank, first.alpha)
        A.append(a.astype(first.A[0].dtype))
        B.append(b.astype(first.A[0].dtype))
    return flatten(LoraAdapter(first.layers, tuple(A), tuple(B), first.alpha))


def svd_latent_merge(flats: Sequence[FlatParams], rank_k: int = 1) -> FlatParams:
    """Stack flats as rows, keep the rank-k SVD reconstruction, average its rows."""
    items = _canonical(flats)
    x = _stack(items)
    if not 1 <= rank_k <= x.shape[0]:
        raise ValueError(f"rank_k must lie in [1, {x.shape[0]}]")
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    recon = (u[:, :rank_k] * s[:rank_k]) @ vt[:rank_k]
    return FlatParams(recon.mean(axis=0), items[0].manifest)


# --------------------------------------------------------------------------
# helpers used by the pipeline


def param_deltas(finals: Mapping[str, FlatParams], initial: FlatParams) -> list[ParamDelta]:
    return [ParamDelta(f.data - initial.data, tid) for tid, f in sorted(finals.items())]


def apply_delta(initial: FlatParams, delta: ParamDelta) -> FlatParams:
    return FlatParams(initial.data + delta.data, initial.manifest)


def merge_baseline(spec: MergeSpec, finals: Mapping[str, FlatParams], initial: FlatParams,
                   base: BaseModel | None = None, probe_inputs: np.ndarray | None = None) -> FlatParams:
    """Dispatch one training-free baseline over the per-task final adapters."""
    flats = [finals[k] for k in sorted(finals)]
    if spec.method == "soup":
        return soup_merge(flats)
    deltas = param_deltas(finals, initial)
    if spec.method == "ta":
        return apply_delta(initial, ta_merge(deltas, spec.lambda_ta))
    if spec.method == "ties":
        return apply_delta(initial, ties_merge(deltas, spec.density))
    if spec.method == "dare_ties":
        return apply_delta(initial, dare_ties_merge(deltas, spec.drop_p, spec.density, spec.seed))
    if spec.method == "regmean":
        if base is None or probe_inputs is None:
            raise ValueError("regmean needs the base model and probe inputs")
        return regmean_lora_merge(base, flats, probe_inputs)
    if spec.method == "svd_latent":
        return svd_latent_merge(flats, min(spec.svd_rank, len(flats)))
    raise ValueError(f"{spec.method!r} is not a training-free baseline")
