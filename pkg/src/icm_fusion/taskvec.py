"""Activation-space task vectors: the change in mean final-hidden activation
on a shared probe batch between a fine-tuned model and the base model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import stream_id
from .toybase import AdaptedModel, BaseModel, FlatParams, ModelConfig, sample_pretext

__all__ = [
    "ProbeBatch",
    "TaskVector",
    "make_probe",
    "probe_activations",
    "extract_task_vector",
    "param_delta_vector",
    "combine_task_vectors",
]


@dataclass(frozen=True, eq=False)
class ProbeBatch:
    inputs: np.ndarray
    seed: int

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("probe batch must be a non-empty (n_probe, input_dim) array")

    @property
    def n_probe(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True, eq=False)
class TaskVector:
    data: np.ndarray
    task_id: str

    def __post_init__(self):
        if self.data.ndim != 1:
            raise ValueError("task vector must be one-dimensional")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"task vector {self.task_id} is not finite")

    def __len__(self):
        return self.data.size


def make_probe(cfg: ModelConfig, seed: int, n_probe: int = 64) -> ProbeBatch:
    """One shared probe per experiment, drawn from the pretext distribution."""
    if n_probe < 1:
        raise ValueError("n_probe must be positive")
    return ProbeBatch(sample_pretext(cfg, seed, n_probe, stream_id("probe")), seed)


def probe_activations(model, probe: ProbeBatch) -> np.ndarray:
    """Mean over probe rows of the last hidden layer's post-activation output."""
    if probe.inputs.shape[0] == 0:
        raise ValueError("empty probe")
    return model.hidden(probe.inputs).mean(axis=0)


def _layer_shapes(model):
    base = model.base if isinstance(model, AdaptedModel) else model
    return [w.shape for w in base.weights]


def extract_task_vector(base: BaseModel, adapted, probe: ProbeBatch,
                        task_id: str = "") -> TaskVector:
    if _layer_shapes(base) != _layer_shapes(adapted):
        raise ValueError("base and adapted models do not share an architecture")
    delta = probe_activations(adapted, probe) - probe_activations(base, probe)
    return TaskVector(delta, task_id)


def param_delta_vector(final: FlatParams, initial: FlatParams, task_id: str = "") -> TaskVector:
    """Parameter-space alternative: fine-tuned adapter minus its initialisation."""
    if final.manifest != initial.manifest:
        raise ValueError("adapters do not share a manifest")
    return TaskVector(final.data - initial.data, task_id)


def combine_task_vectors(vectors: Sequence[TaskVector], weights: Sequence[float],
                         task_id: str = "fused") -> TaskVector:
    """Convex combination ``sum_i w_i v_i``."""
    if not vectors or len(vectors) != len(weights):
        raise ValueError("need one weight per task vector")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
    n = len(vectors[0])
    if any(len(v) != n for v in vectors):
        raise ValueError("task vectors differ in length")
    # accumulate in sorted task order so joint permutations give identical bits
    order = sorted(range(len(vectors)), key=lambda i: (vectors[i].task_id, float(w[i]),
                                                       vectors[i].data.tobytes()))
    out = np.zeros(n, dtype=vectors[0].data.dtype)
    for i in order:
        out = out + w[i] * vectors[i].data
    return TaskVector(out.astype(vectors[0].data.dtype, copy=False), task_id)
