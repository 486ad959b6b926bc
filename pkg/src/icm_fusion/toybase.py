"""Toy pre-trained base network, LoRA adapters and the synthetic task suite.

The base model is a small tanh MLP pre-trained to reconstruct its inputs.
Tasks are low-rank perturbations of that identity map (regression) or
cluster-labelling problems (classification); LoRA factors on the hidden
layers are fine-tuned per task with plain mini-batch gradient descent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .numerics import RngStream, check_finite, stream_id

__all__ = [
    "ModelConfig",
    "SuiteConfig",
    "BaseModel",
    "LoraAdapter",
    "Manifest",
    "FlatParams",
    "AdaptedModel",
    "TaskSpec",
    "TaskDataset",
    "CheckpointSequence",
    "TrainingDivergence",
    "pretext_mean",
    "sample_pretext",
    "pretrain",
    "pretext_loss",
    "make_task_suite",
    "make_dataset",
    "init_adapter",
    "zero_adapter",
    "apply_lora",
    "flatten",
    "unflatten",
    "task_loss",
    "task_loss_grad",
    "finetune_lora",
]


class TrainingDivergence(RuntimeError):
    """Raised when a training loop produces a non-finite or exploding loss."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 16
    hidden_dim: int = 32
    output_dim: int = 16
    n_hidden: int = 2
    pretext_mean_norm: float = 2.0
    pretext_scale: tuple[float, float] = (0.5, 1.5)
    pretrain_samples: int = 2048
    pretrain_maxiter: int = 500

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("model dims must be positive")
        if self.n_hidden < 1:
            raise ValueError("need at least one hidden layer (L >= 2)")


@dataclass(frozen=True)
class SuiteConfig:
    n_tasks: int = 4
    n_conflicting_pairs: int = 1
    input_scales: tuple[float, ...] = (1.0, 1.0, 0.5, 1.8)
    perturb_strength: float = 1.0
    label_noise: float = 0.05
    n_classification: int = 0
    n_classes: int = 4
    n_train: int = 512
    n_val: int = 2048
    n_test: int = 2048
    long_tail_fraction: float | None = None

    def __post_init__(self):
        if self.n_tasks < 2:
            raise ValueError("suite size must be >= 2")
        if 2 * self.n_conflicting_pairs + self.n_classification > self.n_tasks:
            raise ValueError("too many conflicting pairs / classification tasks for suite size")
        if not self.input_scales:
            raise ValueError("input_scales must be non-empty")
        if self.long_tail_fraction is not None and not 0.0 <= self.long_tail_fraction <= 1.0:
            raise ValueError("long_tail_fraction must lie in [0, 1]")


# --------------------------------------------------------------------------
# models and adapters


@dataclass(frozen=True, eq=False)
class BaseModel:
    """Frozen MLP; ``weights[j]`` maps layer ``j`` inputs to outputs (out x in)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) < 2 or len(self.weights) != len(self.biases):
            raise ValueError("BaseModel needs L >= 2 layers with matching biases")
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("adjacent layer dims do not compose")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights[-2].shape[0]

    @property
    def adapted_layers(self) -> tuple[int, ...]:
        return tuple(range(self.n_layers - 1))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def forward(self, x) -> np.ndarray:
        return _forward(self.weights, self.biases, x)[-1]

    def hidden(self, x) -> np.ndarray:
        return _forward(self.weights, self.biases, x)[-2]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (*self.weights, *self.biases):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "BaseModel":
        return BaseModel(
            tuple(w.astype(dtype) for w in self.weights),
            tuple(b.astype(dtype) for b in self.biases),
            self.activation,
        )


@dataclass(frozen=True)
class Manifest:
    """Layout of a flattened adapter: ``(layer_id, "A"|"B", dims)`` entries."""

    entries: tuple[tuple[int, str, tuple[int, int]], ...]
    alpha: float

    @property
    def size(self) -> int:
        return sum(d[0] * d[1] for _, _, d in self.entries)

    @property
    def rank(self) -> int:
        return self.entries[0][2][0]

    @classmethod
    def for_base(cls, base: BaseModel, rank: int, alpha: float) -> "Manifest":
        entries = []
        for j in base.adapted_layers:
            d_out, d_in = base.weights[j].shape
            entries.append((j, "A", (rank, d_in)))
            entries.append((j, "B", (d_out, rank)))
        return cls(tuple(entries), float(alpha))


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Per-layer factor pairs; the layer update is ``(alpha / rank) * B @ A``."""

    layers: tuple[int, ...]
    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    alpha: float

    def __post_init__(self):
        if not (len(self.layers) == len(self.A) == len(self.B)) or not self.layers:
            raise ValueError("adapter needs one (A, B) pair per adapted layer")
        r = self.A[0].shape[0]
        for a, b in zip(self.A, self.B):
            if a.shape[0] != r or b.shape[1] != r:
                raise ValueError("all factors must share one rank")
            if r > min(a.shape[1], b.shape[0]):
                raise ValueError(f"rank {r} exceeds layer dims {b.shape[0]}x{a.shape[1]}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def rank(self) -> int:
        return self.A[0].shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, k: int) -> np.ndarray:
        return self.scale * (self.B[k] @ self.A[k])


@dataclass(frozen=True, eq=False)
class FlatParams:
    data: np.ndarray
    manifest: Manifest

    def __post_init__(self):
        if self.data.ndim != 1 or self.data.size != self.manifest.size:
            raise ValueError(
                f"flat length {self.data.size} does not match manifest size {self.manifest.size}"
            )

    def __len__(self):
        return self.data.size

    def with_data(self, data) -> "FlatParams":
        return FlatParams(np.asarray(data), self.manifest)


def flatten(adapter: LoraAdapter) -> FlatParams:
    """Concatenate factors: layers ascending, A before B, row-major."""
    entries, parts = [], []
    for j, a, b in sorted(zip(adapter.layers, adapter.A, adapter.B), key=lambda t: t[0]):
        entries.append((j, "A", tuple(a.shape)))
        entries.append((j, "B", tuple(b.shape)))
        parts.extend((a.reshape(-1), b.reshape(-1)))
    return FlatParams(np.concatenate(parts), Manifest(tuple(entries), adapter.alpha))


def unflatten(flat: FlatParams) -> LoraAdapter:
    data = flat.data
    if data.size != flat.manifest.size:
        raise ValueError("flat length does not match manifest")
    layers, A, B = [], [], []
    pos = 0
    for layer, tag, dims in flat.manifest.entries:
        n = dims[0] * dims[1]
        block = data[pos:pos + n].reshape(dims).copy()
        pos += n
        if tag == "A":
            layers.append(layer)
            A.append(block)
        else:
            B.append(block)
    return LoraAdapter(tuple(layers), tuple(A), tuple(B), flat.manifest.alpha)


def zero_adapter(base: BaseModel, rank: int, alpha: float) -> LoraAdapter:
    m = Manifest.for_base(base, rank, alpha)
    return unflatten(FlatParams(np.zeros(m.size, dtype=base.dtype), m))


def init_adapter(base: BaseModel, rank: int, alpha: float, seed: int, std: float = 0.02) -> LoraAdapter:
    """A ~ N(0, std^2), B = 0, so the initial update is exactly zero.

    The stream is keyed by ``seed`` only: every task in an experiment starts
    from the same A factors.
    """
    rng = RngStream(seed, stream_id("lora-init", rank))
    layers, A, B = [], [], []
    for j in base.adapted_layers:
        d_out, d_in = base.weights[j].shape
        layers.append(j)
        A.append((std * rng.normal((rank, d_in))).astype(base.dtype))
        B.append(np.zeros((d_out, rank), dtype=base.dtype))
    return LoraAdapter(tuple(layers), tuple(A), tuple(B), float(alpha))


@dataclass(frozen=True, eq=False)
class AdaptedModel:
    base: BaseModel
    adapter: LoraAdapter

    def effective_weights(self) -> tuple[np.ndarray, ...]:
        ws = list(self.base.weights)
        for k, j in enumerate(self.adapter.layers):
            ws[j] = ws[j] + self.adapter.delta(k)
        return tuple(ws)

    def forward(self, x) -> np.ndarray:
        return _forward(self.effective_weights(), self.base.biases, x)[-1]

    def hidden(self, x) -> np.ndarray:
        return _forward(self.effective_weights(), self.base.biases, x)[-2]

    def layer_inputs(self, x) -> list[np.ndarray]:
        return _forward(self.effective_weights(), self.base.biases, x)[:-1]


def apply_lora(base: BaseModel, adapter: LoraAdapter) -> AdaptedModel:
    if adapter.layers and max(adapter.layers) >= base.n_layers:
        raise ValueError("adapter references a layer the base model does not have")
    for j, a, b in zip(adapter.layers, adapter.A, adapter.B):
        if (b.shape[0], a.shape[1]) != base.weights[j].shape:
            raise ValueError(
                f"adapter layer {j} shape {(b.shape[0], a.shape[1])} != base {base.weights[j].shape}"
            )
    return AdaptedModel(base, adapter)


def _forward(weights, biases, x) -> list[np.ndarray]:
    acts = [np.asarray(x)]
    h = acts[0]
    last = len(weights) - 1
    for j, (w, b) in enumerate(zip(weights, biases)):
        pre = h @ w.T + b
        h = np.tanh(pre) if j < last else pre
        acts.append(h)
    return acts


def _backward(weights, acts, d_out):
    """Gradients of a scalar wrt every layer's weight/bias given dL/d(output)."""
    n = len(weights)
    dW, db = [None] * n, [None] * n
    g = d_out
    for j in range(n - 1, -1, -1):
        if j < n - 1:
            g = g * (1.0 - acts[j + 1] ** 2)
        dW[j] = g.T @ acts[j]
        db[j] = g.sum(axis=0)
        if j > 0:
            g = g @ weights[j]
    return dW, db


# --------------------------------------------------------------------------
# pretext distribution and pretraining


def pretext_mean(input_dim: int, seed: int, norm: float) -> np.ndarray:
    v = RngStream(seed, stream_id("pretext-mean")).normal(input_dim)
    return norm * v / np.linalg.norm(v)


def sample_pretext(cfg: ModelConfig, seed: int, n: int, stream: int) -> np.ndarray:
    """Inputs ``mu0 + s * xi`` with a per-sample scale ``s`` from ``cfg.pretext_scale``."""
    rng = RngStream(seed, stream)
    mu0 = pretext_mean(cfg.input_dim, seed, cfg.pretext_mean_norm)
    lo, hi = cfg.pretext_scale
    s = rng.uniform(lo, hi, (n, 1))
    return mu0 + s * rng.normal((n, cfg.input_dim))


def _layer_dims(cfg: ModelConfig) -> list[tuple[int, int]]:
    dims = [cfg.input_dim] + [cfg.hidden_dim] * cfg.n_hidden + [cfg.output_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def pretrain(cfg: ModelConfig, seed: int) -> BaseModel:
    """Fit the base network to reconstruct pretext inputs (L-BFGS, full batch)."""
    if cfg.input_dim != cfg.output_dim:
        raise ValueError("the reconstruction pretext needs output_dim == input_dim")
    shapes = _layer_dims(cfg)
    rng = RngStream(seed, stream_id("pretrain-init"))
    ws = [rng.normal(s) / math.sqrt(s[1]) for s in shapes]
    bs = [np.zeros(s[0]) for s in shapes]
    x = sample_pretext(cfg, seed, cfg.pretrain_samples, stream_id("pretrain-data"))

    sizes = [w.size for w in ws] + [b.size for b in bs]
    split = np.cumsum(sizes)[:-1]

    def unpack(vec):
        parts = np.split(vec, split)
        n = len(shapes)
        return ([p.reshape(s) for p, s in zip(parts[:n], shapes)],
                [p for p in parts[n:]])

    def objective(vec):
        w, b = unpack(vec)
        acts = _forward(w, b, x)
        resid = acts[-1] - x
        loss = float(np.mean(resid ** 2))
        dW, db = _backward(w, acts, 2.0 * resid / resid.size)
        return loss, np.concatenate([g.reshape(-1) for g in dW + db])

    vec0 = np.concatenate([a.reshape(-1) for a in ws + bs])
    res = minimize(objective, vec0, jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.pretrain_maxiter, "ftol": 1e-12, "gtol": 1e-9})
    if not np.isfinite(res.fun):
        raise TrainingDivergence(f"pretraining produced a non-finite loss: {res.message}")
    w, b = unpack(res.x)
    return BaseModel(tuple(w), tuple(b))


def pretext_loss(model, cfg: ModelConfig, seed: int, n: int = 1024) -> float:
    x = sample_pretext(cfg, seed, n, stream_id("pretext-eval"))
    return float(np.mean((model.forward(x) - x) ** 2))


# --------------------------------------------------------------------------
# task suite


@dataclass(frozen=True, eq=False)
class TaskSpec:
    task_id: str
    kind: str
    seed: int
    transform_seed: int
    input_mean: np.ndarray
    input_scale: float = 1.0
    sign: float = 1.0
    strength: float = 1.0
    label_noise: float = 0.05
    n_classes: int = 0
    n_train: int = 512
    n_val: int = 2048
    n_test: int = 2048
    data_fraction: float = 1.0
    output_dim: int = 16

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 0.0 <= self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in [0, 1]")
        if self.kind == "classification" and not 2 <= self.n_classes <= self.output_dim:
            raise ValueError("classification needs 2 <= n_classes <= output_dim")

    @property
    def input_dim(self) -> int:
        return self.input_mean.size

    @property
    def n_train_used(self) -> int:
        return int(round(self.data_fraction * self.n_train))


@dataclass(frozen=True, eq=False)
class TaskDataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str
    kind: str = "regression"
    n_classes: int = 0

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets row counts differ")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "TaskDataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])

    def astype(self, dtype) -> "TaskDataset":
        t = self.targets if self.kind == "classification" else self.targets.astype(dtype)
        return replace(self, inputs=self.inputs.astype(dtype), targets=t)


def make_task_suite(model_cfg: ModelConfig, suite_cfg: SuiteConfig, seed: int) -> list[TaskSpec]:
    """Build the synthetic suite.

    Task ``t1`` of each conflicting pair uses its partner's perturbation with
    the opposite sign, so their optimal adapter updates point in opposite
    directions. With ``long_tail_fraction`` set, a long-tail task ``lt0`` whose
    train split is that fraction of the full size is appended.
    """
    mu0 = pretext_mean(model_cfg.input_dim, seed, model_cfg.pretext_mean_norm)
    scales = suite_cfg.input_scales
    specs: list[TaskSpec] = []
    common = dict(
        seed=seed, input_mean=mu0, strength=suite_cfg.perturb_strength,
        label_noise=suite_cfg.label_noise, n_train=suite_cfg.n_train,
        n_val=suite_cfg.n_val, n_test=suite_cfg.n_test, output_dim=model_cfg.output_dim,
    )
    n_reg = suite_cfg.n_tasks - suite_cfg.n_classification
    for i in range(suite_cfg.n_tasks):
        task_id = f"t{i}"
        scale = float(scales[i % len(scales)])
        if i < n_reg:
            pair = i // 2
            if pair < suite_cfg.n_conflicting_pairs:
                tseed = stream_id(seed, "transform", f"pair{pair}")
                sign = 1.0 if i % 2 == 0 else -1.0
            else:
                tseed = stream_id(seed, "transform", task_id)
                sign = 1.0
            specs.append(TaskSpec(task_id, "regression", transform_seed=tseed,
                                  input_scale=scale, sign=sign, **common))
        else:
            specs.append(TaskSpec(task_id, "classification",
                                  transform_seed=stream_id(seed, "transform", task_id),
                                  input_scale=scale, n_classes=suite_cfg.n_classes, **common))
    if suite_cfg.long_tail_fraction is not None:
        specs.append(TaskSpec("lt0", "regression",
                              transform_seed=stream_id(seed, "transform", "lt0"),
                              input_scale=1.0, data_fraction=suite_cfg.long_tail_fraction,
                              **common))
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids in suite")
    return specs


def _regression_map(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rank-one perturbation ``u w^T`` with ``w`` partly aligned to the input mean."""
    rng = RngStream(spec.transform_seed, stream_id("regression-map"))
    u = rng.normal(spec.output_dim)
    u /= np.linalg.norm(u)
    m_hat = spec.input_mean / np.linalg.norm(spec.input_mean)
    r = rng.normal(spec.input_dim)
    r -= (r @ m_hat) * m_hat
    r /= np.linalg.norm(r)
    w = 0.6 * m_hat + 0.8 * r
    return u, w


def _class_centers(spec: TaskSpec) -> np.ndarray:
    rng = RngStream(spec.transform_seed, stream_id("class-centers"))
    c = rng.normal((spec.n_classes, spec.input_dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return spec.input_mean + 1.5 * c


def make_dataset(spec: TaskSpec, split: str) -> TaskDataset:
    """Draw one split; splits use separate streams so they never share samples.

    The train split is a prefix of the full-size draw, so smaller
    ``data_fraction`` values give nested subsets.
    """
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    if split not in sizes:
        raise ValueError(f"unknown split {split!r}")
    n_full = sizes[split]
    rng = RngStream(spec.seed, stream_id("data", spec.task_id, split))
    if spec.kind == "regression":
        x = spec.input_mean + spec.input_scale * rng.normal((n_full, spec.input_dim))
        u, w = _regression_map(spec)
        y = x[:, :spec.output_dim] + spec.sign * spec.strength * np.outer(x @ w, u)
        y = y + spec.label_noise * rng.normal(y.shape)
        targets = y
    else:
        centers = _class_centers(spec)
        labels = rng.integers(0, spec.n_classes, n_full)
        x = centers[labels] + 0.5 * spec.input_scale * rng.normal((n_full, spec.input_dim))
        flip = rng.random(n_full) < spec.label_noise
        noisy = rng.integers(0, spec.n_classes, n_full)
        targets = np.where(flip, noisy, labels).astype(np.int64)
    n = spec.n_train_used if split == "train" else n_full
    return TaskDataset(x[:n], targets[:n], split, spec.kind, spec.n_classes)


# --------------------------------------------------------------------------
# losses and fine-tuning


def _output_loss(out: np.ndarray, data: TaskDataset, need_grad: bool):
    if len(data) == 0:
        raise ValueError("task_loss on an empty dataset")
    if data.kind == "regression":
        resid = out - data.targets
        loss = float(np.mean(resid ** 2))
        return loss, (2.0 * resid / resid.size if need_grad else None)
    c = data.n_classes
    logits = out[:, :c]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(logp[idx, data.targets]))
    if not need_grad:
        return loss, None
    d = np.zeros_like(out)
    p = np.exp(logp)
    p[idx, data.targets] -= 1.0
    d[:, :c] = p / n
    return loss, d


def task_loss(model, data: TaskDataset) -> float:
    """MSE for regression tasks, mean cross-entropy over the first ``n_classes``
    outputs for classification tasks."""
    return _output_loss(model.forward(data.inputs), data, need_grad=False)[0]


def task_loss_grad(base: BaseModel, adapter: LoraAdapter, data: TaskDataset):
    """Loss and its gradient wrt every adapter factor, returned as (loss, dA, dB)."""
    model = apply_lora(base, adapter)
    weights = model.effective_weights()
    acts = _forward(weights, base.biases, data.inputs)
    loss, d_out = _output_loss(acts[-1], data, need_grad=True)
    dW, _ = _backward(weights, acts, d_out)
    s = adapter.scale
    dA = tuple(s * (b.T @ dW[j]) for j, b in zip(adapter.layers, adapter.B))
    dB = tuple(s * (dW[j] @ a.T) for j, a in zip(adapter.layers, adapter.A))
    return loss, dA, dB


def flat_task_loss_grad(base: BaseModel, flat: FlatParams, data: TaskDataset):
    """``task_loss_grad`` in flattened coordinates."""
    adapter = unflatten(flat)
    loss, dA, dB = task_loss_grad(base, adapter, data)
    g = flatten(LoraAdapter(adapter.layers, dA, dB, adapter.alpha)).data
    return loss, g


@dataclass(frozen=True, eq=False)
class CheckpointSequence:
    task_id: str
    entries: tuple[tuple[int, FlatParams], ...]
    retained_window: int
    initial: FlatParams | None = None
    losses: tuple[float, ...] = field(default=())

    def __post_init__(self):
        epochs = [e for e, _ in self.entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("checkpoint epochs must be strictly increasing")
        if self.entries:
            m = self.entries[0][1].manifest
            if any(f.manifest != m for _, f in self.entries):
                raise ValueError("checkpoints do not share one manifest")

    def __len__(self):
        return len(self.entries)

    @property
    def final(self) -> FlatParams:
        return self.entries[-1][1]


def finetune_lora(base: BaseModel, task: TaskSpec | TaskDataset, epochs: int = 40,
                  lr: float = 0.05, seed: int = 0, rank: int = 4, alpha: float | None = None,
                  batch_size: int = 32) -> CheckpointSequence:
    """Train only the LoRA factors with plain mini-batch gradient descent.

    Keeps one checkpoint per epoch for the final ``ceil(epochs / 2)`` epochs.
    ``alpha`` defaults to ``2 * rank``.
    """
    if alpha is None:
        alpha = 2.0 * rank
    if epochs < 1:
        raise ValueError("epochs must be >= 1 (an empty checkpoint window is not a sequence)")
    data = make_dataset(task, "train") if isinstance(task, TaskSpec) else task
    task_id = task.task_id if isinstance(task, TaskSpec) else data.split
    if len(data) == 0:
        raise ValueError(f"task {task_id} has an empty train split")
    data = data.astype(base.dtype)
    adapter = init_adapter(base, rank, alpha, seed)
    initial = flatten(adapter)
    flat = initial.data.copy()
    manifest = initial.manifest
    window = math.ceil(epochs / 2)
    rng = RngStream(seed, stream_id("finetune-order", task_id))
    n = len(data)
    kept, losses = [], []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = data.subset(order[start:start + batch_size])
            loss, g = flat_task_loss_grad(base, FlatParams(flat, manifest), batch)
            if not np.isfinite(loss) or loss > 1e6:
                raise TrainingDivergence(f"task {task_id}: loss {loss} at epoch {epoch}")
            flat = flat - lr * g
        losses.append(task_loss(apply_lora(base, unflatten(FlatParams(flat, manifest))), data))
        if epoch > epochs - window:
            kept.append((epoch, FlatParams(flat.copy(), manifest)))
    return CheckpointSequence(task_id, tuple(kept), window, initial, tuple(losses))
