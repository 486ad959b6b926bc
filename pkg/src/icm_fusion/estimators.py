"""scikit-learn style wrappers around the fine-tuning, fusion VAE and merging code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fusion import METHODS, MergeSpec, icm_fuse, merge_baseline
from .fvae import decode_batch, encode_batch, init_vae
from .metaloop import CombinedDataset, CombinedEntry, MetaConfig, fit_normalizer, train_meta
from .taskvec import TaskVector
from .toybase import (BaseModel, FlatParams, Manifest, ModelConfig, TaskDataset, apply_lora,
                      finetune_lora, pretrain, unflatten)

__all__ = ["LoraFinetuner", "FusionVAE", "BaselineMerger"]


class LoraFinetuner(RegressorMixin, BaseEstimator):
    """Fit a LoRA adapter on a frozen base network for one regression task.

    If ``base`` is None a base network is pretrained with the default model
    config and ``seed``.
    """

    def __init__(self, base: BaseModel | None = None, rank: int = 4, alpha: float | None = None,
                 epochs: int = 40, lr: float = 0.05, batch_size: int = 32, seed: int = 0):
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        base = self.base if self.base is not None else pretrain(ModelConfig(), self.seed)
        y = y.reshape(len(y), -1)
        if X.shape[1] != base.input_dim or y.shape[1] != base.output_dim:
            raise ValueError(f"expected X with {base.input_dim} and y with {base.output_dim} columns")
        data = TaskDataset(X, y, "train")
        self.base_ = base
        self.sequence_ = finetune_lora(base, data, self.epochs, self.lr, self.seed, rank=self.rank,
                                       alpha=self.alpha, batch_size=self.batch_size)
        self.adapter_ = self.sequence_.final
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "adapter_")
        X = check_array(X, dtype=np.float64)
        return apply_lora(self.base_, unflatten(self.adapter_)).forward(X)


def _plain_manifest(D: int) -> Manifest:
    # stand-in layout when no base network is attached
    return Manifest(((0, "A", (1, D)),), 1.0)


class FusionVAE(TransformerMixin, BaseEstimator):
    """Task-vector-conditioned VAE over flattened adapters.

    ``fit(X, y, cond=C)`` takes adapters as rows of ``X``, task labels ``y``
    and one task vector per row in ``C``. Inner adaptation needs ``base``,
    ``rank`` and a ``task_data`` mapping from label to
    :class:`~icm_fusion.toybase.TaskDataset`; without them set ``K=0``.
    """

    def __init__(self, latent_dim: int = 8, hidden=(128, 128), meta_iters: int = 2000,
                 batch_size: int = 4, gamma: float = 0.05, beta: float = 1e-2, K: int = 1,
                 lambda_kl: float = 0.005, inner_batch: int = 32, seed: int = 0,
                 base: BaseModel | None = None, rank: int | None = None, alpha: float | None = None,
                 task_data=None):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.meta_iters = meta_iters
        self.batch_size = batch_size
        self.gamma = gamma
        self.beta = beta
        self.K = K
        self.lambda_kl = lambda_kl
        self.inner_batch = inner_batch
        self.seed = seed
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.task_data = task_data

    def _manifest(self, D):
        if self.base is None:
            return _plain_manifest(D)
        if self.rank is None:
            raise ValueError("rank is required when a base network is given")
        m = Manifest.for_base(self.base, self.rank, self.alpha or 2.0 * self.rank)
        if m.size != D:
            raise ValueError(f"adapter width {D} does not match rank-{self.rank} layout ({m.size})")
        return m

    def fit(self, X, y, cond):
        X = check_array(X, dtype=np.float64)
        C = check_array(cond, dtype=np.float64)
        y = np.asarray(y).astype(str)
        if not len(X) == len(C) == len(y):
            raise ValueError("X, y and cond need the same number of rows")
        adapting = self.K > 0 and self.beta > 0
        if adapting and (self.base is None or self.task_data is None):
            raise ValueError("inner adaptation (K > 0, beta > 0) needs base and task_data")
        D = X.shape[1]
        manifest = self._manifest(D)
        entries = tuple(CombinedEntry(t, TaskVector(c, t), FlatParams(x, manifest), i)
                        for i, (x, c, t) in enumerate(zip(X, C, y)))
        dataset = CombinedDataset(entries)
        if adapting:
            task_data = self.task_data
        else:
            # any non-empty set works: it is sampled but never used for steps
            task_data = {t: TaskDataset(np.zeros((1, 1)), np.zeros((1, 1)), "unused")
                         for t in dataset.task_ids}
        cfg = MetaConfig(meta_iters=self.meta_iters, batch_size=self.batch_size, gamma=self.gamma,
                         beta=self.beta, K=self.K, lambda_kl=self.lambda_kl, seed=self.seed,
                         inner_batch=self.inner_batch)
        vae = init_vae(D, C.shape[1], self.latent_dim, tuple(self.hidden), seed=self.seed)
        vae = fit_normalizer(vae, dataset)
        self.params_, self.history_ = train_meta(dataset, task_data, cfg, vae, self.base)
        self.manifest_ = manifest
        self.n_features_in_ = D
        return self

    def transform(self, X, cond):
        """Posterior means."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        C = check_array(cond, dtype=np.float64)
        return encode_batch(self.params_, X, C)[0]

    def fit_transform(self, X, y, cond):
        return self.fit(X, y, cond).transform(X, cond)

    def inverse_transform(self, Z, cond):
        check_is_fitted(self, "params_")
        Z = check_array(Z, dtype=np.float64)
        C = check_array(cond, dtype=np.float64)
        return decode_batch(self.params_, Z, C)[0]

    def fuse(self, X, cond, weights):
        """Decode the weighted combination of posterior means and task vectors."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        C = check_array(cond, dtype=np.float64)
        entries = [(FlatParams(x, self.manifest_), TaskVector(c, f"task{i:04d}"))
                   for i, (x, c) in enumerate(zip(X, C))]
        return icm_fuse(self.params_, entries, weights).data


class BaselineMerger(BaseEstimator):
    """Training-free merge of per-task adapters (rows of ``X``) into ``merged_``.

    ``initial`` is the shared starting adapter that deltas are measured
    against; RegMean additionally needs ``base``, ``rank`` and ``probe_inputs``.
    """

    def __init__(self, method: str = "soup", lambda_ta: float | None = None, density: float = 0.2,
                 drop_p: float = 0.5, svd_rank: int = 1, seed: int = 0,
                 base: BaseModel | None = None, rank: int | None = None, alpha: float | None = None,
                 probe_inputs=None):
        self.method = method
        self.lambda_ta = lambda_ta
        self.density = density
        self.drop_p = drop_p
        self.svd_rank = svd_rank
        self.seed = seed
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.probe_inputs = probe_inputs

    def fit(self, X, y=None, initial=None):
        if self.method not in METHODS or self.method == "icm":
            raise ValueError(f"unsupported merge method {self.method!r}")
        X = check_array(X, dtype=np.float64)
        D = X.shape[1]
        if self.base is not None:
            manifest = Manifest.for_base(self.base, self.rank, self.alpha or 2.0 * self.rank)
        else:
            manifest = _plain_manifest(D)
        init = np.zeros(D) if initial is None else np.asarray(initial, dtype=np.float64)
        ids = [f"task{i:04d}" for i in range(len(X))] if y is None else [str(t) for t in y]
        finals = {t: FlatParams(x, manifest) for t, x in zip(ids, X)}
        spec = MergeSpec(self.method, self.lambda_ta, self.density, self.drop_p,
                         self.svd_rank, seed=self.seed)
        probe = None if self.probe_inputs is None else check_array(self.probe_inputs)
        self.merged_ = merge_baseline(spec, finals, FlatParams(init, manifest), self.base, probe).data
        self.n_features_in_ = D
        return self
