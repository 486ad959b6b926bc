import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from icm_fusion.estimators import BaselineMerger, FusionVAE, LoraFinetuner
from icm_fusion.fusion import soup_merge, ties_merge
from icm_fusion.toybase import apply_lora, finetune_lora, make_dataset, task_loss, unflatten


def test_finetuner_matches_function_api(base, suite):
    data = make_dataset(suite[0], "train")
    est = LoraFinetuner(base=base, rank=4, epochs=10, lr=0.05, seed=0).fit(data.inputs, data.targets)
    ref = finetune_lora(base, data, 10, 0.05, 0, rank=4)
    assert est.adapter_.data.tobytes() == ref.final.data.tobytes()
    test = make_dataset(suite[0], "test")
    pred = est.predict(test.inputs)
    assert pred.shape == test.targets.shape
    expected = apply_lora(base, unflatten(ref.final)).forward(test.inputs)
    assert np.array_equal(pred, expected)
    assert task_loss(apply_lora(base, unflatten(est.adapter_)), test) < task_loss(base, test)


def test_finetuner_params_and_errors(base):
    est = LoraFinetuner(base=base, rank=2, lr=0.1)
    assert est.get_params()["rank"] == 2 and clone(est).lr == 0.1
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 16)))
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 3)), np.zeros((4, 16)))


def _toy_adapters(rng, n_tasks=3, per=6, D=10, c=4):
    X, y, C = [], [], []
    for t in range(n_tasks):
        centre, tv = rng.normal(size=D), rng.normal(size=c)
        for _ in range(per):
            X.append(centre + 0.05 * rng.normal(size=D))
            C.append(tv)
            y.append(f"t{t}")
    return np.array(X), np.array(y), np.array(C)


def test_fusion_vae_plain(rng):
    X, y, C = _toy_adapters(rng)
    est = FusionVAE(latent_dim=2, hidden=(16,), meta_iters=30, batch_size=2, K=0, seed=1)
    Z = est.fit_transform(X, y, C)
    assert Z.shape == (len(X), 2)
    assert est.inverse_transform(Z, C).shape == X.shape
    fused = est.fuse(X[[0, 6]], C[[0, 6]], [0.5, 0.5])
    assert fused.shape == (X.shape[1],) and np.all(np.isfinite(fused))
    again = clone(est).fit(X, y, C)
    assert np.array_equal(again.transform(X, C), Z)
    assert len(est.history_) == 30


def test_fusion_vae_validation(rng):
    X, y, C = _toy_adapters(rng)
    with pytest.raises(ValueError):
        FusionVAE(K=1, meta_iters=1).fit(X, y, C)
    with pytest.raises(ValueError):
        FusionVAE(K=0, meta_iters=1).fit(X, y[:3], C)
    with pytest.raises(NotFittedError):
        FusionVAE().transform(X, C)


def test_fusion_vae_with_base(base, sequences, task_vectors, suite):
    X = np.array([f.data for s in sequences for _, f in s.entries])
    y = np.array([s.task_id for s in sequences for _ in s.entries])
    C = np.array([task_vectors[t].data for t in y])
    data = {t.task_id: make_dataset(t, "train") for t in suite}
    est = FusionVAE(latent_dim=4, hidden=(32,), meta_iters=5, batch_size=2, base=base, rank=4,
                    task_data=data).fit(X, y, C)
    assert est.manifest_.size == X.shape[1]
    with pytest.raises(ValueError):
        FusionVAE(base=base, rank=2, K=0, meta_iters=1).fit(X, y, C)


def test_baseline_merger(rng, sequences, base, probe):
    X = rng.normal(size=(3, 6))
    assert np.array_equal(BaselineMerger("soup").fit(X).merged_, soup_merge(
        [_f(x) for x in X]).data)
    from icm_fusion.fusion import ParamDelta
    ties = BaselineMerger("ties", density=0.5).fit(X).merged_
    expect = ties_merge([ParamDelta(x, f"task{i:04d}") for i, x in enumerate(X)], 0.5).data
    assert np.array_equal(ties, expect)
    with pytest.raises(ValueError):
        BaselineMerger("icm").fit(X)
    finals = np.array([s.final.data for s in sequences])
    rm = BaselineMerger("regmean", base=base, rank=4, probe_inputs=probe.inputs)
    merged = rm.fit(finals, initial=sequences[0].initial.data).merged_
    assert merged.shape == (finals.shape[1],) and np.all(np.isfinite(merged))


def _f(x):
    from icm_fusion.toybase import FlatParams, Manifest
    return FlatParams(x, Manifest(((0, "A", (1, x.size)),), 1.0))
