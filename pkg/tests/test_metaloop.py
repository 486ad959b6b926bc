import dataclasses

import numpy as np
import pytest

from icm_fusion import metaloop
from icm_fusion.fvae import init_vae
from icm_fusion.metaloop import (MetaConfig, MetaDivergence, MetaHistory, MetaItem,
                                 build_combined_dataset, fit_normalizer, inner_adapt, meta_step,
                                 split_holdout, train_meta)
from icm_fusion.numerics import seeded_rng
from icm_fusion.taskvec import TaskVector, extract_task_vector, make_probe
from icm_fusion.toybase import (CheckpointSequence, FlatParams, ModelConfig, SuiteConfig,
                                apply_lora, finetune_lora, make_dataset, make_task_suite,
                                pretrain, task_loss, unflatten)

from conftest import meta_grad_case


@pytest.fixture(scope="module")
def small():
    """Three-task problem on an 8-wide base, rank 2 (D = 64)."""
    cfg = ModelConfig(input_dim=6, hidden_dim=8, output_dim=6, pretrain_samples=512, pretrain_maxiter=200)
    base = pretrain(cfg, 0)
    specs = make_task_suite(cfg, SuiteConfig(n_tasks=3, n_train=128, n_val=64, n_test=64), 0)
    seqs = [finetune_lora(base, t, 20, 0.05, 0, rank=2) for t in specs]
    probe = make_probe(cfg, 0, 16)
    tvs = {s.task_id: extract_task_vector(base, apply_lora(base, unflatten(s.final)), probe, s.task_id)
           for s in seqs}
    data = {t.task_id: make_dataset(t, "train") for t in specs}
    return base, seqs, tvs, data


def _batch(small, n=3):
    base, seqs, tvs, data = small
    return [MetaItem(s.task_id, tvs[s.task_id], s.final, data[s.task_id].subset(np.arange(16)), 0)
            for s in seqs[:n]]


def _vae(small, d=3):
    _, seqs, tvs, _ = small
    ds = build_combined_dataset(seqs, tvs)
    return fit_normalizer(init_vae(len(seqs[0].final), 8, d, (16, 16), seed=0), ds)


# ---------------------------------------------------------------- dataset


def test_combined_dataset_counts(small):
    _, seqs, tvs, _ = small
    ds = build_combined_dataset(seqs[:2], tvs)
    assert len(ds) == 20  # 2 tasks x ceil(20/2)
    for e in ds.by_task("t0"):
        assert e.vector.data.tobytes() == tvs["t0"].data.tobytes()


def test_combined_dataset_errors(small):
    _, seqs, tvs, _ = small
    empty = CheckpointSequence("t0", (), 10)
    with pytest.raises(ValueError):
        build_combined_dataset([empty], tvs)
    with pytest.raises(KeyError):
        build_combined_dataset(seqs, {"t0": tvs["t0"]})


def test_split_holdout(small):
    _, seqs, _, _ = small
    train, held = split_holdout(seqs, 0.1)
    assert [len(s) for s in train] == [9, 9, 9] and [len(s) for s in held] == [1, 1, 1]
    assert held[0].entries[0][0] == seqs[0].entries[-1][0]


def test_meta_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(K=-1)
    with pytest.raises(ValueError):
        MetaConfig(gamma=-1.0)


# ---------------------------------------------------------------- inner loop


def test_inner_adapt_degenerate(small):
    base, seqs, _, data = small
    theta = seqs[0].final
    for beta, K in ((0.0, 3), (0.1, 0)):
        out = inner_adapt(theta, data["t0"], beta, K, base)
        assert out.data.tobytes() == theta.data.tobytes()


def test_inner_adapt_quadratic(monkeypatch, small):
    base, seqs, _, data = small
    monkeypatch.setattr(metaloop, "flat_task_loss_grad",
                        lambda b, flat, d: (0.5 * float(flat.data @ flat.data), flat.data))
    theta = seqs[0].final
    out = inner_adapt(theta, data["t0"], 0.2, 1, base)
    np.testing.assert_allclose(out.data, 0.8 * theta.data, rtol=1e-15)


def test_inner_adapt_descends(base, suite, sequences):
    for spec, seq in zip(suite, sequences):
        data = make_dataset(spec, "train")
        start = seq.entries[0][1]
        out = inner_adapt(start, data, 1e-2, 3, base)
        assert task_loss(apply_lora(base, unflatten(out)), data) <= \
            task_loss(apply_lora(base, unflatten(start)), data)


def test_inner_adapt_nonfinite(monkeypatch, small):
    base, seqs, _, data = small
    monkeypatch.setattr(metaloop, "flat_task_loss_grad", lambda b, f, d: (float("nan"), f.data))
    with pytest.raises(FloatingPointError):
        inner_adapt(seqs[0].final, data["t0"], 0.1, 1, base)


# ---------------------------------------------------------------- meta step


def test_gamma_zero_is_noop(small):
    base = small[0]
    vae = _vae(small)
    cfg = MetaConfig(gamma=0.0)
    new, loss = meta_step(vae, _batch(small), cfg, seeded_rng(0, 1), base)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(new.arrays(), vae.arrays()))
    assert loss.recon >= 0 and loss.kl >= 0


def test_meta_step_updates(small):
    base = small[0]
    vae = _vae(small)
    new, _ = meta_step(vae, _batch(small), MetaConfig(), seeded_rng(0, 1), base)
    assert any(not np.array_equal(a, b) for a, b in zip(new.arrays(), vae.arrays()))


def test_meta_step_batch_order_invariant(small):
    base = small[0]
    vae = _vae(small)
    batch = _batch(small)
    a, la = meta_step(vae, batch, MetaConfig(), seeded_rng(3, 1), base)
    b, lb = meta_step(vae, batch[::-1], MetaConfig(), seeded_rng(3, 1), base)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    assert la.meta == lb.meta


def test_meta_step_rejects_empty(small):
    with pytest.raises(ValueError):
        meta_step(_vae(small), [], MetaConfig(), seeded_rng(0, 0), small[0])


def test_meta_step_divergence(small):
    base = small[0]
    vae = _vae(small)
    arrays = vae.arrays()
    arrays[0] = arrays[0].copy()
    arrays[0][0, 0] = np.nan
    bad = vae._rebuild(arrays)
    with pytest.raises(MetaDivergence) as info:
        meta_step(bad, _batch(small), MetaConfig(), seeded_rng(0, 0), base, iteration=7)
    assert info.value.iteration == 7


def test_meta_gradient_fd_d24():
    for seed in range(8):
        rep, D, d = meta_grad_case(seed, K=1)
        if D == 24 and d == 2:
            assert rep.passed, rep
            return
    pytest.fail("no D=24, d=2 instance drawn")


# ---------------------------------------------------------------- training


def test_train_zero_iters(small):
    base, seqs, tvs, data = small
    vae = _vae(small)
    out, hist = train_meta(build_combined_dataset(seqs, tvs), data, MetaConfig(meta_iters=0, batch_size=2),
                           vae, base)
    assert out is vae and len(hist) == 0


def test_train_deterministic_and_descends(small):
    base, seqs, tvs, data = small
    ds = build_combined_dataset(seqs, tvs)
    cfg = MetaConfig(meta_iters=600, batch_size=2, seed=4)
    a, ha = train_meta(ds, data, cfg, _vae(small), base)
    b, hb = train_meta(ds, data, cfg, _vae(small), base)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays(), b.arrays()))
    sm = ha.smoothed(100)
    assert len(ha) == 600
    assert sm[-1] <= sm[99]


def test_train_rejects_oversized_batch(small):
    base, seqs, tvs, data = small
    with pytest.raises(ValueError):
        train_meta(build_combined_dataset(seqs, tvs), data, MetaConfig(meta_iters=1, batch_size=5),
                   _vae(small), base)


def test_history_csv():
    h = MetaHistory()
    from icm_fusion.fvae import LossBreakdown
    h.append(LossBreakdown(0.5, 2.0, 0.01), 0.1)
    lines = h.to_csv().strip().splitlines()
    assert lines[0] == "iteration,recon,kl,meta"
    assert lines[1].split(",")[0] == "1" and float(lines[1].split(",")[3]) == 0.52


def test_normalizer_statistics(small):
    _, seqs, tvs, _ = small
    ds = build_combined_dataset(seqs, tvs)
    vae = _vae(small)
    flats, _ = ds.matrices()
    z = vae.normalize(flats)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.std(z) == pytest.approx(1.0)
