import os

import numpy as np
import pytest

from icm_fusion.config import ExperimentConfig
from icm_fusion.pipeline import run_all
from icm_fusion.taskvec import extract_task_vector, make_probe
from icm_fusion.toybase import (ModelConfig, SuiteConfig, apply_lora, finetune_lora, make_dataset,
                                make_task_suite, pretrain, unflatten)

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

_RESULTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(label: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        print(line)
        request.config.stash[_RESULTS_KEY].append(line)
        assert passed, line

    return record


@pytest.fixture(scope="session")
def model_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def base(model_cfg):
    return pretrain(model_cfg, 0)


@pytest.fixture(scope="session")
def suite(model_cfg):
    return make_task_suite(model_cfg, SuiteConfig(), 0)


@pytest.fixture(scope="session")
def probe(model_cfg):
    return make_probe(model_cfg, 0)


@pytest.fixture(scope="session")
def sequences(base, suite):
    return [finetune_lora(base, t, 40, 0.05, 0, rank=4) for t in suite]


@pytest.fixture(scope="session")
def task_vectors(base, sequences, probe):
    return {s.task_id: extract_task_vector(base, apply_lora(base, unflatten(s.final)), probe, s.task_id)
            for s in sequences}


@pytest.fixture(scope="session")
def test_sets(suite):
    return {t.task_id: make_dataset(t, "test") for t in suite}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full default pipeline run shared by the CLI and acceptance tests."""
    out = str(tmp_path_factory.mktemp("run_default"))
    run_all(ExperimentConfig(), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def meta_grad_case(seed: int, K: int, h: float = 1e-5):
    """Analytic vs central-difference gradient of the summed meta loss on a
    small random instance (D <= 40, d <= 4). Returns (GradReport, D, d)."""
    from icm_fusion.fvae import init_vae
    from icm_fusion.metaloop import MetaItem, meta_gradients, meta_objective
    from icm_fusion.numerics import finite_diff_grad, grad_check
    from icm_fusion.taskvec import TaskVector
    from icm_fusion.toybase import FlatParams, Manifest, TaskDataset

    r = np.random.default_rng(seed)
    cfg = ModelConfig(input_dim=3, hidden_dim=3, output_dim=3, pretrain_samples=128, pretrain_maxiter=30)
    model = pretrain(cfg, seed)
    rank = int(r.integers(1, 3))
    manifest = Manifest.for_base(model, rank, 2.0 * rank)
    D, d, c = manifest.size, int(r.integers(1, 5)), 3
    vae = init_vae(D, c, d, hidden=(6, 5), seed=seed)
    vae = vae.with_normalizer(0.1 * r.normal(size=D), 0.7, 1.3)
    items = []
    for i in range(int(r.integers(1, 4))):
        x = r.normal(size=(8, 3))
        data = TaskDataset(x, x + 0.3 * r.normal(size=(8, 3)), "train")
        items.append(MetaItem(f"t{i}", TaskVector(r.normal(size=c), f"t{i}"),
                              FlatParams(0.3 * r.normal(size=D), manifest), data, i))
    eps = r.normal(size=(len(items), d))
    lam = 0.005 + 0.5 * r.random()
    _, grads, adapted = meta_gradients(vae, items, lam, eps, None, model, beta=0.05, K=K)
    f = lambda p: meta_objective(vae.from_vector(p), items, lam, eps, adapted).meta
    numeric = finite_diff_grad(f, vae.ravel(), h)
    return grad_check(grads.ravel(), numeric, 1e-4), D, d
