"""Staged experiment pipeline over one output directory.

Every stage reads its inputs from the directory, writes its artifacts, and
records them in ``manifest.json`` together with the config hash. A stage whose
artifacts already exist under the same hash is skipped unless forced.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from filelock import FileLock, Timeout

from .config import ExperimentConfig
from .container import load_container, save_container
from .evalmetrics import MergeReport, multitask_report
from .fusion import icm_fuse, merge_baseline, select_fusion_weights
from .fvae import VaeParams, encode_batch, init_vae
from .metaloop import (build_combined_dataset, fit_normalizer, reconstruction_mse,
                       split_holdout, train_meta)
from .numerics import resolve_dtype
from .taskvec import TaskVector, extract_task_vector, make_probe, param_delta_vector
from .toybase import (BaseModel, CheckpointSequence, FlatParams, Manifest, TaskSpec, apply_lora,
                      finetune_lora, make_dataset, make_task_suite, pretrain, unflatten)

__all__ = [
    "STAGES",
    "PipelineError",
    "MissingInput",
    "HashMismatch",
    "RunLocked",
    "RunManifest",
    "Run",
    "run_stage",
    "run_all",
]

STAGES = ("pretrain", "finetune", "taskvec", "train-vae", "fuse", "merge-baseline", "eval", "report")

ARTIFACTS = {
    "pretrain": ("base.icmf",),
    "finetune": ("finetune.icmf",),
    "taskvec": ("taskvec.icmf",),
    "train-vae": ("vae.icmf", "history.csv"),
    "fuse": ("fused.icmf",),
    "merge-baseline": ("baselines.icmf",),
    "eval": ("scores.csv",),
    "report": ("report.csv", "report.json", "latents.csv"),
}

REQUIRES = {
    "pretrain": (),
    "finetune": ("pretrain",),
    "taskvec": ("pretrain", "finetune"),
    "train-vae": ("pretrain", "finetune", "taskvec"),
    "fuse": ("pretrain", "finetune", "taskvec", "train-vae"),
    "merge-baseline": ("pretrain", "finetune"),
    "eval": ("pretrain", "finetune", "fuse", "merge-baseline"),
    "report": ("finetune", "taskvec", "train-vae", "fuse", "eval"),
}


class PipelineError(Exception):
    pass


class MissingInput(PipelineError):
    pass


class HashMismatch(PipelineError):
    pass


class RunLocked(PipelineError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    stages: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "stages": self.stages}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        doc = json.loads(text)
        return cls(doc["config_hash"], doc.get("stages", {}))

    def missing_files(self, root: str) -> list[str]:
        return [p for rec in self.stages.values() for p in rec["artifacts"]
                if not os.path.exists(os.path.join(root, p))]


class Run:
    """Bound view of an output directory for one configuration."""

    def __init__(self, cfg: ExperimentConfig, out_dir: str | None = None, force: bool = False,
                 log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.root = out_dir or cfg.output_dir
        self.force = force
        self.log = log or (lambda msg: None)
        self.dtype = resolve_dtype(cfg.precision)
        self.hash = cfg.config_hash()
        os.makedirs(self.root, exist_ok=True)
        self._lock = FileLock(self.path(".lock"), timeout=0)
        self.manifest = self._open_manifest()

    # ------------------------------------------------------------ bookkeeping

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def _open_manifest(self) -> RunManifest:
        p = self.path("manifest.json")
        if not os.path.exists(p):
            return RunManifest(self.hash)
        with open(p, encoding="utf-8") as fh:
            man = RunManifest.from_json(fh.read())
        if man.config_hash != self.hash:
            if not self.force:
                raise HashMismatch(f"{self.root} was produced by config {man.config_hash[:12]}, "
                                   f"current config is {self.hash[:12]} (use --force to restart)")
            man = RunManifest(self.hash)
        return man

    def _write_text(self, name: str, text: str):
        tmp = self.path(name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, self.path(name))

    def _save_manifest(self):
        self._write_text("manifest.json", self.manifest.to_json())

    def __enter__(self):
        try:
            self._lock.acquire()
        except Timeout as exc:
            raise RunLocked(f"{self.root} is locked by another process") from exc
        self._write_text("config.yaml", self.cfg.to_yaml())
        return self

    def __exit__(self, *exc):
        self._lock.release()

    def _load(self, name: str) -> dict[str, np.ndarray]:
        p = self.path(name)
        if not os.path.exists(p):
            raise MissingInput(f"missing input {p}")
        return load_container(p)

    def up_to_date(self, stage: str) -> bool:
        rec = self.manifest.stages.get(stage)
        return rec is not None and all(os.path.exists(self.path(a)) for a in rec["artifacts"])

    # ------------------------------------------------------------ experiment objects

    def tasks(self) -> list[TaskSpec]:
        return make_task_suite(self.cfg.model, self.cfg.suite, self.cfg.seed)

    def fused_tasks(self) -> list[TaskSpec]:
        """Tasks with training data; a 0% long-tail task has no adapter to fuse."""
        return [t for t in self.tasks() if t.n_train_used > 0]

    def dataset(self, spec: TaskSpec, split: str):
        return make_dataset(spec, split).astype(self.dtype)

    def base(self) -> BaseModel:
        sec = self._load("base.icmf")
        n = sum(1 for k in sec if k.startswith("W"))
        return BaseModel(tuple(sec[f"W{j}"] for j in range(n)), tuple(sec[f"b{j}"] for j in range(n)))

    def flat_manifest(self, base: BaseModel) -> Manifest:
        return Manifest.for_base(base, self.cfg.lora.rank, self.cfg.lora.effective_alpha)

    def sequences(self, base: BaseModel) -> list[CheckpointSequence]:
        sec = self._load("finetune.icmf")
        m = self.flat_manifest(base)
        window = -(-self.cfg.lora.epochs // 2)
        out = []
        for t in self.fused_tasks():
            tid = t.task_id
            epochs = sorted(int(k.rsplit("epoch", 1)[1]) for k in sec if k.startswith(f"{tid}/epoch"))
            entries = tuple((e, FlatParams(sec[f"{tid}/epoch{e:04d}"], m)) for e in epochs)
            out.append(CheckpointSequence(tid, entries, window, FlatParams(sec[f"{tid}/initial"], m),
                                          tuple(sec[f"{tid}/losses"].tolist())))
        return out

    def task_vectors(self) -> dict[str, TaskVector]:
        sec = self._load("taskvec.icmf")
        return {k[3:]: TaskVector(v, k[3:]) for k, v in sec.items() if k.startswith("tv/")}

    def vae(self) -> VaeParams:
        sec = self._load("vae.icmf")
        named = {k: v for k, v in sec.items() if k.startswith(("enc/", "dec/"))}
        shift = sec["norm/shift"]
        cond_dim = named["enc/0/W"].shape[1] - shift.size
        return VaeParams.from_named(named, self.cfg.vae.latent_dim, shift.size, cond_dim, shift,
                                    float(sec["norm/scale"][0]), float(sec["norm/cond_scale"][0]))

    def fused(self, base: BaseModel) -> tuple[FlatParams, np.ndarray]:
        sec = self._load("fused.icmf")
        return FlatParams(sec["icm"], self.flat_manifest(base)), sec["icm/weights"]

    def baselines(self, base: BaseModel) -> dict[str, FlatParams]:
        m = self.flat_manifest(base)
        return {k: FlatParams(v, m) for k, v in self._load("baselines.icmf").items()}


# ---------------------------------------------------------------- stages


def _pretrain(run: Run) -> dict:
    base = pretrain(run.cfg.model, run.cfg.seed).astype(run.dtype)
    sections = {}
    for j, (w, b) in enumerate(zip(base.weights, base.biases)):
        sections[f"W{j}"] = w
        sections[f"b{j}"] = b
    save_container(sections, run.path("base.icmf"))
    return {}


def _finetune(run: Run) -> dict:
    base = run.base()
    lc = run.cfg.lora
    sections, metrics = {}, {}
    for t in run.fused_tasks():
        seq = finetune_lora(base, t, lc.epochs, lc.lr, run.cfg.seed, rank=lc.rank,
                            alpha=lc.effective_alpha, batch_size=lc.batch_size)
        sections[f"{t.task_id}/initial"] = seq.initial.data
        for e, flat in seq.entries:
            sections[f"{t.task_id}/epoch{e:04d}"] = flat.data
        sections[f"{t.task_id}/losses"] = np.asarray(seq.losses, dtype=np.float64)
        metrics[f"{t.task_id}/final_train_loss"] = seq.losses[-1]
        run.log(f"  {t.task_id}: final train loss {seq.losses[-1]:.5f}")
    save_container(sections, run.path("finetune.icmf"))
    return metrics


def _taskvec(run: Run) -> dict:
    base = run.base()
    probe = make_probe(run.cfg.model, run.cfg.seed, run.cfg.taskvec.n_probe)
    sections = {"probe": probe.inputs.astype(run.dtype)}
    for seq in run.sequences(base):
        if run.cfg.taskvec.mode == "param_delta":
            v = param_delta_vector(seq.final, seq.initial, seq.task_id)
        else:
            adapted = apply_lora(base, unflatten(seq.final))
            v = extract_task_vector(base, adapted, replace(probe, inputs=sections["probe"]), seq.task_id)
        sections[f"tv/{seq.task_id}"] = v.data
    save_container(sections, run.path("taskvec.icmf"))
    return {}


def _train_vae(run: Run) -> dict:
    cfg = run.cfg
    base = run.base()
    seqs = run.sequences(base)
    tvs = run.task_vectors()
    train, held = split_holdout(seqs, cfg.meta.holdout_frac)
    ds = build_combined_dataset(train, tvs)
    data = {t.task_id: run.dataset(t, "train") for t in run.fused_tasks()}
    D = len(ds.entries[0].flat)
    cond_dim = len(ds.entries[0].vector)
    vae = init_vae(D, cond_dim, cfg.vae.latent_dim, cfg.vae.hidden, seed=cfg.seed, dtype=run.dtype)
    vae = fit_normalizer(vae, ds)

    def progress(it, loss):
        if it % 500 == 0:
            run.log(f"  meta iter {it}: recon {loss.recon:.5f} kl {loss.kl:.4f}")

    vae, history = train_meta(ds, data, cfg.meta, vae, base, progress)
    sections = dict(vae.named_arrays())
    sections["norm/shift"] = vae.shift
    sections["norm/scale"] = np.array([vae.scale])
    sections["norm/cond_scale"] = np.array([vae.cond_scale])
    save_container(sections, run.path("vae.icmf"))
    run._write_text("history.csv", history.to_csv())
    metrics = {}
    held_entries = build_combined_dataset([h for h in held if len(h)], tvs).entries
    if held_entries:
        mse, var = reconstruction_mse(vae, held_entries)
        metrics = {"heldout_mse": mse, "heldout_var": var, "heldout_ratio": mse / var}
        run.log(f"  held-out reconstruction MSE/Var = {mse / var:.5f}")
    return metrics


def _fuse(run: Run) -> dict:
    base = run.base()
    seqs = run.sequences(base)
    tvs = run.task_vectors()
    vae = run.vae()
    entries = [(s.final, tvs[s.task_id]) for s in seqs]
    val = [run.dataset(t, "val") for t in run.fused_tasks()]
    weights = select_fusion_weights(vae, entries, val, base, run.cfg.fusion.grid_step)
    fused = icm_fuse(vae, entries, weights)
    save_container({"icm": fused.data, "icm/weights": np.asarray(weights, dtype=np.float64)},
                   run.path("fused.icmf"))
    run.log(f"  fusion weights {dict(zip([s.task_id for s in seqs], weights))}")
    return {"weights": [float(w) for w in weights]}


def _merge_baseline(run: Run) -> dict:
    base = run.base()
    seqs = run.sequences(base)
    finals = {s.task_id: s.final for s in seqs}
    probe = make_probe(run.cfg.model, run.cfg.seed, run.cfg.taskvec.n_probe).inputs.astype(run.dtype)
    sections = {}
    for spec in run.cfg.fusion.baselines:
        sections[spec.method] = merge_baseline(spec, finals, seqs[0].initial, base, probe).data
    save_container(sections, run.path("baselines.icmf"))
    return {}


def _eval(run: Run) -> dict:
    base = run.base()
    seqs = run.sequences(base)
    fused, _ = run.fused(base)
    merged = {"icm": fused, **run.baselines(base)}
    tests = {t.task_id: run.dataset(t, "test") for t in run.tasks()}
    report = multitask_report(base, merged, {s.task_id: s.final for s in seqs}, tests)
    run._write_text("scores.csv", report.to_csv())
    return {f"{m}/{k}": v for (m, k), v in report.averages().items() if k == "loss"}


def _report(run: Run) -> dict:
    missing = run.manifest.missing_files(run.root)
    if missing:
        raise MissingInput(f"manifest references missing files: {missing}")
    with open(run.path("scores.csv"), encoding="utf-8") as fh:
        report = MergeReport.from_csv(fh.read())
    run._write_text("report.csv", report.to_csv())
    run._write_text("report.json", report.to_json())

    base = run.base()
    seqs = run.sequences(base)
    tvs = run.task_vectors()
    vae = run.vae()
    _, weights = run.fused(base)
    rows = []
    for s in seqs:
        flats = np.stack([f.data for _, f in s.entries])
        conds = np.repeat(tvs[s.task_id].data[None], len(s.entries), axis=0)
        mu = encode_batch(vae, flats, conds)[0]
        rows.extend((s.task_id, str(e), m) for (e, _), m in zip(s.entries, mu))
    finals = np.stack([s.final.data for s in seqs])
    conds = np.stack([tvs[s.task_id].data for s in seqs])
    mu = encode_batch(vae, finals, conds)[0]
    rows.append(("fused", "", np.asarray(weights) @ mu))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "epoch", *[f"z{i}" for i in range(vae.latent_dim)]])
    for tid, epoch, m in rows:
        w.writerow([tid, epoch, *[repr(float(x)) for x in m]])
    run._write_text("latents.csv", buf.getvalue())
    return {f"avg_loss/{m}": v for (m, k), v in report.averages().items() if k == "loss"}


_STAGE_FNS = {
    "pretrain": _pretrain,
    "finetune": _finetune,
    "taskvec": _taskvec,
    "train-vae": _train_vae,
    "fuse": _fuse,
    "merge-baseline": _merge_baseline,
    "eval": _eval,
    "report": _report,
}


def run_stage(run: Run, stage: str) -> bool:
    """Run one stage inside an entered ``Run``. Returns False when skipped."""
    if stage not in _STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}")
    if not run.force and run.up_to_date(stage):
        run.log(f"{stage}: up to date")
        return False
    for dep in REQUIRES[stage]:
        if not run.up_to_date(dep):
            raise MissingInput(f"stage {stage!r} needs {dep!r} to be run first")
    run.log(f"{stage}: running")
    t0 = time.perf_counter()
    metrics = _STAGE_FNS[stage](run)
    # anything downstream of a rewritten stage is stale
    stale = {stage}
    for later in STAGES[STAGES.index(stage) + 1:]:
        if stale.intersection(REQUIRES[later]):
            run.manifest.stages.pop(later, None)
            stale.add(later)
    run.manifest.stages[stage] = {
        "artifacts": list(ARTIFACTS[stage]),
        "seconds": time.perf_counter() - t0,
        "metrics": metrics,
    }
    run._save_manifest()
    return True


def run_all(cfg: ExperimentConfig, out_dir: str | None = None, force: bool = False,
            log: Callable[[str], None] | None = None) -> RunManifest:
    with Run(cfg, out_dir, force, log) as run:
        for stage in STAGES:
            run_stage(run, stage)
        return run.manifest
