"""Two-stage training: Pioneer warm-up, then joint Successor/Coordinator
training, then the same joint updates at a decayed Successor/Coordinator rate.

Batch composition, the latent prior and dropout masks are all derived from
``(seed, global_step)``, so a run resumed from a checkpoint continues exactly
as the uninterrupted run would have.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import signal
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .errors import CheckpointError, StageError, TrainingDiverged, ValidationError
from .gmi import DEFAULT_THRESHOLDS, compute_gmi
from .losses import (METRICS_HEADER, LossReport, adversarial_loss, autoencoder_loss,
                     generator_loss,
                     identical_loss, pair_matched_loss)
from .networks import ModelBundle, NetworkConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "banis-checkpoint"
CHECKPOINT_VERSION = 1
PUBLISHED_STEPS = (17000, 13000, 10000)


@dataclass(frozen=True)
class TrainingSchedule:
    warmup_steps: int = 600
    joint_steps: int = 1200
    refine_steps: int = 600
    lr_G_A: float = 2e-5
    lr_G_B: float = 1e-5
    lr_D: float = 2e-5
    lr_S: float = 1e-4
    lr_C: float = 1e-4
    refine_decay: float = 0.5
    batch_size: int = 32
    seed: int = 0
    adam_betas: tuple = (0.5, 0.999)
    sgd_momentum: float = 0.0
    weight_adv: float = 1.0
    weight_id: float = 1.0
    weight_id_prior: float = 1.0
    weight_pm: float = 1.0
    baseline_steps: int = 300
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("warmup_steps", "joint_steps", "refine_steps", "baseline_steps",
                     "checkpoint_every"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(name, f"must be a non-negative integer, got {v}")
        for name in ("lr_G_A", "lr_G_B", "lr_D", "lr_S", "lr_C"):
            if not getattr(self, name) >= 0:
                raise ValidationError(name, f"must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.refine_decay <= 1.0:
            raise ValidationError("refine_decay", f"must lie in (0, 1], got {self.refine_decay}")
        if self.batch_size < 1:
            raise ValidationError("batch_size", f"must be >= 1, got {self.batch_size}")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.joint_steps + self.refine_steps

    def stage_at(self, step: int) -> str:
        if step < self.warmup_steps:
            return "warmup"
        if step < self.warmup_steps + self.joint_steps:
            return "joint"
        return "refine"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSchedule":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def config_hash(network: NetworkConfig, schedule: TrainingSchedule, domain_a: str = "membrane",
                model: str = "banis") -> str:
    payload = {"network": network.to_dict(), "schedule": schedule.to_dict(),
               "domain_a": domain_a, "model": model}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _step_seed(seed: int, step: int) -> int:
    digest = hashlib.sha256(f"step:{seed}:{step}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def params_of(*modules):
    return [p for m in modules for p in m.parameters()]


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


class Trainer:
    """Owns a ModelBundle and its optimisers.

    ``stage`` moves ``warmup -> joint -> refine``; ``begin_joint`` and
    ``apply_refinement`` are the only transitions.
    """

    def __init__(self, bundle: ModelBundle, schedule: TrainingSchedule, domain_a: str = "membrane",
                 model: str = "banis"):
        self.bundle = bundle
        self.schedule = schedule
        self.domain_a = domain_a
        self.model = model
        self.stage = "warmup"
        self.global_step = 0
        self.refined = False
        s = schedule
        b = bundle
        self.opt_D = torch.optim.Adam(
            [{"params": params_of(b.D_A)}, {"params": params_of(b.D_B)}],
            lr=s.lr_D, betas=s.adam_betas)
        self.opt_G = torch.optim.Adam(
            [{"params": params_of(b.G_A), "lr": s.lr_G_A},
             {"params": params_of(b.G_B), "lr": s.lr_G_B}],
            lr=s.lr_G_A, betas=s.adam_betas)
        successor_params = params_of(b.E_A, b.E_B, b.G_A, b.G_B)
        self.opt_S = torch.optim.SGD(successor_params, lr=s.lr_S, momentum=s.sgd_momentum)
        self.opt_C = torch.optim.SGD(successor_params, lr=s.lr_C, momentum=s.sgd_momentum)

    @property
    def lr_S(self) -> float:
        return self.opt_S.param_groups[0]["lr"]

    @property
    def lr_C(self) -> float:
        return self.opt_C.param_groups[0]["lr"]

    @property
    def config_hash(self) -> str:
        return config_hash(self.bundle.config, self.schedule, self.domain_a, self.model)

    def optimizers(self):
        return {"D": self.opt_D, "G": self.opt_G, "S": self.opt_S, "C": self.opt_C}

    def seed_step(self, step: Optional[int] = None) -> None:
        """Seed torch's global RNG (dropout) from (seed, step)."""
        torch.manual_seed(_step_seed(self.schedule.seed, self.global_step if step is None else step))

    # -- updates ---------------------------------------------------------

    def _zero_all(self):
        for opt in self.optimizers().values():
            opt.zero_grad(set_to_none=True)

    def _pioneer_update(self, a, b, z, report: LossReport):
        bd = self.bundle
        w = self.schedule.weight_adv
        with torch.no_grad():
            fake_a, fake_b = bd.G_A(z), bd.G_B(z)
        self._zero_all()
        d_obj_a, _ = adversarial_loss(bd.D_A(a), bd.D_A(fake_a))
        d_obj_b, _ = adversarial_loss(bd.D_B(b), bd.D_B(fake_b))
        (-(d_obj_a + d_obj_b) * w).backward()
        self.opt_D.step()

        self._zero_all()
        g_obj_a = generator_loss(bd.D_A(bd.G_A(z)))
        g_obj_b = generator_loss(bd.D_B(bd.G_B(z)))
        ((g_obj_a + g_obj_b) * w).backward()
        self.opt_G.step()
        self._zero_all()
        report.adv_A = float(d_obj_a.detach())
        report.adv_B = float(d_obj_b.detach())

    def _successor_update(self, a, b, z, report: LossReport):
        s = self.schedule
        bd = self.bundle
        self._zero_all()
        id_a, id_b = identical_loss(a, b, z, bd, prior_weight=s.weight_id_prior)
        ((id_a + id_b) * s.weight_id).backward()
        self.opt_S.step()

        self._zero_all()
        pm_a, pm_b = pair_matched_loss(a, b, bd)
        ((pm_a + pm_b) * s.weight_pm).backward()
        self.opt_C.step()
        self._zero_all()
        report.id_A, report.id_B = float(id_a.detach()), float(id_b.detach())
        report.pm_A, report.pm_B = float(pm_a.detach()), float(pm_b.detach())

    def _finish(self, report: LossReport, snapshot_dir=None) -> LossReport:
        report.lr_S, report.lr_C = self.lr_S, self.lr_C
        if not report.is_finite():
            path = None
            if snapshot_dir is not None:
                path = Path(snapshot_dir) / f"diverged_step{self.global_step:06d}.pt"
                save_checkpoint(self, path)
            raise TrainingDiverged(f"non-finite loss at step {self.global_step}: {report.values()}",
                                   path)
        self.global_step += 1
        return report

    def warmup_step(self, batch_a, batch_b, z_batch, snapshot_dir=None) -> LossReport:
        if self.stage != "warmup":
            raise StageError(f"warmup_step called in stage {self.stage!r}")
        self.bundle.train()
        report = LossReport(self.global_step, "warmup")
        self._pioneer_update(batch_a, batch_b, z_batch, report)
        return self._finish(report, snapshot_dir)

    def begin_joint(self) -> None:
        if self.stage != "warmup":
            raise StageError(f"cannot enter the joint stage from {self.stage!r}")
        self.stage = "joint"

    def joint_step(self, batch_a, batch_b, z_batch, snapshot_dir=None) -> LossReport:
        if self.stage not in ("joint", "refine"):
            raise StageError(f"joint_step needs a completed warm-up, stage is {self.stage!r}")
        self.bundle.train()
        report = LossReport(self.global_step, self.stage)
        self._pioneer_update(batch_a, batch_b, z_batch, report)
        self._successor_update(batch_a, batch_b, z_batch, report)
        return self._finish(report, snapshot_dir)

    def apply_refinement(self) -> "Trainer":
        """Multiply the Successor and Coordinator learning rates by ``refine_decay``."""
        if self.refined:
            raise StageError("refinement already applied")
        if self.stage != "joint":
            raise StageError(f"refinement needs a completed joint stage, stage is {self.stage!r}")
        d = self.schedule.refine_decay
        _set_lr(self.opt_S, self.lr_S * d)
        _set_lr(self.opt_C, self.lr_C * d)
        self.refined = True
        self.stage = "refine"
        return self

    def baseline_step(self, batch_a, batch_b, snapshot_dir=None) -> LossReport:
        """One auto-encoder baseline update on the reconstruction terms only."""
        self.bundle.train()
        report = LossReport(self.global_step, "baseline")
        self._zero_all()
        rec_a, rec_b = autoencoder_loss(batch_a, batch_b, self.bundle)
        (rec_a + rec_b).backward()
        self.opt_S.step()
        self._zero_all()
        report.id_A, report.id_B = float(rec_a.detach()), float(rec_b.detach())
        return self._finish(report, snapshot_dir)

    # -- state -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model": self.model,
            "config_hash": self.config_hash,
            "network": self.bundle.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "domain_a": self.domain_a,
            "nets": {name: getattr(self.bundle, name).state_dict() for name in ModelBundle.NAMES},
            "optim": {k: opt.state_dict() for k, opt in self.optimizers().items()},
            "stage": self.stage,
            "global_step": self.global_step,
            "refined": self.refined,
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("config_hash") != self.config_hash:
            raise CheckpointError(
                f"checkpoint config hash {str(state.get('config_hash'))[:12]} does not match the "
                f"current configuration {self.config_hash[:12]}; refusing to resume a different run")
        for name in ModelBundle.NAMES:
            getattr(self.bundle, name).load_state_dict(state["nets"][name])
        for k, opt in self.optimizers().items():
            opt.load_state_dict(state["optim"][k])
        self.stage = state["stage"]
        self.global_step = state["global_step"]
        self.refined = state["refined"]


def save_checkpoint(trainer: Trainer, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(trainer.state_dict(), tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from None
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint written by this package")
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def load_checkpoint(path, schedule: Optional[TrainingSchedule] = None,
                    network: Optional[NetworkConfig] = None) -> Trainer:
    """Rebuild a Trainer from a checkpoint.

    When ``schedule``/``network`` are given they must reproduce the recorded
    config hash; otherwise the recorded configuration is used.
    """
    state = read_checkpoint(path)
    net = network or NetworkConfig(**state["network"])
    sched = schedule or TrainingSchedule.from_dict(state["schedule"])
    bundle = ModelBundle.build(net, seed=sched.seed)
    trainer = Trainer(bundle, sched, state["domain_a"], state.get("model", "banis"))
    trainer.load_state_dict(state)
    return trainer


# -- data plumbing -------------------------------------------------------


@dataclass
class Dataset:
    train_a: torch.Tensor
    train_b: torch.Tensor
    test_pairs: list = field(default_factory=list)
    domain_a: str = "membrane"

    @classmethod
    def from_pairs(cls, train_pairs, test_pairs, domain_a: str = "membrane") -> "Dataset":
        if domain_a not in ("membrane", "nuclei"):
            raise ValidationError("domain_a", f"must be 'membrane' or 'nuclei', got {domain_a!r}")
        if not train_pairs:
            raise ValidationError("dataset", "no training pairs")
        domain_b = "nuclei" if domain_a == "membrane" else "membrane"
        a = np.stack([getattr(p, domain_a) for p in train_pairs])[:, None].astype(np.float32)
        b = np.stack([getattr(p, domain_b) for p in train_pairs])[:, None].astype(np.float32)
        return cls(torch.from_numpy(a), torch.from_numpy(b), list(test_pairs), domain_a)

    def __len__(self):
        return self.train_a.shape[0]


def sample_batch(dataset: Dataset, schedule: TrainingSchedule, step: int, latent_dim: int):
    """Batch indices and prior samples as a pure function of (seed, step)."""
    rng = np.random.default_rng([schedule.seed, step])
    n = len(dataset)
    size = min(schedule.batch_size, n)
    idx = np.sort(rng.choice(n, size=size, replace=False))
    z = rng.uniform(-1.0, 1.0, size=(size, latent_dim)).astype(np.float32)
    dtype = dataset.train_a.dtype
    return dataset.train_a[idx], dataset.train_b[idx], torch.from_numpy(z).to(dtype)


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        new = not (append and self.path.exists())
        self._fh = open(self.path, "w" if new else "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(METRICS_HEADER)

    def write(self, report: LossReport):
        self._w.writerow(report.to_row())

    def event(self, step: int, stage: str, lr_S: float, lr_C: float):
        self._w.writerow([str(step), stage, "", "", "", "", "", "", repr(lr_S), repr(lr_C)])

    def close(self):
        self._fh.close()


def read_metrics(path) -> List[dict]:
    """Rows of a metrics CSV with empty cells as None and numbers as float."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValidationError("metrics", f"{path}:1: unexpected header {header}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(METRICS_HEADER):
                raise ValidationError("metrics", f"{path}:{lineno}: expected "
                                      f"{len(METRICS_HEADER)} fields, got {len(row)}")
            try:
                rec = {"step": int(row[0]), "stage": row[1]}
                for k, v in zip(METRICS_HEADER[2:], row[2:]):
                    rec[k] = float(v) if v != "" else None
            except ValueError as exc:
                raise ValidationError("metrics", f"{path}:{lineno}: {exc}") from None
            rows.append(rec)
    return rows


class _InterruptFlag:
    """Turns SIGINT into a flag checked between steps (main thread only)."""

    def __init__(self):
        self.raised = False
        self._old = None

    def __enter__(self):
        if threading.current_thread() is threading.main_thread():
            self._old = signal.signal(signal.SIGINT, self._handle)
        return self

    def _handle(self, signum, frame):
        self.raised = True

    def __exit__(self, *exc):
        if self._old is not None:
            signal.signal(signal.SIGINT, self._old)
        return False


def _write_gmi_snapshot(path, step, stage, report):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step", "stage", "TS", "matched_fraction"])
        for t in report.thresholds:
            w.writerow([step, stage, repr(t), repr(report.matched_fraction[t])])


def _truncate_csv(path: Path, keep) -> None:
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = rows[:1] + [r for r in rows[1:] if r and keep(int(r[0]))]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)


@dataclass
class TrainResult:
    trainer: Trainer
    checkpoint: Path
    metrics: Path
    elapsed: float


def train(dataset: Dataset, schedule: TrainingSchedule, out_dir, network: NetworkConfig = NetworkConfig(),
          resume=None, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, gmi_snapshots: bool = True,
          progress_every: int = 100) -> TrainResult:
    """Run warm-up, joint and refinement stages, writing checkpoints and metrics.

    Files in ``out_dir``: ``metrics.csv``, ``initial.pt``, ``warmup_end.pt``,
    ``joint_end.pt``, ``final.pt``, optional ``step_NNNNNN.pt`` every
    ``checkpoint_every`` steps and ``gmi_snapshots.csv`` at stage boundaries.
    """
    if len(dataset) == 0:
        raise ValidationError("dataset", "no training pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = load_checkpoint(resume, schedule, network)
        if trainer.domain_a != dataset.domain_a:
            raise CheckpointError("checkpoint domain assignment differs from the dataset's")
    else:
        trainer = Trainer(ModelBundle.build(network, seed=schedule.seed), schedule, dataset.domain_a)
    snap_path = out / "gmi_snapshots.csv"
    if resume is not None:
        # drop rows written after the checkpoint so a resumed log has no duplicates
        _truncate_csv(out / "metrics.csv", lambda step: step < trainer.global_step)
        _truncate_csv(snap_path, lambda step: step <= trainer.global_step)
    metrics = MetricsWriter(out / "metrics.csv", append=resume is not None)
    s = schedule
    latent = network.latent_dim
    t0 = time.perf_counter()

    def boundary(name):
        path = save_checkpoint(trainer, out / f"{name}.pt")
        if gmi_snapshots and dataset.test_pairs:
            rep = compute_gmi(dataset.test_pairs, trainer.bundle, thresholds,
                              domain_a=dataset.domain_a)
            _write_gmi_snapshot(snap_path, trainer.global_step, name, rep)
        return path

    try:
        if resume is None:
            boundary("initial")
        with _InterruptFlag() as interrupt:
            while trainer.global_step < s.total_steps:
                step = trainer.global_step
                stage = s.stage_at(step)
                if stage != "warmup" and trainer.stage == "warmup":
                    trainer.begin_joint()
                if stage == "refine" and not trainer.refined:
                    trainer.apply_refinement()
                    metrics.event(step, "lr_decay", trainer.lr_S, trainer.lr_C)
                a, b, z = sample_batch(dataset, s, step, latent)
                trainer.seed_step(step)
                if stage == "warmup":
                    report = trainer.warmup_step(a, b, z, snapshot_dir=out)
                else:
                    report = trainer.joint_step(a, b, z, snapshot_dir=out)
                metrics.write(report)
                done = trainer.global_step
                if progress_every and done % progress_every == 0:
                    log.info("step %d/%d %s %.1fs", done, s.total_steps, stage,
                             time.perf_counter() - t0)
                if done == s.warmup_steps and s.warmup_steps:
                    boundary("warmup_end")
                if done == s.warmup_steps + s.joint_steps and s.joint_steps:
                    boundary("joint_end")
                if s.checkpoint_every and done % s.checkpoint_every == 0:
                    save_checkpoint(trainer, out / f"step_{done:06d}.pt")
                if interrupt.raised:
                    save_checkpoint(trainer, out / "interrupted.pt")
                    raise KeyboardInterrupt(f"interrupted at step {done}; state saved")
        final = boundary("final")
    finally:
        metrics.close()
    return TrainResult(trainer, final, out / "metrics.csv", time.perf_counter() - t0)


def train_autoencoder_baseline(dataset: Dataset, schedule: TrainingSchedule, out_dir,
                               network: NetworkConfig = NetworkConfig(),
                               thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> TrainResult:
    """Train E_A+G_A and E_B+G_B as cross-domain auto-encoders.

    Runs ``schedule.baseline_steps`` SGD steps at ``lr_S`` on
    ``mse(S_A(b), a) + mse(S_B(a), b)``; discriminators stay untrained.
    """
    if len(dataset) == 0:
        raise ValidationError("dataset", "no training pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(ModelBundle.build(network, seed=schedule.seed), schedule, dataset.domain_a,
                      model="autoencoder")
    trainer.stage = "baseline"
    metrics = MetricsWriter(out / "metrics.csv")
    t0 = time.perf_counter()
    try:
        for step in range(schedule.baseline_steps):
            a, b, _ = sample_batch(dataset, schedule, step, network.latent_dim)
            trainer.seed_step(step)
            metrics.write(trainer.baseline_step(a, b, snapshot_dir=out))
        final = save_checkpoint(trainer, out / "final.pt")
        if dataset.test_pairs:
            rep = compute_gmi(dataset.test_pairs, trainer.bundle, thresholds, domain_a=dataset.domain_a)
            _write_gmi_snapshot(out / "gmi_snapshots.csv", trainer.global_step, "final", rep)
    finally:
        metrics.close()
    return TrainResult(trainer, final, out / "metrics.csv", time.perf_counter() - t0)
