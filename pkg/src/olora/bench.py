"""Sequential-task benchmark: synthetic tasks, per-method training stages, forgetting.

Every task draws token sequences from its own Gaussian cluster: a task mean,
label-relevant variation inside a task-specific low-dimensional subspace, and a
little isotropic noise.  A frozen random teacher maps each sequence to
regression targets.  Tasks are recognisable from their inputs alone, so the
model never receives a task index.
"""

from __future__ import annotations

import hashlib
import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from olora import tensor as T
from olora.adapters import freeze_and_extend, init_adalora, init_lora, merge_stack
from olora.config import ADAPTER_METHODS, METHODS, RunConfig, TaskSuiteConfig, warn_unused
from olora.errors import ConfigError, ProtocolError
from olora.model import BlockConfig, ToyModel, forward, task_loss, trainable_param_count
from olora.optim import make_optimizer
from olora.rank_alloc import BudgetSchedule, ImportanceState, apply_budget, budget_at, update_importance
from olora.regularizers import combined_loss, total_orth_loss

log = logging.getLogger(__name__)

_TASK_STREAM = 7919
_MODEL_STREAM = 104729


# --------------------------------------------------------------------------- tasks


@dataclass(eq=False)
class SyntheticTask:
    index: int
    mean: np.ndarray
    basis: np.ndarray
    teacher_in: np.ndarray
    teacher_out: np.ndarray
    offset: np.ndarray
    subspace_std: float
    iso_std: float
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    @property
    def noise_std(self) -> float:
        """Largest per-direction standard deviation of a token around the mean."""
        return float(np.hypot(self.subspace_std, self.iso_std))

    def sample_inputs(self, rng: np.random.Generator, n: int, seq_len: int) -> np.ndarray:
        d, k = self.basis.shape
        z = rng.normal(0.0, self.subspace_std, (n, seq_len, k))
        return self.mean + z @ self.basis.T + rng.normal(0.0, self.iso_std, (n, seq_len, d))

    def teacher(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) @ self.basis / self.subspace_std
        feats = np.tanh(z @ self.teacher_in).mean(axis=1)
        return feats @ self.teacher_out - self.offset


def make_task(suite: TaskSuiteConfig, model_dim: int, output_dim: int, seed: int, n: int) -> SyntheticTask:
    """Task ``n`` of the suite; fully determined by ``(seed, n)``."""
    rng = np.random.default_rng([seed, _TASK_STREAM, n])
    d, k = model_dim, suite.subspace_dim
    direction = rng.normal(size=d)
    mean = suite.mean_norm * direction / np.linalg.norm(direction)
    basis, _ = np.linalg.qr(rng.normal(size=(d, k)))
    teacher_in = rng.normal(0.0, 1.5 / np.sqrt(k), (k, suite.teacher_hidden))
    raw_out = rng.normal(size=(suite.teacher_hidden, output_dim))
    task = SyntheticTask(n, mean, basis, teacher_in, raw_out, np.zeros(output_dim),
                         suite.subspace_std, suite.iso_std,
                         *(np.empty(0),) * 4)
    # centre and scale the teacher to unit variance per output
    probe = task.teacher(task.sample_inputs(rng, 4096, suite.seq_len))
    task.teacher_out = raw_out / probe.std(axis=0)
    task.offset = probe.mean(axis=0) / probe.std(axis=0)
    n_train = suite.n_train_first if n == 0 else suite.n_train
    task.train_x = task.sample_inputs(rng, n_train, suite.seq_len)
    task.train_y = task.teacher(task.train_x)
    task.eval_x = task.sample_inputs(rng, suite.n_eval, suite.seq_len)
    task.eval_y = task.teacher(task.eval_x)
    return task


def make_suite(cfg: RunConfig, seed: int) -> list[SyntheticTask]:
    tasks = [make_task(cfg.tasks, cfg.model.model_dim, cfg.model.output_dim, seed, n)
             for n in range(cfg.tasks.n_tasks)]
    for i, a in enumerate(tasks):
        for b in tasks[i + 1:]:
            gap = np.linalg.norm(a.mean - b.mean)
            if gap < 4 * max(a.noise_std, b.noise_std):
                raise ConfigError(f"tasks {a.index} and {b.index} are not separated (gap {gap:.3f})")
    return tasks


# --------------------------------------------------------------------------- results


@dataclass
class StageResult:
    stage: int
    method: str
    eval_losses: list[float]
    trainable_count: int
    trainable_fraction: float
    wall_clock: float
    trace: list[dict] = field(default_factory=list)
    orth_overlap: float = 0.0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""
    orthonormality_init: list[float] = field(default_factory=list)
    orthonormality_final: list[float] = field(default_factory=list)
    active_ranks: dict[str, int] = field(default_factory=dict)


@dataclass
class ForgettingReport:
    forgetting: dict[int, float]
    average_forgetting: float
    final_average_loss: float


def forgetting_report(results: Sequence[StageResult]) -> ForgettingReport:
    """Loss increase on each earlier task between its own stage and the final one."""
    if not results:
        raise ProtocolError("no stage results")
    for i, r in enumerate(results):
        if r.stage != i:
            raise ProtocolError(f"stage results out of order or missing: expected {i}, got {r.stage}")
    final = results[-1].eval_losses
    forgetting = {n: final[n] - results[n].eval_losses[n] for n in range(len(results) - 1)}
    avg = float(np.mean(list(forgetting.values()))) if forgetting else 0.0
    return ForgettingReport(forgetting, avg, float(np.mean(final)))


# --------------------------------------------------------------------------- helpers


def evaluate_all(model: ToyModel, tasks: Sequence[SyntheticTask]) -> list[float]:
    """Mean eval loss per task, computed through merged weights.

    Only inputs and targets reach the model; there is no task index.
    """
    merged = model.clone()
    for layer in merged.adapted_layers().values():
        merge_stack(layer, commit=True)
    out = []
    for task in tasks:
        pred = forward(merged, task.eval_x)
        out.append(float(task_loss(pred, task.eval_y).data))
    return out


def frozen_checksum(model: ToyModel) -> str:
    h = hashlib.sha256()
    for name, layer in model.adapted_layers().items():
        for i, ad in enumerate(layer.stack.frozen):
            h.update(f"{name}:{i}:{ad.kind}".encode())
            for p in ad.parameters():
                h.update(p.data.tobytes())
            if ad.kind == "adalora":
                h.update(ad.mask.tobytes())
    return h.hexdigest()


def orthonormality_gap(ad) -> float:
    """``||A.T A - I||_F`` for one adapter."""
    a = ad.A.data
    return float(np.linalg.norm(a.T @ a - np.eye(a.shape[1])))


def run_rng(seed: int, run_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(run_id.encode())])


def base_model(cfg: RunConfig, seed: int) -> ToyModel:
    """The frozen pretrained stand-in shared by every method for a given seed."""
    return ToyModel(cfg.model, seed=[seed, _MODEL_STREAM])


# --------------------------------------------------------------------------- training


class ContinualLearner:
    """Drives one method through the task sequence, one stage at a time."""

    def __init__(self, cfg: RunConfig, method: str, seed: int, tasks: Sequence[SyntheticTask] | None = None,
                 model: ToyModel | None = None, adapter_seed: int | None = None):
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
        warn_unused(cfg, method)
        self.cfg = cfg
        self.method = method
        self.seed = seed
        self.tasks = list(tasks) if tasks is not None else make_suite(cfg, seed)
        self.base = model if model is not None else base_model(cfg, seed)
        self.model = self.base.clone()
        self.models: list[ToyModel] = []
        self.rng = run_rng(seed, method)
        self.adapter_rng = self.rng if adapter_seed is None else np.random.default_rng(adapter_seed)
        self.results: list[StageResult] = []
        self.metrics: list[dict] = []

    @property
    def n_stages(self) -> int:
        return 1 if self.method == "multi" else len(self.tasks)

    @property
    def next_stage(self) -> int:
        return len(self.results)

    def run(self) -> list[StageResult]:
        while self.next_stage < self.n_stages:
            self.run_stage(self.next_stage)
        return self.results

    # -- stage setup ------------------------------------------------------------

    def _attach(self, model: ToyModel, kind: str) -> None:
        cfg = self.cfg
        for layer in model.adapted_layers().values():
            seed = int(self.adapter_rng.integers(2**63))
            if kind == "lora":
                ad = init_lora(layer.d1, layer.d2, cfg.rank, seed)
            else:
                ad = init_adalora(layer.d1, layer.d2, cfg.rank_init, seed)
            freeze_and_extend(layer.stack, ad)

    def _prepare(self, stage: int) -> tuple[ToyModel, str, bool]:
        """Set trainable flags for the stage; return (model, loss mode, uses rank allocation)."""
        m = self.method
        if m in ("seq_ft", "lwf"):
            self.model.set_base_trainable(True)
            return self.model, "lora", False
        if m == "seq_lora":
            self._attach(self.model, "lora")
            return self.model, "lora", False
        if m == "o_lora":
            self._attach(self.model, "lora")
            return self.model, "o_lora", False
        if m == "o_adalora":
            self._attach(self.model, "adalora")
            return self.model, "o_adalora", True
        if m == "mono":
            self.model = self.base.clone()
            self._attach(self.model, "adalora")
            return self.model, "adalora", True
        # multi
        self._attach(self.model, "adalora")
        return self.model, "adalora", True

    def _batch(self, stage: int) -> tuple[np.ndarray, np.ndarray]:
        bs = self.cfg.batch_size
        if self.method == "multi":
            # every task equally likely, i.e. examples weighted by inverse task size
            which = self.rng.integers(0, len(self.tasks), bs)
            xs, ys = [], []
            for t in which:
                task = self.tasks[t]
                i = int(self.rng.integers(0, len(task.train_x)))
                xs.append(task.train_x[i])
                ys.append(task.train_y[i])
            return np.stack(xs), np.stack(ys)
        task = self.tasks[stage]
        idx = self.rng.integers(0, len(task.train_x), bs)
        return task.train_x[idx], task.train_y[idx]

    # -- the stage itself ----------------------------------------------------------

    def run_stage(self, stage: int) -> StageResult:
        if stage != self.next_stage:
            raise ProtocolError(f"{self.method}: expected stage {self.next_stage}, got {stage}")
        if stage >= self.n_stages:
            raise ProtocolError(f"{self.method}: only {self.n_stages} stage(s)")
        cfg = self.cfg
        t0 = time.perf_counter()

        teacher = self.model.clone() if (self.method == "lwf" and stage > 0) else None
        model, mode, adaptive = self._prepare(stage)
        if self.method in ADAPTER_METHODS and model.adapter_parameters():
            model.set_base_trainable(False)

        steps = cfg.stage_steps(stage)
        if self.method == "multi":
            steps = cfg.steps_first + cfg.steps_later * (len(self.tasks) - 1)
        lr = cfg.stage_lr(self.method, stage)
        params = model.trainable_parameters()
        opt = make_optimizer(cfg.optimizer, params, lr, cfg.momentum)
        stacks = model.stacks()
        actives = {name: layer.stack.active for name, layer in model.adapted_layers().items()
                   if layer.stack.active is not None}
        state = schedule = None
        if adaptive:
            state = ImportanceState(cfg.beta1, cfg.beta2)
            schedule = BudgetSchedule(
                n_weights=len(actives), total_steps=steps, r_init=cfg.rank_init, r_target=cfg.rank_target,
                warmup_steps=int(round(cfg.warmup_frac * steps)),
                decay_end_step=int(round(cfg.decay_end_frac * steps)),
            )
        checksum_before = frozen_checksum(model)
        ortho_init = [orthonormality_gap(a) for a in actives.values() if a.kind == "adalora"]

        trace = []
        opt.zero_grad()
        for step in range(steps):
            acc = {"task_loss": 0.0, "distill": 0.0, "orth_loss": 0.0, "adalora_reg": 0.0, "total": 0.0}
            for _ in range(cfg.grad_accum):
                x, y = self._batch(stage)
                with T.Tape() as tape:
                    pred, hidden = forward(model, x, return_hidden=True)
                    loss = task_loss(pred, y)
                    acc["task_loss"] += float(loss.data)
                    if teacher is not None:
                        _, target_hidden = forward(teacher, x, return_hidden=True)
                        distill = task_loss(hidden, target_hidden.data)
                        acc["distill"] += float(distill.data)
                        loss = T.add(loss, T.scale(distill, cfg.lwf_weight))
                    lb = combined_loss(loss, stacks, cfg.lambda1, cfg.lambda2, mode)
                    tape.backward(lb.objective)
                acc["orth_loss"] += lb.orth_loss
                acc["adalora_reg"] += lb.adalora_reg
                acc["total"] += lb.total
            if adaptive:
                update_importance(state, actives)
            opt.step(scale=1.0 / cfg.grad_accum)
            if adaptive:
                apply_budget(actives, state, budget_at(schedule, step + 1))
            opt.zero_grad()
            if step % cfg.log_every == 0 or step == steps - 1:
                row = {"step": step, "stage": stage}
                row.update({k: v / cfg.grad_accum for k, v in acc.items()})
                row["active_rank"] = sum(a.active_rank for a in actives.values())
                for name, a in actives.items():
                    row[f"rank:{name}"] = a.active_rank
                trace.append(row)

        count, frac = trainable_param_count_for_stage(model, params)
        if self.method == "seq_lora":
            for layer in model.adapted_layers().values():
                merge_stack(layer, commit=True)
        if self.method in ("seq_ft", "lwf"):
            model.set_base_trainable(False)

        result = StageResult(
            stage=stage,
            method=self.method,
            eval_losses=evaluate_all(model, self.tasks),
            trainable_count=count,
            trainable_fraction=frac,
            wall_clock=time.perf_counter() - t0,
            trace=trace,
            orth_overlap=float(np.sqrt(total_orth_loss(stacks).data)) if actives else 0.0,
            frozen_checksum_before=checksum_before,
            frozen_checksum_after=frozen_checksum(model),
            orthonormality_init=ortho_init,
            orthonormality_final=[orthonormality_gap(a) for a in actives.values() if a.kind == "adalora"],
            active_ranks={name: a.active_rank for name, a in actives.items()},
        )
        if self.method == "mono":
            self.models.append(model)
        self.results.append(result)
        self.metrics.extend(trace)
        log.info("%s seed=%d stage=%d losses=%s", self.method, self.seed, stage,
                 [round(v, 4) for v in result.eval_losses])
        return result


def trainable_param_count_for_stage(model: ToyModel, trained) -> tuple[int, float]:
    """Count of the scalars a stage trained, over all scalars the model holds."""
    total = sum(p.size for p in model.parameters())
    count = sum(p.size for p in trained)
    return count, count / total


def run_stage(learner: ContinualLearner, stage: int) -> StageResult:
    return learner.run_stage(stage)
