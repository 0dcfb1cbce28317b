"""First-order MAML: SGD inner adaptation, AdaBelief meta-updates, checkpoint selection."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import MetaPools, SplitSpec, Task, fit_scaler, preset_split, sample_task
from .errors import DivergenceError, ValidationError
from .net import Architecture, ModelParams, forward, init_params, loss_and_grad
from .objective import LossConfig, Metrics, evaluate, hubcor_loss

LR_SCHEDULES = ("cosine", "step", "constant")


@dataclass(frozen=True)
class AdaBeliefConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.1
    outer_lr: float = 0.003
    inner_steps: int = 10
    tasks_per_epoch: int = 64
    n_support: int = 512
    n_query: int = 256
    epochs: int = 100
    lr_schedule: str = "cosine"
    lr_floor: float = 0.1
    adabelief: AdaBeliefConfig = field(default_factory=AdaBeliefConfig)
    seed: int = 0
    split: SplitSpec = field(default_factory=lambda: preset_split("primary"))
    loss: LossConfig = field(default_factory=LossConfig)
    arch: Architecture = field(default_factory=Architecture)
    # tasks averaged per outer update; 0 means all tasks of the epoch in one update
    meta_batch_size: int = 2
    schedule_inner: bool = True
    val_tasks: int = 8
    test_tasks: int = 16

    def __post_init__(self):
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise ValidationError("learning rates must be > 0")
        if self.inner_steps < 1:
            raise ValidationError("inner_steps must be >= 1")
        if self.tasks_per_epoch < 1:
            raise ValidationError("tasks_per_epoch must be >= 1")
        if self.n_support < 2 or self.n_query < 2:
            raise ValidationError("n_support and n_query must be >= 2")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValidationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 < self.lr_floor <= 1:
            raise ValidationError("lr_floor must lie in (0, 1]")
        if self.meta_batch_size < 0:
            raise ValidationError("meta_batch_size must be >= 0")
        if self.val_tasks < 1 or self.test_tasks < 1:
            raise ValidationError("val_tasks and test_tasks must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["adabelief"] = asdict(self.adabelief)
        d["split"] = self.split.to_dict()
        d["loss"] = self.loss.to_dict()
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown MetaConfig fields: {sorted(unknown)}")
        try:
            if "adabelief" in d:
                d["adabelief"] = AdaBeliefConfig(**d["adabelief"])
            if "split" in d:
                d["split"] = SplitSpec.from_dict(d["split"])
            if "loss" in d:
                d["loss"] = LossConfig(**d["loss"])
            if "arch" in d:
                d["arch"] = Architecture.from_dict(d["arch"])
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from None


# -- optimizers -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdaBeliefState:
    m: np.ndarray
    s: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdaBeliefState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adabelief_update(state: AdaBeliefState, p: ModelParams, grad, lr: float, cfg: AdaBeliefConfig = AdaBeliefConfig()):
    """One AdaBelief step; returns new ``(params, state)`` without touching the inputs."""
    g = np.asarray(grad, dtype=float)
    if g.shape != state.m.shape or g.size != len(p):
        raise ValidationError(f"gradient length {g.size} does not match parameters ({len(p)}) / state")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    s = cfg.beta2 * state.s + (1 - cfg.beta2) * (g - m) ** 2 + cfg.epsilon
    m_hat = m / (1 - cfg.beta1**t)
    s_hat = s / (1 - cfg.beta2**t)
    new = p.vector - lr * m_hat / (np.sqrt(s_hat) + cfg.epsilon)
    return p.with_vector(new), AdaBeliefState(m, s, t)


def sgd_step(p: ModelParams, grad, lr: float) -> ModelParams:
    return p.with_vector(p.vector - lr * np.asarray(grad, dtype=float))


def lr_schedule(epoch: int, total: int, base: float, kind: str = "cosine", floor: float = 0.1) -> float:
    if not 0 <= epoch < total:
        raise ValidationError(f"epoch {epoch} outside [0, {total})")
    if kind == "constant" or total == 1:
        return base
    if kind == "cosine":
        return base * (floor + (1 - floor) * (1 + math.cos(math.pi * epoch / (total - 1))) / 2)
    if kind == "step":
        # halve at each quarter of the run, never below the floor
        return base * max(floor, 0.5 ** (4 * epoch // total))
    raise ValidationError(f"unknown lr schedule {kind!r}")


# -- inner / outer loops -----------------------------------------------------------


def _adapt(p, support_x, support_y, steps, lr, loss_cfg):
    loss = math.nan
    for step in range(steps):
        try:
            loss, grad = loss_and_grad(p, support_x, support_y, loss_cfg)
        except ValidationError:
            if step == 0:
                raise
            # inputs were accepted on step 0, so a failure now comes from the updated weights
            raise DivergenceError(f"inner loop diverged at step {step} (non-finite predictions)") from None
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"inner loop diverged at step {step} (loss={loss!r})")
        p = sgd_step(p, grad, lr)
        if not np.all(np.isfinite(p.vector)):
            raise DivergenceError(f"inner loop diverged at step {step} (parameters overflowed)")
    return p, loss


def inner_adapt(p: ModelParams, support_x, support_y, steps: int, lr: float, loss_cfg: LossConfig = LossConfig()) -> ModelParams:
    """`steps` full-batch SGD steps on the support set, dropout off."""
    return _adapt(p, support_x, support_y, steps, lr, loss_cfg)[0]


def task_rng(seed: int, epoch: int, task_id: int) -> np.random.Generator:
    """Dropout stream for one task; keyed by id so task order is irrelevant."""
    return np.random.default_rng([seed, epoch, task_id])


@dataclass
class StepStats:
    support_loss: float
    query_loss: float


def task_meta_gradient(p: ModelParams, task: Task, cfg: MetaConfig, inner_lr: float, epoch: int = 0, inner_steps: int | None = None):
    """Query-set gradient at the task-adapted parameters (no second-order terms).

    Returns ``(grad, support_loss, query_loss)``; the support loss is the one
    seen by the last inner step (NaN when no inner steps run).
    """
    steps = cfg.inner_steps if inner_steps is None else inner_steps
    try:
        adapted, sup_loss = _adapt(p, task.support_x, task.support_y, steps, inner_lr, cfg.loss)
    except DivergenceError as exc:
        raise DivergenceError(f"task {task.id}: {exc}") from None
    q_loss, grad = loss_and_grad(adapted, task.query_x, task.query_y, cfg.loss, "train", task_rng(cfg.seed, epoch, task.id))
    if not (math.isfinite(q_loss) and np.all(np.isfinite(grad))):
        raise DivergenceError(f"task {task.id}: query loss not finite ({q_loss!r})")
    return grad, sup_loss, q_loss


def meta_gradient(p: ModelParams, tasks: list[Task], cfg: MetaConfig, inner_lr: float, epoch: int = 0, inner_steps: int | None = None):
    """Mean of per-task query gradients, reduced in task-id order."""
    if not tasks:
        raise ValidationError("meta step needs at least one task")
    ordered = sorted(tasks, key=lambda t: t.id)
    total = np.zeros(len(p))
    sup, qry = [], []
    for task in ordered:
        g, s_loss, q_loss = task_meta_gradient(p, task, cfg, inner_lr, epoch, inner_steps)
        total += g
        sup.append(s_loss)
        qry.append(q_loss)
    return total / len(ordered), StepStats(float(np.mean(sup)), float(np.mean(qry)))


def meta_step(
    p: ModelParams,
    tasks: list[Task],
    cfg: MetaConfig,
    state: AdaBeliefState,
    inner_lr: float | None = None,
    outer_lr: float | None = None,
    epoch: int = 0,
    inner_steps: int | None = None,
):
    """One outer update: adapt to each task, average query gradients, AdaBelief step."""
    inner_lr = cfg.inner_lr if inner_lr is None else inner_lr
    outer_lr = cfg.outer_lr if outer_lr is None else outer_lr
    grad, stats = meta_gradient(p, tasks, cfg, inner_lr, epoch, inner_steps)
    new_p, new_state = adabelief_update(state, p, grad, outer_lr, cfg.adabelief)
    return new_p, new_state, stats


# -- evaluation ----------------------------------------------------------------------


@dataclass
class EvalResult:
    metrics: Metrics
    loss: float
    per_task: list[dict]


def adapt_and_score(p: ModelParams, tasks: list[Task], inner_lr: float, steps: int, loss_cfg: LossConfig) -> EvalResult:
    """Reset to `p` for every task, adapt on its support set, score its query set."""
    per_task = []
    for task in tasks:
        adapted = inner_adapt(p, task.support_x, task.support_y, steps, inner_lr, loss_cfg) if inner_lr > 0 else p
        pred, _ = forward(adapted, task.query_x, "eval")
        loss, _ = hubcor_loss(pred, task.query_y, loss_cfg)
        m = evaluate(pred, task.query_y, loss_cfg.corr_degenerate_value)
        per_task.append({"task_id": task.id, "n_query": task.n_query, "loss": loss, **m.to_dict()})
    weights = np.array([t["n_query"] for t in per_task], dtype=float)
    w = weights / weights.sum()
    avg = lambda key: float(np.dot(w, [t[key] for t in per_task]))  # noqa: E731
    metrics = Metrics(mse=avg("mse"), mae=avg("mae"), cc=avg("cc_percent") / 100.0)
    return EvalResult(metrics, avg("loss"), per_task)


def sample_tasks(pool, split, phase, n_tasks, n_support, n_query, rng, scaler, first_id=0) -> list[Task]:
    return [
        sample_task(pool, split, phase, n_support, n_query, rng, scaler, task_id=first_id + i)
        for i in range(n_tasks)
    ]


def meta_evaluate(
    ckpt: Checkpoint,
    pool,
    cfg: MetaConfig,
    n_tasks: int | None = None,
    n_support: int | None = None,
    n_query: int | None = None,
    seed: int | None = None,
    inner_lr: float | None = None,
) -> EvalResult:
    """Meta-test protocol: per task, adapt the checkpoint on eval-support and score eval-query."""
    if ckpt.arch != cfg.arch:
        raise ValidationError(f"checkpoint architecture {ckpt.arch} does not match config {cfg.arch}")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x7E57])
    tasks = sample_tasks(
        pool, cfg.split, "eval", n_tasks or cfg.test_tasks, n_support or cfg.n_support,
        n_query or cfg.n_query, rng, ckpt.scaler,
    )
    lr = cfg.inner_lr if inner_lr is None else inner_lr
    return adapt_and_score(ckpt.params, tasks, lr, cfg.inner_steps, cfg.loss)


# -- training driver ----------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    test: dict | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {"epochs": self.epochs, "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss, "test": self.test}
        if include_timings:
            d["timings"] = self.timings
        return d

    @property
    def val_losses(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]


def meta_train(cfg: MetaConfig, pools: MetaPools, log=None) -> tuple[Checkpoint, TrainReport]:
    """Full FOMAML run; keeps the parameters with the lowest validation query loss."""
    t_start = time.perf_counter()
    scaler = fit_scaler(pools.train)
    p = init_params(cfg.arch, cfg.seed)
    state = AdaBeliefState.fresh(len(p))
    val_tasks = sample_tasks(
        pools.val, cfg.split, "eval", cfg.val_tasks, cfg.n_support, cfg.n_query,
        np.random.default_rng([cfg.seed, 0x7A1]), scaler,
    )
    report = TrainReport()
    best = p
    for epoch in range(cfg.epochs):
        inner_lr = (
            lr_schedule(epoch, cfg.epochs, cfg.inner_lr, cfg.lr_schedule, cfg.lr_floor)
            if cfg.schedule_inner else cfg.inner_lr
        )
        outer_lr = lr_schedule(epoch, cfg.epochs, cfg.outer_lr, cfg.lr_schedule, cfg.lr_floor)
        tasks = sample_tasks(
            pools.train, cfg.split, "train", cfg.tasks_per_epoch, cfg.n_support, cfg.n_query,
            np.random.default_rng([cfg.seed, epoch]), scaler,
        )
        batch = cfg.meta_batch_size or len(tasks)
        sup_losses, qry_losses = [], []
        for start in range(0, len(tasks), batch):
            try:
                p, state, stats = meta_step(p, tasks[start : start + batch], cfg, state, inner_lr, outer_lr, epoch)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
            sup_losses.append(stats.support_loss)
            qry_losses.append(stats.query_loss)
        stats = StepStats(float(np.mean(sup_losses)), float(np.mean(qry_losses)))
        val = adapt_and_score(p, val_tasks, cfg.inner_lr, cfg.inner_steps, cfg.loss)
        report.epochs.append({
            "epoch": epoch,
            "train_support_loss": stats.support_loss,
            "train_query_loss": stats.query_loss,
            "val_loss": val.loss,
            "val_mse": val.metrics.mse,
            "val_mae": val.metrics.mae,
            "val_cc": val.metrics.cc,
            "inner_lr": inner_lr,
            "outer_lr": outer_lr,
        })
        if val.loss < report.best_val_loss:
            report.best_val_loss = val.loss
            report.best_epoch = epoch
            best = p
        if log:
            log(f"epoch {epoch:4d}  query {stats.query_loss:.5f}  val {val.loss:.5f}  val_mse {val.metrics.mse:.5f}")
    report.timings["train_s"] = time.perf_counter() - t_start
    ckpt = Checkpoint(best, scaler, {"kind": "metafap", "seed": cfg.seed, "split": cfg.split.name, "best_epoch": report.best_epoch})
    if len(pools.test):
        t0 = time.perf_counter()
        res = meta_evaluate(ckpt, pools.test, cfg)
        report.test = res.metrics.to_dict()
        report.timings["test_s"] = time.perf_counter() - t0
    return ckpt, report
