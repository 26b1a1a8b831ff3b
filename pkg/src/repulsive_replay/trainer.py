"""Class-incremental training with generated replay.

Every step trains on one batch of the current task and, once earlier tasks
exist, on an equally sized batch decoded by a frozen copy of the model from
the end of the previous task. Repulsion/attraction terms only ever touch
the replay batch.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .data import TaskSequence
from .evaluation import CohortReport, per_class_precision, write_report
from .losses import (
    ClassMeans,
    LossWeights,
    cross_entropy,
    replay_objective,
    update_class_mean,
)
from .model import ModelConfig, VAEClassifier, copy_params, parameter_names, reparameterize
from .replay import RepulsionConfig, generate_replay

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "rr_ra")

METRIC_COLUMNS = ("task", "iter", "variant", "seed", "loss_total", "loss_rec",
                  "loss_kl", "loss_rr", "loss_ra", "loss_cls")

# per-component seed offsets from the master seed
DATA_SEED, INIT_SEED, REPLAY_SEED = 1, 2, 3


class TrainingDiverged(FloatingPointError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations_per_task: int = 2000
    batch_size: int = 128
    replay_batch_size: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    repulsion: RepulsionConfig = field(default_factory=RepulsionConfig)
    seed: int = 0
    variant: str = "baseline"
    replay: bool = True
    log_every: int = 1
    eval_every: int = 0

    def __post_init__(self):
        if self.iterations_per_task < 1:
            raise ValueError("iterations_per_task must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.replay_batch_size is not None and self.replay_batch_size < 0:
            raise ValueError("replay_batch_size must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    @property
    def n_replay(self) -> int:
        return self.batch_size if self.replay_batch_size is None else self.replay_batch_size

    @property
    def active_weights(self) -> LossWeights:
        """Loss weights actually applied; the baseline never repulses or attracts."""
        if self.variant == "baseline":
            return dataclasses.replace(self.weights, lambda_rr=0.0, lambda_ra=0.0)
        return self.weights

    @property
    def effective_variant(self) -> str:
        w = self.active_weights
        return "rr_ra" if (w.lambda_rr > 0 or w.lambda_ra > 0) else "baseline"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["repulsion"] = RepulsionConfig(**d["repulsion"])
        return cls(**d)


def _counters() -> dict[str, int]:
    return {"rr_current": 0, "rr_replay": 0, "ra_current": 0, "ra_replay": 0,
            "mean_updates_real": 0, "mean_updates_generated": 0}


@dataclass
class TrainerState:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, ad.Tensor]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int = 0
    generator: dict[str, ad.Tensor] | None = None
    class_means: ClassMeans = field(default_factory=ClassMeans)
    seen_classes: list[int] = field(default_factory=list)
    past_classes: list[int] = field(default_factory=list)
    task_index: int = 0
    iteration: int = 0
    counters: dict[str, int] = field(default_factory=_counters)

    @classmethod
    def fresh(cls, model_config: ModelConfig, train_config: TrainConfig) -> "TrainerState":
        params = VAEClassifier.create(model_config, train_config.seed + INIT_SEED).params
        zeros = {k: np.zeros_like(v.data) for k, v in params.items()}
        return cls(model_config, train_config, params, zeros,
                   {k: z.copy() for k, z in zeros.items()})

    @property
    def model(self) -> VAEClassifier:
        return VAEClassifier(self.model_config, self.params)

    @property
    def generator_model(self) -> VAEClassifier | None:
        return None if self.generator is None else VAEClassifier(self.model_config, self.generator)


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _batch_loss(state: TrainerState, x: np.ndarray, labels: Sequence[int], kind: str,
                eps: np.ndarray, competing=None):
    """Classifier cross-entropy plus the generative objective for one batch."""
    model = state.model
    w = state.train_config.active_weights
    active = sorted(state.seen_classes)
    col = {c: j for j, c in enumerate(active)}
    h = model.encode_trunk(x)
    cls = cross_entropy(model.class_log_probs(h, active), [col[int(y)] for y in labels])
    stats = model.split(h)
    x_prime = model.decode(reparameterize(stats, eps))
    if kind == "replay":
        weights = w
        if w.lambda_rr > 0:
            state.counters["rr_replay"] += 1
        if w.lambda_ra > 0:
            state.counters["ra_replay"] += 1
    else:
        # repulsion and attraction act on replayed samples only
        weights = dataclasses.replace(w, lambda_rr=0.0, lambda_ra=0.0)
    parts = replay_objective(x, x_prime, stats, labels, state.class_means,
                             competing or [set() for _ in labels], weights)
    return ad.add(cls, parts.total), parts, cls.item()


def train_step(state: TrainerState, batch_x: np.ndarray, batch_y: np.ndarray) -> dict:
    """One optimizer update on the current batch plus (if any) a replay batch."""
    cfg = state.train_config
    seed = cfg.seed
    key = (state.task_index, state.iteration)
    n = len(batch_x)
    eps_cur = _rng(seed + REPLAY_SEED, *key, 1).standard_normal((n, state.model_config.latent_dim))

    metrics = {"loss_rec": 0.0, "loss_kl": 0.0, "loss_rr": 0.0, "loss_ra": 0.0, "loss_cls": 0.0}
    with ad.Graph() as graph:
        total, parts, cls = _batch_loss(state, batch_x, batch_y, "current", eps_cur)
        for name, value in (("loss_rec", parts.rec), ("loss_kl", parts.kl), ("loss_cls", cls)):
            metrics[name] += value
        if cfg.replay and state.past_classes and state.generator is not None and cfg.n_replay > 0:
            w = cfg.active_weights
            batch = generate_replay(
                state.generator_model, cfg.n_replay, state.past_classes,
                _rng(seed + REPLAY_SEED, *key, 0),
                cfg.repulsion if w.lambda_rr > 0 else None,
            )
            eps_rep = _rng(seed + REPLAY_SEED, *key, 2).standard_normal(
                (len(batch), state.model_config.latent_dim))
            rtotal, rparts, rcls = _batch_loss(state, batch.images, batch.labels, "replay",
                                               eps_rep, batch.competing)
            total = ad.add(total, rtotal)
            metrics["loss_rec"] += rparts.rec
            metrics["loss_kl"] += rparts.kl
            metrics["loss_cls"] += rcls
            metrics["loss_rr"] = rparts.rr
            metrics["loss_ra"] = rparts.ra
    metrics["loss_total"] = total.item()
    if not all(math.isfinite(v) for v in metrics.values()):
        raise TrainingDiverged(
            f"non-finite loss at task {state.task_index} iteration {state.iteration}: {metrics}"
        )
    grads = graph.backward(total)
    _adam_update(state, grads)

    for c in np.unique(batch_y):
        update_class_mean(state.class_means, batch_x[batch_y == c], int(c))
        state.counters["mean_updates_real"] += 1
    state.iteration += 1
    return metrics


def _adam_update(state: TrainerState, grads: dict) -> None:
    cfg = state.train_config
    state.adam_t += 1
    t = state.adam_t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in state.params.items():
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.adam_m[name], state.adam_v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += cfg.adam_eps
        p.data = p.data - cfg.lr * (m / c1) / denom


def _begin_task(state: TrainerState, classes: Sequence[int]) -> None:
    for c in classes:
        if c not in state.seen_classes:
            state.seen_classes.append(int(c))


def _end_task(state: TrainerState, classes: Sequence[int]) -> None:
    state.generator = copy_params(state.params, requires_grad=False)
    for c in classes:
        if c not in state.past_classes:
            state.past_classes.append(int(c))
    state.task_index += 1
    state.iteration = 0


def _fmt(x) -> str:
    return repr(float(x))


@dataclass
class RunResult:
    state: TrainerState
    history: list[dict]
    task_reports: list[CohortReport]

    @property
    def final_report(self) -> CohortReport:
        return self.task_reports[-1]


def evaluate(state: TrainerState, tasks: TaskSequence) -> CohortReport:
    ds = tasks.dataset
    prec = per_class_precision(state.model, ds.test_images, ds.test_labels, state.seen_classes)
    return CohortReport.build(prec, tasks.class_order(), tasks.first_seen())


def run_sequence(tasks: TaskSequence, model_config: ModelConfig, config: TrainConfig,
                 out_dir=None, resume: TrainerState | None = None) -> RunResult:
    """Train the tasks in order, evaluating on all seen classes after each one.

    With ``out_dir`` the metric history (``metrics.csv``), per-task
    evaluations (``eval_history.csv``), the final ``report.csv`` and
    checkpoints are written there.
    """
    ds = tasks.dataset
    if ds.feature_count != model_config.feature_count:
        raise ValueError(f"dataset has {ds.feature_count} features, model expects "
                         f"{model_config.feature_count}")
    if max(tasks.class_order()) >= model_config.class_capacity:
        raise ValueError("task classes exceed the model's class capacity")
    state = resume if resume is not None else TrainerState.fresh(model_config, config)
    cfg = state.train_config
    out = Path(out_dir) if out_dir is not None else None
    metric_fh = eval_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metric_fh = (out / "metrics.csv").open("a" if resume else "w", newline="")
        eval_fh = (out / "eval_history.csv").open("a" if resume else "w", newline="")
        if resume is None:
            metric_fh.write(",".join(METRIC_COLUMNS) + "\n")
            eval_fh.write("after_task,iter,class_id,first_seen_task,precision\n")

    history: list[dict] = []
    reports: list[CohortReport] = []
    variant = cfg.effective_variant
    try:
        for k in range(state.task_index, len(tasks)):
            task = tasks.tasks[k]
            _begin_task(state, task.classes)
            train_x = ds.train_images[task.train_idx]
            train_y = ds.train_labels[task.train_idx]
            log.info("task %d classes %s: %d samples", k, task.classes, len(train_y))
            while state.iteration < cfg.iterations_per_task:
                it = state.iteration
                pick = _rng(cfg.seed + DATA_SEED, k, it).integers(0, len(train_y), cfg.batch_size)
                metrics = train_step(state, train_x[pick], train_y[pick])
                done = state.iteration
                if done % cfg.log_every == 0 or done == cfg.iterations_per_task:
                    row = {"task": k, "iter": done, "variant": variant, "seed": cfg.seed, **metrics}
                    history.append(row)
                    if metric_fh:
                        metric_fh.write(",".join(
                            str(row[c]) if c in ("task", "iter", "variant", "seed") else _fmt(row[c])
                            for c in METRIC_COLUMNS) + "\n")
                if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.iterations_per_task:
                    _log_eval(eval_fh, k, done, evaluate(state, tasks))
            report = evaluate(state, tasks)
            reports.append(report)
            _log_eval(eval_fh, k, cfg.iterations_per_task, report)
            _end_task(state, task.classes)
            if out is not None:
                save_checkpoint(state, out / f"checkpoint_task{k}.ckpt")
    finally:
        for fh in (metric_fh, eval_fh):
            if fh:
                fh.close()
    if out is not None and reports:
        write_report(reports[-1], out / "report.csv")
        save_checkpoint(state, out / "checkpoint.ckpt")
    return RunResult(state, history, reports)


def _log_eval(fh, task: int, it: int, report: CohortReport) -> None:
    summary = report.summary()
    log.info("after task %d iter %d: overall %.2f first50 %.2f first20 %.2f",
             task, it, summary["overall"], summary["first50"], summary["first20"])
    if fh is None:
        return
    for c, t, p in zip(report.class_ids, report.first_seen_task, report.precision):
        fh.write(f"{task},{it},{c},{t},{_fmt(p)}\n")


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_checkpoint(state: TrainerState, path) -> None:
    tensors = {}
    for name, p in state.params.items():
        tensors[f"params/{name}"] = p.data
        tensors[f"adam_m/{name}"] = state.adam_m[name]
        tensors[f"adam_v/{name}"] = state.adam_v[name]
        if state.generator is not None:
            tensors[f"generator/{name}"] = state.generator[name].data
    for c, m in state.class_means.means.items():
        tensors[f"class_means/{c}"] = m
    mc = state.model_config
    meta = {
        "model_config": {"feature_count": mc.feature_count, "latent_dim": mc.latent_dim,
                         "hidden_sizes": list(mc.hidden_sizes),
                         "class_capacity": mc.class_capacity,
                         "image_shape": None if mc.image_shape is None else list(mc.image_shape)},
        "train_config": state.train_config.to_dict(),
        "adam_t": state.adam_t,
        "has_generator": state.generator is not None,
        "class_counts": {str(c): n for c, n in state.class_means.counts.items()},
        "seen_classes": state.seen_classes,
        "past_classes": state.past_classes,
        "task_index": state.task_index,
        "iteration": state.iteration,
        "counters": state.counters,
    }
    checkpoint.write(path, meta, tensors)


def load_checkpoint(path, expected: ModelConfig | None = None) -> TrainerState:
    meta, tensors = checkpoint.read(path)
    try:
        mc = ModelConfig(**meta["model_config"])
        tc = TrainConfig.from_dict(meta["train_config"])
    except (KeyError, TypeError, ValueError) as err:
        raise checkpoint.CheckpointError(f"invalid checkpoint metadata: {err}") from None
    if expected is not None and expected != mc:
        raise ConfigMismatchError(f"checkpoint model config {mc} does not match expected {expected}")
    names = parameter_names(mc)
    missing = [n for n in names if f"params/{n}" not in tensors]
    if missing:
        raise checkpoint.CheckpointError(f"checkpoint is missing parameters {missing}")
    params = {n: ad.Tensor(tensors[f"params/{n}"], requires_grad=True, name=n) for n in names}
    generator = None
    if meta["has_generator"]:
        generator = {n: ad.Tensor(tensors[f"generator/{n}"], name=n) for n in names}
    means = ClassMeans()
    for c, n in meta["class_counts"].items():
        means.means[int(c)] = tensors[f"class_means/{c}"]
        means.counts[int(c)] = int(n)
    return TrainerState(
        model_config=mc, train_config=tc, params=params,
        adam_m={n: tensors[f"adam_m/{n}"] for n in names},
        adam_v={n: tensors[f"adam_v/{n}"] for n in names},
        adam_t=meta["adam_t"], generator=generator, class_means=means,
        seen_classes=list(meta["seen_classes"]), past_classes=list(meta["past_classes"]),
        task_index=meta["task_index"], iteration=meta["iteration"],
        counters=dict(meta["counters"]),
    )
