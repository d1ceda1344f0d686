"""Sequential training over a task stream with forgetting-mitigation methods.

All methods share one minibatch SGD loop; they differ only in how the step
gradient is produced. When the sharpness-aware wrapper is enabled it computes
the perturbed gradient first, and the method hooks (quadratic penalty, replay
gradient, reference projection) operate on that gradient unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import ScoreMatrix
from .model import Batch, MlpSpec, ModelState, accuracy, init_model, loss_and_grad, predict_proba
from .numcore import ParamVector, RngStream
from .sam import SamConfig, _sam_eval
from .tasks import TaskSpec, TaskStream, WarmStartCorpus

log = logging.getLogger(__name__)

METHODS = ("finetune", "ewc", "er", "agem", "stable_sgd")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns non-finite; carries loop context."""

    def __init__(self, task_pos: int, epoch: int, step: int):
        super().__init__(f"loss diverged at task position {task_pos}, epoch {epoch}, step {step}")
        self.task_pos = task_pos
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class StableSgdConfig:
    """Decayed-hyperparameter schedule: lr shrinks once per task boundary."""

    lr0: float = 0.25
    lr_decay_per_task: float = 0.9
    batch_size: int = 10

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not (0.0 < self.lr_decay_per_task <= 1.0):
            raise ValueError("lr_decay_per_task must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class MethodConfig:
    method: str = "finetune"
    lr: float = 0.01
    batch_size: int = 10
    epochs: int = 5
    ewc_lambda: float = 1.0
    ewc_fisher_samples: int = 256
    er_mem_per_class: int = 1
    stable: StableSgdConfig = StableSgdConfig()
    sam: SamConfig | None = None
    name: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")
        if self.ewc_fisher_samples < 1:
            raise ValueError("ewc_fisher_samples must be >= 1")
        if self.er_mem_per_class < 1:
            raise ValueError("er_mem_per_class must be >= 1")

    @property
    def label(self) -> str:
        return self.name if self.name else self.method


def stable_sgd_lr(lr0: float, decay: float, task_index: int) -> float:
    """Learning rate for the task at 0-based position ``task_index``."""
    if lr0 <= 0 or not (0.0 < decay <= 1.0):
        raise ValueError("need lr0 > 0 and decay in (0, 1]")
    if task_index < 0:
        raise ValueError("task_index must be >= 0")
    return lr0 * decay**task_index


@dataclass
class EwcAnchor:
    """Post-task parameter snapshot with its diagonal Fisher weights."""

    params: ParamVector
    fisher: ParamVector


def ewc_fisher_diag(state: ModelState, task: TaskSpec, sample_count: int, rng: RngStream) -> ParamVector:
    """Diagonal Fisher estimate: mean squared gradient of the log-likelihood of
    labels sampled from the model's own predictive distribution.

    Examples are drawn without replacement while the training split is large
    enough, with replacement otherwise.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    inputs = task.train.inputs
    n = inputs.shape[0]
    idx = rng.choice(n, size=sample_count, replace=sample_count > n)
    total = np.zeros(state.num_params)
    for i in idx:
        x = inputs[int(i) : int(i) + 1]
        p = predict_proba(state, x, task.task_id)[0]
        label = int(rng.choice(p.size, replace=True, p=p))
        # grad of -log p(label|x) for one example; squaring drops its sign
        _, grad = loss_and_grad(state, Batch(x, np.array([label]), task.task_id))
        total += grad.values**2
    return ParamVector(total / sample_count, state.layout)


def ewc_penalty(params: ParamVector, anchors: list[EwcAnchor], lam: float) -> tuple[float, ParamVector]:
    """Quadratic anchor penalty (lam/2) * sum_k sum_i F_k_i (w_i - w*_k_i)^2 and its gradient.

    Anchors accumulate: every finished task contributes its own term.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    value = 0.0
    grad = np.zeros_like(params.values)
    for anchor in anchors:
        if anchor.params.layout != params.layout:
            raise ValueError("anchor layout does not match the parameters")
        diff = params.values - anchor.params.values
        value += 0.5 * lam * float(np.sum(anchor.fisher.values * diff * diff))
        grad += lam * anchor.fisher.values * diff
    return value, ParamVector(grad, params.layout)


class ReplayBuffer:
    """Per-(task, class) slots holding up to ``mem_per_class`` stored examples."""

    def __init__(self, mem_per_class: int = 1):
        if mem_per_class < 1:
            raise ValueError("mem_per_class must be >= 1")
        self.mem_per_class = mem_per_class
        self._slots: dict[tuple[int, int], list[tuple[np.ndarray, int]]] = {}

    @property
    def size(self) -> int:
        return sum(len(v) for v in self._slots.values())

    def entries(self) -> list[tuple[int, np.ndarray, int]]:
        """All stored (task_id, x, label) in deterministic slot order."""
        out = []
        for (task_id, _), examples in sorted(self._slots.items()):
            for x, y in examples:
                out.append((task_id, x, y))
        return out

    def sample(self, k: int, rng: RngStream) -> list[tuple[int, np.ndarray, int]]:
        entries = self.entries()
        if k > len(entries):
            raise ValueError(f"cannot sample {k} of {len(entries)} stored examples")
        chosen = rng.choice(len(entries), size=k, replace=False)
        return [entries[int(i)] for i in np.sort(chosen)]


def er_update(buffer: ReplayBuffer, task: TaskSpec, rng: RngStream) -> None:
    """Store ``mem_per_class`` uniformly chosen training examples per class.

    Slots of previously stored tasks are never touched. A class with no
    examples leaves its slot empty with a warning.
    """
    labels = task.train.labels
    for cls in range(task.class_count):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            log.warning("task %d class %d has no training examples; slot left empty", task.task_id, cls)
            continue
        take = min(buffer.mem_per_class, idx.size)
        chosen = rng.choice(idx.size, size=take, replace=False)
        buffer._slots[(task.task_id, cls)] = [
            (task.train.inputs[idx[int(i)]].copy(), int(labels[idx[int(i)]])) for i in np.sort(chosen)
        ]


def replay_loss_and_grad(state: ModelState, entries: list[tuple[int, np.ndarray, int]]) -> tuple[float, ParamVector]:
    """Mean cross-entropy over a mixed-task example list, routed per head."""
    if not entries:
        raise ValueError("replay batch is empty")
    m = len(entries)
    by_task: dict[int, tuple[list[np.ndarray], list[int]]] = {}
    for task_id, x, y in entries:
        xs, ys = by_task.setdefault(task_id, ([], []))
        xs.append(x)
        ys.append(y)
    total_loss = 0.0
    total_grad = np.zeros(state.num_params)
    for task_id in sorted(by_task):
        xs, ys = by_task[task_id]
        weight = len(xs) / m
        loss, grad = loss_and_grad(state, Batch(np.asarray(xs), np.asarray(ys), task_id))
        total_loss += weight * loss
        total_grad += weight * grad.values
    return total_loss, ParamVector(total_grad, state.layout)


def er_step(state: ModelState, batch: Batch, buffer: ReplayBuffer, lr: float, rng: RngStream) -> float:
    """One SGD step on current-batch loss plus mean replay loss; returns that sum.

    The replay minibatch holds min(buffer size, batch size) stored examples
    drawn uniformly across tasks; an empty buffer reduces to a plain step.
    """
    loss, grad = loss_and_grad(state, batch)
    total = grad.values.copy()
    if buffer.size > 0:
        replay = buffer.sample(min(buffer.size, len(batch)), rng)
        r_loss, r_grad = replay_loss_and_grad(state, replay)
        loss += r_loss
        total += r_grad.values
    state.flat -= lr * total
    return loss


def agem_project(grad: ParamVector, ref: ParamVector) -> ParamVector:
    """Project the gradient so it no longer conflicts with the reference.

    When grad . ref >= 0 the gradient is returned untouched; otherwise the
    component along ref is removed, leaving grad_proj . ref = 0.
    """
    denom = ref.dot(ref)
    if denom == 0.0:
        return grad
    dot = grad.dot(ref)
    if dot >= 0.0:
        return grad
    return ParamVector(grad.values - (dot / denom) * ref.values, grad.layout)


@dataclass
class TrainLog:
    """Everything a sequential run produces, independent of where it is stored."""

    task_ids: list[int]
    scores: ScoreMatrix
    loss_curves: list[list[float]]
    snapshots: list[ParamVector]
    buffer_sizes: list[int]


def _batch_loss_and_grad_fn(spec: MlpSpec, batch: Batch):
    def eval_at(w: ParamVector) -> tuple[float, ParamVector]:
        scratch = ModelState(spec, np.asarray(w.values, dtype=np.float64).copy())
        return loss_and_grad(scratch, batch)

    return eval_at


def _step_gradient(
    state: ModelState,
    batch: Batch,
    cfg: MethodConfig,
    anchors: list[EwcAnchor],
    buffer: ReplayBuffer,
    replay_rng: RngStream,
) -> tuple[float, ParamVector]:
    if cfg.sam is not None:
        base_loss, _, grad = _sam_eval(_batch_loss_and_grad_fn(state.spec, batch), state.get_flat(), cfg.sam)
    else:
        base_loss, grad = loss_and_grad(state, batch)
    if cfg.method == "ewc" and anchors:
        _, pgrad = ewc_penalty(state.get_flat(), anchors, cfg.ewc_lambda)
        grad = grad + pgrad
    elif cfg.method == "er" and buffer.size > 0:
        replay = buffer.sample(min(buffer.size, len(batch)), replay_rng)
        _, rgrad = replay_loss_and_grad(state, replay)
        grad = grad + rgrad
    elif cfg.method == "agem" and buffer.size > 0:
        ref_entries = buffer.sample(min(buffer.size, len(batch)), replay_rng)
        _, ref_grad = replay_loss_and_grad(state, ref_entries)
        grad = agem_project(grad, ref_grad)
    return base_loss, grad


def train_sequence(state: ModelState, stream: TaskStream, cfg: MethodConfig, rng: RngStream) -> TrainLog:
    """Train the model on the stream's tasks in order, mutating ``state``.

    After each task: method bookkeeping (Fisher anchor or buffer update), an
    accuracy row over all test splits seen so far, and a parameter snapshot.
    Identical (state, stream, cfg, rng seed) reproduce the log bit for bit.
    """
    anchors: list[EwcAnchor] = []
    buffer = ReplayBuffer(cfg.er_mem_per_class)
    scores = ScoreMatrix()
    loss_curves: list[list[float]] = []
    snapshots: list[ParamVector] = []
    buffer_sizes: list[int] = []
    for pos, task in enumerate(stream.tasks):
        if cfg.method == "stable_sgd":
            lr = stable_sgd_lr(cfg.stable.lr0, cfg.stable.lr_decay_per_task, pos)
            batch_size = cfg.stable.batch_size
        else:
            lr = cfg.lr
            batch_size = cfg.batch_size
        shuffle_rng = rng.derive(f"task{pos}/shuffle")
        replay_rng = rng.derive(f"task{pos}/replay")
        n = task.train.size
        epoch_losses: list[float] = []
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(n)
            step_losses: list[float] = []
            for step, start in enumerate(range(0, n, batch_size)):
                idx = order[start : start + batch_size]
                batch = Batch(task.train.inputs[idx], task.train.labels[idx], task.task_id)
                loss, grad = _step_gradient(state, batch, cfg, anchors, buffer, replay_rng)
                if not (np.isfinite(loss) and np.all(np.isfinite(grad.values))):
                    raise TrainingDivergedError(pos, epoch, step)
                state.flat -= lr * grad.values
                step_losses.append(loss)
            epoch_losses.append(float(np.mean(step_losses)))
        if cfg.method == "ewc":
            fisher = ewc_fisher_diag(state, task, cfg.ewc_fisher_samples, rng.derive(f"task{pos}/fisher"))
            anchors.append(EwcAnchor(state.get_flat(), fisher))
        if cfg.method in ("er", "agem"):
            er_update(buffer, task, rng.derive(f"task{pos}/store"))
        row = [
            accuracy(state, seen.test.inputs, seen.test.labels, seen.task_id)
            for seen in stream.tasks[: pos + 1]
        ]
        scores.append_row(row)
        loss_curves.append(epoch_losses)
        snapshots.append(state.get_flat())
        buffer_sizes.append(buffer.size)
    return TrainLog([t.task_id for t in stream.tasks], scores, loss_curves, snapshots, buffer_sizes)


def warm_start(
    state: ModelState,
    corpus: WarmStartCorpus,
    epochs: int,
    lr: float,
    rng: RngStream,
    batch_size: int = 10,
) -> ModelState:
    """Pre-train the trunk on the pooled corpus through a temporary head.

    The temporary head is discarded afterwards; the returned model keeps the
    trained trunk and the original (untouched) task heads. Zero epochs return
    an identical copy.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return state.copy()
    spec = state.spec
    temp_task = max(t for t, _ in spec.heads) + 1
    wide_spec = MlpSpec(
        input_dim=spec.input_dim,
        hidden_dims=spec.hidden_dims,
        heads=spec.heads + ((temp_task, corpus.class_count),),
        activation=spec.activation,
    )
    wide = init_model(wide_spec, rng.derive("head-init"))
    for name, view in state.params.items():
        wide.params[name][...] = view
    n = corpus.inputs.shape[0]
    shuffle_rng = rng.derive("shuffle")
    for _ in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = Batch(corpus.inputs[idx], corpus.labels[idx], temp_task)
            loss, grad = loss_and_grad(wide, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(0, 0, start // batch_size)
            wide.flat -= lr * grad.values
    out = state.copy()
    for i in range(len(spec.hidden_dims)):
        out.params[f"trunk.{i}.W"][...] = wide.params[f"trunk.{i}.W"]
        out.params[f"trunk.{i}.b"][...] = wide.params[f"trunk.{i}.b"]
    return out
