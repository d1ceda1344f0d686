"""Multi-head MLP: shared trunk, one linear head per task, analytic gradients.

Evaluation is a pure function of (parameters, inputs, task id). The trunk is
shared across tasks; selecting a task routes the trunk output through that
task's head only, so gradients for every other head are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import jsonio
from .numcore import Layout, ParamVector, RngStream, flatten, require_finite

_ACTIVATIONS = ("relu", "tanh")


class MissingHeadError(KeyError):
    """Raised when a batch references a task id the model has no head for."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description. ``heads`` maps task id to that task's class count."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    heads: tuple[tuple[int, int], ...]  # ordered (task_id, class_count) pairs
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        object.__setattr__(self, "heads", tuple((int(t), int(c)) for t, c in self.heads))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if not self.heads:
            raise ValueError("at least one head is required")
        task_ids = [t for t, _ in self.heads]
        if len(set(task_ids)) != len(task_ids):
            raise ValueError("head task ids must be unique")
        if any(c < 2 for _, c in self.heads):
            raise ValueError("each head needs at least two classes")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def trunk_dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.hidden_dims

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def head_classes(self, task: int) -> int:
        for t, c in self.heads:
            if t == task:
                return c
        raise MissingHeadError(f"model has no head for task {task}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        dims = self.trunk_dims
        for i in range(len(self.hidden_dims)):
            shapes[f"trunk.{i}.W"] = (dims[i], dims[i + 1])
            shapes[f"trunk.{i}.b"] = (dims[i + 1],)
        for task, classes in self.heads:
            shapes[f"head.{task}.W"] = (self.feature_dim, classes)
            shapes[f"head.{task}.b"] = (classes,)
        return shapes


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    task: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be (n, d), labels must be (n,)")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels disagree on batch size")
        if self.inputs.shape[0] == 0:
            raise ValueError("batch must be non-empty")
        require_finite(self.inputs, "batch inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]


class ModelState:
    """Owns one flat float64 parameter buffer; named arrays are views into it.

    In-place updates of ``flat`` (the SGD step) keep every view current. The
    view dict and the flatten/unflatten layout use the same sorted-name order,
    so round-tripping through ParamVector is exact.
    """

    def __init__(self, spec: MlpSpec, flat: np.ndarray):
        self.spec = spec
        shapes = spec.param_shapes()
        self.layout: Layout = tuple((name, shapes[name]) for name in sorted(shapes))
        expected = sum(int(np.prod(s, dtype=np.int64)) for _, s in self.layout)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (expected,):
            raise ValueError(f"flat buffer must have shape ({expected},), got {flat.shape}")
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape, dtype=np.int64))
            self._views[name] = self.flat[offset : offset + n].reshape(shape)
            offset += n

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._views

    @property
    def num_params(self) -> int:
        return self.flat.size

    def get_flat(self) -> ParamVector:
        return ParamVector(self.flat.copy(), self.layout)

    def set_flat(self, vec: ParamVector | np.ndarray) -> None:
        values = vec.values if isinstance(vec, ParamVector) else np.asarray(vec, dtype=np.float64)
        if values.shape != self.flat.shape:
            raise ValueError("parameter vector has wrong length for this model")
        self.flat[:] = values

    def copy(self) -> "ModelState":
        return ModelState(self.spec, self.flat.copy())


def init_model(spec: MlpSpec, rng: RngStream) -> ModelState:
    """Glorot-uniform weights, zero biases. Deterministic given (spec, rng seed).

    Draw order is structural (trunk layers in depth order, then heads in spec
    order), independent of parameter-name sorting.
    """
    params: dict[str, np.ndarray] = {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}
    dims = spec.trunk_dims
    for i in range(len(spec.hidden_dims)):
        params[f"trunk.{i}.W"] = _glorot(rng, dims[i], dims[i + 1])
    for task, classes in spec.heads:
        params[f"head.{task}.W"] = _glorot(rng, spec.feature_dim, classes)
    state = ModelState(spec, np.zeros(sum(v.size for v in params.values())))
    state.set_flat(flatten(params))
    return state


def _glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    # relu subgradient at 0 is taken as 0
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _forward_params(params: dict[str, np.ndarray], spec: MlpSpec, inputs: np.ndarray, task: int):
    spec.head_classes(task)  # raises MissingHeadError for unknown tasks
    if inputs.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have {inputs.shape[1]} features, model expects {spec.input_dim}")
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = [inputs]
    h = inputs
    for i in range(len(spec.hidden_dims)):
        z = h @ params[f"trunk.{i}.W"] + params[f"trunk.{i}.b"]
        h = _activate(z, spec.activation)
        pre.append(z)
        acts.append(h)
    logits = h @ params[f"head.{task}.W"] + params[f"head.{task}.b"]
    return logits, pre, acts


def forward(state: ModelState, batch: Batch):
    """Logits for the batch's task plus cached activations for backprop."""
    return _forward_params(state.params, state.spec, batch.inputs, batch.task)


def _mean_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    n = logits.shape[0]
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError("labels outside the task's class range")
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    sumexp = np.exp(shifted).sum(axis=1, keepdims=True)
    # log-sum-exp guard: loss stays finite and positive even for huge margins
    log_probs = shifted - np.log(sumexp)
    loss = float(-log_probs[np.arange(n), labels].mean())
    probs = np.exp(log_probs)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def loss_and_grad(state: ModelState, batch: Batch) -> tuple[float, ParamVector]:
    """Mean cross-entropy and its analytic gradient over the full layout.

    Heads other than the batch's task receive an exactly-zero gradient block.
    """
    spec = state.spec
    params = state.params
    logits, pre, acts = forward(state, batch)
    loss, dlogits = _mean_cross_entropy(logits, batch.labels)

    grads = {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}
    head_w = f"head.{batch.task}.W"
    grads[head_w] = acts[-1].T @ dlogits
    grads[f"head.{batch.task}.b"] = dlogits.sum(axis=0)
    delta = dlogits @ params[head_w].T
    for i in reversed(range(len(spec.hidden_dims))):
        delta = delta * _activate_grad(pre[i], acts[i + 1], spec.activation)
        grads[f"trunk.{i}.W"] = acts[i].T @ delta
        grads[f"trunk.{i}.b"] = delta.sum(axis=0)
        delta = delta @ params[f"trunk.{i}.W"].T
    return loss, flatten(grads)


def loss_at(state: ModelState, w: ParamVector, inputs: np.ndarray, labels: np.ndarray, task: int) -> float:
    """Mean loss at an arbitrary parameter vector. Never mutates ``state``."""
    if w.layout != state.layout:
        raise ValueError("parameter vector layout does not match the model")
    params = _views_of(w.values, state.layout)
    logits, _, _ = _forward_params(params, state.spec, np.asarray(inputs, dtype=np.float64), task)
    loss, _ = _mean_cross_entropy(logits, np.asarray(labels, dtype=np.int64))
    return loss


def _views_of(values: np.ndarray, layout: Layout) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = values[offset : offset + n].reshape(shape)
        offset += n
    return out


def predict_logits(state: ModelState, inputs: np.ndarray, task: int) -> np.ndarray:
    logits, _, _ = _forward_params(state.params, state.spec, np.asarray(inputs, dtype=np.float64), task)
    return logits


def predict_proba(state: ModelState, inputs: np.ndarray, task: int) -> np.ndarray:
    logits = predict_logits(state, inputs, task)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(state: ModelState, inputs: np.ndarray, labels: np.ndarray, task: int) -> float:
    """Fraction of argmax hits; ties resolve to the lowest class index."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot score an empty evaluation set")
    preds = np.argmax(predict_logits(state, inputs, task), axis=1)
    return float(np.mean(preds == labels))


def make_loss_at(state: ModelState, inputs: np.ndarray, labels: np.ndarray, task: int):
    """Closure w -> loss for landscape probes; evaluation never touches ``state``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return lambda w: loss_at(state, w, inputs, labels, task)


def make_loss_and_grad_at(state: ModelState, inputs: np.ndarray, labels: np.ndarray, task: int):
    """Closure w -> (loss, grad) evaluated at an arbitrary parameter vector."""
    batch = Batch(inputs, labels, task)
    spec = state.spec

    def eval_at(w: ParamVector) -> tuple[float, ParamVector]:
        scratch = ModelState(spec, np.asarray(w.values, dtype=np.float64).copy())
        return loss_and_grad(scratch, batch)

    return eval_at


def make_grad_at(state: ModelState, inputs: np.ndarray, labels: np.ndarray, task: int):
    lg = make_loss_and_grad_at(state, inputs, labels, task)
    return lambda w: lg(w)[1]


def save_checkpoint(state: ModelState, path) -> None:
    """JSON checkpoint with bit-exact hex encoding of every parameter."""
    doc = {
        "format": "forgetlab-checkpoint",
        "version": 1,
        "spec": {
            "input_dim": state.spec.input_dim,
            "hidden_dims": list(state.spec.hidden_dims),
            "heads": [[t, c] for t, c in state.spec.heads],
            "activation": state.spec.activation,
        },
        "layout": [[name, list(shape)] for name, shape in state.layout],
        "values_hex": [jsonio.float_to_hex(v) for v in state.flat],
    }
    jsonio.write_file(path, doc)


def load_checkpoint(path) -> ModelState:
    doc = jsonio.read_file(path)
    if doc.get("format") != "forgetlab-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    s = doc["spec"]
    spec = MlpSpec(
        input_dim=int(s["input_dim"]),
        hidden_dims=tuple(s["hidden_dims"]),
        heads=tuple((int(t), int(c)) for t, c in s["heads"]),
        activation=s["activation"],
    )
    values = np.array([jsonio.float_from_hex(h) for h in doc["values_hex"]], dtype=np.float64)
    state = ModelState(spec, values)
    stored = tuple((name, tuple(shape)) for name, shape in doc["layout"])
    if stored != state.layout:
        raise ValueError("checkpoint layout does not match its spec")
    return state
