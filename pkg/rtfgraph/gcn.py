"""
Message-passing network over the RTF graphs.

A message is a three-layer MLP applied to the concatenation
[center; neighbor] (2d -> 2d -> 2d -> d); the node output is the mean of
the messages from its in-neighbours. The same weights serve every
microphone graph. Training uses Adam with a linear warmup / linear decay
schedule, and checkpoints are tensor containers.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from rtfgraph import autodiff as ad
from rtfgraph.container import read_container, write_container
from rtfgraph.errors import CheckpointError, ShapeError, TrainingDivergedError
from rtfgraph.manifold_graph import QueryAttachment
from rtfgraph.signal_core import derive_rng

logger = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")
CHECKPOINT_SCHEMA = 1
REQUIRED_META = ("schema_version", "d", "K", "M", "loss", "seed", "epoch")

LossName = Literal["sbf", "sisdr1", "sisdr2", "stoi", "feature_mse"]


class TrainConfig(BaseModel):
    """Optimizer, schedule and regularization settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(default=1e-4, gt=0.0)
    warmup_ratio: float = Field(default=0.1, ge=0.0, le=1.0)
    epochs: int = Field(default=100, ge=1)
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0)
    seed: int = 0
    loss: LossName = "sisdr2"
    batch_size: int = Field(default=1, ge=1)


@dataclass
class GcnParams:
    """Weights stored as (in, out) matrices."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        d = self.b3.shape[0]
        expected = {"W1": (2 * d, 2 * d), "b1": (2 * d,), "W2": (2 * d, 2 * d), "b2": (2 * d,),
                    "W3": (2 * d, d), "b3": (d,)}
        for name, shape in expected.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise ShapeError(f"{name} has shape {value.shape}, expected {shape} for d={d}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, value)

    @property
    def d(self) -> int:
        return self.b3.shape[0]

    @classmethod
    def zeros(cls, d: int) -> "GcnParams":
        return cls(np.zeros((2 * d, 2 * d)), np.zeros(2 * d), np.zeros((2 * d, 2 * d)), np.zeros(2 * d),
                   np.zeros((2 * d, d)), np.zeros(d))

    @classmethod
    def init(cls, d: int, seed: int) -> "GcnParams":
        """He-uniform weights, zero biases."""
        rng = derive_rng(seed, "init")

        def he(fan_in, fan_out):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        return cls(he(2 * d, 2 * d), np.zeros(2 * d), he(2 * d, 2 * d), np.zeros(2 * d), he(2 * d, d), np.zeros(d))

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "GcnParams":
        return GcnParams(**{name: value.copy() for name, value in self.as_dict().items()})


def _sorted_neighbors(center: np.ndarray, neighbors: np.ndarray, ids: Optional[np.ndarray]) -> np.ndarray:
    if ids is not None:
        order = np.argsort(ids, axis=-1, kind="stable")
        return np.take_along_axis(neighbors, order[..., None], axis=-2)
    # no ids: canonical row order by lexicographic value
    flat = neighbors.reshape(-1, neighbors.shape[-2], neighbors.shape[-1])
    out = np.empty_like(flat)
    for index, block in enumerate(flat):
        out[index] = block[np.lexsort(block.T[::-1])]
    return out.reshape(neighbors.shape)


def forward_on_tape(tape: ad.Tape, nodes: Dict[str, ad.Node], center: np.ndarray, neighbors: np.ndarray,
                    neighbor_ids: Optional[np.ndarray] = None, dropout_p: float = 0.0,
                    rng: Optional[np.random.Generator] = None, training: bool = False) -> ad.Node:
    """Mean of messages for centers (..., d) and neighbours (..., K, d)."""
    center = np.asarray(center, dtype=np.float64)
    neighbors = np.asarray(neighbors, dtype=np.float64)
    d = nodes["b3"].shape[0]
    if center.shape[-1] != d or neighbors.shape[-1] != d or neighbors.shape[:-2] != center.shape[:-1]:
        raise ShapeError(f"Center {center.shape} / neighbors {neighbors.shape} do not match d={d}")
    if neighbors.shape[-2] == 0:
        raise ValueError("Node has an empty neighbourhood")
    neighbors = _sorted_neighbors(center, neighbors, neighbor_ids)
    pairs = np.concatenate([np.broadcast_to(center[..., None, :], neighbors.shape), neighbors], axis=-1)

    x = tape.constant(pairs)
    h = ad.dropout(ad.relu(ad.linear(x, nodes["W1"], nodes["b1"])), dropout_p, rng, training)
    h = ad.dropout(ad.relu(ad.linear(h, nodes["W2"], nodes["b2"])), dropout_p, rng, training)
    messages = ad.linear(h, nodes["W3"], nodes["b3"])
    return ad.mean(messages, axis=-2)


def param_nodes(tape: ad.Tape, params: GcnParams, trainable: bool = True) -> Dict[str, ad.Node]:
    make = tape.variable if trainable else tape.constant
    return {name: make(value) for name, value in params.as_dict().items()}


def message(params: GcnParams, center, neighbor) -> np.ndarray:
    """Single edge message m = W3 relu(W2 relu(W1 [c; n] + b1) + b2) + b3 (evaluation mode)."""
    tape = ad.Tape()
    out = forward_on_tape(tape, param_nodes(tape, params, False), np.asarray(center),
                          np.asarray(neighbor, dtype=np.float64)[None, :])
    return out.value


def gcn_forward(params: GcnParams, center, neighbors, neighbor_ids=None) -> np.ndarray:
    """Mean-aggregated message for one node; bitwise invariant to neighbour order."""
    neighbors = np.asarray(neighbors, dtype=np.float64)
    if neighbors.ndim != 2 or neighbors.shape[0] == 0:
        raise ValueError(f"Need a non-empty (K, d) neighbour matrix, got shape {neighbors.shape}")
    tape = ad.Tape()
    ids = None if neighbor_ids is None else np.asarray(neighbor_ids)
    return forward_on_tape(tape, param_nodes(tape, params, False), np.asarray(center), neighbors, ids).value


def infer(params: GcnParams, query: QueryAttachment) -> np.ndarray:
    """Refined features (M - 1, d) for an attached query, dropout disabled."""
    if query.center.shape[-1] != params.d:
        raise CheckpointError(f"Network expects d={params.d}, query has d={query.center.shape[-1]}")
    tape = ad.Tape()
    out = forward_on_tape(tape, param_nodes(tape, params, False), query.center, query.neighbor_features,
                          query.neighbor_ids)
    return out.value


class LinearWarmupSchedule:
    """Linear ramp 0 -> peak over the warmup steps, then linear decay to 0.

    Any positive warmup ratio gives at least one warmup step, so step 0 runs at lr 0.
    """

    def __init__(self, peak_lr: float, total_steps: int, warmup_ratio: float):
        self.peak_lr = peak_lr
        self.total_steps = max(1, total_steps)
        self.warmup_steps = max(1, math.ceil(round(warmup_ratio * self.total_steps, 9))) if warmup_ratio > 0 else 0

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        decay = self.total_steps - self.warmup_steps
        if decay <= 0:
            return self.peak_lr
        return self.peak_lr * max(0.0, (self.total_steps - step) / decay)


class Adam:
    """Adam moments for a GcnParams pytree."""

    def __init__(self, params: GcnParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(value) for name, value in params.as_dict().items()}
        self.v = {name: np.zeros_like(value) for name, value in params.as_dict().items()}

    def step(self, params: GcnParams, grads: Dict[str, np.ndarray], lr: float):
        self.step_count += 1
        t = self.step_count
        for name in PARAM_NAMES:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            setattr(params, name, getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam_m_{name}": value for name, value in self.m.items()}
        arrays.update({f"adam_v_{name}": value for name, value in self.v.items()})
        return arrays

    def load_state(self, arrays: Dict[str, np.ndarray], step_count: int):
        """Restore moments saved by state().

        Raises:
            CheckpointError: If a moment is missing or has the wrong shape
        """
        for name in PARAM_NAMES:
            for key, moments in ((f"adam_m_{name}", self.m), (f"adam_v_{name}", self.v)):
                if key not in arrays or arrays[key].shape != moments[name].shape:
                    raise CheckpointError(f"Optimizer state {key} is missing or misshaped")
                moments[name] = np.asarray(arrays[key], dtype=np.float64).copy()
        self.step_count = step_count


@dataclass
class TrainingExample:
    """One leave-one-out query plus whatever the objective needs."""

    name: str
    query: QueryAttachment
    payload: Any = None


LossFn = Callable[[ad.Tape, ad.Node, Any], ad.Node]


@dataclass
class TrainResult:
    last: GcnParams
    best: GcnParams
    best_epoch: int
    log: pd.DataFrame
    optimizer: Adam
    schedule_step: int = 0
    history: List[dict] = field(default_factory=list)


def example_loss(params: GcnParams, example: TrainingExample, loss_fn: LossFn, dropout_p: float = 0.0,
                 rng: Optional[np.random.Generator] = None, training: bool = False):
    """Loss value and parameter gradients for one example."""
    tape = ad.Tape()
    nodes = param_nodes(tape, params)
    out = forward_on_tape(tape, nodes, example.query.center, example.query.neighbor_features,
                          example.query.neighbor_ids, dropout_p, rng, training)
    loss = loss_fn(tape, out, example.payload)
    value = float(loss.value)
    if not np.isfinite(value):
        raise TrainingDivergedError(f"Loss became {value} on example {example.name}")
    tape.backward(loss)
    return value, {name: node.grad for name, node in nodes.items()}


def train(params: GcnParams, examples: Sequence[TrainingExample], loss_fn: LossFn, cfg: TrainConfig,
          validate: Optional[Callable[[GcnParams], float]] = None, progress: bool = True,
          resume: Optional["ResumeState"] = None,
          on_epoch: Optional[Callable[["ResumeState"], None]] = None) -> TrainResult:
    """Train on leave-one-out examples, one query per forward pass.

    Each optimizer step averages the gradients of batch_size examples. The
    learning rate follows LinearWarmupSchedule over all steps. After every
    epoch the validation callback (higher is better) is evaluated; without
    one the negative mean training loss is used.

    Args:
        resume: Progress of an interrupted run with the same configuration and
            examples; training continues at its next epoch
        on_epoch: Called with a snapshot of the progress after every epoch

    Raises:
        TrainingDivergedError: If a loss is NaN or infinite
        ValueError: If the resume state does not fit the examples
    """
    if not examples:
        raise ValueError("Training needs at least one example")
    steps_per_epoch = -(-len(examples) // cfg.batch_size)
    schedule = LinearWarmupSchedule(cfg.learning_rate, cfg.epochs * steps_per_epoch, cfg.warmup_ratio)

    if resume is None:
        params = params.copy()
        optimizer = Adam(params)
        step, first_epoch = 0, 0
        best, best_epoch, best_metric = params.copy(), 0, -np.inf
        rows = []
    else:
        if resume.step != resume.next_epoch * steps_per_epoch:
            raise ValueError(f"Resume state is at step {resume.step}, expected {resume.next_epoch * steps_per_epoch}"
                             f" after {resume.next_epoch} epochs of {len(examples)} examples")
        params = resume.params.copy()
        optimizer = resume.optimizer()
        step, first_epoch = resume.step, resume.next_epoch
        best, best_epoch, best_metric = resume.best.copy(), resume.best_epoch, resume.best_metric
        rows = [dict(row) for row in resume.history]
        logger.info(f"Resuming at epoch {first_epoch + 1}/{cfg.epochs}, step {step}")

    for epoch in tqdm(range(first_epoch, cfg.epochs), desc="epochs", disable=not progress):
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(examples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            accum = {name: np.zeros_like(value) for name, value in params.as_dict().items()}
            for index in batch:
                rng = derive_rng(cfg.seed, "dropout", step, int(index))
                value, grads = example_loss(params, examples[index], loss_fn, cfg.dropout_p, rng, training=True)
                losses.append(value)
                for name in PARAM_NAMES:
                    accum[name] += grads[name]
            for name in PARAM_NAMES:
                accum[name] /= len(batch)
            lr = schedule(step)
            optimizer.step(params, accum, lr)
            step += 1

        train_loss = float(np.mean(losses))
        metric = validate(params) if validate is not None else -train_loss
        if metric > best_metric:
            best, best_epoch, best_metric = params.copy(), epoch, metric
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_metric": float(metric), "lr": schedule(step)})
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: train loss {train_loss:.5f}, validation {metric:.4f}")
        if on_epoch is not None:
            on_epoch(ResumeState(params=params.copy(), optimizer_state=_copy_arrays(optimizer.state()), step=step,
                                 next_epoch=epoch + 1, best=best.copy(), best_epoch=best_epoch,
                                 best_metric=float(best_metric), history=[dict(row) for row in rows]))

    log = pd.DataFrame(rows, columns=["epoch", "train_loss", "val_metric", "lr"])
    return TrainResult(last=params, best=best, best_epoch=best_epoch, log=log, optimizer=optimizer,
                       schedule_step=step, history=rows)


@dataclass
class Checkpoint:
    params: GcnParams
    meta: dict
    optimizer_state: Dict[str, np.ndarray]


def save_checkpoint(path, params: GcnParams, meta: dict, optimizer: Optional[Adam] = None):
    """Write parameters, optional Adam state and metadata as a tensor container."""
    meta = dict(meta)
    meta["schema_version"] = CHECKPOINT_SCHEMA
    meta["d"] = params.d
    missing = [key for key in REQUIRED_META if key not in meta]
    if missing:
        raise CheckpointError(f"Checkpoint metadata lacks {missing}")
    arrays = params.as_dict()
    if optimizer is not None:
        arrays.update(optimizer.state())
        meta["adam_step"] = optimizer.step_count
    write_container(path, arrays, meta)
    logger.info(f"Saved checkpoint {path} (epoch {meta['epoch']}, loss {meta['loss']})")


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: On schema, metadata or shape mismatch
    """
    arrays, meta = read_container(path)
    missing = [key for key in REQUIRED_META if key not in meta]
    if missing:
        raise CheckpointError(f"Checkpoint {path} lacks metadata {missing}")
    if meta["schema_version"] != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"Checkpoint schema {meta['schema_version']} != {CHECKPOINT_SCHEMA}")
    try:
        params = GcnParams(**{name: arrays[name] for name in PARAM_NAMES})
    except (KeyError, ShapeError) as e:
        raise CheckpointError(f"Checkpoint {path} has invalid parameters: {e}") from e
    if params.d != meta["d"]:
        raise CheckpointError(f"Checkpoint declares d={meta['d']} but weights have d={params.d}")
    state = {name: value for name, value in arrays.items() if name.startswith("adam_")}
    return Checkpoint(params=params, meta=meta, optimizer_state=state)


def _copy_arrays(arrays: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: value.copy() for name, value in arrays.items()}


@dataclass
class ResumeState:
    """Training progress after a finished epoch."""

    params: GcnParams
    optimizer_state: Dict[str, np.ndarray]
    step: int
    next_epoch: int
    best: GcnParams
    best_epoch: int
    best_metric: float
    history: List[dict] = field(default_factory=list)

    def optimizer(self) -> Adam:
        optimizer = Adam(self.params)
        optimizer.load_state(self.optimizer_state, self.step)
        return optimizer

    def progress_meta(self) -> dict:
        """Checkpoint metadata for the last finished epoch."""
        return {"epoch": self.next_epoch - 1, "best_epoch": self.best_epoch, "best_metric": self.best_metric,
                "history": self.history}

    @classmethod
    def from_checkpoints(cls, last: Checkpoint, best: Checkpoint) -> "ResumeState":
        """Progress stored in a last checkpoint (with Adam state) and its best checkpoint.

        Raises:
            CheckpointError: If the checkpoints cannot be resumed from
        """
        meta = last.meta
        missing = [key for key in ("adam_step", "best_epoch", "best_metric", "history") if key not in meta]
        if missing or not last.optimizer_state:
            raise CheckpointError(f"Last checkpoint has no optimizer state or lacks metadata {missing}")
        if best.meta["epoch"] != meta["best_epoch"]:
            raise CheckpointError(f"Best checkpoint is from epoch {best.meta['epoch']},"
                                  f" the last checkpoint expects {meta['best_epoch']}")
        return cls(params=last.params, optimizer_state=last.optimizer_state, step=int(meta["adam_step"]),
                   next_epoch=int(meta["epoch"]) + 1, best=best.params, best_epoch=int(meta["best_epoch"]),
                   best_metric=float(meta["best_metric"]), history=[dict(row) for row in meta["history"]])
