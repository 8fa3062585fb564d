"""Triplet sampling, the triplet ranking objective and the SGD training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .pyramid import HashNet
from .tensor import Tensor

log = logging.getLogger(__name__)

TRACE_HEADER = ["epoch", "iter", "loss_vertical", "loss_consensus", "loss_combined", "lr"]


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int

    def check(self, labels: Sequence[int]) -> None:
        a, p, n = self.anchor, self.positive, self.negative
        if len({a, p, n}) != 3 or labels[a] != labels[p] or labels[a] == labels[n]:
            raise ContractError(f"invalid triplet {self} for labels {labels[a]}, {labels[p]}, {labels[n]}")


SCHEDULE_UNITS = ("epoch", "iteration")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings. ``margin=None`` means q / 8.

    lr, margin and triplets_per_anchor are desk-scale defaults tuned on the
    synthetic data; ``PAPER_PROFILE`` holds the published optimizer settings.
    """

    margin: float | None = None
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0005
    step_size: int = 100
    epochs: int = 200
    batch_size: int = 32
    triplets_per_anchor: int = 4
    seed: int = 0
    # "iteration" reads epochs and step_size as optimizer steps instead
    schedule_unit: str = "epoch"

    def __post_init__(self):
        for f in ("lr", "step_size", "epochs", "batch_size", "triplets_per_anchor"):
            value = getattr(self, f)
            if value < 0 or (f != "lr" and value == 0):
                raise ConfigError(f"{f} must be positive, got {value}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.schedule_unit not in SCHEDULE_UNITS:
            raise ConfigError(f"schedule_unit must be one of {SCHEDULE_UNITS}, got {self.schedule_unit!r}")
        if self.margin is not None and self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")

    def margin_for(self, q: int) -> float:
        return q / 8 if self.margin is None else float(self.margin)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


PAPER_PROFILE = TrainConfig(lr=0.001, momentum=0.9, weight_decay=0.0005, step_size=1800, epochs=4000, batch_size=100)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    epoch: int = 0
    lr: float = 0.0


def lr_at(cfg: TrainConfig, epoch: int, iteration: int = 0) -> float:
    """Step schedule: divide the base rate by 10 every ``step_size`` epochs (or iterations)."""
    count = iteration if cfg.schedule_unit == "iteration" else epoch
    return cfg.lr * 0.1 ** (count // cfg.step_size)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay folded into the gradient. Updates in place."""
    state.lr = lr_at(cfg, state.epoch, state.iteration)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        step = g + cfg.weight_decay * p.data
        vel = state.velocity.get(name)
        vel = step if vel is None else cfg.momentum * vel + step
        state.velocity[name] = vel
        p.data = p.data - state.lr * vel
    state.iteration += 1


# ---------------------------------------------------------------- losses


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    d = T.sub(a, b)
    return T.sum(T.mul(d, d), axis=-1)


def triplet_loss(v_i: Tensor, v_j: Tensor, v_k: Tensor, margin: float) -> Tensor:
    """Hinge ``max(0, margin + |v_i - v_j|^2 - |v_i - v_k|^2)``.

    Works on single codes (q,) giving a scalar, or on stacked codes (M, q)
    giving one loss per row.
    """
    v_i, v_j, v_k = T.as_tensor(v_i), T.as_tensor(v_j), T.as_tensor(v_k)
    if not (v_i.shape == v_j.shape == v_k.shape):
        raise DimensionError(f"triplet codes differ in shape: {v_i.shape}, {v_j.shape}, {v_k.shape}")
    return T.relu(T.add_scalar(T.sub(_sq_dist(v_i, v_j), _sq_dist(v_i, v_k)), margin))


@dataclass
class LossTerms:
    combined: Tensor
    vertical: float
    consensus: float


def combined_loss(v: Tensor, v_c: Tensor, triplets, margin: float) -> LossTerms:
    """Mean over triplets of the vertical plus consensus triplet losses.

    ``v`` and ``v_c`` hold one code per batch item (N, q); ``triplets`` is a
    sequence of :class:`Triplet` or an (M, 3) index array into the batch.
    """
    idx = triplet_array(triplets)
    if len(idx) == 0:
        raise ContractError("combined_loss needs at least one triplet")
    m = len(idx)
    lv = triplet_loss(T.take_rows(v, idx[:, 0]), T.take_rows(v, idx[:, 1]), T.take_rows(v, idx[:, 2]), margin)
    lc = triplet_loss(T.take_rows(v_c, idx[:, 0]), T.take_rows(v_c, idx[:, 1]), T.take_rows(v_c, idx[:, 2]), margin)
    total = T.scale(T.sum(T.add(lv, lc)), 1.0 / m)
    return LossTerms(total, float(lv.data.sum()) / m, float(lc.data.sum()) / m)


# ---------------------------------------------------------------- sampling


def triplet_array(triplets) -> np.ndarray:
    if isinstance(triplets, np.ndarray):
        return triplets.astype(np.int64).reshape(-1, 3)
    return np.array([(t.anchor, t.positive, t.negative) for t in triplets], dtype=np.int64).reshape(-1, 3)


def sample_triplets(labels: Sequence[int], triplets_per_anchor: int, rng: np.random.Generator) -> list[Triplet]:
    """Up to ``triplets_per_anchor`` triplets per anchor, indices into ``labels``.

    Positives are drawn without replacement from the anchor's class (so an
    anchor with one classmate yields one triplet); each negative is drawn
    uniformly from the other classes.
    """
    labels = np.asarray(labels)
    out: list[Triplet] = []
    for a in range(len(labels)):
        pos = np.flatnonzero(labels == labels[a])
        pos = pos[pos != a]
        neg = np.flatnonzero(labels != labels[a])
        if len(pos) == 0 or len(neg) == 0:
            continue
        chosen = rng.choice(pos, size=min(triplets_per_anchor, len(pos)), replace=False)
        for p in chosen:
            out.append(Triplet(a, int(p), int(rng.choice(neg))))
    return out


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of class-balanced batches: ceil(batch/classes) items per class each.

    At least two items per class are drawn so every batch can form triplets.
    When the batch cannot hold two of every class, each batch takes a
    rotating subset of classes instead.
    """
    classes = np.unique(labels)
    per_class = max(2, math.ceil(batch_size / len(classes)))
    k = min(len(classes), max(2, batch_size // per_class))
    n_batches = math.ceil(len(labels) / batch_size)
    perms = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    order = rng.permutation(len(classes)) if k < len(classes) else np.arange(len(classes))
    batches = []
    for b in range(n_batches):
        chosen = order[np.arange(b * k, (b + 1) * k) % len(classes)] if k < len(classes) else order
        parts = [perms[c][np.arange(b * per_class, (b + 1) * per_class) % len(perms[c])] for c in chosen]
        batches.append(np.concatenate(parts))
    return batches


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    state: OptimizerState = field(default_factory=OptimizerState)
    skipped_batches: int = 0


def train(
    images: np.ndarray,
    labels: Sequence[int],
    net: HashNet,
    cfg: TrainConfig,
    *,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minimize the combined triplet objective over ``images`` (N, 3, S, S).

    Parameters of ``net`` are updated in place. All randomness comes from
    ``cfg.seed``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ConfigError("training needs at least two classes")
    if len(images) != len(labels):
        raise DimensionError(f"{len(images)} images but {len(labels)} labels")
    rng = np.random.default_rng(cfg.seed)
    margin = cfg.margin_for(net.q)
    params = net.parameters()
    result = TrainResult()
    state = result.state
    by_iteration = cfg.schedule_unit == "iteration"
    epoch = 0
    while (state.iteration if by_iteration else epoch) < cfg.epochs:
        state.epoch = epoch
        epoch_total, epoch_batches = 0.0, 0
        for batch in balanced_batches(labels, cfg.batch_size, rng):
            if by_iteration and state.iteration >= cfg.epochs:
                break
            triplets = sample_triplets(labels[batch], cfg.triplets_per_anchor, rng)
            if not triplets:
                result.skipped_batches += 1
                log.warning("epoch %d: batch without a valid triplet skipped", epoch)
                continue
            acts = net.forward(images[batch])
            terms = combined_loss(acts.v, acts.v_c, triplets, margin)
            loss = terms.combined
            for p in params.values():
                p.grad = None
            T.backward(loss)
            value = loss.item()
            if not math.isfinite(value) or any(not np.all(np.isfinite(p.grad)) for p in params.values() if p.grad is not None):
                raise NumericError(f"non-finite loss or gradient at epoch {epoch}, iteration {state.iteration}")
            sgd_step(params, {n: p.grad for n, p in params.items()}, state, cfg)
            result.trace.append(
                {
                    "epoch": epoch,
                    "iter": state.iteration,
                    "loss_vertical": terms.vertical,
                    "loss_consensus": terms.consensus,
                    "loss_combined": value,
                    "lr": state.lr,
                }
            )
            epoch_total += value
            epoch_batches += 1
        if by_iteration and not epoch_batches:
            raise ConfigError("no batch in an epoch formed a triplet; iteration schedule cannot progress")
        mean_loss = epoch_total / epoch_batches if epoch_batches else float("nan")
        result.epoch_losses.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        epoch += 1
    for p in params.values():
        p.grad = None
    return result


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_HEADER)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
