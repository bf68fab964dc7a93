"""Adam, the step learning-rate schedule, variant-aware losses and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import ops
from .data.dataset import PairSampler
from .errors import DataError, GraphError, NumericAbort
from .model import GRN, VariantConfig
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss,test_loss,top1,top5,lr,seconds"


def lr_at_epoch(base_lr: float, period: int, epoch: int) -> float:
    """Learning rate halved every ``period`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * 0.5 ** (epoch // period)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, then clear the gradients."""
    for name, p in params.items():
        if p.grad is None:
            raise GraphError(f"parameter {name} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    inv_sqrt_bc2 = 1.0 / math.sqrt(1.0 - b2 ** state.step)
    scratch = np.empty(max(p.data.size for p in params.values()))
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        tmp = scratch[:g.size].reshape(g.shape)
        # m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
        np.multiply(g, 1.0 - b1, out=tmp)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p -= lr * m_hat / (sqrt(v_hat) + eps)
        np.sqrt(v, out=tmp)
        tmp *= inv_sqrt_bc2
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / bc1
        p.data -= tmp
        p.grad = None


def net1_total_loss(loss_g, loss_l, k: float):
    """Convex combination ``k * loss_g + (1 - k) * loss_l``."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k}")
    return k * loss_g + (1.0 - k) * loss_l


def batch_loss(model: GRN, out, labels: np.ndarray) -> Tensor:
    if model.config.variant == "net1":
        logits_g, logits_l = out
        return net1_total_loss(ops.softmax_cross_entropy(logits_g, labels),
                               ops.softmax_cross_entropy(logits_l, labels), model.config.k)
    return ops.softmax_cross_entropy(out, labels)


def class_scores(model: GRN, out) -> np.ndarray:
    """Scores used for ranking classes; Net1 blends the two heads' probabilities by k."""
    if model.config.variant != "net1":
        return out.data
    k = model.config.k
    return k * np.exp(ops.log_softmax_rows(out[0].data)) + (1 - k) * np.exp(ops.log_softmax_rows(out[1].data))


def topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label is among the k best scores (ties favour the lower class index)."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float = float("nan")
    test_loss: float = float("nan")
    top1: float = float("nan")
    top5: float = float("nan")
    lr: float = float("nan")
    seconds: float = 0.0

    def csv_line(self) -> str:
        return (f"{self.epoch},{self.train_loss:.8g},{self.test_loss:.8g},{self.top1:.8g},"
                f"{self.top5:.8g},{self.lr:.8g},{self.seconds:.3f}")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 1e-3
    lr_half_period: int = 30
    seed: int = 0
    model: VariantConfig = field(default_factory=VariantConfig)
    data: str = ""
    # round the state to checkpoint precision after every epoch, so that a
    # run resumed from any epoch's checkpoint replays the uninterrupted run
    snap_state: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = VariantConfig.from_dict(self.model)
        for name in ("epochs", "batch_size", "lr_half_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")

    def to_dict(self) -> dict:
        return asdict(self)


def snap_state(model: GRN, state: AdamState) -> None:
    """Round parameters, batch-norm buffers and Adam moments to float32 values."""
    for arr in model.state_dict().values():
        arr[...] = arr.astype(np.float32)
    for moments in (state.m, state.v):
        for arr in moments.values():
            arr[...] = arr.astype(np.float32)


def train_epoch(model: GRN, sampler: PairSampler, state: AdamState, epoch: int, lr: float, seed: int) -> float:
    """One pass over the sampler; returns the sample-weighted mean training loss."""
    params = dict(model.named_parameters())
    total, count = 0.0, 0
    for b, (pages, words, labels) in enumerate(sampler.batches(epoch)):
        rng = np.random.default_rng([seed, epoch, b])
        out = model.forward(Tensor(pages), Tensor(words), "train", rng)
        loss = batch_loss(model, out, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericAbort(f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr:g}")
        backward(loss)
        adam_step(params, state, lr)
        total += value * len(labels)
        count += len(labels)
    return total / max(count, 1)


def evaluate(model: GRN, sampler: PairSampler, passes: int = 1) -> tuple[float, float, float]:
    """Mean loss, top-1 and top-5 in eval mode over ``passes`` deterministic pairings."""
    if sampler.data.size == 0:
        raise DataError("evaluation split is empty")
    losses, hits1, hits5 = [], [], []
    with no_grad():
        for e in range(passes):
            for pages, words, labels in sampler.batches(e):
                out = model.forward(Tensor(pages), Tensor(words), "eval")
                losses.append(float(batch_loss(model, out, labels).data) * len(labels))
                scores = class_scores(model, out)
                hits1.append(topk_hits(scores, labels, 1))
                hits5.append(topk_hits(scores, labels, 5))
    h1, h5 = np.concatenate(hits1), np.concatenate(hits5)
    return sum(losses) / h1.size, float(h1.mean()), float(h5.mean())


def fit(
    model: GRN,
    config: TrainConfig,
    train_sampler: PairSampler,
    test_sampler: Optional[PairSampler] = None,
    state: Optional[AdamState] = None,
    start_epoch: int = 0,
    metrics_path: Union[str, Path, None] = None,
    on_epoch: Optional[Callable[[EpochMetrics], bool]] = None,
    eval_passes: int = 1,
    provenance: Optional[dict] = None,
) -> tuple[AdamState, list[EpochMetrics]]:
    """Train from ``start_epoch`` up to ``config.epochs``.

    Metrics lines are appended to ``metrics_path`` (written with its header if
    new) under a ``# config:`` line holding ``config`` and ``provenance``.
    ``on_epoch`` may return True to stop early.
    """
    state = state or AdamState()
    history = []
    fh = None
    if metrics_path is not None:
        path = Path(metrics_path)
        fresh = not path.exists() or start_epoch == 0
        fh = open(path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            fh.write(metrics_header(config, provenance) + "\n")
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            lr = lr_at_epoch(config.base_lr, config.lr_half_period, epoch)
            m = EpochMetrics(epoch=epoch, lr=lr)
            m.train_loss = train_epoch(model, train_sampler, state, epoch, lr, config.seed)
            if config.snap_state:
                snap_state(model, state)
            if test_sampler is not None and test_sampler.data.size:
                m.test_loss, m.top1, m.top5 = evaluate(model, test_sampler, eval_passes)
            m.seconds = time.perf_counter() - t0
            history.append(m)
            log.info("epoch %d train %.4f test %.4f top1 %.3f lr %.2e (%.1fs)",
                     epoch, m.train_loss, m.test_loss, m.top1, lr, m.seconds)
            if fh is not None:
                fh.write(m.csv_line() + "\n")
                fh.flush()
            if on_epoch is not None and on_epoch(m):
                break
    finally:
        if fh is not None:
            fh.close()
    return state, history


def metrics_header(config: TrainConfig, provenance: Optional[dict] = None) -> str:
    doc = {"train": config.to_dict()}
    if provenance:
        doc["run"] = provenance
    return "# config: " + json.dumps(doc, sort_keys=True) + "\n" + METRICS_HEADER


def read_metrics(path: Union[str, Path]) -> list[EpochMetrics]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line == METRICS_HEADER:
            continue
        f = line.split(",")
        rows.append(EpochMetrics(int(f[0]), *map(float, f[1:])))
    return rows
