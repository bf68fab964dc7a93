"""The two-branch network and its ablation variants.

A page tile feeds the global branch (plain ResNet-34 schedule) and a word
image feeds the local branch (residual attention schedule).  After a stage
tagged as a tap, the local activation ``L`` is replaced by ``(1 + G) * L``
with ``G`` the matching global activation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from . import ops
from .blocks import AttentionModule, BatchNorm, Conv, Module, ResidualUnit, pooled_size
from .errors import ShapeError
from .tensor import Tensor, gated

VARIANTS = ("grn", "net1", "net2", "noattention")
STAGE_WIDTHS = (64, 128, 256, 512)
PLAIN_UNITS = (3, 4, 6, 3)
MIN_INPUT_SIZE = 32


@dataclass
class VariantConfig:
    variant: str = "grn"
    num_classes: int = 310
    k: float = 0.5
    input_size: int = 256
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError(f"k must lie in [0, 1], got {self.k}")
        if self.input_size < MIN_INPUT_SIZE:
            raise ValueError(f"input_size must be >= {MIN_INPUT_SIZE}, got {self.input_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        return cls(**{key: d[key] for key in ("variant", "num_classes", "k", "input_size", "dropout_rate") if key in d})


def stage_sizes(input_size: int) -> list[int]:
    """Spatial sizes after conv1, max pooling and each of the four stages."""
    conv1 = pooled_size(input_size)
    pool = pooled_size(conv1)
    sizes = [conv1, pool, pool]
    for _ in range(3):
        sizes.append(pooled_size(sizes[-1]))
    return sizes


class Stem(Module):
    def __init__(self, rng: np.random.Generator):
        self.conv = Conv(1, 64, 7, rng, stride=2, pad=3)
        self.bn = BatchNorm(64)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.maxpool2d(ops.relu(self.bn(self.conv(x), mode)), 3, 2, 1)


class Branch(Module):
    """Stem followed by four stages of blocks."""

    def __init__(self, layout: str, input_size: int, rng: np.random.Generator):
        self.layout = layout
        self.stem = Stem(rng)
        sizes = stage_sizes(input_size)[2:]
        self.stages: list[list[Module]] = []
        c_prev = 64
        for s, width in enumerate(STAGE_WIDTHS):
            stride = 1 if s == 0 else 2
            if layout == "plain" or s == 3:
                count = PLAIN_UNITS[s]
                blocks: list[Module] = [ResidualUnit(c_prev, width, rng, stride)]
                blocks += [ResidualUnit(width, width, rng) for _ in range(count - 1)]
            elif layout == "attention":
                blocks = [ResidualUnit(c_prev, width, rng, stride), AttentionModule(width, sizes[s], rng)]
            else:
                raise ValueError(f"unknown branch layout {layout!r}")
            self.stages.append(blocks)
            c_prev = width

    def run_stage(self, index: int, x: Tensor, mode: str) -> Tensor:
        for block in self.stages[index]:
            x = block(x, mode)
        return x

    def features(self, x: Tensor, mode: str) -> list[Tensor]:
        outs = []
        x = self.stem(x, mode)
        for s in range(4):
            x = self.run_stage(s, x, mode)
            outs.append(x)
        return outs


HEAD_INIT_STD = 1e-3


class Head(Module):
    """Global average pool, dropout, fully connected classifier."""

    def __init__(self, num_classes: int, rng: np.random.Generator):
        # pooled features reach several units of scale, so a small head keeps
        # the untrained logits close to uniform
        self.weight = Tensor(rng.standard_normal((num_classes, STAGE_WIDTHS[-1])) * HEAD_INIT_STD, requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def __call__(self, x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
        h = ops.flatten(ops.avgpool2d(x, x.shape[2]))
        h = ops.dropout(h, rate, mode, rng)
        return ops.linear(h, self.weight, self.bias)


def fuse(g: Tensor, l: Tensor) -> Tensor:
    """Global regularisation of local features: ``(1 + g) * l``."""
    if g.shape != l.shape:
        raise ShapeError(f"fuse: global shape {g.shape} differs from local shape {l.shape}")
    return gated(g, l)


Logits = Union[Tensor, tuple[Tensor, Tensor]]


class GRN(Module):
    def __init__(self, config: VariantConfig, rng: np.random.Generator):
        self.config = config
        self.global_branch = Branch("plain", config.input_size, rng)
        local_layout = "plain" if config.variant == "noattention" else "attention"
        self.local_branch = Branch(local_layout, config.input_size, rng)
        if config.variant == "net1":
            self.head_global = Head(config.num_classes, rng)
            self.head_local = Head(config.num_classes, rng)
        else:
            self.head = Head(config.num_classes, rng)

    @property
    def default_taps(self) -> tuple[int, ...]:
        if self.config.variant == "net1":
            return ()
        if self.config.variant == "net2":
            return (4,)
        return (1, 2, 3, 4)

    def _check_inputs(self, *images: Tensor) -> None:
        s = self.config.input_size
        for img in images:
            if img.ndim != 4 or img.shape[1:] != (1, s, s):
                raise ShapeError(f"expected N x 1 x {s} x {s} images, got {img.shape}")
        if len({img.shape[0] for img in images}) > 1:
            raise ShapeError(f"page and word batch sizes differ: {[img.shape[0] for img in images]}")

    def forward(self, page: Tensor, word: Tensor, mode: str = "train",
                rng: Optional[np.random.Generator] = None,
                taps: Optional[tuple[int, ...]] = None) -> Logits:
        """Logits for a batch of (page, word) pairs.

        Net1 returns ``(global_logits, local_logits)`` from two independent
        branches; every other variant returns one logits tensor.  ``taps``
        overrides which stages (1-4) apply the fusion.
        """
        self._check_inputs(page, word)
        cfg = self.config
        if cfg.variant == "net1":
            g = self.global_branch.features(page, mode)[-1]
            l = self.local_branch.features(word, mode)[-1]
            return (self.head_global(g, cfg.dropout_rate, mode, rng),
                    self.head_local(l, cfg.dropout_rate, mode, rng))
        taps = self.default_taps if taps is None else tuple(taps)
        gx = self.global_branch.stem(page, mode)
        lx = self.local_branch.stem(word, mode)
        for s in range(4):
            gx = self.global_branch.run_stage(s, gx, mode)
            lx = self.local_branch.run_stage(s, lx, mode)
            if s + 1 in taps:
                lx = fuse(gx, lx)
        return self.head(lx, cfg.dropout_rate, mode, rng)

    __call__ = forward

    def forward_local_only(self, word: Tensor, mode: str = "train",
                           rng: Optional[np.random.Generator] = None) -> Tensor:
        self._check_inputs(word)
        head = self.head_local if self.config.variant == "net1" else self.head
        return head(self.local_branch.features(word, mode)[-1], self.config.dropout_rate, mode, rng)

    def branch_parameters(self, branch: str) -> dict[str, Tensor]:
        """Parameters of ``global`` (branch + its head) or ``local`` (likewise)."""
        prefixes = {"global": ("global_branch.", "head_global."), "local": ("local_branch.", "head_local.")}[branch]
        return {name: p for name, p in self.named_parameters() if name.startswith(prefixes)}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        holders = _buffer_holders(self)
        expected = set(params) | set(holders)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} differs from model shape {p.shape}")
            p.data = arr.copy()
        for name, (bn_state, attr) in holders.items():
            setattr(bn_state, attr, np.asarray(state[name], dtype=np.float64).copy())


def _buffer_holders(module: Module, prefix: str = "") -> dict:
    out = {}
    for key, value in module._children():
        _collect_holders(value, prefix + key, out)
    return out


def _collect_holders(value, name: str, out: dict) -> None:
    if isinstance(value, ops.BatchNormState):
        out[name + ".running_mean"] = (value, "running_mean")
        out[name + ".running_var"] = (value, "running_var")
    elif isinstance(value, Module):
        out.update(_buffer_holders(value, name + "."))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect_holders(item, f"{name}.{i}", out)


def build_model(config: VariantConfig, rng: Union[np.random.Generator, int, None] = None) -> GRN:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return GRN(config, rng)


def forward(model: GRN, page: Tensor, word: Tensor, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> Logits:
    return model.forward(page, word, mode, rng)


@dataclass(frozen=True)
class CensusEntry:
    name: str
    shape: tuple[int, ...]
    count: int


def param_census(model: GRN) -> dict:
    """Every trainable tensor with its shape and size, plus per-branch totals."""
    entries = [CensusEntry(name, tuple(p.shape), int(p.data.size)) for name, p in model.named_parameters()]
    per_branch: dict[str, int] = {}
    for e in entries:
        top = e.name.split(".", 1)[0]
        per_branch[top] = per_branch.get(top, 0) + e.count
    return {"entries": entries, "per_branch": per_branch, "total": sum(e.count for e in entries)}


def format_census(census: dict) -> str:
    lines = [f"{e.name}\t{'x'.join(map(str, e.shape))}\t{e.count}" for e in census["entries"]]
    lines += [f"total[{k}]\t\t{v}" for k, v in census["per_branch"].items()]
    lines.append(f"total\t\t{census['total']}")
    return "\n".join(lines)
