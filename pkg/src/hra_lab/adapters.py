"""Adapter plumbing shared by every adaptation method.

An adapter owns a flat ``name -> float64 array`` store of trainable tensors
and exposes three integration points the backbone forward pass calls:

* ``begin(graph, task, num_frames)`` - resolve task routing, return opaque
  per-pass state;
* ``linear(graph, state, name, weight, x)`` - apply one named backbone
  weight matrix (low-rank and full-tuning methods override this);
* ``post_block(graph, state, layer, block_in, block_out)`` - transform the
  activation leaving a block (recurrent, bottleneck, and bias/scale methods
  override this).

Concrete adapters live in :mod:`hra_lab.hra` and :mod:`hra_lab.baselines`;
:func:`build_adapter` constructs any of them from an :class:`AdapterSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from .autodiff import Graph, Node
from .errors import ConfigError, RoutingError

Array = np.ndarray

METHODS = ("hra", "residual", "lora", "bitfit", "full")


class ParamCount(NamedTuple):
    """Trainable-parameter budget split into shared and per-task parts."""

    shared: int
    per_task: int
    total: int


def apply_weight(g: Graph, name: str, weight: Array, x) -> Node:
    """``x @ W.T`` with the transposed weight cached as a named graph constant.

    Weights are stored rows-as-outputs; frames are rows of ``x``.
    """
    wt = g.cached((name, id(weight)), lambda: g.constant(weight.T, name=name))
    return g.matmul(x, wt)


class AdapterHooks:
    """Base adapter: owns a tensor store and no-op integration hooks."""

    method = "null"

    def __init__(self):
        self._store: dict[str, Array] = {}
        self._graph: Graph | None = None
        self._nodes: dict[str, Node] = {}

    def params(self) -> dict[str, Array]:
        """Live name -> array mapping; optimizers update these in place."""
        return self._store

    def bind(self, g: Graph) -> None:
        """Register every tensor as a parameter node, once per graph."""
        if self._graph is not g:
            self._nodes = {name: g.parameter(arr, name=name)
                           for name, arr in self._store.items()}
            self._graph = g

    def node(self, name: str) -> Node:
        return self._nodes[name]

    # hooks -------------------------------------------------------------

    def begin(self, g: Graph, task: int | None, num_frames: int):
        self.bind(g)
        return None

    def linear(self, g: Graph, state, name: str, weight: Array, x) -> Node:
        return apply_weight(g, name, weight, x)

    def post_block(self, g: Graph, state, layer: int, block_in: Node, block_out: Node):
        return block_out, state

    def state_h(self, state) -> Node | None:
        """Controller depth-state for trace recording; None when absent."""
        return None

    # accounting ----------------------------------------------------------

    def param_count(self, num_tasks: int) -> ParamCount:
        raise NotImplementedError

    def checkpoint_meta(self) -> dict:
        raise NotImplementedError

    def _require_task(self, task, num_tasks: int) -> int:
        if task is None:
            raise RoutingError(f"{self.method} adapter requires a task id")
        if not isinstance(task, int) or isinstance(task, bool):
            raise RoutingError(f"task id must be an int, got {task!r}")
        if not 0 <= task < num_tasks:
            raise RoutingError(
                f"task {task} not registered (have {num_tasks} heads)")
        return task


@dataclass
class AdapterSpec:
    """Tagged description of an adaptation method and its size knobs.

    Only the fields relevant to ``method`` are read; the rest keep their
    defaults so specs stay JSON-friendly.
    """

    method: str = "hra"
    # recurrent adapter
    variant: str = "indrnn"           # indrnn | vanilla | lightgru
    head: str = "linear"              # linear | ffn
    recurrent_dim: int = 8
    head_hidden_dim: int = 16
    layer_mask: tuple[int, ...] | None = None
    disable_recurrence: bool = False
    unshare_weights: bool = False
    zero_init_head: bool = False
    # bottleneck adapter
    bottleneck_dim: int = 8
    placement: str = "sequential"     # sequential | parallel
    # low-rank adapter
    rank: int = 4
    lora_alpha: float | None = None   # defaults to rank (neutral scaling)
    seed: int = 0

    def validate(self, num_layers: int | None = None,
                 model_dim: int | None = None, ffn_dim: int | None = None) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"adapter.method must be one of {METHODS}, got {self.method!r}")
        if self.method == "hra":
            if self.variant not in ("indrnn", "vanilla", "lightgru"):
                raise ConfigError(f"adapter.variant invalid: {self.variant!r}")
            if self.head not in ("linear", "ffn"):
                raise ConfigError(f"adapter.head invalid: {self.head!r}")
            if self.recurrent_dim < 1:
                raise ConfigError("adapter.recurrent_dim must be >= 1")
            if self.head == "ffn" and self.head_hidden_dim < 1:
                raise ConfigError("adapter.head_hidden_dim must be >= 1")
            if self.layer_mask is not None and num_layers is not None:
                bad = [l for l in self.layer_mask if not 0 <= l < num_layers]
                if bad:
                    raise ConfigError(f"adapter.layer_mask out of range: {bad}")
        elif self.method == "residual":
            if self.bottleneck_dim < 1:
                raise ConfigError("adapter.bottleneck_dim must be >= 1")
            if self.placement not in ("sequential", "parallel"):
                raise ConfigError(f"adapter.placement invalid: {self.placement!r}")
        elif self.method == "lora":
            if self.rank < 1:
                raise ConfigError("adapter.rank must be >= 1")
            if model_dim is not None and ffn_dim is not None:
                if self.rank > min(model_dim, ffn_dim):
                    raise ConfigError(
                        f"adapter.rank {self.rank} exceeds min adapted dim "
                        f"{min(model_dim, ffn_dim)}")

    @property
    def alpha(self) -> float:
        return float(self.rank if self.lora_alpha is None else self.lora_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["layer_mask"] is not None:
            d["layer_mask"] = list(d["layer_mask"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adapter keys: {sorted(unknown)}")
        if d.get("layer_mask") is not None:
            d["layer_mask"] = tuple(int(l) for l in d["layer_mask"])
        return cls(**d)


def build_adapter(spec: AdapterSpec, bb, num_tasks: int, seed: int):
    """Construct and initialize an adapter for ``num_tasks`` tasks.

    Initialization draws from a splitmix64 stream seeded by ``seed``; the
    draw order is documented with each adapter's init function so runs are
    reproducible from the seed alone.
    """
    from . import baselines, hra  # deferred: those modules import this one

    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    spec.validate(num_layers=bb.num_layers, model_dim=bb.model_dim, ffn_dim=bb.ffn_dim)
    if spec.method == "hra":
        return hra.build_hra_adapter(spec, bb, num_tasks, seed)
    if spec.method == "residual":
        return baselines.ResidualAdapter.build(spec, bb, num_tasks, seed)
    if spec.method == "lora":
        return baselines.LoRAAdapter.build(spec, bb, num_tasks, seed)
    if spec.method == "bitfit":
        return baselines.BitFitAdapter.build(spec, bb, num_tasks)
    return baselines.FullFineTuneAdapter(bb)


def param_count(spec: AdapterSpec, bb, num_tasks: int) -> ParamCount:
    """Closed-form parameter budget for a spec, without building anything."""
    from . import baselines, hra

    if spec.method == "hra":
        counts = hra.hra_param_count(bb.model_dim, spec.recurrent_dim,
                                     spec.head_hidden_dim, spec.variant,
                                     spec.head, num_tasks)
        if spec.unshare_weights:
            # independent copy of controller + heads per layer
            counts = ParamCount(bb.num_layers * counts.shared,
                                bb.num_layers * counts.per_task,
                                bb.num_layers * counts.total)
        return counts
    if spec.method == "full":
        n = bb.param_count()
        return ParamCount(0, n, num_tasks * n)
    return baselines.baseline_param_count(spec, bb.num_layers, bb.model_dim,
                                          num_tasks, ffn_dim=bb.ffn_dim)


def adapter_from_checkpoint(tensors: dict[str, Array], meta: dict, bb):
    """Rebuild an adapter from a checkpoint's tensor map and meta section."""
    spec = AdapterSpec.from_dict(meta["adapter_spec"])
    adapter = build_adapter(spec, bb, int(meta["num_tasks"]), seed=0)
    store = adapter.params()
    missing = set(store) - set(tensors)
    extra = set(tensors) - set(store)
    if missing or extra:
        raise ConfigError(
            f"checkpoint tensors do not match adapter layout "
            f"(missing={sorted(missing)}, extra={sorted(extra)})")
    for name, arr in tensors.items():
        if store[name].shape != arr.shape:
            raise ConfigError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"expected {store[name].shape}")
        store[name][...] = arr
    return adapter
