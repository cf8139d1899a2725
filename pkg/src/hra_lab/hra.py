"""Depth-recurrent adapter: one controller shared by all layers and tasks.

The controller is a small recurrent cell whose recurrence runs over the
*depth* of the frozen backbone, not over time: at layer l it reads the
layer activation and its own state from layer l-1 (zero before the first
layer) and emits a fresh interaction vector per frame.  A per-task head
maps that vector to an additive correction on the layer activation.  The
controller and the selected head are the same objects at every layer, so
the trainable budget does not grow with backbone depth; each new task only
adds one head.

Controller cells:

* ``indrnn``   - relu(x W^T + u * h + b), elementwise recurrent scaling u;
* ``vanilla``  - tanh(x W^T + h U^T + b), full recurrent matrix;
* ``lightgru`` - single update gate z = sigmoid(x Wz^T + h Uz^T + bz) mixing
  the previous state with a relu candidate relu(x W^T + h Uh^T + b).  (No
  batch normalization: statistics over a handful of frames are degenerate.)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterHooks, AdapterSpec, ParamCount
from .autodiff import Graph, Node
from .backbone import FrozenBackbone, ForwardTrace, backbone_forward
from .errors import ConfigError, RoutingError
from .rng import SplitMix64, derive

Array = np.ndarray

VARIANTS = ("indrnn", "vanilla", "lightgru")
HEAD_KINDS = ("linear", "ffn")


@dataclass
class ControllerParams:
    """Weights of the shared controller cell.

    ``W`` [d_r x d] and ``b`` [d_r] exist for every variant; exactly one
    variant-specific set is populated: ``u`` [d_r] for indrnn, ``U``
    [d_r x d_r] for vanilla, and (``W_z``, ``U_z``, ``U_h``, ``b_z``) for
    lightgru.
    """

    variant: str
    W: Array
    b: Array
    u: Array | None = None
    U: Array | None = None
    W_z: Array | None = None
    U_z: Array | None = None
    U_h: Array | None = None
    b_z: Array | None = None

    def __post_init__(self):
        self.validate()

    @property
    def recurrent_dim(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant: {self.variant!r}")
        extras = {
            "indrnn": ("u",),
            "vanilla": ("U",),
            "lightgru": ("W_z", "U_z", "U_h", "b_z"),
        }
        want = extras[self.variant]
        missing = [n for n in want if getattr(self, n) is None]
        if missing:
            raise ConfigError(
                f"{self.variant} controller is missing weights: {missing}")
        others = [n for names in extras.values() for n in names if n not in want]
        populated = [n for n in others if getattr(self, n) is not None]
        if populated:
            raise ConfigError(
                f"{self.variant} controller must not carry {populated}")

    def tensors(self) -> dict[str, Array]:
        out = {"W": self.W, "b": self.b}
        for name in ("u", "U", "W_z", "U_z", "U_h", "b_z"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    def copy(self) -> "ControllerParams":
        def cp(a):
            return None if a is None else np.array(a)

        return ControllerParams(self.variant, np.array(self.W), np.array(self.b),
                                u=cp(self.u), U=cp(self.U), W_z=cp(self.W_z),
                                U_z=cp(self.U_z), U_h=cp(self.U_h), b_z=cp(self.b_z))


@dataclass
class TaskHead:
    """Per-task head: a single projection or a 2-layer relu FFN.

    Output dimension always equals the backbone model dim so the correction
    can be added to the layer activation.
    """

    kind: str
    M: Array | None = None
    M1: Array | None = None
    M2: Array | None = None

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind: {self.kind!r}")
        if self.kind == "linear" and self.M is None:
            raise ConfigError("linear head needs M")
        if self.kind == "ffn" and (self.M1 is None or self.M2 is None):
            raise ConfigError("ffn head needs M1 and M2")

    def tensors(self) -> dict[str, Array]:
        if self.kind == "linear":
            return {"M": self.M}
        return {"M1": self.M1, "M2": self.M2}

    def copy(self) -> "TaskHead":
        if self.kind == "linear":
            return TaskHead("linear", M=np.array(self.M))
        return TaskHead("ffn", M1=np.array(self.M1), M2=np.array(self.M2))


class HeadRegistry:
    """Dense task-id -> head lookup; ids are 0..N-1 in registration order."""

    def __init__(self, heads=()):
        self._heads: list[TaskHead] = list(heads)

    def add(self, head: TaskHead) -> int:
        self._heads.append(head)
        return len(self._heads) - 1

    def resolve(self, task) -> TaskHead:
        if not isinstance(task, int) or isinstance(task, bool):
            raise RoutingError(f"task id must be an int, got {task!r}")
        if not 0 <= task < len(self._heads):
            raise RoutingError(f"task {task} not registered (have {len(self._heads)})")
        return self._heads[task]

    def __len__(self) -> int:
        return len(self._heads)

    def __iter__(self):
        return iter(self._heads)


# -- initialization ----------------------------------------------------


def init_controller(variant: str, model_dim: int, recurrent_dim: int,
                    rng: SplitMix64) -> ControllerParams:
    """Draw controller weights.

    Input projections are Uniform(+-1/sqrt(fan_in)); recurrent matrices
    Uniform(+-1/sqrt(d_r)); the indrnn scaling vector u is Uniform(0, 1) so
    depth iteration cannot blow up; biases start at zero.  Draw order: W,
    then variant extras (u | U | W_z, U_z, U_h).
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown controller variant: {variant!r}")
    in_bound = 1.0 / np.sqrt(model_dim)
    rec_bound = 1.0 / np.sqrt(recurrent_dim)
    W = rng.uniform_array((recurrent_dim, model_dim), -in_bound, in_bound)
    b = np.zeros(recurrent_dim)
    if variant == "indrnn":
        u = rng.uniform_array((recurrent_dim,), 0.0, 1.0)
        return ControllerParams("indrnn", W, b, u=u)
    if variant == "vanilla":
        U = rng.uniform_array((recurrent_dim, recurrent_dim), -rec_bound, rec_bound)
        return ControllerParams("vanilla", W, b, U=U)
    W_z = rng.uniform_array((recurrent_dim, model_dim), -in_bound, in_bound)
    U_z = rng.uniform_array((recurrent_dim, recurrent_dim), -rec_bound, rec_bound)
    U_h = rng.uniform_array((recurrent_dim, recurrent_dim), -rec_bound, rec_bound)
    return ControllerParams("lightgru", W, b, W_z=W_z, U_z=U_z, U_h=U_h,
                            b_z=np.zeros(recurrent_dim))


def init_head(kind: str, model_dim: int, recurrent_dim: int, hidden_dim: int,
              rng: SplitMix64, zero_init: bool = False) -> TaskHead:
    """Draw one task head; ``zero_init`` zeroes the output matrix so the
    adapted model starts exactly at the frozen backbone's function."""
    if kind == "linear":
        if zero_init:
            return TaskHead("linear", M=np.zeros((model_dim, recurrent_dim)))
        bound = 1.0 / np.sqrt(recurrent_dim)
        return TaskHead("linear", M=rng.uniform_array((model_dim, recurrent_dim),
                                                      -bound, bound))
    if kind != "ffn":
        raise ConfigError(f"unknown head kind: {kind!r}")
    b1 = 1.0 / np.sqrt(recurrent_dim)
    M1 = rng.uniform_array((hidden_dim, recurrent_dim), -b1, b1)
    if zero_init:
        M2 = np.zeros((model_dim, hidden_dim))
    else:
        b2 = 1.0 / np.sqrt(hidden_dim)
        M2 = rng.uniform_array((model_dim, hidden_dim), -b2, b2)
    return TaskHead("ffn", M1=M1, M2=M2)


# -- node-level math ----------------------------------------------------


def _controller_nodes(g: Graph, x, h_prev, n: dict[str, Node | Array], variant: str) -> Node:
    wx = g.matmul(x, g.transposed(g.wrap(n["W"])))
    if variant == "indrnn":
        pre = g.add(g.add(wx, g.mul(h_prev, n["u"])), n["b"])
        return g.relu(pre)
    if variant == "vanilla":
        pre = g.add(g.add(wx, g.matmul(h_prev, g.transposed(g.wrap(n["U"])))), n["b"])
        return g.tanh(pre)
    z = g.sigmoid(g.add(g.add(g.matmul(x, g.transposed(g.wrap(n["W_z"]))),
                              g.matmul(h_prev, g.transposed(g.wrap(n["U_z"])))),
                        n["b_z"]))
    cand = g.relu(g.add(g.add(wx, g.matmul(h_prev, g.transposed(g.wrap(n["U_h"])))),
                        n["b"]))
    return g.add(g.mul(z, h_prev), g.mul(g.affine(z, -1.0, 1.0), cand))


def _head_nodes(g: Graph, h, n: dict[str, Node | Array], kind: str) -> Node:
    if kind == "linear":
        return g.matmul(h, g.transposed(g.wrap(n["M"])))
    inner = g.relu(g.matmul(h, g.transposed(g.wrap(n["M1"]))))
    return g.matmul(inner, g.transposed(g.wrap(n["M2"])))


# -- public operations ---------------------------------------------------


def controller_step(x, h_prev, params: ControllerParams, graph: Graph | None = None):
    """One depth step of the controller over a [T x d] activation.

    Frames (rows) are independent: the recurrence runs across layers, so
    ``h_prev`` is the state from the previous layer ([T x d_r], zeros for
    the first layer).  Returns an array, or a node when ``graph`` is given.
    """
    params.validate()
    g = graph or Graph()
    out = _controller_nodes(g, g.wrap(x), g.wrap(h_prev),
                            {k: g.wrap(v) for k, v in params.tensors().items()},
                            params.variant)
    return out if graph is not None else out.value


def head_apply(h, head: TaskHead, graph: Graph | None = None):
    """Map controller states [T x d_r] to corrections [T x d] with one head."""
    g = graph or Graph()
    out = _head_nodes(g, g.wrap(h), {k: g.wrap(v) for k, v in head.tensors().items()},
                      head.kind)
    return out if graph is not None else out.value


def adapt_layer(x, h_prev, params: ControllerParams, head: TaskHead,
                disable_recurrence: bool = False, graph: Graph | None = None):
    """Adapt one layer activation: returns ``(x + head(controller(x, h)), h)``.

    ``disable_recurrence`` substitutes zeros for ``h_prev``, which by
    construction equals the first-layer behaviour at every layer.
    """
    g = graph or Graph()
    xn = g.wrap(x)
    hp = g.wrap(h_prev)
    if disable_recurrence:
        hp = g.constant(np.zeros(hp.value.shape))
    h = controller_step(xn, hp, params, graph=g)
    o = head_apply(h, head, graph=g)
    xp = g.add(xn, o)
    if graph is not None:
        return xp, h
    return xp.value, h.value


def hra_param_count(model_dim: int, recurrent_dim: int, head_hidden_dim: int,
                    variant: str, head_kind: str, num_tasks: int) -> ParamCount:
    """Closed-form budget: shared controller plus one head per task."""
    if min(model_dim, recurrent_dim, head_hidden_dim) < 1:
        raise ConfigError("dims must be >= 1")
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    d, d_r, d_h = model_dim, recurrent_dim, head_hidden_dim
    if variant == "indrnn":
        shared = d_r * d + 2 * d_r
    elif variant == "vanilla":
        shared = d_r * d + d_r * d_r + d_r
    elif variant == "lightgru":
        shared = 2 * d_r * d + 2 * d_r * d_r + 2 * d_r
    else:
        raise ConfigError(f"unknown controller variant: {variant!r}")
    if head_kind == "linear":
        per_task = d * d_r
    elif head_kind == "ffn":
        per_task = d_h * d_r + d * d_h
    else:
        raise ConfigError(f"unknown head kind: {head_kind!r}")
    return ParamCount(shared, per_task, shared + num_tasks * per_task)


# -- the adapter --------------------------------------------------------


class _HraState:
    __slots__ = ("task", "h", "zeros")

    def __init__(self, task, h, zeros):
        self.task = task
        self.h = h
        self.zeros = zeros


class HraAdapter(AdapterHooks):
    """Shared-controller adapter with per-task heads and ablation switches.

    The default configuration uses one (controller, registry) pair at every
    layer.  :meth:`unshared` builds the weight-unsharing ablation: an
    independent, identically initialized copy per layer, which matches the
    shared model exactly at step 0 and trains away from it.
    """

    method = "hra"

    def __init__(self, controller: ControllerParams, registry: HeadRegistry, *,
                 layer_mask=None, disable_recurrence: bool = False,
                 spec: AdapterSpec | None = None):
        super().__init__()
        self.controllers = [controller]
        self.registries = [registry]
        self.layer_mask = None if layer_mask is None else frozenset(int(l) for l in layer_mask)
        self.disable_recurrence = disable_recurrence
        self.unshare_weights = False
        self.spec = spec
        self._rebuild_store()

    @classmethod
    def unshared(cls, controller: ControllerParams, registry: HeadRegistry,
                 num_layers: int, *, layer_mask=None, disable_recurrence: bool = False,
                 spec: AdapterSpec | None = None) -> "HraAdapter":
        adapter = cls(controller, registry, layer_mask=layer_mask,
                      disable_recurrence=disable_recurrence, spec=spec)
        adapter.controllers = [controller.copy() for _ in range(num_layers)]
        adapter.registries = [HeadRegistry([h.copy() for h in registry])
                              for _ in range(num_layers)]
        adapter.unshare_weights = True
        adapter._rebuild_store()
        return adapter

    # store layout: controller/<t> and heads/<n>/<t>, with a layers/<l>/
    # prefix when weights are unshared
    def _rebuild_store(self) -> None:
        self._store = {}
        self._graph = None
        for li, (ctrl, reg) in enumerate(zip(self.controllers, self.registries)):
            prefix = f"layers/{li}/" if self.unshare_weights else ""
            for tname, arr in ctrl.tensors().items():
                self._store[f"{prefix}controller/{tname}"] = arr
            for n, head in enumerate(reg):
                for tname, arr in head.tensors().items():
                    self._store[f"{prefix}heads/{n}/{tname}"] = arr

    @property
    def num_tasks(self) -> int:
        return len(self.registries[0])

    @property
    def variant(self) -> str:
        return self.controllers[0].variant

    @property
    def recurrent_dim(self) -> int:
        return self.controllers[0].recurrent_dim

    def _layer_active(self, layer: int) -> bool:
        return self.layer_mask is None or layer in self.layer_mask

    def _param_group(self, layer: int, task: int) -> tuple[dict, dict, str]:
        li = layer if self.unshare_weights else 0
        prefix = f"layers/{li}/" if self.unshare_weights else ""
        ctrl = {t: self.node(f"{prefix}controller/{t}")
                for t in self.controllers[li].tensors()}
        head = self.registries[li].resolve(task)
        head_nodes = {t: self.node(f"{prefix}heads/{task}/{t}")
                      for t in head.tensors()}
        return ctrl, head_nodes, head.kind

    # hooks -------------------------------------------------------------

    def begin(self, g: Graph, task, num_frames: int) -> _HraState:
        self.bind(g)
        task = self._require_task(task, self.num_tasks)
        zeros = g.constant(np.zeros((num_frames, self.recurrent_dim)))
        return _HraState(task, zeros, zeros)

    def post_block(self, g: Graph, state: _HraState, layer: int,
                   block_in: Node, block_out: Node):
        if not self._layer_active(layer):
            return block_out, state
        ctrl, head_nodes, head_kind = self._param_group(layer, state.task)
        h_in = state.zeros if self.disable_recurrence else state.h
        h = _controller_nodes(g, block_out, h_in, ctrl, self.variant)
        o = _head_nodes(g, h, head_nodes, head_kind)
        return g.add(block_out, o), _HraState(state.task, h, state.zeros)

    def state_h(self, state: _HraState) -> Node:
        return state.h

    # accounting ----------------------------------------------------------

    def param_count(self, num_tasks: int | None = None) -> ParamCount:
        n = self.num_tasks if num_tasks is None else num_tasks
        head = next(iter(self.registries[0]))
        d_h = head.M1.shape[0] if head.kind == "ffn" else 1
        counts = hra_param_count(self.controllers[0].input_dim, self.recurrent_dim,
                                 d_h, self.variant, head.kind, n)
        if self.unshare_weights:
            L = len(self.controllers)
            counts = ParamCount(L * counts.shared, L * counts.per_task, L * counts.total)
        return counts

    def checkpoint_meta(self) -> dict:
        spec = self.spec if self.spec is not None else AdapterSpec(
            method="hra", variant=self.variant, head=next(iter(self.registries[0])).kind,
            recurrent_dim=self.recurrent_dim,
            layer_mask=None if self.layer_mask is None else tuple(sorted(self.layer_mask)),
            disable_recurrence=self.disable_recurrence,
            unshare_weights=self.unshare_weights)
        return {"adapter_spec": spec.to_dict(), "num_tasks": self.num_tasks,
                "num_layers": len(self.controllers)}


def build_hra_adapter(spec: AdapterSpec, bb: FrozenBackbone, num_tasks: int,
                      seed: int) -> HraAdapter:
    """Initialize a recurrent adapter for a backbone.

    Streams: controller from derive(seed, "controller"); head n from
    derive(seed, "head", n).  Unshared copies replicate the shared init.
    """
    ctrl = init_controller(spec.variant, bb.model_dim, spec.recurrent_dim,
                           SplitMix64(derive(seed, "controller")))
    registry = HeadRegistry()
    for n in range(num_tasks):
        registry.add(init_head(spec.head, bb.model_dim, spec.recurrent_dim,
                               spec.head_hidden_dim, SplitMix64(derive(seed, "head", n)),
                               zero_init=spec.zero_init_head))
    if spec.unshare_weights:
        return HraAdapter.unshared(ctrl, registry, bb.num_layers,
                                   layer_mask=spec.layer_mask,
                                   disable_recurrence=spec.disable_recurrence,
                                   spec=spec)
    return HraAdapter(ctrl, registry, layer_mask=spec.layer_mask,
                      disable_recurrence=spec.disable_recurrence, spec=spec)


def hra_forward(bb: FrozenBackbone, controller: ControllerParams,
                registry: HeadRegistry, task: int, frames) -> ForwardTrace:
    """Forward pass with a shared controller and the task's head at every layer."""
    adapter = HraAdapter(controller, registry)
    return backbone_forward(bb, frames, adapter=adapter, task=task)
