"""Comparison adapters trained under the same harness as the recurrent one.

* residual: per-layer bottleneck FFN branch, one stack per task;
* lora: low-rank updates to both FFN matrices of every block, per task;
* bitfit: per-layer scale and bias vectors, per task;
* full: trainable shadow copy of every backbone weight.

lora and bitfit leave the backbone's function bit-identical at init (zero
up-projection, unit scale / zero bias); residual stacks start at small
random weights like the recurrent adapter's heads.
"""

from __future__ import annotations

import numpy as np

from .adapters import AdapterHooks, AdapterSpec, ParamCount, apply_weight
from .autodiff import Graph, Node
from .backbone import FrozenBackbone
from .errors import ConfigError
from .rng import SplitMix64, derive

Array = np.ndarray


# -- value-level operations ----------------------------------------------


def residual_adapter_apply(x, a1, a2, graph: Graph | None = None):
    """Bottleneck branch added to its input: ``x + relu(x A1^T) A2^T``."""
    g = graph or Graph()
    xn = g.wrap(x)
    branch = g.matmul(g.relu(g.matmul(xn, g.transposed(g.wrap(a1)))),
                      g.transposed(g.wrap(a2)))
    out = g.add(xn, branch)
    return out if graph is not None else out.value


def lora_apply(w_frozen, down, up, alpha: float, x,
               graph: Graph | None = None, materialize: bool = False):
    """``(W + (alpha/r) up down) @ x`` for a [rows x cols] frozen matrix.

    The default path never materializes ``up @ down``; ``materialize=True``
    forms the effective matrix first.  Both agree to float64 rounding.
    """
    w_frozen = np.asarray(w_frozen, dtype=np.float64)
    rank = up.shape[1] if isinstance(up, np.ndarray) else up.value.shape[1]
    if rank > min(w_frozen.shape):
        raise ConfigError(f"rank {rank} exceeds adapted matrix dims {w_frozen.shape}")
    g = graph or Graph()
    xn = g.wrap(x)
    scale = float(alpha) / float(rank)
    if materialize:
        delta = g.affine(g.matmul(g.wrap(up), g.wrap(down)), scale, 0.0)
        out = g.matmul(g.add(g.wrap(w_frozen), delta), xn)
    else:
        base = g.matmul(g.wrap(w_frozen), xn)
        low = g.matmul(g.wrap(up), g.matmul(g.wrap(down), xn))
        out = g.add(base, g.affine(low, scale, 0.0))
    return out if graph is not None else out.value


def bitfit_apply(x, gamma, beta, graph: Graph | None = None):
    """Per-channel rescale and shift: ``gamma * x + beta``."""
    g = graph or Graph()
    out = g.add(g.mul(g.wrap(x), g.wrap(gamma)), g.wrap(beta))
    return out if graph is not None else out.value


def baseline_param_count(spec: AdapterSpec, num_layers: int, model_dim: int,
                         num_tasks: int, ffn_dim: int | None = None) -> ParamCount:
    """Per-task budgets for the baseline methods (nothing is shared)."""
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    if spec.method == "residual":
        per_task = num_layers * 2 * model_dim * spec.bottleneck_dim
    elif spec.method == "bitfit":
        per_task = num_layers * 2 * model_dim
    elif spec.method == "lora":
        if ffn_dim is None:
            raise ConfigError("lora parameter count needs the backbone ffn_dim")
        # both block matrices per layer: r * (rows + cols) each
        per_task = num_layers * 2 * spec.rank * (model_dim + ffn_dim)
    else:
        raise ConfigError(f"not a baseline method: {spec.method!r}")
    return ParamCount(0, per_task, num_tasks * per_task)


# -- adapters -------------------------------------------------------------


class ResidualAdapter(AdapterHooks):
    """Per-layer bottleneck branches, one stack per task.

    Sequential placement feeds the branch with the block output (where the
    recurrent adapter also taps); parallel placement feeds it with the block
    input.  Either way the branch output is added to the block output.
    """

    method = "residual"

    def __init__(self, num_tasks: int, num_layers: int, placement: str = "sequential",
                 spec: AdapterSpec | None = None):
        super().__init__()
        if placement not in ("sequential", "parallel"):
            raise ConfigError(f"placement invalid: {placement!r}")
        self.num_tasks = num_tasks
        self.num_layers = num_layers
        self.placement = placement
        self.spec = spec

    @classmethod
    def build(cls, spec: AdapterSpec, bb: FrozenBackbone, num_tasks: int,
              seed: int) -> "ResidualAdapter":
        """Stream per task: derive(seed, "residual", n); draws A1 then A2 per layer."""
        adapter = cls(num_tasks, bb.num_layers, spec.placement, spec=spec)
        d, d_b = bb.model_dim, spec.bottleneck_dim
        for n in range(num_tasks):
            rng = SplitMix64(derive(seed, "residual", n))
            for l in range(bb.num_layers):
                adapter._store[f"tasks/{n}/layers/{l}/A1"] = rng.uniform_array(
                    (d_b, d), -1.0 / np.sqrt(d), 1.0 / np.sqrt(d))
                adapter._store[f"tasks/{n}/layers/{l}/A2"] = rng.uniform_array(
                    (d, d_b), -1.0 / np.sqrt(d_b), 1.0 / np.sqrt(d_b))
        return adapter

    def begin(self, g: Graph, task, num_frames: int) -> int:
        self.bind(g)
        return self._require_task(task, self.num_tasks)

    def post_block(self, g: Graph, state: int, layer: int,
                   block_in: Node, block_out: Node):
        source = block_out if self.placement == "sequential" else block_in
        a1 = self.node(f"tasks/{state}/layers/{layer}/A1")
        a2 = self.node(f"tasks/{state}/layers/{layer}/A2")
        branch = g.matmul(g.relu(g.matmul(source, g.transposed(a1))),
                          g.transposed(a2))
        return g.add(block_out, branch), state

    def param_count(self, num_tasks: int | None = None) -> ParamCount:
        n = self.num_tasks if num_tasks is None else num_tasks
        a1 = self._store[f"tasks/0/layers/0/A1"]
        spec = AdapterSpec(method="residual", bottleneck_dim=a1.shape[0])
        return baseline_param_count(spec, self.num_layers, a1.shape[1], n)

    def checkpoint_meta(self) -> dict:
        spec = self.spec if self.spec is not None else AdapterSpec(
            method="residual",
            bottleneck_dim=self._store["tasks/0/layers/0/A1"].shape[0],
            placement=self.placement)
        return {"adapter_spec": spec.to_dict(), "num_tasks": self.num_tasks,
                "num_layers": self.num_layers}


class LoRAAdapter(AdapterHooks):
    """Low-rank updates on both FFN matrices of every block, per task.

    Up-projections start at zero, so the adapted forward equals the frozen
    one bit-for-bit at step 0.  The update is applied in factored form; its
    scale is alpha/rank (alpha defaults to rank).
    """

    method = "lora"

    def __init__(self, num_tasks: int, num_layers: int, rank: int, alpha: float,
                 spec: AdapterSpec | None = None):
        super().__init__()
        self.num_tasks = num_tasks
        self.num_layers = num_layers
        self.rank = rank
        self.alpha = float(alpha)
        self.spec = spec

    @classmethod
    def build(cls, spec: AdapterSpec, bb: FrozenBackbone, num_tasks: int,
              seed: int) -> "LoRAAdapter":
        """Stream per task: derive(seed, "lora", n); per layer draws V1/down
        then V2/down (ups are zeros)."""
        if spec.rank > min(bb.model_dim, bb.ffn_dim):
            raise ConfigError(
                f"rank {spec.rank} exceeds min adapted dim {min(bb.model_dim, bb.ffn_dim)}")
        adapter = cls(num_tasks, bb.num_layers, spec.rank, spec.alpha, spec=spec)
        r = spec.rank
        for n in range(num_tasks):
            rng = SplitMix64(derive(seed, "lora", n))
            for l in range(bb.num_layers):
                for which in ("V1", "V2"):
                    rows, cols = bb.weights[f"layers/{l}/{which}"].shape
                    bound = 1.0 / np.sqrt(cols)
                    adapter._store[f"tasks/{n}/layers/{l}/{which}/down"] = (
                        rng.uniform_array((r, cols), -bound, bound))
                    adapter._store[f"tasks/{n}/layers/{l}/{which}/up"] = (
                        np.zeros((rows, r)))
        return adapter

    def begin(self, g: Graph, task, num_frames: int) -> int:
        self.bind(g)
        return self._require_task(task, self.num_tasks)

    def linear(self, g: Graph, state: int, name: str, weight: Array, x) -> Node:
        base = apply_weight(g, name, weight, x)
        if not name.startswith("layers/"):
            return base
        down = self.node(f"tasks/{state}/{name}/down")
        up = self.node(f"tasks/{state}/{name}/up")
        low = g.matmul(g.matmul(x, g.transposed(down)), g.transposed(up))
        return g.add(base, g.affine(low, self.alpha / self.rank, 0.0))

    def param_count(self, num_tasks: int | None = None) -> ParamCount:
        n = self.num_tasks if num_tasks is None else num_tasks
        per_task = sum(a.size for name, a in self._store.items()
                       if name.startswith("tasks/0/"))
        return ParamCount(0, per_task, n * per_task)

    def checkpoint_meta(self) -> dict:
        spec = self.spec if self.spec is not None else AdapterSpec(
            method="lora", rank=self.rank, lora_alpha=self.alpha)
        return {"adapter_spec": spec.to_dict(), "num_tasks": self.num_tasks,
                "num_layers": self.num_layers}


class BitFitAdapter(AdapterHooks):
    """Per-layer scale/bias on block outputs; identity at initialization."""

    method = "bitfit"

    def __init__(self, num_tasks: int, num_layers: int,
                 spec: AdapterSpec | None = None):
        super().__init__()
        self.num_tasks = num_tasks
        self.num_layers = num_layers
        self.spec = spec

    @classmethod
    def build(cls, spec: AdapterSpec, bb: FrozenBackbone,
              num_tasks: int) -> "BitFitAdapter":
        adapter = cls(num_tasks, bb.num_layers, spec=spec)
        for n in range(num_tasks):
            for l in range(bb.num_layers):
                adapter._store[f"tasks/{n}/layers/{l}/gamma"] = np.ones(bb.model_dim)
                adapter._store[f"tasks/{n}/layers/{l}/beta"] = np.zeros(bb.model_dim)
        return adapter

    def begin(self, g: Graph, task, num_frames: int) -> int:
        self.bind(g)
        return self._require_task(task, self.num_tasks)

    def post_block(self, g: Graph, state: int, layer: int,
                   block_in: Node, block_out: Node):
        gamma = self.node(f"tasks/{state}/layers/{layer}/gamma")
        beta = self.node(f"tasks/{state}/layers/{layer}/beta")
        return g.add(g.mul(block_out, gamma), beta), state

    def param_count(self, num_tasks: int | None = None) -> ParamCount:
        n = self.num_tasks if num_tasks is None else num_tasks
        d = self._store["tasks/0/layers/0/gamma"].shape[0]
        return baseline_param_count(AdapterSpec(method="bitfit"),
                                    self.num_layers, d, n)

    def checkpoint_meta(self) -> dict:
        spec = self.spec if self.spec is not None else AdapterSpec(method="bitfit")
        return {"adapter_spec": spec.to_dict(), "num_tasks": self.num_tasks,
                "num_layers": self.num_layers}


class FullFineTuneAdapter(AdapterHooks):
    """Trainable shadow copy of every backbone weight (the unfreeze mode).

    The backbone object itself stays immutable; forward passes read this
    adapter's copies instead.
    """

    method = "full"

    def __init__(self, bb: FrozenBackbone):
        super().__init__()
        self.num_tasks = 1
        self.num_layers = bb.num_layers
        self._store = {name: np.array(arr) for name, arr in bb.weights.items()}

    def begin(self, g: Graph, task, num_frames: int):
        self.bind(g)
        return None

    def linear(self, g: Graph, state, name: str, weight: Array, x) -> Node:
        return g.matmul(x, g.transposed(self.node(name)))

    def param_count(self, num_tasks: int | None = None) -> ParamCount:
        n = 1 if num_tasks is None else num_tasks
        per_task = sum(a.size for a in self._store.values())
        return ParamCount(0, per_task, n * per_task)

    def checkpoint_meta(self) -> dict:
        return {"adapter_spec": AdapterSpec(method="full").to_dict(),
                "num_tasks": self.num_tasks, "num_layers": self.num_layers}
