"""Frozen multi-layer feature extractor that adapters hook into.

The backbone is a stack of residual feed-forward blocks (no attention, no
normalization) over per-frame features: small enough to hand-verify, big
enough to give adapters real per-layer activations to work with.  Weights
are drawn once from a seeded stream and are immutable afterwards; training
runs must leave them bit-identical, which tests check by hashing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import apply_weight
from .autodiff import Graph, Node
from .errors import ConfigError, DimensionError, EmptyInputError
from .rng import SplitMix64

Array = np.ndarray


@dataclass(frozen=True)
class FrozenBackbone:
    """L residual FFN blocks between an input and an output projection.

    ``weights`` maps ``input_proj``, ``layers/<l>/V1``, ``layers/<l>/V2``
    and ``output_proj`` to read-only float64 arrays.  The output projection
    produces per-frame logits over ``vocab`` labels plus a trailing blank
    class, so log-probabilities have ``vocab + 1`` columns.
    """

    num_layers: int
    model_dim: int
    ffn_dim: int
    input_dim: int
    vocab: int
    seed: int
    weights: dict[str, Array] = field(repr=False)

    def weight_names(self) -> list[str]:
        names = ["input_proj"]
        for l in range(self.num_layers):
            names += [f"layers/{l}/V1", f"layers/{l}/V2"]
        names.append("output_proj")
        return names

    def param_count(self) -> int:
        return sum(w.size for w in self.weights.values())


def build_backbone(num_layers: int, model_dim: int, ffn_dim: int,
                   input_dim: int, vocab: int, seed: int) -> FrozenBackbone:
    """Draw a backbone from the splitmix64 stream seeded by ``seed``.

    Every matrix is Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in =
    its column count, filled row-major in this order: input_proj, then each
    layer's V1 and V2, then output_proj.  Same seed, same bytes.
    """
    dims = {"num_layers": num_layers, "model_dim": model_dim, "ffn_dim": ffn_dim,
            "input_dim": input_dim, "vocab": vocab}
    for key, val in dims.items():
        if val < 1:
            raise ConfigError(f"backbone {key} must be >= 1, got {val}")

    rng = SplitMix64(seed)

    def draw(rows: int, cols: int) -> Array:
        bound = 1.0 / np.sqrt(cols)
        w = rng.uniform_array((rows, cols), -bound, bound)
        w.flags.writeable = False
        return w

    weights: dict[str, Array] = {"input_proj": draw(model_dim, input_dim)}
    for l in range(num_layers):
        weights[f"layers/{l}/V1"] = draw(ffn_dim, model_dim)
        weights[f"layers/{l}/V2"] = draw(model_dim, ffn_dim)
    weights["output_proj"] = draw(vocab + 1, model_dim)

    return FrozenBackbone(num_layers, model_dim, ffn_dim, input_dim, vocab,
                          seed, weights)


@dataclass
class ForwardTrace:
    """Per-layer activations of one forward pass.

    ``layer_inputs[l]`` is the activation leaving block ``l`` before any
    adapter touches it; ``adapted[l]`` is what the next block actually
    receives.  ``controller_states[l]`` holds the adapter's depth-recurrent
    state after layer ``l`` (None for adapters without one).  Fields hold
    arrays from :func:`backbone_forward` and graph nodes from
    :func:`backbone_forward_nodes`.
    """

    layer_inputs: list
    adapted: list
    controller_states: list
    log_probs: object


def backbone_forward_nodes(g: Graph, bb: FrozenBackbone, frames,
                           adapter=None, task: int | None = None) -> ForwardTrace:
    """Build one forward pass on an existing graph and return node-level trace.

    Block l computes ``z + V2 @ relu(V1 @ z)`` per frame (frames are rows).
    The adapter, when present, is consulted for every weight application and
    after every block; a null adapter reproduces the bare backbone exactly.
    """
    x = g.wrap(np.asarray(frames, dtype=np.float64) if not isinstance(frames, Node) else frames)
    if x.value.ndim != 2:
        raise DimensionError(f"frames must be 2-d [T x input_dim], got {x.value.shape}")
    if x.value.shape[0] == 0:
        raise EmptyInputError("forward pass needs at least one frame")
    if x.value.shape[1] != bb.input_dim:
        raise DimensionError(
            f"frames have {x.value.shape[1]} features, backbone expects {bb.input_dim}")

    state = adapter.begin(g, task, x.value.shape[0]) if adapter is not None else None

    def linear(name: str, inp):
        w = bb.weights[name]
        if adapter is not None:
            return adapter.linear(g, state, name, w, inp)
        return apply_weight(g, name, w, inp)

    z = linear("input_proj", x)
    layer_inputs, adapted, states = [], [], []
    for l in range(bb.num_layers):
        hidden = g.relu(linear(f"layers/{l}/V1", z))
        x_l = g.add(z, linear(f"layers/{l}/V2", hidden))
        if adapter is not None:
            x_adapted, state = adapter.post_block(g, state, l, z, x_l)
        else:
            x_adapted = x_l
        layer_inputs.append(x_l)
        adapted.append(x_adapted)
        states.append(adapter.state_h(state) if adapter is not None else None)
        z = x_adapted

    log_probs = g.log_softmax(linear("output_proj", z))
    return ForwardTrace(layer_inputs, adapted, states, log_probs)


def backbone_forward(bb: FrozenBackbone, frames, adapter=None,
                     task: int | None = None) -> ForwardTrace:
    """Value-level forward pass: same computation, arrays instead of nodes."""
    g = Graph()
    tr = backbone_forward_nodes(g, bb, frames, adapter=adapter, task=task)
    return ForwardTrace(
        [n.value for n in tr.layer_inputs],
        [n.value for n in tr.adapted],
        [None if s is None else s.value for s in tr.controller_states],
        tr.log_probs.value,
    )
