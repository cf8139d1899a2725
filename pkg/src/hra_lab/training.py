"""Training loops: mixed-task batches, head routing, two-stage adaptation.

Every step samples a batch whose elements may belong to different tasks;
each element routes through its own head while the shared controller (and
nothing else) accumulates gradient from all of them.  The frozen backbone
enters the graph as constants, so its bytes cannot change.

Determinism: batch composition comes from a splitmix64 stream, graphs are
built in a fixed element order, and gradient accumulation order is pinned
by the tape, so a (seed, config) pair reproduces a run bit-for-bit in a
single-threaded process.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterSpec, build_adapter
from .autodiff import Graph
from .backbone import FrozenBackbone, backbone_forward_nodes
from .checkpoint import tensor_digest
from .ctc import ctc_loss, ctc_node, greedy_decode
from .data import SyntheticTask
from .errors import ConfigError, RoutingError
from .optim import OptimizerState, freeze_by_prefix, optimizer_step
from .rng import SplitMix64, derive

Array = np.ndarray


@dataclass
class TrainReport:
    """Everything a run produced, minus wall-clock noise.

    ``to_json_dict`` excludes ``wall_clock_s`` so two identical runs emit
    byte-identical reports; timings travel separately.
    """

    seed: int
    steps: int
    batch_size: int
    method: str
    num_tasks: int
    losses: list[float] = field(repr=False)
    task_mix_hashes: list[str] = field(repr=False)
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")
    final_val_loss: float = float("nan")
    label_error_rate: float = float("nan")
    param_shared: int = 0
    param_per_task: int = 0
    param_total: int = 0
    controller_digest_before: str | None = None
    controller_digest_after: str | None = None
    pretrain_final_loss: float | None = None
    wall_clock_s: float = 0.0

    def to_json_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "method": self.method,
            "num_tasks": self.num_tasks,
            "losses": self.losses,
            "task_mix_hashes": self.task_mix_hashes,
            "initial_train_loss": self.initial_train_loss,
            "final_train_loss": self.final_train_loss,
            "final_val_loss": self.final_val_loss,
            "label_error_rate": self.label_error_rate,
            "param_shared": self.param_shared,
            "param_per_task": self.param_per_task,
            "param_total": self.param_total,
        }
        if self.controller_digest_before is not None:
            out["controller_digest_before"] = self.controller_digest_before
            out["controller_digest_after"] = self.controller_digest_after
        if self.pretrain_final_loss is not None:
            out["pretrain_final_loss"] = self.pretrain_final_loss
        return out


def edit_distance(a, b) -> int:
    """Levenshtein distance between two label sequences."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def _task_mix_hash(task_ids) -> str:
    text = ",".join(str(t) for t in task_ids)
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:12]


def _resolve_heads(adapter, tasks, task_to_head):
    """Map task.n -> head index, validating the routing before any update."""
    if task_to_head is None:
        task_to_head = {task.n: i for i, task in enumerate(tasks)}
    for task in tasks:
        if task.n not in task_to_head:
            raise RoutingError(f"task {task.n} has no head assignment")
        head = task_to_head[task.n]
        if not 0 <= head < adapter.num_tasks:
            raise RoutingError(
                f"task {task.n} routes to head {head}, adapter has {adapter.num_tasks}")
    return task_to_head


def batch_loss_and_grads(bb: FrozenBackbone, adapter, batch) -> tuple[float, dict[str, Array]]:
    """Mean loss over (head_index, example) pairs plus name-keyed gradients."""
    g = Graph()
    losses = []
    for head, example in batch:
        trace = backbone_forward_nodes(g, bb, example.frames, adapter=adapter, task=head)
        losses.append(ctc_node(g, trace.log_probs, example.labels))
    total = losses[0]
    for node in losses[1:]:
        total = g.add(total, node)
    mean = g.affine(total, 1.0 / len(losses), 0.0)
    grads = {node.name: grad for node, grad in g.backward(mean).items()}
    return float(mean.value), grads


def dataset_loss(bb: FrozenBackbone, adapter, tasks, task_to_head,
                 split: str = "train") -> float:
    """Mean loss over every example of every task's split."""
    total, count = 0.0, 0
    for task in tasks:
        head = task_to_head[task.n]
        for example in task.split(split):
            log_probs = _forward_values(bb, adapter, example.frames, head)
            total += ctc_loss(log_probs, example.labels).loss
            count += 1
    if count == 0:
        raise ConfigError("no examples to evaluate")
    return total / count


def _forward_values(bb, adapter, frames, head) -> Array:
    g = Graph()
    trace = backbone_forward_nodes(g, bb, frames, adapter=adapter, task=head)
    return trace.log_probs.value


def evaluate(bb: FrozenBackbone, adapter, task: SyntheticTask, split: str = "test",
             head: int | None = None) -> tuple[float, float]:
    """Mean loss and greedy-decode label error rate over one task's split.

    The error rate is total edit distance divided by total reference length;
    it stands in for a word error rate but is named distinctly because the
    labels are synthetic symbols, not words.
    """
    examples = task.split(split)
    if not examples:
        raise ConfigError(f"split {split!r} of task {task.n} is empty")
    head = task.n if head is None else head
    total_loss = 0.0
    total_edit = 0
    total_len = 0
    for example in examples:
        log_probs = _forward_values(bb, adapter, example.frames, head)
        total_loss += ctc_loss(log_probs, example.labels).loss
        decoded = greedy_decode(log_probs)
        total_edit += edit_distance(decoded, example.labels)
        total_len += len(example.labels)
    return total_loss / len(examples), total_edit / total_len


def _label_error_rate(bb, adapter, tasks, task_to_head, split: str) -> float:
    total_edit, total_len = 0, 0
    for task in tasks:
        head = task_to_head[task.n]
        for example in task.split(split):
            decoded = greedy_decode(_forward_values(bb, adapter, example.frames, head))
            total_edit += edit_distance(decoded, example.labels)
            total_len += len(example.labels)
    return total_edit / total_len


def train_multi_task(bb: FrozenBackbone, adapter, tasks, *, steps: int,
                     batch_size: int, opt: OptimizerState, seed: int,
                     freeze: frozenset[str] = frozenset(),
                     task_to_head: dict[int, int] | None = None) -> TrainReport:
    """Train an adapter on mixed-task batches with per-task head routing.

    Each batch element independently picks a uniform task, then a uniform
    training example of that task.  Head gradients flow only from their own
    task's elements; the controller (when present) hears everything.
    """
    if steps < 0 or batch_size < 1:
        raise ConfigError("need steps >= 0 and batch_size >= 1")
    task_to_head = _resolve_heads(adapter, tasks, task_to_head)
    rng = SplitMix64(derive(seed, "batches"))
    start = time.perf_counter()

    initial = dataset_loss(bb, adapter, tasks, task_to_head, "train")
    losses: list[float] = []
    mixes: list[str] = []
    for _ in range(steps):
        batch = []
        mix = []
        for _ in range(batch_size):
            task = tasks[rng.randint(len(tasks))]
            example = task.train[rng.randint(len(task.train))]
            batch.append((task_to_head[task.n], example))
            mix.append(task.n)
        loss, grads = batch_loss_and_grads(bb, adapter, batch)
        optimizer_step(adapter.params(), grads, opt, freeze)
        losses.append(loss)
        mixes.append(_task_mix_hash(mix))

    counts = adapter.param_count()
    report = TrainReport(
        seed=seed, steps=steps, batch_size=batch_size, method=adapter.method,
        num_tasks=len(tasks), losses=losses, task_mix_hashes=mixes,
        initial_train_loss=initial,
        final_train_loss=dataset_loss(bb, adapter, tasks, task_to_head, "train"),
        final_val_loss=dataset_loss(bb, adapter, tasks, task_to_head, "val"),
        label_error_rate=_label_error_rate(bb, adapter, tasks, task_to_head, "val"),
        param_shared=counts.shared, param_per_task=counts.per_task,
        param_total=counts.total,
    )
    report.wall_clock_s = time.perf_counter() - start
    return report


def online_adapt(bb: FrozenBackbone, pretrain_tasks, new_tasks, *,
                 spec: AdapterSpec, opt_kind: str, lr: float,
                 stage1_steps: int, stage2_steps: int, batch_size: int,
                 seed: int) -> TrainReport:
    """Two-stage adaptation: pre-train the controller, then freeze it.

    Stage 1 trains controller plus throwaway heads on the out-of-domain
    tasks.  Stage 2 keeps the trained controller bytes, registers fresh
    randomly initialized heads for the new tasks, and trains only those.
    The report carries controller digests before and after stage 2 so the
    freeze can be audited.
    """
    from .optim import make_optimizer

    if spec.method != "hra":
        raise ConfigError("online adaptation needs a shared-controller adapter")
    if spec.unshare_weights:
        raise ConfigError("online adaptation requires shared controller weights")
    pre_ids = {t.n for t in pretrain_tasks}
    new_ids = {t.n for t in new_tasks}
    overlap = pre_ids & new_ids
    if overlap:
        raise ConfigError(f"pretrain and new task sets overlap: {sorted(overlap)}")
    if not pretrain_tasks or not new_tasks:
        raise ConfigError("both task sets must be non-empty")

    start = time.perf_counter()
    stage1_adapter = build_adapter(spec, bb, len(pretrain_tasks),
                                   derive(seed, "stage1-init"))
    stage1 = train_multi_task(
        bb, stage1_adapter, pretrain_tasks, steps=stage1_steps,
        batch_size=batch_size, opt=make_optimizer(opt_kind, lr),
        seed=derive(seed, "stage1-train"),
        task_to_head={t.n: i for i, t in enumerate(pretrain_tasks)})

    # stage 2: same controller object, fresh heads, controller frozen
    from .hra import HeadRegistry, HraAdapter, init_head

    rng_seed = derive(seed, "stage2-init")
    registry = HeadRegistry()
    for i in range(len(new_tasks)):
        registry.add(init_head(spec.head, bb.model_dim, spec.recurrent_dim,
                               spec.head_hidden_dim,
                               SplitMix64(derive(rng_seed, "head", i)),
                               zero_init=spec.zero_init_head))
    stage2_adapter = HraAdapter(stage1_adapter.controllers[0], registry,
                                layer_mask=spec.layer_mask,
                                disable_recurrence=spec.disable_recurrence,
                                spec=spec)
    freeze = freeze_by_prefix(stage2_adapter.params(), "controller/")
    digest_before = tensor_digest(stage2_adapter.params(), prefix="controller/")

    report = train_multi_task(
        bb, stage2_adapter, new_tasks, steps=stage2_steps,
        batch_size=batch_size, opt=make_optimizer(opt_kind, lr),
        seed=derive(seed, "stage2-train"), freeze=freeze,
        task_to_head={t.n: i for i, t in enumerate(new_tasks)})

    report.controller_digest_before = digest_before
    report.controller_digest_after = tensor_digest(stage2_adapter.params(),
                                                   prefix="controller/")
    report.pretrain_final_loss = stage1.final_train_loss
    report.wall_clock_s = time.perf_counter() - start
    report.adapter = stage2_adapter  # handy for callers; not serialized
    return report
