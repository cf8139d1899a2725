"""Synthetic multi-task sequence corpora.

Each task hides a private random projection and a label rule; the model
sees only (frame sequence, label sequence) pairs.  Labels occupy contiguous
frame segments, so with at least two frames per label every example is
feasible for the alignment-marginalizing loss regardless of repeats.

Two rule families:

* ``linear`` - the segment's label is one-hot inside the latent vector, so
  a linear readout of the frames can recover it;
* ``xor``    - the segment carries two independent +-1 bits and the label
  is their parity, which no linear function of the frame can compute.  This
  family separates linear task heads from FFN heads in practice.

``mixed`` alternates the two families across tasks (even ids linear, odd
ids xor).  Same (seed, task id) always reproduces the same datasets, and
train/validation/test splits are disjoint slices of one example stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import SplitMix64, derive

Array = np.ndarray

RULES = ("linear", "xor", "mixed")


@dataclass(frozen=True)
class Example:
    frames: Array          # [T x input_dim]
    labels: tuple[int, ...]


@dataclass
class TaskConfig:
    input_dim: int = 4
    vocab: int = 2
    rule: str = "mixed"
    num_train: int = 48
    num_val: int = 12
    num_test: int = 12
    min_labels: int = 1
    max_labels: int = 3
    frames_per_label: int = 2
    noise: float = 0.05

    def validate(self) -> None:
        if self.rule not in RULES:
            raise ConfigError(f"tasks.rule must be one of {RULES}, got {self.rule!r}")
        if self.vocab < 1:
            raise ConfigError("tasks.vocab must be >= 1")
        if self.rule in ("xor", "mixed") and self.vocab < 2:
            raise ConfigError("xor tasks need vocab >= 2")
        if not 1 <= self.min_labels <= self.max_labels:
            raise ConfigError("need 1 <= min_labels <= max_labels")
        if self.frames_per_label < 2:
            # one frame per label cannot absorb adjacent repeated labels
            raise ConfigError("frames_per_label must be >= 2")
        if self.input_dim < 1:
            raise ConfigError("tasks.input_dim must be >= 1")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ConfigError("every split needs at least one example")
        if self.noise < 0:
            raise ConfigError("tasks.noise must be >= 0")


@dataclass
class SyntheticTask:
    n: int
    rule: str
    vocab: int
    train: list[Example] = field(repr=False)
    val: list[Example] = field(repr=False)
    test: list[Example] = field(repr=False)

    def split(self, name: str) -> list[Example]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ConfigError(f"unknown split {name!r}") from None


def _rule_for(n: int, cfg_rule: str) -> str:
    if cfg_rule == "mixed":
        return "xor" if n % 2 == 1 else "linear"
    return cfg_rule


def _gen_example(rng: SplitMix64, proj: Array, rule: str, cfg: TaskConfig) -> Example:
    num_labels = cfg.min_labels + rng.randint(cfg.max_labels - cfg.min_labels + 1)
    labels: list[int] = []
    latents: list[Array] = []
    for _ in range(num_labels):
        if rule == "linear":
            z = rng.randint(cfg.vocab)
            lat = np.zeros(cfg.vocab + 1)
            lat[z] = 1.0
            lat[-1] = 1.0
            labels.append(z)
        else:  # xor: label is the parity of two hidden +-1 bits
            b1 = rng.randint(2)
            b2 = rng.randint(2)
            lat = np.array([2.0 * b1 - 1.0, 2.0 * b2 - 1.0, 1.0])
            labels.append(b1 ^ b2)
        latents.append(lat)
    frames = np.empty((num_labels * cfg.frames_per_label, cfg.input_dim))
    row = 0
    for lat in latents:
        clean = proj @ lat
        for _ in range(cfg.frames_per_label):
            frames[row] = clean + rng.normal_array((cfg.input_dim,), cfg.noise)
            row += 1
    return Example(frames, tuple(labels))


def make_synthetic_tasks(seed: int, num_tasks: int, cfg: TaskConfig) -> list[SyntheticTask]:
    """Generate ``num_tasks`` tasks; task n draws from derive(seed, "task", n).

    Per task the stream draws the hidden projection first, then examples in
    train, validation, test order.
    """
    if num_tasks < 1:
        raise ConfigError("num_tasks must be >= 1")
    cfg.validate()
    tasks = []
    for n in range(num_tasks):
        rng = SplitMix64(derive(seed, "task", n))
        rule = _rule_for(n, cfg.rule)
        latent_dim = cfg.vocab + 1 if rule == "linear" else 3
        proj = rng.uniform_array((cfg.input_dim, latent_dim), -1.0, 1.0)
        splits = [
            [_gen_example(rng, proj, rule, cfg) for _ in range(count)]
            for count in (cfg.num_train, cfg.num_val, cfg.num_test)
        ]
        tasks.append(SyntheticTask(n, rule, cfg.vocab, *splits))
    return tasks
