"""Alignment-marginalizing sequence loss with a blank symbol (CTC).

The loss of a label sequence under per-frame log-probabilities is the
negative log of the summed probability of every frame-level symbol string
that collapses to the labels (merge adjacent repeats, then drop blanks).
The blank class is always the last column, index ``vocab``.

Everything runs in log space: the dynamic program works on the extended
label sequence (blanks interleaved, length 2S+1) with log-sum-exp
transitions, because the plain-probability recursion underflows after a
few dozen frames.  Three routes to the same quantity live here:

* :func:`ctc_loss` - the forward/backward dynamic program; its gradient
  comes analytically from alpha*beta occupancies, not from taping the DP;
* :func:`ctc_brute_force` - literal enumeration of all (V+1)^T strings,
  the oracle the DP is tested against;
* :func:`ctc_loss_taped` - the same DP built from scalar tape ops, used to
  cross-check the analytic gradient through reverse mode.
"""

from __future__ import annotations

import itertools
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Graph, Node
from .errors import ContractError

Array = np.ndarray

BRUTE_FORCE_CAP = 10**6
NEG_INF = -np.inf


class CtcResult(NamedTuple):
    loss: float
    grad: Array
    feasible: bool


def _validate(log_probs: Array, labels: Sequence[int]) -> tuple[int, int, list[int]]:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ContractError(f"log_probs must be [T x (V+1)], got shape {lp.shape}")
    T, width = lp.shape
    vocab = width - 1
    if vocab < 1:
        raise ContractError("log_probs need at least one label class plus blank")
    labels = [int(l) for l in labels]
    if len(labels) < 1:
        raise ContractError("labels must be non-empty")
    bad = [l for l in labels if not 0 <= l < vocab]
    if bad:
        raise ContractError(f"labels out of range [0, {vocab}): {bad}")
    return T, vocab, labels


def repeats(labels: Sequence[int]) -> int:
    return sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def is_feasible(num_frames: int, labels: Sequence[int]) -> bool:
    """An alignment exists iff T >= S + (number of adjacent equal pairs)."""
    return num_frames >= len(labels) + repeats(labels)


def extended_labels(labels: Sequence[int], blank: int) -> list[int]:
    ext = [blank]
    for l in labels:
        ext += [int(l), blank]
    return ext


def collapse(symbols: Sequence[int], blank: int) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for s in symbols:
        if s != prev:
            if s != blank:
                out.append(s)
            prev = s
    return out


def greedy_decode(log_probs: Array) -> list[int]:
    """Collapse the per-frame argmax path."""
    lp = np.asarray(log_probs, dtype=np.float64)
    blank = lp.shape[1] - 1
    return collapse(np.argmax(lp, axis=1).tolist(), blank)


def _alpha_beta(lp: Array, ext: list[int]) -> tuple[Array, Array, float]:
    """Forward/backward log-occupancy tables over extended-label states.

    alpha[t, s] includes the emission at frame t; beta[t, s] covers frames
    strictly after t.  Their sum at any t is the total log-probability.
    """
    T = lp.shape[0]
    S = len(ext)
    blank = lp.shape[1] - 1

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            acc = alpha[t - 1, s]
            if s >= 1:
                acc = np.logaddexp(acc, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                acc = np.logaddexp(acc, alpha[t - 1, s - 2])
            alpha[t, s] = acc + lp[t, ext[s]]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            acc = beta[t + 1, s] + lp[t + 1, ext[s]]
            if s + 1 < S:
                acc = np.logaddexp(acc, beta[t + 1, s + 1] + lp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                acc = np.logaddexp(acc, beta[t + 1, s + 2] + lp[t + 1, ext[s + 2]])
            beta[t, s] = acc

    total = alpha[T - 1, S - 1]
    if S > 1:
        total = np.logaddexp(total, alpha[T - 1, S - 2])
    return alpha, beta, float(total)


def ctc_loss(log_probs, labels: Sequence[int]) -> CtcResult:
    """Loss and its exact gradient with respect to the log-probabilities.

    Infeasible instances (too few frames for the labels) return
    ``(inf, zeros, feasible=False)`` instead of raising, so callers can
    flag and skip them uniformly.

    The gradient at (t, k) is ``-sum_s exp(alpha[t,s] + beta[t,s] - logP)``
    over extended states s whose symbol is k: each aligned path crosses
    frame t exactly once, so the occupancy ratio is the exact derivative of
    ``-logP`` treating the log-probabilities as free variables.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T, vocab, labels = _validate(lp, labels)
    if not is_feasible(T, labels):
        return CtcResult(float("inf"), np.zeros_like(lp), False)

    blank = vocab
    ext = extended_labels(labels, blank)
    alpha, beta, log_total = _alpha_beta(lp, ext)

    occupancy = np.full((T, vocab + 1), NEG_INF)
    ab = alpha + beta
    for s, sym in enumerate(ext):
        occupancy[:, sym] = np.logaddexp(occupancy[:, sym], ab[:, s])
    grad = -np.exp(occupancy - log_total)
    return CtcResult(-log_total, grad, True)


def ctc_brute_force(log_probs, labels: Sequence[int]) -> float:
    """Enumerate every frame-level string and sum the ones that collapse
    to the labels.  Refuses when (V+1)^T exceeds the enumeration cap."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, vocab, labels = _validate(lp, labels)
    width = vocab + 1
    if width**T > BRUTE_FORCE_CAP:
        raise ContractError(
            f"brute force refuses: {width}^{T} strings exceed cap {BRUTE_FORCE_CAP}")
    blank = vocab
    total = NEG_INF
    for string in itertools.product(range(width), repeat=T):
        if collapse(string, blank) == labels:
            total = np.logaddexp(total, sum(lp[t, s] for t, s in enumerate(string)))
    return float(-total)


def ctc_loss_taped(g: Graph, log_probs: Node, labels: Sequence[int]) -> Node:
    """The same dynamic program expressed in scalar tape ops.

    Only forward-reachable states that can still reach a final state are
    materialized, so no -inf value ever enters the tape.  Intended for
    small verification instances; training uses :func:`ctc_node`.
    """
    lp = log_probs.value
    T, vocab, labels = _validate(lp, labels)
    if not is_feasible(T, labels):
        raise ContractError("taped loss needs a feasible instance")
    blank = vocab
    ext = extended_labels(labels, blank)
    S = len(ext)

    cells: dict[tuple[int, int], Node] = {}
    for t in range(T):
        s_lo = max(0, S - 2 * (T - t))
        s_hi = min(2 * t + 1, S - 1)
        for s in range(s_lo, s_hi + 1):
            emit = g.pick(log_probs, t, ext[s])
            if t == 0:
                cells[(0, s)] = emit  # s in {0, 1} by the bounds above
                continue
            incoming = [cells.get((t - 1, s)), cells.get((t - 1, s - 1))]
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                incoming.append(cells.get((t - 1, s - 2)))
            incoming = [n for n in incoming if n is not None]
            if not incoming:
                continue  # state unreachable once repeat-blocked skips are excluded
            acc = incoming[0]
            for n in incoming[1:]:
                acc = g.logaddexp(acc, n)
            cells[(t, s)] = g.add(acc, emit)

    finals = [cells.get((T - 1, S - 1)), cells.get((T - 1, S - 2))]
    finals = [n for n in finals if n is not None]
    if not finals:
        raise ContractError("no reachable final state; instance infeasible")
    total = finals[0]
    for n in finals[1:]:
        total = g.logaddexp(total, n)
    return g.affine(total, -1.0, 0.0)


def ctc_node(g: Graph, log_probs: Node, labels: Sequence[int]) -> Node:
    """Loss as a single tape node backed by the analytic gradient."""
    result = ctc_loss(log_probs.value, labels)
    grad = result.grad

    def vjp(up):
        return (float(up) * grad,)

    return g.custom("ctc", (log_probs,), np.asarray(result.loss), vjp)
