"""Shift-update strategies for compressed gradient descent.

A shift is a per-worker auxiliary vector h_i subtracted from the local
gradient before compression; the master tracks the aggregate h = mean(h_i)
without ever receiving the h_i densely. Four strategies are provided:

  fixed       h_i never changes
  star        h_i is rebuilt each round around the optimal local gradient
              (requires a reference solution; an oracle method)
  diana       h_i <- h_i + alpha * (compressed innovation); the master
              applies the same increment using the messages it already has
  rand_diana  h_i is the gradient at a reference point refreshed with
              probability p_i via a rare dense send

Master bookkeeping never re-aggregates worker state densely except for
rand-diana refreshes, which are charged as full sends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from shiftcomp.compressors import CompressorSpec, compress, dense_bits

STRATEGY_KINDS = ("fixed", "star", "diana", "rand_diana")


@dataclass
class ShiftStrategy:
    """Configuration of a shift-update rule.

    inner holds the per-worker compressors used inside the update (the
    C_i of star/diana); None entries mean the zero operator.
    """

    kind: str
    alpha: Optional[float] = None
    p: Optional[np.ndarray] = None  # per-worker refresh probabilities
    inner: Optional[Sequence[Optional[CompressorSpec]]] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown shift strategy {self.kind!r}")
        # alpha (diana) and p (rand_diana) may stay None here; the runner
        # fills them from the step-size rule before the first update
        if self.kind == "rand_diana" and self.p is not None:
            self.p = np.atleast_1d(np.asarray(self.p, dtype=np.float64))
            if np.any((self.p <= 0) | (self.p > 1)):
                raise ValueError("refresh probabilities must lie in (0, 1]")

    def inner_spec(self, i: int) -> Optional[CompressorSpec]:
        if self.inner is None:
            return None
        return self.inner[i]


def diana_alpha_bound(omegas: np.ndarray, deltas: np.ndarray | None = None) -> float:
    """Largest admissible diana step: min_i 1/(1 + omega_i (1 - delta_i))."""
    omegas = np.asarray(omegas, dtype=np.float64)
    if deltas is None:
        deltas = np.zeros_like(omegas)
    return float(np.min(1.0 / (1.0 + omegas * (1.0 - np.asarray(deltas)))))


@dataclass
class ShiftState:
    """Per-worker shifts plus the master aggregate.

    h_mean is maintained by the same incremental rules the master would
    use from received messages; tests assert it stays within 1e-12 of the
    true mean.
    """

    h: np.ndarray  # (n, d)
    h_mean: np.ndarray  # (d,)
    w: Optional[np.ndarray] = None  # (n, d) reference points (rand_diana)
    h_star: Optional[np.ndarray] = None  # (n, d) optimal local gradients (star)

    @property
    def n(self) -> int:
        return self.h.shape[0]

    def copy(self) -> "ShiftState":
        return ShiftState(
            self.h.copy(),
            self.h_mean.copy(),
            None if self.w is None else self.w.copy(),
            None if self.h_star is None else self.h_star.copy(),
        )


def init_state(
    strategy: ShiftStrategy,
    n: int,
    d: int,
    x0: Optional[np.ndarray] = None,
    initial_gradients: Optional[np.ndarray] = None,
    reference_gradients: Optional[np.ndarray] = None,
    h0: Optional[np.ndarray] = None,
) -> ShiftState:
    """Initial shift state: h_i = 0 unless overridden.

    rand_diana anchors its reference points at x0, so its initial shifts
    are the local gradients there. star stores the optimal local
    gradients it shifts around.
    """
    if h0 is not None:
        h = np.array(h0, dtype=np.float64).reshape(n, d).copy()
    else:
        h = np.zeros((n, d))
    w = None
    h_star = None
    if strategy.kind == "rand_diana":
        if x0 is None or initial_gradients is None:
            raise ValueError("rand_diana needs the starting point and its local gradients")
        w = np.tile(np.asarray(x0, dtype=np.float64), (n, 1))
        h = np.array(initial_gradients, dtype=np.float64).copy()
    if strategy.kind == "star":
        if reference_gradients is None:
            raise ValueError("star shifts need the reference solution's local gradients")
        h_star = np.array(reference_gradients, dtype=np.float64).copy()
    return ShiftState(h, h.mean(axis=0), w, h_star)


def star_refresh(
    state: ShiftState,
    strategy: ShiftStrategy,
    gradients: np.ndarray,
    rngs: Sequence[np.random.Generator],
) -> int:
    """Rebuild star shifts h_i = grad f_i(x*) + C_i(grad f_i(x^k) - grad f_i(x*)).

    Called before the round's messages are formed, so they compress
    against the refreshed shift. Costs no bits: the master replays the
    worker's C_i draw on its own copy of the stream.
    """
    if state.h_star is None:
        raise ValueError("star strategy without a reference solution")
    for i in range(state.n):
        spec = strategy.inner_spec(i)
        if spec is None:
            state.h[i] = state.h_star[i]
        else:
            c = compress(spec, gradients[i] - state.h_star[i], rngs[i])
            state.h[i] = state.h_star[i] + c.dense_value
    state.h_mean = state.h.mean(axis=0)
    return 0


def update_shifts(
    state: ShiftState,
    strategy: ShiftStrategy,
    gradients: np.ndarray,
    k: int,
    rngs: Sequence[np.random.Generator],
    message_increments: Optional[np.ndarray] = None,
    x: Optional[np.ndarray] = None,
) -> int:
    """Post-round shift update; returns the extra bits it communicated.

    * fixed: no-op, 0 bits.
    * star: handled by star_refresh before the round; no-op here.
    * diana: h_i += alpha * (c_i + m_i) using the round's already-sent
      compressed innovations; the master applies the identical increment
      to its aggregate, so nothing extra is transmitted (the c_i bits are
      charged by the caller when an inner compressor is present).
    * rand_diana: with probability p_i worker i re-anchors at x^k and
      ships its dense local gradient (64 d bits).
    """
    n, d = state.h.shape
    if strategy.kind in ("fixed", "star"):
        return 0

    if strategy.kind == "diana":
        if strategy.alpha is None:
            raise ValueError("diana shift step size alpha was never set")
        if message_increments is None:
            raise ValueError("diana update needs the round's message increments")
        state.h += strategy.alpha * message_increments
        # master-side identity: h^{k+1} = h^k + alpha * mean(c_i + m_i)
        state.h_mean = state.h_mean + strategy.alpha * message_increments.mean(axis=0)
        return 0

    # rand_diana
    if strategy.p is None:
        raise ValueError("rand_diana refresh probabilities were never set")
    if x is None:
        raise ValueError("rand_diana update needs the current iterate")
    p = strategy.p if strategy.p.shape == (n,) else np.full(n, strategy.p[0])
    extra_bits = 0
    refreshed = False
    for i in range(n):
        if rngs[i].random() < p[i]:
            state.w[i] = x
            state.h[i] = gradients[i]
            extra_bits += dense_bits(d)
            refreshed = True
    if refreshed:
        state.h_mean = state.h.mean(axis=0)
    return extra_bits


def shift_residual(
    state: ShiftState,
    reference_gradients: np.ndarray,
    omegas: Optional[np.ndarray] = None,
) -> float:
    """sigma(h) = (1/n) sum_i w_i |h_i - grad f_i(x*)|^2.

    Weighted by the compressor variance constants (diana Lyapunov) when
    ``omegas`` is given, unweighted otherwise (rand-diana Lyapunov).
    """
    diffs = state.h - reference_gradients
    sq = np.sum(diffs * diffs, axis=1)
    if omegas is not None:
        sq = np.asarray(omegas) * sq
    return float(np.mean(sq))
