"""Optimization loops built on compressed, shifted gradient messages.

Three families:

* dcgd_shift_step: distributed compressed gradient descent where every
  worker compresses grad f_i(x) - h_i against its current shift h_i.
* gdci_step: model compression; workers compress the local model target
  x - gamma grad f_i(x) and the master relaxes toward the average.
* vr_gdci_step: the variance-reduced variant that compresses the model
  target against a learned shift.

auto_stepsizes exposes the largest step sizes for which each method
carries a linear-convergence certificate (given smoothness constants and
compressor variances).

All floating-point update rules are written in a single canonical order
of operations so that mathematically equivalent formulations (e.g. the
model-average and gradient-estimator views of gdci_step) reproduce
bit-identical trajectories from identical random streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from shiftcomp.compressors import CompressorSpec, bit_cost, compress
from shiftcomp.problems import Problem, SmoothnessInfo
from shiftcomp.shifts import (
    ShiftState,
    ShiftStrategy,
    diana_alpha_bound,
    star_refresh,
    update_shifts,
)

STEPSIZE_RULES = ("dcgd", "dcgd_induced", "diana", "rand_diana", "gdci", "vr_gdci")


@dataclass
class StepSizes:
    """Step-size bundle; unused fields stay None for simpler methods."""

    gamma: float
    eta: Optional[float] = None
    alpha: Optional[float] = None
    M: Optional[float] = None
    p: Optional[np.ndarray] = None

    def scaled(self, multiplier: float) -> "StepSizes":
        return StepSizes(self.gamma * multiplier, self.eta, self.alpha, self.M, self.p)


def auto_stepsizes(
    rule: str,
    info: SmoothnessInfo,
    n: int,
    omegas: np.ndarray,
    deltas: Optional[np.ndarray] = None,
    alpha: Optional[float] = None,
    p: Optional[np.ndarray] = None,
    M: Optional[float] = None,
) -> StepSizes:
    """Largest certified step sizes for ``rule``.

    omegas are the per-worker variance constants of the main compressors;
    deltas the contraction constants of inner compressors used by shift
    updates (zero when absent). The iterate-compression rules use the
    worst-case omega across workers.
    """
    if rule not in STEPSIZE_RULES:
        raise ValueError(f"unknown step-size rule {rule!r}")
    omegas = np.asarray(omegas, dtype=np.float64)
    if omegas.shape != (n,):
        raise ValueError("need one omega per worker")
    if deltas is None:
        deltas = np.zeros(n)
    deltas = np.asarray(deltas, dtype=np.float64)
    L, L_max, mu = info.L, info.L_max, info.mu
    L_i = info.L_i
    w_max = float(omegas.max())

    if rule == "dcgd":
        return StepSizes(1.0 / (L + 2.0 * np.max(L_i * omegas) / n))

    if rule == "dcgd_induced":
        # shifts built from a contractive compressor cut the effective
        # variance to omega_i (1 - delta_i)
        return StepSizes(1.0 / (L + np.max(L_i * omegas * (1.0 - deltas)) / n))

    if rule == "diana":
        if alpha is None:
            alpha = diana_alpha_bound(omegas, deltas)
        if M is None:
            M = 4.0 / (n * alpha)
        if M <= 2.0 / (n * alpha):
            raise ValueError("shift-tracking weight M is below the stability threshold")
        gamma = 1.0 / ((2.0 / n) * np.max(omegas * L_i) + (1.0 + alpha * M) * L_max)
        return StepSizes(float(gamma), alpha=float(alpha), M=float(M))

    if rule == "rand_diana":
        if p is None:
            p = np.full(n, 1.0 / (w_max + 1.0))
        p = np.atleast_1d(np.asarray(p, dtype=np.float64))
        if p.shape != (n,):
            p = np.full(n, float(p[0]))
        p_min = float(p.min())
        if M is None:
            M = 4.0 * w_max / (n * p_min)
        gamma = 1.0 / ((1.0 + 2.0 * w_max / n) * L_max + M * np.max(p * L_i))
        return StepSizes(float(gamma), M=float(M), p=p)

    if rule == "gdci":
        if mu <= 0:
            raise ValueError("iterate-compression rules need mu > 0")
        eta = 1.0 / (L / mu + (2.0 * w_max / n) * (L_max / mu - 1.0))
        gamma = (1.0 + 2.0 * eta * w_max / n) / (eta * (L + 2.0 * L_max * w_max / n))
        # guard the deterministic part of the step: the effective gradient
        # step is eta*gamma, which must stay in the classical stable range
        gamma = min(gamma, 2.0 / ((L + mu) * eta))
        return StepSizes(float(gamma), eta=float(eta))

    # vr_gdci
    if mu <= 0:
        raise ValueError("iterate-compression rules need mu > 0")
    if alpha is None:
        alpha = 1.0 / (w_max + 1.0)
    eta = 1.0 / (L / mu + (6.0 * w_max / n) * (L_max / mu - 1.0))
    gamma = (1.0 + 6.0 * w_max * eta / n) / (eta * (L + 6.0 * L_max * w_max / n))
    gamma = min(gamma, 2.0 / ((L + mu) * eta))
    return StepSizes(float(gamma), eta=float(eta), alpha=float(alpha))


@dataclass
class StepResult:
    x: np.ndarray
    bits: int
    estimate: np.ndarray  # applied gradient estimate (or model target)
    gradients: Optional[np.ndarray] = None  # local gradients at the old iterate


def dcgd_shift_step(
    problem: Problem,
    x: np.ndarray,
    k: int,
    specs: Sequence[CompressorSpec],
    strategy: ShiftStrategy,
    state: ShiftState,
    msg_rngs: Sequence[np.random.Generator],
    shift_rngs: Sequence[np.random.Generator],
    step: StepSizes,
) -> StepResult:
    """One round of compressed gradient descent with shifts.

    Workers send m_i = Q_i(grad f_i(x) - h_i) (preceded by an inner
    message c_i when the strategy compresses its own shift innovation);
    the master steps along h_mean + mean(c_i + m_i) and every party then
    applies the strategy's shift update.
    """
    grads = problem.worker_gradients(x)
    n, d = grads.shape
    if strategy.kind == "star":
        star_refresh(state, strategy, grads, shift_rngs)
    increments = np.empty((n, d))
    bits = 0
    for i in range(n):
        delta = grads[i] - state.h[i]
        inner = strategy.inner_spec(i) if strategy.kind == "diana" else None
        if inner is not None:
            c = compress(inner, delta, shift_rngs[i])
            bits += bit_cost(inner, c)
            m = compress(specs[i], delta - c.dense_value, msg_rngs[i])
            increments[i] = c.dense_value + m.dense_value
        else:
            m = compress(specs[i], delta, msg_rngs[i])
            increments[i] = m.dense_value
        bits += bit_cost(specs[i], m)
    g = state.h_mean + increments.mean(axis=0)
    x_new = x - step.gamma * g
    bits += update_shifts(state, strategy, grads, k, shift_rngs, message_increments=increments, x=x)
    return StepResult(x_new, bits, g, grads)


def gdci_step(
    problem: Problem,
    x: np.ndarray,
    k: int,
    specs: Sequence[CompressorSpec],
    rngs: Sequence[np.random.Generator],
    step: StepSizes,
    formulation: str = "model",
) -> StepResult:
    """One round of gradient descent with compressed iterates.

    Workers compress their local model target T_i = x - gamma grad f_i(x);
    the master forms Delta = mean Q_i(T_i) and relaxes x toward it. The two
    formulations are the model average x+ = (1 - eta) x + eta Delta and the
    gradient-estimator view x+ = x - eta gamma * (1/gamma)(x - Delta); both
    are evaluated through the identical canonical expression
    x+ = x - eta (x - Delta), so they agree bit for bit. They differ in the
    reported estimate: the model target vs the implied gradient estimate.
    """
    if formulation not in ("model", "estimator"):
        raise ValueError(f"unknown gdci formulation {formulation!r}")
    if step.eta is None:
        raise ValueError("gdci needs a relaxation step eta")
    grads = problem.worker_gradients(x)
    n, d = grads.shape
    qs = np.empty((n, d))
    bits = 0
    for i in range(n):
        q = compress(specs[i], x - step.gamma * grads[i], rngs[i])
        qs[i] = q.dense_value
        bits += bit_cost(specs[i], q)
    delta = np.add.reduce(qs, axis=0) / n
    residual = x - delta  # equals gamma * (gradient estimate)
    x_new = x - step.eta * residual
    estimate = residual / step.gamma if formulation == "estimator" else delta
    return StepResult(x_new, bits, estimate, grads)


def vr_gdci_step(
    problem: Problem,
    x: np.ndarray,
    k: int,
    specs: Sequence[CompressorSpec],
    state: ShiftState,
    rngs: Sequence[np.random.Generator],
    step: StepSizes,
) -> StepResult:
    """One round of variance-reduced compressed-iterate descent.

    Workers compress T_i - h_i where T_i = x - gamma grad f_i(x); both
    sides move their shifts by alpha times the message, and the master
    relaxes x toward delta_mean + h_mean. The shifts converge to
    T_i(x*), removing the convergence neighborhood of gdci_step.
    """
    if step.eta is None or step.alpha is None:
        raise ValueError("vr_gdci needs both eta and alpha")
    grads = problem.worker_gradients(x)
    n, d = grads.shape
    deltas = np.empty((n, d))
    bits = 0
    for i in range(n):
        q = compress(specs[i], x - step.gamma * grads[i] - state.h[i], rngs[i])
        deltas[i] = q.dense_value
        bits += bit_cost(specs[i], q)
    delta_mean = deltas.mean(axis=0)
    target = delta_mean + state.h_mean
    state.h += step.alpha * deltas
    state.h_mean = state.h_mean + step.alpha * delta_mean
    x_new = x - step.eta * (x - target)
    return StepResult(x_new, bits, target, grads)


# -- convergence certificates -------------------------------------------------


def lyapunov(
    rule: str,
    x: np.ndarray,
    x_star: np.ndarray,
    sigma: float,
    step: StepSizes,
    n: int,
    omegas: np.ndarray,
) -> float:
    """Lyapunov value whose one-step contraction each certificate bounds.

    sigma is the shift residual: omega-weighted for diana, unweighted for
    rand_diana and vr_gdci (see shifts.shift_residual).
    """
    r2 = float(np.sum((x - x_star) ** 2))
    if rule == "diana" or rule == "rand_diana":
        return r2 + step.M * step.gamma**2 * sigma
    if rule == "vr_gdci":
        w_max = float(np.max(omegas))
        return r2 + (4.0 * step.eta**2 * w_max / (step.alpha * n)) * sigma
    raise ValueError(f"no Lyapunov certificate for rule {rule!r}")


def lyapunov_rate(rule: str, step: StepSizes, mu: float, n: int, omegas: np.ndarray) -> float:
    """Certified per-step contraction factor of the matching Lyapunov value."""
    w_max = float(np.max(omegas))
    if rule == "diana":
        return max(1.0 - step.gamma * mu, 1.0 - step.alpha + 2.0 * w_max / (n * step.M))
    if rule == "rand_diana":
        p_min = float(np.min(step.p))
        return max(1.0 - step.gamma * mu, 1.0 - p_min + 2.0 * w_max / (n * step.M))
    if rule == "vr_gdci":
        return 1.0 - min(step.alpha / 2.0, step.eta)
    raise ValueError(f"no Lyapunov certificate for rule {rule!r}")
