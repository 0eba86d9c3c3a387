"""Experiment orchestration: seeding, runs, Monte-Carlo averaging.

Runs are fully deterministic functions of (config, master seed). Every
random draw comes from a counter-based stream addressed by
(master seed, worker, iteration, purpose), so workers could execute in
any order or in parallel without changing a single bit of the result;
aggregation always sums in worker-index order.

The driver has an inlined fast path for all-sparsifier configurations
(the bulk of the long experiments); it consumes random streams and
produces floating-point results identical to the generic operator path,
which the test suite cross-checks.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from shiftcomp import algorithms, shifts
from shiftcomp.algorithms import StepSizes, auto_stepsizes
from shiftcomp.compressors import CompressorSpec, index_bits, rand_k_subset
from shiftcomp.datagen import make_regression, shard as make_shards
from shiftcomp.problems import Problem, ReferenceSolution
from shiftcomp.shifts import ShiftState, ShiftStrategy

METHODS = ("dcgd", "gdci", "vr_gdci")
DIVERGENCE_THRESHOLD = 1e12


def seed_stream(master_seed: int, worker: int, k: int, purpose: str) -> np.random.Generator:
    """Independent counter-based stream for one (worker, iteration, purpose).

    The tuple is folded into SeedSequence entropy words; distinct tuples
    give statistically independent Philox streams, and the same tuple
    always reproduces the same stream.
    """
    words = (
        int(master_seed) & 0xFFFFFFFF,
        (int(master_seed) >> 32) & 0xFFFFFFFF,
        int(worker) & 0xFFFFFFFF,
        int(k) & 0xFFFFFFFF,
        zlib.crc32(purpose.encode()),
    )
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass
class RunConfig:
    """Everything one deterministic run needs besides the problem itself."""

    method: str  # dcgd | gdci | vr_gdci
    specs: Sequence[CompressorSpec]
    strategy: Optional[ShiftStrategy] = None  # dcgd only
    steps: Optional[StepSizes] = None
    stepsize_rule: Optional[str] = None  # used when steps is None
    stepsize_multiplier: float = 1.0
    iters: int = 1000
    seed: int = 0
    eps: Optional[float] = None
    budget_bits: Optional[int] = None
    record_every: int = 1
    x0: Optional[np.ndarray] = None
    x0_scale: float = 10.0
    x0_scale_is_variance: bool = False  # True: x0_scale is the variance, not the sd
    gdci_formulation: str = "model"
    track_lyapunov: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.iters < 1:
            raise ValueError("iteration budget must be positive")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("target tolerance must be positive")
        if self.budget_bits is not None and self.budget_bits <= 0:
            raise ValueError("bit budget must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be positive")
        if self.method == "dcgd" and self.strategy is None:
            self.strategy = ShiftStrategy("fixed")
        for spec in self.specs:
            if not spec.is_unbiased:
                raise ValueError("main compressors must be unbiased")


@dataclass
class RunRecord:
    k: np.ndarray
    rel_error: np.ndarray
    cum_bits: np.ndarray
    lyapunov: Optional[np.ndarray]
    status: str  # converged | budget | diverged | completed
    iters_done: int
    bits_total: int
    x_final: np.ndarray
    bits_to_eps: Optional[int]
    iters_to_eps: Optional[int]
    seed: int


@dataclass
class MonteCarloRecord:
    k: np.ndarray
    mean_rel_error: np.ndarray
    min_rel_error: np.ndarray
    max_rel_error: np.ndarray
    mean_cum_bits: np.ndarray
    statuses: list
    bits_to_eps: list
    iters_to_eps: list
    final_rel_error: np.ndarray
    records: Optional[list] = None


def monte_carlo_seed(master_seed: int, s: int) -> int:
    """Per-replicate master seed; replicate 0 reuses the master seed so a
    one-seed Monte-Carlo batch reproduces a plain run exactly."""
    return int(master_seed) + s


def _resolve_steps(config: RunConfig, problem: Problem) -> StepSizes:
    if config.steps is not None:
        steps = config.steps
    else:
        rule = config.stepsize_rule
        if rule is None:
            raise ValueError("need either explicit steps or a step-size rule")
        info = problem.smoothness_constants()
        omegas = np.array([s.omega for s in config.specs])
        deltas = None
        alpha = p = None
        if config.strategy is not None:
            if config.strategy.inner is not None:
                deltas = np.array(
                    [0.0 if s is None else s.delta for s in config.strategy.inner]
                )
            alpha = config.strategy.alpha
            p = config.strategy.p
        steps = auto_stepsizes(rule, info, problem.n, omegas, deltas=deltas, alpha=alpha, p=p)
    if config.stepsize_multiplier != 1.0:
        steps = steps.scaled(config.stepsize_multiplier)
    return steps


def _init_shift_state(
    config: RunConfig,
    problem: Problem,
    steps: StepSizes,
    x0: np.ndarray,
    reference: Optional[ReferenceSolution],
) -> Optional[ShiftState]:
    if config.method == "gdci":
        return None
    if config.method == "vr_gdci":
        h = np.zeros((problem.n, problem.d))
        return ShiftState(h, h.mean(axis=0))
    strat = config.strategy
    kwargs = {}
    if strat.kind == "rand_diana":
        kwargs["x0"] = x0
        kwargs["initial_gradients"] = problem.worker_gradients(x0)
    if strat.kind == "star":
        if reference is None:
            raise ValueError("star shifts need a reference solution")
        kwargs["reference_gradients"] = reference.worker_grads
    return shifts.init_state(strat, problem.n, problem.d, **kwargs)


def _sync_strategy_steps(config: RunConfig, steps: StepSizes) -> None:
    """Fill strategy parameters from resolved step sizes (alpha for diana,
    p for rand_diana) when the config left them to the rule."""
    strat = config.strategy
    if strat is None:
        return
    if strat.kind == "diana" and strat.alpha is None:
        strat.alpha = steps.alpha
    if strat.kind == "rand_diana" and steps.p is not None:
        strat.p = np.atleast_1d(steps.p)


def run(
    problem: Problem,
    config: RunConfig,
    reference: Optional[ReferenceSolution] = None,
    use_fast_path: bool = True,
) -> RunRecord:
    """Execute one deterministic run and record its trajectory."""
    n, d = problem.n, problem.d
    if len(config.specs) != n:
        raise ValueError("need one compressor spec per worker")
    if reference is None:
        reference = problem.solve_reference()
    x_star = reference.x_star

    steps = _resolve_steps(config, problem)
    _sync_strategy_steps(config, steps)
    if config.method in ("gdci", "vr_gdci") and steps.eta is None:
        raise ValueError(f"{config.method} needs a relaxation step eta")
    if config.method == "vr_gdci" and steps.alpha is None:
        raise ValueError("vr_gdci needs a shift step alpha")

    if config.x0 is not None:
        x = np.array(config.x0, dtype=np.float64)
    else:
        sd = np.sqrt(config.x0_scale) if config.x0_scale_is_variance else config.x0_scale
        x = sd * seed_stream(config.seed, 0, 0, "init").normal(size=d)
    state = _init_shift_state(config, problem, steps, x, reference)

    msg_rngs = [seed_stream(config.seed, i, 0, "message") for i in range(n)]
    shift_rngs = [seed_stream(config.seed, i, 0, "shift") for i in range(n)]

    do_step = _select_step(problem, config, steps, state, msg_rngs, shift_rngs, use_fast_path)

    lyap_rule = None
    lyap_ref = None
    lyap_omegas = np.array([s.omega for s in config.specs])
    if config.track_lyapunov:
        lyap_rule, lyap_ref = _lyapunov_setup(config, steps, reference)

    r0 = float(np.sum((x - x_star) ** 2))
    if r0 == 0:
        raise ValueError("starting point coincides with the optimum")

    ks, errs, bits_hist = [0], [1.0], [0]
    lyaps = [] if lyap_rule is not None else None
    if lyaps is not None:
        lyaps.append(_lyapunov_value(lyap_rule, x, x_star, state, lyap_ref, steps, n, lyap_omegas))

    cum_bits = 0
    status = "completed"
    bits_to_eps = None
    iters_to_eps = None
    k_done = 0
    for k in range(config.iters):
        x, step_bits = do_step(x, k)
        cum_bits += step_bits
        k_done = k + 1
        dx = x - x_star
        rel = float(dx @ dx) / r0
        record = (k_done % config.record_every == 0) or (k_done == config.iters)
        stop = False
        if not np.isfinite(rel) or rel > DIVERGENCE_THRESHOLD:
            status = "diverged"
            record = True
            stop = True
        elif config.eps is not None and rel <= config.eps:
            status = "converged"
            bits_to_eps = cum_bits
            iters_to_eps = k_done
            record = True
            stop = True
        elif config.budget_bits is not None and cum_bits >= config.budget_bits:
            status = "budget" if config.eps is not None else "completed"
            record = True
            stop = True
        if record:
            ks.append(k_done)
            errs.append(rel)
            bits_hist.append(cum_bits)
            if lyaps is not None:
                lyaps.append(
                    _lyapunov_value(lyap_rule, x, x_star, state, lyap_ref, steps, n, lyap_omegas)
                )
        if stop:
            break
    else:
        if config.eps is not None and status == "completed":
            status = "budget"

    return RunRecord(
        np.asarray(ks),
        np.asarray(errs),
        np.asarray(bits_hist, dtype=np.int64),
        None if lyaps is None else np.asarray(lyaps),
        status,
        k_done,
        cum_bits,
        x,
        bits_to_eps,
        iters_to_eps,
        config.seed,
    )


def _lyapunov_setup(config: RunConfig, steps: StepSizes, reference: ReferenceSolution):
    if config.method == "vr_gdci":
        # shifts chase the local model targets at the optimum
        ref = reference.x_star[None, :] - steps.gamma * reference.worker_grads
        return "vr_gdci", ref
    if config.method == "dcgd" and config.strategy.kind in ("diana", "rand_diana"):
        return config.strategy.kind, reference.worker_grads
    raise ValueError("no Lyapunov certificate for this configuration")


def _lyapunov_value(rule, x, x_star, state, ref_shifts, steps, n, omegas) -> float:
    weighted = omegas if rule == "diana" else None
    sigma = shifts.shift_residual(state, ref_shifts, weighted)
    return algorithms.lyapunov(rule, x, x_star, sigma, steps, n, omegas)


def _select_step(problem, config, steps, state, msg_rngs, shift_rngs, use_fast_path):
    """Bind the per-iteration closure; prefers the inlined sparsifier path."""
    specs = list(config.specs)
    n, d = problem.n, problem.d
    all_randk = all(s.kind == "rand_k" for s in specs)
    inner_free = config.strategy is None or config.strategy.inner is None
    if use_fast_path and all_randk and inner_free:
        Ks = [s.K for s in specs]
        scales = [d / K for K in Ks]
        msg_bits = sum(K * (64 + index_bits(d)) for K in Ks)
        strat = config.strategy

        # Chunked pre-draw: each worker's stream is consumed in exactly the
        # same order as by repeated scalar calls (rng.random fills doubles
        # sequentially), so trajectories match the generic path bit for bit.
        CHUNK = 256
        idx_cache = [None] * n
        u_cache = [None] * n  # rand_diana refresh uniforms
        rd = config.method == "dcgd" and strat is not None and strat.kind == "rand_diana"
        cache_hi = [0]
        equal_k = len(set(Ks)) == 1
        idx_stack = [None]  # (n, CHUNK, K) when all workers share one K
        u_stack = [None]
        scale_col = np.array(scales)[:, None]

        def _refill(k0):
            for i in range(n):
                keys = msg_rngs[i].random((CHUNK, d))
                if Ks[i] == d:
                    idx_cache[i] = np.broadcast_to(np.arange(d), (CHUNK, d))
                else:
                    idx_cache[i] = np.argpartition(keys, Ks[i], axis=1)[:, : Ks[i]]
                if rd:
                    u_cache[i] = shift_rngs[i].random(CHUNK)
            if equal_k:
                idx_stack[0] = np.stack(idx_cache).transpose(1, 0, 2)  # (CHUNK, n, K)
                if rd:
                    u_stack[0] = np.stack(u_cache, axis=1)  # (CHUNK, n)
            cache_hi[0] = k0 + CHUNK

        if config.method == "dcgd":
            if strat.kind == "star":
                # zero inner operators: the refreshed shifts are exactly the
                # reference gradients every round, so fix them once
                state.h[:] = state.h_star
                state.h_mean = state.h.mean(axis=0)
            diana = strat.kind == "diana"
            p = None
            if rd:
                p = strat.p if strat.p.shape == (n,) else np.full(n, float(strat.p[0]))

            def step(x, k):
                if k >= cache_hi[0]:
                    _refill(k)
                j = k - cache_hi[0] + CHUNK
                grads = problem.worker_gradients(x)
                h = state.h
                inc = np.zeros((n, d))
                if equal_k:
                    idxk = idx_stack[0][j]
                    vals = scale_col * (
                        np.take_along_axis(grads, idxk, axis=1)
                        - np.take_along_axis(h, idxk, axis=1)
                    )
                    np.put_along_axis(inc, idxk, vals, axis=1)
                else:
                    for i in range(n):
                        idx = idx_cache[i][j]
                        inc[i, idx] = scales[i] * (grads[i, idx] - h[i, idx])
                inc_mean = np.add.reduce(inc, axis=0) / n
                x_new = x - steps.gamma * (state.h_mean + inc_mean)
                extra = 0
                if diana:
                    h += strat.alpha * inc
                    state.h_mean = state.h_mean + strat.alpha * inc_mean
                elif rd:
                    u = u_stack[0][j] if equal_k else np.array([u_cache[i][j] for i in range(n)])
                    hits = np.nonzero(u < p)[0]
                    if hits.size:
                        state.w[hits] = x
                        h[hits] = grads[hits]
                        extra = 64 * d * hits.size
                        state.h_mean = h.mean(axis=0)
                return x_new, msg_bits + extra

            return step
        if config.method == "gdci":

            def step(x, k):
                if k >= cache_hi[0]:
                    _refill(k)
                j = k - cache_hi[0] + CHUNK
                grads = problem.worker_gradients(x)
                q = np.zeros((n, d))
                if equal_k:
                    idxk = idx_stack[0][j]
                    vals = scale_col * (x[idxk] - steps.gamma * np.take_along_axis(grads, idxk, axis=1))
                    np.put_along_axis(q, idxk, vals, axis=1)
                else:
                    for i in range(n):
                        idx = idx_cache[i][j]
                        q[i, idx] = scales[i] * (x[idx] - steps.gamma * grads[i, idx])
                delta = np.add.reduce(q, axis=0) / n
                return x - steps.eta * (x - delta), msg_bits

            return step

        def step(x, k):  # vr_gdci
            if k >= cache_hi[0]:
                _refill(k)
            j = k - cache_hi[0] + CHUNK
            grads = problem.worker_gradients(x)
            deltas = np.zeros((n, d))
            if equal_k:
                idxk = idx_stack[0][j]
                vals = scale_col * (
                    x[idxk]
                    - steps.gamma * np.take_along_axis(grads, idxk, axis=1)
                    - np.take_along_axis(state.h, idxk, axis=1)
                )
                np.put_along_axis(deltas, idxk, vals, axis=1)
            else:
                for i in range(n):
                    idx = idx_cache[i][j]
                    deltas[i, idx] = scales[i] * (
                        x[idx] - steps.gamma * grads[i, idx] - state.h[i, idx]
                    )
            delta_mean = np.add.reduce(deltas, axis=0) / n
            target = delta_mean + state.h_mean
            state.h += steps.alpha * deltas
            state.h_mean = state.h_mean + steps.alpha * delta_mean
            return x - steps.eta * (x - target), msg_bits

        return step

    # generic operator path
    if config.method == "dcgd":

        def step(x, k):
            res = algorithms.dcgd_shift_step(
                problem, x, k, specs, config.strategy, state, msg_rngs, shift_rngs, steps
            )
            return res.x, res.bits

        return step
    if config.method == "gdci":

        def step(x, k):
            res = algorithms.gdci_step(
                problem, x, k, specs, msg_rngs, steps, config.gdci_formulation
            )
            return res.x, res.bits

        return step

    def step(x, k):
        res = algorithms.vr_gdci_step(problem, x, k, specs, state, msg_rngs, steps)
        return res.x, res.bits

    return step


def run_monte_carlo(
    problem: Problem,
    config: RunConfig,
    n_seeds: int,
    reference: Optional[ReferenceSolution] = None,
    keep_records: bool = False,
) -> MonteCarloRecord:
    """Average n_seeds runs; replicate s runs under a derived master seed.

    Trajectories that stop early (convergence/divergence) are padded with
    their final value so the mean is defined on a common grid.
    """
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    if reference is None:
        reference = problem.solve_reference()
    records = []
    for s in range(n_seeds):
        cfg_seed = monte_carlo_seed(config.seed, s)
        rec = run(
            problem,
            _with_seed(config, cfg_seed),
            reference=reference,
        )
        records.append(rec)

    grid = max(records, key=lambda r: r.k[-1]).k
    errs = np.empty((n_seeds, len(grid)))
    bits = np.empty((n_seeds, len(grid)))
    for s, rec in enumerate(records):
        errs[s] = _pad_to_grid(rec.k, rec.rel_error, grid)
        bits[s] = _pad_to_grid(rec.k, rec.cum_bits.astype(float), grid)
    return MonteCarloRecord(
        grid,
        errs.mean(axis=0),
        errs.min(axis=0),
        errs.max(axis=0),
        bits.mean(axis=0),
        [r.status for r in records],
        [r.bits_to_eps for r in records],
        [r.iters_to_eps for r in records],
        errs[:, -1],
        records if keep_records else None,
    )


def _with_seed(config: RunConfig, seed: int) -> RunConfig:
    import copy

    cfg = copy.copy(config)
    cfg.seed = seed
    if config.strategy is not None:
        cfg.strategy = ShiftStrategy(
            config.strategy.kind, config.strategy.alpha, config.strategy.p, config.strategy.inner
        )
    return cfg


def _pad_to_grid(ks: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Step-function extension of a recorded trajectory onto a longer grid."""
    idx = np.searchsorted(ks, grid, side="right") - 1
    return values[np.clip(idx, 0, len(values) - 1)]


# -- instance builders --------------------------------------------------------


def make_ridge_instance(
    m: int = 100,
    d: int = 80,
    n_workers: int = 10,
    lam: Optional[float] = None,
    noise_std: float = 0.0,
    data_seed: int = 0,
    shard_seed: int = 0,
) -> Problem:
    """The synthetic sharded ridge benchmark (default: lam = 1/m)."""
    dataset, _ = make_regression(m, d, n_informative=10, noise_std=noise_std, seed=data_seed)
    if lam is None:
        lam = 1.0 / m
    return Problem("ridge", dataset, make_shards(dataset, n_workers, shard_seed), lam)
