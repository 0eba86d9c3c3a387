"""Shift strategies: exact update rules and master/worker bookkeeping."""

import numpy as np
import pytest

from shiftcomp.compressors import identity_spec, rand_k_spec, top_k_spec, zero_spec
from shiftcomp.harness import seed_stream
from shiftcomp.shifts import (
    ShiftState,
    ShiftStrategy,
    diana_alpha_bound,
    init_state,
    shift_residual,
    star_refresh,
    update_shifts,
)

N, D = 4, 6


def _rngs(seed=0):
    return [seed_stream(seed, i, 0, "shift") for i in range(N)]


def _grads(rng):
    return rng.normal(size=(N, D))


def test_fixed_never_changes(rng):
    strat = ShiftStrategy("fixed")
    state = init_state(strat, N, D)
    h0 = state.h.copy()
    rngs = _rngs()
    for k in range(100):
        bits = update_shifts(state, strat, _grads(rng), k, rngs)
        assert bits == 0
    np.testing.assert_array_equal(state.h, h0)
    np.testing.assert_array_equal(state.h_mean, np.zeros(D))


def test_star_with_zero_inner_pins_reference_gradients(rng):
    ref = rng.normal(size=(N, D))
    strat = ShiftStrategy("star", inner=[zero_spec(D)] * N)
    state = init_state(strat, N, D, reference_gradients=ref)
    for _ in range(5):
        star_refresh(state, strat, _grads(rng), _rngs())
        np.testing.assert_array_equal(state.h, ref)
    np.testing.assert_allclose(state.h_mean, ref.mean(axis=0), rtol=1e-15)


def test_star_refresh_costs_no_bits(rng):
    ref = rng.normal(size=(N, D))
    strat = ShiftStrategy("star", inner=[top_k_spec(D, 2)] * N)
    state = init_state(strat, N, D, reference_gradients=ref)
    grads = _grads(rng)
    assert star_refresh(state, strat, grads, _rngs()) == 0
    assert update_shifts(state, strat, grads, 0, _rngs()) == 0
    # shifts sit on reference + a 2-sparse correction
    assert np.all(np.sum(state.h - ref != 0, axis=1) <= 2)


def test_diana_identity_alpha_one_tracks_gradients(rng):
    strat = ShiftStrategy("diana", alpha=1.0)
    state = init_state(strat, N, D)
    grads = _grads(rng)
    # with the identity main compressor the message is grads - h exactly
    increments = grads - state.h
    update_shifts(state, strat, grads, 0, _rngs(), message_increments=increments)
    np.testing.assert_allclose(state.h, grads, rtol=1e-15)


def test_rand_diana_p_one_equals_diana_alpha_one(rng):
    grads0 = _grads(rng)
    x0 = rng.normal(size=D)
    strat = ShiftStrategy("rand_diana", p=np.ones(N))
    state = init_state(strat, N, D, x0=x0, initial_gradients=grads0)
    grads = _grads(rng)
    x = rng.normal(size=D)
    bits = update_shifts(state, strat, grads, 0, _rngs(), x=x)
    np.testing.assert_array_equal(state.h, grads)
    np.testing.assert_array_equal(state.w, np.tile(x, (N, 1)))
    assert bits == N * 64 * D


def test_rand_diana_refresh_probability(rng):
    strat = ShiftStrategy("rand_diana", p=np.full(N, 0.25))
    grads0 = _grads(rng)
    state = init_state(strat, N, D, x0=np.zeros(D), initial_gradients=grads0)
    rngs = _rngs()
    refreshes = 0
    trials = 2000
    for k in range(trials):
        grads = _grads(rng)
        bits = update_shifts(state, strat, grads, k, rngs, x=np.zeros(D))
        refreshes += bits // (64 * D)
    freq = refreshes / (trials * N)
    assert abs(freq - 0.25) < 0.02


def test_master_aggregate_invariant(rng):
    """h_mean tracks mean(h_i) to 1e-12 under any update sequence."""
    for strat, kwargs in [
        (ShiftStrategy("diana", alpha=0.3), {}),
        (ShiftStrategy("rand_diana", p=np.full(N, 0.5)), {}),
    ]:
        if strat.kind == "rand_diana":
            state = init_state(strat, N, D, x0=np.zeros(D), initial_gradients=_grads(rng))
        else:
            state = init_state(strat, N, D)
        rngs = _rngs()
        for k in range(100):
            grads = _grads(rng)
            update_shifts(
                state, strat, grads, k, rngs,
                message_increments=grads - state.h, x=rng.normal(size=D),
            )
            np.testing.assert_allclose(state.h_mean, state.h.mean(axis=0), atol=1e-12)


def test_shift_residual_exact_cases(rng):
    ref = rng.normal(size=(N, D))
    state = ShiftState(ref.copy(), ref.mean(axis=0))
    assert shift_residual(state, ref) == 0.0
    one = ShiftState(np.array([[1.0, 0.0]]), np.array([1.0, 0.0]))
    assert shift_residual(one, np.zeros((1, 2)), omegas=np.array([3.0])) == pytest.approx(3.0)


def test_shift_residual_matches_naive_loop(rng):
    h = rng.normal(size=(N, D))
    ref = rng.normal(size=(N, D))
    omegas = rng.uniform(1, 5, size=N)
    state = ShiftState(h, h.mean(axis=0))
    naive = sum(omegas[i] * np.sum((h[i] - ref[i]) ** 2) for i in range(N)) / N
    assert shift_residual(state, ref, omegas) == pytest.approx(naive, rel=1e-12)
    naive_unweighted = sum(np.sum((h[i] - ref[i]) ** 2) for i in range(N)) / N
    assert shift_residual(state, ref) == pytest.approx(naive_unweighted, rel=1e-12)


def test_diana_alpha_bound():
    omegas = np.array([3.0, 9.0])
    assert diana_alpha_bound(omegas) == pytest.approx(0.1)
    assert diana_alpha_bound(omegas, np.array([0.0, 0.5])) == pytest.approx(1 / 5.5)


def test_strategy_validation():
    with pytest.raises(ValueError):
        ShiftStrategy("bogus")
    with pytest.raises(ValueError):
        ShiftStrategy("rand_diana", p=np.array([0.0, 0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        init_state(ShiftStrategy("star"), N, D)  # no reference gradients
    with pytest.raises(ValueError):
        init_state(ShiftStrategy("rand_diana", p=np.full(N, 0.5)), N, D)


def test_update_requires_parameters(rng):
    state = init_state(ShiftStrategy("fixed"), N, D)
    with pytest.raises(ValueError):
        update_shifts(state, ShiftStrategy("diana"), _grads(rng), 0, _rngs(),
                      message_increments=_grads(rng))
    with pytest.raises(ValueError):
        update_shifts(state, ShiftStrategy("rand_diana"), _grads(rng), 0, _rngs(),
                      x=np.zeros(D))
