"""Simulator for communication-compressed distributed gradient methods.

The building blocks mirror the conceptual layers of the problem:

* :mod:`shiftcomp.compressors` -- compression operators and the
  shifted/induced compressor algebra, with exact bit accounting
* :mod:`shiftcomp.datagen` -- synthetic data, LibSVM parsing, sharding
* :mod:`shiftcomp.problems` -- ridge / logistic finite-sum objectives
* :mod:`shiftcomp.shifts` -- shift-update strategies (fixed, star,
  DIANA-like, randomized)
* :mod:`shiftcomp.algorithms` -- the optimization loops and step sizes
* :mod:`shiftcomp.harness` -- seeding, runs, Monte-Carlo averaging
* :mod:`shiftcomp.cli` -- the ``shiftcomp`` command-line front end
"""

from shiftcomp.algorithms import StepSizes, auto_stepsizes
from shiftcomp.compressors import (
    CompressedMessage,
    CompressorSpec,
    ShiftedCompressor,
    bit_cost,
    compress,
    decode,
    induce,
    iterate_compressor,
    shift,
    shifted,
    variance_check,
)
from shiftcomp.harness import (
    MonteCarloRecord,
    RunConfig,
    RunRecord,
    make_ridge_instance,
    run,
    run_monte_carlo,
    seed_stream,
)
from shiftcomp.problems import Problem, ReferenceSolution, SmoothnessInfo
from shiftcomp.shifts import ShiftState, ShiftStrategy

__all__ = [
    "CompressedMessage",
    "CompressorSpec",
    "MonteCarloRecord",
    "Problem",
    "ReferenceSolution",
    "RunConfig",
    "RunRecord",
    "ShiftState",
    "ShiftStrategy",
    "ShiftedCompressor",
    "SmoothnessInfo",
    "StepSizes",
    "auto_stepsizes",
    "bit_cost",
    "compress",
    "decode",
    "induce",
    "iterate_compressor",
    "make_ridge_instance",
    "run",
    "run_monte_carlo",
    "seed_stream",
    "shift",
    "shifted",
    "variance_check",
]

__version__ = "0.1.0"
