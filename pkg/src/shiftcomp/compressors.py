"""Compression operators and the shifted-compressor algebra.

All operators are pure functions of their inputs and an explicit
``numpy.random.Generator``; nothing here holds mutable state, so the same
spec can be used concurrently by many workers as long as each worker owns
its own generator.

Cost model (bits):
  * dense float: 64 bits
  * sparse index: ceil(log2 d) bits
  * natural dithering: 1 sign bit + ceil(log2(s+1)) level bits per
    coordinate, plus 64 bits for the norm
  * bernoulli: full dense cost plus a 1-bit flag when it fires, 1 bit
    otherwise
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("identity", "zero", "rand_k", "top_k", "natural_dithering", "bernoulli")

UNBIASED_KINDS = ("identity", "rand_k", "natural_dithering")
CONTRACTIVE_KINDS = ("identity", "top_k", "bernoulli")

# Calibration settings for the natural-dithering variance constant, which has
# no closed form here and is measured once per (d, s).
_ND_CALIBRATION_SAMPLES = 10_000
_ND_CALIBRATION_SEED = 0x5D17
_ND_CALIBRATION_MARGIN = 1.1
_nd_omega_cache: dict[tuple[int, int], float] = {}

# Deliberate fault switches used by the `verify` self-test to confirm the
# statistical checks actually catch bugs. Never set outside tests.
_faults: set[str] = set()


def set_fault(name: str, enabled: bool = True) -> None:
    if enabled:
        _faults.add(name)
    else:
        _faults.discard(name)


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CompressorSpec:
    """A compressor family with its parameters and declared constants.

    kind: one of identity, zero, rand_k, top_k, natural_dithering, bernoulli
    d: input dimension
    K: kept coordinate count (rand_k / top_k)
    s: number of positive dithering levels (natural_dithering)
    p: firing probability (bernoulli)
    """

    kind: str
    d: int
    K: Optional[int] = None
    s: Optional[int] = None
    p: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("dimension must be positive")
        if self.kind in ("rand_k", "top_k"):
            if self.K is None or not (1 <= self.K <= self.d):
                raise ValueError(f"K must satisfy 1 <= K <= d, got K={self.K}, d={self.d}")
        if self.kind == "natural_dithering":
            if self.s is None or self.s < 1:
                raise ValueError("natural dithering needs an integer level count s >= 1")
        if self.kind == "bernoulli":
            if self.p is None or not (0.0 < self.p <= 1.0):
                raise ValueError(f"bernoulli probability must be in (0, 1], got {self.p}")

    @property
    def is_unbiased(self) -> bool:
        return self.kind in UNBIASED_KINDS

    @property
    def omega(self) -> float:
        """Variance constant of an unbiased kind: E|Q(x)-x|^2 <= omega |x|^2."""
        if self.kind == "identity":
            return 0.0
        if self.kind == "rand_k":
            return self.d / self.K - 1.0
        if self.kind == "natural_dithering":
            return nd_omega(self.d, self.s)
        raise ValueError(f"{self.kind} is not an unbiased compressor")

    @property
    def delta(self) -> float:
        """Contraction constant of a biased kind: E|C(x)-x|^2 <= (1-delta)|x|^2."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "top_k":
            return self.K / self.d
        if self.kind == "bernoulli":
            return self.p
        raise ValueError(f"{self.kind} has no contraction constant")

    def to_config(self) -> dict:
        cfg = {"kind": self.kind}
        if self.K is not None:
            cfg["K"] = self.K
        if self.s is not None:
            cfg["s"] = self.s
        if self.p is not None:
            cfg["p"] = self.p
        return cfg

    @staticmethod
    def from_config(cfg: dict, d: int) -> "CompressorSpec":
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        if kind == "rand_k" and "q" in cfg:
            q = cfg.pop("q")
            cfg["K"] = max(1, round(q * d))
        return CompressorSpec(kind=kind, d=d, **cfg)


def zero_spec(d: int) -> CompressorSpec:
    """The zero map, used as a no-op shift builder (operator O in the taxonomy)."""
    return CompressorSpec("zero", d)


def identity_spec(d: int) -> CompressorSpec:
    return CompressorSpec("identity", d)


def rand_k_spec(d: int, K: int) -> CompressorSpec:
    return CompressorSpec("rand_k", d, K=K)


def top_k_spec(d: int, K: int) -> CompressorSpec:
    return CompressorSpec("top_k", d, K=K)


@dataclass
class CompressedMessage:
    """A compressed payload, its exact bit cost and the decoded dense vector."""

    payload: tuple
    bits: int
    dense_value: np.ndarray


def index_bits(d: int) -> int:
    return math.ceil(math.log2(d)) if d > 1 else 0


def dense_bits(d: int) -> int:
    return 64 * d


def _check_dim(spec: CompressorSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.d,):
        raise DimensionMismatch(f"expected vector of length {spec.d}, got shape {x.shape}")
    return x


def rand_k_subset(d: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random K-subset of [d].

    The subset is formed by ranking d iid uniform keys and keeping the K
    smallest, which is exactly uniform over K-subsets (ties have measure
    zero) and vectorizes well.
    """
    keys = rng.random(d)
    if K == d:
        return np.arange(d)
    return np.argpartition(keys, K)[:K]


def _randk_scale(d: int, K: int) -> float:
    if "randk_scale" in _faults:
        return d / (K + 1)
    return d / K


def _nd_levels(s: int) -> np.ndarray:
    # level u=1..s has value 2^(1-u); index 0 is the zero level
    return np.concatenate(([0.0], 2.0 ** (1.0 - np.arange(1, s + 1))))


def _nd_quantize(absx: np.ndarray, norm, s: int, rng: np.random.Generator):
    """Randomized rounding of |x|/norm onto {2^(1-u)} ∪ {0}, preserving means.

    Returns integer level indices (0 = zero level, u >= 1 means 2^(1-u)).
    Works on arrays of any shape; ``norm`` broadcasts against ``absx``.
    """
    a = np.where(norm > 0, absx / np.where(norm > 0, norm, 1.0), 0.0)
    _, e = np.frexp(a)  # a = m * 2^e with m in [0.5, 1), so a in [2^(e-1), 2^e)
    # bracket [2^(e-1), 2^e]; entries below the smallest level use [0, 2^(1-s)]
    tiny = e <= 1 - s
    hi_exp = np.where(tiny, 1 - s, e)
    lo = np.where(tiny, 0.0, np.ldexp(1.0, e - 1))
    hi = np.ldexp(1.0, hi_exp)
    prob_up = np.where(a > 0, (a - lo) / (hi - lo), 0.0)
    up = rng.random(a.shape) < prob_up
    # index u = 1 - exponent of the chosen level; the zero level gets index 0
    idx = np.where(up, 1 - hi_exp, np.where(tiny, 0, 2 - e))
    idx = np.where(a > 0, idx, 0)
    return idx.astype(np.int64)


def _nd_decode(idx: np.ndarray, signs: np.ndarray, norm) -> np.ndarray:
    values = np.where(idx > 0, np.ldexp(1.0, 1 - idx), 0.0)
    return signs * norm * values


def nd_omega(d: int, s: int) -> float:
    """Empirical variance constant for natural dithering.

    Calibrated once per (d, s): one draw on each of 10^4 random unit
    vectors, max observed ratio inflated by 10%.
    """
    key = (d, s)
    if key not in _nd_omega_cache:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((_ND_CALIBRATION_SEED, d, s))))
        X = rng.normal(size=(_ND_CALIBRATION_SAMPLES, d))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        idx = _nd_quantize(np.abs(X), 1.0, s, rng)
        decoded = _nd_decode(idx, np.sign(X), 1.0)
        ratios = np.sum((decoded - X) ** 2, axis=1)  # unit vectors: ratio = squared error
        _nd_omega_cache[key] = float(np.max(ratios) * _ND_CALIBRATION_MARGIN)
    return _nd_omega_cache[key]


def compress(spec: CompressorSpec, x: np.ndarray, rng: np.random.Generator) -> CompressedMessage:
    """Apply the operator described by ``spec`` to ``x``.

    Returns a message carrying the payload, its exact bit cost and the
    decoded dense vector.
    """
    x = _check_dim(spec, x)
    d = spec.d

    if spec.kind == "identity":
        return CompressedMessage(("dense", x.copy()), dense_bits(d), x.copy())

    if spec.kind == "zero":
        return CompressedMessage(("zero",), 0, np.zeros(d))

    if spec.kind == "rand_k":
        idx = rand_k_subset(d, spec.K, rng)
        values = _randk_scale(d, spec.K) * x[idx]
        dense = np.zeros(d)
        dense[idx] = values
        bits = spec.K * (64 + index_bits(d))
        return CompressedMessage(("sparse", idx, values), bits, dense)

    if spec.kind == "top_k":
        idx = top_k_indices(x, spec.K)
        values = x[idx]
        dense = np.zeros(d)
        dense[idx] = values
        bits = spec.K * (64 + index_bits(d))
        return CompressedMessage(("sparse", idx, values), bits, dense)

    if spec.kind == "bernoulli":
        fired = rng.random() < spec.p
        if fired:
            return CompressedMessage(("dense", x.copy()), 1 + dense_bits(d), x.copy())
        return CompressedMessage(("zero",), 1, np.zeros(d))

    # natural dithering
    norm = float(np.linalg.norm(x))
    signs = np.sign(x)
    idx = _nd_quantize(np.abs(x), norm, spec.s, rng)
    dense = _nd_decode(idx, signs, norm)
    bits = d * (1 + math.ceil(math.log2(spec.s + 1))) + 64
    return CompressedMessage(("nd", norm, signs.astype(np.int8), idx.astype(np.uint8)), bits, dense)


def top_k_indices(x: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K largest-magnitude entries; ties keep the lower index."""
    d = len(x)
    if K == d:
        return np.arange(d)
    # stable sort on (-|x_i|, i) so equal magnitudes resolve to lower indices
    order = np.argsort(-np.abs(x), kind="stable")
    return order[:K]


def decode(spec: CompressorSpec, payload: tuple) -> np.ndarray:
    """Reconstruct the dense vector from a payload. Bit-exact."""
    tag = payload[0]
    if tag == "zero":
        return np.zeros(spec.d)
    if tag == "dense":
        return payload[1].copy()
    if tag == "sparse":
        _, idx, values = payload
        dense = np.zeros(spec.d)
        dense[idx] = values
        return dense
    if tag == "nd":
        _, norm, signs, idx = payload
        return _nd_decode(idx.astype(np.int64), signs.astype(np.float64), norm)
    raise ValueError(f"unknown payload tag {tag!r}")


def bit_cost(spec: CompressorSpec, message: CompressedMessage) -> int:
    """Deterministic bit cost of a message produced by ``spec``."""
    if spec.kind == "identity":
        return dense_bits(spec.d)
    if spec.kind == "zero":
        return 0
    if spec.kind in ("rand_k", "top_k"):
        return spec.K * (64 + index_bits(spec.d))
    if spec.kind == "bernoulli":
        return 1 + dense_bits(spec.d) if message.payload[0] == "dense" else 1
    return spec.d * (1 + math.ceil(math.log2(spec.s + 1))) + 64


@dataclass(frozen=True)
class ShiftedCompressor:
    """x -> h + base(x - h); unbiased with variance omega * |x - h|^2."""

    base: CompressorSpec
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (self.base.d,):
            raise DimensionMismatch(f"shift must have length {self.base.d}")
        object.__setattr__(self, "h", h)

    @property
    def omega(self) -> float:
        return self.base.omega

    def compress(self, x: np.ndarray, rng: np.random.Generator) -> CompressedMessage:
        msg = compress(self.base, np.asarray(x, dtype=np.float64) - self.h, rng)
        msg.dense_value = self.h + msg.dense_value
        return msg


def shifted(base: CompressorSpec, h: np.ndarray) -> ShiftedCompressor:
    return ShiftedCompressor(base, h)


def shift(base: ShiftedCompressor, v: np.ndarray) -> ShiftedCompressor:
    """Shift a shifted compressor by v: member of U(omega; h + v)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (base.base.d,):
        raise DimensionMismatch(f"shift must have length {base.base.d}")
    return ShiftedCompressor(base.base, base.h + v)


def induce(
    biased: CompressorSpec,
    unbiased: CompressorSpec,
    x: np.ndarray,
    rng: np.random.Generator,
) -> CompressedMessage:
    """Induced compressor C(x) + Q(x - C(x)); unbiased with omega*(1-delta)."""
    if biased.d != unbiased.d:
        raise DimensionMismatch("biased and unbiased specs must share dimension")
    x = _check_dim(biased, x)
    c = compress(biased, x, rng)
    q = compress(unbiased, x - c.dense_value, rng)
    return CompressedMessage(
        ("induced", c.payload, q.payload),
        c.bits + q.bits,
        c.dense_value + q.dense_value,
    )


def induced_omega(biased: CompressorSpec, unbiased: CompressorSpec) -> float:
    return unbiased.omega * (1.0 - biased.delta)


def iterate_compressor(
    spec: CompressorSpec,
    x: np.ndarray,
    gamma: float,
    z: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """The iterate-space estimator (1/gamma) * [x - Q(x - gamma z)].

    Unbiased for z, with variance bounded by omega * |z - x/gamma|^2.
    """
    if gamma == 0:
        raise ValueError("gamma must be nonzero")
    x = _check_dim(spec, x)
    z = _check_dim(spec, z)
    q = compress(spec, x - gamma * z, rng)
    return (x - q.dense_value) / gamma


def negation_scaled(
    spec: CompressorSpec,
    t: float,
    z: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """The negation-scaling transform -t * Q(-z/t); unbiased with the same omega."""
    if t == 0:
        raise ValueError("t must be nonzero")
    z = _check_dim(spec, z)
    return -t * compress(spec, -z / t, rng).dense_value


@dataclass
class VarianceReport:
    empirical_mean: np.ndarray
    empirical_variance: float  # E |Q(x) - x|^2
    bound: float
    ratio: float  # empirical_variance / |x|^2, inf when x = 0
    passed: bool
    n_samples: int


# Statistical slack used by the pass/fail checks: 4 standard errors on means,
# 5% multiplicative on variance ratios.
MEAN_SLACK_SE = 4.0
VARIANCE_SLACK = 0.05


def variance_check(
    spec: CompressorSpec,
    x: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> VarianceReport:
    """Monte-Carlo check of the declared variance constant on one vector."""
    if n_samples < 1_000:
        raise ValueError("need at least 10^3 samples for a meaningful check")
    x = _check_dim(spec, x)
    draws = compress_many(spec, x, n_samples, rng)
    errs = np.sum((draws - x) ** 2, axis=1)
    emp_var = float(np.mean(errs))
    xn2 = float(np.dot(x, x))

    if spec.is_unbiased:
        bound = spec.omega * xn2
    else:
        bound = (1.0 - spec.delta) * xn2
    passed = emp_var <= bound * (1.0 + VARIANCE_SLACK) + 1e-12
    if spec.kind == "rand_k":
        # Rand-K attains its bound with equality
        passed = abs(emp_var - bound) <= VARIANCE_SLACK * bound + 1e-12
    ratio = emp_var / xn2 if xn2 > 0 else (0.0 if emp_var == 0 else np.inf)
    return VarianceReport(draws.mean(axis=0), emp_var, bound, ratio, passed, n_samples)


def compress_many(
    spec: CompressorSpec,
    x: np.ndarray,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n_samples independent dense draws of spec applied to x, shape (n, d).

    Vectorized per kind; used by the Monte-Carlo verification suites.
    """
    x = _check_dim(spec, x)
    d = spec.d
    if spec.kind == "identity":
        return np.tile(x, (n_samples, 1))
    if spec.kind == "zero":
        return np.zeros((n_samples, d))
    if spec.kind == "top_k":
        msg = compress(spec, x, rng)
        return np.tile(msg.dense_value, (n_samples, 1))
    if spec.kind == "bernoulli":
        fired = rng.random(n_samples) < spec.p
        return fired[:, None] * x[None, :]
    if spec.kind == "rand_k":
        K = spec.K
        keys = rng.random((n_samples, d))
        idx = np.argpartition(keys, K, axis=1)[:, :K] if K < d else np.tile(np.arange(d), (n_samples, 1))
        out = np.zeros((n_samples, d))
        np.put_along_axis(out, idx, _randk_scale(d, K) * x[idx], axis=1)
        return out
    # natural dithering
    norm = float(np.linalg.norm(x))
    absx = np.tile(np.abs(x), (n_samples, 1))
    lev = _nd_quantize(absx, norm, spec.s, rng)
    return _nd_decode(lev, np.sign(x)[None, :], norm)
