"""Approximate exponential kernels and an accuracy/speed benchmark.

Every kernel accepts scalars or arrays of ``float32`` / ``float64`` and
computes in the input precision.  The bit-manipulating kernels write into
the IEEE-754 exponent field directly: 1 sign / 11 exponent / 52 mantissa
bits for doubles and 1 / 8 / 23 for singles.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import UsageError

__all__ = [
    "exp_native",
    "exp_truncated",
    "exp_taylor_rr",
    "exp_schraudolph",
    "exp_schraudolph_lut",
    "exp_fmath",
    "fmath_table",
    "ExpMethod",
    "ExpBenchRow",
    "available_methods",
    "default_methods",
    "bench_exp",
    "DOMAINS",
]

LN2 = math.log(2.0)
DOMAINS = {"single": (-87.0, 87.0), "double": (-708.0, 708.0)}

# ln 2 split into a head with trailing zero bits and a tail, so that k*head
# is exact for every k reachable inside the domain
_LN2_HEAD = 6.93147180369123816490e-01
_LN2_TAIL = 1.90821492927058770002e-10


def _reduce(x, steps_per_octave):
    """Split ``x = k ln2 / steps + t`` with integer ``k`` and small ``t``.

    Singles are reduced in double precision, then ``t`` is rounded back.
    """
    wide = x.astype(np.float64) if x.dtype == np.float32 else x
    hi, lo = _LN2_HEAD, _LN2_TAIL
    k = np.rint(wide * (steps_per_octave / LN2))
    t = wide - k * (hi / steps_per_octave)
    t -= k * (lo / steps_per_octave)
    return k, t.astype(x.dtype, copy=False)


def _as_float(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x


def _out(y, x):
    return y[()] if np.ndim(x) == 0 else y


def exp_native(x):
    x = _as_float(x)
    return _out(np.exp(x), x)


def exp_truncated(x, D: int = 10):
    """``(1 + x / 2^D)^(2^D)`` evaluated with ``D`` squarings."""
    if D not in (8, 10):
        raise UsageError("truncated product supports D in {8, 10}")
    x = _as_float(x)
    y = np.atleast_1d(np.multiply(x, x.dtype.type(2.0**-D)))
    y += 1
    with np.errstate(over="ignore"):
        for _ in range(D):
            np.multiply(y, y, out=y)
    y = y.reshape(x.shape)
    return _out(y, x)


def exp_taylor_rr(x, degree: int = 14):
    """Range-reduced Maclaurin series of the given degree.

    ``x = k ln2 + r`` with ``k = round(x / ln2)`` and ``|r| <= ln2 / 2``;
    ``e^r`` is evaluated by Horner's rule and scaled by ``2^k`` through the
    exponent field.
    """
    if not (3 <= int(degree) <= 14) or int(degree) != degree:
        raise UsageError("Taylor degree must be an integer in [3, 14]")
    x = _as_float(x)
    dt = x.dtype.type
    k, r = _reduce(x, 1.0)
    # 1 + r(1 + r/2(1 + r/3(... (1 + r/n))))
    p = np.ones_like(r)
    for j in range(int(degree), 0, -1):
        p *= r
        p *= dt(1.0 / j)
        p += 1
    with np.errstate(over="ignore", under="ignore"):
        y = np.ldexp(p, k.astype(np.int32))
    return _out(y, x)


def exp_schraudolph(x):
    """Schraudolph's exponent-field trick, ``i = A x + B - C``.

    Doubles write ``i`` into the high 32 bits of a 64-bit pattern
    (``A = 2^20 / ln2``, ``B = 1023 * 2^20``, ``C = 60801``).  Singles use the
    whole 32-bit pattern with the constants scaled by ``2^3``.
    """
    x = _as_float(x)
    if x.dtype == np.float64:
        s = 2.0**20
        i = np.multiply(x, s / LN2)
        i += 1023 * s - 60801
        bits = i.astype(np.int64)
        bits <<= 32
        return _out(bits.view(np.float64), x)
    s = 2.0**23
    i = np.multiply(x, np.float32(s / LN2))
    i += np.float32(127 * s - 60801 * 8)
    return _out(i.astype(np.int32).view(np.float32), x)


_SQRT2_CHAIN = 2.0 ** (2.0 ** -np.arange(1, 53, dtype=np.float64))


def exp_schraudolph_lut(x, depth: int = 52):
    """Exponent-field scaling plus a table of successive square roots of 2.

    ``x / ln2 = n + f`` with integer ``n`` and ``f`` in ``[0, 1)``; the
    fraction is scanned bit by bit and ``2^(2^-j)`` multiplied in for every
    set bit, then ``2^n`` is applied through the exponent field.
    """
    x = _as_float(x)
    y = x * (1.0 / LN2) if x.dtype == np.float64 else x.astype(np.float64) / LN2
    n = np.floor(y)
    f = y - n
    out = np.ones_like(f)
    for j in range(min(int(depth), 52)):
        f *= 2.0
        bit = f >= 1.0
        f -= bit
        out *= np.where(bit, _SQRT2_CHAIN[j], 1.0)
    with np.errstate(over="ignore", under="ignore"):
        res = np.ldexp(out, n.astype(np.int32))
    return _out(res.astype(x.dtype), x)


_FMATH_BITS = 11
_FMATH_SIZE = 1 << _FMATH_BITS


def fmath_table(dtype=np.float64) -> np.ndarray:
    """Table of ``2^(j / 2048)`` for ``j = 0..2047``."""
    return _FMATH_TABLES[np.dtype(dtype)]


_FMATH_TABLES = {
    np.dtype(np.float64): np.power(2.0, np.arange(_FMATH_SIZE) / _FMATH_SIZE),
}
_FMATH_TABLES[np.dtype(np.float32)] = _FMATH_TABLES[np.dtype(np.float64)].astype(np.float32)
for _t in _FMATH_TABLES.values():
    _t.setflags(write=False)


def exp_fmath(x):
    """Table-driven exponential with a cubic correction.

    ``a = round(2048 x / ln2)`` is split into ``q = a // 2048`` and
    ``r = a mod 2048``; ``e^x = 2^q * table[r] * e^t`` with
    ``t = x - a ln2 / 2048`` and ``e^t ~ 1 + t + t^2/2 + t^3/6``.
    """
    x = _as_float(x)
    dt = x.dtype.type
    a, t = _reduce(x, _FMATH_SIZE)
    p = t * dt(1.0 / 6)
    p += 0.5
    p *= t
    p += 1
    p *= t
    p += 1
    ai = a.astype(np.int32)
    r = ai & (_FMATH_SIZE - 1)
    q = ai >> _FMATH_BITS
    p *= fmath_table(x.dtype)[r]
    with np.errstate(over="ignore", under="ignore"):
        y = np.ldexp(p, q)
    return _out(y, x)


# -- benchmark --------------------------------------------------------------


@dataclass(frozen=True)
class ExpMethod:
    name: str
    fn: Callable
    approximate: bool = True


def available_methods() -> dict[str, ExpMethod]:
    methods = {"native": ExpMethod("native", exp_native, approximate=False)}
    for D in (8, 10):
        methods[f"truncated{D}"] = ExpMethod(f"truncated{D}", lambda x, D=D: exp_truncated(x, D))
    for n in range(3, 15):
        methods[f"taylor{n}"] = ExpMethod(f"taylor{n}", lambda x, n=n: exp_taylor_rr(x, n))
    methods["schraudolph"] = ExpMethod("schraudolph", exp_schraudolph)
    methods["schraudolph_lut"] = ExpMethod("schraudolph_lut", exp_schraudolph_lut)
    methods["fmath"] = ExpMethod("fmath", exp_fmath)
    return methods


def default_methods() -> list[str]:
    """Benchmark set used by ``all``; the square-root table variant is opt-in."""
    return [name for name in available_methods() if name != "schraudolph_lut"]


@dataclass(frozen=True)
class ExpBenchRow:
    method: str
    precision: str
    domain_lo: float
    domain_hi: float
    n: int
    median_rel_err: float
    max_rel_err: float
    ns_per_call: float
    excluded: int = 0

    HEADER = "method,precision,domain_lo,domain_hi,n,median_rel_err,max_rel_err,ns_per_call"

    def csv_row(self) -> str:
        return (f"{self.method},{self.precision},{self.domain_lo:g},{self.domain_hi:g},{self.n},"
                f"{self.median_rel_err:.6e},{self.max_rel_err:.6e},{self.ns_per_call:.3f}")


def relative_errors(approx: np.ndarray, ref: np.ndarray):
    """Relative errors, skipping points where the reference underflows."""
    ref = ref.astype(np.float64)
    keep = ref > 0
    with np.errstate(over="ignore", invalid="ignore"):
        rel = np.abs(approx.astype(np.float64)[keep] - ref[keep]) / ref[keep]
    return rel, int(np.count_nonzero(~keep))


def bench_exp(methods=None, precision: str = "double", domain=None, n_points: int = 10**6,
              repeats: int = 5, timing: bool = True) -> list[ExpBenchRow]:
    """Accuracy and speed of each method on a uniform grid over ``domain``."""
    if precision not in DOMAINS:
        raise UsageError(f"precision must be 'single' or 'double', got {precision!r}")
    if int(n_points) != n_points or n_points < 1:
        raise UsageError("n_points must be a positive integer")
    if repeats < 1:
        raise UsageError("repeats must be positive")
    table = available_methods()
    names = default_methods() if methods in (None, "all") else list(methods)
    for name in names:
        if name not in table:
            raise UsageError(f"unknown exp method {name!r}")
    lo, hi = DOMAINS[precision] if domain is None else map(float, domain)
    dtype = np.float32 if precision == "single" else np.float64
    x = np.linspace(lo, hi, int(n_points)).astype(dtype)
    ref = np.exp(x)
    rows = []
    for name in names:
        fn = table[name].fn
        y = np.asarray(fn(x))
        rel, excluded = relative_errors(y, ref)
        ns = float("nan")
        if timing:
            fn(x)
            samples = []
            for _ in range(int(repeats)):
                t0 = time.perf_counter_ns()
                fn(x)
                samples.append((time.perf_counter_ns() - t0) / x.size)
            ns = float(np.median(samples))
        rows.append(ExpBenchRow(
            method=name, precision=precision, domain_lo=lo, domain_hi=hi, n=int(n_points),
            median_rel_err=float(np.median(rel)) if rel.size else 0.0,
            max_rel_err=float(rel.max()) if rel.size else 0.0,
            ns_per_call=ns, excluded=excluded,
        ))
    return rows
