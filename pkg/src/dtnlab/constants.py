"""Explicit constants of the stability argument: smallness exponents, moduli of
continuity, their iterated inverses and the resulting amplification bound.

The iterated inverse grows like a tower of exponentials, so the bound is
returned as a :class:`Tower`, a level-index number ``exp(exp(...exp(top)))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import total_ordering

import numpy as np

BETA = math.log(8.0 / 7.0) / math.log(4.0)
_EXP_LIMIT = math.log(np.finfo(float).max)


class ConstantsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# level-index numbers


@total_ordering
@dataclass(frozen=True)
class Tower:
    """Positive number ``exp^height(top)``.

    Canonical form: ``height == 0`` (an ordinary float) or ``top`` so large
    that one more exponential overflows.  Ordering is lexicographic on
    ``(height, top)`` in canonical form.
    """

    height: int
    top: float

    @staticmethod
    def of(x: float) -> "Tower":
        if not x > 0:
            raise ConstantsError("Tower holds positive numbers only")
        return Tower(0, float(x))

    def _canonical(self) -> "Tower":
        h, t = self.height, self.top
        while h > 0 and t <= _EXP_LIMIT:
            h, t = h - 1, math.exp(t)
        return Tower(h, t)

    def exp(self) -> "Tower":
        return Tower(self.height + 1, self.top)._canonical()

    def log(self) -> "Tower":
        if self.height == 0:
            return Tower(0, math.log(self.top))
        return Tower(self.height - 1, self.top)

    def shift(self, a: float) -> "Tower":
        """``self + a``; absorbed when far below the float resolution of ``self``."""
        if self.height == 0:
            return Tower(0, self.top + a)
        return self

    def scale(self, c: float) -> "Tower":
        """``c * self`` for ``c > 0``."""
        if c <= 0:
            raise ConstantsError("scale factor must be positive")
        if self.height == 0:
            v = c * self.top
            if math.isfinite(v):
                return Tower(0, v)
            return Tower(0, math.log(c) + math.log(self.top)).exp()
        return self.log().shift(math.log(c)).exp()

    def __float__(self) -> float:
        return self.top if self.height == 0 else math.inf

    def log10_repr(self) -> str:
        if self.height == 0:
            return f"{self.top:.6g}"
        return "exp^%d(%.6g)" % (self.height, self.top)

    def __lt__(self, other: "Tower") -> bool:
        a, b = self._canonical(), other._canonical()
        return (a.height, a.top) < (b.height, b.top)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tower):
            return NotImplemented
        a, b = self._canonical(), other._canonical()
        return (a.height, a.top) == (b.height, b.top)

    def __hash__(self):
        a = self._canonical()
        return hash((a.height, a.top))


# ---------------------------------------------------------------------------
# smallness exponents


def tau(r: float, r1: float) -> float:
    """``ln((12 r1 - 2r)/(12 r1 - 3r)) / ln((6 r1 - r)/(2 r1))`` for ``0 < r < 2 r1``."""
    if not 0 < r < 2 * r1:
        raise ConstantsError(f"r = {r} outside (0, 2 r1) = (0, {2 * r1})")
    # log1p keeps relative accuracy as r -> 0
    num = math.log1p(r / (12.0 * r1 - 3.0 * r))
    den = math.log(3.0) + math.log1p(-r / (6.0 * r1))
    return num / den


def ball_volume(radius: float, n: int = 2) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * radius**n


@dataclass
class ConstantsLedger:
    r0: float
    L: float = 1.0
    A: float = 1.0
    B: float = 1.5
    N: int = 1
    M: int = 1
    n: int = 2
    tau_samples: dict = field(default_factory=dict)

    @property
    def r1(self) -> float:
        return self.r0 / 16.0

    @property
    def beta(self) -> float:
        return BETA

    @property
    def N1(self) -> float:
        return self.A / ball_volume(self.r1, self.n) + 1.0

    def tau(self, r: float) -> float:
        return tau(r, self.r1)

    def sample_tau(self, count: int = 5) -> dict:
        radii = 2.0 * self.r1 * np.arange(1, count + 1) / (count + 1)
        self.tau_samples = {f"{r:.6g}": tau(r, self.r1) for r in radii}
        return self.tau_samples

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(r1=self.r1, beta=self.beta, N1=self.N1)
        return d


def smallness_exponents(r: float, ledger: ConstantsLedger) -> tuple[float, float, float, float]:
    """``(tau_r, beta, N1, bound_factor)`` with ``bound_factor = (tau_r / r) * 12 r1 ln 3``.

    ``bound_factor >= 1`` is the lower bound on ``tau_r / r``.
    """
    t = ledger.tau(r)
    return t, ledger.beta, ledger.N1, t / r * 12.0 * ledger.r1 * math.log(3.0)


# ---------------------------------------------------------------------------
# moduli of continuity


@dataclass(frozen=True)
class Modulus:
    """``|ln t|^{-1/power}`` below ``exp(-cutoff)``, the constant ``cutoff^{-1/power}`` above."""

    power: float
    cutoff: float
    base_offset: float

    @property
    def ceiling(self) -> float:
        return self.cutoff ** (-1.0 / self.power)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ConstantsError("modulus defined for t > 0")
        with np.errstate(divide="ignore"):
            low = np.abs(np.log(t)) ** (-1.0 / self.power)
        out = np.where(t < math.exp(-self.cutoff), low, self.ceiling)
        return out if out.ndim else float(out)

    def iterate(self, t, times: int):
        for _ in range(times):
            t = self(t)
        return t

    def closed_inverse_log(self, s: float) -> float:
        """``-ln(omega^{-1}(s))``: the smallest preimage, in log form."""
        self._check_range(s)
        return s ** (-self.power)

    def inverse_log(self, s: float, rel_tol: float = 1e-12) -> float:
        """``-ln(omega^{-1}(s))`` found by bisection in ``L = -ln t``."""
        self._check_range(s)
        lo = self.cutoff
        if s == self.ceiling:
            return lo
        hi = 2.0 * lo
        while hi ** (-1.0 / self.power) > s:
            hi *= 2.0
            if not math.isfinite(hi):
                raise ConstantsError("inverse exceeds the float range; use the tower recursion")
        while hi - lo > rel_tol * hi:
            mid = 0.5 * (lo + hi)
            if mid ** (-1.0 / self.power) > s:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def inverse(self, s: float) -> float:
        return math.exp(-self.inverse_log(s))

    def _check_range(self, s: float) -> None:
        if not 0 < s <= self.ceiling:
            raise ConstantsError(f"{s} is outside the range (0, {self.ceiling:.6g}] of the modulus")


def modulus(mode: str = "n3", n: int | None = None) -> Modulus:
    """Modulus for ``mode`` in {"n3", "n2_4", "n_ge5"}; the last needs ``n >= 5``."""
    if mode == "n3":
        return Modulus(4.0, 3.0, 3.0**0.25)
    if mode == "n2_4":
        return Modulus(1.0, 2.0, 2.0)
    if mode == "n_ge5":
        if n is None or n < 5:
            raise ConstantsError("mode n_ge5 needs n >= 5")
        return Modulus(4.0 / (n - 4.0), float(n), n ** ((n - 4.0) / 4.0))
    raise ConstantsError(f"unknown mode {mode!r}")


def omega(t, mode: str = "n3", n: int | None = None):
    return modulus(mode, n)(t)


def iterated_inverse_log(s: float, M: int, mode: str = "n3", n: int | None = None) -> Tower:
    """``-ln(omega_M^{-1}(s))`` as a Tower.

    One inverse is found by bisection; each further inverse maps
    ``L -> exp(power * L)``, carried out in level-index arithmetic.
    """
    if M < 1:
        raise ConstantsError("M must be at least 1")
    w = modulus(mode, n)
    level = Tower.of(w.inverse_log(s))
    for _ in range(M - 1):
        # the next argument exp(-level) lies below exp(-cutoff), inside the range
        level = level.scale(w.power).exp()
    return level


def amplification(s: float, M: int, mode: str = "n3", n: int | None = None) -> Tower:
    """``(1 - t) / t`` with ``t = omega_M^{-1}(s)``."""
    L = iterated_inverse_log(s, M, mode, n)
    if L.height == 0 and L.top < 30.0:
        return Tower.of(math.expm1(L.top))
    # 1/t - 1 with 1/t = e^L; the -1 is below float resolution here
    return L.exp()


def recursion_bound(M: int, C: float, mode: str = "n3", n: int | None = None) -> Tower:
    """Bound on ``E / epsilon`` after ``M`` chain steps with constant ``C``."""
    if C <= 0:
        raise ConstantsError("C must be positive")
    w = modulus(mode, n)
    log_s = -M * math.log(C + w.base_offset)
    first_log = -w.power * log_s  # ln of -ln omega^{-1}(s)
    if first_log <= _EXP_LIMIT:
        return amplification(math.exp(log_s), M, mode, n)
    level = Tower.of(first_log).exp()
    for _ in range(M - 1):
        level = level.scale(w.power).exp()
    return level.exp()


def delta_sequence(eps: float, E: float, C: float, steps: int, mode: str = "n3", n: int | None = None):
    """Iterate ``delta_k = C (eps + delta_{k-1} + E) omega((eps + delta_{k-1}) / (eps + delta_{k-1} + E))``.

    Returns ``(delta, envelope)`` where ``envelope[k] = base^k (E + eps) omega_k(eps / (eps + E)) - eps``
    is the closed-form majorant of ``delta[k]``.
    """
    w = modulus(mode, n)
    base = C + w.base_offset
    delta = [0.0]
    for _ in range(steps):
        d = delta[-1]
        delta.append(C * (eps + d + E) * w((eps + d) / (eps + d + E)))
    env = [base**k * (E + eps) * w.iterate(eps / (eps + E), k) - eps if k else 0.0 for k in range(steps + 1)]
    return np.array(delta), np.array(env)
