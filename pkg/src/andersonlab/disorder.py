"""Single-site disorder laws, sampling, raw moments and renormalized cumulants.

All laws are bounded, symmetric and normalized to variance one.  Moments are
kept as exact fractions; floats are produced only at the edges.
"""
from dataclasses import dataclass, field
import hashlib
from fractions import Fraction
from functools import lru_cache
import itertools
import math

import numpy as np

from .lattice import BoxSpec

BERNOULLI = "bernoulli_pm1"
UNIFORM = "uniform_symmetric"
DISCRETE = "discrete_symmetric"


class MomentMismatch(AssertionError):
    """Direct and partition-sum moment evaluations disagree."""


@dataclass(frozen=True)
class SiteDistribution:
    """Single-site law.

    For ``discrete_symmetric`` the supplied ``values`` are rescaled so that
    the variance is one; ``weights`` are normalized to sum to one.  Exact
    rational copies of both are kept for moment computations.
    """

    kind: str
    values: tuple = ()
    weights: tuple = ()
    _exact: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.kind in (BERNOULLI, UNIFORM):
            if self.values or self.weights:
                raise ValueError(f"{self.kind} takes no parameters")
            return
        if self.kind != DISCRETE:
            raise ValueError(f"unsupported distribution kind {self.kind!r}")
        if len(self.values) != len(self.weights) or not self.values:
            raise ValueError("discrete law needs matching non-empty values and weights")
        if not all(math.isfinite(float(x)) for x in tuple(self.values) + tuple(self.weights)):
            raise ValueError("discrete law must have bounded support and finite weights")
        vals = [Fraction(v) for v in self.values]
        wts = [Fraction(w) for w in self.weights]
        if any(w < 0 for w in wts) or sum(wts) == 0:
            raise ValueError("weights must be non-negative with positive sum")
        total = sum(wts)
        wts = [w / total for w in wts]
        law = {}
        for v, w in zip(vals, wts):
            law[v] = law.get(v, 0) + w
        for v, w in law.items():
            if law.get(-v, 0) != w:
                raise ValueError("discrete law must be symmetric about zero")
        var = sum(w * v * v for v, w in law.items())
        if var == 0:
            raise ValueError("discrete law is degenerate")
        items = sorted(law.items())
        object.__setattr__(self, "_exact", (tuple(v for v, _ in items),
                                            tuple(w for _, w in items), var))
        scale = math.sqrt(var)
        object.__setattr__(self, "values", tuple(float(v) / scale for v, _ in items))
        object.__setattr__(self, "weights", tuple(float(w) for _, w in items))

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == DISCRETE:
            d["params"] = {"values": list(self.values), "weights": list(self.weights)}
        return d

    @classmethod
    def from_dict(cls, d):
        params = d.get("params", {}) or {}
        unknown = set(d) - {"kind", "params"}
        if unknown:
            raise ValueError(f"unknown distribution keys {sorted(unknown)}")
        if d["kind"] == DISCRETE:
            return cls(DISCRETE, tuple(params["values"]), tuple(params["weights"]))
        if params:
            raise ValueError(f"{d['kind']} takes no parameters")
        return cls(d["kind"])

    def __hash__(self):
        return hash((self.kind, self.values, self.weights))


def bernoulli():
    return SiteDistribution(BERNOULLI)


def uniform():
    """Uniform law on ``[-sqrt 3, sqrt 3]``."""
    return SiteDistribution(UNIFORM)


def discrete(values, weights):
    return SiteDistribution(DISCRETE, tuple(values), tuple(weights))


def support_bound(dist):
    """``max |omega|`` over the support."""
    if dist.kind == BERNOULLI:
        return 1.0
    if dist.kind == UNIFORM:
        return math.sqrt(3.0)
    return max(abs(v) for v in dist.values)


@dataclass(frozen=True)
class MomentTable:
    """Even raw moments ``tilde c_{2m}``, ``m = 1..m_max``, and ``c_V``."""

    exact: tuple
    c_V: float

    @property
    def m_max(self):
        return len(self.exact)

    def __getitem__(self, two_m):
        """Moment of even order ``two_m`` (``0`` gives 1, odd orders give 0)."""
        if two_m == 0:
            return Fraction(1)
        if two_m % 2:
            return Fraction(0)
        return self.exact[two_m // 2 - 1]

    def as_array(self):
        return np.array([float(c) for c in self.exact])


@dataclass(frozen=True)
class CumulantTable:
    """Renormalized cumulants ``c_{2k}``, ``k = 1..k_max``."""

    exact: tuple

    @property
    def k_max(self):
        return len(self.exact)

    def __getitem__(self, two_k):
        if two_k % 2 or two_k <= 0:
            return Fraction(0)
        return self.exact[two_k // 2 - 1]

    def as_array(self):
        return np.array([float(c) for c in self.exact])


def raw_moments(dist, m_max):
    """Exact even moments ``E[omega^{2m}]`` for ``m = 1..m_max``."""
    if m_max < 1:
        raise ValueError("m_max must be at least 1")
    if dist.kind == BERNOULLI:
        mom = [Fraction(1)] * m_max
    elif dist.kind == UNIFORM:
        # E[x^{2m}] for x uniform on [-sqrt 3, sqrt 3]
        mom = [Fraction(3 ** m, 2 * m + 1) for m in range(1, m_max + 1)]
    else:
        vals, wts, var = dist._exact
        mom = [sum(w * v ** (2 * m) for v, w in zip(vals, wts)) / var ** m
               for m in range(1, m_max + 1)]
    c_V = max(float(c / math.factorial(2 * m)) for m, c in enumerate(mom, start=1))
    return MomentTable(tuple(mom), c_V)


def _integer_partitions(k, largest=None):
    """Integer partitions of ``k`` as dicts ``{part: multiplicity}``."""
    largest = k if largest is None else largest
    if k == 0:
        yield {}
        return
    for part in range(min(k, largest), 0, -1):
        for rest in _integer_partitions(k - part, part):
            out = dict(rest)
            out[part] = out.get(part, 0) + 1
            yield out


def renormalized_cumulants(moments, k_max=None):
    """Cumulants ``c_{2k}`` from the multi-index sum over block-size profiles.

    For each ``k`` the sum runs over distinct half block sizes
    ``l_1 < ... < l_r`` with multiplicities ``j_i`` such that
    ``sum j_i l_i = k``; ``m = sum j_i`` is the number of blocks.  The term is
    ``(-1)^{m-1} (m-1)! (2k)! / prod((2 l_i)!^{j_i} j_i!) prod tilde c_{2 l_i}^{j_i}``.
    """
    k_max = moments.m_max if k_max is None else k_max
    if k_max > moments.m_max:
        raise ValueError("k_max exceeds the moment table")
    out = []
    for k in range(1, k_max + 1):
        total = Fraction(0)
        for profile in _integer_partitions(k):
            m = sum(profile.values())
            term = Fraction((-1) ** (m - 1) * math.factorial(m - 1) * math.factorial(2 * k))
            for l, j in profile.items():
                term *= moments[2 * l] ** j
                term /= math.factorial(2 * l) ** j * math.factorial(j)
            total += term
        out.append(total)
    return CumulantTable(tuple(out))


def cumulants_series_oracle(moments, k_max=None):
    """Cumulants from the series ``log E[exp(t omega)]``.

    Independent of the multi-index formula: the logarithm of the moment
    generating series is taken with the recurrence ``f L' = f'``.
    """
    k_max = moments.m_max if k_max is None else k_max
    n = 2 * k_max
    f = [moments[j] / math.factorial(j) for j in range(n + 1)]
    L = [Fraction(0)] * (n + 1)
    # n a_n = n f_n - sum_{j=1}^{n-1} j L_j f_{n-j}
    for j in range(1, n + 1):
        acc = j * f[j] - sum(i * L[i] * f[j - i] for i in range(1, j))
        L[j] = acc / j
    return CumulantTable(tuple(L[2 * k] * math.factorial(2 * k) for k in range(1, k_max + 1)))


def cumulant_bound(k, c_V):
    """A priori bound ``(2k exp(e^{c_V}/2))^{2k+1}`` on ``|c_{2k}|``."""
    return (2 * k * math.exp(0.5 * math.exp(c_V))) ** (2 * k + 1)


@lru_cache(maxsize=64)
def _tables(dist, order):
    mom = raw_moments(dist, max(order // 2, 1))
    return mom, renormalized_cumulants(mom)


def _even_partitions_of_equal_sites(labels, sites):
    """Literal even-block partitions of ``labels`` whose blocks are site-constant.

    Yields lists of block sizes.  This is the partition sum with every
    vanishing Kronecker delta pruned as early as possible.
    """
    if not labels:
        yield []
        return
    first, rest = labels[0], labels[1:]
    same = [j for j in rest if sites[j] == sites[first]]
    for size in range(1, len(same) + 1, 2):
        for comp in itertools.combinations(same, size):
            remaining = [j for j in rest if j not in comp]
            for tail in _even_partitions_of_equal_sites(remaining, sites):
                yield [size + 1] + tail


def _site_keys(points):
    keys = [tuple(np.atleast_1d(p).tolist()) for p in points]
    if len(keys) > 12:
        raise ValueError("moments of products support at most 12 points")
    return keys


def moment_direct(points, dist):
    """``E[prod_j omega_{x_j}]`` from per-site multiplicities and raw moments (exact)."""
    keys = _site_keys(points)
    if len(keys) % 2:
        return Fraction(0)
    mom, _ = _tables(dist, max(len(keys), 2))
    counts = {}
    for key in keys:
        counts[key] = counts.get(key, 0) + 1
    out = Fraction(1)
    for c in counts.values():
        out *= mom[c]
    return out


def moment_partition_sum(points, dist):
    """``sum_pi prod_{S in pi} c_{|S|} delta(x_S)`` over even partitions (exact)."""
    keys = _site_keys(points)
    n = len(keys)
    if n % 2:
        return Fraction(0)
    if n == 0:
        return Fraction(1)
    _, cum = _tables(dist, n)
    total = Fraction(0)
    for sizes in _even_partitions_of_equal_sites(list(range(n)), keys):
        term = Fraction(1)
        for s in sizes:
            term *= cum[s]
        total += term
    return total


def moment_of_product(points, dist):
    """``E[prod_j omega_{x_j}]`` for a list of sites.

    Evaluated both from raw moments and as the cumulant partition sum; the
    two must agree to 1e-12 or :class:`MomentMismatch` is raised.
    """
    a = float(moment_direct(points, dist))
    b = float(moment_partition_sum(points, dist))
    if abs(a - b) > 1e-12:
        raise MomentMismatch(f"direct moment {a} != partition sum {b} for {points}")
    return a


# ---------------------------------------------------------------------------
# sampling


def _raw_stream(seed, n, start=0):
    """``n`` raw 64-bit words of the counter-based stream keyed by ``seed``,
    beginning at word ``start``.  Word ``i`` depends only on ``(seed, i)``."""
    bg = np.random.Philox(key=int(seed) & ((1 << 128) - 1))
    bg.advance(start // 4)
    skip = start % 4
    return bg.random_raw(skip + n)[skip:].astype(np.uint64)


def values_from_raw(dist, raw):
    raw = np.asarray(raw, dtype=np.uint64)
    if dist.kind == BERNOULLI:
        return np.where(raw >> np.uint64(63), 1.0, -1.0)
    u = (raw >> np.uint64(11)).astype(float) * 2.0 ** -53
    if dist.kind == UNIFORM:
        return math.sqrt(3.0) * (2.0 * u - 1.0)
    cdf = np.cumsum(dist.weights)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.asarray(dist.values)[np.minimum(idx, len(dist.values) - 1)]


def sample_values(dist, n, seed, start=0):
    """Values of sites ``start .. start+n-1`` (row-major order)."""
    return values_from_raw(dist, _raw_stream(seed, n, start))


@dataclass(frozen=True)
class DisorderField:
    box: BoxSpec
    values: np.ndarray = field(repr=False)
    seed: int = 0
    distribution: SiteDistribution = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.box.shape:
            raise ValueError("field values do not match the box")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def max_abs(self):
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def sample_field(dist, box, seed):
    """I.i.d. disorder on ``box``, a pure function of ``(dist, box, seed)``."""
    vals = sample_values(dist, box.n_sites, seed).reshape(box.shape)
    return DisorderField(box, vals, int(seed), dist)


def constant_field(box, c):
    return DisorderField(box, np.full(box.shape, float(c)), 0, None)


def enumerate_configurations(dist, n_sites):
    """All disorder configurations of a finite discrete law with probabilities.

    Returns ``(configs, probs)`` with ``configs`` of shape ``(K**n_sites, n_sites)``.
    Configurations come in sign-flipped pairs: row ``i`` and row ``-1 - i``
    are negatives of each other.
    """
    if dist.kind == BERNOULLI:
        vals, wts = np.array([-1.0, 1.0]), np.array([0.5, 0.5])
    elif dist.kind == DISCRETE:
        vals, wts = np.asarray(dist.values), np.asarray(dist.weights)
    else:
        raise ValueError("exhaustive enumeration needs a discrete law")
    K = len(vals)
    if K ** n_sites > 1 << 22:
        raise ValueError("too many configurations for exhaustive enumeration")
    idx = np.array(list(itertools.product(range(K), repeat=n_sites)), dtype=int).reshape(-1, n_sites)
    return vals[idx], np.prod(wts[idx], axis=1)


def _key_part(k):
    if isinstance(k, (int, np.integer)) and not isinstance(k, bool):
        if k < 0:
            raise ValueError("integer key parts must be non-negative")
        return int(k)
    digest = hashlib.blake2b(repr(k).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master, *key):
    """A 128-bit integer seed derived from ``master`` and a key path.

    Key parts may be integers, strings or floats; non-integers are mapped to
    integers through a stable hash of their ``repr``.  Distinct keys give
    statistically independent Philox streams.
    """
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key_part(k) for k in key))
    lo, hi = ss.generate_state(2, dtype=np.uint64)
    return int(lo) | (int(hi) << 64)
