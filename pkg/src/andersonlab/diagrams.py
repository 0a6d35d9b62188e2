"""Diagrammatics of the disorder expansion.

Vertex sets and even-block partitions with their graph taxonomy, partition
counts, the time-simplex kernel, the recollision integral ``Xi``, Duhamel
terms, amplitudes on finite dual grids with a brute-force disorder oracle,
and the crossing integral.

Labels of the vertex set for ``(n, n')`` are ``1..n`` (the ``phi_n`` side) and
``n+2..n+n'+1`` (the conjugate side); ``n+1`` is the joining point of the two
particle lines.  Momenta ``p_0..p_{N+1}`` (``N = n+n'``) run along the joined
line with ``p_n = p_{n+1}``; vertex ``i`` carries the transfer
``q_i = p_i - p_{i-1}``.
"""
from dataclasses import dataclass
from fractions import Fraction
import functools
import itertools
import math

import numpy as np
import scipy.integrate
import scipy.linalg
from scipy.special import ellipkm1, j0

from .disorder import (enumerate_configurations, raw_moments, renormalized_cumulants)
from .lattice import kinetic_energy, kinetic_grid

MAX_LABELS = 10
COST_CAP = 1 << 22


class CostCapExceeded(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# vertex sets and partitions


@dataclass(frozen=True)
class VertexSet:
    n: int
    n_prime: int

    def __post_init__(self):
        if self.n < 0 or self.n_prime < 0:
            raise ValueError("n and n' must be non-negative")
        if (self.n + self.n_prime) % 2:
            raise ValueError("n + n' must be even")

    @property
    def labels(self):
        return tuple(range(1, self.n + 1)) + tuple(range(self.n + 2, self.n + self.n_prime + 2))

    def side(self, label):
        """0 for the primary line, 1 for the conjugate line."""
        return 0 if label <= self.n else 1


TYPE_I = "I"
TYPE_IP = "I'"
TYPE_II = "II"
TYPE_III = "III"


@dataclass(frozen=True)
class Partition:
    """Even-block partition of a vertex set with its classification."""

    n: int
    n_prime: int
    blocks: tuple
    block_types: tuple = ()
    typeIII: bool = False
    crossing: bool = False
    nested: bool = False
    simple: bool = False
    ladder: bool = False

    @property
    def m(self):
        return len(self.blocks)

    @property
    def category(self):
        for name in ("typeIII", "crossing", "nested", "simple"):
            if getattr(self, name):
                return name
        raise AssertionError("unclassified partition")

    def flags(self):
        return {k: getattr(self, k) for k in ("typeIII", "crossing", "nested", "simple", "ladder")}

    def to_json(self):
        return {"blocks": [list(b) for b in self.blocks], "types": list(self.block_types),
                "classification": [k for k, v in self.flags().items() if v]}


def _even_set_partitions(items):
    """Set partitions of ``items`` into blocks of even size, each exactly once."""
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for size in range(1, len(rest) + 1, 2):
        for comp in itertools.combinations(rest, size):
            remaining = tuple(x for x in rest if x not in comp)
            for tail in _even_set_partitions(remaining):
                yield ((first,) + comp,) + tail


def block_type(block, n):
    if len(block) >= 4:
        return TYPE_III
    i, j = sorted(block)
    if j <= n:
        return TYPE_I
    if i > n:
        return TYPE_IP
    return TYPE_II


def classify(blocks, n, n_prime):
    """Classification flags of a partition given as a list of label blocks.

    Pair ``(i1, j1)`` and ``(i2, j2)`` (``i < j``) cross when their arcs
    interleave, ``i1 < i2 < j1 < j2``.  A non-crossing pairing is nested when
    two pairs of the same type I or I' have one arc inside the other.
    """
    blocks = tuple(tuple(sorted(b)) for b in blocks)
    types = tuple(block_type(b, n) for b in blocks)
    out = {"typeIII": False, "crossing": False, "nested": False, "simple": False,
           "ladder": False}
    if any(t == TYPE_III for t in types):
        out["typeIII"] = True
        return types, out
    pairs = sorted(zip(blocks, types))
    for (a, ta), (b, tb) in itertools.combinations(pairs, 2):
        (_, j1), (i2, j2) = a, b  # a opens first after sorting
        if i2 < j1 < j2:
            out["crossing"] = True
    if not out["crossing"]:
        for (a, ta), (b, tb) in itertools.combinations(pairs, 2):
            (_, j1), (_, j2) = a, b
            if j2 < j1 and ta == tb and ta in (TYPE_I, TYPE_IP):
                out["nested"] = True
        if not out["nested"]:
            out["simple"] = True
            out["ladder"] = all(t == TYPE_II for t in types)
    return types, out


def make_partition(blocks, n, n_prime):
    blocks = tuple(sorted(tuple(sorted(b)) for b in blocks))
    types, flags = classify(blocks, n, n_prime)
    return Partition(n, n_prime, blocks, types, **flags)


def enumerate_partitions(n, n_prime):
    """All even-block partitions of the vertex set, classified."""
    vs = VertexSet(n, n_prime)
    if n + n_prime > MAX_LABELS:
        raise ValueError(f"n + n' = {n + n_prime} exceeds the cap {MAX_LABELS}")
    return [make_partition(p, n, n_prime) for p in _even_set_partitions(vs.labels)]


def count_partitions(nbar, m):
    """Number ``B_nbar(m)`` of partitions of ``2 nbar`` labels into ``m`` even blocks."""
    if not 1 <= m <= nbar:
        raise ValueError("need 1 <= m <= nbar")
    total = 0
    for profile in _integer_partitions_exact(nbar, m):
        denom = 1
        for l, j in profile.items():
            denom *= math.factorial(2 * l) ** j * math.factorial(j)
        total += math.factorial(2 * nbar) // denom
    return total


def _integer_partitions_exact(k, parts, largest=None):
    """Integer partitions of ``k`` into exactly ``parts`` parts, as multiplicity dicts."""
    largest = k if largest is None else largest
    if parts == 0:
        if k == 0:
            yield {}
        return
    for part in range(min(k, largest), 0, -1):
        if part * parts < k:
            break
        for rest in _integer_partitions_exact(k - part, parts - 1, part):
            out = dict(rest)
            out[part] = out.get(part, 0) + 1
            yield out


def has_complete_spanning_tree(partition):
    """Check that the pairing graph admits a spanning tree containing every
    contraction line and ``p_n`` but not ``p_{n+1}``.

    Particle-line vertices are ``1..N+1`` (with ``n+1`` the joining point) and
    a vertex ``0`` standing for both open ends, which momentum conservation
    identifies.  Edge ``p_j`` joins ``j`` and ``j+1`` (``p_{N+1}`` returns to
    ``0``).  Kruskal with union-find: contractions first, then ``p_n``, then
    the remaining propagators except ``p_{n+1}``.
    """
    n, n_prime = partition.n, partition.n_prime
    N = n + n_prime
    nv = N + 2
    parent = list(range(nv))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra == rb:
            return False
        parent[ra] = rb
        return True

    def prop(j):
        return j, (j + 1) % (N + 2)

    for block in partition.blocks:
        if len(block) != 2:
            return False
        if not union(*block):
            return False
    if not union(*prop(n)):
        return False
    for j in range(N + 2):
        if j in (n, n + 1):
            continue
        union(*prop(j))
    return len({find(v) for v in range(nv)}) == 1


# ---------------------------------------------------------------------------
# simplex kernel


@dataclass(frozen=True)
class SimplexKernelInput:
    energies: tuple
    t: float


def _divided_difference_exp(E, t):
    """Divided differences of ``z -> exp(-i t z)`` on each row of ``E``.

    The value is the ``(n, 0)`` entry of ``exp(-i t Z)`` where ``Z`` is the
    lower bidiagonal matrix with the nodes on the diagonal and ones below it.
    The nodes are centred, the matrix is scaled by ``2^-s`` so its norm is at
    most 1/2, exponentiated by a Taylor series, and squared back.
    """
    E = np.asarray(E, dtype=float)
    B, n1 = E.shape
    if n1 == 1:
        return np.exp(-1j * t * E[:, 0])
    lo, hi = E.min(axis=1), E.max(axis=1)
    c = 0.5 * (lo + hi)
    norm = abs(t) * (0.5 * np.max(hi - lo) + 1.0)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    tau = t / 2.0 ** s
    A = np.zeros((B, n1, n1), dtype=complex)
    idx = np.arange(n1)
    A[:, idx, idx] = -1j * tau * (E - c[:, None])
    A[:, idx[1:], idx[:-1]] = -1j * tau
    X = np.broadcast_to(np.eye(n1, dtype=complex), (B, n1, n1)).copy()
    term = X.copy()
    # entry (n, 0) first appears at order n; 20 further orders put the
    # truncation below 0.5^20/20! relative to it
    for k in range(1, n1 + 20):
        term = term @ A / k
        X += term
    for _ in range(s):
        X = X @ X
    return np.exp(-1j * t * c) * X[:, n1 - 1, 0]


def simplex_kernel_batch(E, t):
    """``K^(n)`` for each row of energies ``E`` (shape ``(B, n+1)``).

    ``K^(n) = int_{s >= 0, sum s = t} exp(-i sum_j s_j e_j)``, evaluated as
    ``i^n`` times the divided difference of ``exp(-i t z)``.  Rows are sorted
    and deduplicated first (the kernel is symmetric in its arguments).
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    n = E.shape[1] - 1
    if n > 20:
        raise ValueError("simplex kernel supports n <= 20")
    S = np.sort(E, axis=1)
    uniq, inv = np.unique(S, axis=0, return_inverse=True)
    vals = (1j) ** n * _divided_difference_exp(uniq, t)
    return vals[np.asarray(inv).ravel()]


def simplex_kernel(inp):
    """``K^(n)(e_0..e_n; t)`` for a single :class:`SimplexKernelInput`."""
    return complex(simplex_kernel_batch(np.array([inp.energies], dtype=float), inp.t)[0])


class KernelTable:
    """Kernels on index tuples into a fixed list of distinct energies."""

    def __init__(self, levels, t):
        self.levels = np.asarray(levels, dtype=float)
        self.t = t
        self._tables = {}

    def table(self, n):
        D = len(self.levels)
        if n not in self._tables:
            grid = np.indices((D,) * (n + 1)).reshape(n + 1, -1).T
            self._tables[n] = simplex_kernel_batch(self.levels[grid], self.t).reshape((D,) * (n + 1))
        return self._tables[n]

    def lookup(self, idx):
        """``idx`` has shape ``(..., n+1)`` of level indices."""
        idx = np.asarray(idx)
        n = idx.shape[-1] - 1
        D = len(self.levels)
        if D ** (n + 1) <= COST_CAP:
            return self.table(n)[tuple(np.moveaxis(idx, -1, 0))]
        flat = idx.reshape(-1, n + 1)
        return simplex_kernel_batch(self.levels[flat], self.t).reshape(idx.shape[:-1])


@functools.lru_cache(maxsize=32)
def _kernel_table(levels, t):
    return KernelTable(levels, t)


def energy_levels(box):
    """Distinct kinetic energies of the dual grid and each momentum's level."""
    e = kinetic_grid(box).ravel()
    levels, inv = np.unique(e, return_inverse=True)
    return levels, np.asarray(inv).ravel()


# ---------------------------------------------------------------------------
# Duhamel terms and the brute-force oracle


def _momentum_difference_index(box):
    """``D[k, k']`` = flat index of ``k - k'`` on the dual grid."""
    G = box.n_sites
    c = np.stack(np.unravel_index(np.arange(G), box.shape), axis=1)
    d = (c[:, None, :] - c[None, :, :]) % box.n
    return np.ravel_multi_index(tuple(np.moveaxis(d, -1, 0)), box.shape)


def _source_phase(box, x):
    k = np.stack([g.ravel() for g in box.dual_grid()], axis=1)
    return np.exp(-2j * np.pi * (k @ np.asarray(x, dtype=float)))


def duhamel_terms_hat(n, fields, box, x, t, lam, chunk=32):
    """Fourier coefficients of the ``n``-th Duhamel term for a batch of fields.

    ``phi_n^(k_n) = (-i lam)^n sum_{k_0..k_{n-1}} prod_l [V^(k_l - k_{l-1}) / G]
    K^(n)(e(k_0)..e(k_n)) exp(-2 pi i k_0 x)``.

    Returns an array of shape ``(B, G)`` (flat dual-grid order).
    """
    if not box.periodic:
        raise ValueError("Duhamel terms are evaluated on periodic boxes")
    if n > 6:
        raise ValueError("Duhamel terms are supported for n <= 6")
    fields = np.asarray(fields, dtype=float).reshape(-1, box.n_sites)
    B, G = fields.shape
    if G ** (n + 1) > COST_CAP:
        raise CostCapExceeded(f"grid^(n+1) = {G ** (n + 1)} exceeds the cost cap")
    phase = _source_phase(box, x)
    if n == 0:
        levels, lev = energy_levels(box)
        return np.broadcast_to(np.exp(-1j * t * levels[lev]) * phase, (B, G)).copy()
    levels, lev = energy_levels(box)
    table = _kernel_table(tuple(levels), t)
    chunk = max(1, min(chunk, COST_CAP // G ** n))
    grids = np.indices((G,) * (n + 1))
    K = table.lookup(np.stack([lev[g] for g in grids], axis=-1))
    T0 = K * phase.reshape((G,) + (1,) * n)
    Vhat = np.fft.fftn(fields.reshape((B,) + box.shape), axes=tuple(range(1, box.dim + 1)))
    Vhat = Vhat.reshape(B, G)
    D = _momentum_difference_index(box)
    out = np.empty((B, G), dtype=complex)
    for start in range(0, B, chunk):
        Mb = Vhat[start:start + chunk][:, D] / G  # (b, k_l, k_{l-1})
        T = np.einsum("bij,ji...->bi...", Mb, T0)
        for _ in range(1, n):
            T = np.einsum("bij,bji...->bi...", Mb, T)
        out[start:start + chunk] = T
    return (-1j * lam) ** n * out


def duhamel_term(n, omega, x, t, lam):
    """``phi_{n,t}`` for one disorder field, as a WaveFunction."""
    from .lattice import WaveFunction
    box = omega.box
    hat = duhamel_terms_hat(n, omega.values[None], box, x, t, lam)[0]
    return WaveFunction(box, np.fft.ifftn(hat.reshape(box.shape)))


def duhamel_term_expm(n, omega, x, t, lam):
    """Independent oracle: ``lam^n`` times the corner block of the exponential
    of the block-bidiagonal matrix with ``H0`` on the diagonal and ``V`` above."""
    from .lattice import WaveFunction, delta
    from .propagate import hamiltonian_matrix
    box = omega.box
    G = box.n_sites
    H0 = hamiltonian_matrix(box).toarray()
    V = np.diag(omega.values.ravel())
    A = np.zeros(((n + 1) * G, (n + 1) * G))
    for b in range(n + 1):
        A[b * G:(b + 1) * G, b * G:(b + 1) * G] = H0
        if b < n:
            A[b * G:(b + 1) * G, (b + 1) * G:(b + 2) * G] = V
    E = scipy.linalg.expm(-1j * t * A)
    src = delta(box, x).amplitudes.ravel()
    phi = lam ** n * E[:G, n * G:] @ src
    return WaveFunction(box, phi.reshape(box.shape))


def expectation_bruteforce(n, n_prime, box, dist, x, t, lam):
    """``E <phi_{n'}, phi_n>`` by exhaustive enumeration of disorder configurations.

    Configurations are summed in sign-flipped pairs, so odd ``n + n'`` gives
    exactly zero.
    """
    configs, probs = enumerate_configurations(dist, box.n_sites)
    G = box.n_sites
    a = duhamel_terms_hat(n, configs, box, x, t, lam)
    b = a if n_prime == n else duhamel_terms_hat(n_prime, configs, box, x, t, lam)
    vals = probs * np.einsum("bk,bk->b", b.conj(), a) / G
    half = len(vals) // 2
    paired = vals[:half] + vals[::-1][:half]
    return complex(np.sum(paired))


# ---------------------------------------------------------------------------
# amplitudes


@dataclass(frozen=True)
class AmplitudeContext:
    box: object
    lam: float
    t: float
    x: tuple
    cumulants: object

    @classmethod
    def build(cls, box, lam, t, dist, x=None, k_max=6):
        x = tuple([0] * box.dim) if x is None else tuple(x)
        cum = renormalized_cumulants(raw_moments(dist, k_max))
        return cls(box, lam, t, x, cum)


def amplitude(partition, ctx):
    """``Amp[pi]`` in the time representation on the dual grid of ``ctx.box``.

    Each block ``S`` forces ``sum_{i in S} q_i = 0``; the transfer at the
    largest label of every block is eliminated and the remaining transfers
    plus ``p_0`` are summed over the grid.
    """
    box = ctx.box
    n, n_prime = partition.n, partition.n_prime
    N = n + n_prime
    G = box.n_sites
    m = partition.m
    labels = VertexSet(n, n_prime).labels
    eliminated = {max(b): b for b in partition.blocks}
    free_q = [i for i in labels if i not in eliminated]
    n_free = 1 + len(free_q)
    if G ** n_free > COST_CAP:
        raise CostCapExceeded(f"grid^{n_free} exceeds the cost cap")
    weight = Fraction(1)
    for b in partition.blocks:
        weight *= ctx.cumulants[len(b)]
    if weight == 0:
        return 0j
    coords = np.stack(np.unravel_index(np.arange(G), box.shape), axis=1)  # (G, dim)
    mesh = np.indices((G,) * n_free).reshape(n_free, -1)
    p0 = coords[mesh[0]]
    q = {}
    for j, i in enumerate(free_q, start=1):
        q[i] = coords[mesh[j]]
    for i, b in eliminated.items():
        q[i] = -sum(q[j] for j in b if j != i)
    p = [p0 % box.n]
    for j in range(1, N + 2):
        p.append((p[-1] + q[j]) % box.n if j in q else p[-1])
    levels, lev = energy_levels(box)
    table = _kernel_table(tuple(levels), ctx.t)

    def level(pj):
        return lev[np.ravel_multi_index(tuple(pj.T), box.shape)]

    if n > 0:
        K1 = table.lookup(np.stack([level(p[j]) for j in range(0, n + 1)], axis=-1))
    else:
        K1 = np.exp(-1j * ctx.t * levels[level(p[0])])
    if n_prime > 0:
        K2 = table.lookup(np.stack([level(p[j]) for j in range(N + 1, n, -1)], axis=-1))
    else:
        K2 = np.exp(-1j * ctx.t * levels[level(p[N + 1])])
    dx = (p[0] - p[N + 1]) / box.n
    phase = np.exp(-2j * np.pi * (dx @ np.asarray(ctx.x, dtype=float)))
    total = np.sum(phase * K1 * np.conj(K2))
    pref = (1.0 / G) * ctx.lam ** N * (-1j) ** n * (1j) ** n_prime * float(G) ** (m - N)
    return complex(pref * float(weight) * total)


def amplitude_sum(n, n_prime, ctx):
    if (n + n_prime) % 2:
        return 0j
    return sum((amplitude(p, ctx) for p in enumerate_partitions(n, n_prime)), 0j)


# ---------------------------------------------------------------------------
# densities of states and the recollision integral


def dos_1d(u):
    """Density of ``2 sin^2(pi k)`` on ``(0, 2)``."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 1.0 / (np.pi * np.sqrt(u * (2.0 - u)))
    return np.where((u > 0) & (u < 2), out, 0.0)


def dos_2d(w):
    """Density of ``e_1 + e_2`` on ``(0, 4)``: ``K(1 - (w-2)^2/4) / pi^2``."""
    w = np.asarray(w, dtype=float)
    # ellipkm1 takes the complementary parameter, accurate at the log singularity
    p = np.clip((w - 2.0) ** 2 / 4.0, 1e-300, 1.0)
    out = ellipkm1(p) / np.pi ** 2
    return np.where((w > 0) & (w < 4), out, 0.0)


def _dos_3d_scalar(E):
    if E <= 0 or E >= 6:
        return 0.0
    # u = E - w = 1 - cos(theta) turns dos_1d(u) du into dtheta / pi
    # w = E - 1 + cos(theta) must stay in (0, 4); the log singularity sits at w = 2
    lo = math.acos(5.0 - E) if E > 4 else 0.0
    hi = math.acos(1.0 - E) if E < 2 else math.pi
    pts = []
    if -1 < 3.0 - E < 1:
        pts.append(math.acos(3.0 - E))
    val, err = scipy.integrate.quad(lambda th: float(dos_2d(E - 1.0 + math.cos(th))),
                                    lo, hi, points=[p for p in pts if lo < p < hi] or None,
                                    limit=400, epsabs=1e-13, epsrel=1e-11)
    return val / math.pi


def measure_shell_quad(E):
    """Adaptive-quadrature reference for :func:`measure_shell` (slow, scalar loop)."""
    E = np.asarray(E, dtype=float)
    return np.vectorize(_dos_3d_scalar, otypes=[float])(E)


@functools.lru_cache(maxsize=4)
def _tanh_sinh_rule(h=1.0 / 16, kmax=96):
    """Nodes on (-1, 1) with ``1 - x`` and ``1 + x`` kept to full relative precision."""
    k = np.arange(-kmax, kmax + 1) * h
    u = 0.5 * np.pi * np.sinh(k)
    x = np.tanh(u)
    one_minus = np.exp(-u) / np.cosh(u)
    one_plus = np.exp(u) / np.cosh(u)
    w = h * 0.5 * np.pi * np.cosh(k) / np.cosh(u) ** 2
    keep = (one_minus > 0) & (one_plus > 0) & (w > 1e-300)
    return x[keep], one_minus[keep], one_plus[keep], w[keep]


def _dos_2d_offset(d):
    """``rho_2(2 + d)`` from the offset ``d``, accurate near the log singularity."""
    p = np.clip(d * d / 4.0, 1e-300, None)
    return np.where(np.abs(d) < 2.0, ellipkm1(np.minimum(p, 1.0)) / np.pi ** 2, 0.0)


def measure_shell(E):
    """Co-area measure ``mes{e = E} = int dU delta(e(U) - E)`` (3D density of states).

    Vectorized: ``(1/pi) int dtheta rho_2(E - 1 + cos theta)`` by tanh-sinh
    quadrature on the two pieces separated by the log singularity of
    ``rho_2``.  Agrees with :func:`measure_shell_quad` to about 1e-12.
    """
    E = np.asarray(E, dtype=float)
    flat = E.ravel()
    out = np.zeros(flat.shape)
    inside = np.nonzero((flat > 0) & (flat < 6))[0]
    for start in range(0, inside.size, 4096):
        sel = inside[start:start + 4096]
        out[sel] = _measure_shell_inside(flat[sel])
    return out.reshape(E.shape)


def _measure_shell_inside(E):
    Ei = E[:, None]
    lo = np.where(Ei > 4, np.arccos(np.clip(5.0 - Ei, -1, 1)), 0.0)
    hi = np.where(Ei < 2, np.arccos(np.clip(1.0 - Ei, -1, 1)), np.pi)
    has_sing = np.abs(3.0 - Ei) <= 1.0
    ts = np.arccos(np.clip(3.0 - Ei, -1, 1))
    mid = np.clip(ts, lo, hi)
    x, om, op, w = _tanh_sinh_rule()
    total = np.zeros(Ei.shape[0])
    for a, b, first in ((lo, mid, True), (mid, hi, False)):
        half = 0.5 * (b - a)
        th = 0.5 * (a + b) + half * x
        # theta - ts from the node offsets, so d = cos(theta) - cos(ts) keeps its digits
        rel = -half * om if first else half * op
        d_sing = -2.0 * np.sin(0.5 * (th + ts)) * np.sin(0.5 * rel)
        d = np.where(has_sing, d_sing, Ei - 3.0 + np.cos(th))
        total += half[:, 0] * (_dos_2d_offset(d) @ w)
    return total / np.pi


def theta_integral(alpha, eps, tol=1e-10):
    """``Xi(alpha, eps) = int_{T^3} dq / (e(q) - alpha - i eps)``.

    One coordinate is integrated in closed form,
    ``int_0^1 dk / (A - cos 2 pi k) = 1 / (sqrt(A-1) sqrt(A+1))``, and the
    remaining two through the 2D density of states, leaving an adaptive 1D
    quadrature with breakpoints at the singular points.
    """
    alpha = complex(alpha)
    eps = float(eps)
    z = alpha + 1j * eps
    if eps == 0 and alpha.imag == 0 and 0 <= alpha.real <= 6:
        raise ValueError("Xi is singular for eps = 0 on the spectrum")

    def g(w):
        A = w + 1.0 - z
        return dos_2d(w) / (np.sqrt(A - 1.0) * np.sqrt(A + 1.0))

    pts = {2.0}
    for c in (z.real - 2.0, z.real):
        pts.add(c)
        # geometric breakpoints resolve the eps-wide neighbourhood of a branch point
        h = max(abs(eps), 1e-12)
        while h < 4.0:
            pts.update((c - h, c + h))
            h *= 4.0
    pts = sorted(p for p in pts if 0 < p < 4)
    edges = [0.0] + pts + [4.0]
    re = im = 0.0
    err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        r, er = scipy.integrate.quad(lambda w: float(np.real(g(w))), a, b, limit=500,
                                     epsabs=tol, epsrel=1e-10)
        i, ei = scipy.integrate.quad(lambda w: float(np.imag(g(w))), a, b, limit=500,
                                     epsabs=tol, epsrel=1e-10)
        re += r
        im += i
        err += er + ei
    if err > 1e3 * tol + 1e-6:
        raise QuadratureError(f"Xi quadrature error estimate {err:.2e}")
    return complex(re, im)


def theta_integral_time(alpha, eps, s_max=None):
    """Oracle: ``Xi = i int_0^inf ds exp(i s (alpha + i eps)) (exp(-is) J_0(s))^3``."""
    if eps <= 0:
        raise ValueError("time representation needs eps > 0")
    s_max = s_max or 40.0 / eps
    f_re = lambda s: float(np.real(1j * np.exp(1j * s * (alpha + 1j * eps)) * (np.exp(-1j * s) * j0(s)) ** 3))
    f_im = lambda s: float(np.imag(1j * np.exp(1j * s * (alpha + 1j * eps)) * (np.exp(-1j * s) * j0(s)) ** 3))
    edges = np.linspace(0.0, s_max, int(s_max / 20) + 2)
    re = sum(scipy.integrate.quad(f_re, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:]))
    im = sum(scipy.integrate.quad(f_im, a, b, limit=200)[0] for a, b in zip(edges[:-1], edges[1:]))
    return complex(re, im)


def theta_integral_grid(alpha, eps, M=128):
    """Oracle: midpoint sum of the 3D integral on an ``M^3`` grid."""
    k = (np.arange(M) + 0.5) / M
    e1 = 2.0 * np.sin(np.pi * k) ** 2
    z = alpha + 1j * eps
    total = 0j
    for a in e1:
        e = a + e1[:, None] + e1[None, :]
        total += np.sum(1.0 / (e - z))
    return total / M ** 3


# ---------------------------------------------------------------------------
# crossing integral

RHO3_MAX = 0.2894  # bounds max mes{e = E} = 0.28939869 attained at E = 2, 4


class _ShellEnergySampler:
    """Exact sampler of points ``p`` with density ``g(e(p)) / Z`` on the torus,
    ``g(E) = 1 / |E - a + i eps|``.

    Energies come from ``mes{e = E} g(E) / Z`` by rejection against a
    piecewise-constant envelope (refined geometrically around ``Re a``), then
    a co-area point is drawn on the shell.
    """

    def __init__(self, a, eps):
        self.a = complex(a)
        self.eps = float(eps)
        c = self.a.real
        geo = self.eps * np.geomspace(1e-3, 6.0 / self.eps, 80)
        nodes = np.concatenate([np.linspace(0.0, 6.0, 601), c - geo, c + geo, [c]])
        self.nodes = np.unique(np.clip(nodes, 0.0, 6.0))
        lo, hi = self.nodes[:-1], self.nodes[1:]
        closest = np.clip(c, lo, hi)
        self.gmax = self.g(closest)
        w = self.gmax * (hi - lo)
        self.cell_p = w / w.sum()
        self.Z = self._normalization()

    def g(self, E):
        return 1.0 / np.abs(np.asarray(E) - self.a + 1j * self.eps)

    def _normalization(self):
        c = self.a.real
        pts = sorted({p for p in (1.0, 2.0, 3.0, 4.0, 5.0, c) if 0 < p < 6})
        pts += [p for h in (self.eps, 10 * self.eps) for p in (c - h, c + h) if 0 < p < 6]
        pts = sorted(set(pts))
        edges = [0.0] + pts + [6.0]
        f = lambda E: float(measure_shell(E) * self.g(E))
        return sum(scipy.integrate.quad(f, a, b, limit=200, epsabs=1e-12, epsrel=1e-11)[0]
                   for a, b in zip(edges[:-1], edges[1:]))

    def energies(self, n, rng):
        out = np.empty(n)
        filled = 0
        while filled < n:
            m = int(1.3 * (n - filled)) + 16
            cell = rng.choice(self.cell_p.size, size=m, p=self.cell_p)
            E = self.nodes[cell] + rng.uniform(size=m) * (self.nodes[cell + 1] - self.nodes[cell])
            keep = rng.uniform(size=m) * RHO3_MAX * self.gmax[cell] < measure_shell(E) * self.g(E)
            E = E[keep][: n - filled]
            out[filled:filled + E.size] = E
            filled += E.size
        return out

    def points(self, n, rng):
        from .kinetic import _sample_shell_raw  # kinetic imports this module
        return _sample_shell_raw(self.energies(n, rng), rng)


@dataclass(frozen=True)
class CrossingResult:
    value: float
    stderr: float
    apriori: float
    eps: float
    normalizations: tuple

    @property
    def bound_holds(self):
        return self.value <= self.apriori


def crossing_integral(w, alpha, beta, eps, n_samples=200000, seed=0):
    """Monte Carlo estimate of the crossing integral

    ``A_eps(w; alpha, beta) = int dp dq / (|e(p) - beta + i eps|
    |e(q) - alpha + i eps| |e(p + q + w) - alpha + i eps|)``.

    Multiple importance sampling: each pair of the three factors is sampled
    exactly (the third momentum follows from ``r = p + q + w``) and the
    samples are combined with the balance heuristic, so every estimate is
    bounded by three times the smallest pairwise bound.  The returned a priori
    bound is ``Z_1 Z_2 / eps`` with ``Z_i = int dE mes{e = E} / |E - a_i + i eps|``.
    """
    if not 1e-4 <= eps <= 1e-1:
        raise ValueError("eps must lie in [1e-4, 1e-1]")
    rng = np.random.default_rng(seed)
    w = np.asarray(w, dtype=float)
    samplers = [_ShellEnergySampler(beta, eps), _ShellEnergySampler(alpha, eps)]
    samplers.append(samplers[1])  # the last two resolvents share alpha
    Z = np.array([s.Z for s in samplers])
    n = int(n_samples) // 3
    means, variances = [], []
    for first, second in ((0, 1), (0, 2), (1, 2)):
        a_pts = samplers[first].points(n, rng)
        b_pts = samplers[second].points(n, rng)
        # map the sampled pair back to (p, q, r) with r = p + q + w
        if (first, second) == (0, 1):
            p, q = a_pts, b_pts
            r = p + q + w
        elif (first, second) == (0, 2):
            p, r = a_pts, b_pts
            q = r - p - w
        else:
            q, r = a_pts, b_pts
            p = r - q - w
        f = [samplers[0].g(kinetic_energy(np.mod(p, 1.0))),
             samplers[1].g(kinetic_energy(np.mod(q, 1.0))),
             samplers[2].g(kinetic_energy(np.mod(r, 1.0)))]
        Y = 3.0 / (1.0 / (Z[0] * Z[1] * f[2]) + 1.0 / (Z[0] * Z[2] * f[1])
                   + 1.0 / (Z[1] * Z[2] * f[0]))
        means.append(Y.mean())
        variances.append(Y.var(ddof=1) / n)
    value = float(np.mean(means))
    stderr = float(math.sqrt(sum(variances)) / 3.0)
    return CrossingResult(value, stderr, float(Z[0] * Z[1] / eps), float(eps), tuple(Z.tolist()))


def fit_growth_exponent(eps_list, values):
    """Least-squares slope of ``log A`` against ``log(1/eps)``."""
    x = np.log(1.0 / np.asarray(eps_list, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
