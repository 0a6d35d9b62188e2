"""Semiclassical states, lattice Wigner pairings and the linear Boltzmann solver.

Macroscopic variables are ``X = eta x``, ``T = eta t`` with ``eta = lam^2``.
A particle with velocity ``V`` in the torus moves at ``sin(2 pi V)``
(componentwise) and scatters at rate ``sigma(V) = 2 pi mes{e = e(V)}`` to a
point drawn from the co-area measure of its energy shell.
"""
from dataclasses import dataclass
import math

import numpy as np
from scipy.special import erf

from .diagrams import measure_shell, theta_integral
from .disorder import derive_seed, sample_field
from .lattice import BoxSpec, WaveFunction, free_propagate, kinetic_energy
from .propagate import PropagatorConfig, evolve

CRITICAL_ENERGIES = (0.0, 2.0, 4.0, 6.0)
ENERGY_MARGIN = 1e-3


class BoxTooSmall(ValueError):
    pass


class ShellSamplingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WKB states


@dataclass(frozen=True)
class SemiclassicalSpec:
    """Gaussian profile with quadratic phase.

    ``h(X) = (2 pi w^2)^{-3/4} exp(-|X - c|^2 / (4 w^2))`` so that ``|h|^2`` is a
    normal density of standard deviation ``w``; the phase is
    ``s(X) = 2 pi (k0 . X + X.A X / 2) + s0`` so the local velocity is
    ``grad s / (2 pi) = k0 + A X``.
    """

    width: float
    k0: tuple
    eta: float
    centre: tuple = (0.0, 0.0, 0.0)
    chirp: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    phase0: float = 0.0

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.width <= 0:
            raise ValueError("width must be positive")
        A = np.asarray(self.chirp, dtype=float)
        if A.shape != (3, 3) or not np.allclose(A, A.T):
            raise ValueError("chirp must be a symmetric 3x3 matrix")

    def h(self, X):
        X = np.asarray(X, dtype=float) - np.asarray(self.centre)
        r2 = np.sum(X * X, axis=-1)
        return (2 * np.pi * self.width ** 2) ** -0.75 * np.exp(-r2 / (4 * self.width ** 2))

    def s(self, X):
        X = np.asarray(X, dtype=float)
        A = np.asarray(self.chirp)
        quad = 0.5 * np.einsum("...i,ij,...j->...", X, A, X)
        return 2 * np.pi * (X @ np.asarray(self.k0, dtype=float) + quad) + self.phase0

    def velocity(self, X):
        """``grad s(X) / (2 pi)`` reduced to the torus."""
        X = np.asarray(X, dtype=float)
        return np.mod(np.asarray(self.k0) + X @ np.asarray(self.chirp).T, 1.0)


def _centred_coords(box):
    """Minimal-image site coordinates, one array per axis."""
    n = box.n
    c = (np.arange(n) + n // 2) % n - n // 2  # values in [-n/2, n/2)
    return np.meshgrid(*([c] * box.dim), indexing="ij")


def captured_mass(spec, box):
    """Mass of ``|h|^2`` inside the macroscopic window the box covers."""
    half = 0.5 * box.n * spec.eta
    out = 1.0
    for c in spec.centre:
        a = (half - c) / (math.sqrt(2) * spec.width)
        b = (-half - c) / (math.sqrt(2) * spec.width)
        out *= 0.5 * (erf(a) - erf(b))
    return out


def wkb_state(spec, box, min_mass=1.0 - 1e-6):
    """``eta^{3/2} h(eta x) exp(i s(eta x) / eta)`` on a periodic 3D box."""
    if not box.periodic or box.dim != 3:
        raise ValueError("WKB states live on periodic 3D boxes")
    mass = captured_mass(spec, box)
    if mass < min_mass:
        raise BoxTooSmall(f"box captures only {mass:.9f} of the profile at eta={spec.eta}")
    X = np.stack(_centred_coords(box), axis=-1) * spec.eta
    amp = spec.eta ** 1.5 * spec.h(X) * np.exp(1j * spec.s(X) / spec.eta)
    return WaveFunction(box, amp)


# ---------------------------------------------------------------------------
# test functions and the Wigner pairing


@dataclass(frozen=True)
class TestFunction:
    """``J(X, V) = G(X) sum_n a_n exp(2 pi i n.V)``.

    ``G`` is ``exp(-|X - c|^2 / (2 w^2))``, or identically 1 when ``width`` is
    None.  ``coefficients`` maps integer 3-vectors ``n`` to ``a_n``.
    """

    __test__ = False  # not a pytest class

    centre: tuple = (0.0, 0.0, 0.0)
    width: float = None
    coefficients: tuple = (((0, 0, 0), 1.0),)

    @property
    def terms(self):
        return [(tuple(int(v) for v in n), complex(a)) for n, a in self.coefficients]

    def is_real(self):
        d = dict(self.terms)
        return all(abs(d.get(tuple(-v for v in n), 0) - a.conjugate()) < 1e-14
                   for n, a in d.items())

    def spatial(self, X):
        X = np.asarray(X, dtype=float)
        if self.width is None:
            return np.ones(X.shape[:-1])
        r2 = np.sum((X - np.asarray(self.centre)) ** 2, axis=-1)
        return np.exp(-r2 / (2 * self.width ** 2))

    def velocity_part(self, V):
        V = np.asarray(V, dtype=float)
        out = np.zeros(V.shape[:-1], dtype=complex)
        for n, a in self.terms:
            out += a * np.exp(2j * np.pi * (V @ np.asarray(n, dtype=float)))
        return out

    def __call__(self, X, V):
        return self.spatial(X) * self.velocity_part(V)


def _nyquist_safe_shift_phase(box, n):
    """``exp(-i pi xi.n)`` on the dual grid with ``xi`` wrapped to ``(-1/2, 1/2]``.

    On an even grid the Nyquist frequency is shared by ``+-1/2``; averaging
    the two branches gives ``cos(pi n_j / 2)`` there, which keeps the pairing
    real for real test functions.
    """
    M = box.n
    j = np.arange(M)
    xi = np.where(j > M // 2, j - M, j) / M
    out = 1.0
    for axis, nj in enumerate(n):
        f = np.exp(-1j * np.pi * xi * nj)
        if M % 2 == 0:
            f[M // 2] = np.cos(np.pi * nj / 2)
        shape = [1] * box.dim
        shape[axis] = M
        out = out * f.reshape(shape)
    return out


def wigner_pair(psi, J, eta):
    """``<J, W^(eta)>`` evaluated on the Fourier side.

    ``sum_n conj(a_n) (1/M^3) sum_xi conj(G^_eta(xi)) exp(-i pi xi.n)
    F[conj(psi(. + n)) psi](xi)`` where ``G^_eta`` is the discrete transform of
    ``G(eta x)`` on centred coordinates.  For ``G = 1`` only ``xi = 0``
    survives and the pairing reduces to ``sum_n conj(a_n) <psi(. + n), psi>``.
    """
    box = psi.box
    if not box.periodic:
        raise ValueError("Wigner pairing needs a periodic box")
    a = np.asarray(psi.amplitudes)
    axes = tuple(range(box.dim))
    if J.width is None:
        Ghat = None
    else:
        X = np.stack(_centred_coords(box), axis=-1) * eta
        Ghat = np.fft.fftn(J.spatial(X))
    total = 0j
    for n, an in J.terms:
        shifted = np.roll(a, shift=tuple(-v for v in n), axis=axes)  # psi(x + n)
        prod = np.conj(shifted) * a
        if Ghat is None:
            val = np.sum(prod)
        else:
            val = np.sum(np.conj(Ghat) * _nyquist_safe_shift_phase(box, n) * np.fft.fftn(prod))
            val /= box.n_sites
        total += np.conj(an) * val
    if J.is_real():
        scale = max(1.0, abs(total))
        if abs(total.imag) > 1e-9 * scale:
            raise AssertionError(f"pairing with a real test function has imaginary part {total.imag:.3e}")
        return float(total.real)
    return total


# ---------------------------------------------------------------------------
# cross sections and shell sampling


def total_cross_section(V):
    """``sigma(V) = 2 pi mes{e = e(V)}`` by co-area quadrature."""
    return 2 * np.pi * measure_shell(kinetic_energy(V))


def total_cross_section_xi(V, eps_list=(1e-2, 1e-3, 1e-4)):
    """``2 lim Im Xi(e(V) + i eps)`` by linear extrapolation in ``eps`` from the
    two smallest values of ``eps_list``."""
    E = float(kinetic_energy(V))
    e1, e2 = sorted(eps_list)[:2]
    i1 = theta_integral(E, e1).imag
    i2 = theta_integral(E, e2).imag
    lim = i1 + (i1 - i2) * e1 / (e2 - e1)
    return 2.0 * lim


def _min_sine_sum(c):
    """Minimum of ``sum_i sin(theta_i)`` over ``sum_i cos(theta_i) = c``.

    With ``x_i = cos(theta_i)`` the objective is a sum of concave functions on
    a polytope, so the minimum sits at a vertex: two coordinates at +-1 and
    the third at ``c``, ``c - 2`` or ``c + 2``.
    """
    c = np.asarray(c, dtype=float)
    best = np.full(c.shape, np.inf)
    for x3 in (c, c - 2.0, c + 2.0):
        ok = np.abs(x3) <= 1.0
        best = np.where(ok, np.minimum(best, np.sqrt(np.clip(1.0 - x3 * x3, 0.0, None))), best)
    return best


def _sample_shell_raw(E, rng, floor=1e-12):
    """Co-area samples on the shells ``e = E`` (one per entry of ``E``).

    Writing ``e(k) = 3 - sum cos(theta_i)`` with ``k_i = +-theta_i / (2 pi)``,
    the shell is ``sum cos(theta_i) = c``.  The proposal picks an axis at
    random, draws the other two angles uniformly and solves for the third;
    relative to the target its density is off by ``sum_i sin(theta_i)``, which
    is corrected by rejection against the exact minimum of that sum.
    """
    E = np.atleast_1d(np.asarray(E, dtype=float))
    c = 3.0 - E
    smin = np.maximum(_min_sine_sum(c), floor)
    theta = np.empty(E.shape + (3,))
    pending = np.arange(E.size)
    while pending.size:
        m = pending.size
        axis = rng.integers(0, 3, size=m)
        ta = rng.uniform(0.0, np.pi, size=m)
        tb = rng.uniform(0.0, np.pi, size=m)
        cj = c[pending] - np.cos(ta) - np.cos(tb)
        ok = np.abs(cj) <= 1.0
        tj = np.arccos(np.clip(cj, -1.0, 1.0))
        s1 = np.sin(ta) + np.sin(tb) + np.sin(tj)
        u = rng.uniform(size=m)
        acc = ok & (u * s1 < smin[pending])
        idx = pending[acc]
        ax, a_, b_, j_ = axis[acc], ta[acc], tb[acc], tj[acc]
        # the solved angle goes to `axis`, the free ones fill the other two slots
        other1 = (ax + 1) % 3
        other2 = (ax + 2) % 3
        theta[idx, ax] = j_
        theta[idx, other1] = a_
        theta[idx, other2] = b_
        pending = pending[~acc]
    sign = rng.choice(np.array([-1.0, 1.0]), size=theta.shape)
    return np.mod(sign * theta / (2 * np.pi), 1.0)


def sample_shell(E, rng, size=None, efficiency_floor=1e-3):
    """Points ``U`` distributed by the co-area measure of ``{e(U) = E}``.

    Parameters
    ----------
    E : float or array
        Shell energies in ``(1e-3, 6 - 1e-3)``.  With an array, one point per
        entry is returned.
    rng : numpy.random.Generator
    size : int, optional
        Number of points for a scalar ``E``.
    efficiency_floor : float
        Smallest admissible rejection bound; shells closer to the saddle
        energies 2 and 4 are refused.
    """
    E = np.asarray(E, dtype=float)
    if E.ndim == 0 and size is not None:
        E = np.full(int(size), float(E))
    flat = np.atleast_1d(E)
    if np.any((flat <= ENERGY_MARGIN) | (flat >= 6.0 - ENERGY_MARGIN)):
        raise ShellSamplingError("shell energy too close to the band edges 0 or 6")
    if np.any(_min_sine_sum(3.0 - flat) < efficiency_floor):
        raise ShellSamplingError("rejection efficiency below floor near a critical energy")
    out = _sample_shell_raw(flat, rng)
    return out[0] if E.ndim == 0 else out


# ---------------------------------------------------------------------------
# Boltzmann particles


@dataclass
class ParticleEnsemble:
    """Weighted particles; ``X`` and ``V`` have shape ``(N, 3)``."""

    X: np.ndarray
    V: np.ndarray
    weight: np.ndarray
    T: float = 0.0

    def __post_init__(self):
        self.X = np.array(self.X, dtype=float)
        self.V = np.mod(np.array(self.V, dtype=float), 1.0)
        self.weight = np.array(self.weight, dtype=float)
        n = self.X.shape[0]
        if self.X.shape != (n, 3) or self.V.shape != (n, 3) or self.weight.shape != (n,):
            raise ValueError("ensemble arrays must have shapes (N,3), (N,3), (N,)")
        if np.any(self.weight < 0):
            raise ValueError("weights must be non-negative")

    @property
    def size(self):
        return self.X.shape[0]

    def total_weight(self):
        return float(np.sum(self.weight))

    def energies(self):
        return kinetic_energy(self.V)

    def pair(self, J):
        """``<J, F>`` as the weighted particle sum (real part for real J)."""
        vals = self.weight * J(self.X, self.V)
        return vals

    def copy(self):
        return ParticleEnsemble(self.X.copy(), self.V.copy(), self.weight.copy(), self.T)

    def to_columns(self):
        """Plain columnar text: X1 X2 X3 V1 V2 V3 weight."""
        rows = np.column_stack([self.X, self.V, self.weight])
        return "".join(" ".join(format(v, ".17g") for v in r) + "\n" for r in rows)


def initial_ensemble(spec, n_particles, rng):
    """Particles for ``F_0 = |h(X)|^2 delta(V - grad s(X) / 2 pi)``, unit total weight."""
    X = np.asarray(spec.centre) + spec.width * rng.standard_normal((n_particles, 3))
    return ParticleEnsemble(X, spec.velocity(X), np.full(n_particles, 1.0 / n_particles), 0.0)


def _evolve_chunk(X, V, E, rates, T, rng):
    X = X.copy()
    V = V.copy()
    remaining = np.full(X.shape[0], float(T))
    active = np.nonzero(rates > 0)[0] if T > 0 else np.array([], dtype=int)
    idle = np.setdiff1d(np.arange(X.shape[0]), active)
    X[idle] += T * np.sin(2 * np.pi * V[idle])
    while active.size:
        tau = rng.exponential(size=active.size) / rates[active]
        rem = remaining[active]
        collide = tau < rem
        step = np.where(collide, tau, rem)
        X[active] += step[:, None] * np.sin(2 * np.pi * V[active])
        remaining[active] = np.where(collide, rem - tau, 0.0)
        active = active[collide]
        if active.size:
            V[active] = _sample_shell_raw(E[active], rng)
    return X, V


def boltzmann_evolve(ens, T, rng, rate_scale=1.0, chunk=1 << 16, mapper=map):
    """Kinetic Monte Carlo for the linear Boltzmann equation over time ``T``.

    Free flight at ``sin(2 pi V)``, exponential waiting times at rate
    ``rate_scale * sigma(V)``, elastic resampling on the particle's original
    energy shell.  Weights are untouched.

    ``rng`` is a Generator (used serially) or an integer seed, in which case
    chunks of particles get independent streams keyed by (seed, chunk).
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    E = ens.energies()
    rates = rate_scale * 2 * np.pi * measure_shell(E) if rate_scale else np.zeros(ens.size)
    if rate_scale and np.any(_min_sine_sum(3.0 - E) < 1e-9):
        raise ShellSamplingError("particles sit on a critical energy shell")
    if isinstance(rng, np.random.Generator):
        X, V = _evolve_chunk(ens.X, ens.V, E, rates, T, rng)
    else:
        seed = int(rng)
        starts = list(range(0, ens.size, chunk))

        def task(i):
            s = slice(starts[i], starts[i] + chunk)
            g = np.random.default_rng(derive_seed(seed, "boltzmann", i))
            return _evolve_chunk(ens.X[s], ens.V[s], E[s], rates[s], T, g)

        parts = list(mapper(task, range(len(starts))))
        X = np.concatenate([p[0] for p in parts]) if parts else ens.X.copy()
        V = np.concatenate([p[1] for p in parts]) if parts else ens.V.copy()
    return ParticleEnsemble(X, V, ens.weight.copy(), ens.T + T)


def series_two_terms(spec, J, T, n_samples, rng):
    """First two collision-history terms of ``<J, F_T>`` with damping
    ``exp(-T sigma)``.

    Returns ``(value, stderr, remainder_bound)``: the remainder bound is
    ``sup|J| * P(two or more collisions)``, maximized over the sampled
    initial energies.
    """
    X0 = np.asarray(spec.centre) + spec.width * rng.standard_normal((n_samples, 3))
    v0 = spec.velocity(X0)
    E = kinetic_energy(v0)
    sig = 2 * np.pi * measure_shell(E)
    damp = np.exp(-T * sig)
    term0 = damp * np.real(J(X0 + T * np.sin(2 * np.pi * v0), v0))
    tau1 = rng.uniform(0.0, T, size=n_samples)
    U = _sample_shell_raw(E, rng)
    Xf = X0 + tau1[:, None] * np.sin(2 * np.pi * v0) + (T - tau1)[:, None] * np.sin(2 * np.pi * U)
    term1 = damp * sig * T * np.real(J(Xf, U))
    vals = term0 + term1
    sup_j = sum(abs(a) for _, a in J.terms)
    x = sig * T
    rem = sup_j * np.max(1.0 - np.exp(-x) * (1.0 + x))
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n_samples)), float(rem)


# ---------------------------------------------------------------------------
# weak-coupling convergence


@dataclass(frozen=True)
class ConvergenceRow:
    lam: float
    eta: float
    t: float
    test_index: int
    lattice_mean: float
    lattice_stderr: float
    boltzmann_mean: float
    boltzmann_stderr: float

    @property
    def discrepancy(self):
        return abs(self.lattice_mean - self.boltzmann_mean)

    @property
    def stderr(self):
        return math.hypot(self.lattice_stderr, self.boltzmann_stderr)


def lattice_pairings(spec, dist, lam, T, tests, box, n_samples, seed, cfg=None, mapper=map):
    """Per-realization ``<J, W^(eta)_T>`` for each test function; shape ``(n_samples, len(tests))``."""
    eta = spec.eta
    psi0 = wkb_state(spec, box)
    t = T / eta

    def task(i):
        omega = sample_field(dist, box, derive_seed(seed, "convergence", lam, i))
        psi = evolve(psi0, omega, lam, t, cfg) if lam else free_propagate(psi0, t)
        return [wigner_pair(psi, J, eta) for J in tests]

    return np.array(list(mapper(task, range(n_samples))), dtype=float)


def convergence_experiment(spec_for, dist, lams, T, tests, samples, seed, box_side=128,
                           n_particles=200000, cfg=None, mapper=map):
    """``D(lam) = |<J, E W^(eta)_T> - <J, F_T>|`` with ``eta = lam^2``.

    ``spec_for(eta)`` returns the SemiclassicalSpec at scale ``eta`` (the
    macroscopic data ``h``, ``s`` are fixed, only ``eta`` changes).
    Returns a list of :class:`ConvergenceRow`, one per (lam, test).
    """
    cfg = cfg or PropagatorConfig(tolerance=1e-10)
    box = BoxSpec(3, box_side)
    rows = []
    spec0 = spec_for(1.0)
    ens = initial_ensemble(spec0, n_particles, np.random.default_rng(derive_seed(seed, "f0")))
    final = boltzmann_evolve(ens, T, derive_seed(seed, "kmc"), mapper=mapper)
    kin = [np.real(final.pair(J)) * final.size for J in tests]
    for lam in lams:
        eta = lam * lam
        spec = spec_for(eta)
        vals = lattice_pairings(spec, dist, lam, T, tests, box, samples, seed, cfg, mapper)
        for j in range(len(tests)):
            rows.append(ConvergenceRow(
                lam, eta, T / eta, j,
                float(np.mean(vals[:, j])), float(np.std(vals[:, j], ddof=1) / math.sqrt(samples)),
                float(np.mean(kin[j])), float(np.std(kin[j], ddof=1) / math.sqrt(final.size))))
    return rows
