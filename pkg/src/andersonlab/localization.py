"""Fejer-window shell observables and the two desk-scale localization
experiments: shell mass of the evolved point source, and the eigenfunction
fraction inequality chain on a Dirichlet box."""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.signal import fftconvolve

from .disorder import sample_field, derive_seed
from .lattice import BoxSpec, DIRICHLET, delta, free_propagate
from .propagate import (PropagatorConfig, chebyshev_coefficients, dense_eigensystem,
                        evolve_array, spectral_interval)


class BoxTooSmall(ValueError):
    """The periodic box cannot hold the shell without wrap-around."""


def window(ell, m):
    """Triangular window ``h_ell(m)`` for integer ``m >= 0`` (vectorized).

    Flat at 1 up to ``floor(ell)/2``, linear down to 0 at ``floor(ell)``.
    For ``floor(ell) == 0`` the window is the indicator of ``m == 0``.
    """
    m = np.abs(np.asarray(m, dtype=float))
    L = math.floor(ell)
    if L <= 0:
        return (m == 0).astype(float)
    return np.where(m <= L / 2, 1.0, np.where(m <= L, 2.0 - 2.0 * m / L, 0.0))


def window_product(ell, disp):
    """``K_ell`` on a list of per-axis displacement arrays."""
    out = 1.0
    for d in disp:
        out = out * window(ell, d)
    return out


@dataclass(frozen=True)
class ShellCutoff:
    """``R(y) = K_ell(x - y) - K_{delta ell}(x - y)`` around centre ``x``."""

    center: tuple
    delta: float
    ell: float

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.ell < 1:
            raise ValueError("ell must be at least 1")
        object.__setattr__(self, "center", tuple(int(c) for c in np.atleast_1d(self.center)))

    @property
    def reach(self):
        """Largest ``|y_j - x_j|`` with nonzero weight is below this."""
        return math.floor(self.ell)

    def profile(self, disp):
        return window_product(self.ell, disp) - window_product(self.delta * self.ell, disp)

    def kernel(self):
        """``R`` on the cube of offsets ``[-reach, reach]^dim``."""
        r = self.reach
        o = np.arange(-r, r + 1)
        disp = np.meshgrid(*([o] * len(self.center)), indexing="ij")
        return self.profile(disp)

    def on_box(self, box):
        """``R`` sampled at every site (minimal image on periodic boxes)."""
        return self.profile(box.displacement(self.center))


def shell_weight(cut, y, box=None):
    """``R_{x,delta,ell}(y)`` for a single site ``y``."""
    y = np.atleast_1d(np.asarray(y, dtype=int))
    d = y - np.asarray(cut.center)
    if box is not None and box.periodic:
        d = (d + (box.n - 1) // 2) % box.n - (box.n - 1) // 2
    return float(cut.profile([np.array(v) for v in d]))


def shell_mass(psi, cut):
    """``sum_y R(y)^2 |psi(y)|^2``."""
    R = cut.on_box(psi.box)
    return float(np.sum(R ** 2 * np.abs(psi.amplitudes) ** 2))


def default_ell(lam):
    return math.floor(lam ** -2)


def default_time(delta_, lam):
    return delta_ ** (6.0 / 7.0) * lam ** -2


def check_shell_fits(box, ell):
    if not box.periodic:
        raise ValueError("shell experiments run on periodic boxes")
    if box.side < 4 * math.floor(ell):
        raise BoxTooSmall(f"box side {box.side} is below 4*floor(ell) = {4 * math.floor(ell)}")


@dataclass
class ObservableReport:
    lam: float
    delta: float
    t: float
    ell: float
    side: int
    samples: np.ndarray
    differences: np.ndarray
    baseline: float
    seeds: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.samples))

    @property
    def stderr(self):
        n = len(self.samples)
        return float(np.std(self.samples, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")

    @property
    def gap(self):
        """Free baseline minus disordered mean."""
        return self.baseline - self.mean

    def summary(self):
        return {"lambda": self.lam, "delta": self.delta, "time_t": self.t, "ell": self.ell,
                "side": self.side, "n_samples": len(self.samples), "mean": self.mean,
                "stderr": self.stderr, "baseline": self.baseline, "gap": self.gap,
                "difference_mean": float(np.mean(self.differences))}


def evolve_point_source(values, box, lam, t, cfg=None):
    """``exp(-itH) delta_0`` on a periodic box, computed inside the light cone.

    A degree-K Chebyshev polynomial of ``H`` moves ``delta_0`` at most K sites,
    so the evolution is run on the sub-cube of half-width K+1 around the
    origin with the same coefficients.  The result is the full-box result.
    """
    cfg = cfg or PropagatorConfig()
    pot = lam * np.asarray(values, dtype=float)
    wmax = float(np.max(np.abs(pot)))
    _, half = spectral_interval(box.dim, 1.0, wmax, cfg.spectral_margin)
    K = len(chebyshev_coefficients(half * t, cfg.tolerance, cfg.max_order)) - 1
    r = K + 1
    if 2 * r + 1 >= box.n:
        out, _ = evolve_array(delta(box).amplitudes, box, pot, t, cfg, max_abs_potential=wmax)
        return out
    sub = BoxSpec(box.dim, r, DIRICHLET)
    idx = np.ix_(*([np.arange(-r, r + 1) % box.n] * box.dim))
    psi = delta(sub).amplitudes
    local, _ = evolve_array(psi, sub, pot[idx], t, cfg, max_abs_potential=wmax)
    out = np.zeros(box.shape, dtype=complex)
    out[idx] = local
    return out


def localization_observable(dist, lam, delta_, t, box, n_samples, seed, ell=None,
                            cfg=None, mapper=map):
    """Ensemble of ``||R exp(-itH) delta_0||^2`` with the free baseline.

    Also records ``||R (exp(-itH) - exp(-itH0)) delta_0||^2`` per sample.
    ``mapper`` lets the caller supply a parallel ordered map.
    """
    ell = default_ell(lam) if ell is None else ell
    check_shell_fits(box, ell)
    cut = ShellCutoff(np.zeros(box.dim, dtype=int), delta_, ell)
    R = cut.on_box(box)
    psi0 = delta(box)
    free = free_propagate(psi0, t).amplitudes
    baseline = float(np.sum(R ** 2 * np.abs(free) ** 2))
    seeds = [derive_seed(seed, i) for i in range(n_samples)]

    def one(s):
        omega = sample_field(dist, box, s)
        out = evolve_point_source(omega.values, box, lam, t, cfg)
        return (float(np.sum(R ** 2 * np.abs(out) ** 2)),
                float(np.sum(R ** 2 * np.abs(out - free) ** 2)))

    rows = list(mapper(one, seeds))
    return ObservableReport(lam, delta_, t, ell, box.side,
                            np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
                            baseline, seeds)


@dataclass
class FractionReport:
    """One realization of the eigenfunction-fraction experiment."""

    L: int
    delta: float
    eps: float
    ell: float
    lam: float
    t: float
    seed: int
    n_states: int
    membership: np.ndarray = field(repr=False)
    localized_fraction: float = 0.0
    complement_fraction: float = 0.0
    shell_average_inner: float = 0.0
    n_inner: int = 0
    boundary_fraction: float = 0.0
    eta: float = 0.0
    sup_R: float = 0.0
    shell_average_all: float = float("nan")

    @property
    def chain_rhs(self):
        """Right side of the lower bound on the complement fraction."""
        eta = self.eta
        return (self.shell_average_inner / (1 + eta)
                - (1 + 1 / eta) / (1 + eta) * self.eps
                - self.boundary_fraction)

    @property
    def chain_holds(self):
        return self.complement_fraction >= self.chain_rhs

    @property
    def boundary_constant(self):
        """``c`` in the correction ``c * ell / L``."""
        return self.boundary_fraction * self.L / self.ell

    def summary(self):
        return {"L": self.L, "delta": self.delta, "eps": self.eps, "ell": self.ell,
                "lambda": self.lam, "time_t": self.t, "seed": self.seed,
                "n_states": self.n_states, "localized_fraction": self.localized_fraction,
                "complement_fraction": self.complement_fraction,
                "shell_average_inner": self.shell_average_inner, "n_inner": self.n_inner,
                "shell_average_all": self.shell_average_all,
                "boundary_fraction": self.boundary_fraction,
                "boundary_constant": self.boundary_constant, "eta": self.eta,
                "sup_R": self.sup_R, "chain_rhs": self.chain_rhs,
                "chain_holds": bool(self.chain_holds)}


def membership_sums(U, box, cut, chunk=256):
    """``sum_x |psi(x)| ||R_x psi||`` for every column ``psi`` of ``U``."""
    K2 = cut.kernel() ** 2
    axes = tuple(range(1, box.dim + 1))
    out = np.empty(U.shape[1])
    for start in range(0, U.shape[1], chunk):
        block = U[:, start:start + chunk].T.reshape((-1,) + box.shape)
        P = block ** 2
        conv = fftconvolve(P, K2[None], mode="same", axes=axes)
        conv = np.sqrt(np.clip(conv, 0.0, None))
        out[start:start + chunk] = np.sum(np.abs(block) * conv, axis=axes)
    return out


def inner_sites(box, ell):
    """Sites farther than ``2 ell`` from the outer boundary layer."""
    c = np.abs(np.stack(box.coords()))
    dist = box.side + 1 - c.max(axis=0)
    return dist > 2 * ell


def _shell_masses(W2, box, cut, columns):
    """``sum_y R(x - y)^2 |W(y, x)|^2`` for the listed site indices ``x``."""
    r = cut.reach
    K2 = cut.kernel() ** 2
    coords = np.stack(np.unravel_index(columns, box.shape), axis=1)
    acc = np.zeros(len(columns))
    for off in np.argwhere(K2 > 0):
        o = off - r
        y = coords + o
        ok = np.all((y >= 0) & (y < box.n), axis=1)
        rows = np.ravel_multi_index(y[ok].T, box.shape)
        acc[ok] += K2[tuple(off)] * W2[rows, np.nonzero(ok)[0]]
    return acc


def eigen_fraction_experiment(dist, lam, delta_, ell, eps, L, seed, t=None, dim=3,
                              all_sites=False):
    """Classify eigenvectors of ``H`` on a Dirichlet box by their shell sum.

    The localized set holds the eigenvectors with
    ``sum_x |psi(x)| ||R_x psi|| < eps``.  Both the localized fraction and its
    complement are reported, together with every term of the inequality
    chain ``complement >= avg/(1+eta) - (1+1/eta)/(1+eta) eps - |S|/|Lambda|``
    with ``eta = sqrt(eps)``, where ``avg`` is the mean shell mass of
    ``exp(-itH) delta_x`` over inner sites and ``S`` the boundary layer.
    """
    box = BoxSpec(dim, L, DIRICHLET)
    t = default_time(delta_, lam) if t is None else t
    omega = sample_field(dist, box, seed)
    es = dense_eigensystem(omega, lam)
    cut = ShellCutoff(np.zeros(dim, dtype=int), delta_, ell)
    U = es.eigenvectors
    sums = membership_sums(U, box, cut)
    in_set = sums < eps
    N = box.n_sites
    inner = inner_sites(box, ell).ravel()
    cols = np.nonzero(inner)[0]
    if cols.size == 0:
        raise ValueError("no inner sites: increase L or decrease ell")
    phase = np.exp(-1j * t * es.eigenvalues)
    W = (U * phase) @ U[cols].T
    shell_inner = _shell_masses(np.abs(W) ** 2, box, cut, cols)
    avg_all = float("nan")
    if all_sites:
        Wall = (U * phase) @ U.T
        avg_all = float(np.mean(_shell_masses(np.abs(Wall) ** 2, box, cut, np.arange(N))))
    kern = cut.kernel()
    return FractionReport(
        L=L, delta=delta_, eps=eps, ell=ell, lam=lam, t=t, seed=int(seed), n_states=N,
        membership=sums, localized_fraction=float(np.mean(in_set)),
        complement_fraction=float(1.0 - np.mean(in_set)),
        shell_average_inner=float(np.mean(shell_inner)), n_inner=int(cols.size),
        boundary_fraction=float(1.0 - cols.size / N), eta=math.sqrt(eps),
        sup_R=float(kern.max()), shell_average_all=avg_all)
