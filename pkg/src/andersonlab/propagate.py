"""Interacting evolution ``exp(-i t H)`` by Chebyshev expansion, and a dense
eigensolver for small boxes."""
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.special import jv

from .lattice import WaveFunction, hamiltonian_array, _field_values

MAX_DENSE_SITES = 6000


class OrderBudgetExceeded(RuntimeError):
    pass


class BoxTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class PropagatorConfig:
    """Chebyshev settings.

    ``tolerance`` bounds the uniform polynomial approximation error of
    ``exp(-i t x)`` on the padded spectral interval.
    """

    tolerance: float = 1e-12
    max_order: int = 20000
    spectral_margin: float = 0.05

    def __post_init__(self):
        if not 0 < self.tolerance <= 1e-6:
            raise ValueError("tolerance must lie in (0, 1e-6]")
        if self.max_order < 1:
            raise ValueError("max_order must be positive")
        if self.spectral_margin < 0:
            raise ValueError("spectral_margin must be non-negative")


def spectral_interval(dim, lam, max_abs_omega, margin):
    """Centre and half-width of ``[-lam w, 2 dim + lam w]`` widened by ``margin``."""
    w = abs(lam) * max_abs_omega
    lo, hi = -w, 2.0 * dim + w
    centre = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * (1.0 + margin)
    return centre, half


def chebyshev_coefficients(tau, tol, max_order):
    """Bessel coefficients ``J_k(tau)`` up to the order where the tail
    ``2 sum_{k>K} |J_k(tau)|`` drops below ``tol``."""
    tau = float(tau)
    # |J_k(x)| decays super-exponentially once k > |x|; look a little past that
    n = int(abs(tau) + 10 * np.cbrt(abs(tau) + 1) + 60)
    while True:
        k = np.arange(n + 1)
        c = jv(k, tau)
        tail = 2.0 * np.cumsum(np.abs(c[::-1]))[::-1]  # tail[j] = 2 sum_{k>=j}|J_k|
        ok = np.nonzero(tail <= tol)[0]
        if ok.size:
            order = max(int(ok[0]) - 1, 0)
            if order > max_order:
                raise OrderBudgetExceeded(
                    f"Chebyshev order {order} exceeds max_order={max_order} (|t|*width={abs(tau):.3g})")
            return c[:order + 1]
        if n > max_order + 100:
            raise OrderBudgetExceeded(f"Chebyshev order exceeds max_order={max_order}")
        n *= 2


def evolve_array(psi, box, potential, t, cfg=None, max_abs_potential=None):
    """``exp(-i t (H0 + potential))`` applied to an array (leading axes batch).

    Returns ``(result, order)``.
    """
    cfg = cfg or PropagatorConfig()
    psi = np.asarray(psi, dtype=complex)
    if t == 0:
        return psi.copy(), 0
    if max_abs_potential is None:
        max_abs_potential = 0.0 if potential is None else float(np.max(np.abs(potential)))
    centre, half = spectral_interval(box.dim, 1.0, max_abs_potential, cfg.spectral_margin)
    coef = chebyshev_coefficients(half * t, cfg.tolerance, cfg.max_order)
    shifted = None if potential is None else potential - centre
    if shifted is None:
        shifted = -centre

    def apply(v):
        return hamiltonian_array(v, box, shifted) / half

    t0 = psi
    acc = coef[0] * t0
    if len(coef) > 1:
        t1 = apply(t0)
        acc = acc + 2.0 * (-1j) * coef[1] * t1
        phase = (-1j) ** 2
        for k in range(2, len(coef)):
            t0, t1 = t1, 2.0 * apply(t1) - t0
            acc = acc + 2.0 * phase * coef[k] * t1
            phase *= -1j
    return np.exp(-1j * t * centre) * acc, len(coef) - 1


def evolve(psi, omega, lam, t, cfg=None):
    """``exp(-i t H) psi`` for ``H = H0 + lam * omega`` on a periodic box."""
    if not psi.box.periodic:
        raise ValueError("Chebyshev evolution is periodic-only; use dense_eigensystem")
    values = _field_values(omega, psi.box)
    pot = None if values is None else lam * values
    out, _ = evolve_array(psi.amplitudes, psi.box, pot, t, cfg)
    return WaveFunction(psi.box, out)


def energy(psi, omega, lam):
    """``<psi, H psi>`` (real up to round-off)."""
    values = _field_values(omega, psi.box)
    pot = None if values is None else lam * values
    return np.vdot(psi.amplitudes, hamiltonian_array(psi.amplitudes, psi.box, pot)).real


def hamiltonian_matrix(box, potential=None):
    """Sparse ``H0 + diag(potential)`` in row-major site order."""
    n = box.n_sites
    idx = np.arange(n).reshape(box.shape)
    rows, cols = [], []
    for axis in range(box.dim):
        if box.periodic:
            nb = np.roll(idx, -1, axis=axis)
            rows.append(idx.ravel())
            cols.append(nb.ravel())
        else:
            lo = [slice(None)] * box.dim
            hi = [slice(None)] * box.dim
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            rows.append(idx[tuple(lo)].ravel())
            cols.append(idx[tuple(hi)].ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    hop = scipy.sparse.coo_matrix((np.full(r.size, -0.5), (r, c)), shape=(n, n))
    diag = np.full(n, float(box.dim))
    if potential is not None:
        diag = diag + np.asarray(potential, dtype=float).ravel()
    # duplicates (periodic side 1 or 2) are summed by the conversion
    return (hop + hop.T + scipy.sparse.diags(diag)).tocsr()


@dataclass(frozen=True)
class EigenSystem:
    """Full spectral decomposition: ``H = U diag(e) U^T`` with real ``U``."""

    box: object
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def vector(self, alpha):
        return self.eigenvectors[:, alpha].reshape(self.box.shape)

    def propagator(self, t):
        """Dense ``exp(-i t H)`` as an ``(N, N)`` matrix."""
        U = self.eigenvectors
        return (U * np.exp(-1j * t * self.eigenvalues)) @ U.T

    def evolve(self, psi, t):
        U = self.eigenvectors
        coeff = U.T @ np.asarray(psi.amplitudes).ravel()
        out = U @ (np.exp(-1j * t * self.eigenvalues) * coeff)
        return WaveFunction(self.box, out.reshape(self.box.shape))


def dense_eigensystem(omega, lam, box=None):
    """Diagonalize ``H0 + lam * omega`` on its box.

    Dirichlet boxes are the intended use; periodic boxes are accepted so the
    same routine can serve as an oracle for the Chebyshev path.
    """
    box = getattr(omega, "box", box)
    if box is None:
        raise ValueError("a box is required when omega is None")
    if box.n_sites > MAX_DENSE_SITES:
        raise BoxTooLarge(f"{box.n_sites} sites exceed the dense limit {MAX_DENSE_SITES}")
    values = _field_values(omega, box)
    pot = None if values is None else lam * values
    H = hamiltonian_matrix(box, pot).toarray()
    try:
        e, U = scipy.linalg.eigh(H, driver="evd")
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
    return EigenSystem(box, e, U)
