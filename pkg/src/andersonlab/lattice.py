"""Finite lattice boxes, wavefunctions, the kinetic symbol and free dynamics.

Conventions
-----------
Sites of a periodic box of side ``M`` are ``x in Z_M^dim`` (array index equals
coordinate).  Sites of a Dirichlet box of half-width ``L`` are
``x in [-L, L]^dim`` (array index is ``x + L``) and the wavefunction vanishes
outside.  The Fourier transform is ``f^(k) = sum_x exp(-2 pi i k.x) f(x)`` on
the dual grid ``k in {0, 1/M, ..., (M-1)/M}^dim``, i.e. ``numpy.fft.fftn``.

The free Hamiltonian is the operator with symbol
``e(k) = 2 sum_i sin^2(pi k_i)``, which on sites reads
``(H0 psi)(x) = dim * psi(x) - 1/2 sum_{|y-x|=1} psi(y)``.
"""
from dataclasses import dataclass, field
import json
import struct
import sys

import numpy as np

from ._io import atomic_write_bytes

PERIODIC = "periodic"
DIRICHLET = "dirichlet"


class BoxMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BoxSpec:
    """Finite lattice geometry.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1, 2 or 3.
    side : int
        Side ``M`` for periodic boxes, half-width ``L`` for Dirichlet boxes.
    boundary : str
        ``"periodic"`` or ``"dirichlet"``.
    """

    dim: int
    side: int
    boundary: str = PERIODIC

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.boundary not in (PERIODIC, DIRICHLET):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.boundary == PERIODIC and self.side < 1:
            raise ValueError("periodic side must be positive")
        if self.boundary == DIRICHLET and self.side < 0:
            raise ValueError("Dirichlet half-width must be non-negative")

    @property
    def periodic(self):
        return self.boundary == PERIODIC

    @property
    def n(self):
        """Number of sites per axis."""
        return self.side if self.periodic else 2 * self.side + 1

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def n_sites(self):
        return self.n ** self.dim

    def axis_coords(self):
        """Integer coordinates along one axis, in array order."""
        if self.periodic:
            return np.arange(self.n)
        return np.arange(-self.side, self.side + 1)

    def coords(self):
        """Coordinate arrays, one per axis, broadcast to ``shape``."""
        c = self.axis_coords()
        return np.meshgrid(*([c] * self.dim), indexing="ij")

    def index(self, x):
        """Array index tuple of site ``x``."""
        x = np.atleast_1d(np.asarray(x, dtype=int))
        if x.shape != (self.dim,):
            raise ValueError(f"site must have {self.dim} coordinates")
        if self.periodic:
            return tuple(int(v) % self.n for v in x)
        if np.any(np.abs(x) > self.side):
            raise ValueError(f"site {tuple(x)} outside the box")
        return tuple(int(v) + self.side for v in x)

    def dual_axis(self):
        if not self.periodic:
            raise ValueError("dual grid is defined for periodic boxes only")
        return np.arange(self.n) / self.n

    def dual_grid(self):
        """Momentum arrays ``k_i = j_i / M``, one per axis."""
        k = self.dual_axis()
        return np.meshgrid(*([k] * self.dim), indexing="ij")

    def displacement(self, x):
        """Per-axis displacements ``y - x`` for every site ``y``.

        Periodic boxes use the minimal image, so components lie in
        ``(-M/2, M/2]``.
        """
        idx = self.index(x)
        out = []
        for axis, c in enumerate(self.coords()):
            d = c - (idx[axis] if self.periodic else idx[axis] - self.side)
            if self.periodic:
                d = (d + (self.n - 1) // 2) % self.n - (self.n - 1) // 2
            out.append(d)
        return out


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitudes on the sites of a box.  The array is read-only."""

    box: BoxSpec
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.amplitudes, dtype=complex)
        if a.shape != self.box.shape:
            raise ValueError(f"amplitudes have shape {a.shape}, box wants {self.box.shape}")
        a.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)

    def norm_sq(self):
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def norm(self):
        return float(np.sqrt(self.norm_sq()))

    def fourier(self):
        """``psi^(k)`` on the dual grid (periodic boxes only)."""
        _require_periodic(self.box)
        return np.fft.fftn(self.amplitudes)

    @classmethod
    def from_fourier(cls, box, psi_hat):
        _require_periodic(box)
        return cls(box, np.fft.ifftn(psi_hat))

    def inner(self, other):
        """``<self, other>``, antilinear in the first slot."""
        if other.box != self.box:
            raise BoxMismatch("inner product of wavefunctions on different boxes")
        return complex(np.vdot(self.amplitudes, other.amplitudes))


def delta(box, x=None):
    """Unit vector at site ``x`` (the origin by default)."""
    x = np.zeros(box.dim, dtype=int) if x is None else x
    a = np.zeros(box.shape, dtype=complex)
    a[box.index(x)] = 1.0
    return WaveFunction(box, a)


def plane_wave(box, k):
    """``exp(2 pi i k.x)`` on a periodic box, unnormalized."""
    _require_periodic(box)
    phase = sum(2 * np.pi * ki * c for ki, c in zip(k, box.coords()))
    return WaveFunction(box, np.exp(1j * phase))


def kinetic_energy(k):
    """Kinetic symbol ``e(k) = 2 sum_i sin^2(pi k_i)``.

    ``k`` may be a single point (last axis holds components) or a list of
    per-axis arrays as returned by :meth:`BoxSpec.dual_grid`.
    """
    if isinstance(k, (list, tuple)) and len(k) and np.ndim(k[0]) > 0:
        return sum(2.0 * np.sin(np.pi * np.asarray(ki)) ** 2 for ki in k)
    k = np.asarray(k, dtype=float)
    return 2.0 * np.sum(np.sin(np.pi * k) ** 2, axis=-1)


def kinetic_grid(box):
    """``e(k)`` on the dual grid of a periodic box, shape ``box.shape``."""
    return kinetic_energy(box.dual_grid())


def _require_periodic(box):
    if not box.periodic:
        raise ValueError("this operation needs a periodic box")


def _field_values(omega, box):
    if omega is None:
        return None
    values = getattr(omega, "values", omega)
    field_box = getattr(omega, "box", None)
    if field_box is not None and field_box != box:
        raise BoxMismatch("disorder field and wavefunction live on different boxes")
    values = np.asarray(values, dtype=float)
    if values.shape != box.shape:
        raise BoxMismatch(f"field shape {values.shape} does not match box {box.shape}")
    return values


def hamiltonian_array(psi, box, potential=None):
    """Apply ``H0 + potential`` to an array whose trailing axes are the box.

    Leading axes are treated as a batch.  ``potential`` is the already scaled
    site potential ``lambda * omega`` or None.
    """
    psi = np.asarray(psi)
    nb = psi.ndim - box.dim
    out = box.dim * psi
    for axis in range(nb, psi.ndim):
        def sl(a, b):
            s = [slice(None)] * psi.ndim
            s[axis] = slice(a, b)
            return tuple(s)
        out[sl(1, None)] -= 0.5 * psi[sl(0, -1)]
        out[sl(0, -1)] -= 0.5 * psi[sl(1, None)]
        if box.periodic:
            out[sl(0, 1)] -= 0.5 * psi[sl(-1, None)]
            out[sl(-1, None)] -= 0.5 * psi[sl(0, 1)]
    if potential is not None:
        out += potential * psi
    return out


def apply_hamiltonian(psi, omega, lam):
    """Return ``(H0 + lam * omega) psi``.

    Parameters
    ----------
    psi : WaveFunction
    omega : DisorderField, array or None
        Site disorder on the same box.  None means no potential.
    lam : float
        Coupling constant.
    """
    values = _field_values(omega, psi.box)
    pot = None if values is None else lam * values
    return WaveFunction(psi.box, hamiltonian_array(psi.amplitudes, psi.box, pot))


def free_propagate(psi, t):
    """``exp(-i t H0) psi`` by pointwise multiplication in Fourier space."""
    _require_periodic(psi.box)
    phase = np.exp(-1j * t * kinetic_grid(psi.box))
    return WaveFunction(psi.box, np.fft.ifftn(np.fft.fftn(psi.amplitudes) * phase))


def free_propagator_1d(M, t):
    """Amplitude ``<delta_x, exp(-i t h0) delta_0>`` on a periodic 1D ring.

    The 3D free propagator factorizes into a product of these.
    """
    k = np.arange(M) / M
    return np.fft.ifft(np.exp(-2j * t * np.sin(np.pi * k) ** 2))


# ---------------------------------------------------------------------------
# binary container

MAGIC = b"ANDL"
FORMAT_VERSION = 1
KIND_WAVEFUNCTION = 0
KIND_FIELD = 1
_HEADER = "4sHBBIBcQI"  # magic, version, kind, dim, side, boundary, endian, seed, meta length


def write_container(path, box, data, kind=KIND_WAVEFUNCTION, seed=0, meta=None,
                    byteorder=None):
    """Serialize a wavefunction or real field.

    Layout: fixed header, a UTF-8 JSON metadata blob, then row-major float64
    data (real/imag interleaved for wavefunctions) in the tagged byte order.
    """
    byteorder = byteorder or sys.byteorder
    tag = b"<" if byteorder == "little" else b">"
    data = np.asarray(data)
    if data.shape != box.shape:
        raise ValueError("data does not match the box")
    if kind == KIND_WAVEFUNCTION:
        flat = np.empty(data.size * 2)
        c = data.astype(complex).ravel()
        flat[0::2] = c.real
        flat[1::2] = c.imag
    elif kind == KIND_FIELD:
        flat = data.astype(float).ravel()
    else:
        raise ValueError(f"unknown container kind {kind}")
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    header = struct.pack(tag.decode() + _HEADER, MAGIC, FORMAT_VERSION, kind, box.dim,
                         box.side, 0 if box.periodic else 1, tag,
                         int(seed) & 0xFFFFFFFFFFFFFFFF, len(blob))
    payload = flat.astype(tag.decode() + "f8").tobytes()
    atomic_write_bytes(path, header + blob + payload)


def read_container(path):
    """Inverse of :func:`write_container`.

    Returns a dict with keys ``box``, ``kind``, ``seed``, ``meta``, ``data``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an andersonlab container")
    tag = raw[4 + 2 + 1 + 1 + 4 + 1:4 + 2 + 1 + 1 + 4 + 1 + 1]
    if tag not in (b"<", b">"):
        raise ValueError(f"{path}: bad endianness tag")
    fmt = tag.decode() + _HEADER
    size = struct.calcsize(fmt)
    magic, version, kind, dim, side, bflag, _, seed, nmeta = struct.unpack(fmt, raw[:size])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    box = BoxSpec(dim, side, PERIODIC if bflag == 0 else DIRICHLET)
    meta = json.loads(raw[size:size + nmeta].decode("utf-8"))
    flat = np.frombuffer(raw[size + nmeta:], dtype=tag.decode() + "f8").astype(float)
    if kind == KIND_WAVEFUNCTION:
        data = (flat[0::2] + 1j * flat[1::2]).reshape(box.shape)
    else:
        data = flat.reshape(box.shape)
    return {"box": box, "kind": kind, "seed": seed, "meta": meta, "data": data}
