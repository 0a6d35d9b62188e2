import numpy as np
import pytest
import scipy.integrate

from andersonlab.lattice import (BoxMismatch, BoxSpec, WaveFunction, apply_hamiltonian, delta,
                                 free_propagate, free_propagator_1d, kinetic_energy,
                                 kinetic_grid, plane_wave, read_container, write_container,
                                 KIND_FIELD)


def random_wave(box, rng):
    return WaveFunction(box, rng.standard_normal(box.shape) + 1j * rng.standard_normal(box.shape))


@pytest.mark.parametrize("k, e", [((0, 0, 0), 0.0), ((0.5, 0.5, 0.5), 6.0), ((0.25, 0, 0), 1.0)])
def test_kinetic_energy_examples(k, e):
    assert kinetic_energy(k) == pytest.approx(e, abs=1e-15)


def test_box_sizes_and_dual_grid():
    p = BoxSpec(3, 4)
    d = BoxSpec(2, 3, "dirichlet")
    assert p.n_sites == 64 and d.n_sites == 49
    assert np.allclose(p.dual_axis(), [0, 0.25, 0.5, 0.75])
    with pytest.raises(ValueError):
        d.dual_axis()
    with pytest.raises(ValueError):
        BoxSpec(4, 2)


def test_fourier_round_trip():
    box = BoxSpec(3, 8)
    psi = random_wave(box, np.random.default_rng(0))
    back = WaveFunction.from_fourier(box, psi.fourier())
    assert np.max(np.abs(back.amplitudes - psi.amplitudes)) <= 1e-12 * np.max(np.abs(psi.amplitudes))


def test_plane_wave_is_eigenvector():
    box = BoxSpec(3, 6)
    k = (1 / 6, 2 / 6, 5 / 6)
    psi = plane_wave(box, k)
    out = apply_hamiltonian(psi, None, 0.0)
    assert np.allclose(out.amplitudes, kinetic_energy(k) * psi.amplitudes, atol=1e-12)


def test_constant_potential_adds_shift():
    box = BoxSpec(2, 5)
    rng = np.random.default_rng(1)
    psi = random_wave(box, rng)
    c = 0.37
    a = apply_hamiltonian(psi, np.full(box.shape, c), 1.0).amplitudes
    b = apply_hamiltonian(psi, None, 0.0).amplitudes + c * psi.amplitudes
    assert np.allclose(a, b, atol=1e-13)


def test_hamiltonian_self_adjoint():
    rng = np.random.default_rng(2)
    for box in (BoxSpec(3, 4), BoxSpec(2, 3, "dirichlet"), BoxSpec(1, 7)):
        for _ in range(100 // 3 + 1):
            psi = random_wave(box, rng)
            omega = rng.uniform(-1, 1, box.shape)
            val = psi.inner(apply_hamiltonian(psi, omega, 0.8))
            assert abs(val.imag) <= 1e-12 * abs(val)


def test_fourier_diagonalization_random():
    box = BoxSpec(3, 6)
    psi = random_wave(box, np.random.default_rng(3))
    direct = apply_hamiltonian(psi, None, 0.0).amplitudes
    spectral = np.fft.ifftn(kinetic_grid(box) * np.fft.fftn(psi.amplitudes))
    assert np.max(np.abs(direct - spectral)) <= 1e-12


def test_dirichlet_neighbours_are_zeroed():
    box = BoxSpec(1, 2, "dirichlet")
    out = apply_hamiltonian(delta(box, (2,)), None, 0.0).amplitudes
    assert np.allclose(out, [0, 0, 0, -0.5, 1.0])


def test_box_mismatch():
    psi = delta(BoxSpec(3, 4))
    with pytest.raises(BoxMismatch):
        apply_hamiltonian(psi, np.zeros((5, 5, 5)), 1.0)


def test_free_propagate_unitary_and_identity():
    box = BoxSpec(3, 16)
    psi = delta(box)
    assert np.allclose(free_propagate(psi, 0.0).amplitudes, psi.amplitudes)
    for t in (1.0, 10.0, 100.0):
        assert abs(free_propagate(psi, t).norm() - 1.0) <= 1e-10


def test_free_propagate_group_law():
    box = BoxSpec(2, 12)
    psi = random_wave(box, np.random.default_rng(4))
    a = free_propagate(free_propagate(psi, 1.3), 2.1).amplitudes
    b = free_propagate(psi, 3.4).amplitudes
    assert np.max(np.abs(a - b)) <= 1e-10


def test_origin_amplitude_matches_quadrature():
    t, M = 5.0, 128
    re = scipy.integrate.quad(lambda k: np.cos(2 * t * np.sin(np.pi * k) ** 2), 0, 1, limit=200)[0]
    im = scipy.integrate.quad(lambda k: -np.sin(2 * t * np.sin(np.pi * k) ** 2), 0, 1, limit=200)[0]
    oracle = complex(re, im) ** 3
    box = BoxSpec(3, M)
    got = free_propagate(delta(box), t).amplitudes[0, 0, 0]
    assert abs(got - oracle) <= 1e-8
    assert abs(free_propagator_1d(M, t)[0] ** 3 - oracle) <= 1e-8


@pytest.mark.parametrize("order", ["little", "big"])
def test_container_round_trip(tmp_path, order):
    box = BoxSpec(2, 5)
    psi = random_wave(box, np.random.default_rng(5))
    path = tmp_path / "psi.bin"
    write_container(path, box, psi.amplitudes, seed=42, meta={"t": 1.5}, byteorder=order)
    got = read_container(path)
    assert got["box"] == box and got["seed"] == 42 and got["meta"] == {"t": 1.5}
    assert np.array_equal(got["data"], psi.amplitudes)
    write_container(path, box, psi.amplitudes.real, kind=KIND_FIELD, byteorder=order)
    assert np.array_equal(read_container(path)["data"], psi.amplitudes.real)
