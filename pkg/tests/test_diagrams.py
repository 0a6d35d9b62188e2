import math

import mpmath
import numpy as np
import pytest
import scipy.integrate

from andersonlab.diagrams import (CostCapExceeded, AmplitudeContext, SimplexKernelInput,
                                  amplitude, amplitude_sum, count_partitions,
                                  crossing_integral, dos_1d, dos_2d, duhamel_term,
                                  duhamel_term_expm, enumerate_partitions,
                                  expectation_bruteforce, has_complete_spanning_tree,
                                  make_partition, measure_shell, measure_shell_quad,
                                  simplex_kernel, simplex_kernel_batch, theta_integral,
                                  theta_integral_grid, theta_integral_time)
from andersonlab.disorder import bernoulli, constant_field, sample_field
from andersonlab.lattice import BoxSpec, delta, free_propagate, kinetic_grid
from andersonlab.propagate import evolve


def double_factorial(k):
    return math.prod(range(k, 0, -2))


# ---------------------------------------------------------------------------
# partitions


def test_enumeration_examples():
    (p,) = enumerate_partitions(1, 1)
    assert p.blocks == ((1, 3),) and p.block_types == ("II",) and p.ladder
    assert len(enumerate_partitions(2, 2)) == 4
    assert len(enumerate_partitions(3, 3)) == 31


def test_count_examples():
    assert count_partitions(2, 2) == 3 and count_partitions(3, 3) == 15
    assert count_partitions(2, 1) == 1 and count_partitions(3, 2) == 15


@pytest.mark.parametrize("nbar", range(1, 7))
def test_all_pairings_count(nbar):
    assert count_partitions(nbar, nbar) == double_factorial(2 * nbar - 1)


def test_counts_match_enumeration_and_crude_bound():
    for nbar in range(1, 6):
        parts = enumerate_partitions(nbar, nbar)
        for m in range(1, nbar + 1):
            assert count_partitions(nbar, m) == sum(p.m == m for p in parts)
        assert sum(count_partitions(nbar, m) for m in range(1, nbar)) < nbar ** (2 * nbar + 1)
        assert len({p.blocks for p in parts}) == len(parts)


def test_classification_examples():
    simple = make_partition([(1, 2), (4, 5)], 2, 2)
    assert simple.block_types == ("I", "I'") and simple.simple and not simple.ladder
    assert make_partition([(1, 4), (2, 5)], 2, 2).crossing
    assert make_partition([(1, 5), (2, 4)], 2, 2).simple
    assert make_partition([(1, 2, 4, 5)], 2, 2).typeIII
    assert make_partition([(1, 4), (2, 3)], 4, 0).nested


def test_taxonomy_exclusive_and_exhaustive():
    for n in range(0, 7):
        for npr in range(0, 7 - n):
            if (n + npr) % 2:
                continue
            for p in enumerate_partitions(n, npr):
                flags = p.flags()
                assert sum(flags[k] for k in ("typeIII", "crossing", "nested", "simple")) == 1
                assert not p.ladder or p.simple


def test_pairings_have_spanning_trees():
    for p in enumerate_partitions(3, 3):
        assert has_complete_spanning_tree(p) == (p.m == 3)


def test_enumeration_cap():
    with pytest.raises(ValueError):
        enumerate_partitions(6, 6)
    with pytest.raises(ValueError):
        enumerate_partitions(1, 2)


# ---------------------------------------------------------------------------
# simplex kernel


def kernel_mp(energies, t):
    """Divided difference of exp(-i t z) in 50-digit arithmetic (distinct nodes)."""
    mpmath.mp.dps = 50
    e = [mpmath.mpf(float(x)) for x in energies]
    n = len(e) - 1
    total = mpmath.mpc(0)
    for j, ej in enumerate(e):
        den = mpmath.fprod(ej - ek for k, ek in enumerate(e) if k != j)
        total += mpmath.exp(-1j * t * ej) / den
    return complex((1j) ** n * total)


def test_kernel_equal_energies():
    for n in range(0, 9):
        for t in (0.3, 4.0, 20.0):
            k = simplex_kernel(SimplexKernelInput((1.7,) * (n + 1), t))
            exact = t ** n / math.factorial(n) * np.exp(-1.7j * t)
            assert abs(k - exact) <= 1e-12 * abs(exact)


def test_kernel_n1_closed_form_and_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(20):
        e0, e1 = rng.uniform(0, 6, 2)
        t = rng.uniform(0.1, 20)
        closed = (np.exp(-1j * e1 * t) - np.exp(-1j * e0 * t)) / (1j * (e0 - e1))
        f = lambda s, part: part(np.exp(-1j * (s * e0 + (t - s) * e1)))
        quad = complex(scipy.integrate.quad(f, 0, t, args=(np.real,), epsabs=1e-13, limit=200)[0],
                       scipy.integrate.quad(f, 0, t, args=(np.imag,), epsabs=1e-13, limit=200)[0])
        k = simplex_kernel(SimplexKernelInput((e0, e1), t))
        assert abs(k - closed) <= 1e-12 * max(1, abs(closed))
        assert abs(k - quad) <= 1e-10


def test_kernel_bound_symmetry_and_high_precision():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        t = rng.uniform(0.1, 20)
        E = rng.uniform(0, 6, n + 1)
        k = simplex_kernel_batch(E, t)[0]
        assert abs(k) <= t ** n / math.factorial(n) * (1 + 1e-12)
        assert abs(simplex_kernel_batch(rng.permutation(E), t)[0] - k) <= 1e-14 * max(abs(k), 1e-300)
        ref = kernel_mp(E, t)
        assert abs(k - ref) <= 1e-11 * abs(ref) + 1e-15 * t ** n / math.factorial(n)


def test_kernel_near_confluent_nodes():
    E = np.array([2.0, 2.0 + 1e-9, 2.0 + 3e-9, 3.0])
    ref = kernel_mp(E, 5.0)
    assert abs(simplex_kernel_batch(E, 5.0)[0] - ref) <= 1e-10 * abs(ref)


# ---------------------------------------------------------------------------
# Duhamel terms and the oracles


def test_duhamel_n0_is_free():
    box = BoxSpec(3, 4)
    omega = sample_field(bernoulli(), box, 0)
    a = duhamel_term(0, omega, (1, 0, 2), 1.3, 0.5).amplitudes
    b = free_propagate(delta(box, (1, 0, 2)), 1.3).amplitudes
    assert np.max(np.abs(a - b)) <= 1e-13


def test_duhamel_zero_field():
    box = BoxSpec(2, 3)
    for n in (1, 2, 3):
        assert np.all(duhamel_term(n, constant_field(box, 0.0), (0, 0), 1.0, 0.7).amplitudes == 0)


def test_duhamel_matches_block_exponential():
    box = BoxSpec(2, 3)
    omega = sample_field(bernoulli(), box, 4)
    for n in range(1, 5):
        a = duhamel_term(n, omega, (1, 2), 1.1, 0.6).amplitudes
        b = duhamel_term_expm(n, omega, (1, 2), 1.1, 0.6).amplitudes
        assert np.max(np.abs(a - b)) <= 1e-12 * max(np.max(np.abs(b)), 1e-300)


def test_duhamel_taylor_residual():
    box = BoxSpec(3, 2)
    omega = sample_field(bernoulli(), box, 5)
    lam, t = 0.2, 1.0
    series = sum(duhamel_term(n, omega, (0, 0, 0), t, lam).amplitudes for n in range(5))
    exact = evolve(delta(box), omega, lam, t).amplitudes
    bound = math.exp(lam * t) * (lam * t) ** 5 / math.factorial(5)
    assert np.linalg.norm(series - exact) <= bound


def test_duhamel_cost_cap():
    box = BoxSpec(3, 8)
    with pytest.raises(CostCapExceeded):
        duhamel_term(3, constant_field(box, 1.0), (0, 0, 0), 1.0, 0.5)


def test_bruteforce_examples():
    box = BoxSpec(1, 4)
    ctx = AmplitudeContext.build(box, 0.7, 1.0, bernoulli())
    assert expectation_bruteforce(1, 0, box, bernoulli(), (0,), 1.0, 0.7) == 0
    assert expectation_bruteforce(2, 1, box, bernoulli(), (0,), 1.0, 0.7) == 0
    assert abs(expectation_bruteforce(0, 0, box, bernoulli(), (0,), 1.0, 0.7) - 1) <= 1e-14
    bf = expectation_bruteforce(1, 1, box, bernoulli(), (0,), 1.0, 0.7)
    assert abs(bf - amplitude_sum(1, 1, ctx)) <= 1e-10 * abs(bf)


def test_ladder_amplitude_direct_sum():
    box = BoxSpec(2, 3)
    lam, t = 0.4, 1.5
    ctx = AmplitudeContext.build(box, lam, t, bernoulli())
    e = kinetic_grid(box).ravel()
    G = e.size
    K = np.array([[simplex_kernel(SimplexKernelInput((a, b), t)) for b in e] for a in e])
    direct = lam ** 2 * np.sum(np.abs(K) ** 2) / G ** 2
    (p,) = enumerate_partitions(1, 1)
    assert abs(amplitude(p, ctx) - direct) <= 1e-13 * direct


def test_amplitudes_sum_to_bruteforce_2x2x2():
    box = BoxSpec(3, 2)
    ctx = AmplitudeContext.build(box, 0.5, 1.0, bernoulli())
    bf = expectation_bruteforce(2, 2, box, bernoulli(), (0, 0, 0), 1.0, 0.5)
    assert abs(amplitude_sum(2, 2, ctx) - bf) <= 1e-8 * abs(bf)


def test_amplitude_coupling_scaling():
    box = BoxSpec(1, 4)
    for p in enumerate_partitions(2, 2):
        a = amplitude(p, AmplitudeContext.build(box, 1e-2, 1.0, bernoulli()))
        b = amplitude(p, AmplitudeContext.build(box, 2e-2, 1.0, bernoulli()))
        assert abs(b - 16 * a) <= 1e-12 * max(abs(b), 1e-300)


# ---------------------------------------------------------------------------
# densities of states and Xi


def test_dos_normalizations():
    assert scipy.integrate.quad(lambda u: dos_1d(u), 0, 2)[0] == pytest.approx(1, abs=1e-8)
    assert scipy.integrate.quad(lambda w: dos_2d(w), 0, 4, points=[2])[0] == pytest.approx(1, abs=1e-8)
    total = scipy.integrate.quad(lambda E: float(measure_shell(E)), 0, 6, points=[2, 4],
                                 limit=200)[0]
    assert total == pytest.approx(1, abs=1e-10)


def test_measure_shell_matches_quad_reference():
    E = np.array([0.1, 0.7, 1.5, 1.99, 2.5, 3.0, 3.7, 4.3, 5.2, 5.9])
    assert np.allclose(measure_shell(E), measure_shell_quad(E), rtol=1e-10, atol=1e-13)
    assert np.all(measure_shell(np.array([-1.0, 0.0, 6.0, 7.0])) == 0)


def test_measure_shell_stable_sup():
    coarse = measure_shell(np.linspace(0.001, 5.999, 2001)).max()
    fine = measure_shell(np.linspace(0.001, 5.999, 20001)).max()
    assert np.isfinite(fine) and abs(fine - coarse) <= 1e-3


def test_xi_negative_real_axis():
    val = theta_integral(-1.0, 1e-12)
    assert abs(val.imag) < 1e-9 and 1 / 7 <= val.real <= 1


def test_xi_conjugate_symmetry():
    for a in (0.5, 2.0, 3.3, 5.5):
        for eps in (1e-1, 1e-2):
            assert abs(theta_integral(a, -eps) - np.conj(theta_integral(a, eps))) <= 1e-9
            assert theta_integral(a, eps).imag > 0


def test_xi_matches_independent_oracles():
    for a, eps in ((1.0, 0.3), (3.5, 0.2), (-0.5, 0.1)):
        ref = theta_integral_time(a, eps)
        assert abs(theta_integral(a, eps) - ref) <= 1e-8
    assert abs(theta_integral(2.7, 0.5) - theta_integral_grid(2.7, 0.5, M=96)) <= 1e-5


def test_xi_bounded_uniformly_in_eps():
    grid = np.linspace(-1, 7, 17)
    sups = [max(abs(theta_integral(a, eps)) for a in grid) for eps in (1e-1, 1e-2, 1e-3)]
    assert max(sups) < 2.0 and max(sups) / min(sups) < 1.5


def test_xi_imaginary_part_limit():
    for a in (0.8, 1.6, 3.0, 4.6, 5.3):
        assert theta_integral(a, 1e-4).imag == pytest.approx(np.pi * measure_shell(a), rel=2e-2)


# ---------------------------------------------------------------------------
# crossing integral


def test_crossing_far_beta_grows_like_log_squared():
    # with one resolvent O(1) the two remaining ones contribute one log each
    w = np.array([0.1, 0.3, 0.2])
    eps_list = (1e-1, 1e-2, 1e-3)
    vals = [crossing_integral(w, 2.5, -1 - 1j, eps, n_samples=30000, seed=1).value
            for eps in eps_list]
    scaled = [v / math.log(1 / e) ** 2 for v, e in zip(vals, eps_list)]
    assert max(scaled) / min(scaled) < 2.0
    assert all(a >= b for a, b in zip(scaled, scaled[1:]))


def test_crossing_apriori_bound():
    w = np.array([0.4, 0.05, 0.7])
    for eps in (1e-1, 1e-2):
        r = crossing_integral(w, 3.1, 3.1, eps, n_samples=30000, seed=2)
        assert r.bound_holds and r.stderr < 0.1 * r.value


def test_crossing_eps_range():
    with pytest.raises(ValueError):
        crossing_integral(np.zeros(3), 1.0, 1.0, 1e-5)
