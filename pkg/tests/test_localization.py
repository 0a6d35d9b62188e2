import math

import numpy as np
import pytest

from andersonlab.disorder import bernoulli, uniform
from andersonlab.lattice import BoxSpec, WaveFunction, delta, free_propagate
from andersonlab.localization import (BoxTooSmall, ShellCutoff, eigen_fraction_experiment,
                                      localization_observable, shell_mass, shell_weight, window)


def scalar_window(ell, m):
    L = math.floor(ell)
    m = abs(m)
    if L == 0:
        return 1.0 if m == 0 else 0.0
    if m <= L / 2:
        return 1.0
    return 2 - 2 * m / L if m <= L else 0.0


def scalar_R(delta_, ell, d):
    a = b = 1.0
    for v in d:
        a *= scalar_window(ell, v)
        b *= scalar_window(delta_ * ell, v)
    return a - b


def test_window_examples():
    assert window(8, 2) == 1 and window(8, 6) == 0.5 and window(8, 9) == 0


def test_shell_weight_examples():
    cut = ShellCutoff((0, 0, 0), 0.25, 8)
    assert shell_weight(cut, (0, 0, 0)) == 0
    assert shell_weight(cut, (3, 0, 0)) == 1


def test_shell_weight_matches_scalar_implementation():
    rng = np.random.default_rng(0)
    for _ in range(300):
        delta_ = rng.uniform(0.05, 0.95)
        ell = rng.uniform(1, 20)
        d = rng.integers(-25, 26, size=3)
        cut = ShellCutoff((0, 0, 0), delta_, ell)
        assert shell_weight(cut, d) == pytest.approx(scalar_R(delta_, ell, d), abs=1e-15)


def test_window_monotone_in_ell():
    m = np.arange(0, 40)
    prev = window(1, m)
    for ell in np.linspace(1, 30, 200):
        cur = window(ell, m)
        assert np.all(cur >= prev - 1e-15)
        prev = cur


def test_shell_mass_bounds_and_equality_cases():
    box = BoxSpec(3, 32)
    cut = ShellCutoff((0, 0, 0), 0.25, 8)
    assert shell_mass(delta(box), cut) == 0
    assert shell_mass(delta(box, (3, 0, 0)), cut) == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        psi = WaveFunction(box, rng.standard_normal(box.shape) + 1j * rng.standard_normal(box.shape))
        m = shell_mass(psi, cut)
        assert 0 <= m <= psi.norm_sq()


def test_free_shell_concentration_example():
    lam, delta_ = 0.25, 0.3
    ell = math.floor(lam ** -2)
    box = BoxSpec(3, 4 * ell)
    t = delta_ ** (6 / 7) * lam ** -2
    m = shell_mass(free_propagate(delta(box), t), ShellCutoff((0, 0, 0), delta_, ell))
    assert m >= 1 - 3 * delta_ ** (3 / 7)


def test_observable_at_zero_time_and_zero_coupling():
    box = BoxSpec(3, 32)
    rep = localization_observable(bernoulli(), 0.5, 0.3, 0.0, box, 3, seed=1)
    assert np.all(rep.samples == 0) and rep.baseline == 0
    rep = localization_observable(bernoulli(), 1e-8, 0.3, 2.0, box, 3, seed=1, ell=8)
    assert abs(rep.mean - rep.baseline) <= max(rep.stderr, 1e-10)


def test_box_too_small():
    with pytest.raises(BoxTooSmall):
        localization_observable(bernoulli(), 0.3, 0.3, 1.0, BoxSpec(3, 32), 1, seed=0)


def test_strong_disorder_localizes():
    rep = eigen_fraction_experiment(uniform(), 50.0, 0.3, 8, 0.1, 200, seed=1, dim=1)
    assert rep.complement_fraction <= 0.05
    assert rep.chain_holds


def test_huge_epsilon_empties_complement():
    rep = eigen_fraction_experiment(bernoulli(), 0.5, 0.3, 3, 1e6, 20, seed=2, dim=1)
    assert rep.complement_fraction == 0
    assert rep.chain_holds


def test_chain_holds_in_small_3d_box():
    rep = eigen_fraction_experiment(bernoulli(), 0.5, 0.3, 3, 0.05, 6, seed=3, dim=3)
    lhs = rep.complement_fraction
    eta = math.sqrt(0.05)
    rhs = rep.shell_average_inner / (1 + eta) - (1 + 1 / eta) / (1 + eta) * 0.05 \
        - rep.boundary_fraction
    assert rhs == pytest.approx(rep.chain_rhs) and (lhs >= rhs) == rep.chain_holds
    assert rep.chain_holds
