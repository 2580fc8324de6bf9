import numpy as np
import pytest

from hypokin.errors import NotADensity
from hypokin.fields import GridField, TimeField, gaussian_field
from hypokin import fpsolver as fp
from hypokin import mckean as mk
from hypokin import semigroup as sg
from hypokin import spectral as sp


def resolved_kernel_density(model, grid, t):
    u = sp.bandlimit(sg.kernel_field(model, grid, t))
    return u * (1.0 / float(u.integral()[0]))


# --- sampling -----------------------------------------------------------------

def test_sampling_deterministic(kinetic, grid256, u0_256):
    a = mk.sample_initial(u0_256, 5000, 3)
    b = mk.sample_initial(u0_256, 5000, 3)
    assert np.array_equal(a.states, b.states)


def test_sampling_rejects_bad_density(kinetic, grid256, u0_256):
    with pytest.raises(NotADensity):
        mk.sample_initial(u0_256 * 1.5, 1000, 0)


def test_sampling_mean_matches(kinetic, grid256):
    # narrow cloud: sample mean within 4 sigma / sqrt(M) per coordinate
    u0 = gaussian_field(grid256, [0.2, 0.6], center=[0.5, 2.0])
    u0 = u0 * (1.0 / float(u0.integral()[0]))
    M = 40000
    ens = mk.sample_initial(u0, M, 1)
    mean = ens.states.mean(axis=0)
    sig = np.array([0.2, 0.6])
    assert np.all(np.abs(mean - [0.5, 2.0]) < 4.0 * sig / np.sqrt(M)
                  + 0.5 * grid256.spacings / np.sqrt(M))


def test_sampling_covariance_matches_kernel(kinetic, grid_widev):
    # Gamma_{t0} samples: covariance within 5% at M = 1e5 (wide box keeps
    # the correlated tails off the seam)
    t0 = 1.5
    u0 = resolved_kernel_density(kinetic, grid_widev, t0)
    ens = mk.sample_initial(u0, 100_000, 7)
    C = sg.covariance(kinetic, t0)
    emp = np.cov(ens.states.T)
    assert np.max(np.abs(emp - C) / np.abs(C)) < 0.05


# --- stepping -----------------------------------------------------------------

def test_trajectories_deterministic(kinetic):
    ens = mk.ParticleEnsemble(states=np.zeros((500, 2)), t=0.0, dt=1e-3,
                              seed=5, box=None)
    a = mk.simulate(ens, kinetic, None, T=0.2, checkpoints=(0.1, 0.2))
    b = mk.simulate(ens, kinetic, None, T=0.2, checkpoints=(0.1, 0.2))
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.record_at(0.1), b.record_at(0.1))


def test_position_update_is_noiseless(kinetic):
    z0 = np.tile([[0.7, -0.3]], (1000, 1))
    ens = mk.ParticleEnsemble(states=z0.copy(), t=0.0, dt=1e-3, seed=9,
                              box=None)
    out = mk.simulate(ens, kinetic, None, T=1e-3)
    dx = out.states[:, 1] - z0[:, 1] - 1e-3 * z0[:, 0]  # B1 z = v
    assert np.ptp(out.states[:, 1]) == 0.0  # no noise enters the position
    assert np.max(np.abs(dx)) < 1e-15
    dv = out.states[:, 0] - z0[:, 0]
    assert np.std(dv) > 0  # the velocity does get noise


def test_driftfree_covariance(kinetic):
    ens = mk.ParticleEnsemble(states=np.zeros((100_000, 2)), t=0.0, dt=1e-3,
                              seed=11, box=None)
    ens = mk.simulate(ens, kinetic, None, T=1.0, checkpoints=(0.25, 1.0))
    for t in (0.25, 1.0):
        emp = np.cov(ens.record_at(t).T)
        C = sg.covariance(kinetic, t)
        assert np.max(np.abs(emp - C) / np.abs(C)) < 0.05


def test_euler_weak_order_one(kinetic):
    # deterministic oracle: the EM covariance recursion
    # S_{k+1} = (I + dt B) S_k (I + dt B)^T + dt A converges to C(T) at
    # first order, and the empirical covariance matches the recursion
    T = 0.5

    def em_cov(dt):
        n = int(round(T / dt))
        Mstep = np.eye(2) + dt * kinetic.B
        S = np.zeros((2, 2))
        for _ in range(n):
            S = Mstep @ S @ Mstep.T + dt * kinetic.A
        return S

    C = sg.covariance(kinetic, T)
    errs = [np.max(np.abs(em_cov(dt) - C)) for dt in (0.05, 0.025, 0.0125)]
    assert 1.5 < errs[0] / errs[1] < 3.0
    assert 1.5 < errs[1] / errs[2] < 3.0
    ens = mk.ParticleEnsemble(states=np.zeros((200_000, 2)), t=0.0, dt=0.05,
                              seed=3, box=None)
    ens = mk.simulate(ens, kinetic, None, T=T, dt=0.05)
    emp = np.cov(ens.states.T)
    assert np.max(np.abs(emp - em_cov(0.05))) < 0.01


def test_escape_counting(kinetic, grid256, u0_256):
    ens = mk.sample_initial(u0_256, 2000, 5)
    out = mk.simulate(ens, kinetic, None, T=2.0, dt=1e-2)
    assert out.escape_count > 0          # v-diffusion reaches the seam
    assert np.all(np.abs(out.states) <= grid256.half_extents)


# --- density estimation ----------------------------------------------------------

def test_kde_point_mass(kinetic, grid256):
    cell = np.array([0.5, 3.0])
    states = np.tile(cell, (2000, 1))
    ens = mk.ParticleEnsemble(states=states, t=0.0, dt=1e-3, seed=0,
                              box=grid256)
    kde = mk.kde_density(ens, grid256)
    assert float(kde.integral()[0]) == pytest.approx(1.0, abs=1e-10)
    imax = np.unravel_index(np.argmax(kde.values), kde.values.shape)
    peak = np.array([grid256.axes()[a][imax[a]] for a in range(2)])
    assert np.all(np.abs(peak - cell) <= 2.0 * grid256.spacings)


def test_kde_requires_enough_particles(kinetic, grid256):
    ens = mk.ParticleEnsemble(states=np.zeros((10, 2)), t=0.0, dt=1e-3,
                              seed=0, box=grid256)
    with pytest.raises(ValueError):
        mk.kde_density(ens, grid256)


def test_kde_accuracy_and_scaling(kinetic, grid256):
    target = resolved_kernel_density(kinetic, grid256, 1.5)
    e1 = mk.l1_distance(
        mk.kde_density(mk.sample_initial(target, 100_000, 3), grid256), target)
    e2 = mk.l1_distance(
        mk.kde_density(mk.sample_initial(target, 200_000, 4), grid256), target)
    assert e1 < 0.05
    ratio = e1 / e2
    assert np.sqrt(2.0) * 0.7 < ratio < np.sqrt(2.0) * 1.3


# --- marginal validation -----------------------------------------------------------

def test_validate_marginals_driftfree(kinetic, grid128, u0_128):
    T, n_t = 0.5, 17
    zero = GridField(grid128, np.zeros(grid128.shape + (1,)))
    b = TimeField(t0=0.0, t1=T, fields=(zero,) * n_t)
    prob = fp.FPProblem(model=kinetic, b=b, u0=u0_128, beta=0.3,
                        epsilon=0.2, T=T)
    sol = fp.solve_fp(prob, fp.bounded_rational_nonlinearity(),
                      fp.SolverConfig(n_t=n_t))
    rep = mk.validate_marginals(kinetic, sol.u, b,
                                fp.bounded_rational_nonlinearity(),
                                M=100_000, seed=5,
                                checkpoints=(T / 2, T), dt=1e-3)
    assert all(d <= 0.06 for d in rep.distances)


# --- martingale statistics -----------------------------------------------------------

def test_martingale_trivial_zero(kinetic, grid128, u0_128):
    # u = 0, g = 0: increments are exactly zero
    T, n_t = 0.5, 17
    zero = GridField(grid128, np.zeros(grid128.shape + (1,)))
    ztf = TimeField(t0=0.0, t1=T, fields=(zero,) * n_t)
    rep = mk.martingale_test(kinetic, None, [ztf], [ztf], u0_128,
                             M=2000, seed=1, windows=[(0.25, 0.5)], dt=1e-2)
    assert all(r.estimate == 0.0 for r in rep.rows)
    assert all(r.z == 0.0 for r in rep.rows)
