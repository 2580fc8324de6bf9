import numpy as np
import pytest

from hypokin.anisotropy import BlockStructure, KolmogorovModel
from hypokin.errors import NotHypoelliptic, TimeTooSmallWarning, UnsupportedFlow
from hypokin.fields import AnisoGrid, GridField, constant_field
from hypokin import semigroup as sg
from hypokin import spectral as sp


def kinetic_cov(t):
    return np.array([[t, t ** 2 / 2.0], [t ** 2 / 2.0, t ** 3 / 3.0]])


def grid_inner(f, g):
    return float(np.sum(f.values * g.values) * f.grid.cell_volume)


# --- covariance -----------------------------------------------------------------

@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_covariance_closed_form(kinetic, t):
    C = sg.covariance(kinetic, t)
    ref = kinetic_cov(t)
    assert np.max(np.abs(C - ref)) / np.max(np.abs(ref)) < 1e-10
    assert np.linalg.det(C) == pytest.approx(t ** 4 / 12.0, rel=1e-10)


def test_covariance_quadrature_agrees(kinetic):
    for t in (0.2, 1.3):
        a = sg.covariance(kinetic, t)
        b = sg.covariance(kinetic, t, method="quadrature")
        assert np.max(np.abs(a - b)) < 1e-12 * np.max(np.abs(a))


def test_covariance_heat_case():
    # full-rank noise (d = N): C(t) = t I
    m = KolmogorovModel(blocks=BlockStructure((2,)), B=np.zeros((2, 2)))
    assert m.hypoelliptic
    assert np.allclose(sg.covariance(m, 0.7), 0.7 * np.eye(2), atol=1e-12)


def test_covariance_degenerate_raises():
    dead = KolmogorovModel(blocks=BlockStructure((1, 1)), B=np.zeros((2, 2)))
    with pytest.raises(NotHypoelliptic):
        sg.covariance(dead, 0.5)


def test_covariance_reverse(kinetic):
    # reversed flow flips the cross term
    C = sg.covariance(kinetic, 0.8, reverse=True)
    ref = kinetic_cov(0.8) * np.array([[1, -1], [-1, 1]])
    assert np.max(np.abs(C - ref)) < 1e-12


def test_kernel_cache_chapman_kolmogorov(kinetic):
    cache = sg.KernelCache.build(kinetic, [0.25, 0.5])
    assert cache.chapman_kolmogorov_defect(0, 1) < 1e-10
    assert cache.chapman_kolmogorov_defect(0, 0) < 1e-10
    for C in cache.C:
        assert np.all(np.linalg.eigvalsh(C) > 0)


# --- kernel ------------------------------------------------------------------------

def test_gamma_density_values(kinetic):
    assert sg.gamma_density(kinetic, 1.0, [0.0, 0.0]) \
        == pytest.approx(np.sqrt(12.0) / (2.0 * np.pi))
    t = 0.3
    peak = (2 * np.pi) ** -1 * (t ** 4 / 12.0) ** -0.5
    assert sg.gamma_density(kinetic, t, [0.0, 0.0]) == pytest.approx(peak)


def test_gamma_density_quadrature_mass(kinetic, grid256):
    pts = np.stack(grid256.meshgrid(), axis=-1)
    vals = sg.gamma_density(kinetic, 0.5, pts)
    mass = np.sum(vals) * grid256.cell_volume
    assert abs(mass - 1.0) < 1e-4


def test_kernel_field_unit_mass_and_centering(kinetic, grid256):
    kf = sg.kernel_field(kinetic, grid256, 1.5)
    assert float(kf.integral()[0]) == pytest.approx(1.0, abs=1e-12)
    imax = np.unravel_index(np.argmax(kf.values), kf.values.shape)
    assert grid256.axes()[0][imax[0]] == 0.0
    assert grid256.axes()[1][imax[1]] == 0.0


# --- semigroup application -----------------------------------------------------------

def test_apply_identity_at_zero(kinetic, grid256):
    f = sp.random_localized_field(grid256, 1)
    assert sg.apply_P(kinetic, 0.0, f) is f
    assert sg.apply_Pprime(kinetic, 0.0, f) is f


def test_mass_and_constants(kinetic, grid256):
    one = constant_field(grid256, 1.0)
    # trace-free drift: P_t 1 = P'_t 1 = 1
    assert np.max(np.abs(sg.apply_P(kinetic, 0.3, one).values - 1.0)) < 1e-12
    assert np.max(np.abs(sg.apply_Pprime(kinetic, 0.3, one).values - 1.0)) < 1e-12
    f = sp.random_localized_field(grid256, 2)
    m0 = float(f.integral()[0])
    m1 = float(sg.apply_Pprime(kinetic, 0.4, f).integral()[0])
    assert abs(m1 - m0) < 1e-8 * max(abs(m0), 1.0)


def test_positivity(kinetic, grid256, u0_256):
    out = sg.apply_Pprime(kinetic, 0.3, u0_256)
    assert float(np.min(out.values)) > -1e-10


def test_exact_on_lattice_harmonics(kinetic, grid256):
    V, X = grid256.meshgrid()
    xiv = grid256.freq_axes()[0][3]
    xix = grid256.freq_axes()[1][40]
    f = GridField(grid256, np.cos(xiv * V + xix * X))
    t = 0.37
    out = sg.apply_Pprime(kinetic, t, f)
    xi = np.array([xiv, xix])
    damp = np.exp(-0.5 * xi @ sg.covariance(kinetic, t, reverse=True) @ xi)
    ref = damp * np.cos(xiv * V + xix * (X - t * V))
    assert np.max(np.abs(out.values[..., 0] - ref)) < 1e-12


def test_semigroup_law(kinetic, grid256):
    for seed, (s, t) in ((0, (0.06, 0.04)), (1, (0.03, 0.05))):
        f = sp.random_localized_field(grid256, seed, decay=2.5, width=0.12)
        one = sg.apply_Pprime(kinetic, t, sg.apply_Pprime(kinetic, s, f))
        two = sg.apply_Pprime(kinetic, s + t, f)
        rel = np.max(np.abs(one.values - two.values)) / two.sup_norm()
        assert rel < 1e-8


def test_duality(kinetic, grid256):
    for seed in range(3):
        f = sp.random_localized_field(grid256, seed, width=0.15)
        g = sp.random_localized_field(grid256, 50 + seed, width=0.15)
        lhs = grid_inner(sg.apply_P(kinetic, 0.3, f), g)
        rhs = grid_inner(f, sg.apply_Pprime(kinetic, 0.3, g))
        assert abs(lhs - rhs) < 1e-8 * abs(lhs)


def test_gaussian_in_gaussian_out(kinetic, grid_widev):
    # P'_t Gamma_s0 is the Gaussian with covariance C(t) + e^{tB} C(s0) e^{tB}^T
    s0, t = 1.0, 0.25
    gin = sp.bandlimit(sg.kernel_field(kinetic, grid_widev, s0))
    out = sg.apply_Pprime(kinetic, t, gin)
    E = kinetic.expB(t)
    mixed = sg.covariance(kinetic, t) + E @ sg.covariance(kinetic, s0) @ E.T
    assert np.max(np.abs(mixed - sg.covariance(kinetic, s0 + t))) < 1e-12
    ref = sg.kernel_field(kinetic, grid_widev, s0 + t)
    rel = np.max(np.abs(out.values - ref.values)) / ref.sup_norm()
    assert rel < 1e-4


def test_weak_identity_refinement(kinetic, grid128, u0_128):
    # <v_t, psi> = <phi, psi> + int_0^t <v_s, A psi> ds with
    # A = Delta_v/2 + <Bz, grad>; the quadrature residual shrinks ~ dt^2
    psi = sp.random_localized_field(grid128, 9, width=0.15)
    lap = sp.spectral_derivative(sp.spectral_derivative(psi, 0), 0)
    mesh = grid128.meshgrid()
    Bz = [sum(kinetic.B[a, b] * mesh[b] for b in range(2)) for a in range(2)]
    grad = [sp.spectral_derivative(psi, a) for a in range(2)]
    a_psi_vals = 0.5 * lap.values[..., 0] + sum(
        Bz[a] * grad[a].values[..., 0] for a in range(2))
    a_psi = psi.with_values(a_psi_vals)

    def residual(n_t, T=0.4):
        times = np.linspace(0.0, T, n_t)
        vs = [u0_128 if s == 0 else sg.apply_Pprime(kinetic, s, u0_128)
              for s in times]
        pair = np.array([grid_inner(v, a_psi) for v in vs])
        integral = np.trapezoid(pair, times)
        return abs(grid_inner(vs[-1], psi) - grid_inner(u0_128, psi)
                   - integral)

    r1, r2 = residual(9), residual(17)
    assert r2 < r1 / 3.0  # second-order quadrature


def test_time_too_small_warning(kinetic, grid256):
    f = sp.random_localized_field(grid256, 3)
    with pytest.warns(TimeTooSmallWarning):
        sg.apply_Pprime(kinetic, 1e-7, f)


def test_unsupported_flow():
    m = KolmogorovModel(blocks=BlockStructure((1, 1)),
                        B=np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert m.hypoelliptic  # controllable, but not shear-decomposable
    grid = AnisoGrid.build(m.blocks, [64, 64])
    with pytest.raises(UnsupportedFlow):
        sg.Propagator(m, grid)


def test_chain3_propagation(chain3):
    # three-block chain: mass conservation and positivity on a small 3-D grid
    grid = AnisoGrid.build(chain3.blocks, [32, 32, 32],
                           half_extents=[np.pi, np.pi ** 3, np.pi ** 3])
    from hypokin.fields import gaussian_field
    u0 = sp.bandlimit(gaussian_field(grid, [0.5, 4.0, 4.5]))
    u0 = u0 * (1.0 / float(u0.integral()[0]))
    out = sg.apply_Pprime(chain3, 0.5, u0)
    assert float(out.integral()[0]) == pytest.approx(1.0, abs=1e-8)
    assert float(np.min(out.values)) > -1e-8


# --- smoothing probes -----------------------------------------------------------------

def test_schauder_alpha_zero_bounded(kinetic, grid256):
    fields = [sp.synthesize_besov_field(0.4, s, grid256, modes_per_shell=2)
              for s in range(2)]
    rep = sg.schauder_probe(kinetic, -0.4, 0.0, [0.01, 0.1, 0.5], fields)
    assert rep.max_ratio["Pprime"] < 10.0
    assert rep.ratio_spread["Pprime"] < 5.0


def test_schauder_smooth_input_saturates(kinetic, grid256):
    fields = [sp.random_localized_field(grid256, 7, decay=3.0)]
    rep = sg.schauder_probe(kinetic, 0.2, 1.0, [1e-3, 1e-2, 1e-1], fields)
    # smooth inputs already live at the target index: no blow-up as t -> 0
    assert rep.slopes["Pprime"] > -0.5


def test_kernel_block_decay_flat_bound(kinetic, grid256):
    norms = sg.shell_kernel_l1(kinetic, grid256, 0.25)
    table = sp.build_partition(grid256)
    k0 = sp.ifftn_real(
        (table[1] * grid256.npoints / grid256.box_volume
         ).astype(complex)[..., np.newaxis], check=False)
    rho0_l1 = np.sum(np.abs(k0)) * grid256.cell_volume
    # below the parabolic scale the shell norm obeys the flat bound
    for j in range(0, grid256.J_max + 1):
        if 0.25 * 4.0 ** j < 1.0:
            assert norms[j + 1] <= rho0_l1 * (1 + 1e-6)


def test_kernel_block_decay_uniform_low_shell(kinetic, grid256):
    vals = [sg.shell_kernel_l1(kinetic, grid256, t)[0] for t in
            (0.05, 0.2, 0.8)]
    assert max(vals) < 2.0


def test_kernel_block_decay_exponent(kinetic, grid256):
    # probe where the dyadic annuli are fully represented (small t); at
    # large t the position direction of the outer annuli leaves the lattice
    rep = sg.kernel_block_decay(kinetic, grid256, t_list=[0.0625, 0.25],
                                j_list=list(range(0, grid256.J_max + 1)))
    assert rep.satisfies(1.0)
    assert rep.satisfies(2.0)
