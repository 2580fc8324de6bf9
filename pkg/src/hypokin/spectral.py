"""Discrete anisotropic Littlewood-Paley analysis on the periodic grid.

Shell weights are radial in the anisotropic frequency norm: rho_{-1} is a
smooth bump equal to 1 on the ball of radius 1/2 and supported in radius
2/3, and rho_j(xi) = rho_{-1}(2^-(j+1).xi) - rho_{-1}(2^-j.xi).  Shells
-1..J_max sum to one exactly for |xi|_B <= 2^J_max, which is the band
radius used for spectral truncation.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .anisotropy import aniso_norm
from .errors import RegularityError
from .fields import GridField, TimeField

# Tolerance for the imaginary residue discarded after inverse transforms.
IMAG_RESIDUE_RTOL = 1e-10


def fftn(values):
    """Forward transform over the grid axes of a (grid + channel) array."""
    axes = tuple(range(values.ndim - 1))
    return scipy.fft.fftn(values, axes=axes, workers=1)


def ifftn_real(spectrum, check=True):
    """Inverse transform, asserting the imaginary residue is round-off."""
    axes = tuple(range(spectrum.ndim - 1))
    out = scipy.fft.ifftn(spectrum, axes=axes, workers=1)
    if check:
        scale = np.max(np.abs(out))
        if scale > 0 and np.max(np.abs(out.imag)) > IMAG_RESIDUE_RTOL * scale:
            raise AssertionError("imaginary residue above tolerance")
    return np.ascontiguousarray(out.real)


def _smooth_step(x):
    """h(x) = exp(-1/x) for x > 0, else 0."""
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def radial_bump(s):
    """chi(s): 1 for s <= 1/2, 0 for s >= 2/3, smooth ramp in between."""
    s = np.asarray(s, dtype=float)
    up = _smooth_step((2.0 / 3.0 - s) / (1.0 / 6.0))
    down = _smooth_step((s - 0.5) / (1.0 / 6.0))
    return up / (up + down + np.finfo(float).tiny * (up + down == 0))


def build_partition(grid):
    """Shell weights rho_j on the frequency lattice, j = -1 .. J_max.

    Returns an array of shape (J_max + 2,) + grid.shape; row j + 1 holds
    rho_j.  Rows sum to chi(2^-(J_max+1) |xi|_B), i.e. to exactly 1 on the
    band |xi|_B <= 2^J_max.
    """
    cached = grid._cache.get("partition")
    if cached is not None:
        return cached
    s = grid.freq_norm
    J = grid.J_max
    # chi(2^-(j+1) s) for j = -2 .. J_max; successive differences give rho_j.
    steps = np.stack([radial_bump(s / 2.0 ** (j + 1)) for j in range(-1, J + 1)])
    table = np.empty_like(steps)
    table[0] = steps[0]
    table[1:] = np.diff(steps, axis=0)
    table.setflags(write=False)
    grid._cache["partition"] = table
    return table


def shell_indices(grid):
    return list(range(-1, grid.J_max + 1))


def band_mask(grid):
    """Indicator of the exactly-covered band |xi|_B <= 2^J_max.

    The unpaired Nyquist row of each axis is excluded as well, so that
    band-limited fields stay real under non-integer spectral translations.
    """
    cached = grid._cache.get("band_mask")
    if cached is None:
        cached = grid.freq_norm <= grid.band_radius + 1e-12
        for axis, m in enumerate(grid.shape):
            idx = [slice(None)] * grid.N
            idx[axis] = m // 2
            cached[tuple(idx)] = False
        cached.setflags(write=False)
        grid._cache["band_mask"] = cached
    return cached


def bandlimit(field):
    """Zero all frequencies beyond the covered band (spectral truncation)."""
    spec = fftn(field.values) * band_mask(field.grid)[..., np.newaxis]
    return field.with_values(ifftn_real(spec))


@dataclass(frozen=True, eq=False)
class LPDecomposition:
    """Shells Delta_j f for j = -1..J_max plus their sup norms."""

    source: GridField
    shells: tuple          # GridField per j, index j + 1
    sup_norms: np.ndarray  # shape (J_max + 2, channels)

    @property
    def j_values(self):
        return np.arange(-1, len(self.shells) - 1)

    def shell(self, j):
        return self.shells[j + 1]

    def reconstruct(self):
        total = np.zeros_like(self.source.values)
        for f in self.shells:
            total += f.values
        return self.source.with_values(total)

    def besov_norm(self, gamma):
        weights = 2.0 ** (self.j_values * gamma)
        return float(np.max(weights[:, None] * self.sup_norms))


def lp_decompose(field, keep_fields=True):
    """Littlewood-Paley shells of a field: ifft(rho_j * fft(f)).

    With keep_fields=False only the per-shell sup norms are computed,
    which is all the Besov norm needs.
    """
    table = build_partition(field.grid)
    spec = fftn(field.values)
    shells = []
    sups = np.empty((table.shape[0], field.channels))
    for row in range(table.shape[0]):
        vals = ifftn_real(spec * table[row][..., np.newaxis])
        sups[row] = np.max(np.abs(vals), axis=tuple(range(field.grid.N)))
        if keep_fields:
            shells.append(field.with_values(vals))
    if not keep_fields:
        return LPDecomposition(source=field, shells=(), sup_norms=sups)
    return LPDecomposition(source=field, shells=tuple(shells), sup_norms=sups)


def shell_sup_norms(field):
    """Per-shell sup norms max_z |Delta_j f| without storing the shells."""
    return lp_decompose(field, keep_fields=False).sup_norms


def besov_norm(field, gamma):
    """sup_j 2^(j gamma) ||Delta_j f||_inf over the lattice shells."""
    if isinstance(field, TimeField):
        return max(besov_norm(f, gamma) for f in field.fields)
    sups = shell_sup_norms(field)
    j = np.arange(-1, sups.shape[0] - 1)
    return float(np.max(2.0 ** (j * gamma)[:, None] * sups))


def spectral_derivative(field, axis):
    """d/dz_axis via the i*xi multiplier (Hermitian by construction)."""
    xi = field.grid.freq_axes()[axis]
    shape = [1] * (field.grid.N + 1)
    shape[axis] = len(xi)
    mult = 1j * xi.reshape(shape)
    return field.with_values(ifftn_real(fftn(field.values) * mult, check=False))


def gradient_first_block(field):
    """(d/dv_1 .. d/dv_d) f as a d-channel field per input channel."""
    d = field.grid.blocks.d
    if field.channels != 1:
        raise ValueError("gradient_first_block expects a scalar field")
    parts = [spectral_derivative(field, l).values[..., 0] for l in range(d)]
    return field.with_values(np.stack(parts, axis=-1))


def div_first_block(field):
    """div_v over the first d coordinates of a d-channel field."""
    d = field.grid.blocks.d
    if field.channels != d:
        raise ValueError(f"divergence needs {d} channels, got {field.channels}")
    out = np.zeros(field.grid.shape)
    for l in range(d):
        comp = field.with_values(field.values[..., l])
        out += spectral_derivative(comp, l).values[..., 0]
    return field.with_values(out[..., np.newaxis])


def upsample(field, factor=2):
    """Trigonometric upsampling by zero padding the spectrum."""
    grid = field.grid
    from .fields import AnisoGrid, GridField

    fine = AnisoGrid(blocks=grid.blocks, half_extents=grid.half_extents,
                     points_per_dim=grid.points_per_dim * int(factor))
    spec = fftn(field.values)
    out = np.zeros(fine.shape + (field.channels,), dtype=complex)
    idx = tuple(np.fft.fftfreq(m, 1.0 / m).astype(int) for m in grid.shape)
    mesh = np.meshgrid(*idx, indexing="ij")
    out[tuple(mesh)] = spec * (factor ** grid.N)
    return GridField(fine, ifftn_real(out, check=False))


def bony_product(f, g, alpha, gamma):
    """Band-limited pointwise product, defined when alpha + gamma > 0.

    Returns (product field, ratio) with ratio the empirical constant
    ||fg||_(alpha ^ gamma) / (||f||_alpha ||g||_gamma).
    """
    if alpha + gamma <= 0:
        raise RegularityError(
            f"product needs alpha + gamma > 0, got {alpha} + {gamma}"
        )
    if f.channels == g.channels or g.channels == 1:
        vals = f.values * (g.values if g.channels == f.channels else g.values)
    elif f.channels == 1:
        vals = f.values * g.values
    else:
        raise ValueError("channel counts must match or broadcast from 1")
    prod = bandlimit(f.with_values(vals))
    na, ng = besov_norm(f, alpha), besov_norm(g, gamma)
    np_ = besov_norm(prod, min(alpha, gamma))
    denom = na * ng
    ratio = np_ / denom if denom > 0 else float("inf") if np_ > 0 else 0.0
    return prod, ratio


# --- mollification -----------------------------------------------------------

_BUMP_NODES, _BUMP_WEIGHTS = np.polynomial.legendre.leggauss(96)


def _bump_transform(omega):
    """Fourier transform of the unit-mass standard bump on [-1, 1].

    phi(x) = c exp(-1/(1-x^2)); phi_hat(0) = 1 and |phi_hat| <= 1.
    """
    x = _BUMP_NODES
    w = _BUMP_WEIGHTS
    base = np.exp(-1.0 / (1.0 - x ** 2))
    mass = np.sum(w * base)
    # cos expansion: even kernel
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    vals = np.cos(np.outer(om, x)) @ (w * base) / mass
    return vals.reshape(np.shape(omega))


def mollifier_multiplier(grid, n):
    """Tensor-product multiplier Phi_hat(xi / n) on the frequency lattice."""
    mult = np.ones(grid.shape)
    for axis, xi in enumerate(grid.freq_axes()):
        shape = [1] * grid.N
        shape[axis] = len(xi)
        mult = mult * _bump_transform(xi / n).reshape(shape)
    return mult


def mollify(field, n):
    """Convolution with Phi_n(z) = n^N Phi(n z), spectrally."""
    if n < 1:
        raise ValueError("mollification level must be >= 1")
    mult = mollifier_multiplier(field.grid, n)[..., np.newaxis]
    return field.with_values(ifftn_real(fftn(field.values) * mult, check=False))


def mollify_time_field(tfield, n):
    return TimeField(
        t0=tfield.t0, t1=tfield.t1,
        fields=tuple(mollify(f, n) for f in tfield.fields),
    )


# --- synthesis of rough fields ----------------------------------------------

def _annulus_points(grid, j, lo=0.75, hi=1.25, x_fraction=None):
    """Lattice indices with |xi|_B in [lo, hi] * 2^j, inside the band.

    x_fraction caps the share of the anisotropic norm carried by the
    degenerate blocks; shells restricted this way scale self-similarly
    across dyadic levels even when the box clips the position annuli.
    """
    s = grid.freq_norm
    sel = (s >= lo * 2.0 ** j) & (s <= hi * 2.0 ** j) & band_mask(grid)
    if x_fraction is not None:
        xi0 = np.zeros(grid.shape)
        d = grid.blocks.d
        for a, ax in enumerate(grid.freq_axes()[:d]):
            shape = [1] * grid.N
            shape[a] = len(ax)
            xi0 = xi0 + ax.reshape(shape) ** 2
        first = np.sqrt(xi0)
        sel &= (s - first) <= x_fraction * s + 1e-12
    return np.argwhere(sel)


def _dyadic_mode_index(grid, j):
    """Lattice index nearest (2^j, small position frequency) for shell j."""
    idx = [0] * grid.N
    v_freqs = grid.freq_axes()[0]
    idx[0] = int(np.argmin(np.abs(v_freqs - 2.0 ** j)))
    if grid.N > 1:
        idx[-1] = (j % (grid.shape[-1] // 4)) + 1
    return tuple(idx)


def velocity_window(grid, inner=0.7, outer=0.95):
    """Smooth cutoff in the first-block coordinates: 1 inside, 0 at the seam.

    Drifts multiplied by this vanish where the velocity representative
    wraps, which keeps the flow-shear seam of the periodic box inert.
    """
    b = (2.0 / 3.0 - 0.5) / (outer - inner)
    a = 0.5 - inner * b
    win = np.ones(grid.shape)
    mesh = grid.meshgrid()
    for k in range(grid.blocks.d):
        rel = np.abs(mesh[k]) / grid.half_extents[k]
        win = win * radial_bump(a + b * rel)
    return win


def synthesize_besov_field(beta, seed, grid, channels=1, time_mesh=None,
                           modes_per_shell=1, amplitude=1.0, window=False,
                           x_fraction=None, placement="uniform"):
    """Synthesize b of prescribed negative regularity -beta.

    b = sum_j 2^(j beta) sum_modes cos(<xi_j, z> + theta_j) with xi_j drawn
    uniformly on the discrete annulus |xi|_B ~ 2^j.  Deterministic in seed.
    With a time_mesh (array of times), returns a TimeField with
    b_t = b * (1 + sin(2 pi t / T) / 2); otherwise a GridField.  With
    window=True the field is tapered to zero at the velocity seam.

    placement="dyadic" puts one mode per shell exactly at |xi_v| = 2^j
    (plus a small position component), making the shells strictly
    self-similar across dyadic rescalings; useful when measuring rates
    against the mollification ladder, where the random placement's
    per-shell granularity would otherwise dominate.
    """
    if not 0 < beta < 0.5:
        raise ValueError("beta must lie in (0, 1/2)")
    rng = np.random.default_rng(np.random.PCG64(seed))
    mesh = grid.meshgrid()
    values = np.zeros(grid.shape + (channels,))
    freq_axes = grid.freq_axes()
    for j in range(0, grid.J_max + 1):
        if placement == "dyadic":
            picks = [_dyadic_mode_index(grid, j)]
        else:
            pts = _annulus_points(grid, j, x_fraction=x_fraction)
            if len(pts) == 0:
                pts = _annulus_points(grid, j)
            if len(pts) == 0:
                continue
        for c in range(channels):
            if placement != "dyadic":
                picks = pts[rng.integers(0, len(pts), size=modes_per_shell)]
            for idx in picks:
                xi = np.array([freq_axes[a][idx[a]] for a in range(grid.N)])
                theta = rng.uniform(0.0, 2.0 * np.pi)
                phase = sum(xi[a] * mesh[a] for a in range(grid.N)) + theta
                values[..., c] += (amplitude / len(picks)) \
                    * 2.0 ** (j * beta) * np.cos(phase)
    if window:
        values = values * velocity_window(grid)[..., np.newaxis]
    base = GridField(grid, values)
    if time_mesh is None:
        return base
    times = np.asarray(time_mesh, dtype=float)
    T = times[-1] if times[-1] > 0 else 1.0
    fields = tuple(
        base.with_values(base.values * (1.0 + 0.5 * np.sin(2.0 * np.pi * t / T)))
        for t in times
    )
    return TimeField(t0=float(times[0]), t1=float(times[-1]), fields=fields)


def random_localized_field(grid, seed, channels=1, decay=2.5, width=0.25):
    """Band-limited random smooth field decaying towards the box boundary.

    Fields like this stay clear of the periodic seam, so they behave as
    compactly supported test functions for the semigroup operators.
    """
    base = random_smooth_field(grid, seed, channels=channels, decay=decay)
    mesh = grid.meshgrid()
    env = np.ones(grid.shape)
    for a in range(grid.N):
        env = env * np.exp(-0.5 * (mesh[a] / (width * grid.half_extents[a])) ** 2)
    return bandlimit(base.with_values(base.values * env[..., np.newaxis]))


def random_smooth_field(grid, seed, channels=1, decay=2.5):
    """Band-limited random field with smoothly decaying spectrum (test helper)."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    spec = rng.standard_normal(grid.shape + (channels,)) \
        + 1j * rng.standard_normal(grid.shape + (channels,))
    s = grid.freq_norm[..., np.newaxis]
    spec *= np.exp(-decay * s) * band_mask(grid)[..., np.newaxis]
    vals = ifftn_real(spec, check=False)
    vals = vals / max(np.max(np.abs(vals)), 1e-300)
    return GridField(grid, vals)


# --- anisotropic Hoelder norm -------------------------------------------------

def holder_norm_aniso(field, gamma, seed=0, n_offsets=64):
    """||f||_inf + sampled sup of |f(z+h) - f(z)| / |h|_B^gamma, |h|_B <= 1.

    Offsets are lattice vectors: all axis-aligned nearest neighbours plus
    n_offsets random draws from the unit anisotropic ball; for each offset
    the difference quotient is maximised over every grid point at once.
    """
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    grid = field.grid
    h = grid.spacings
    offsets = [np.eye(grid.N, dtype=int)[a] for a in range(grid.N)]
    rng = np.random.default_rng(np.random.PCG64(seed))
    # max lattice steps per axis to stay within |h|_B <= 1
    max_steps = np.minimum(
        np.floor(1.0 / h).astype(int), np.asarray(grid.shape) // 2 - 1
    )
    max_steps = np.maximum(max_steps, 1)
    tries = 0
    while len(offsets) < grid.N + n_offsets and tries < 50 * n_offsets:
        tries += 1
        step = rng.integers(-max_steps, max_steps + 1)
        if np.all(step == 0):
            continue
        if aniso_norm(step * h, grid.blocks) <= 1.0:
            offsets.append(step)
    sup = field.sup_norm()
    semi = 0.0
    for step in offsets:
        norm_h = aniso_norm(step * h, grid.blocks)
        if norm_h == 0 or norm_h > 1.0:
            continue
        shifted = np.roll(field.values, shift=tuple(-step), axis=tuple(range(grid.N)))
        diff = np.max(np.abs(shifted - field.values))
        semi = max(semi, diff / norm_h ** gamma)
    return sup + semi
