"""Periodic grids and sampled fields.

The continuum R^N is replaced by the torus prod [-L_k, L_k) sampled on an
even lattice.  Frequencies live on the dual lattice xi_k in (pi/L_k) * Z,
and the number of usable dyadic shells J_max is read off the largest
anisotropic frequency the lattice represents.
"""

import json
from dataclasses import dataclass

import numpy as np

from .anisotropy import BlockStructure, aniso_norm
from .errors import GridTooCoarse

GFD_MAGIC = "gfd-v1"
MIN_SHELLS = 2


def default_half_extents(blocks, L0=np.pi):
    """L_k = L0^(2i+1) for coordinates in block i, so dilations act naturally."""
    return L0 ** blocks.coordinate_weights().astype(float)


@dataclass(frozen=True, eq=False)
class AnisoGrid:
    """Even periodic lattice on prod [-L_k, L_k) with anisotropic bookkeeping."""

    blocks: BlockStructure
    half_extents: np.ndarray
    points_per_dim: np.ndarray

    def __post_init__(self):
        L = np.broadcast_to(np.asarray(self.half_extents, dtype=float),
                            (self.blocks.N,)).copy()
        n = np.broadcast_to(np.asarray(self.points_per_dim, dtype=int),
                            (self.blocks.N,)).copy()
        if np.any(L <= 0):
            raise ValueError("half extents must be positive")
        if np.any(n < 2) or np.any(n % 2 != 0):
            raise ValueError("points_per_dim must be even integers >= 2")
        L.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "half_extents", L)
        object.__setattr__(self, "points_per_dim", n)
        object.__setattr__(self, "_cache", {})
        if self.J_max < MIN_SHELLS:
            raise GridTooCoarse(
                f"lattice supports J_max={self.J_max} < {MIN_SHELLS} dyadic shells"
            )

    @classmethod
    def build(cls, blocks, points_per_dim, half_extents=None, L0=np.pi):
        if half_extents is None:
            half_extents = default_half_extents(blocks, L0)
        return cls(blocks=blocks, half_extents=np.asarray(half_extents, float),
                   points_per_dim=np.asarray(points_per_dim))

    @property
    def N(self):
        return self.blocks.N

    @property
    def shape(self):
        return tuple(int(m) for m in self.points_per_dim)

    @property
    def npoints(self):
        return int(np.prod(self.points_per_dim))

    @property
    def spacings(self):
        return 2.0 * self.half_extents / self.points_per_dim

    @property
    def cell_volume(self):
        return float(np.prod(self.spacings))

    @property
    def box_volume(self):
        return float(np.prod(2.0 * self.half_extents))

    def axes(self):
        """Physical coordinates along each axis."""
        return [
            -L + h * np.arange(m)
            for L, h, m in zip(self.half_extents, self.spacings, self.shape)
        ]

    def meshgrid(self):
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self):
        """All grid points as an (npoints, N) array."""
        return np.stack([g.ravel() for g in self.meshgrid()], axis=-1)

    def freq_axes(self):
        """Dual-lattice frequencies per axis, in fft ordering."""
        return [
            2.0 * np.pi * np.fft.fftfreq(m, d=h)
            for m, h in zip(self.shape, self.spacings)
        ]

    def freq_meshgrid(self):
        return np.meshgrid(*self.freq_axes(), indexing="ij")

    @property
    def freq_norm(self):
        """|xi|_B on the frequency lattice (cached)."""
        cached = self._cache.get("freq_norm")
        if cached is None:
            xi = np.stack(self.freq_meshgrid(), axis=-1)
            cached = aniso_norm(xi, self.blocks)
            cached.setflags(write=False)
            self._cache["freq_norm"] = cached
        return cached

    @property
    def max_freq_norm(self):
        """Largest representable |xi|_B (attained at the Nyquist corner)."""
        corner = np.array([np.max(np.abs(ax)) for ax in self.freq_axes()])
        return float(aniso_norm(corner, self.blocks))

    @property
    def J_max(self):
        """Largest j with 2^(j+1) <= max representable |xi|_B."""
        return int(np.floor(np.log2(self.max_freq_norm))) - 1

    @property
    def band_radius(self):
        """Shells -1..J_max sum to one exactly on |xi|_B <= 2^J_max."""
        return 2.0 ** self.J_max

    def header(self):
        return {
            "dims": list(self.blocks.dims),
            "half_extents": self.half_extents.tolist(),
            "points_per_dim": self.points_per_dim.tolist(),
        }

    def is_compatible(self, other):
        return (
            self.blocks.dims == other.blocks.dims
            and np.array_equal(self.points_per_dim, other.points_per_dim)
            and np.allclose(self.half_extents, other.half_extents)
        )


@dataclass(frozen=True, eq=False)
class GridField:
    """Real m-channel samples on an AnisoGrid; values shape = grid.shape + (m,)."""

    grid: AnisoGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == self.grid.shape:
            v = v[..., np.newaxis]
        if v.shape != self.grid.shape + (v.shape[-1],):
            raise ValueError(
                f"values shape {v.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[-1]

    def channel(self, c):
        return self.values[..., c]

    def with_values(self, values):
        return GridField(grid=self.grid, values=values)

    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    def integral(self):
        """Per-channel box quadrature."""
        axes = tuple(range(self.grid.N))
        return np.sum(self.values, axis=axes) * self.grid.cell_volume

    def l1_norm(self):
        axes = tuple(range(self.grid.N))
        return np.sum(np.abs(self.values), axis=axes) * self.grid.cell_volume

    def __add__(self, other):
        return self.with_values(self.values + _values_of(other))

    def __sub__(self, other):
        return self.with_values(self.values - _values_of(other))

    def __mul__(self, scalar):
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


def _values_of(other):
    return other.values if isinstance(other, GridField) else other


def constant_field(grid, value, channels=1):
    return GridField(grid, np.full(grid.shape + (channels,), float(value)))


class PeriodicInterpolator:
    """Multilinear interpolation of a GridField with periodic wrap.

    Callable on an (M, N) array of physical points; returns (M, channels).
    """

    def __init__(self, field):
        self.grid = field.grid
        self.values = field.values

    def __call__(self, points):
        g = self.grid
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = (pts + g.half_extents) / g.spacings
        i0 = np.floor(s).astype(np.int64)
        frac = s - i0
        shape = np.asarray(g.shape)
        out = np.zeros((pts.shape[0], self.values.shape[-1]))
        for corner in range(2 ** g.N):
            idx = []
            wgt = np.ones(pts.shape[0])
            for k in range(g.N):
                bit = (corner >> k) & 1
                idx.append((i0[:, k] + bit) % shape[k])
                wgt = wgt * (frac[:, k] if bit else 1.0 - frac[:, k])
            out += wgt[:, np.newaxis] * self.values[tuple(idx)]
        return out


def gaussian_field(grid, sigmas, center=None, normalize=True):
    """Axis-aligned Gaussian samples; with normalize=True, unit box mass.

    Widths below ~2 grid cells are not representable without ringing, so
    they are rejected.
    """
    sig = np.broadcast_to(np.asarray(sigmas, dtype=float), (grid.N,))
    if np.any(sig < 2.0 * grid.spacings):
        raise ValueError(
            f"sigmas {sig} under-resolved for spacings {grid.spacings}"
        )
    c = np.zeros(grid.N) if center is None else np.asarray(center, float)
    quad = np.zeros(grid.shape)
    for a, ax in enumerate(grid.meshgrid()):
        quad += ((ax - c[a]) / sig[a]) ** 2
    vals = np.exp(-0.5 * quad)
    vals /= (2.0 * np.pi) ** (grid.N / 2.0) * np.prod(sig)
    f = GridField(grid, vals[..., np.newaxis])
    if normalize:
        f = f * (1.0 / float(f.integral()[0]))
    return f


@dataclass(frozen=True, eq=False)
class TimeField:
    """GridFields on a uniform time mesh over [t0, t1]."""

    t0: float
    t1: float
    fields: tuple

    def __post_init__(self):
        fields = tuple(self.fields)
        if len(fields) < 2:
            raise ValueError("a time mesh needs at least two points")
        g0, c0 = fields[0].grid, fields[0].channels
        for f in fields[1:]:
            if f.grid is not g0 and not g0.is_compatible(f.grid):
                raise ValueError("all fields must share one grid")
            if f.channels != c0:
                raise ValueError("all fields must share the channel count")
        object.__setattr__(self, "fields", fields)

    @property
    def n_t(self):
        return len(self.fields)

    @property
    def times(self):
        return np.linspace(self.t0, self.t1, self.n_t)

    @property
    def dt(self):
        return (self.t1 - self.t0) / (self.n_t - 1)

    @property
    def grid(self):
        return self.fields[0].grid

    @property
    def channels(self):
        return self.fields[0].channels

    def at_index(self, i):
        return self.fields[i]

    def index_of(self, t):
        i = int(round((t - self.t0) / self.dt))
        if not np.isclose(self.t0 + i * self.dt, t, atol=1e-12 + 1e-9 * abs(t)):
            raise ValueError(f"t={t} is not on the time mesh")
        return i

    def at_time(self, t):
        return self.fields[self.index_of(t)]

    def sample(self, t):
        """Linear interpolation in time (for continuous-in-t consumers)."""
        s = (t - self.t0) / self.dt
        i = int(np.clip(np.floor(s), 0, self.n_t - 2))
        w = s - i
        if w == 0.0:
            return self.fields[i]
        a, b = self.fields[i], self.fields[i + 1]
        return a.with_values((1.0 - w) * a.values + w * b.values)

    def sup_norm(self):
        return max(f.sup_norm() for f in self.fields)


def uniform_mesh(t0, t1, n_t):
    return np.linspace(t0, t1, n_t)


# --- .gfd binary dump: one-line JSON header, then little-endian float64 ---

def write_gfd(path, field):
    header = dict(field.grid.header(), channels=field.channels)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_gfd(path, grid=None):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    blocks = BlockStructure(tuple(header["dims"]))
    file_grid = AnisoGrid(
        blocks=blocks,
        half_extents=np.asarray(header["half_extents"], float),
        points_per_dim=np.asarray(header["points_per_dim"], int),
    )
    if grid is not None:
        if not grid.is_compatible(file_grid):
            raise ValueError(f"{path}: grid in file does not match the scenario grid")
        file_grid = grid
    m = int(header["channels"])
    values = np.frombuffer(raw, dtype="<f8").reshape(file_grid.shape + (m,))
    return GridField(grid=file_grid, values=values)


def write_time_field(directory, stem, tfield):
    """Dump a TimeField as a numbered .gfd sequence plus a times index."""
    import os

    paths = []
    for i, f in enumerate(tfield.fields):
        p = os.path.join(directory, f"{stem}_{i:04d}.gfd")
        write_gfd(p, f)
        paths.append(p)
    index = {
        "t0": tfield.t0,
        "t1": tfield.t1,
        "n_t": tfield.n_t,
        "files": [os.path.basename(p) for p in paths],
    }
    with open(os.path.join(directory, f"{stem}_index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    return paths
