"""Gaussian probability maps over a scene grid.

Each pedestrian position becomes a bivariate Gaussian evaluated at cell
centers and scaled so its peak is 1.0; pedestrians are merged by cellwise
maximum. Grid row 0 is the bottom of the scene (smallest y) and column 0
the left edge (smallest x).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DecodeError, DimensionError

SIGMA_TARGET = 0.1
SIGMA_OTHER = 0.3


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    origin: tuple  # world (x, y) of the grid's bottom-left corner
    cell_size: float

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must have at least one cell")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) in world meters."""
        x0, y0 = self.origin
        return (x0, x0 + self.width * self.cell_size, y0, y0 + self.height * self.cell_size)

    def world_to_grid(self, point) -> tuple[int, int]:
        """(row, col) of the cell containing ``point``; may fall outside the grid."""
        x, y = float(point[0]), float(point[1])
        col = int(np.floor((x - self.origin[0]) / self.cell_size))
        row = int(np.floor((y - self.origin[1]) / self.cell_size))
        return row, col

    def grid_to_world(self, cell) -> np.ndarray:
        row, col = cell
        return np.array([self.origin[0] + (col + 0.5) * self.cell_size,
                         self.origin[1] + (row + 0.5) * self.cell_size])

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.cell_size
        return xs, ys

    def contains(self, point) -> bool:
        r, c = self.world_to_grid(point)
        return 0 <= r < self.height and 0 <= c < self.width


@dataclass(frozen=True)
class GaussianParams:
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    rho: float = 0.0

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigmas must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")


@dataclass(frozen=True)
class ProbMap:
    grid: np.ndarray  # (1, H, W)
    spec: GridSpec

    def __post_init__(self):
        if self.grid.shape != (1, self.spec.height, self.spec.width):
            raise DimensionError(f"grid shape {self.grid.shape} does not match spec {self.spec.shape}")

    @property
    def values(self) -> np.ndarray:
        return self.grid[0]

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=np.float64) -> "ProbMap":
        return cls(np.zeros((1, spec.height, spec.width), dtype=dtype), spec)


def fit_grid(points, width: int = 100, height: int = 100, margin_frac: float = 0.05) -> GridSpec:
    """Square-celled grid centered on the bounding box of ``points`` (or a Scene).

    Each side of the box is widened by ``margin_frac`` of its length. A box
    that collapses to a point falls back to a 1 m extent.
    """
    if hasattr(points, "all_points"):
        points = points.all_points()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("cannot fit a grid to an empty scene")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = (hi - lo) * (1.0 + 2.0 * margin_frac)
    if np.all(span <= 0):
        span = np.array([1.0, 1.0])
    cell = max(span[0] / width, span[1] / height)
    center = (lo + hi) / 2.0
    origin = (center[0] - width * cell / 2.0, center[1] - height * cell / 2.0)
    return GridSpec(width, height, origin, float(cell))


def gaussian_values(center, sigma1: float, sigma2: float, spec: GridSpec, rho: float = 0.0,
                    dtype=np.float64) -> np.ndarray:
    """Peak-normalized bivariate Gaussian at every cell center, shape (H, W)."""
    xs, ys = spec.cell_centers()
    dx = (xs - center[0]) / sigma1
    dy = (ys - center[1]) / sigma2
    if rho == 0.0:
        # separable: exp(-dx^2/2) * exp(-dy^2/2)
        out = np.exp(-0.5 * dy * dy)[:, None] * np.exp(-0.5 * dx * dx)[None, :]
    else:
        q = dx[None, :] ** 2 - 2.0 * rho * dx[None, :] * dy[:, None] + dy[:, None] ** 2
        out = np.exp(-q / (2.0 * (1.0 - rho * rho)))
    return out.astype(dtype, copy=False)


def gaussian_map(center, params: GaussianParams | None, spec: GridSpec, dtype=np.float64) -> ProbMap:
    if params is None:
        params = GaussianParams(center[0], center[1], SIGMA_OTHER, SIGMA_OTHER)
    vals = gaussian_values((params.mu1, params.mu2), params.sigma1, params.sigma2, spec, params.rho, dtype)
    return ProbMap(vals[None], spec)


def compose_max(maps, spec: GridSpec | None = None) -> ProbMap:
    maps = list(maps)
    if not maps:
        if spec is None:
            raise ValueError("an empty composition needs an explicit GridSpec")
        return ProbMap.zeros(spec)
    spec = spec or maps[0].spec
    for m in maps:
        if m.spec != spec:
            raise DimensionError("all maps must share one GridSpec")
    out = maps[0].grid.copy()
    for m in maps[1:]:
        np.maximum(out, m.grid, out=out)
    return ProbMap(out, spec)


def encode_positions(positions: dict, sigmas: dict, spec: GridSpec, dtype=np.float64) -> np.ndarray:
    """Cellwise max of isotropic Gaussians, one per pedestrian, returned as (H, W).

    ``sigmas`` maps pedestrian id to its sigma in meters; ids absent from it
    are skipped.
    """
    out = np.zeros(spec.shape, dtype=dtype)
    xs, ys = spec.cell_centers()
    for pid, p in positions.items():
        s = sigmas.get(pid)
        if s is None:
            continue
        ex = np.exp(-0.5 * ((xs - p[0]) / s) ** 2)
        ey = np.exp(-0.5 * ((ys - p[1]) / s) ** 2)
        np.maximum(out, np.outer(ey, ex).astype(dtype, copy=False), out=out)
    return out


def encode_frame(positions: dict, target_id, spec: GridSpec, sigma_target: float = SIGMA_TARGET,
                 sigma_other: float = SIGMA_OTHER, integrate: bool = True, dtype=np.float64) -> ProbMap:
    """Probability map of one time step, seen from ``target_id``'s point of view.

    With ``integrate=False`` the neighbors are left out entirely.
    """
    if target_id not in positions:
        raise ValueError(f"target {target_id!r} has no position in this frame")
    sigmas = {target_id: sigma_target}
    if integrate:
        sigmas.update({pid: sigma_other for pid in positions if pid != target_id})
    return ProbMap(encode_positions(positions, sigmas, spec, dtype)[None], spec)


def sample_cells(values: np.ndarray, rng: np.random.Generator, size=None) -> np.ndarray:
    """Flat cell indices drawn in proportion to the clamped map values."""
    w = np.clip(np.asarray(values, dtype=np.float64).reshape(-1), 0.0, None)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        raise DecodeError("map has no positive mass to sample from")
    cdf = np.cumsum(w)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, w.size - 1)


def sample_coordinate(pmap: ProbMap, rng: np.random.Generator) -> np.ndarray:
    """Draw a cell by its normalized mass, then a uniform point inside that cell."""
    spec = pmap.spec
    flat = int(sample_cells(pmap.values, rng))
    row, col = divmod(flat, spec.width)
    jitter = rng.random(2) - 0.5
    return spec.grid_to_world((row, col)) + jitter * spec.cell_size


def argmax_decode(pmap: ProbMap) -> np.ndarray:
    # np.argmax returns the first maximum in row-major order
    flat = int(np.argmax(pmap.values))
    return pmap.spec.grid_to_world(divmod(flat, pmap.spec.width))


def write_pgm(pmap: ProbMap, path) -> None:
    """Plain PGM (P2, maxval 65535), north-up: the first image row is the top of the scene."""
    vals = np.clip(pmap.values, 0.0, 1.0)[::-1]
    ints = np.rint(65535.0 * vals).astype(np.int64)
    h, w = ints.shape
    lines = ["P2", f"{w} {h}", "65535"]
    lines.extend(" ".join(map(str, row)) for row in ints)
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:4 + w * h], dtype=np.float64).reshape(h, w) / maxval
    return vals[::-1]


def write_csv(pmap: ProbMap, path) -> None:
    """H rows of W comma-separated values, row 0 (bottom of the scene) first."""
    np.savetxt(path, pmap.values, delimiter=",", fmt="%.10g")
