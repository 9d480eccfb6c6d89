"""Uniform grids on an interval or a y-periodic strip with a tagged boundary.

The boundary is split into a sound-soft part (``gamma0``, homogeneous
Dirichlet) and a locally reacting part (``gamma1``, oscillator coupling).
Only the two x-faces ``x_min`` and ``x_max`` exist as boundary faces; in 2D
the y-direction is periodic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FACES = ("x_min", "x_max")


class DomainError(ValueError):
    """Raised for an invalid domain configuration."""


@dataclass(frozen=True)
class DomainConfig:
    dimension: int
    length_x: float
    nx: int
    gamma0_tag: tuple[str, ...] = ("x_min",)
    gamma1_tag: tuple[str, ...] = ("x_max",)
    length_y: float = 1.0
    ny: int = 3

    def validate(self) -> None:
        if self.dimension not in (1, 2):
            raise DomainError(f"dimension must be 1 or 2, got {self.dimension}")
        if not self.length_x > 0:
            raise DomainError("length_x must be positive")
        if self.nx < 3:
            raise DomainError(f"insufficient interior nodes: nx={self.nx} < 3")
        if self.dimension == 2:
            if not self.length_y > 0:
                raise DomainError("length_y must be positive")
            if self.ny < 3:
                raise DomainError(f"insufficient interior nodes: ny={self.ny} < 3")
        g0, g1 = set(self.gamma0_tag), set(self.gamma1_tag)
        unknown = (g0 | g1) - set(FACES)
        if unknown:
            raise DomainError(f"unknown boundary face labels: {sorted(unknown)}")
        if g0 & g1:
            raise DomainError(f"faces tagged both gamma0 and gamma1: {sorted(g0 & g1)}")
        if g0 | g1 != set(FACES):
            raise DomainError(f"untagged boundary faces: {sorted(set(FACES) - (g0 | g1))}")
        if not g0:
            # the potential energy is then only a seminorm
            raise DomainError("gamma0 must contain at least one face")


@dataclass(frozen=True, eq=False)
class Grid:
    """Node table of a uniform grid.

    Nodes are numbered x-fastest: ``index = j * nx + i``.  ``weights`` holds
    the boundary quadrature weight of every boundary node (zero in the
    interior); ``normals`` the outward unit normal (zero in the interior).
    """

    config: DomainConfig
    coords: np.ndarray
    hx: float
    hy: float
    interior: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    tags: tuple[str, ...] = field(repr=False, default=())

    @property
    def dimension(self) -> int:
        return self.config.dimension

    @property
    def h(self) -> float:
        return min(self.hx, self.hy) if self.dimension == 2 else self.hx

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def shape(self) -> tuple[int, int]:
        """(ny, nx) node counts; ny = 1 in 1D."""
        ny = self.config.ny if self.dimension == 2 else 1
        return ny, self.config.nx

    @property
    def stored(self) -> np.ndarray:
        """Nodes carrying unknowns: everything except gamma0, in index order."""
        return np.setdiff1d(np.arange(self.n_nodes), self.gamma0)

    @property
    def gamma1_weights(self) -> np.ndarray:
        return self.weights[self.gamma1]

    @property
    def gamma1_measure(self) -> float:
        """|Γ1|: side length in 2D, number of points in 1D."""
        n_faces = len(set(self.config.gamma1_tag))
        return float(n_faces * (self.config.length_y if self.dimension == 2 else 1.0))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(repr(self.config).encode())
        h.update(np.ascontiguousarray(self.coords).tobytes())
        return h.hexdigest()[:16]


def build_grid(config: DomainConfig) -> Grid:
    config.validate()
    nx = config.nx
    xs = np.linspace(0.0, config.length_x, nx)
    hx = config.length_x / (nx - 1)
    if config.dimension == 1:
        ny, hy = 1, 1.0
        ys = np.zeros(1)
    else:
        # periodic direction: node ny would coincide with node 0
        ny = config.ny
        hy = config.length_y / ny
        ys = np.arange(ny) * hy
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()]) if config.dimension == 2 else xs[:, None].copy()

    i_index = np.tile(np.arange(nx), ny)
    face_nodes = {"x_min": np.flatnonzero(i_index == 0), "x_max": np.flatnonzero(i_index == nx - 1)}
    face_normal = {"x_min": -1.0, "x_max": 1.0}
    point_weight = hy if config.dimension == 2 else 1.0

    n = nx * ny
    normals = np.zeros((n, 2))
    weights = np.zeros(n)
    tags = ["interior"] * n
    g0 = [face_nodes[f] for f in config.gamma0_tag]
    g1 = [face_nodes[f] for f in config.gamma1_tag]
    for face, nodes in face_nodes.items():
        normals[nodes, 0] = face_normal[face]
        weights[nodes] = point_weight
        label = "gamma0" if face in config.gamma0_tag else "gamma1"
        for j in nodes:
            tags[j] = label
    gamma0 = np.sort(np.concatenate(g0)) if g0 else np.zeros(0, dtype=int)
    gamma1 = np.sort(np.concatenate(g1)) if g1 else np.zeros(0, dtype=int)
    interior = np.setdiff1d(np.arange(n), np.concatenate([gamma0, gamma1]))
    for arr in (coords, normals, weights, gamma0, gamma1, interior):
        arr.setflags(write=False)
    return Grid(config, coords, hx, hy, interior, gamma0, gamma1, normals, weights, tuple(tags))


@dataclass(frozen=True)
class GeometryReport:
    x0: tuple[float, ...]
    c_geo: float
    gamma0_min: float
    gamma0_max: float
    gamma1_min: float
    satisfied: bool
    gamma0_violations: tuple[int, ...]
    gamma1_violations: tuple[int, ...]


def check_geometric_condition(grid: Grid, x0, c_geo: float | None = None) -> GeometryReport:
    """Star-shapedness test: (x-x0)·n <= 0 on gamma0 and >= c_geo on gamma1."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != grid.dimension or not np.all(np.isfinite(x0)):
        raise DomainError(f"x0 must be a finite point in R^{grid.dimension}")
    if c_geo is None:
        c_geo = grid.h
    if not c_geo > 0:
        raise DomainError("c_geo must be positive")
    point = np.zeros(2)
    point[: grid.dimension] = x0
    coords = np.zeros((grid.n_nodes, 2))
    coords[:, : grid.dimension] = grid.coords
    proj = np.einsum("ij,ij->i", coords - point, grid.normals)
    p0, p1 = proj[grid.gamma0], proj[grid.gamma1]
    bad0 = grid.gamma0[p0 > 0.0]
    bad1 = grid.gamma1[p1 < c_geo]
    return GeometryReport(
        x0=tuple(float(v) for v in x0),
        c_geo=float(c_geo),
        gamma0_min=float(p0.min()) if p0.size else np.inf,
        gamma0_max=float(p0.max()) if p0.size else -np.inf,
        gamma1_min=float(p1.min()) if p1.size else np.inf,
        satisfied=bool(bad0.size == 0 and bad1.size == 0),
        gamma0_violations=tuple(int(i) for i in bad0),
        gamma1_violations=tuple(int(i) for i in bad1),
    )


def write_grid_csv(grid: Grid, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y", "tag", "weight", "nx_normal", "ny_normal"])
        for i in range(grid.n_nodes):
            y = grid.coords[i, 1] if grid.dimension == 2 else 0.0
            w.writerow([i, repr(float(grid.coords[i, 0])), repr(float(y)), grid.tags[i],
                        repr(float(grid.weights[i])), repr(float(grid.normals[i, 0])),
                        repr(float(grid.normals[i, 1]))])


def read_grid_csv(path) -> dict[str, np.ndarray]:
    """Read a node table back as column arrays (tags as an object array)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: np.array([float(r[k]) for r in rows]) for k in ("x", "y", "weight", "nx_normal", "ny_normal")}
    out["index"] = np.array([int(r["index"]) for r in rows])
    out["tag"] = np.array([r["tag"] for r in rows], dtype=object)
    return out
