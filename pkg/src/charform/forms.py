"""Skew-symmetric differential forms on R^n with analytic or gridded coefficients.

A k-form stores one coefficient per strictly increasing multi-index
``(i1 < ... < ik)`` of 0-based axis numbers; axis ``i`` is the coordinate
``x{i+1}``. Missing indices are zero coefficients.

Analytic coefficients are expressions in ``x1..xn`` and are differentiated
with dual numbers, so ``d`` of an analytic form is exact up to roundoff (and
``d(d w)`` nests the duals). Sampled coefficients live on a regular grid and
are differentiated with second-order central differences, one-sided at the
grid edges.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from charform import dual
from charform.expr import Expression, parse


class FormError(ValueError):
    pass


class DegreeError(FormError):
    pass


class GridMismatchError(FormError):
    pass


def coordinate_names(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


@dataclass(frozen=True)
class Grid:
    """Regular grid: per-axis origin, spacing and point count (row-major)."""

    origin: tuple
    spacing: tuple
    count: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "count", tuple(int(v) for v in self.count))
        if not (len(self.origin) == len(self.spacing) == len(self.count)):
            raise GridMismatchError("origin, spacing and count must have one entry per axis")
        if any(c < 3 for c in self.count):
            raise FormError("grids need at least 3 points per axis")
        if any(not h > 0 for h in self.spacing):
            raise FormError("grid spacing must be positive")

    @classmethod
    def from_bounds(cls, lower: Sequence[float], upper: Sequence[float], count: Sequence[int]) -> "Grid":
        count = tuple(int(c) for c in count)
        spacing = [(hi - lo) / (c - 1) for lo, hi, c in zip(lower, upper, count)]
        return cls(tuple(lower), tuple(spacing), count)

    @property
    def ndim(self) -> int:
        return len(self.count)

    @property
    def shape(self) -> tuple:
        return self.count

    @property
    def upper(self) -> tuple:
        return tuple(o + h * (c - 1) for o, h, c in zip(self.origin, self.spacing, self.count))

    def axes(self) -> list[np.ndarray]:
        return [o + h * np.arange(c) for o, h, c in zip(self.origin, self.spacing, self.count)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def point(self, index) -> tuple:
        return tuple(o + h * i for o, h, i in zip(self.origin, self.spacing, index))

    def interior_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[tuple(slice(1, -1) for _ in self.shape)] = True
        return mask


# ---------------------------------------------------------------------------
# Coefficient fields


class AnalyticField:
    """Coefficient given in closed form; ``evaluate`` takes one value per axis."""

    def evaluate(self, coords: Sequence):
        raise NotImplementedError

    def sample(self, grid: Grid) -> np.ndarray:
        out = self.evaluate(grid.mesh())
        return np.broadcast_to(np.asarray(dual.value(out), dtype=float), grid.shape).copy()


@dataclass(frozen=True)
class ExpressionField(AnalyticField):
    expr: Expression
    dim: int

    def __post_init__(self):
        allowed = set(coordinate_names(self.dim))
        extra = set(self.expr.variables) - allowed
        if extra:
            raise FormError(f"coefficient uses {sorted(extra)}; only {sorted(allowed)} are coordinates")

    def evaluate(self, coords):
        return self.expr.raw(dict(zip(coordinate_names(self.dim), coords)))


@dataclass(frozen=True)
class PartialField(AnalyticField):
    """d(base)/dx_axis by a fresh dual pass."""

    base: AnalyticField
    axis: int

    def evaluate(self, coords):
        tag = dual.new_tag()
        seeded = list(coords)
        seeded[self.axis] = dual.Dual(coords[self.axis], 1.0, tag)
        return dual.tangent(self.base.evaluate(seeded), tag, 0.0)


@dataclass(frozen=True)
class LinearField(AnalyticField):
    terms: tuple  # ((weight, AnalyticField), ...)

    def evaluate(self, coords):
        total = 0.0
        for w, f in self.terms:
            total = total + w * f.evaluate(coords)
        return total


@dataclass(frozen=True)
class ProductField(AnalyticField):
    left: AnalyticField
    right: AnalyticField

    def evaluate(self, coords):
        return self.left.evaluate(coords) * self.right.evaluate(coords)


@dataclass(frozen=True, eq=False)
class SampledField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise GridMismatchError(f"samples of shape {values.shape} on a grid of shape {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def sample(self, grid: Grid) -> np.ndarray:
        if grid != self.grid:
            raise GridMismatchError("sampled coefficient lives on a different grid")
        return np.array(self.values)


def _as_field(c, dim: int):
    if isinstance(c, (AnalyticField, SampledField)):
        return c
    if isinstance(c, (int, float)):
        return ExpressionField(parse(repr(float(c))), dim)
    if isinstance(c, (str, Expression)):
        return ExpressionField(c if isinstance(c, Expression) else parse(c), dim)
    raise TypeError(f"cannot use {type(c).__name__} as a coefficient")


# ---------------------------------------------------------------------------
# Forms


def _perm_sign(seq: Sequence[int]) -> int:
    sign = 1
    seq = list(seq)
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


@dataclass(frozen=True, eq=False)
class DifferentialForm:
    degree: int
    dim: int
    coefficients: Mapping[tuple, object] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.degree <= self.dim:
            raise DegreeError(f"degree {self.degree} outside 0..{self.dim}")
        coeffs = {}
        for index, c in dict(self.coefficients).items():
            index = tuple(int(i) for i in index)
            if len(index) != self.degree:
                raise DegreeError(f"index {index} does not match degree {self.degree}")
            if any(a >= b for a, b in zip(index, index[1:])) or any(not 0 <= i < self.dim for i in index):
                raise FormError(f"index {index} is not strictly increasing within 0..{self.dim - 1}")
            coeffs[index] = _as_field(c, self.dim)
        kinds = {isinstance(c, SampledField) for c in coeffs.values()}
        if len(kinds) > 1:
            raise GridMismatchError("cannot mix sampled and analytic coefficients in one form")
        grids = {c.grid for c in coeffs.values() if isinstance(c, SampledField)}
        if len(grids) > 1:
            raise GridMismatchError("sampled coefficients are on different grids")
        object.__setattr__(self, "coefficients", coeffs)

    @classmethod
    def zero_form(cls, f, dim: int) -> "DifferentialForm":
        return cls(0, dim, {(): f})

    @classmethod
    def one_form(cls, components: Sequence) -> "DifferentialForm":
        """``sum_i components[i] dx_i``."""
        return cls(1, len(components), {(i,): c for i, c in enumerate(components)})

    @classmethod
    def basis(cls, index: Sequence[int], dim: int) -> "DifferentialForm":
        """dx_{i1} ^ ... ^ dx_{ik} with unit coefficient (index may be unsorted)."""
        index = tuple(index)
        if len(set(index)) < len(index):
            return cls(len(index), dim, {})
        return cls(len(index), dim, {tuple(sorted(index)): float(_perm_sign(index))})

    @classmethod
    def from_samples(cls, grid: Grid, degree: int, samples: Mapping[tuple, np.ndarray]) -> "DifferentialForm":
        return cls(degree, grid.ndim, {k: SampledField(grid, v) for k, v in samples.items()})

    @property
    def grid(self) -> Grid | None:
        for c in self.coefficients.values():
            if isinstance(c, SampledField):
                return c.grid
        return None

    @property
    def is_sampled(self) -> bool:
        return self.grid is not None

    def indices(self) -> list[tuple]:
        return list(itertools.combinations(range(self.dim), self.degree))

    def sample(self, grid: Grid | None = None) -> dict[tuple, np.ndarray]:
        """Coefficient arrays on ``grid`` for every multi-index (zeros included)."""
        grid = grid or self.grid
        if grid is None:
            raise FormError("analytic forms need a grid to be sampled")
        if grid.ndim != self.dim:
            raise GridMismatchError(f"{grid.ndim}-d grid for a form on R^{self.dim}")
        out = {}
        for index in self.indices():
            c = self.coefficients.get(index)
            out[index] = np.zeros(grid.shape) if c is None else c.sample(grid)
        return out

    def at(self, point: Sequence[float]) -> dict[tuple, float]:
        """Coefficient values at one point (analytic forms only)."""
        if self.is_sampled:
            raise FormError("use sample() or interpolation for sampled forms")
        coords = [float(v) for v in point]
        out = {}
        for index in self.indices():
            c = self.coefficients.get(index)
            out[index] = 0.0 if c is None else float(dual.value(c.evaluate(coords)))
        return out


def exterior_derivative(form: DifferentialForm) -> DifferentialForm:
    """d of a k-form: ``sum_I sum_m d_m c_I dx_m ^ dx_I``."""
    if form.degree >= form.dim:
        raise DegreeError(f"d of a top-degree form ({form.degree} on R^{form.dim}) is not defined")
    grid = form.grid
    terms: dict[tuple, list] = {}
    for index, c in form.coefficients.items():
        for m in range(form.dim):
            if m in index:
                continue
            target = tuple(sorted(index + (m,)))
            # moving dx_m past the smaller entries of I
            sign = -1.0 if sum(1 for i in index if i < m) % 2 else 1.0
            terms.setdefault(target, []).append((sign, c, m))
    coeffs = {}
    for target, parts in sorted(terms.items()):
        if grid is None:
            coeffs[target] = LinearField(tuple((s, PartialField(c, m)) for s, c, m in parts))
        else:
            total = np.zeros(grid.shape)
            for s, c, m in parts:
                total += s * np.gradient(c.values, grid.spacing[m], axis=m, edge_order=2)
            coeffs[target] = SampledField(grid, total)
    return DifferentialForm(form.degree + 1, form.dim, coeffs)


d = exterior_derivative


def wedge(a: DifferentialForm, b: DifferentialForm) -> DifferentialForm:
    if a.dim != b.dim:
        raise GridMismatchError(f"forms on R^{a.dim} and R^{b.dim}")
    degree = a.degree + b.degree
    if degree > a.dim:
        raise DegreeError(f"wedge of degrees {a.degree} and {b.degree} exceeds dimension {a.dim}")
    ga, gb = a.grid, b.grid
    if ga is not None and gb is not None and ga != gb:
        raise GridMismatchError("wedge of forms sampled on different grids")
    grid = ga or gb
    terms: dict[tuple, list] = {}
    for ia, ca in a.coefficients.items():
        for ib, cb in b.coefficients.items():
            if set(ia) & set(ib):
                continue
            joined = ia + ib
            terms.setdefault(tuple(sorted(joined)), []).append((float(_perm_sign(joined)), ca, cb))
    coeffs = {}
    for target, parts in sorted(terms.items()):
        if grid is None:
            coeffs[target] = LinearField(tuple((s, ProductField(ca, cb)) for s, ca, cb in parts))
        else:
            total = np.zeros(grid.shape)
            for s, ca, cb in parts:
                total += s * ca.sample(grid) * cb.sample(grid)
            coeffs[target] = SampledField(grid, total)
    return DifferentialForm(degree, a.dim, coeffs)


# ---------------------------------------------------------------------------
# Commutator


@dataclass(frozen=True, eq=False)
class CommutatorField:
    """K_ij = d p_j/dx_i - d p_i/dx_j sampled on a grid, stored for i < j."""

    grid: Grid
    components: Mapping[tuple, np.ndarray]
    considered: np.ndarray  # points entering max_abs
    max_abs: float
    argmax: tuple | None  # grid index of the maximum, None if nothing was considered

    def __getitem__(self, ij: tuple) -> np.ndarray:
        i, j = ij
        if i == j:
            return np.zeros(self.grid.shape)
        if i < j:
            return self.components[(i, j)]
        return -self.components[(j, i)]

    @property
    def location(self) -> tuple | None:
        return None if self.argmax is None else self.grid.point(self.argmax)


def _eroded(mask: np.ndarray) -> np.ndarray:
    """Points whose axis neighbours are all in ``mask`` (grid edges excluded)."""
    out = np.zeros_like(mask)
    inner = tuple(slice(1, -1) for _ in mask.shape)
    core = mask[inner].copy()
    for axis in range(mask.ndim):
        for shift in (0, 2):
            sl = [slice(1, -1)] * mask.ndim
            sl[axis] = slice(shift, mask.shape[axis] - 2 + shift)
            core &= mask[tuple(sl)]
    out[inner] = core
    return out


def commutator(
    theta: DifferentialForm,
    grid: Grid | None = None,
    *,
    valid: np.ndarray | None = None,
    interior_only: bool = True,
) -> CommutatorField:
    """Sample the commutator of a 1-form.

    ``valid`` restricts which grid points carry data; with ``interior_only``
    (the default) the maximum is taken only over points whose whole central
    stencil lies inside the valid region and away from the grid edge.
    Ties in the maximum go to the lowest row-major index.
    """
    if theta.degree != 1:
        raise DegreeError(f"commutator needs a 1-form, got degree {theta.degree}")
    if theta.is_sampled:
        if grid is not None and grid != theta.grid:
            raise GridMismatchError("grid differs from the sampled coefficients' grid")
        grid = theta.grid
    elif grid is None:
        raise FormError("analytic 1-forms need a sample grid")
    dtheta = exterior_derivative(theta)
    comps = dtheta.sample(grid)
    mask = np.ones(grid.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    considered = _eroded(mask) if interior_only else mask.copy()
    if comps:
        stacked = np.abs(np.stack(list(comps.values())))
        with np.errstate(invalid="ignore"):
            pointwise = np.max(stacked, axis=0)
        considered &= np.isfinite(pointwise)
    else:
        pointwise = np.zeros(grid.shape)
    if considered.any():
        flat = np.where(considered, pointwise, -np.inf).ravel()
        k = int(np.argmax(flat))
        max_abs = float(flat[k])
        argmax = tuple(int(i) for i in np.unravel_index(k, grid.shape))
    else:
        max_abs, argmax = float("nan"), None
    for v in comps.values():
        v.setflags(write=False)
    return CommutatorField(grid, comps, considered, max_abs, argmax)


# ---------------------------------------------------------------------------
# Line integrals


def _vertex_values(theta: DifferentialForm, pts: np.ndarray) -> np.ndarray:
    n = theta.dim
    if theta.is_sampled:
        grid = theta.grid
        lo, hi = np.array(grid.origin), np.array(grid.upper)
        tol = 1e-12 * np.maximum(1.0, np.abs(hi - lo))
        outside = np.any((pts < lo - tol) | (pts > hi + tol), axis=1)
        if outside.any():
            k = int(np.argmax(outside))
            raise FormError(f"path point {tuple(pts[k])} lies outside the sampled grid domain")
        clipped = np.clip(pts, lo, hi)
        cols = []
        for i in range(n):
            c = theta.coefficients.get((i,))
            if c is None:
                cols.append(np.zeros(len(pts)))
                continue
            interp = RegularGridInterpolator(grid.axes(), c.values, method="linear")
            cols.append(interp(clipped))
        return np.stack(cols, axis=1)
    coords = [pts[:, i] for i in range(n)]
    cols = []
    for i in range(n):
        c = theta.coefficients.get((i,))
        val = 0.0 if c is None else dual.value(c.evaluate(coords))
        cols.append(np.broadcast_to(np.asarray(val, dtype=float), (len(pts),)))
    return np.stack(cols, axis=1)


def line_integral(theta: DifferentialForm, path, closed: bool = False) -> float:
    """Integral of a 1-form along a polyline.

    Each segment contributes the average of the endpoint coefficients dotted
    with the segment vector. With ``closed`` the polyline is closed back to
    its first point unless it already ends there.
    """
    if theta.degree != 1:
        raise DegreeError("line integrals need a 1-form")
    pts = np.asarray(path, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != theta.dim:
        raise FormError(f"path must be an (m, {theta.dim}) array of points")
    if len(pts) < 2:
        raise FormError("path needs at least two points")
    if closed and not np.allclose(pts[0], pts[-1], rtol=0.0, atol=1e-14):
        pts = np.vstack([pts, pts[:1]])
    vals = _vertex_values(theta, pts)
    mid = 0.5 * (vals[1:] + vals[:-1])
    return float(np.sum(mid * np.diff(pts, axis=0)))


# ---------------------------------------------------------------------------
# Grid files: one JSON header line, then row-major samples.


def write_grid_file(path, grid: Grid, columns: Mapping[str, np.ndarray]) -> None:
    """Write named sample arrays; ``.bin`` gives raw little-endian doubles, anything else CSV."""
    path = Path(path)
    names = list(columns)
    data = np.stack([np.asarray(columns[k], dtype=float).reshape(grid.shape).ravel() for k in names], axis=1)
    header = {
        "axes": [{"origin": o, "spacing": h, "count": c} for o, h, c in zip(grid.origin, grid.spacing, grid.count)],
        "index_order": "row-major",
        "columns": names,
        "format": "binary-f8-le" if path.suffix == ".bin" else "csv",
    }
    head = "# " + json.dumps(header) + "\n"
    if path.suffix == ".bin":
        with open(path, "wb") as fh:
            fh.write(head.encode())
            fh.write(data.astype("<f8").tobytes())
        return
    with open(path, "w", newline="") as fh:
        fh.write(head)
        fh.write(",".join(names) + "\n")
        for row in data:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_grid_file(path) -> tuple[Grid, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode()
        if not first.startswith("#"):
            raise FormError(f"{path}: missing JSON header line")
        header = json.loads(first[1:])
        grid = Grid(
            [a["origin"] for a in header["axes"]],
            [a["spacing"] for a in header["axes"]],
            [a["count"] for a in header["axes"]],
        )
        names = header["columns"]
        if header.get("format") == "binary-f8-le":
            data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
        else:
            fh.readline()
            text = fh.read().decode()
            data = np.array([float(v) for v in text.replace("\n", ",").split(",") if v.strip()])
    npts = int(np.prod(grid.shape))
    if data.size != npts * len(names):
        raise FormError(f"{path}: expected {npts * len(names)} values, found {data.size}")
    data = data.reshape(npts, len(names))
    return grid, {name: data[:, k].reshape(grid.shape) for k, name in enumerate(names)}
