"""Fields reconstructed from ray fans and the closure diagnostics run on them.

The fan is a map from (surface parameters, s) to x. Each cell of that
parameter lattice is cut into simplices (Kuhn subdivision) and every grid
point inside a simplex gets (u, p) by linear (barycentric) interpolation of
the simplex's ray samples. A simplex whose orientation is reversed relative
to the fan at s = 0 has passed through a caustic; grid points it covers are
marked multivalued.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from charform.charsolve import RayFan, canonical_system, p_names, x_names
from charform.expr import Expression, evaluate
from charform.forms import CommutatorField, DifferentialForm, Grid, commutator, read_grid_file, write_grid_file

DEFAULT_THRESHOLD = 1e-2
TRANSVERSE_COSINE = 0.5
JUMP_FACTOR = 10.0

FUNCTION = "Function"
FUNCTIONAL = "Functional"
MULTIVALUED = "Multivalued"


@dataclass(frozen=True, eq=False)
class ReconstructedField:
    """(u, p) samples on a grid with multivalued and uncovered masks.

    Cells whose samples are not finite are moved into ``uncovered`` so that
    valid, multivalued and uncovered always partition the grid.
    """

    grid: Grid
    u: np.ndarray
    p: np.ndarray  # (n, *grid.shape)
    multivalued: np.ndarray
    uncovered: np.ndarray
    tangent: np.ndarray | None = None  # local ray direction, (n, *grid.shape)

    def __post_init__(self):
        shape = self.grid.shape
        u = np.broadcast_to(np.asarray(self.u, dtype=float), shape).copy()
        p = np.asarray(self.p, dtype=float).reshape((self.grid.ndim,) + shape).copy()
        multi = np.asarray(self.multivalued, dtype=bool).reshape(shape).copy()
        unc = np.asarray(self.uncovered, dtype=bool).reshape(shape).copy()
        bad = ~(np.isfinite(u) & np.all(np.isfinite(p), axis=0))
        unc |= bad & ~multi
        multi &= ~unc
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "multivalued", multi)
        object.__setattr__(self, "uncovered", unc)
        if self.tangent is not None:
            object.__setattr__(self, "tangent", np.asarray(self.tangent, dtype=float).reshape(p.shape))

    @property
    def valid(self) -> np.ndarray:
        return ~(self.multivalued | self.uncovered)

    @classmethod
    def from_arrays(cls, grid: Grid, p: Sequence[np.ndarray], u=None, tangent=None) -> "ReconstructedField":
        """Field given directly (no fan); all finite cells are valid."""
        shape = grid.shape
        u = np.zeros(shape) if u is None else u
        return cls(grid, u, np.stack([np.broadcast_to(c, shape) for c in p]), np.zeros(shape, bool), np.zeros(shape, bool), tangent)

    @classmethod
    def from_grid_file(cls, path) -> "ReconstructedField":
        grid, cols = read_grid_file(path)
        n = grid.ndim
        missing = [nm for nm in p_names(n) if nm not in cols]
        if missing:
            raise ValueError(f"{path}: field file needs columns {p_names(n)}; missing {missing}")
        shape = grid.shape
        mask = cols.get("mask", np.zeros(shape))
        tangent = None
        if all(f"t{i + 1}" in cols for i in range(n)):
            tangent = np.stack([cols[f"t{i + 1}"] for i in range(n)])
        return cls(
            grid, cols.get("u", np.zeros(shape)), np.stack([cols[nm] for nm in p_names(n)]),
            mask == 1, mask == 2, tangent,
        )

    def write(self, path) -> None:
        cols = {"u": self.u}
        cols.update({nm: self.p[i] for i, nm in enumerate(p_names(self.grid.ndim))})
        cols["mask"] = np.where(self.multivalued, 1.0, np.where(self.uncovered, 2.0, 0.0))
        if self.tangent is not None:
            cols.update({f"t{i + 1}": self.tangent[i] for i in range(self.grid.ndim)})
        write_grid_file(path, self.grid, cols)

    def mask_counts(self) -> dict:
        return {
            "valid": int(self.valid.sum()),
            "multivalued": int(self.multivalued.sum()),
            "uncovered": int(self.uncovered.sum()),
        }


def _kuhn_simplices(d: int) -> list[tuple[np.ndarray, int]]:
    """Vertex offsets (d+1, d) and permutation parity of the d! Kuhn simplices of a unit cube."""
    out = []
    for perm in itertools.permutations(range(d)):
        verts = [np.zeros(d, dtype=int)]
        for ax in perm:
            v = verts[-1].copy()
            v[ax] = 1
            verts.append(v)
        parity = 1
        for i in range(d):
            for j in range(i + 1, d):
                if perm[i] > perm[j]:
                    parity = -parity
        out.append((np.array(verts), parity))
    return out


def reconstruct_field(fan: RayFan, grid: Grid) -> ReconstructedField:
    """Sample a ray fan's (u, p) onto ``grid`` by piecewise-linear interpolation."""
    if fan.n_rays == 0:
        raise ValueError("cannot reconstruct a field from an empty fan")
    n = fan.n
    if grid.ndim != n:
        raise ValueError(f"{grid.ndim}-d grid for a fan in R^{n}")
    shape = grid.shape
    npts = int(np.prod(shape))
    lattice = tuple(fan.param_shape) + (fan.s.size,)
    if int(np.prod(fan.param_shape)) != fan.n_rays or any(c < 2 for c in lattice):
        nan = np.full(shape, np.nan)
        return ReconstructedField(grid, nan, np.full((n,) + shape, np.nan), np.zeros(shape, bool), np.ones(shape, bool))

    # lattice-indexed vertex data: x, values (u, p, dx/ds)
    X = fan.x.reshape(lattice + (n,))
    V = np.concatenate([fan.u[..., None], fan.p, fan.dxds], axis=-1).reshape(lattice + (1 + 2 * n,))
    cube_shape = tuple(c - 1 for c in lattice)
    corners = np.stack(np.meshgrid(*[np.arange(c) for c in cube_shape], indexing="ij"), axis=-1).reshape(-1, n)

    origin = np.array(grid.origin)
    spacing = np.array(grid.spacing)
    count = np.array(grid.count)
    strides = np.array([int(np.prod(shape[a + 1 :])) for a in range(n)])

    hits_pt, hits_simplex, hits_vals, hits_sign = [], [], [], []
    orient_ref = []
    sid0 = 0
    for offsets, parity in _kuhn_simplices(n):
        idx = corners[:, None, :] + offsets[None, :, :]  # (C, n+1, n)
        flat = tuple(idx[..., a] for a in range(n))
        P = X[flat]  # (C, n+1, n)
        W = V[flat]  # (C, n+1, nv)
        ok = np.all(np.isfinite(P), axis=(1, 2)) & np.all(np.isfinite(W), axis=(1, 2))
        edges = np.transpose(P[:, 1:] - P[:, :1], (0, 2, 1))  # columns are edge vectors
        with np.errstate(all="ignore"):
            det = np.where(ok, np.linalg.det(np.where(ok[:, None, None], edges, np.eye(n))), 0.0)
        scale = np.max(np.abs(edges), axis=(1, 2)) ** n if len(edges) else np.zeros(0)
        ok &= np.abs(det) > 1e-12 * np.where(scale > 0, scale, 1.0)
        sign = np.sign(det) * parity
        # orientation at s = 0 (first slab) is the reference
        first_slab = corners[:, -1] == 0
        orient_ref.append(sign[ok & first_slab])
        inv = np.zeros_like(edges)
        inv[ok] = np.linalg.inv(edges[ok])
        # grid index ranges covered by each simplex's bounding box
        lo = np.ceil((np.min(P, axis=1) - origin) / spacing - 1e-9)
        hi = np.floor((np.max(P, axis=1) - origin) / spacing + 1e-9)
        lo = np.clip(np.where(ok[:, None], lo, 0), 0, count - 1).astype(int)
        hi = np.clip(np.where(ok[:, None], hi, -1), -1, count - 1).astype(int)
        ext = np.maximum(hi - lo + 1, 0)
        ext[~ok] = 0
        per = np.prod(ext, axis=1)
        if per.sum() == 0:
            sid0 += len(corners)
            continue
        sid = np.repeat(np.arange(len(corners)), per)
        # enumerate points inside each bounding box
        local = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
        gidx = np.empty((sid.size, n), dtype=int)
        for a in range(n - 1, -1, -1):
            e = ext[sid, a]
            gidx[:, a] = lo[sid, a] + local % e
            local = local // e
        gpt = origin + gidx * spacing
        lam = np.einsum("kij,kj->ki", inv[sid], gpt - P[sid, 0])
        bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        inside = np.all(bary >= -1e-10, axis=1)
        sid, gidx, bary = sid[inside], gidx[inside], bary[inside]
        vals = np.einsum("kv,kvw->kw", bary, W[sid])
        hits_pt.append(gidx @ strides)
        hits_simplex.append(sid0 + sid)
        hits_vals.append(vals)
        hits_sign.append(sign[sid])
        sid0 += len(corners)

    ref = np.concatenate(orient_ref) if orient_ref else np.zeros(0)
    ref_sign = 1.0 if ref.size == 0 or np.sum(ref) >= 0 else -1.0

    u = np.full(npts, np.nan)
    vals_out = np.full((npts, 1 + 2 * n), np.nan)
    multi = np.zeros(npts, bool)
    covered = np.zeros(npts, bool)
    if hits_pt:
        pt = np.concatenate(hits_pt)
        sid = np.concatenate(hits_simplex)
        vals = np.concatenate(hits_vals)
        sgn = np.concatenate(hits_sign)
        order = np.lexsort((sid, pt))
        pt, sid, vals, sgn = pt[order], sid[order], vals[order], sgn[order]
        first = np.unique(pt, return_index=True)[1]
        vals_out[pt[first]] = vals[first]
        covered[pt] = True
        multi[pt[sgn != ref_sign]] = True
    u = vals_out[:, 0]
    p = vals_out[:, 1 : 1 + n].T
    tangent = vals_out[:, 1 + n :].T
    return ReconstructedField(
        grid, u.reshape(shape), p.reshape((n,) + shape), multi.reshape(shape),
        (~covered).reshape(shape), tangent.reshape((n,) + shape),
    )


@dataclass(frozen=True, eq=False)
class ClosureReport:
    commutator: CommutatorField
    max_abs_interior: float
    classification: str
    threshold: float
    caustics: list = field(default_factory=list)
    mask_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        loc = self.commutator.location
        return {
            "classification": self.classification,
            "max_abs_interior": self.max_abs_interior,
            "argmax": None if loc is None else list(loc),
            "threshold": self.threshold,
            "caustics": list(self.caustics),
            "mask_counts": dict(self.mask_counts),
        }


def classify(max_abs_interior: float, threshold: float, multivalued: bool) -> str:
    if multivalued:
        return MULTIVALUED
    return FUNCTION if max_abs_interior < threshold else FUNCTIONAL


def closure_report(field: ReconstructedField, threshold: float = DEFAULT_THRESHOLD, caustics=()) -> ClosureReport:
    """Commutator of theta = p_i dx^i over the valid region, and the verdict."""
    valid = field.valid
    if not valid.any():
        raise ValueError("closure report needs a non-empty valid region")
    p = np.where(valid[None], field.p, np.nan)
    theta = DifferentialForm.from_samples(field.grid, 1, {(i,): p[i] for i in range(field.grid.ndim)})
    K = commutator(theta, valid=valid, interior_only=True)
    if K.argmax is None:
        raise ValueError("valid region has no interior points for the commutator stencil")
    verdict = classify(K.max_abs, threshold, bool(field.multivalued.any()))
    return ClosureReport(K, K.max_abs, verdict, float(threshold), list(caustics), field.mask_counts())


def _require_canonical(fan: RayFan, E: Expression | None):
    E = E if E is not None else fan.hamiltonian
    if not fan.canonical or E is None:
        raise ValueError("fan not canonical: it was not produced from a Hamiltonian")
    return E


def poincare_check(fan: RayFan, E: Expression | None = None) -> float:
    """Max |du/dt - (-E + p_j dx_j/dt)| over all checkpoints.

    Both rates come from Hamilton's equations at the stored states, so the
    defect is roundoff unless the action transport is miswired.
    """
    E = _require_canonical(fan, E)
    n = fan.n
    system = canonical_system(E, n - 1)
    x = np.moveaxis(fan.x, -1, 0)
    p = np.moveaxis(fan.p, -1, 0)
    dx, du, _ = system.rhs(x, fan.u, p)
    Ev = np.broadcast_to(evaluate(E, dict(zip(x_names(n), x)) | dict(zip(p_names(n)[1:], p[1:]))).value, fan.u.shape)
    defect = np.abs(du - (-Ev + np.sum(p[1:] * dx[1:], axis=0)))
    defect = defect[np.isfinite(defect)]
    return float(defect.max()) if defect.size else 0.0


def action_integral(fan: RayFan, E: Expression | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per ray: (u(end) - u(0), trapezoid integral of p_j dx_j/dt - E along the checkpoints)."""
    E = _require_canonical(fan, E)
    n = fan.n
    x = np.moveaxis(fan.x, -1, 0)
    p = np.moveaxis(fan.p, -1, 0)
    Ev = np.broadcast_to(evaluate(E, dict(zip(x_names(n), x)) | dict(zip(p_names(n)[1:], p[1:]))).value, fan.u.shape)
    lagrangian = np.sum(p[1:] * np.moveaxis(fan.dxds, -1, 0)[1:], axis=0) - Ev
    return fan.u[:, -1] - fan.u[:, 0], np.trapezoid(lagrangian, fan.s, axis=1)


@dataclass(frozen=True)
class DiscontinuityFlag:
    index: tuple
    point: tuple
    jump: float
    direction: tuple  # grid offset across which the jump was measured
    cosine: float  # |cos| between that offset and the local ray tangent


def _half_offsets(n: int) -> list[tuple]:
    """One representative of each +/- pair of neighbour offsets in {-1,0,1}^n."""
    out = []
    for off in itertools.product((-1, 0, 1), repeat=n):
        if any(off) and next(v for v in off if v) > 0:
            out.append(off)
    return out


def discontinuity_scan(
    field: ReconstructedField,
    fan: RayFan | None = None,
    factor: float = JUMP_FACTOR,
    max_cosine: float = TRANSVERSE_COSINE,
) -> list[DiscontinuityFlag]:
    """Cells where p jumps across the local ray direction.

    Jumps are measured between neighbouring valid cells (all 3^n - 1
    neighbour offsets). A jump counts when it exceeds ``factor`` times the
    median neighbour variation and its offset is transverse to the local ray
    tangent, |cos| < ``max_cosine``. Each flagged cell keeps its largest jump.
    """
    grid = field.grid
    n = grid.ndim
    valid = field.valid
    if not valid.any():
        return []
    tangent = field.tangent
    if tangent is None or not np.all(np.isfinite(tangent[:, valid])):
        if fan is None:
            raise ValueError("field has no ray tangents; pass the fan it came from")
        tangent = _tangent_from_fan(fan, grid)
    spacing = np.array(grid.spacing)
    shape = grid.shape
    jumps, pairs = [], []
    for off in _half_offsets(n):
        a_sl, b_sl = [], []
        for o, c in zip(off, shape):
            a_sl.append(slice(max(0, -o), c - max(0, o)))
            b_sl.append(slice(max(0, o), c + min(0, o)))
        a_sl, b_sl = tuple(a_sl), tuple(b_sl)
        ok = valid[a_sl] & valid[b_sl]
        dp = np.linalg.norm(field.p[(slice(None),) + b_sl] - field.p[(slice(None),) + a_sl], axis=0)
        vec = np.array(off) * spacing
        vec = vec / np.linalg.norm(vec)
        jumps.append(dp[ok])
        pairs.append((off, a_sl, b_sl, ok, dp, vec))
    allj = np.concatenate(jumps)
    if allj.size == 0:
        return []
    scale = 1.0 + float(np.max(np.abs(field.p[:, valid])))
    limit = factor * max(float(np.median(allj)), 1e-9 * scale)
    best: dict[tuple, DiscontinuityFlag] = {}
    idx_grid = np.indices(shape)
    for off, a_sl, b_sl, ok, dp, vec in pairs:
        big = ok & (dp > limit)
        if not big.any():
            continue
        for sl in (a_sl, b_sl):
            tan = tangent[(slice(None),) + sl][:, big]
            tnorm = np.linalg.norm(tan, axis=0)
            with np.errstate(all="ignore"):
                cos = np.abs(np.einsum("i,ik->k", vec, tan)) / tnorm
            cells = idx_grid[(slice(None),) + sl][:, big].T
            for cell, c, j in zip(cells, cos, dp[big]):
                if not c < max_cosine:
                    continue
                key = tuple(int(v) for v in cell)
                if key not in best or j > best[key].jump:
                    best[key] = DiscontinuityFlag(key, grid.point(key), float(j), off, float(c))
    return [best[k] for k in sorted(best)]


def _tangent_from_fan(fan: RayFan, grid: Grid) -> np.ndarray:
    pts = fan.x.reshape(-1, fan.n)
    tan = fan.dxds.reshape(-1, fan.n)
    ok = np.all(np.isfinite(pts), axis=1) & np.all(np.isfinite(tan), axis=1)
    tree = cKDTree(pts[ok])
    mesh = np.stack([m.ravel() for m in grid.mesh()], axis=1)
    _, k = tree.query(mesh)
    return tan[ok][k].T.reshape((fan.n,) + grid.shape)
