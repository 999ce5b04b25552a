"""Characteristic strips for first-order PDEs F(x, u, p) = 0.

Along a characteristic the strip (x, u, p) obeys

    dx_i/ds = F_{p_i}
    dp_i/ds = -(F_{x_i} + p_i F_u)
    du/ds   = sum_i p_i F_{p_i}

which keeps F constant and du = p . dx. For Hamilton-Jacobi problems
``p1 + E(t, x, p) = 0`` the canonical form uses t = x1 as the parameter:
dx_j/dt = E_{p_j}, dp_j/dt = -E_{x_j}, du/dt = -E + sum_j p_j E_{p_j}.

Rays are integrated together as arrays (one column per ray) with classical
fixed-step RK4. The ray-fan Jacobian det[dx/ds, dx/dr_1, ...] is formed by
finite differences between neighbouring rays; its zeros are caustics.
"""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from charform.expr import Expression, eval_with_gradient, evaluate, parse

# Rays are split into fixed-size chunks so results do not depend on the thread count.
CHUNK = 256
CAUSTIC_FLOOR = 1e-10
TRANSVERSALITY_MIN = 1e-10


class ProblemError(ValueError):
    """The PDE or its initial data is malformed."""


class SolverError(RuntimeError):
    pass


class InconsistentInitialStripError(SolverError):
    pass


class CharacteristicManifoldError(SolverError):
    pass


class NoSurvivingRaysError(SolverError):
    pass


def x_names(n: int) -> list[str]:
    return [f"x{i + 1}" for i in range(n)]


def p_names(n: int) -> list[str]:
    return [f"p{i + 1}" for i in range(n)]


def r_names(m: int) -> list[str]:
    return [f"r{a + 1}" for a in range(m)]


def default_aliases(n: int, hamiltonian: bool = False) -> dict[str, str]:
    """Short names accepted in expressions: ``r`` for a single surface
    parameter, ``t`` for x1 in HJ problems, and ``x``/``p`` for x2/p2 when
    there is one space dimension."""
    aliases = {}
    if n - 1 == 1:
        aliases["r"] = "r1"
    if hamiltonian:
        aliases["t"] = "x1"
        if n == 2:
            aliases.update({"x": "x2", "q": "x2", "p": "p2"})
    return aliases


def parse_with_aliases(text, aliases: Mapping[str, str]) -> Expression:
    e = text if isinstance(text, Expression) else parse(str(text))
    return e.rename(aliases) if aliases else e


@dataclass(frozen=True)
class InitialData:
    """An (n-1)-surface x(r), data u0(r), optional momenta p(r), sampled on a
    tensor grid of parameters r1..r_{n-1} (row-major, last parameter fastest)."""

    position: tuple
    u0: Expression
    ranges: tuple
    samples: tuple
    momenta: tuple | None = None
    branch: int | None = None
    bracket: tuple = (-100.0, 100.0)
    bracket_points: int = 4001

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple((float(a), float(b)) for a, b in self.ranges))
        object.__setattr__(self, "samples", tuple(int(c) for c in self.samples))
        if len(self.ranges) != len(self.samples):
            raise ProblemError("one range and one sample count per surface parameter")
        if any(not b > a for a, b in self.ranges):
            raise ProblemError("surface parameter ranges must be non-degenerate (lo < hi)")
        if any(c < 1 for c in self.samples):
            raise ProblemError("sample counts must be positive")
        lo, hi = self.bracket
        if not hi > lo:
            raise ProblemError("momentum bracket must satisfy lo < hi")

    @property
    def n_params(self) -> int:
        return len(self.ranges)

    def parameter_axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, c) for (a, b), c in zip(self.ranges, self.samples)]

    def parameter_samples(self) -> np.ndarray:
        axes = self.parameter_axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class PdeProblem:
    n: int
    F: Expression
    initial: InitialData
    h: float = 0.01
    s_max: float = 1.0
    # Set for t-resolved Hamilton-Jacobi problems, F = p1 + E.
    hamiltonian: Expression | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ProblemError("need at least two independent variables")
        allowed = set(x_names(self.n)) | set(p_names(self.n)) | {"u"}
        extra = set(self.F.variables) - allowed
        if extra:
            raise ProblemError(f"equation uses undeclared variables {sorted(extra)}")
        if len(self.initial.position) != self.n:
            raise ProblemError(f"initial surface needs {self.n} coordinate expressions")
        if self.initial.n_params != self.n - 1:
            raise ProblemError(f"initial surface needs {self.n - 1} parameters")
        if self.initial.momenta is not None and len(self.initial.momenta) != self.n:
            raise ProblemError(f"initial momenta need {self.n} expressions")
        params = set(r_names(self.n - 1))
        for e in list(self.initial.position) + [self.initial.u0] + list(self.initial.momenta or ()):
            extra = set(e.variables) - params
            if extra:
                raise ProblemError(f"initial data uses {sorted(extra)}; parameters are {sorted(params)}")
        if not self.h > 0 or not self.s_max > 0:
            raise ProblemError("step h and s_max must be positive")

    @classmethod
    def from_hamiltonian(cls, E: Expression, n: int, initial: InitialData, **kw) -> "PdeProblem":
        _check_hamiltonian(E, n)
        F = Expression.from_node(_plus_p1(E))
        return cls(n, F, initial, hamiltonian=E, **kw)

    @property
    def hj_mode(self) -> bool:
        return self.hamiltonian is not None


def _plus_p1(E: Expression):
    from charform.expr import BinOp, Var

    return BinOp("+", Var("p1"), E.root)


def _check_hamiltonian(E: Expression, n: int) -> None:
    if "p1" in E.variables:
        raise ProblemError("malformed Hamilton-Jacobi problem: E must not depend on p1 (dF/dp1 = 1)")
    if "u" in E.variables:
        raise ProblemError("malformed Hamilton-Jacobi problem: E must not depend on u")
    allowed = set(x_names(n)) | set(p_names(n)[1:])
    extra = set(E.variables) - allowed
    if extra:
        raise ProblemError(f"Hamiltonian uses undeclared variables {sorted(extra)}")


# ---------------------------------------------------------------------------
# Characteristic systems


@dataclass(frozen=True)
class CharacteristicSystem:
    """Right-hand side of the strip equations.

    State arrays: x and p have shape (n, ...), u has shape (...).
    """

    n: int
    F: Expression
    hamiltonian: Expression | None = None

    @property
    def canonical(self) -> bool:
        return self.hamiltonian is not None

    def _bindings(self, x, u, p) -> dict:
        b = dict(zip(x_names(self.n), x))
        b.update(zip(p_names(self.n), p))
        b["u"] = u
        return b

    def residual(self, x, u, p):
        return evaluate(self.F, self._bindings(x, u, p)).value

    def rhs(self, x, u, p):
        """Return (dx/ds, du/ds, dp/ds)."""
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.canonical:
            return self._canonical_rhs(x, u, p)
        n = self.n
        names = x_names(n) + ["u"] + p_names(n)
        _, g = eval_with_gradient(self.F, self._bindings(x, u, p), names)
        g = np.broadcast_to(g, (2 * n + 1,) + u.shape)
        Fx, Fu, Fp = g[:n], g[n], g[n + 1 :]
        dx = np.array(Fp)
        dp = -(Fx + p * Fu)
        du = np.sum(p * Fp, axis=0)
        return dx, du, dp

    def _canonical_rhs(self, x, u, p):
        n = self.n
        names = x_names(n) + p_names(n)[1:]
        bind = dict(zip(x_names(n), x))
        bind.update(zip(p_names(n)[1:], p[1:]))
        E, g = eval_with_gradient(self.hamiltonian, bind, names)
        g = np.broadcast_to(g, (2 * n - 1,) + u.shape)
        E = np.broadcast_to(E, u.shape)
        Ex, Ep = g[:n], g[n:]
        dx = np.empty_like(x)
        dx[0] = 1.0
        dx[1:] = Ep
        dp = -np.array(Ex)
        du = -E + np.sum(p[1:] * Ep, axis=0)
        return dx, du, dp


def derive_characteristic_system(prob: PdeProblem) -> CharacteristicSystem:
    """Strip equations from F; raises if F does not involve any momentum."""
    if not set(p_names(prob.n)) & set(prob.F.variables):
        raise ProblemError("F does not depend on any p_i: not a first-order PDE in the momenta")
    return CharacteristicSystem(prob.n, prob.F)


def canonical_system(E: Expression, n_space: int) -> CharacteristicSystem:
    """Hamilton's equations for u_t + E(t, x2..xn, p2..pn) = 0, n = n_space + 1."""
    n = n_space + 1
    _check_hamiltonian(E, n)
    return CharacteristicSystem(n, Expression.from_node(_plus_p1(E)), hamiltonian=E)


def system_for(prob: PdeProblem) -> CharacteristicSystem:
    if prob.hj_mode:
        return canonical_system(prob.hamiltonian, prob.n - 1)
    return derive_characteristic_system(prob)


# ---------------------------------------------------------------------------
# Initial strips


@dataclass(frozen=True)
class CharacteristicStrip:
    s: float
    x: np.ndarray
    u: float
    p: np.ndarray
    jacobian: float
    F_residual: float


@dataclass(frozen=True, eq=False)
class StripSet:
    """Initial strips of one branch, one column per parameter sample."""

    params: np.ndarray  # (N, m)
    param_shape: tuple
    x: np.ndarray  # (n, N)
    u: np.ndarray  # (N,)
    p: np.ndarray  # (n, N)
    branch: int = 0

    @property
    def n_rays(self) -> int:
        return self.u.shape[0]

    def strips(self, system: CharacteristicSystem) -> list[CharacteristicStrip]:
        res = np.broadcast_to(system.residual(self.x, self.u, self.p), self.u.shape)
        return [
            CharacteristicStrip(0.0, self.x[:, i].copy(), float(self.u[i]), self.p[:, i].copy(), float("nan"), float(res[i]))
            for i in range(self.n_rays)
        ]


def _eval_on(exprs: Sequence[Expression], names: list[str], params: np.ndarray):
    """Values (k, N) and parameter derivatives (k, m, N) of surface expressions."""
    bind = {nm: params[:, a] for a, nm in enumerate(names)}
    vals, grads = [], []
    for e in exprs:
        v, g = eval_with_gradient(e, bind, names)
        vals.append(np.broadcast_to(v, (params.shape[0],)))
        grads.append(np.broadcast_to(g, (len(names), params.shape[0])))
    return np.array(vals), np.array(grads)


def _normal(T: np.ndarray) -> np.ndarray:
    """Generalized cross product of the m = n-1 tangent rows; T has shape (N, m, n)."""
    N, m, n = T.shape
    nu = np.empty((N, n))
    for i in range(n):
        M = np.concatenate([T, np.broadcast_to(np.eye(n)[i], (N, 1, n))], axis=1)
        nu[:, i] = np.linalg.det(M)
    return nu


def _bracket_roots(g, lam: np.ndarray, N: int):
    """Sign-change roots of g per sample by vectorized bisection.

    ``g(idx, lam)`` evaluates the residual for sample indices ``idx`` at
    momentum offsets ``lam`` (equal-length 1-d arrays).
    """
    block = max(1, (1 << 18) // lam.size)
    vals = np.empty((N, lam.size))
    for a in range(0, N, block):
        b = min(N, a + block)
        idx = np.repeat(np.arange(a, b), lam.size)
        vals[a:b] = g(idx, np.tile(lam, b - a)).reshape(b - a, lam.size)
    with np.errstate(invalid="ignore"):
        exact = vals == 0.0
        change = (vals[:, :-1] * vals[:, 1:]) < 0
    rows, cols = np.nonzero(change)
    lo, hi = lam[cols].copy(), lam[cols + 1].copy()
    glo = vals[rows, cols]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if not np.any((mid > lo) & (mid < hi)):
            break
        gm = g(rows, mid)
        same = np.sign(gm) == np.sign(glo)
        lo, glo, hi = np.where(same, mid, lo), np.where(same, gm, glo), np.where(same, hi, mid)
    roots = [[] for _ in range(N)]
    for i, r in zip(rows, 0.5 * (lo + hi)):
        roots[i].append(float(r))
    for i, k in zip(*np.nonzero(exact)):
        roots[i].append(float(lam[k]))
    return [sorted(r) for r in roots]


def initialize_strips(prob: PdeProblem) -> list[StripSet]:
    """Initial strips on the data surface, one StripSet per momentum branch.

    Tangential momenta follow from du0/dr_a = p . dx/dr_a; the normal
    component is solved from F = 0. In HJ mode on a surface t = const the
    spatial momenta come from the tangential conditions and p1 = -E.
    """
    init = prob.initial
    n, m = prob.n, prob.n - 1
    names = r_names(m)
    params = init.parameter_samples()
    N = params.shape[0]
    X, DX = _eval_on(init.position, names, params)  # (n, N), (n, m, N)
    U, DU = _eval_on([init.u0], names, params)
    U, DU = U[0], DU[0]  # (N,), (m, N)
    T = np.transpose(DX, (2, 1, 0))  # (N, m, n): rows are dx/dr_a
    b = DU.T  # (N, m)
    system = system_for(prob)
    shape = tuple(init.samples)

    def finish(P: np.ndarray, branch: int) -> StripSet:
        _check_transversality(prob, X, U, P, T, params)
        return StripSet(params, shape, X.copy(), U.copy(), P, branch)

    if init.momenta is not None:
        P, _ = _eval_on(init.momenta, names, params)
        res = np.abs(np.broadcast_to(system.residual(X, U, P), (N,)))
        tang = np.abs(np.einsum("nai,in->na", T, P) - b)
        if np.nanmax(res) > 1e-8 or np.nanmax(tang) > 1e-8:
            raise InconsistentInitialStripError(
                "initial strip inconsistent: given momenta violate F = 0 or the tangential condition"
            )
        return [finish(P, 0)]

    if prob.hj_mode and not np.any(DX[0]):
        Ts = T[:, :, 1:]  # (N, m, m)
        try:
            ps = np.linalg.solve(Ts, b[..., None])[..., 0]  # (N, m)
        except np.linalg.LinAlgError:
            raise CharacteristicManifoldError("characteristic initial manifold: surface tangents are degenerate") from None
        bind = dict(zip(x_names(n), X))
        bind.update(zip(p_names(n)[1:], ps.T))
        E = np.broadcast_to(evaluate(prob.hamiltonian, bind).value, (N,))
        P = np.vstack([-E[None, :], ps.T])
        return [finish(P, 0)]

    nu = _normal(T)
    norm = np.linalg.norm(nu, axis=1)
    if np.any(norm == 0):
        raise CharacteristicManifoldError("characteristic initial manifold: surface parameterization is degenerate")
    nu = nu / norm[:, None]
    G = T @ np.transpose(T, (0, 2, 1))
    ptan = np.einsum("nai,na->ni", T, np.linalg.solve(G, b[..., None])[..., 0])  # (N, n)

    def momenta(idx, lam):
        return ptan[idx].T + nu[idx].T * lam

    def g(idx, lam):
        return np.broadcast_to(system.residual(X[:, idx], U[idx], momenta(idx, lam)), lam.shape)

    def slope(idx, lam):
        bind = dict(zip(x_names(n), X[:, idx]))
        bind.update(zip(p_names(n), momenta(idx, lam)))
        bind["u"] = U[idx]
        _, grad = eval_with_gradient(system.F, bind, p_names(n))
        return np.sum(np.broadcast_to(grad, (n,) + lam.shape) * nu[idx].T, axis=0)

    lam_grid = np.linspace(init.bracket[0], init.bracket[1], init.bracket_points)
    roots = _bracket_roots(g, lam_grid, N)
    counts = np.array([len(r) for r in roots])
    if np.any(counts == 0):
        k = int(np.argmax(counts == 0))
        raise InconsistentInitialStripError(
            f"initial strip inconsistent: F = 0 has no real root in the momentum bracket {tuple(init.bracket)} "
            f"at surface parameter {tuple(float(v) for v in params[k])}"
        )
    if np.any(counts != counts[0]):
        raise SolverError("number of momentum branches varies along the initial manifold")
    lam = np.array(roots)  # (N, B)
    lam = _newton_polish(g, slope, lam)
    branches = range(lam.shape[1]) if init.branch is None else [init.branch]
    out = []
    for k in branches:
        if not 0 <= k < lam.shape[1]:
            raise ProblemError(f"branch {k} requested but only {lam.shape[1]} branch(es) exist")
        P = (ptan + nu * lam[:, k : k + 1]).T
        out.append(finish(np.ascontiguousarray(P), k))
    return out


def _newton_polish(g, slope, lam: np.ndarray, steps: int = 4) -> np.ndarray:
    """Newton steps on bisection roots; a step is kept only if |F| drops."""
    N, B = lam.shape
    idx = np.repeat(np.arange(N), B)
    flat = lam.ravel().copy()
    for _ in range(steps):
        val = g(idx, flat)
        d = slope(idx, flat)
        with np.errstate(all="ignore"):
            cand = np.where(d != 0, flat - val / d, flat)
        better = np.abs(g(idx, cand)) < np.abs(val)
        flat = np.where(better, cand, flat)
    return flat.reshape(N, B)


def _check_transversality(prob, X, U, P, T, params) -> None:
    system = CharacteristicSystem(prob.n, prob.F)
    dx, _, _ = system.rhs(X, U, P)  # dx/ds = F_p
    M = np.concatenate([T, dx.T[:, None, :]], axis=1)
    # non-finite strips are left to the integrator, which truncates them
    finite = np.all(np.isfinite(M), axis=(1, 2))
    det = np.full(M.shape[0], np.nan)
    det[finite] = np.linalg.det(M[finite])
    bad = finite & (np.abs(det) < TRANSVERSALITY_MIN)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise CharacteristicManifoldError(
            f"characteristic initial manifold: transversality determinant {det[k]:.3g} "
            f"at surface parameter {tuple(float(v) for v in params[k])}"
        )


# ---------------------------------------------------------------------------
# Integration


@dataclass(frozen=True, eq=False)
class RayFan:
    """Rays of one branch stored at uniform checkpoints s_k = k h.

    Arrays are indexed ray first: ``x[i, k, :]`` is ray i at checkpoint k.
    ``jacobian`` is det[dx/ds, dx/dr_1, ..., dx/dr_m], NaN where a
    neighbour is missing. ``truncated_at[i]`` is the first checkpoint with a
    non-finite state (-1 for rays that reached s_max).
    """

    n: int
    s: np.ndarray
    x: np.ndarray
    u: np.ndarray
    p: np.ndarray
    dxds: np.ndarray
    jacobian: np.ndarray
    residual: np.ndarray
    params: np.ndarray
    param_shape: tuple
    truncated_at: np.ndarray
    branch: int = 0
    hamiltonian: Expression | None = None

    @property
    def n_rays(self) -> int:
        return self.x.shape[0]

    @property
    def h(self) -> float:
        return float(self.s[1] - self.s[0]) if self.s.size > 1 else 0.0

    @property
    def canonical(self) -> bool:
        return self.hamiltonian is not None

    def strip(self, ray: int, k: int) -> CharacteristicStrip:
        return CharacteristicStrip(
            float(self.s[k]), self.x[ray, k].copy(), float(self.u[ray, k]), self.p[ray, k].copy(),
            float(self.jacobian[ray, k]), float(self.residual[ray, k]),
        )

    def subset(self, rays: Sequence[int]) -> "RayFan":
        """Fan restricted to some rays (kept in order); Jacobians are recomputed."""
        rays = np.asarray(rays, dtype=int)
        fan = RayFan(
            self.n, self.s, self.x[rays], self.u[rays], self.p[rays], self.dxds[rays],
            np.full((rays.size, self.s.size), np.nan), self.residual[rays], self.params[rays],
            (rays.size,), self.truncated_at[rays],
            self.branch, self.hamiltonian,
        )
        if len(self.param_shape) == 1 and rays.size >= 2:
            return _with_jacobian(fan)
        return fan

    def every(self, stride: int) -> "RayFan":
        """Fan keeping every ``stride``-th checkpoint."""
        sl = slice(None, None, stride)
        return RayFan(
            self.n, self.s[sl], self.x[:, sl], self.u[:, sl], self.p[:, sl], self.dxds[:, sl],
            self.jacobian[:, sl], self.residual[:, sl], self.params, self.param_shape,
            np.where(self.truncated_at >= 0, -(-self.truncated_at // stride), -1), self.branch, self.hamiltonian,
        )

    def columns(self) -> list[str]:
        return ["ray", "s"] + x_names(self.n) + ["u"] + p_names(self.n) + ["jacobian", "F_residual"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for i in range(self.n_rays):
                for k in range(self.s.size):
                    row = [str(i), _fmt(self.s[k])]
                    row += [_fmt(v) for v in self.x[i, k]]
                    row.append(_fmt(self.u[i, k]))
                    row += [_fmt(v) for v in self.p[i, k]]
                    row += [_fmt(self.jacobian[i, k]), _fmt(self.residual[i, k])]
                    w.writerow(row)

    def write_jacobian_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ray", "s", "jacobian"])
            for i in range(self.n_rays):
                for k in range(self.s.size):
                    w.writerow([str(i), _fmt(self.s[k]), _fmt(self.jacobian[i, k])])

    def max_residual(self) -> float:
        r = np.abs(self.residual)
        return float(np.max(r[np.isfinite(r)])) if np.isfinite(r).any() else float("nan")


def _fmt(v) -> str:
    return format(float(v), ".17g")


def _rk4_chunk(system: CharacteristicSystem, y0: np.ndarray, h: float, steps: int) -> np.ndarray:
    n = system.n

    def f(y):
        dx, du, dp = system.rhs(y[:n], y[n], y[n + 1 :])
        return np.concatenate([dx, du[None], dp])

    out = np.empty((steps + 1,) + y0.shape)
    out[0] = y = y0
    with np.errstate(all="ignore"):
        for k in range(steps):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[k + 1] = y
    return out


def integrate(
    system: CharacteristicSystem,
    strips: StripSet,
    h: float,
    s_max: float,
    threads: int = 1,
) -> RayFan:
    """Fixed-step RK4 from s = 0 to the first checkpoint at or past ``s_max``."""
    if not h > 0 or not s_max > 0:
        raise ProblemError("step h and s_max must be positive")
    n = system.n
    steps = int(np.ceil(s_max / h - 1e-9))
    y0 = np.concatenate([strips.x, strips.u[None], strips.p])  # (2n+1, N)
    N = y0.shape[1]
    chunks = [slice(a, min(a + CHUNK, N)) for a in range(0, N, CHUNK)]
    run = lambda sl: _rk4_chunk(system, y0[:, sl], h, steps)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    Y = np.concatenate(parts, axis=2)  # (K, 2n+1, N)

    bad = ~np.all(np.isfinite(Y), axis=1)  # (K, N)
    truncated_at = np.where(bad.any(axis=0), np.argmax(bad, axis=0), -1)
    if np.all(truncated_at >= 0):
        raise NoSurvivingRaysError("every ray hit a non-finite state before s_max")
    K = steps + 1
    alive = np.arange(K)[:, None] < np.where(truncated_at >= 0, truncated_at, K)[None, :]
    Y = np.where(alive[:, None, :], Y, np.nan)

    s = np.arange(K) * h
    x = np.transpose(Y[:, :n], (2, 0, 1))
    u = Y[:, n].T
    p = np.transpose(Y[:, n + 1 :], (2, 0, 1))
    with np.errstate(all="ignore"):
        Xs, Ps = np.moveaxis(Y[:, :n], 1, 0), np.moveaxis(Y[:, n + 1 :], 1, 0)
        dx, _, _ = system.rhs(Xs, Y[:, n], Ps)  # (n, K, N)
        res = np.broadcast_to(system.residual(Xs, Y[:, n], Ps), (K, N))
    fan = RayFan(
        n, s, np.ascontiguousarray(x), np.ascontiguousarray(u), np.ascontiguousarray(p),
        np.ascontiguousarray(np.transpose(dx, (2, 1, 0))), np.full((N, K), np.nan),
        np.ascontiguousarray(res.T), strips.params, tuple(strips.param_shape), truncated_at,
        strips.branch, system.hamiltonian,
    )
    return _with_jacobian(fan)


def _with_jacobian(fan: RayFan) -> RayFan:
    m = fan.n - 1
    shape = tuple(fan.param_shape)
    if any(c < 2 for c in shape) or int(np.prod(shape)) != fan.n_rays:
        return fan
    K = fan.s.size
    X = fan.x.reshape(shape + (K, fan.n))
    P = fan.params.reshape(shape + (m,))
    cols = [fan.dxds]
    for a in range(m):
        # parameter values along axis a (tensor grid: same for every other index)
        axis_vals = np.moveaxis(P[..., a], a, 0).reshape(shape[a], -1)[:, 0]
        g = np.gradient(X, axis_vals, axis=a, edge_order=2 if shape[a] >= 3 else 1)
        cols.append(g.reshape(fan.n_rays, K, fan.n))
    M = np.stack(cols, axis=2)  # (N, K, n, n): rows dx/ds, dx/dr_a
    with np.errstate(all="ignore"):
        J = np.full((fan.n_rays, K), np.nan)
        ok = np.all(np.isfinite(M), axis=(2, 3))
        J[ok] = np.linalg.det(M[ok])
    return RayFan(
        fan.n, fan.s, fan.x, fan.u, fan.p, fan.dxds, J, fan.residual, fan.params,
        fan.param_shape, fan.truncated_at, fan.branch, fan.hamiltonian,
    )


def solve(prob: PdeProblem, threads: int = 1) -> list[RayFan]:
    """Initialize strips and integrate every branch."""
    system = system_for(prob)
    return [integrate(system, st, prob.h, prob.s_max, threads=threads) for st in initialize_strips(prob)]


# ---------------------------------------------------------------------------
# Caustics


@dataclass(frozen=True)
class CausticRecord:
    ray: int
    s_lo: float
    s_hi: float
    s_star: float


def detect_caustics(fan: RayFan, floor: float = CAUSTIC_FLOOR) -> list[CausticRecord]:
    """Checkpoint brackets where the fan Jacobian changes sign or collapses.

    A caustic is reported where J changes sign between checkpoints, or where
    |J| falls below ``floor`` times its initial magnitude; a run of
    collapsed checkpoints counts once. s* comes from linear interpolation
    of J across the bracket (or the smallest |J| if J does not change sign).
    """
    if fan.n_rays < 3:
        raise ValueError("caustic detection needs at least three rays")
    out = []
    s = fan.s
    for i in range(fan.n_rays):
        J = fan.jacobian[i]
        finite = np.isfinite(J)
        if not finite.any():
            continue
        J0 = abs(J[np.argmax(finite)])
        tiny = np.abs(J) < floor * J0 if J0 > 0 else np.abs(J) == 0
        k = 0
        K = len(J)
        while k < K - 1:
            if not finite[k]:
                k += 1
                continue
            if tiny[k]:
                a = k
                while k < K and finite[k] and tiny[k]:
                    k += 1
                b = k  # first checkpoint after the run (may be K)
                lo = a - 1 if a > 0 else a
                hi = b if b < K and finite[b] else b - 1
                if lo != a and hi != b - 1 and np.sign(J[lo]) != np.sign(J[hi]):
                    s_star = _interp_zero(s[lo], s[hi], J[lo], J[hi])
                else:
                    run = np.arange(a, b)
                    s_star = float(s[run[np.argmin(np.abs(J[run]))]])
                out.append(CausticRecord(i, float(s[lo]), float(s[hi]), s_star))
                continue
            if finite[k + 1] and not tiny[k + 1] and np.sign(J[k]) != np.sign(J[k + 1]):
                out.append(CausticRecord(i, float(s[k]), float(s[k + 1]), _interp_zero(s[k], s[k + 1], J[k], J[k + 1])))
            k += 1
    return out


def _interp_zero(s0, s1, j0, j1) -> float:
    return float(s0 + (s1 - s0) * j0 / (j0 - j1))


def group_caustics(records: Sequence[CausticRecord], h: float, window: float = 10.0) -> list[dict]:
    """Merge records on consecutive rays whose s* differ by at most ``window`` steps."""
    by_ray: dict[int, list[CausticRecord]] = {}
    for r in records:
        by_ray.setdefault(r.ray, []).append(r)
    groups: list[list[CausticRecord]] = []
    open_groups: list[list[CausticRecord]] = []
    for ray in sorted(by_ray):
        still_open = []
        for rec in by_ray[ray]:
            home = None
            for g in open_groups:
                last = g[-1]
                if last.ray == ray - 1 and abs(last.s_star - rec.s_star) <= window * h and g not in still_open:
                    home = g
                    break
            if home is None:
                home = []
                groups.append(home)
            home.append(rec)
            still_open.append(home)
        open_groups = still_open
    out = []
    for g in groups:
        stars = np.array([r.s_star for r in g])
        out.append({
            "rays": [g[0].ray, g[-1].ray],
            "s_star": float(np.median(stars)),
            "s_star_min": float(stars.min()),
            "s_star_max": float(stars.max()),
            "count": len(g),
        })
    return out
