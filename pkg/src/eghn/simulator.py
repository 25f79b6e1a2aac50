"""Charged particles on rigid stick-connected complexes.

Velocity Verlet with a softened Coulomb force; stick lengths are held by
iterated SHAKE (positions) and RATTLE (velocities) projections.  All arrays carry an
optional leading batch axis so that many rollouts of one topology advance
together; converged batch members are frozen while others keep iterating, so
a batched rollout reproduces the single rollout bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHAPES = ("isolated", "stick", "chain", "triangle")


class ConstraintError(RuntimeError):
    """SHAKE/RATTLE failed to converge."""


@dataclass(frozen=True)
class SimParams:
    dt: float = 1e-3
    softening: float = 1e-2
    sigma_center: float = 1.0
    offset_scale: float = 0.3
    sigma_velocity: float = 0.5
    tol: float = 1e-10
    max_iter: int = 500


@dataclass(frozen=True)
class ComplexSpec:
    indices: tuple[int, ...]
    sticks: tuple[tuple[int, int], ...]
    shape: str

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass
class SimState:
    x: np.ndarray  # (..., N, 3)
    v: np.ndarray  # (..., N, 3)
    charges: np.ndarray  # (..., N)
    sticks: np.ndarray  # (S, 2) int
    lengths: np.ndarray  # (..., S)


@dataclass
class Trajectory:
    positions: np.ndarray  # (T+1, N, 3)
    velocities: np.ndarray  # (T+1, N, 3)
    charges: np.ndarray
    membership: np.ndarray
    sticks: np.ndarray
    dt: float
    seed: int | None = None
    complexes: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.positions.shape[0] - 1


# ----------------------------------------------------------------------
# topology
# ----------------------------------------------------------------------


def shape_sticks(shape: str, size: int) -> list[tuple[int, int]]:
    """Local stick list for a complex of ``size`` particles."""
    if shape == "isolated":
        if size != 1:
            raise ValueError("an isolated complex has one particle")
        return []
    if shape == "stick":
        if size != 2:
            raise ValueError("a stick has two particles")
        return [(0, 1)]
    if shape == "triangle":
        if size != 3:
            raise ValueError("a triangle has three particles")
        return [(0, 1), (1, 2), (0, 2)]
    if shape == "chain":
        if size < 2:
            raise ValueError("a chain has at least two particles")
        return [(k, k + 1) for k in range(size - 1)]
    raise ValueError(f"unknown complex shape {shape!r}")


def shapes_for_size(size: int) -> tuple[str, ...]:
    if size == 1:
        return ("isolated",)
    if size == 2:
        return ("stick",)
    if size == 3:
        return ("chain", "triangle")
    return ("chain",)


def build_complexes(signature) -> list[ComplexSpec]:
    """Complexes laid out in order from ``((shape, size), ...)``."""
    out = []
    start = 0
    for shape, size in signature:
        idx = tuple(range(start, start + size))
        sticks = tuple((start + i, start + j) for i, j in shape_sticks(shape, size))
        out.append(ComplexSpec(idx, sticks, shape))
        start += size
    return out


def sample_signature(M: int, avg_size: float, rng: np.random.Generator, exact: bool = False) -> tuple:
    """Pick complex sizes summing to ``round(M * avg_size)`` and a shape for each.

    ``exact=True`` keeps every size at ``avg_size`` when that is an integer;
    otherwise sizes are perturbed by random unit transfers between complexes.
    """
    if M < 1 or avg_size < 1:
        raise ValueError("need M >= 1 and avg_size >= 1")
    total = int(round(M * avg_size))
    sizes = [total // M + (1 if k < total % M else 0) for k in range(M)]
    if not exact:
        for _ in range(M):
            a, b = rng.integers(0, M, size=2)
            if a != b and sizes[a] > 1:
                sizes[a] -= 1
                sizes[b] += 1
    shapes = [str(rng.choice(shapes_for_size(s))) for s in sizes]
    return tuple(zip(shapes, sizes))


# ----------------------------------------------------------------------
# initial conditions
# ----------------------------------------------------------------------


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def _local_geometry(shape: str, size: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Body-frame coordinates with bond lengths of order ``scale``."""
    if shape == "isolated":
        return np.zeros((1, 3))
    if shape == "triangle":
        ang = np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3]) + rng.uniform(-0.3, 0.3, size=3)
        rad = scale * rng.uniform(0.8, 1.2, size=3)
        pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(3)], axis=1)
    else:
        pts = np.zeros((size, 3))
        for k in range(1, size):
            step = rng.standard_normal(3)
            pts[k] = pts[k - 1] + scale * rng.uniform(0.8, 1.2) * step / np.linalg.norm(step)
    return pts - pts.mean(axis=0)


def constraint_jacobian(x: np.ndarray, sticks) -> np.ndarray:
    """Rows ``d/dx (|x_i - x_j|^2 / 2)`` for each stick, shape (S, 3N)."""
    N = x.shape[0]
    J = np.zeros((len(sticks), 3 * N))
    for r, (i, j) in enumerate(sticks):
        d = x[i] - x[j]
        J[r, 3 * i : 3 * i + 3] = d
        J[r, 3 * j : 3 * j + 3] = -d
    return J


def project_velocities(x: np.ndarray, v: np.ndarray, sticks) -> np.ndarray:
    """Least-norm correction so that every stick has zero length rate (unit masses)."""
    if len(sticks) == 0:
        return v
    J = constraint_jacobian(x, sticks)
    vf = v.reshape(-1)
    lam = np.linalg.solve(J @ J.T, J @ vf)
    return (vf - J.T @ lam).reshape(v.shape)


def init_system(M: int, avg_size: float, seed: int | None = None, signature=None,
                params: SimParams = SimParams(), rng: np.random.Generator | None = None):
    """Draw an initial state; returns ``(SimState, [ComplexSpec, ...])``.

    Complex centers are Gaussian with ``sigma_center``; each complex is a
    randomly oriented rigid shape with bond lengths near ``offset_scale``.
    Velocities are Gaussian and then projected onto the constraint tangent
    space; charges are uniform in {-1, +1}.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    if signature is None:
        signature = sample_signature(M, avg_size, rng, exact=True)
    complexes = build_complexes(signature)
    N = sum(c.size for c in complexes)
    x = np.zeros((N, 3))
    for c in complexes:
        center = rng.normal(0.0, params.sigma_center, size=3)
        body = _local_geometry(c.shape, c.size, params.offset_scale, rng)
        x[list(c.indices)] = center + body @ _random_rotation(rng).T
    v = rng.normal(0.0, params.sigma_velocity, size=(N, 3))
    charges = rng.choice([-1.0, 1.0], size=N)
    sticks = np.array([s for c in complexes for s in c.sticks], dtype=np.int64).reshape(-1, 2)
    v = project_velocities(x, v, sticks)
    lengths = np.linalg.norm(x[sticks[:, 0]] - x[sticks[:, 1]], axis=-1) if len(sticks) else np.zeros(0)
    return SimState(x, v, charges, sticks, lengths), complexes


# ----------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------


def coulomb_forces(x: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    """``F_i = sum_j c_i c_j (x_i - x_j) / (|x_i - x_j|^2 + eps)^{3/2}``."""
    d = x[..., :, None, :] - x[..., None, :, :]
    r2 = (d * d).sum(axis=-1) + softening
    w = charges[..., :, None] * charges[..., None, :] / (r2 * np.sqrt(r2))
    N = x.shape[-2]
    w[..., np.arange(N), np.arange(N)] = 0.0
    return (w[..., None] * d).sum(axis=-2)


def potential_energy(x: np.ndarray, charges: np.ndarray, softening: float) -> np.ndarray:
    d = x[..., :, None, :] - x[..., None, :, :]
    r2 = (d * d).sum(axis=-1) + softening
    w = charges[..., :, None] * charges[..., None, :] / np.sqrt(r2)
    N = x.shape[-2]
    iu = np.triu_indices(N, 1)
    return w[..., iu[0], iu[1]].sum(axis=-1)


def total_energy(x, v, charges, softening: float) -> np.ndarray:
    return 0.5 * (v * v).sum(axis=(-2, -1)) + potential_energy(x, charges, softening)


def _incidence(sticks: np.ndarray, N: int) -> np.ndarray:
    C = np.zeros((len(sticks), N))
    C[np.arange(len(sticks)), sticks[:, 0]] = 1.0
    C[np.arange(len(sticks)), sticks[:, 1]] = -1.0
    return C


def _shake(x_old, x_new, v, sticks, lengths, dt, tol, max_iter):
    """Position projection along the old bond vectors; ``v`` receives the same correction / dt.

    All stick multipliers are solved together with Newton iterations on the
    linearized constraint system (matrix SHAKE).
    """
    if len(sticks) == 0:
        return
    I, J = sticks[:, 0], sticks[:, 1]
    d2 = lengths**2
    C = _incidence(sticks, x_new.shape[-2])
    CCt = C @ C.T
    r_old = x_old[..., I, :] - x_old[..., J, :]
    active = np.ones(x_new.shape[:-2], dtype=bool)
    for _ in range(max_iter):
        s = x_new[..., I, :] - x_new[..., J, :]
        sigma = (s * s).sum(axis=-1) - d2
        active = active & (np.abs(sigma / (2.0 * d2)).max(axis=-1) >= tol)
        if not active.any():
            return
        jac = 2.0 * CCt * (s @ np.swapaxes(r_old, -1, -2))
        lam = np.linalg.solve(jac, -sigma[..., None])
        lam = lam * active.astype(np.float64)[..., None, None]
        delta = C.T @ (lam * r_old)
        x_new += delta
        v += delta / dt
    s = x_new[..., I, :] - x_new[..., J, :]
    viol = np.abs(((s * s).sum(axis=-1) - d2) / (2.0 * d2))
    raise ConstraintError(f"SHAKE did not converge: max relative violation {viol.max():.3e}")


def _rattle(x, v, sticks, lengths, tol, max_iter):
    """Velocity projection so that ``(x_i - x_j) . (v_i - v_j) = 0`` for every stick."""
    if len(sticks) == 0:
        return
    I, J = sticks[:, 0], sticks[:, 1]
    d2 = lengths**2
    C = _incidence(sticks, x.shape[-2])
    CCt = C @ C.T
    r = x[..., I, :] - x[..., J, :]
    active = np.ones(x.shape[:-2], dtype=bool)
    for _ in range(max_iter):
        rate = ((v[..., I, :] - v[..., J, :]) * r).sum(axis=-1)
        active = active & (np.abs(rate / d2).max(axis=-1) >= tol)
        if not active.any():
            return
        jac = CCt * (r @ np.swapaxes(r, -1, -2))
        mu = np.linalg.solve(jac, -rate[..., None])
        mu = mu * active.astype(np.float64)[..., None, None]
        v += C.T @ (mu * r)
    raise ConstraintError(f"RATTLE did not converge: max relative rate {np.abs(rate / d2).max():.3e}")


def step(state: SimState, dt: float, params: SimParams = SimParams(), forces: np.ndarray | None = None):
    """Advance one velocity-Verlet/RATTLE step; returns ``(new_state, new_forces)``.

    ``forces`` may carry the force at the current positions from the previous
    call to save one evaluation.
    """
    x, v, q = state.x, state.v, state.charges
    f = coulomb_forces(x, q, params.softening) if forces is None else forces
    v_half = v + 0.5 * dt * f
    x_new = x + dt * v_half
    _shake(x, x_new, v_half, state.sticks, state.lengths, dt, params.tol, params.max_iter)
    f_new = coulomb_forces(x_new, q, params.softening)
    v_new = v_half + 0.5 * dt * f_new
    _rattle(x_new, v_new, state.sticks, state.lengths, params.tol, params.max_iter)
    return SimState(x_new, v_new, q, state.sticks, state.lengths), f_new


def integrate(state: SimState, T: int, dt: float, params: SimParams = SimParams(), record: bool = True):
    """Run ``T`` steps; returns stacked positions and velocities (or only the last frame)."""
    xs = [state.x.copy()]
    vs = [state.v.copy()]
    f = None
    for _ in range(T):
        state, f = step(state, dt, params, f)
        if record:
            xs.append(state.x)
            vs.append(state.v)
    if not record:
        xs.append(state.x)
        vs.append(state.v)
    return np.stack(xs, axis=-3), np.stack(vs, axis=-3), state


def rollout(M: int, avg_size: float, T: int, dt: float = 1e-3, seed: int | None = None,
            signature=None, params: SimParams | None = None) -> Trajectory:
    """Simulate one system from a fresh initial state; frame 0 and frame T form a training pair."""
    if T < 0:
        raise ValueError("T must be >= 0")
    params = params or SimParams(dt=dt)
    state, complexes = init_system(M, avg_size, seed=seed, signature=signature, params=params)
    return rollout_from(state, complexes, T, dt, params, seed)


def rollout_from(state: SimState, complexes, T: int, dt: float, params: SimParams = SimParams(),
                 seed: int | None = None) -> Trajectory:
    xs, vs, _ = integrate(state, T, dt, params)
    membership = np.zeros(state.x.shape[-2], dtype=np.int64)
    for k, c in enumerate(complexes):
        membership[list(c.indices)] = k
    return Trajectory(np.moveaxis(xs, -3, 0), np.moveaxis(vs, -3, 0), state.charges, membership,
                      state.sticks, dt, seed, list(complexes))


def stick_drift(positions: np.ndarray, sticks: np.ndarray) -> float:
    """Max relative deviation of any stick from its frame-0 length."""
    if len(sticks) == 0:
        return 0.0
    L = np.linalg.norm(positions[..., sticks[:, 0], :] - positions[..., sticks[:, 1], :], axis=-1)
    return float(np.abs(L / L[..., :1, :] - 1.0).max())
