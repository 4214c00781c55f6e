"""Cone CBF, Lipschitz estimation and the CBF-QP / MR-CBF / ATOM-CBF safety filters.

All three filters solve the same two-input problem::

    min_{u in box, delta >= 0}  1/2 |u - u_nom|^2 + p delta^2
    s.t.  Lf + Lg.u - eps (L_Lfh + L_kh + L_Lgh |u|) + kappa h + delta >= 0

For a fixed ``u`` the optimal slack is ``max(0, -(constraint))``, so the solvers
work with the reduced objective ``F(u) = 1/2 |u - u_nom|^2 + p max(0, g(u))^2``
where ``g(u) = c |u| - a.u - b`` is convex. With ``eps = 0`` the problem is a QP
solved exactly by active-set enumeration; otherwise a projected Newton method is
used on the (convex, C^1 away from u = 0) reduced objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .world import SIN_SIGN, Control, RelState


class SolverError(RuntimeError):
    """Raised when the SOCP iteration fails to converge; carries the best iterate."""

    def __init__(self, message: str, best: "FilterResult"):
        super().__init__(message)
        self.best = best


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ConeCBF:
    """h(x) = |alpha| - asin(r / d): the heading ray misses the circle of radius ``r``."""

    r: float

    def __post_init__(self):
        if not self.r > 0.0:
            raise ValueError(f"cone CBF radius must be positive, got {self.r}")


@dataclass(frozen=True)
class FilterConfig:
    kappa_gain: float = 4.0
    L_Lfh: float = 0.0
    L_Lgh: float = 0.40
    L_kh: float = 4.00
    slack_penalty: float = 100.0
    v_limits: tuple[float, float] = (0.0, 3.0)
    omega_limits: tuple[float, float] = (-1.5, 1.5)

    def __post_init__(self):
        for name in ("kappa_gain", "L_Lfh", "L_Lgh", "L_kh", "slack_penalty"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0.0:
                raise ValueError(f"{name} must be finite and nonnegative, got {val}")
        if self.kappa_gain <= 0.0 or self.slack_penalty <= 0.0:
            raise ValueError("kappa_gain and slack_penalty must be positive")
        for name in ("v_limits", "omega_limits"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is an empty interval: {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))


@dataclass(frozen=True)
class FilterResult:
    u_safe: Control
    slack: float
    constraint_residual: float
    active: bool
    margin_used: float = 0.0
    objective: float = 0.0


def _sign(a: float) -> float:
    # subgradient choice at alpha = 0
    return 1.0 if a >= 0.0 else -1.0


def cbf_value(cbf: ConeCBF, x: RelState) -> float:
    if not x.d > cbf.r:
        raise ValueError(f"cone CBF undefined for d={x.d} <= r={cbf.r}")
    return abs(x.alpha) - math.asin(cbf.r / x.d)


def dh_dd(r: float, d: float) -> float:
    return r / (d * math.sqrt(d * d - r * r))


def lie_derivatives(cbf: ConeCBF, x: RelState) -> tuple[float, tuple[float, float]]:
    """(L_f h, L_g h) at ``x``. The drift is zero, so L_f h is identically 0."""
    if not x.d > cbf.r:
        raise ValueError(f"cone CBF undefined for d={x.d} <= r={cbf.r}")
    s = _sign(x.alpha)
    a_v = -math.cos(x.alpha) * dh_dd(cbf.r, x.d) + s * SIN_SIGN * math.sin(x.alpha) / x.d
    return 0.0, (a_v, s)


def estimate_lipschitz(cbf: ConeCBF, kappa_gain: float, n_d: int = 200, n_alpha: int = 200,
                       d_min_offset: float = 0.05, d_max: float = 8.0,
                       fd_step: float = 1e-6) -> tuple[float, float, float]:
    """Grid estimate of the Lipschitz constants of L_f h, L_g h and kappa(h).

    The grid spans d in [r + d_min_offset, d_max] and alpha in (-pi, pi]; only
    points inside the safe set (h >= 0) are used. At every grid point the
    gradient is taken by central differences with a fixed step, so a nested
    refinement of the grid can only raise the estimate.
    """
    if n_d < 10 or n_alpha < 10:
        raise ConfigurationError("Lipschitz grid needs at least 10 points per axis")
    r = cbf.r
    d = np.linspace(r + d_min_offset, d_max, n_d)
    alpha = np.linspace(-math.pi, math.pi, n_alpha + 1)[1:]
    D, A = np.meshgrid(d, alpha, indexing="ij")
    h = np.abs(A) - np.arcsin(r / D)
    mask = (h >= 0.0) & (np.abs(A) > fd_step) & (D - fd_step > r)
    if not mask.any():
        return 0.0, 0.0, 0.0
    D, A = D[mask], A[mask]
    sgn = np.where(A >= 0.0, 1.0, -1.0)

    def lg(dd, aa):
        gd = r / (dd * np.sqrt(dd * dd - r * r))
        return np.stack([-np.cos(aa) * gd + sgn * SIN_SIGN * np.sin(aa) / dd, sgn + 0.0 * dd], axis=-1)

    def kh(dd, aa):
        return kappa_gain * (np.abs(aa) - np.arcsin(r / dd))

    e = fd_step
    jd = (lg(D + e, A) - lg(D - e, A)) / (2 * e)
    ja = (lg(D, A + e) - lg(D, A - e)) / (2 * e)
    jac = np.stack([jd, ja], axis=-1)  # (m, 2 outputs, 2 inputs)
    L_lg = float(np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))))
    gk = np.hypot((kh(D + e, A) - kh(D - e, A)) / (2 * e), (kh(D, A + e) - kh(D, A - e)) / (2 * e))
    # L_f h is identically zero, so its numerical gradient is too.
    return 0.0, L_lg, float(np.max(gk))


# --- reduced problem ---------------------------------------------------------

@dataclass
class _Problem:
    a: tuple[float, float]      # coefficients of u in the constraint
    b: float                    # constant part (Lf + kappa h - eps (L_Lfh + L_kh))
    c: float                    # eps * L_Lgh, weight of |u|
    u0: tuple[float, float]
    lo: tuple[float, float]
    hi: tuple[float, float]
    p: float
    extra: dict = field(default_factory=dict)

    def g(self, v, w):
        return self.c * math.hypot(v, w) - self.a[0] * v - self.a[1] * w - self.b

    def F(self, v, w):
        m = max(0.0, self.g(v, w))
        return 0.5 * ((v - self.u0[0]) ** 2 + (w - self.u0[1]) ** 2) + self.p * m * m


def _clip(x, lo, hi):
    return min(max(x, lo), hi)


def _solve_qp(pr: _Problem) -> tuple[float, float]:
    """Exact minimiser of F when c == 0, by enumerating active sets."""
    (av, aw), b, (v0, w0) = pr.a, pr.b, pr.u0
    cv, cw = _clip(v0, pr.lo[0], pr.hi[0]), _clip(w0, pr.lo[1], pr.hi[1])
    if -(av * cv + aw * cw + b) <= 0.0:
        return cv, cw
    # The optimum lies in {a.u + b <= 0}, where F equals the quadratic
    # Q(u) = 1/2|u - u0|^2 + p (a.u + b)^2. Minimise Q over box and half-plane.
    p = pr.p
    H = np.array([[1.0 + 2 * p * av * av, 2 * p * av * aw], [2 * p * av * aw, 1.0 + 2 * p * aw * aw]])
    q = np.array([-v0 + 2 * p * b * av, -w0 + 2 * p * b * aw])  # grad Q(u) = H u + q
    # constraints n.u <= e
    rows = [((-1.0, 0.0), -pr.lo[0]), ((1.0, 0.0), pr.hi[0]),
            ((0.0, -1.0), -pr.lo[1]), ((0.0, 1.0), pr.hi[1]), ((av, aw), -b)]
    scale = 1.0 + abs(b) + abs(av) + abs(aw) + max(map(abs, pr.lo + pr.hi))
    tol = 1e-12 * scale

    def feasible(u):
        return all(n[0] * u[0] + n[1] * u[1] <= e + tol for n, e in rows)

    def Q(u):
        return 0.5 * ((u[0] - v0) ** 2 + (u[1] - w0) ** 2) + p * (av * u[0] + aw * u[1] + b) ** 2

    cands = [np.linalg.solve(H, -q)]
    for n, e in rows:
        n = np.asarray(n)
        if not np.any(n):
            continue
        # minimise Q on the line n.u = e
        K = np.array([[H[0, 0], H[0, 1], n[0]], [H[1, 0], H[1, 1], n[1]], [n[0], n[1], 0.0]])
        try:
            cands.append(np.linalg.solve(K, np.array([-q[0], -q[1], e]))[:2])
        except np.linalg.LinAlgError:
            pass
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            M = np.array([rows[i][0], rows[j][0]])
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            cands.append(np.linalg.solve(M, np.array([rows[i][1], rows[j][1]])))
    best, best_val = None, math.inf
    for u in cands:
        if feasible(u):
            val = Q(u)
            if val < best_val:
                best, best_val = u, val
    v = _clip(float(best[0]), pr.lo[0], pr.hi[0])
    w = _clip(float(best[1]), pr.lo[1], pr.hi[1])
    return v, w


def _zero_is_optimal(pr: _Problem) -> bool:
    """Subgradient optimality test for u = 0 (the non-smooth point of |u|)."""
    m0 = max(0.0, -pr.b)
    w = np.array([pr.u0[0] + 2 * pr.p * m0 * pr.a[0], pr.u0[1] + 2 * pr.p * m0 * pr.a[1]])
    radius = 2 * pr.p * m0 * pr.c
    # normal cone of the box at the origin, one coordinate at a time
    resid = np.zeros(2)
    for i in range(2):
        at_lo, at_hi = pr.lo[i] == 0.0, pr.hi[i] == 0.0
        if at_lo and at_hi:
            resid[i] = 0.0
        elif at_lo:
            resid[i] = max(w[i], 0.0)
        elif at_hi:
            resid[i] = min(w[i], 0.0)
        else:
            resid[i] = w[i]
    return float(np.hypot(*resid)) <= radius


def _grad_hess(pr: _Problem, u: np.ndarray):
    nu = math.hypot(u[0], u[1])
    a = np.asarray(pr.a)
    unit = u / nu if nu > 0.0 else np.zeros(2)
    gval = pr.c * nu - a @ u - pr.b
    m = max(0.0, gval)
    dg = pr.c * unit - a
    grad = (u - np.asarray(pr.u0)) + 2 * pr.p * m * dg
    H = np.eye(2)
    if gval > 0.0:
        H += 2 * pr.p * np.outer(dg, dg)
        if nu > 0.0:
            H += 2 * pr.p * m * (pr.c / nu) * (np.eye(2) - np.outer(unit, unit))
    return grad, H


def _solve_socp(pr: _Problem, max_iter: int = 200, tol: float = 1e-12) -> tuple[float, float, bool]:
    cv, cw = _clip(pr.u0[0], pr.lo[0], pr.hi[0]), _clip(pr.u0[1], pr.lo[1], pr.hi[1])
    if pr.g(cv, cw) <= 0.0:
        return cv, cw, True
    zero_in_box = all(pr.lo[i] <= 0.0 <= pr.hi[i] for i in range(2))
    if zero_in_box and _zero_is_optimal(pr):
        return 0.0, 0.0, True

    lo, hi = np.asarray(pr.lo), np.asarray(pr.hi)
    start = np.array(_solve_qp(pr))
    if not np.any(start):
        start = np.array([cv, cw])
    if not np.any(start):
        start = np.clip(np.array([1e-3, 1e-3]), lo, hi)
    u = start
    f = pr.F(*u)
    converged = False
    for _ in range(max_iter):
        grad, H = _grad_hess(pr, u)
        free = ~(((u <= lo) & (grad > 0.0)) | ((u >= hi) & (grad < 0.0)))
        pg = np.where(free, grad, 0.0)
        if np.max(np.abs(pg)) <= tol * (1.0 + abs(f)):
            converged = True
            break
        step = np.zeros(2)
        idx = np.flatnonzero(free)
        step[idx] = -np.linalg.solve(H[np.ix_(idx, idx)], grad[idx])
        t, accepted = 1.0, False
        while t > 1e-16:
            cand = np.clip(u + t * step, lo, hi)
            fc = pr.F(*cand)
            if fc <= f + 1e-4 * float(grad @ (cand - u)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # fall back to a projected gradient step
            t = 1.0 / (1.0 + 2 * pr.p * (pr.c + math.hypot(*pr.a)) ** 2)
            while t > 1e-20:
                cand = np.clip(u - t * grad, lo, hi)
                fc = pr.F(*cand)
                if fc < f:
                    accepted = True
                    break
                t *= 0.5
        if not accepted or np.max(np.abs(cand - u)) <= 1e-15 * (1.0 + np.max(np.abs(u))):
            converged = accepted or np.max(np.abs(pg)) <= 1e-8 * (1.0 + abs(f))
            if accepted:
                u, f = cand, fc
            break
        u, f = cand, fc
    # compare with the origin; Newton never lands exactly on the kink of |u|
    if zero_in_box and pr.F(0.0, 0.0) < f:
        u, f = np.zeros(2), pr.F(0.0, 0.0)
    return float(u[0]), float(u[1]), converged


def _result(pr: _Problem, v: float, w: float, eps: float) -> FilterResult:
    value = -pr.g(v, w)  # constraint value without slack
    slack = max(0.0, -value)
    return FilterResult(Control(v, w), slack, value + slack, value <= 1e-9, eps, pr.F(v, w))


def _problem(x_hat: RelState, u_nom: Control, eps: float, cbf: ConeCBF, cfg: FilterConfig) -> _Problem:
    lf, lg = lie_derivatives(cbf, x_hat)
    h = cbf_value(cbf, x_hat)
    b = lf + cfg.kappa_gain * h - eps * (cfg.L_Lfh + cfg.L_kh)
    return _Problem(lg, b, eps * cfg.L_Lgh, (u_nom.v, u_nom.omega),
                    (cfg.v_limits[0], cfg.omega_limits[0]), (cfg.v_limits[1], cfg.omega_limits[1]),
                    cfg.slack_penalty)


def solve_robust(x_hat: RelState, u_nom: Control, eps: float, cbf: ConeCBF, cfg: FilterConfig) -> FilterResult:
    """Filter with a given perception-error margin ``eps`` (0 gives the plain CBF-QP)."""
    if not eps >= 0.0 or not math.isfinite(eps):
        raise ValueError(f"error margin must be finite and nonnegative, got {eps}")
    pr = _problem(x_hat, u_nom, eps, cbf, cfg)
    if pr.c == 0.0:
        v, w = _solve_qp(pr)
        return _result(pr, v, w, eps)
    v, w, ok = _solve_socp(pr)
    res = _result(pr, v, w, eps)
    if not ok:
        raise SolverError(f"SOCP did not converge at x_hat={x_hat}, u_nom={u_nom}, eps={eps}", res)
    return res


def solve_cbf_qp(x_hat: RelState, u_nom: Control, cbf: ConeCBF, cfg: FilterConfig) -> FilterResult:
    return solve_robust(x_hat, u_nom, 0.0, cbf, cfg)


def solve_mr_cbf(x_hat: RelState, u_nom: Control, static_eps: float, cbf: ConeCBF,
                 cfg: FilterConfig) -> FilterResult:
    """Measurement-robust CBF filter with a fixed error bound."""
    return solve_robust(x_hat, u_nom, static_eps, cbf, cfg)


def solve_atom_socp(x_hat: RelState, u_nom: Control, unc: float, artifact, cbf: ConeCBF,
                    cfg: FilterConfig) -> FilterResult:
    """ATOM-CBF filter: the margin scales with the uncertainty score ``unc``."""
    from .calibration import adaptive_margin

    return solve_robust(x_hat, u_nom, adaptive_margin(artifact, unc), cbf, cfg)


def grid_oracle(x_hat: RelState, u_nom: Control, eps: float, cbf: ConeCBF, cfg: FilterConfig,
                step: float = 1e-3) -> tuple[float, tuple[float, float]]:
    """Brute-force minimum of the slack-eliminated objective over a control grid.

    Returns ``(objective, (v, omega))``. Independent of the solvers above apart
    from the Lie derivatives that define the constraint.
    """
    lf, (av, aw) = lie_derivatives(cbf, x_hat)
    h = abs(x_hat.alpha) - math.asin(cbf.r / x_hat.d)
    vs = np.arange(cfg.v_limits[0], cfg.v_limits[1] + step / 2, step)
    ws = np.arange(cfg.omega_limits[0], cfg.omega_limits[1] + step / 2, step)
    vs = np.clip(vs, *cfg.v_limits)
    ws = np.clip(ws, *cfg.omega_limits)
    best = (math.inf, (0.0, 0.0))
    W2 = (ws - u_nom.omega) ** 2
    for chunk in np.array_split(np.arange(len(vs)), max(1, len(vs) // 200)):
        V = vs[chunk][:, None]
        W = ws[None, :]
        cons = lf + av * V + aw * W - eps * (cfg.L_Lfh + cfg.L_kh + cfg.L_Lgh * np.sqrt(V * V + W * W)) \
            + cfg.kappa_gain * h
        delta = np.maximum(0.0, -cons)
        obj = 0.5 * ((V - u_nom.v) ** 2 + W2[None, :]) + cfg.slack_penalty * delta * delta
        k = int(np.argmin(obj))
        i, j = divmod(k, obj.shape[1])
        if obj[i, j] < best[0]:
            best = (float(obj[i, j]), (float(vs[chunk][i]), float(ws[j])))
    return best
