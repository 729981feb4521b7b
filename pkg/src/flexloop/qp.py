"""Small dense convex QP solver with certified KKT residuals.

Solves

    min  scale * || w + g ||^2
    s.t. alpha * A_eq w  = b_eq          (equality rows, may be declared soft)
         lb_in <= alpha * A_in w <= ub_in   (two-sided rows)
         lb_box <= alpha * w <= ub_box      (box rows)

with a primal active-set method. The objective Hessian is a positive
multiple of the identity (plus a penalty term when soft equality rows are
engaged), so every equality-constrained subproblem is strictly convex and
the minimizer is unique.

Soft equality rows are a fallback: the solver first treats every equality
as hard; only if that system is infeasible are the rows flagged soft moved
into the objective as a quadratic penalty with weight ``rho``, and the
residual is reported as slack. If the remaining hard constraints are still
inconsistent the result is an infeasibility certificate naming the
maximally violated row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITER = "max_iter"

KKT_TOL = 1e-8
ACTIVE_TOL = 1e-7

_RATIO_EPS = 1e-13
_STEP_EPS = 1e-11
_MULT_EPS = 1e-10


def _as_matrix(a, p: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, p))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, p))
    return a


def _as_vector(v, n: int, fill: float) -> np.ndarray:
    if v is None:
        return np.full(n, fill)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return v


@dataclass
class QpProblem:
    """One projection problem over the step direction ``w``.

    ``lb_box``/``ub_box`` bound the applied update ``alpha * w`` (device
    limits shifted by the current setpoint), ``lb_in``/``ub_in`` bound the
    linearized voltage response, and the equality rows pin the linearized
    PCC power. ``scale`` multiplies the whole objective and exists so the
    scaling invariance of the minimizer is directly testable.
    """

    g: np.ndarray
    alpha: float = 1.0
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    eq_soft: np.ndarray | None = None
    rho: float = 1e4
    a_in: np.ndarray | None = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None
    lb_box: np.ndarray | None = None
    ub_box: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self) -> None:
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        p = self.g.shape[0]
        self.a_eq = _as_matrix(self.a_eq, p)
        m = self.a_eq.shape[0]
        self.b_eq = _as_vector(self.b_eq, m, 0.0)
        if self.eq_soft is None:
            self.eq_soft = np.zeros(m, dtype=bool)
        else:
            self.eq_soft = np.atleast_1d(np.asarray(self.eq_soft, dtype=bool))
        self.a_in = _as_matrix(self.a_in, p)
        k = self.a_in.shape[0]
        self.lb_in = _as_vector(self.lb_in, k, -np.inf)
        self.ub_in = _as_vector(self.ub_in, k, np.inf)
        self.lb_box = _as_vector(self.lb_box, p, -np.inf)
        self.ub_box = _as_vector(self.ub_box, p, np.inf)

        if self.a_eq.shape != (m, p) or self.b_eq.shape != (m,):
            raise ValueError("inconsistent equality dimensions")
        if self.eq_soft.shape != (m,):
            raise ValueError("eq_soft must have one flag per equality row")
        if self.a_in.shape != (k, p):
            raise ValueError("inconsistent inequality dimensions")
        if self.lb_in.shape != (k,) or self.ub_in.shape != (k,):
            raise ValueError("inconsistent inequality bound dimensions")
        if self.lb_box.shape != (p,) or self.ub_box.shape != (p,):
            raise ValueError("inconsistent box dimensions")
        if np.any(self.lb_in > self.ub_in) or np.any(self.lb_box > self.ub_box):
            raise ValueError("lower bound above upper bound")
        if self.alpha <= 0 or self.rho <= 0 or self.scale <= 0:
            raise ValueError("alpha, rho and scale must be positive")

    @property
    def n(self) -> int:
        return self.g.shape[0]

    @property
    def n_eq(self) -> int:
        return self.a_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.a_in.shape[0]

    # Constraint row ids used for active sets and telemetry bitmasks:
    # equality rows first, then (lower, upper) pairs per inequality row,
    # then (lower, upper) pairs per box entry.
    def row_labels(self) -> tuple[str, ...]:
        labels = [f"eq[{i}]" for i in range(self.n_eq)]
        for i in range(self.n_in):
            labels += [f"in[{i}]:lo", f"in[{i}]:hi"]
        for j in range(self.n):
            labels += [f"box[{j}]:lo", f"box[{j}]:hi"]
        return tuple(labels)

    @property
    def n_rows(self) -> int:
        return self.n_eq + 2 * self.n_in + 2 * self.n

    # JSON-friendly round trip so problems can be attached to telemetry and
    # replayed offline
    def to_dict(self) -> dict:
        return {
            "g": self.g.tolist(),
            "alpha": self.alpha,
            "a_eq": self.a_eq.tolist(),
            "b_eq": self.b_eq.tolist(),
            "eq_soft": self.eq_soft.tolist(),
            "rho": self.rho,
            "a_in": self.a_in.tolist(),
            "lb_in": self.lb_in.tolist(),
            "ub_in": self.ub_in.tolist(),
            "lb_box": self.lb_box.tolist(),
            "ub_box": self.ub_box.tolist(),
            "scale": self.scale,
        }

    @staticmethod
    def from_dict(data: dict) -> "QpProblem":
        return QpProblem(**{k: np.asarray(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class QpMultipliers:
    """Lagrange multipliers, one nonnegative entry per one-sided row."""

    eq: np.ndarray
    in_lo: np.ndarray
    in_hi: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray


@dataclass(frozen=True)
class QpSolution:
    w: np.ndarray
    status: str
    stationarity: float
    primal: float
    complementarity: float
    active_set: tuple[int, ...]
    multipliers: QpMultipliers | None
    eq_slack: np.ndarray
    softened: bool
    iterations: int
    most_violated: int | None = None

    @property
    def active_mask(self) -> int:
        mask = 0
        for i in self.active_set:
            mask |= 1 << i
        return mask


@dataclass
class _OneSided:
    """Hard constraints in one-sided form G w <= h plus row bookkeeping."""

    G: np.ndarray
    h: np.ndarray
    kinds: list[tuple[str, int]] = field(default_factory=list)  # (family, index)


def _build_one_sided(p: QpProblem) -> _OneSided:
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    kinds: list[tuple[str, int]] = []
    a_in_eff = p.alpha * p.a_in
    for i in range(p.n_in):
        if np.isfinite(p.lb_in[i]):
            rows.append(-a_in_eff[i])
            rhs.append(-p.lb_in[i])
            kinds.append(("in_lo", i))
        if np.isfinite(p.ub_in[i]):
            rows.append(a_in_eff[i])
            rhs.append(p.ub_in[i])
            kinds.append(("in_hi", i))
    for j in range(p.n):
        e = np.zeros(p.n)
        e[j] = p.alpha
        if np.isfinite(p.lb_box[j]):
            rows.append(-e)
            rhs.append(-p.lb_box[j])
            kinds.append(("box_lo", j))
        if np.isfinite(p.ub_box[j]):
            rows.append(e)
            rhs.append(p.ub_box[j])
            kinds.append(("box_hi", j))
    if rows:
        return _OneSided(np.vstack(rows), np.asarray(rhs), kinds)
    return _OneSided(np.zeros((0, p.n)), np.zeros(0), kinds)


def _feasible_point(E: np.ndarray, b: np.ndarray, G: np.ndarray, h: np.ndarray):
    """Feasible point via an LP, or None if the system is inconsistent."""
    n = E.shape[1] if E.size else G.shape[1]
    res = linprog(
        c=np.zeros(n),
        A_ub=G if G.size else None,
        b_ub=h if G.size else None,
        A_eq=E if E.size else None,
        b_eq=b if E.size else None,
        bounds=[(None, None)] * n,
        method="highs",
    )
    if not res.success:
        return None
    return np.asarray(res.x, dtype=float)


def _least_violation(E: np.ndarray, b: np.ndarray, G: np.ndarray, h: np.ndarray):
    """Chebyshev-style least-infeasible point: min s, all violations <= s."""
    n = E.shape[1] if E.size else G.shape[1]
    ones = lambda m: -np.ones((m, 1))
    blocks = []
    rhs = []
    if G.size:
        blocks.append(np.hstack([G, ones(G.shape[0])]))
        rhs.append(h)
    if E.size:
        blocks.append(np.hstack([E, ones(E.shape[0])]))
        rhs.append(b)
        blocks.append(np.hstack([-E, ones(E.shape[0])]))
        rhs.append(-b)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    res = linprog(
        c=c,
        A_ub=np.vstack(blocks),
        b_ub=np.concatenate(rhs),
        bounds=[(None, None)] * n + [(0, None)],
        method="highs",
    )
    if not res.success:  # pragma: no cover - feasibility LP of this form is solvable
        return np.zeros(n)
    return np.asarray(res.x[:n], dtype=float)


def _kkt_solve(H: np.ndarray, c: np.ndarray, A: np.ndarray, d: np.ndarray):
    """Solve the equality-constrained QP min 0.5 w'Hw + c'w s.t. Aw = d."""
    n = H.shape[0]
    m = A.shape[0]
    if m == 0:
        return np.linalg.solve(H, -c), np.zeros(0)
    K = np.block([[H, A.T], [A, np.zeros((m, m))]])
    rhs = np.concatenate([-c, d])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    if not np.all(np.isfinite(sol)):
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set_solve(
    H: np.ndarray,
    c: np.ndarray,
    E: np.ndarray,
    b: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    max_iter: int,
):
    """Primal active-set iteration.

    Returns ``(status, w, nu, lam, iterations)`` with ``lam`` aligned to the
    rows of ``G`` (zero for inactive rows). Ties in blocking and dropping
    decisions are broken toward the lowest row index for determinism.
    """
    n = H.shape[0]
    m_eq = E.shape[0]
    n_rows = G.shape[0]

    if n_rows == 0:
        w, nu = _kkt_solve(H, c, E, b)
        return STATUS_OPTIMAL, w, nu, np.zeros(0), 0

    w = _feasible_point(E, b, G, h)
    if w is None:
        return STATUS_INFEASIBLE, None, None, None, 0

    working: list[int] = []
    for it in range(1, max_iter + 1):
        A = np.vstack([E, G[working]]) if working else E
        d = np.concatenate([b, h[working]]) if working else b
        w_star, mults = _kkt_solve(H, c, A, d)
        step = w_star - w
        if np.max(np.abs(step), initial=0.0) <= _STEP_EPS * max(1.0, np.max(np.abs(w_star), initial=0.0)):
            lam_w = mults[m_eq:]
            if lam_w.size == 0 or np.min(lam_w) >= -_MULT_EPS:
                lam = np.zeros(n_rows)
                lam[working] = np.maximum(lam_w, 0.0)
                return STATUS_OPTIMAL, w_star, mults[:m_eq], lam, it
            drop = int(np.argmin(lam_w))  # first occurrence wins ties
            working.pop(drop)
            w = w_star
            continue
        # ratio test over rows not in the working set
        limit = 1.0
        blocker = -1
        gw = G @ w
        gp = G @ step
        for i in range(n_rows):
            if i in working or gp[i] <= _RATIO_EPS:
                continue
            ratio = (h[i] - gw[i]) / gp[i]
            if ratio < limit - 1e-14:
                limit = max(ratio, 0.0)
                blocker = i
        w = w + limit * step
        if blocker >= 0 and limit < 1.0 - 1e-14:
            working.append(blocker)
            working.sort()
    return STATUS_MAX_ITER, w, np.zeros(m_eq), np.zeros(n_rows), max_iter


def _objective_terms(p: QpProblem, soften: bool):
    """Hessian and linear term, optionally with the soft-row penalty."""
    H = 2.0 * p.scale * np.eye(p.n)
    c = 2.0 * p.scale * p.g
    if soften and np.any(p.eq_soft):
        Es = p.alpha * p.a_eq[p.eq_soft]
        bs = p.b_eq[p.eq_soft]
        H = H + 2.0 * p.scale * p.rho * (Es.T @ Es)
        c = c - 2.0 * p.scale * p.rho * (Es.T @ bs)
    return H, c


def _assemble_multipliers(
    p: QpProblem, one_sided: _OneSided, nu_hard: np.ndarray, lam: np.ndarray, soften: bool
) -> QpMultipliers:
    eq = np.zeros(p.n_eq)
    hard_rows = np.where(~p.eq_soft)[0] if soften else np.arange(p.n_eq)
    eq[hard_rows] = nu_hard
    in_lo = np.zeros(p.n_in)
    in_hi = np.zeros(p.n_in)
    box_lo = np.zeros(p.n)
    box_hi = np.zeros(p.n)
    buckets = {"in_lo": in_lo, "in_hi": in_hi, "box_lo": box_lo, "box_hi": box_hi}
    for value, (family, idx) in zip(lam, one_sided.kinds):
        buckets[family][idx] += value
    return QpMultipliers(eq, in_lo, in_hi, box_lo, box_hi)


def _binding_rows(p: QpProblem, w: np.ndarray, soften: bool) -> tuple[int, ...]:
    """Row ids holding with equality at ACTIVE_TOL, in canonical order."""
    ids: list[int] = []
    for i in range(p.n_eq):
        if soften and p.eq_soft[i]:
            continue
        ids.append(i)
    in_vals = p.alpha * (p.a_in @ w) if p.n_in else np.zeros(0)
    for i in range(p.n_in):
        base = p.n_eq + 2 * i
        if np.isfinite(p.lb_in[i]) and abs(in_vals[i] - p.lb_in[i]) <= ACTIVE_TOL:
            ids.append(base)
        if np.isfinite(p.ub_in[i]) and abs(in_vals[i] - p.ub_in[i]) <= ACTIVE_TOL:
            ids.append(base + 1)
    box_vals = p.alpha * w
    for j in range(p.n):
        base = p.n_eq + 2 * p.n_in + 2 * j
        if np.isfinite(p.lb_box[j]) and abs(box_vals[j] - p.lb_box[j]) <= ACTIVE_TOL:
            ids.append(base)
        if np.isfinite(p.ub_box[j]) and abs(box_vals[j] - p.ub_box[j]) <= ACTIVE_TOL:
            ids.append(base + 1)
    return tuple(ids)


def kkt_residuals(
    p: QpProblem,
    w: np.ndarray,
    multipliers: QpMultipliers,
    *,
    penalized: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """Stationarity, primal-feasibility and complementarity infinity norms.

    ``penalized`` marks equality rows handled as a quadratic penalty; those
    rows contribute a gradient term instead of a primal residual.
    """
    w = np.asarray(w, dtype=float)
    m = multipliers
    grad = 2.0 * p.scale * (w + p.g)
    if penalized is not None and np.any(penalized):
        Es = p.alpha * p.a_eq[penalized]
        bs = p.b_eq[penalized]
        grad = grad + 2.0 * p.scale * p.rho * (Es.T @ (Es @ w - bs))

    stat = grad.copy()
    if p.n_eq:
        stat = stat + (p.alpha * p.a_eq).T @ m.eq
    if p.n_in:
        stat = stat + (p.alpha * p.a_in).T @ (m.in_hi - m.in_lo)
    stat = stat + p.alpha * (m.box_hi - m.box_lo)
    stationarity = float(np.max(np.abs(stat), initial=0.0))

    primal = 0.0
    comp = 0.0
    if p.n_eq:
        vals = p.alpha * (p.a_eq @ w)
        hard = np.ones(p.n_eq, dtype=bool) if penalized is None else ~penalized
        if np.any(hard):
            primal = max(primal, float(np.max(np.abs(vals[hard] - p.b_eq[hard]))))
    if p.n_in:
        vals = p.alpha * (p.a_in @ w)
        for i in range(p.n_in):
            if np.isfinite(p.lb_in[i]):
                primal = max(primal, p.lb_in[i] - vals[i])
                comp = max(comp, abs(m.in_lo[i] * (vals[i] - p.lb_in[i])))
            if np.isfinite(p.ub_in[i]):
                primal = max(primal, vals[i] - p.ub_in[i])
                comp = max(comp, abs(m.in_hi[i] * (p.ub_in[i] - vals[i])))
    vals = p.alpha * w
    for j in range(p.n):
        if np.isfinite(p.lb_box[j]):
            primal = max(primal, p.lb_box[j] - vals[j])
            comp = max(comp, abs(m.box_lo[j] * (vals[j] - p.lb_box[j])))
        if np.isfinite(p.ub_box[j]):
            primal = max(primal, vals[j] - p.ub_box[j])
            comp = max(comp, abs(m.box_hi[j] * (p.ub_box[j] - vals[j])))
    return stationarity, float(max(primal, 0.0)), comp


def solve_qp(problem: QpProblem, *, max_iter: int | None = None) -> QpSolution:
    """Solve the projection QP with a certified result.

    The returned solution carries the KKT residual triple; for ``optimal``
    status each residual is below :data:`KKT_TOL`. Infeasible hard systems
    yield ``status="infeasible"`` with the id of the maximally violated row,
    after the soft-equality fallback (if any rows allow it) has been tried.
    """
    p = problem
    if max_iter is None:
        max_iter = 100 + 10 * p.n_rows
    one_sided = _build_one_sided(p)
    E_all = p.alpha * p.a_eq
    cap_iters = 0

    for soften in (False, True):
        if soften and not np.any(p.eq_soft):
            break
        if soften:
            E = E_all[~p.eq_soft]
            b = p.b_eq[~p.eq_soft]
        else:
            E = E_all
            b = p.b_eq
        H, c = _objective_terms(p, soften)
        status, w, nu, lam, iters = _active_set_solve(
            H, c, E, b, one_sided.G, one_sided.h, max_iter
        )
        cap_iters += iters
        if status == STATUS_INFEASIBLE:
            continue
        mult = _assemble_multipliers(p, one_sided, nu, lam, soften)
        slack = (E_all @ w - p.b_eq) if p.n_eq else np.zeros(0)
        penal = p.eq_soft if soften else None
        stat, primal, comp = kkt_residuals(p, w, mult, penalized=penal)
        if status == STATUS_OPTIMAL and max(stat, primal, comp) > KKT_TOL:
            status = STATUS_MAX_ITER  # uncertified result, do not overclaim
        return QpSolution(
            w=w,
            status=status,
            stationarity=stat,
            primal=primal,
            complementarity=comp,
            active_set=_binding_rows(p, w, soften) if status == STATUS_OPTIMAL else (),
            multipliers=mult,
            eq_slack=slack,
            softened=soften,
            iterations=cap_iters,
        )

    # both attempts infeasible: certify with the least-violation point
    w_lv = _least_violation(E_all, p.b_eq, one_sided.G, one_sided.h)
    viol = []
    if p.n_eq:
        viol.extend(
            (abs(float(E_all[i] @ w_lv - p.b_eq[i])), i) for i in range(p.n_eq)
        )
    base_ids = {("in_lo", i): p.n_eq + 2 * i for i in range(p.n_in)}
    base_ids.update({("in_hi", i): p.n_eq + 2 * i + 1 for i in range(p.n_in)})
    base_ids.update({("box_lo", j): p.n_eq + 2 * p.n_in + 2 * j for j in range(p.n)})
    base_ids.update({("box_hi", j): p.n_eq + 2 * p.n_in + 2 * j + 1 for j in range(p.n)})
    for row, rhs, kind in zip(one_sided.G, one_sided.h, one_sided.kinds):
        viol.append((max(0.0, float(row @ w_lv - rhs)), base_ids[kind]))
    worst_val = max(v for v, _ in viol)
    worst = (worst_val, min(i for v, i in viol if v >= worst_val - 1e-12))
    return QpSolution(
        w=w_lv,
        status=STATUS_INFEASIBLE,
        stationarity=float("nan"),
        primal=worst[0],
        complementarity=float("nan"),
        active_set=(),
        multipliers=None,
        eq_slack=(E_all @ w_lv - p.b_eq) if p.n_eq else np.zeros(0),
        softened=bool(np.any(p.eq_soft)),
        iterations=cap_iters,
        most_violated=worst[1],
    )
