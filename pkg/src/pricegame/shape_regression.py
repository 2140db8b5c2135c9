"""Least-squares regression under a concavity constraint on a transformed scale.

The estimator fits knot values phi so that h_s(phi(w)) tracks the responses,
where phi is restricted to the cone of piecewise-linear functions with
nonincreasing slopes, intersected with a codomain box.  Projections onto
that set are exact: a dual active-set quadratic program over the
second-difference and bound rows, solved through banded normal equations.
The transformed objective is minimized by projected descent steps with
backtracking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from .errors import ConvergenceError, DomainError, FormatError
from .links import d_transform, h_transform, h_transform_deriv


def codomain_bounds(s: float, l_psi: float, u_psi: float) -> tuple[float, float]:
    """Transform a positive range [l_psi, u_psi] into the concave scale, ascending."""
    if not 0.0 < l_psi < u_psi:
        raise DomainError("need 0 < l_psi < u_psi")
    return float(d_transform(s, l_psi)), float(d_transform(s, u_psi))


# ---------------------------------------------------------------------------
# Exact projection onto {nonincreasing slopes} intersect {a <= v <= b}
# ---------------------------------------------------------------------------

def _is_concave(values, knots, tol):
    if len(values) <= 2:
        return True
    slopes = np.diff(values) / np.diff(knots)
    return bool(np.all(np.diff(slopes) <= tol))


def _hinge_active_set(y, x, w, active):
    """Weighted projection onto nonincreasing-slope sequences (primal active set).

    Candidates are a + b*x + sum_j c_j * (-(x - x_j)_+) over interior knots
    with c_j >= 0; the active hinge set grows by the most violated score and
    shrinks on negative coefficients.  Fitted values come from an SVD least
    squares, so they stay accurate even when hinge columns are collinear.
    Returns (fit, active_tuple).
    """
    n = y.size
    sw = np.sqrt(w)
    scale = max(1.0, float(np.max(np.abs(y))))
    kkt_tol = 1e-11 * scale

    def design(idx):
        cols = [np.ones(n), x]
        for j in idx:
            cols.append(-np.maximum(x - x[j], 0.0))
        return np.column_stack(cols)

    interior = np.arange(1, n - 1)
    # reverse-cumulative tables for O(n) hinge norms
    q0 = np.cumsum(w[::-1])[::-1]
    q1 = np.cumsum((w * x)[::-1])[::-1]
    q2 = np.cumsum((w * x * x)[::-1])[::-1]

    def suffix(arr, js):
        out = np.zeros(js.size)
        inside = js + 1 < n
        out[inside] = arr[js[inside] + 1]
        return out

    norms_sq = (suffix(q2, interior) - 2.0 * x[interior] * suffix(q1, interior)
                + np.square(x[interior]) * suffix(q0, interior))

    active = sorted(set(int(j) for j in active if 1 <= j <= n - 2))
    best_obj = np.inf
    fit = y
    block = 16
    seen = set()
    for _ in range(4 * n + 100):
        while True:
            G = design(active)
            coef, *_ = np.linalg.lstsq(G * sw[:, None], y * sw, rcond=None)
            if len(active) == 0 or float(np.min(coef[2:])) >= -1e-12 * scale:
                break
            if block > 1:
                neg = set(np.flatnonzero(coef[2:] < -1e-12 * scale))
                active = [active[i] for i in range(len(active)) if i not in neg]
            else:
                active.pop(int(np.argmin(coef[2:])))
        fit = G @ coef
        r = w * (y - fit)
        c0 = np.cumsum(r[::-1])[::-1]
        c1 = np.cumsum((r * x)[::-1])[::-1]
        scores = -(suffix(c1, interior) - x[interior] * suffix(c0, interior))
        if active:
            scores[np.asarray(active) - 1] = -np.inf
        with np.errstate(invalid="ignore"):
            normed = scores / np.sqrt(np.maximum(norms_sq, 1e-300))
        k = int(np.argmax(normed))
        if normed[k] <= kkt_tol:
            return fit, tuple(active)
        sig = (block, tuple(active))
        if sig in seen:
            if block == 1:
                return fit, tuple(active)  # cycling at unit block: accept incumbent
            block = max(1, block // 2)
        seen.add(sig)
        if block > 1:
            cand = np.flatnonzero(normed > kkt_tol)
            take = cand[np.argsort(normed[cand])[::-1][:block]]
            active.extend(int(interior[int(j)]) for j in take)
        else:
            active.append(int(interior[k]))
        active = sorted(set(active))
    return fit, tuple(active)


_PIN_WEIGHT = 1e14


def _pinned_projection(y, x, w, lower, upper, hinges, pins):
    """Cone projection with selected coordinates pinned to a bound.

    A pin is realized as a huge-weight pseudo-observation at the bound, which
    keeps the hinge active-set machinery unchanged; the bias this introduces
    is O(scale / pin weight), far below the feasibility tolerances.
    """
    w_eff = y * 0.0 + w
    y_eff = y.copy()
    for coord, bound in pins:
        target = lower if bound == "lo" else upper
        wp = _PIN_WEIGHT * w[coord]
        y_eff[coord] = (w[coord] * y[coord] + wp * target) / (w[coord] + wp)
        w_eff[coord] = w[coord] + wp
    return _hinge_active_set(y_eff, x, w_eff, hinges)


def _qp_project(y, x, w, lower, upper, state, exact=True):
    """Projection onto the concave cone intersected with value bounds.

    A concave sequence attains its minimum at an endpoint, so the lower
    bound binds only at the two end coordinates; the upper bound binds on a
    contiguous run around the maximum and is pinned greedily.  With
    ``exact`` set, pins are re-validated by trial release before accepting
    the solution; otherwise warm-started pins are kept sticky (cheaper, for
    inner-loop proposals where any feasible point suffices).
    """
    scale = 1.0 + float(np.max(np.abs(y)))
    feas_tol = 1e-10 * scale
    hinges, pins = state if state else ((), ())
    pins = [p for p in pins
            if (p[1] == "lo" and lower is not None) or (p[1] == "ub" and upper is not None)]
    release_tried = set()

    fit = y
    for _ in range(80):
        fit, hinges = _pinned_projection(y, x, w, lower, upper, hinges, pins)
        changed = False
        if lower is not None:
            for coord in (0, y.size - 1):
                if fit[coord] < lower - feas_tol and (coord, "lo") not in pins:
                    pins.append((coord, "lo"))
                    changed = True
        if upper is not None and not changed:
            over = np.flatnonzero(fit > upper + feas_tol)
            over = [int(i) for i in over if (i, "ub") not in pins]
            if over:
                worst = max(over, key=lambda i: fit[i])
                pins.append((worst, "ub"))
                changed = True
        if changed:
            continue
        # trial-release pins whose constraint would hold anyway (once each)
        released = False
        if exact:
            for pin in list(pins):
                if pin in release_tried:
                    continue
                release_tried.add(pin)
                trial_pins = [p for p in pins if p != pin]
                trial_fit, trial_hinges = _pinned_projection(y, x, w, lower, upper,
                                                             hinges, trial_pins)
                coord, bound = pin
                ok = (trial_fit[coord] >= lower - feas_tol if bound == "lo"
                      else trial_fit[coord] <= upper + feas_tol)
                if ok:
                    pins = trial_pins
                    fit, hinges = trial_fit, trial_hinges
                    released = True
        if not released:
            if lower is not None or upper is not None:
                fit = np.clip(fit, lower if lower is not None else -np.inf,
                              upper if upper is not None else np.inf)
            return fit, (hinges, tuple(pins))
    fit = np.clip(fit, lower if lower is not None else -np.inf,
                  upper if upper is not None else np.inf)
    return fit, (hinges, tuple(pins))


def project_concave(values, *, knots=None, weights=None):
    """Euclidean projection onto sequences with nonincreasing consecutive slopes.

    Knots default to equispaced positions; ``weights`` turns the objective
    into a weighted least squares (used for deduplicated design points).
    Already-concave inputs are returned unchanged.
    """
    v, _ = _project_concave_ws(values, knots=knots, weights=weights)
    return v


def _project_concave_ws(values, *, knots=None, weights=None, state=None,
                        lower=None, upper=None, exact=True):
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise DomainError("project_concave expects a 1-d sequence")
    n = y.size
    if n == 0:
        raise DomainError("project_concave needs at least one value")
    x = np.arange(n, dtype=float) if knots is None else np.asarray(knots, dtype=float)
    if x.shape != y.shape:
        raise DomainError("knots must match values in length")
    if n >= 2 and np.any(np.diff(x) <= 0.0):
        raise DomainError("knots must be strictly increasing")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w <= 0.0):
        raise DomainError("weights must be positive")
    lo = -np.inf if lower is None else lower
    hi = np.inf if upper is None else upper
    if n <= 2:
        return np.clip(y, lo, hi), state or ((), ())

    in_box = float(np.min(y)) >= lo - 1e-15 and float(np.max(y)) <= hi + 1e-15
    if in_box:
        tol_fast = 1e-10 * (1.0 + float(np.max(np.abs(np.diff(y) / np.diff(x)))))
        if _is_concave(y, x, tol_fast):
            return y.copy(), state or ((), ())
    return _qp_project(y, x, w, lower, upper, state, exact=exact)


# ---------------------------------------------------------------------------
# Fit container
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConcaveFit:
    """Piecewise-linear concave estimate on sorted knots, in transformed scale.

    Evaluation extends past the knot range linearly with the first/last
    interior slopes, clips into ``codomain_box``, and maps back through the
    ``s`` branch of the inverse transform.
    """

    knots: np.ndarray
    values: np.ndarray
    s: float
    codomain_box: tuple[float, float]
    boundary_slopes: tuple[float, float]
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        a, b = self.codomain_box
        if not (np.isfinite(a) and np.isfinite(b) and a < b):
            raise DomainError("codomain box must be a finite interval")
        if knots.size != values.size or knots.size == 0:
            raise DomainError("knots and values must match and be nonempty")
        if knots.size >= 2 and np.any(np.diff(knots) <= 0.0):
            raise DomainError("knots must be strictly increasing")
        if np.any(values < a - 1e-9) or np.any(values > b + 1e-9):
            raise DomainError("fitted values leave the codomain box")
        if knots.size >= 3:
            slopes = np.diff(values) / np.diff(knots)
            if np.any(np.diff(slopes) > 1e-8 * (1.0 + np.max(np.abs(slopes)))):
                raise DomainError("fitted values are not concave")

    def phi(self, u):
        """Transformed-scale evaluation (interpolate, extend, clip)."""
        u = np.asarray(u, dtype=float)
        k, v = self.knots, self.values
        if k.size == 1:
            out = np.full(u.shape, v[0])
        else:
            out = np.interp(u, k, v)
            lo_s, hi_s = self.boundary_slopes
            left = u < k[0]
            right = u > k[-1]
            if np.any(left):
                out = np.where(left, v[0] + lo_s * (u - k[0]), out)
            if np.any(right):
                out = np.where(right, v[-1] + hi_s * (u - k[-1]), out)
        out = np.clip(out, self.codomain_box[0], self.codomain_box[1])
        return float(out) if out.ndim == 0 else out

    def __call__(self, u):
        return eval_fit(self, u)

    def to_csv(self, path) -> None:
        """One metadata line (s, box, slopes) followed by knot,value rows."""
        with open(path, "w", newline="") as fh:
            a, b = self.codomain_box
            lo_s, hi_s = self.boundary_slopes
            fh.write(f"{self.s!r},{a!r},{b!r},{lo_s!r},{hi_s!r}\n")
            for k, v in zip(self.knots, self.values):
                fh.write(f"{k!r},{v!r}\n")

    @classmethod
    def from_csv(cls, path) -> "ConcaveFit":
        with open(path, newline="") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines:
            raise FormatError("empty fit file")
        head = lines[0].split(",")
        if len(head) != 5:
            raise FormatError("fit header must hold s, box bounds, and two slopes")
        s, a, b, lo_s, hi_s = (float(tok) for tok in head)
        pairs = [ln.split(",") for ln in lines[1:]]
        if not pairs or any(len(p) != 2 for p in pairs):
            raise FormatError("fit body must be knot,value rows")
        knots = np.array([float(p[0]) for p in pairs])
        values = np.array([float(p[1]) for p in pairs])
        return cls(knots=knots, values=values, s=s, codomain_box=(a, b),
                   boundary_slopes=(lo_s, hi_s))


def eval_fit(fit: ConcaveFit, u):
    """Demand-scale evaluation of a fit: h_s of the clipped transformed values."""
    return h_transform(fit.s, fit.phi(u))


# ---------------------------------------------------------------------------
# Transformed-objective fitting
# ---------------------------------------------------------------------------

def _dedup_sorted(w, y):
    """Merge duplicate design points into weighted means."""
    uniq, inverse, counts = np.unique(w, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y)
    return uniq, sums / counts, counts.astype(float)


def _boundary_slopes(knots, values):
    if knots.size < 2:
        return (0.0, 0.0)
    slopes = np.diff(values) / np.diff(knots)
    return (float(slopes[0]), float(slopes[-1]))


def fit_transformed_concave(w, y, s: float, box=None, *, max_iter: int = 10_000,
                            raise_on_cap: bool = False) -> ConcaveFit:
    """Fit knot values phi minimizing sum (y - h_s(phi(w)))^2 over the concave cone.

    ``box`` restricts the transformed values; when omitted it defaults to
    the transform of [1e-4, 10*max(y)].  Iterates projected descent steps
    (curvature-weighted with a plain projected-gradient fallback, Armijo
    backtracking from unit steps); the convergence criterion is the norm of
    the unit projected-gradient step.  Initialization is the projection of
    the transformed clamped responses, so noiseless concave data is
    recovered exactly.  Hitting the iteration cap returns the best iterate
    flagged ``converged=False`` (or raises if ``raise_on_cap``).
    """
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float)
    if w.ndim != 1 or w.shape != y.shape or w.size < 2:
        raise DomainError("need matching 1-d design/response arrays with n >= 2")
    order = np.argsort(w, kind="stable")
    w, y = w[order], y[order]
    knots, ybar, mult = _dedup_sorted(w, y)
    if knots.size < 2:
        raise DomainError("need at least two distinct design points")

    if box is None:
        hi = 10.0 * float(np.max(y))
        hi = max(hi, 2e-4)
        box = codomain_bounds(s, 1e-4, hi)
    a, b = float(box[0]), float(box[1])
    if not a < b:
        raise DomainError("codomain box must be nondegenerate")

    lo_y, hi_y = h_transform(s, a), h_transform(s, b)
    y_clamped = np.clip(ybar, lo_y, hi_y)

    if knots.size == 2:
        vals = np.clip(d_transform(s, y_clamped), a, b)
        return ConcaveFit(knots=knots, values=vals, s=float(s), codomain_box=(a, b),
                          boundary_slopes=_boundary_slopes(knots, vals),
                          converged=True, iterations=0)

    state = {"cone": None, "gn": None}

    def joint_project(v, weights, key, exact=True):
        pt, state[key] = _project_concave_ws(v, knots=knots, weights=weights,
                                             state=state[key], lower=a, upper=b,
                                             exact=exact)
        return pt

    def objective(phi):
        return float(np.dot(mult, np.square(ybar - h_transform(s, np.clip(phi, a, b)))))

    phi = joint_project(d_transform(s, y_clamped), mult, "cone")
    f_cur = objective(phi)
    tol = 1e-8
    converged = False
    it = 0

    def pg_step_norm(phi, g):
        step = joint_project(phi - g, mult, "cone")
        return float(np.max(np.abs(step - phi)))

    plateau = 0
    for it in range(1, max_iter + 1):
        resid = ybar - h_transform(s, phi)
        hd = h_transform_deriv(s, phi)
        g = -2.0 * mult * resid * hd
        scale = 1.0 + float(np.max(np.abs(phi)))

        # curvature-weighted proposal with a Levenberg-style damping floor so
        # flat regions keep enough weight to stay smooth in the projection;
        # the segment to the joint projection is feasible and descends unless
        # the iterate is already stationary
        damp = 1e-6 * float(np.max(np.square(hd))) + 1e-300
        disp = hd * resid / (np.square(hd) + damp)
        gn_w = mult * (np.square(hd) + damp)
        prop = joint_project(phi + disp, gn_w, "gn")
        move = prop - phi
        slope = float(np.dot(g, move))

        if float(np.max(np.abs(move))) <= tol * scale or slope >= 0.0:
            step = joint_project(phi - g, mult, "cone")
            if float(np.max(np.abs(step - phi))) <= tol * scale:
                converged = True
                break
            move = step - phi
            slope = float(np.dot(g, move))
            if slope >= 0.0:
                break  # numerically stationary but outside the check tolerance

        eta = 1.0
        accepted = False
        f_new = f_cur
        for _ in range(40):
            trial = phi + eta * move
            f_new = objective(trial)
            if f_new <= f_cur + 1e-4 * eta * slope:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            converged = pg_step_norm(phi, g) <= tol * scale
            break
        # stall exit: objective decrements below resolution mean the iterate sits
        # in a valley flatter than the step tolerance can certify
        if f_cur - f_new <= 1e-9 * (1.0 + f_cur):
            plateau += 1
            if plateau >= 20:
                phi, f_cur = trial, f_new
                converged = pg_step_norm(phi, g) <= tol * scale
                break
        else:
            plateau = 0
        phi, f_cur = trial, f_new

    if not converged and raise_on_cap:
        raise ConvergenceError("transformed concave fit hit its iteration cap",
                               residual=f_cur)

    phi = np.clip(joint_project(phi, mult, "cone"), a, b)
    return ConcaveFit(knots=knots, values=phi, s=float(s), codomain_box=(a, b),
                      boundary_slopes=_boundary_slopes(knots, phi),
                      converged=converged, iterations=it)


# ---------------------------------------------------------------------------
# Uniform-error diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeFitReport:
    """Sup-norm error of a fit against a reference on a shrunken window."""

    sup_error: float
    interior_window: tuple[float, float]
    delta: float
    sample_count: int
    window_empty: bool = False


def uniform_error(fit: ConcaveFit, truth, m: int, full_window, C_win: float = 0.5,
                  grid_size: int = 1000) -> ShapeFitReport:
    """Sup |fit - truth| over [a + delta, b - delta] with delta = C_win*(log m/m)^(1/5)."""
    a, b = float(full_window[0]), float(full_window[1])
    if not a < b:
        raise DomainError("window must be a nonempty interval")
    if m < 2:
        raise DomainError("need m >= 2 for the window shrinkage rate")
    delta = C_win * (np.log(m) / m) ** 0.2
    lo, hi = a + delta, b - delta
    if lo >= hi:
        return ShapeFitReport(sup_error=float("nan"), interior_window=(lo, hi),
                              delta=float(delta), sample_count=int(m), window_empty=True)
    grid = np.linspace(lo, hi, grid_size)
    err = np.abs(eval_fit(fit, grid) - np.asarray(truth(grid), dtype=float))
    return ShapeFitReport(sup_error=float(np.max(err)), interior_window=(lo, hi),
                          delta=float(delta), sample_count=int(m), window_empty=False)
