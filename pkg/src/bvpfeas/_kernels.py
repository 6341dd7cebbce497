"""
Compiled inner loops for the product-space iterations.

These mirror the reference implementations in ``projection`` and
``solvers`` operation for operation, specialised to the 3-point stencil
surfaces produced by ``discretize``. The right-hand side and its partials
are passed in as jitted functions.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .discretization import FD_STEP, FD_STEP_SECOND, BVProblem

DIVERGENCE_BOUND = 1e12
EPS = np.finfo(np.float64).eps

STATUS_RUNNING = 0
STATUS_CONVERGED = 1
STATUS_DIVERGED = 2

METHOD_NEWTON = 0
METHOD_DESCENT = 1

_jit_cache: dict = {}


def _as_jit(func):
    if isinstance(func, nb.core.dispatcher.Dispatcher):
        return func
    return nb.njit(func)


def _make_fd_dy(f):
    @nb.njit
    def fy(x, y, yp):
        d = FD_STEP * max(1.0, abs(y))
        return (f(x, y + d, yp) - f(x, y - d, yp)) / (2 * d)

    return fy


def _make_fd_dyp(f):
    @nb.njit
    def fyp(x, y, yp):
        d = FD_STEP * max(1.0, abs(yp))
        return (f(x, y, yp + d) - f(x, y, yp - d)) / (2 * d)

    return fyp


def _make_fd_hess(fy, fyp):
    @nb.njit
    def fh(x, y, yp):
        dy = FD_STEP_SECOND * max(1.0, abs(y))
        dp = FD_STEP_SECOND * max(1.0, abs(yp))
        f_yy = (fy(x, y + dy, yp) - fy(x, y - dy, yp)) / (2 * dy)
        f_pp = (fyp(x, y, yp + dp) - fyp(x, y, yp - dp)) / (2 * dp)
        f_yp = 0.5 * (
            (fyp(x, y + dy, yp) - fyp(x, y - dy, yp)) / (2 * dy)
            + (fy(x, y, yp + dp) - fy(x, y, yp - dp)) / (2 * dp)
        )
        return f_yy, f_yp, f_pp

    return fh


def _make_tuple_hess(h3):
    @nb.njit
    def fh(x, y, yp):
        a, b, c = h3(x, y, yp)
        return float(a), float(b), float(c)

    return fh


def jit_rhs(problem: BVProblem):
    """Jitted ``(f, f_y, f_y', hess)`` for a problem, compiled once per function set."""
    key = (problem.rhs, problem.rhs_dy, problem.rhs_dyp, problem.rhs_hess)
    if key in _jit_cache:
        return _jit_cache[key]
    f = _as_jit(problem.rhs)
    fy = _as_jit(problem.rhs_dy) if problem.rhs_dy is not None else _make_fd_dy(f)
    fyp = _as_jit(problem.rhs_dyp) if problem.rhs_dyp is not None else _make_fd_dyp(f)
    if problem.rhs_hess is not None:
        fh = _make_tuple_hess(_as_jit(problem.rhs_hess))
    else:
        fh = _make_fd_hess(fy, fyp)
    out = (f, fy, fyp, fh)
    _jit_cache[key] = out
    return out


@nb.njit
def _stencil(f, fy, fyp, fh, x, w, h, g, H):
    """Residual at stencil values ``w``; fills gradient ``g`` and Hessian ``H``."""
    wm, w0, wp = w[0], w[1], w[2]
    s = (wp - wm) / (2 * h)
    phi = (wp - 2 * w0 + wm) / h**2 - f(x, w0, s)
    a = fy(x, w0, s)
    b = fyp(x, w0, s)
    g[0] = 1 / h**2 + b / (2 * h)
    g[1] = -2 / h**2 - a
    g[2] = 1 / h**2 - b / (2 * h)
    f_yy, f_yyp, f_pp = fh(x, w0, s)
    c = 1 / (2 * h)
    H[0, 0] = -(f_pp * c * c)
    H[0, 1] = -(-f_yyp * c)
    H[0, 2] = -(-f_pp * c * c)
    H[1, 0] = H[0, 1]
    H[1, 1] = -f_yy
    H[1, 2] = -(f_yyp * c)
    H[2, 0] = H[0, 2]
    H[2, 1] = H[1, 2]
    H[2, 2] = -(f_pp * c * c)
    return phi


@nb.njit
def _solve4(J, F, d, n):
    """Solve ``J d = -F`` (size n <= 4) by elimination with partial pivoting."""
    A = np.empty((4, 5))
    for i in range(n):
        for j in range(n):
            A[i, j] = J[i, j]
        A[i, n] = -F[i]
    for col in range(n):
        piv = col
        best = abs(A[col, col])
        for r in range(col + 1, n):
            if abs(A[r, col]) > best:
                best = abs(A[r, col])
                piv = r
        if best < 1e-300:
            return False
        if piv != col:
            for j in range(n + 1):
                tmp = A[col, j]
                A[col, j] = A[piv, j]
                A[piv, j] = tmp
        for r in range(col + 1, n):
            m = A[r, col] / A[col, col]
            for j in range(col, n + 1):
                A[r, j] -= m * A[col, j]
    for i in range(n - 1, -1, -1):
        acc = A[i, n]
        for j in range(i + 1, n):
            acc -= A[i, j] * d[j]
        d[i] = acc / A[i, i]
    for i in range(n):
        if not math.isfinite(d[i]):
            return False
    return True


@nb.njit
def _newton_from(f, fy, fyp, fh, xn, h, u, free, x, tol, max_iter, g, H):
    """Lagrange-Newton on the free stencil coordinates, starting from ``(x, 0)``.

    Returns (iterations, singular). ``x`` is updated in place.
    """
    idx = np.empty(3, dtype=np.int64)
    k = 0
    for t in range(3):
        if free[t]:
            idx[k] = t
            k += 1
    J = np.zeros((4, 4))
    F = np.zeros(4)
    d = np.zeros(4)
    lam = 0.0
    for it in range(max_iter):
        phi = _stencil(f, fy, fyp, fh, xn, x, h, g, H)
        nrm2 = 0.0
        for a in range(k):
            t = idx[a]
            F[a] = u[t] - x[t] + lam * g[t]
            nrm2 += F[a] * F[a]
        F[k] = phi
        if (it > 0 or phi == 0.0) and abs(phi) <= tol and math.sqrt(nrm2) <= tol:
            return it, False
        for a in range(k):
            for b in range(k):
                J[a, b] = lam * H[idx[a], idx[b]]
            J[a, a] -= 1.0
            J[a, k] = g[idx[a]]
            J[k, a] = g[idx[a]]
        J[k, k] = 0.0
        if not _solve4(J, F, d, k + 1):
            return it, True
        step2 = 0.0
        xmax = 0.0
        for a in range(k):
            t = idx[a]
            x[t] += d[a]
            step2 += d[a] * d[a]
            if abs(x[t]) > xmax:
                xmax = abs(x[t])
        lam += d[k]
        step2 += d[k] * d[k]
        if math.sqrt(step2) <= max(tol, 4 * EPS * (1.0 + xmax)):
            return it + 1, False
    return max_iter, False


@nb.njit
def _project_newton(f, fy, fyp, fh, xn, h, u, free, out, tol, max_iter, g, H):
    for t in range(3):
        out[t] = u[t]
    its, singular = _newton_from(f, fy, fyp, fh, xn, h, u, free, out, tol, max_iter, g, H)
    if singular:
        for t in range(3):
            out[t] = u[t]
        _stencil(f, fy, fyp, fh, xn, out, h, g, H)
        gn = 0.0
        nfree = 0
        for t in range(3):
            if free[t]:
                gn += g[t] * g[t]
                nfree += 1
        gn = math.sqrt(gn)
        for t in range(3):
            if free[t]:
                out[t] = u[t] + 1e-6 * (g[t] / gn if gn > 0 else 1.0 / math.sqrt(nfree))
        more, singular = _newton_from(f, fy, fyp, fh, xn, h, u, free, out, tol, max_iter, g, H)
        its += more
    return its


@nb.njit
def _merit(f, fy, fyp, fh, xn, h, u, free, x, mu, s, g, H, r):
    phi = _stencil(f, fy, fyp, fh, xn, x, h, g, H)
    val = 0.0
    for t in range(3):
        if free[t]:
            r[t] = u[t] - x[t] + (mu / s) * g[t]
            val += r[t] * r[t]
        else:
            r[t] = 0.0
    return 0.5 * (val + (phi / s) ** 2), phi


@nb.njit
def _project_descent(f, fy, fyp, fh, xn, h, u, free, out, tol, max_iter, g, H):
    """Scaled steepest descent on the merit function (see projection.project_merit_descent)."""
    r = np.zeros(3)
    gx = np.zeros(3)
    xt = np.zeros(3)
    for t in range(3):
        out[t] = u[t]
    _stencil(f, fy, fyp, fh, xn, out, h, g, H)
    s = 0.0
    for t in range(3):
        if free[t]:
            s += g[t] * g[t]
    s = max(1.0, math.sqrt(s))
    change_tol = 0.5 * (tol / s) ** 2
    mu = 0.0
    value, phi = _merit(f, fy, fyp, fh, xn, h, u, free, out, mu, s, g, H, r)
    its = 0
    for it in range(1, max_iter + 1):
        its = it
        rn = 0.0
        for t in range(3):
            rn += r[t] * r[t]
        if (it > 1 or phi == 0.0) and abs(phi) <= tol and math.sqrt(rn) <= tol:
            its = it - 1
            break
        gm = 0.0
        gn2 = 0.0
        for t in range(3):
            if free[t]:
                hr = 0.0
                for q in range(3):
                    if free[q]:
                        hr += H[t, q] * r[q]
                gx[t] = -r[t] + (mu / s) * hr + (phi / s**2) * g[t]
                gm += g[t] * r[t]
                gn2 += gx[t] * gx[t]
            else:
                gx[t] = 0.0
        gm /= s
        gn2 += gm * gm
        if gn2 == 0.0:
            break
        step = 1.0
        accepted = False
        tval = 0.0
        tphi = 0.0
        for _ in range(40):
            for t in range(3):
                xt[t] = out[t] - step * gx[t]
            tval, tphi = _merit(f, fy, fyp, fh, xn, h, u, free, xt, mu - step * gm, s, g, H, r)
            if tval <= value - 1e-4 * step * gn2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # restore derivative buffers at the current point
            _merit(f, fy, fyp, fh, xn, h, u, free, out, mu, s, g, H, r)
            break
        prev = value
        for t in range(3):
            out[t] = xt[t]
        mu = mu - step * gm
        value = tval
        phi = tphi
        if prev - value < change_tol:
            break
    return its


@nb.njit
def _shadow_into(X, touch, cnt, out):
    M, N = X.shape
    for j in range(N):
        acc = 0.0
        for b in range(M):
            if touch[b, j]:
                acc += X[b, j]
        out[j] = acc / cnt[j]


@nb.njit
def _diameter(X):
    M, N = X.shape
    best = 0.0
    for a in range(M):
        for b in range(a + 1, M):
            acc = 0.0
            for j in range(N):
                dlt = X[a, j] - X[b, j]
                acc += dlt * dlt
            if acc > best:
                best = acc
    return math.sqrt(best)


@nb.njit
def max_abs_residual(f, fy, fyp, fh, xs, h, alpha, beta, w):
    N = w.shape[0]
    g = np.zeros(3)
    H = np.zeros((3, 3))
    loc = np.zeros(3)
    worst = 0.0
    for k in range(N):
        loc[0] = alpha if k == 0 else w[k - 1]
        loc[1] = w[k]
        loc[2] = beta if k == N - 1 else w[k + 1]
        phi = _stencil(f, fy, fyp, fh, xs[k], loc, h, g, H)
        if abs(phi) > worst or not math.isfinite(phi):
            worst = abs(phi) if math.isfinite(phi) else np.inf
    return worst


@nb.njit
def product_iterate(
    f, fy, fyp, fh,
    xs, h, alpha, beta,
    X, group, touch, cnt,
    is_dr, method, tol, adapt_alpha, max_inner,
    max_outer, refs, truths, weight,
    eps_tol, stop_rel, res_tol,
    sh_prev, stride,
    rel_out, eref_out, iref_out, etrue_out, shadows_out, inner_out,
):
    """Run up to ``max_outer`` DR (``is_dr``) or AP steps on ``X`` in place.

    Returns ``(iterations_done, status)``. Per-iterate diagnostics go into the
    ``*_out`` arrays; shadows are stored every ``stride`` iterates.
    """
    M, N = X.shape
    R = np.empty((M, N))
    Q = np.empty(N)
    sh = np.empty(N)
    u = np.empty(3)
    out = np.empty(3)
    free = np.empty(3, dtype=np.bool_)
    g = np.zeros(3)
    H = np.zeros((3, 3))
    nref = refs.shape[0]
    ntrue = truths.shape[0]
    status = STATUS_RUNNING
    done = 0
    for m in range(max_outer):
        if is_dr and adapt_alpha > 0.0:
            tau = max(1e-14, adapt_alpha * _diameter(X))
        else:
            tau = tol
        for b in range(M):
            for j in range(N):
                R[b, j] = X[b, j]
        inner = 0
        for k in range(N):
            blk = group[k]
            for t in range(3):
                p = k - 1 + t
                if p < 0:
                    u[t] = alpha
                    free[t] = False
                elif p >= N:
                    u[t] = beta
                    free[t] = False
                else:
                    u[t] = X[blk, p]
                    free[t] = True
            if method == METHOD_NEWTON:
                inner += _project_newton(f, fy, fyp, fh, xs[k], h, u, free, out, tau, max_inner, g, H)
            else:
                inner += _project_descent(f, fy, fyp, fh, xs[k], h, u, free, out, tau, max_inner, g, H)
            for t in range(3):
                if free[t]:
                    p = k - 1 + t
                    if is_dr:
                        R[blk, p] = 2 * out[t] - X[blk, p]
                    else:
                        R[blk, p] = out[t]
        _shadow_into(R, touch, cnt, Q)
        if is_dr:
            for b in range(M):
                for j in range(N):
                    X[b, j] = Q[j] - 0.5 * R[b, j] + 0.5 * X[b, j]
            _shadow_into(X, touch, cnt, sh)
        else:
            for b in range(M):
                for j in range(N):
                    X[b, j] = Q[j]
            for j in range(N):
                sh[j] = Q[j]
        done = m + 1
        inner_out[m] = inner
        bad = False
        rel = 0.0
        for j in range(N):
            if not math.isfinite(sh[j]) or abs(sh[j]) > DIVERGENCE_BOUND:
                bad = True
            dlt = sh[j] - sh_prev[j]
            rel += dlt * dlt
            sh_prev[j] = sh[j]
        rel = math.sqrt(rel)
        rel_out[m] = rel
        best = np.inf
        ibest = -1
        for r in range(nref):
            acc = 0.0
            for j in range(N):
                dlt = sh[j] - refs[r, j]
                acc += dlt * dlt
            acc *= weight
            eref_out[m, r] = acc
            if acc < best:
                best = acc
                ibest = r
        iref_out[m] = ibest
        for r in range(ntrue):
            acc = 0.0
            for j in range(N):
                dlt = sh[j] - truths[r, j]
                acc += dlt * dlt
            etrue_out[m, r] = acc * weight
        if done % stride == 0:
            for j in range(N):
                shadows_out[done // stride - 1, j] = sh[j]
        if bad:
            status = STATUS_DIVERGED
            break
        if nref > 0 and best < eps_tol:
            status = STATUS_CONVERGED
            break
        if rel < stop_rel:
            if max_abs_residual(f, fy, fyp, fh, xs, h, alpha, beta, sh) <= res_tol:
                status = STATUS_CONVERGED
                break
    return done, status
