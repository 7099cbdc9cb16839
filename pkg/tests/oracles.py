"""Independent reference computations used by several test modules."""

import numpy as np
from scipy.optimize import linprog


def soft_threshold_grid(x, t, half_width=None, steps=20001):
    """Per-coordinate brute-force minimizer of 1/2 (z - x)^2 + t |z|."""
    out = np.empty_like(np.asarray(x, dtype=float))
    for i, xi in enumerate(np.ravel(x)):
        hw = half_width or abs(xi) + 1.0
        z = np.linspace(-hw, hw, steps)
        out.flat[i] = z[np.argmin(0.5 * (z - xi) ** 2 + t * np.abs(z))]
    return out


def block_soft_grid(x, t, steps=20001):
    """Radial search: the minimizer of 1/2||z - x||^2 + t||z|| lies on the ray through x."""
    x = np.asarray(x, dtype=float)
    nx = np.linalg.norm(x)
    if nx == 0:
        return np.zeros_like(x)
    r = np.linspace(0, nx, steps)
    obj = 0.5 * (r - nx) ** 2 + t * r
    return r[np.argmin(obj)] * x / nx


def nuclear_prox_objective(z, m, t):
    return 0.5 * np.sum((z - m) ** 2) + t * np.linalg.svd(z, compute_uv=False).sum()


def l1_fit_lp(f, p, d, lam1, lam2):
    """min ||a||_1 + lam1 ||f - P a||_1 + lam2 ||D f - D P a||_1 as a linear program."""
    n, k = p.shape
    m = d.shape[0]
    dp, df = d @ p, d @ f
    eye = np.eye
    z = np.zeros
    c = np.r_[z(k), np.ones(k), lam1 * np.ones(n), lam2 * np.ones(m)]
    a_ub = np.block([
        [eye(k), -eye(k), z((k, n)), z((k, m))],
        [-eye(k), -eye(k), z((k, n)), z((k, m))],
        [-p, z((n, k)), -eye(n), z((n, m))],
        [p, z((n, k)), -eye(n), z((n, m))],
        [-dp, z((m, k)), z((m, n)), -eye(m)],
        [dp, z((m, k)), z((m, n)), -eye(m)]])
    b_ub = np.r_[z(2 * k), -f, f, -df, df]
    bounds = [(None, None)] * k + [(0, None)] * (k + n + m)
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    assert res.status == 0
    return float(res.fun), res.x[:k]


def tv_sum_form(block):
    """Anisotropic total variation written as explicit neighbour sums."""
    b = np.asarray(block, dtype=float)
    total = 0.0
    rows, cols = b.shape
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols:
                total += abs(b[i, j + 1] - b[i, j])
            if i + 1 < rows:
                total += abs(b[i + 1, j] - b[i, j])
    return total



def _pair(ang):
    u = np.array([np.cos(ang[0]), np.sin(ang[0])])
    v = np.array([np.cos(ang[1]), np.sin(ang[1])])
    return np.outer(u, v).ravel()


def svt_cutting_plane(m, t, steps=60, max_cuts=200):
    """Nuclear-norm prox of a 2 x 2 matrix as M minus its projection onto the spectral ball.

    The ball {Y : u'Yv <= t for all unit u, v} is handled by cutting planes:
    the most violated direction pair comes from an angle grid refined by a
    local search, and the projection is a small QP over the cuts found so far.
    """
    from scipy.optimize import minimize

    m = np.asarray(m, dtype=float)
    a = np.linspace(0, np.pi, steps, endpoint=False)
    b = np.linspace(0, 2 * np.pi, 2 * steps, endpoint=False)
    grid = np.array(np.meshgrid(a, b, indexing="ij")).reshape(2, -1).T
    ca, sa, cb, sb = np.cos(grid[:, 0]), np.sin(grid[:, 0]), np.cos(grid[:, 1]), np.sin(grid[:, 1])
    rows = np.stack([ca * cb, ca * sb, sa * cb, sa * sb], 1)
    target = m.ravel()
    y = target.copy()
    cuts = []
    for _ in range(max_cuts):
        start = grid[int(np.argmax(rows @ y))]
        best = minimize(lambda ang: -_pair(ang) @ y, start, method="Nelder-Mead",
                        options={"xatol": 1e-8, "fatol": 1e-12})
        if -best.fun <= t * (1 + 1e-5):
            break
        cuts.append(_pair(best.x))
        c = np.array(cuts)
        res = minimize(lambda z: 0.5 * np.sum((z - target) ** 2), y, jac=lambda z: z - target,
                       constraints=[{"type": "ineq", "fun": lambda z: t - c @ z, "jac": lambda z: -c}],
                       method="SLSQP", options={"ftol": 1e-15, "maxiter": 500})
        y = res.x
    return (target - y).reshape(m.shape)
