"""Independent soft-margin SVM dual solved with cvxopt's interior-point QP."""
import numpy as np
from cvxopt import matrix, solvers

from zoomdesc.apps.segment import kernel_matrix


def dual_svm(x, y, C, kernel, gamma):
    n = len(y)
    K = kernel_matrix(x, x, kernel, gamma)
    Q = np.outer(y, y) * K
    solvers.options.update(show_progress=False, abstol=1e-11, reltol=1e-11, feastol=1e-11, maxiters=200)
    sol = solvers.qp(matrix(Q + 1e-12 * np.eye(n)), matrix(-np.ones(n)),
                     matrix(np.vstack([-np.eye(n), np.eye(n)])), matrix(np.r_[np.zeros(n), np.full(n, C)]),
                     matrix(y.reshape(1, -1).astype(np.float64)), matrix(0.0))
    a = np.array(sol["x"]).ravel()
    dual_obj = a.sum() - 0.5 * a @ Q @ a
    g = K @ (a * y)
    lo, hi = a <= 1e-6 * C, a >= C * (1 - 1e-6)
    free = ~lo & ~hi
    if free.any():
        b = float(np.mean(y[free] - g[free]))
    else:
        # every multiplier sits at a bound, so b is only pinned to the KKT interval; take its midpoint
        r = y - g
        below = (lo & (y > 0)) | (hi & (y < 0))  # constraints of the form b >= r_i
        b = 0.5 * (r[below].max(initial=-np.inf) + r[~below].min(initial=np.inf))
        if not np.isfinite(b):
            b = float(r[below].max()) if below.any() else float(r[~below].min())
    f = g + b
    return dual_obj, f, a
