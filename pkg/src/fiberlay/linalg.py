"""Small iterative solvers used by the hypocoercivity diagnostics.

All routines work with plain callables on flat numpy vectors and the
Euclidean inner product; callers change variables beforehand so that the
operators they pass are symmetric.
"""
import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def conjugate_gradient(apply_A, b, x0=None, tol=1e-12, maxiter=5000, precond=None):
    """Preconditioned CG for a symmetric positive-definite operator.

    Returns ``(x, relative_residual, iterations)``; raises
    :class:`ConvergenceError` if ``tol`` is not met within ``maxiter``.
    """
    b = np.asarray(b, float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0.0, 0
    r = b - apply_A(x)
    z = r if precond is None else precond(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= tol:
            # recompute to guard against drift of the recursive residual
            res = np.linalg.norm(b - apply_A(x)) / bnorm
            if res <= tol:
                return x, res, it
        z = r if precond is None else precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"CG did not converge in {maxiter} iterations", res)


def power_iteration(apply, x0, tol=1e-10, maxiter=2000):
    """Dominant eigenvalue of a symmetric positive semi-definite operator.

    Returns ``(eigenvalue, vector, relative_residual, iterations, converged)``.
    """
    x = np.asarray(x0, float)
    x = x / np.linalg.norm(x)
    theta_prev = None
    theta = 0.0
    res = np.inf
    for it in range(1, maxiter + 1):
        y = apply(x)
        theta = float(x @ y)
        res = np.linalg.norm(y - theta * x) / max(abs(theta), 1e-300)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, x, 0.0, it, True
        x = y / ny
        if theta_prev is not None and abs(theta - theta_prev) <= tol * abs(theta) and res <= np.sqrt(tol):
            return theta, x, res, it, True
        theta_prev = theta
    return theta, x, res, maxiter, False


def block_inverse_iteration(apply_A, solve_shifted, n, block=6, deflate=None,
                            tol=1e-10, maxiter=500, seed=0):
    """Smallest eigenpair of a symmetric PSD operator by inverse subspace iteration.

    ``solve_shifted(Y)`` applies ``(A + sigma I)^{-1}`` column-wise.  Vectors in
    ``deflate`` (orthonormal columns) span a known null space that is projected
    out at every iteration.  A block of several vectors with Rayleigh-Ritz
    extraction keeps the iteration robust when the lowest eigenvalues nearly
    coincide.  Returns ``(eigenvalue, vector, relative_residual, iterations)``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block))

    def project(Y):
        if deflate is not None:
            Y = Y - deflate @ (deflate.T @ Y)
        return Y

    X, _ = np.linalg.qr(project(X))
    theta, vec, res = np.inf, X[:, 0], np.inf
    for it in range(1, maxiter + 1):
        Y = project(solve_shifted(X))
        Q, _ = np.linalg.qr(Y)
        AQ = np.column_stack([apply_A(Q[:, i]) for i in range(block)])
        small = Q.T @ AQ
        w, V = np.linalg.eigh(0.5 * (small + small.T))
        X = Q @ V
        AX = AQ @ V
        theta = float(w[0])
        vec = X[:, 0]
        res = np.linalg.norm(AX[:, 0] - theta * vec) / max(abs(theta), 1e-300)
        if res <= tol:
            return theta, vec, res, it
    raise ConvergenceError(f"inverse iteration did not converge in {maxiter} iterations", res)
