"""Pure-numpy implementations of the stepping kernels.

Used when the compiled ``loopda._kernels`` extension is unavailable, and as
the reference the compiled path is checked against. Every function returns
``bad`` = index of the first step that produced a non-finite value, or -1.
"""
import numpy as np

LORENZ63 = 0
EHRHARD_MULLER = 1

EULER = 0
RK2 = 1


def h_friction(x):
    """Friction factor h(x) for x >= 0 (array or scalar)."""
    x = np.asarray(x, dtype=float)
    poly = (44.0 * x**2 - 55.0 * x**3 + 20.0 * x**4) / 9.0
    root = np.cbrt(x)
    return np.where(x >= 1.0, root, poly)


def h_friction_prime(x):
    x = np.asarray(x, dtype=float)
    poly = (88.0 * x - 165.0 * x**2 + 80.0 * x**3) / 9.0
    # cube-root branch owns x == 1
    safe = np.where(x >= 1.0, x, 1.0)
    root = safe ** (-2.0 / 3.0) / 3.0
    return np.where(x >= 1.0, root, poly)


def rhs_batch(model, P, X):
    """Right-hand side for k states at once; P and X have shape (k, 3)."""
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    a, b, c = P[:, 0], P[:, 1], P[:, 2]
    out = np.empty_like(X)
    if model == LORENZ63:
        # a=sigma, b=rho, c=beta
        out[:, 0] = a * (y - x)
        out[:, 1] = b * x - y - x * z
        out[:, 2] = x * y - c * z
    else:
        # a=alpha, b=beta_em, c=K
        damp = 1.0 + c * h_friction(np.abs(x))
        out[:, 0] = a * (y - x)
        out[:, 1] = b * x - y * damp - x * z
        out[:, 2] = x * y - z * damp
    return out


def jacobian_one(model, p, s):
    x, y, z = s
    a, b, c = p
    if model == LORENZ63:
        return np.array([
            [-a, a, 0.0],
            [b - z, -1.0, -x],
            [y, x, -c],
        ])
    ax = abs(x)
    damp = 1.0 + c * float(h_friction(ax))
    g = c * float(np.sign(x)) * float(h_friction_prime(ax))
    return np.array([
        [-a, a, 0.0],
        [b - y * g - z, -damp, -x],
        [y - z * g, x, -damp],
    ])


@np.errstate(over="ignore", invalid="ignore")  # non-finite states are reported by the caller
def _step(model, P, X, dt, scheme):
    k1 = rhs_batch(model, P, X)
    if scheme == EULER:
        return X + dt * k1
    k2 = rhs_batch(model, P, X + dt * k1)
    return X + 0.5 * dt * (k1 + k2)


def _integrate_batch(model, P, X0, dt, nsteps, scheme, store=False):
    X = np.array(X0, dtype=float, copy=True)
    P = np.asarray(P, dtype=float)
    states = None
    if store:
        states = np.empty((nsteps + 1,) + X.shape)
        states[0] = X
    for i in range(1, nsteps + 1):
        X = _step(model, P, X, dt, scheme)
        if store:
            states[i] = X
        if not np.isfinite(X).all():
            return (states[:i + 1] if store else X), i
    return (states if store else X), -1


def trajectory_batch(model, P, X0, dt, nsteps, scheme):
    """States of k integrations at every step, shape (nsteps + 1, k, 3)."""
    return _integrate_batch(model, P, X0, dt, nsteps, scheme, store=True)


def advance_batch(model, P, X0, dt, nsteps, scheme):
    """End states of k independent integrations, shape (k, 3)."""
    return _integrate_batch(model, P, X0, dt, nsteps, scheme)


@np.errstate(over="ignore", invalid="ignore")
def tlm(model, p, x0, dt, nsteps, scheme):
    """Propagate a state and the derivative of the discrete map along it."""
    p = np.asarray(p, dtype=float)
    P = p.reshape(1, 3)
    x = np.array(x0, dtype=float).reshape(1, 3)
    L = np.eye(3)
    eye = np.eye(3)
    for i in range(1, nsteps + 1):
        J1 = jacobian_one(model, p, x[0])
        k1 = rhs_batch(model, P, x)
        if scheme == EULER:
            A = eye + dt * J1
            x = x + dt * k1
        else:
            xe = x + dt * k1
            J2 = jacobian_one(model, p, xe[0])
            k2 = rhs_batch(model, P, xe)
            A = eye + 0.5 * dt * (J1 + J2 @ (eye + dt * J1))
            x = x + 0.5 * dt * (k1 + k2)
        L = A @ L
        if not (np.isfinite(x).all() and np.isfinite(L).all()):
            return x[0], L, i
    return x[0], L, -1
