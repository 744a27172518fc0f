"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written as straight-line, readable code on
a separate path from the library: exhaustive subset enumeration for
Shapley values, damped Newton for the penalized logistic objective, and an
extended-precision log-posterior evaluation.
"""

import math
from itertools import combinations

import numpy as np


# ---------------------------------------------------------------------------
# Path-dependent expectation game and exhaustive Shapley values
# ---------------------------------------------------------------------------

def expvalue(node, x, subset):
    """Tree expectation with features outside ``subset`` marginalized by
    recorded cover fractions; features in ``subset`` follow ``x``."""
    if node.is_leaf:
        return node.value
    if node.feature_index in subset:
        child = node.left if x[node.feature_index] <= node.threshold else node.right
        return expvalue(child, x, subset)
    frac_left = node.left.cover / node.cover
    return (frac_left * expvalue(node.left, x, subset)
            + (1.0 - frac_left) * expvalue(node.right, x, subset))


def brute_force_shapley(ensemble, x):
    """Exhaustive-subset Shapley attribution of the ensemble margin.

    Returns (attributions, base_value) with the same value function the
    library uses: present features follow x, absent features are averaged
    with cover weights. Cost is p * 2**p per tree; keep p small.
    """
    p = ensemble.p
    features = list(range(p))
    phi = np.zeros(p)
    base = ensemble.init_logodds
    for tree in ensemble.trees:
        base += ensemble.learning_rate * expvalue(tree, x, frozenset())
        for j in features:
            others = [k for k in features if k != j]
            for size in range(p):
                weight = (math.factorial(size) * math.factorial(p - size - 1)
                          / math.factorial(p))
                for subset in combinations(others, size):
                    s = frozenset(subset)
                    delta = (expvalue(tree, x, s | {j})
                             - expvalue(tree, x, s))
                    phi[j] += ensemble.learning_rate * weight * delta
    return phi, base


# ---------------------------------------------------------------------------
# Damped Newton for 0.5*l2*||w||^2 + C * sum log(1 + exp(-s z))
# ---------------------------------------------------------------------------

def damped_newton_logreg(X, y, C=1.0, l2=1.0, fit_intercept=True,
                         tol=1e-12, max_iter=200):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if fit_intercept:
        X = np.column_stack([X, np.ones(X.shape[0])])
    d = X.shape[1]
    mask = np.ones(d)
    if fit_intercept:
        mask[-1] = 0.0
    w = np.zeros(d)

    def value(w):
        z = X @ w
        return (0.5 * l2 * float((w * mask) @ (w * mask))
                + C * float(np.logaddexp(0.0, -(2 * y - 1) * z).sum()))

    for _ in range(max_iter):
        z = X @ w
        prob = 1.0 / (1.0 + np.exp(-z))
        grad = l2 * w * mask + C * (X.T @ (prob - y))
        if np.max(np.abs(grad)) < tol:
            break
        weights = prob * (1.0 - prob)
        hessian = C * (X.T @ (X * weights[:, None])) + l2 * np.diag(mask)
        step = np.linalg.solve(hessian, grad)
        t = 1.0
        base = value(w)
        while value(w - t * step) > base - 1e-4 * t * float(grad @ step):
            t *= 0.5
            if t < 1e-12:
                break
        w = w - t * step
    return w


# ---------------------------------------------------------------------------
# Extended-precision straight-line log-posterior
# ---------------------------------------------------------------------------

def longdouble_log_posterior(mu, log_sigma, beta_raw, Xs, ys, beta0,
                             sigma0_diag, tau):
    """Loop-based evaluation in float80, keeping every constant."""
    ld = np.longdouble
    mu = np.asarray(mu, dtype=ld)
    beta_raw = np.asarray(beta_raw, dtype=ld)
    beta0 = np.asarray(beta0, dtype=ld)
    sigma0 = np.asarray(sigma0_diag, dtype=ld)
    tau = ld(tau)
    log_sigma = ld(log_sigma)
    sigma = np.exp(log_sigma)
    two_pi = ld(2) * ld(np.pi)

    total = ld(0)
    for k in range(mu.size):
        total += (-(mu[k] - beta0[k]) ** 2 / (ld(2) * sigma0[k])
                  - ld(0.5) * np.log(two_pi * sigma0[k]))
    total += (ld(0.5) * np.log(ld(2) / ld(np.pi)) - np.log(tau)
              - sigma * sigma / (ld(2) * tau * tau) + log_sigma)
    for j in range(beta_raw.shape[0]):
        for k in range(beta_raw.shape[1]):
            total += (-ld(0.5) * beta_raw[j, k] ** 2
                      - ld(0.5) * np.log(two_pi))
    for j, (X, y) in enumerate(zip(Xs, ys)):
        X = np.asarray(X, dtype=ld)
        beta_j = mu + sigma * beta_raw[j]
        for i in range(X.shape[0]):
            z = ld(0)
            for k in range(X.shape[1]):
                z += X[i, k] * beta_j[k]
            s = ld(2) * ld(float(y[i])) - ld(1)
            total += -np.logaddexp(ld(0), -s * z)
    return float(total)
