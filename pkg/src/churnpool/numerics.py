"""Numerically stable scalar kernels shared across modules."""

from __future__ import annotations

import numpy as np

__all__ = ["PROB_CLIP", "sigmoid", "binary_log_loss", "log_sigmoid", "norm_ppf"]

# Probabilities are clipped to [PROB_CLIP, 1 - PROB_CLIP] before any log.
PROB_CLIP = 1e-12


def sigmoid(z):
    """Logistic function, overflow-safe for any float64 input."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def log_sigmoid(z):
    """log(sigmoid(z)) computed as -log1p(exp(-z)) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return -np.logaddexp(0.0, -z)


def binary_log_loss(labels, probs) -> float:
    """Mean negative log-likelihood with probabilities clipped for stability."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.mean(labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs)))


def norm_ppf(q):
    """Standard normal quantile function (Wichura's AS241 rational fit).

    Accurate to roughly 1e-15 over (0, 1); endpoints map to +-inf.
    """
    q = np.asarray(q, dtype=np.float64)
    out = np.full_like(q, np.nan)
    out[q == 0.0] = -np.inf
    out[q == 1.0] = np.inf
    inner = (q > 0.0) & (q < 1.0)
    p = q[inner] - 0.5

    central = np.abs(p) <= 0.425
    r = 0.180625 - p[central] ** 2
    num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
              + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
            + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
    den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
              + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
            + 4.2313330701600911252e1) * r + 1.0)
    vals = np.empty(p.shape)
    vals[central] = p[central] * num / den

    tail = ~central
    qq = q[inner][tail]
    rr = np.sqrt(-np.log(np.minimum(qq, 1.0 - qq)))
    near = rr <= 5.0
    r1 = rr[near] - 1.6
    num1 = (((((((7.74545014278341407640e-4 * r1 + 2.27238449892691845833e-2) * r1
                 + 2.41780725177450611770e-1) * r1 + 1.27045825245236838258e0) * r1
               + 3.64784832476320460504e0) * r1 + 5.76949722146069140550e0) * r1
             + 4.63033784615654529590e0) * r1 + 1.42343711074968357734e0)
    den1 = (((((((1.05075007164441684324e-9 * r1 + 5.47593808499534494600e-4) * r1
                 + 1.51986665636164571966e-2) * r1 + 1.48103976427480074590e-1) * r1
               + 6.89767334985100004550e-1) * r1 + 1.67638483018380384940e0) * r1
             + 2.05319162663775882187e0) * r1 + 1.0)
    r2 = rr[~near] - 5.0
    num2 = (((((((2.01033439929228813265e-7 * r2 + 2.71155556874348757815e-5) * r2
                 + 1.24266094738807843860e-3) * r2 + 2.65321895265761230930e-2) * r2
               + 2.96560571828504891230e-1) * r2 + 1.78482653991729133580e0) * r2
             + 5.46378491116411436990e0) * r2 + 6.65790464350110377720e0)
    den2 = (((((((2.04426310338993978564e-15 * r2 + 1.42151175831644588870e-7) * r2
                 + 1.84631831751005468180e-5) * r2 + 7.86869131145613259100e-4) * r2
               + 1.48753612908506148525e-2) * r2 + 1.36929880922735805310e-1) * r2
             + 5.99832206555887937690e-1) * r2 + 1.0)
    mag = np.empty(rr.shape)
    mag[near] = num1 / den1
    mag[~near] = num2 / den2
    vals[tail] = np.where(qq < 0.5, -mag, mag)

    out[inner] = vals
    return out if out.ndim else float(out)
