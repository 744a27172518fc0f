"""Three-level hierarchical Bayesian logistic regression.

Level 1 places a Gaussian prior (from the transfer layer) on the population
coefficient mean and a HalfNormal prior on the population scale; level 2
draws per-entity coefficient vectors around the population mean; level 3 is
a Bernoulli likelihood through the logistic link.

Everything is expressed in unconstrained, non-centered coordinates

    theta = (mu, log_sigma, beta_raw[0], ..., beta_raw[J-1])   (row-major)

with per-entity coefficients recovered as ``beta_j = mu + sigma * beta_raw_j``
and ``sigma = exp(log_sigma)``.  The log-posterior keeps all normalization
constants (including the HalfNormal's factor sqrt(2/pi) and the Jacobian of
the log transform), so independent evaluations can match it exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .base import BaseEstimator, check_is_fitted
from .data import SMECollection
from .errors import ValidationError
from .logreg import fit_penalized_logreg
from .numerics import sigmoid
from .nuts import Diagnostics, PosteriorTrace, SamplerConfig, sample
from .validation import as_float_matrix, as_float_vector, check_binary_labels
from .errors import ConvergenceError

__all__ = [
    "HierData",
    "HierHyper",
    "HierParams",
    "HierTarget",
    "log_posterior",
    "grad_log_posterior",
    "centered_betas",
    "posterior_predict",
    "posterior_predict_matrix",
    "shrinkage_weight",
    "ShrinkageReport",
    "shrinkage_report",
    "HierarchicalLogistic",
    "INTERCEPT_NAME",
    "INTERCEPT_PRIOR_VAR",
]

INTERCEPT_NAME = "intercept"
# Weakly informative prior variance for the appended intercept coefficient
# (the transfer prior has no intercept entry).
INTERCEPT_PRIOR_VAR = 4.0

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Per-entity MLE coefficients beyond this magnitude are treated as
# separation and excluded from shrinkage summaries.
_SEPARATION_LIMIT = 1e2
_MLE_RIDGE = 1e-6


@dataclass(frozen=True)
class HierData:
    """Per-entity design matrices and labels sharing one feature space."""

    Xs: tuple[np.ndarray, ...]
    ys: tuple[np.ndarray, ...]
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.Xs) != len(self.ys) or len(self.Xs) == 0:
            raise ValidationError("need matching, nonempty Xs and ys")
        p = len(self.feature_names)
        Xs, ys = [], []
        for X, y in zip(self.Xs, self.ys):
            X = np.asarray(X, dtype=np.float64).reshape(-1, p)
            y = check_binary_labels(np.asarray(y).reshape(-1))
            if X.shape[0] != y.shape[0]:
                raise ValidationError("entity X and y row counts differ")
            Xs.append(X)
            ys.append(y)
        object.__setattr__(self, "Xs", tuple(Xs))
        object.__setattr__(self, "ys", tuple(ys))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        # Stacked views for vectorized likelihood work.
        if sum(x.shape[0] for x in Xs):
            X_all = np.concatenate(Xs, axis=0)
            y_all = np.concatenate([y.astype(np.float64) for y in ys])
        else:
            X_all = np.empty((0, p))
            y_all = np.empty(0)
        sizes = [x.shape[0] for x in Xs]
        ends = np.cumsum(sizes)
        row_sme = np.repeat(np.arange(len(Xs)), sizes)
        object.__setattr__(self, "_X_all", X_all)
        object.__setattr__(self, "_y_all", y_all)
        object.__setattr__(self, "_one_minus_y", 1.0 - y_all)
        object.__setattr__(self, "_starts", np.r_[0, ends[:-1]].astype(np.intp))
        object.__setattr__(self, "_row_sme", row_sme)
        equal_n = len(set(sizes)) == 1 and sizes[0] > 0
        object.__setattr__(self, "_equal_n", equal_n)
        if equal_n:
            J, n = len(Xs), sizes[0]
            object.__setattr__(self, "_X3", X_all.reshape(J, n, p))
        object.__setattr__(self, "_all_nonempty", min(sizes) > 0)

    @classmethod
    def from_collection(cls, collection: SMECollection,
                        add_intercept: bool = True) -> "HierData":
        names = collection.feature_names
        Xs = [ds.features for ds in collection.smes]
        if add_intercept:
            if INTERCEPT_NAME in names:
                raise ValidationError(
                    f"feature {INTERCEPT_NAME!r} already present")
            names = names + (INTERCEPT_NAME,)
            Xs = [np.column_stack([X, np.ones(X.shape[0])]) for X in Xs]
        return cls(tuple(Xs), tuple(ds.labels for ds in collection.smes), names)

    @property
    def J(self) -> int:
        return len(self.Xs)

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def n_j(self) -> tuple[int, ...]:
        return tuple(x.shape[0] for x in self.Xs)


@dataclass(frozen=True)
class HierHyper:
    """Fixed hyperparameters: prior location/scale of the population mean
    and the HalfNormal scale of the population deviation."""

    beta0: np.ndarray
    sigma0_diag: np.ndarray
    tau: float = 2.0

    def __post_init__(self):
        beta0 = as_float_vector(self.beta0, "beta0")
        sigma0 = as_float_vector(self.sigma0_diag, "sigma0_diag", beta0.size)
        if np.any(sigma0 <= 0):
            raise ValidationError("sigma0_diag must be strictly positive")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "sigma0_diag", sigma0)

    @classmethod
    def from_prior(cls, prior, tau: float = 2.0,
                   add_intercept: bool = True) -> "HierHyper":
        """Extend a transfer prior with the intercept entry when needed."""
        beta0 = np.asarray(prior.beta0, dtype=np.float64)
        sigma0 = np.asarray(prior.sigma0_diag, dtype=np.float64)
        if add_intercept:
            beta0 = np.append(beta0, 0.0)
            sigma0 = np.append(sigma0, INTERCEPT_PRIOR_VAR)
        return cls(beta0, sigma0, tau)

    @property
    def p(self) -> int:
        return self.beta0.size


@dataclass(frozen=True)
class HierParams:
    """Unconstrained parameter point."""

    mu: np.ndarray
    log_sigma: float
    beta_raw: np.ndarray

    def __post_init__(self):
        mu = as_float_vector(self.mu, "mu")
        beta_raw = as_float_matrix(self.beta_raw, "beta_raw")
        if beta_raw.shape[1] != mu.size:
            raise ValidationError("beta_raw column count must match mu")
        if not np.isfinite(self.log_sigma):
            raise ValidationError("log_sigma must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "beta_raw", beta_raw)
        object.__setattr__(self, "log_sigma", float(self.log_sigma))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.mu, [self.log_sigma], self.beta_raw.ravel()])

    @classmethod
    def unpack(cls, theta: np.ndarray, p: int, J: int) -> "HierParams":
        theta = as_float_vector(theta, "theta", p + 1 + J * p)
        return cls(theta[:p], float(theta[p]), theta[p + 1:].reshape(J, p))


def param_names(p: int, J: int, feature_names=None) -> tuple[str, ...]:
    """Documented flat order: mu, log_sigma, beta_raw row-major."""
    if feature_names is None:
        feature_names = [str(k) for k in range(p)]
    names = [f"mu[{name}]" for name in feature_names]
    names.append("log_sigma")
    for j in range(J):
        names.extend(f"beta_raw[{j},{name}]" for name in feature_names)
    return tuple(names)


class HierTarget:
    """Sampler target: fused log-posterior and gradient over flat theta."""

    def __init__(self, data: HierData, hyper: HierHyper):
        if data.p != hyper.p:
            raise ValidationError(
                f"data has p={data.p}, hyperparameters have p={hyper.p}")
        self.data = data
        self.hyper = hyper
        self.p = data.p
        self.J = data.J
        self.dim = self.p + 1 + self.J * self.p
        self._mu_const = float(np.sum(0.5 * np.log(2.0 * math.pi
                                                   * hyper.sigma0_diag)))
        self._half_normal_const = 0.5 * math.log(2.0 / math.pi) - math.log(hyper.tau)
        self._braw_const = self.J * self.p * _HALF_LOG_2PI

    # Beyond this the HalfNormal term -sigma^2/(2 tau^2) underflows the
    # density to zero; exp() itself would overflow float64 near 710.
    _LOG_SIGMA_CAP = 300.0

    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        p, J = self.p, self.J
        data, hyper = self.data, self.hyper
        mu = theta[:p]
        log_sigma = theta[p]
        braw = theta[p + 1:].reshape(J, p)
        if log_sigma > self._LOG_SIGMA_CAP:
            # True limit of the log density; the sampler flags the step.
            return -math.inf, np.zeros(self.dim)
        sigma = math.exp(log_sigma)

        X = data._X_all
        if X.shape[0]:
            betas = mu + sigma * braw
            if data._equal_n:
                z = np.matmul(data._X3, betas[:, :, None]).ravel()
            else:
                z = np.einsum("ij,ij->i", X, betas[data._row_sme])
            # log(1 + exp(-z)) once covers both label cases:
            # ll_i = -softplus(-z) - (1 - y_i) * z, and sigmoid = exp(-softplus).
            softplus = np.logaddexp(0.0, -z)
            loglik = -(float(softplus.sum()) + float(data._one_minus_y @ z))
            err = data._y_all - np.exp(-softplus)
            if data._equal_n:
                g_beta = np.matmul(err.reshape(J, 1, -1), data._X3)[:, 0, :]
            elif data._all_nonempty:
                g_beta = np.add.reduceat(X * err[:, None], data._starts,
                                         axis=0)
            else:
                g_beta = np.zeros((J, p))
                for j in range(J):
                    lo, hi = data._starts[j], data._starts[j] + data.Xs[j].shape[0]
                    if hi > lo:
                        g_beta[j] = X[lo:hi].T @ err[lo:hi]
        else:
            loglik = 0.0
            g_beta = np.zeros((J, p))

        diff = mu - hyper.beta0
        logp = (loglik
                - 0.5 * float(np.sum(diff * diff / hyper.sigma0_diag))
                - self._mu_const
                + self._half_normal_const
                - sigma * sigma / (2.0 * hyper.tau ** 2)
                + log_sigma
                - 0.5 * float(np.sum(braw * braw))
                - self._braw_const)

        grad = np.empty(self.dim)
        grad[:p] = g_beta.sum(axis=0) - diff / hyper.sigma0_diag
        grad[p] = (sigma * float(np.sum(g_beta * braw))
                   - sigma * sigma / hyper.tau ** 2 + 1.0)
        grad[p + 1:] = (sigma * g_beta - braw).ravel()
        return logp, grad

    def init_point(self) -> np.ndarray:
        """Population mean at the transfer prior, sigma = 1, deviations 0."""
        return HierParams(self.hyper.beta0, 0.0,
                          np.zeros((self.J, self.p))).pack()

    def names(self) -> tuple[str, ...]:
        return param_names(self.p, self.J, self.data.feature_names)


def log_posterior(params: HierParams, data: HierData, hyper: HierHyper) -> float:
    """Joint unnormalized log density in unconstrained coordinates.

    All additive constants are kept: the Gaussian normalizers, the
    HalfNormal's sqrt(2/pi)/tau factor, and the log-transform Jacobian
    ``+log_sigma``.  Never returns NaN for finite inputs.
    """
    if params.mu.size != data.p or params.beta_raw.shape[0] != data.J:
        raise ValidationError("params do not match data dimensions")
    value, _ = HierTarget(data, hyper).logp_and_grad(params.pack())
    return value


def grad_log_posterior(params: HierParams, data: HierData,
                       hyper: HierHyper) -> np.ndarray:
    """Exact analytic gradient in the flat (mu, log_sigma, beta_raw) order."""
    if params.mu.size != data.p or params.beta_raw.shape[0] != data.J:
        raise ValidationError("params do not match data dimensions")
    _, grad = HierTarget(data, hyper).logp_and_grad(params.pack())
    return grad


def centered_betas(params: HierParams) -> np.ndarray:
    """Per-entity coefficients ``beta_j = mu + sigma * beta_raw_j``."""
    return params.mu + math.exp(params.log_sigma) * params.beta_raw


# ---------------------------------------------------------------------------
# Posterior predictive
# ---------------------------------------------------------------------------

def _trace_dims(trace: PosteriorTrace, p: int) -> int:
    J, rem = divmod(trace.dim - p - 1, p)
    if rem != 0 or J < 1:
        raise ValidationError(
            f"trace dim {trace.dim} incompatible with p={p}")
    return J


def _order_statistic(sorted_values: np.ndarray, q: float) -> np.ndarray:
    """Lower order statistic at level q: the ceil(q*M)-th smallest value."""
    m = sorted_values.shape[-1]
    k = min(max(int(math.ceil(q * m)), 1), m)
    return sorted_values[..., k - 1]


def posterior_predict_matrix(trace: PosteriorTrace, X, sme_index: int,
                             interval_mass: float = 0.90
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior predictive mean and credible bounds for rows of ``X``.

    Pools every retained draw of every chain.  Interval endpoints are the
    empirical ``(1-mass)/2`` and ``1-(1-mass)/2`` quantiles of the per-draw
    probabilities under the lower-order-statistic rule (so endpoints are
    always realized draws; ``interval_mass=0`` collapses both to the lower
    median).
    """
    X = as_float_matrix(X)
    p = X.shape[1]
    J = _trace_dims(trace, p)
    if not 0 <= sme_index < J:
        raise ValidationError(f"sme_index {sme_index} out of range for J={J}")
    if not 0.0 <= interval_mass < 1.0:
        raise ValidationError("interval_mass must be in [0, 1)")
    flat = trace.flat()
    mu = flat[:, :p]
    sigma = np.exp(flat[:, p])
    braw = flat[:, p + 1 + sme_index * p: p + 1 + (sme_index + 1) * p]
    betas = mu + sigma[:, None] * braw              # (M, p)
    probs = sigmoid(X @ betas.T)                    # (n, M)
    mean = probs.mean(axis=1)
    sorted_probs = np.sort(probs, axis=1)
    lo_q = (1.0 - interval_mass) / 2.0
    lower = _order_statistic(sorted_probs, lo_q)
    upper = _order_statistic(sorted_probs, 1.0 - lo_q)
    return mean, lower, upper


def posterior_predict(trace: PosteriorTrace, x, sme_index: int,
                      interval_mass: float = 0.90) -> tuple[float, float, float]:
    """Predictive mean probability and credible interval for one customer."""
    x = as_float_vector(x, "x")
    mean, lower, upper = posterior_predict_matrix(
        trace, x[None, :], sme_index, interval_mass)
    return float(mean[0]), float(lower[0]), float(upper[0])


# ---------------------------------------------------------------------------
# Shrinkage
# ---------------------------------------------------------------------------

def shrinkage_weight(sigma_industry_sq: float, sigma_within_sq: float,
                     n: int) -> float:
    """Fraction of the entity MLE retained by the approximate posterior mean:
    ``sigma_ind^2 / (sigma_ind^2 + sigma_within^2 / n)``."""
    if sigma_industry_sq < 0:
        raise ValidationError("sigma_industry_sq must be >= 0")
    if sigma_within_sq < 0:
        raise ValidationError("sigma_within_sq must be >= 0")
    if n < 1:
        raise ValidationError("n must be >= 1")
    denom = sigma_industry_sq + sigma_within_sq / n
    if denom == 0.0:
        raise ValidationError("shrinkage weight undefined when both variances are 0")
    return sigma_industry_sq / denom


@dataclass
class ShrinkageReport:
    """Per-entity, per-feature shrinkage weights plus the coefficient views
    (entity MLE, population mean, hierarchical posterior mean)."""

    lambda_jk: np.ndarray
    mle: np.ndarray
    posterior_means: np.ndarray
    population_mean: np.ndarray
    sigma_industry_sq: float
    flagged: np.ndarray
    n_j: tuple[int, ...]
    lambda_bar: float

    def to_json(self, feature_names=None) -> str:
        doc = {
            "lambda_bar": self.lambda_bar,
            "sigma_industry_sq": self.sigma_industry_sq,
            "n_j": list(self.n_j),
            "flagged_entities": [int(j) for j in np.flatnonzero(self.flagged)],
            "population_mean": [float(v) for v in self.population_mean],
            "lambda": [[float(v) for v in row] for row in self.lambda_jk],
            "mle": [[None if not np.isfinite(v) else float(v) for v in row]
                    for row in self.mle],
            "posterior_mean": [[float(v) for v in row]
                               for row in self.posterior_means],
        }
        if feature_names is not None:
            doc["feature_names"] = list(feature_names)
        return json.dumps(doc, indent=2)


def shrinkage_report(trace: PosteriorTrace, data: HierData,
                     hyper: HierHyper) -> ShrinkageReport:
    """Estimate per-entity shrinkage weights from a converged trace.

    The between-entity variance is the posterior mean of sigma^2; the
    within-entity contribution per feature is the diagonal of the inverse
    observed Fisher information at a ridge-stabilized entity MLE.  Entities
    whose MLE fails or runs away (separation) are flagged and excluded
    from the mean weight.
    """
    p, J = data.p, data.J
    _trace_dims(trace, p)
    flat = trace.flat()
    sigma_draws = np.exp(flat[:, p])
    sigma_ind_sq = float(np.mean(sigma_draws ** 2))
    population_mean = flat[:, :p].mean(axis=0)

    mle = np.full((J, p), np.nan)
    lambda_jk = np.full((J, p), np.nan)
    posterior_means = np.empty((J, p))
    flagged = np.zeros(J, dtype=bool)
    for j in range(J):
        braw = flat[:, p + 1 + j * p: p + 1 + (j + 1) * p]
        posterior_means[j] = (flat[:, :p] + sigma_draws[:, None] * braw).mean(axis=0)
        X, y = data.Xs[j], data.ys[j]
        if y.size == 0 or y.min() == y.max():
            flagged[j] = True
            continue
        try:
            w = fit_penalized_logreg(X, y, l2=_MLE_RIDGE, loss_weight=1.0,
                                     fit_intercept=False)
        except ConvergenceError:
            flagged[j] = True
            continue
        if np.max(np.abs(w)) > _SEPARATION_LIMIT:
            flagged[j] = True
            continue
        mle[j] = w
        probs = sigmoid(X @ w)
        weights = probs * (1.0 - probs)
        fisher = X.T @ (X * weights[:, None]) + _MLE_RIDGE * np.eye(p)
        asymptotic_var = np.diag(np.linalg.inv(fisher))
        lambda_jk[j] = sigma_ind_sq / (sigma_ind_sq + asymptotic_var)

    valid = lambda_jk[~flagged]
    lambda_bar = float(valid.mean()) if valid.size else math.nan
    return ShrinkageReport(lambda_jk, mle, posterior_means, population_mean,
                           sigma_ind_sq, flagged, data.n_j, lambda_bar)


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------

class HierarchicalLogistic(BaseEstimator):
    """Hierarchical Bayesian logistic regression fitted with NUTS.

    Parameters mirror the sampler configuration; the transfer prior is a
    ``PriorSpec``-shaped object (``beta0``/``sigma0_diag`` vectors) or None
    for a standard-normal prior on the population mean.  When
    ``add_intercept`` is set, a constant-1 feature is appended and given a
    weakly informative prior entry.
    """

    def __init__(self, prior=None, tau: float = 2.0, add_intercept: bool = True,
                 chains: int = 4, warmup: int = 1000, draws: int = 2000,
                 target_accept: float = 0.90, max_tree_depth: int = 10,
                 divergence_energy_threshold: float = 1000.0, seed: int = 0):
        self.prior = prior
        self.tau = tau
        self.add_intercept = add_intercept
        self.chains = chains
        self.warmup = warmup
        self.draws = draws
        self.target_accept = target_accept
        self.max_tree_depth = max_tree_depth
        self.divergence_energy_threshold = divergence_energy_threshold
        self.seed = seed
        self.trace_: PosteriorTrace | None = None
        self.diagnostics_: Diagnostics | None = None

    def _hyper(self, p_features: int) -> HierHyper:
        if self.prior is None:
            p = p_features + (1 if self.add_intercept else 0)
            return HierHyper(np.zeros(p), np.ones(p), self.tau)
        if len(self.prior.beta0) != p_features:
            raise ValidationError(
                f"prior has {len(self.prior.beta0)} entries for "
                f"{p_features} features")
        return HierHyper.from_prior(self.prior, self.tau, self.add_intercept)

    def fit(self, collection: SMECollection) -> "HierarchicalLogistic":
        data = HierData.from_collection(collection, self.add_intercept)
        hyper = self._hyper(collection.p)
        target = HierTarget(data, hyper)
        config = SamplerConfig(
            chains=self.chains, warmup=self.warmup, draws=self.draws,
            target_accept=self.target_accept,
            max_tree_depth=self.max_tree_depth,
            divergence_energy_threshold=self.divergence_energy_threshold,
            seed=self.seed, init="point", init_point=target.init_point())
        self.trace_, self.diagnostics_ = sample(target, config,
                                                param_names=target.names())
        self.data_ = data
        self.hyper_ = hyper
        self.sme_ids_ = tuple(collection.ids)
        return self

    def _prepare(self, X) -> np.ndarray:
        X = as_float_matrix(X)
        if self.add_intercept:
            X = np.column_stack([X, np.ones(X.shape[0])])
        if X.shape[1] != self.data_.p:
            raise ValidationError(
                f"X has {X.shape[1]} columns, model expects "
                f"{self.data_.p - (1 if self.add_intercept else 0)}")
        return X

    def predict_proba(self, X, sme_index: int) -> np.ndarray:
        check_is_fitted(self, "trace_")
        mean, _, _ = posterior_predict_matrix(self.trace_, self._prepare(X),
                                              sme_index)
        return mean

    def predict_interval(self, X, sme_index: int, interval_mass: float = 0.90):
        check_is_fitted(self, "trace_")
        return posterior_predict_matrix(self.trace_, self._prepare(X),
                                        sme_index, interval_mass)

    def shrinkage(self) -> ShrinkageReport:
        check_is_fitted(self, "trace_")
        return shrinkage_report(self.trace_, self.data_, self.hyper_)
