"""No-U-Turn sampler over any target exposing a log-density and gradient.

The sampler is the multinomial variant with biased progressive state
selection: each doubling proposes a state from the new subtree with
probability proportional to the subtree's total weight ``exp(-energy)``.
Warmup interleaves dual-averaging step-size adaptation with expanding
diagonal mass-matrix windows; both freeze before the sampling phase.

Targets are anything with a ``dim`` attribute and a ``logp_and_grad(theta)``
method returning ``(float, ndarray)``.  Chains are pure functions of
``(target, config, chain_index)`` given per-chain generator streams, so runs
are bit-reproducible and chains may execute in any order or in parallel.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DiagnosticError, ValidationError
from .numerics import norm_ppf
from .rng import spawn

__all__ = [
    "SamplerConfig",
    "PosteriorTrace",
    "Diagnostics",
    "FunctionTarget",
    "leapfrog",
    "find_reasonable_step_size",
    "sample",
    "compute_diagnostics",
    "rhat",
    "ess",
]

_TRACE_MAGIC = b"CPTRACE1"

# Report at most this multiple of the nominal draw count: antithetic chains
# can push the autocorrelation-based estimate far past the sample size.
ESS_CAP_FACTOR = 10.0


class FunctionTarget:
    """Adapter wrapping plain ``logp``/``grad`` callables into a target."""

    def __init__(self, dim: int, logp, grad):
        self.dim = dim
        self._logp = logp
        self._grad = grad

    def logp_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        return float(self._logp(theta)), np.asarray(self._grad(theta),
                                                    dtype=np.float64)


@dataclass
class SamplerConfig:
    """Sampler settings.

    ``init`` selects the starting strategy: ``"zero"`` starts every chain at
    the origin, ``"point"`` at ``init_point``; both add uniform jitter of
    half-width ``jitter`` per chain so split-chain diagnostics stay
    meaningful.  ``adapt_mass`` can be disabled to keep a unit mass matrix.
    """

    chains: int = 4
    warmup: int = 1000
    draws: int = 2000
    target_accept: float = 0.90
    max_tree_depth: int = 10
    divergence_energy_threshold: float = 1000.0
    seed: int = 0
    init: str = "zero"
    init_point: np.ndarray | None = None
    jitter: float = 0.1
    adapt_mass: bool = True

    def validate(self) -> None:
        if self.chains < 1:
            raise ValidationError("chains must be >= 1")
        if self.warmup < 100:
            raise ValidationError("warmup must be >= 100")
        if self.draws < 1:
            raise ValidationError("draws must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValidationError("target_accept must be in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValidationError("max_tree_depth must be >= 1")
        if self.init not in ("zero", "point"):
            raise ValidationError(f"unknown init strategy {self.init!r}")
        if self.init == "point" and self.init_point is None:
            raise ValidationError("init='point' requires init_point")

    def to_dict(self) -> dict:
        doc = {
            "chains": self.chains, "warmup": self.warmup, "draws": self.draws,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "divergence_energy_threshold": self.divergence_energy_threshold,
            "seed": self.seed, "init": self.init, "jitter": self.jitter,
            "adapt_mass": self.adapt_mass,
            "variant": "multinomial-biased-progressive",
        }
        if self.init_point is not None:
            doc["init_point"] = [float(v) for v in np.asarray(self.init_point)]
        return doc


@dataclass
class PosteriorTrace:
    """Retained post-warmup states of every chain.

    ``draws`` has shape ``(chains, draws, dim)`` in the documented flat
    parameter order of ``param_names``.
    """

    draws: np.ndarray
    divergent: np.ndarray
    step_sizes: np.ndarray
    initial_step_sizes: np.ndarray
    mass_diag: np.ndarray
    param_names: tuple[str, ...]
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=np.float64)
        if draws.ndim != 3:
            raise ValidationError("draws must have shape (chains, draws, dim)")
        if np.isnan(draws).any():
            raise ValidationError("trace contains NaN draws")
        object.__setattr__(self, "draws", draws)
        object.__setattr__(self, "divergent",
                           np.asarray(self.divergent, dtype=bool))
        object.__setattr__(self, "param_names", tuple(self.param_names))

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    @property
    def dim(self) -> int:
        return self.draws.shape[2]

    def flat(self) -> np.ndarray:
        """All chains pooled: shape (chains * draws, dim)."""
        return self.draws.reshape(-1, self.dim)

    def save(self, path) -> None:
        """Binary container: JSON header then little-endian float64 payload
        in [chain][draw][param] order."""
        header = {
            "param_names": list(self.param_names),
            "chains": self.n_chains,
            "draws": self.n_draws,
            "dim": self.dim,
            "seed": self.seed,
            "config": self.config,
            "divergent_draws": [np.flatnonzero(row).tolist()
                                for row in self.divergent],
            "step_sizes": [float(v) for v in self.step_sizes],
            "initial_step_sizes": [float(v) for v in self.initial_step_sizes],
            "mass_diag": [[float(v) for v in row] for row in self.mass_diag],
        }
        blob = json.dumps(header).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(_TRACE_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.draws, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PosteriorTrace":
        raw = Path(path).read_bytes()
        if raw[:len(_TRACE_MAGIC)] != _TRACE_MAGIC:
            raise ValidationError(f"{path} is not a trace container")
        offset = len(_TRACE_MAGIC)
        (header_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        shape = (header["chains"], header["draws"], header["dim"])
        count = shape[0] * shape[1] * shape[2]
        draws = np.frombuffer(raw, dtype="<f8", offset=offset,
                              count=count).reshape(shape)
        divergent = np.zeros(shape[:2], dtype=bool)
        for c, idx in enumerate(header["divergent_draws"]):
            divergent[c, idx] = True
        return cls(draws.astype(np.float64), divergent,
                   np.asarray(header["step_sizes"]),
                   np.asarray(header["initial_step_sizes"]),
                   np.asarray(header["mass_diag"]),
                   tuple(header["param_names"]), header["seed"],
                   header["config"])

    def to_csv(self, path) -> None:
        """One row per draw, for external inspection."""
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("chain,draw," + ",".join(self.param_names) + "\n")
            for c in range(self.n_chains):
                for s in range(self.n_draws):
                    values = ",".join(repr(float(v)) for v in self.draws[c, s])
                    fh.write(f"{c},{s},{values}\n")


@dataclass
class Diagnostics:
    """Split-chain convergence summaries for every parameter."""

    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    n_divergent: int
    mean_accept: float

    def max_rhat(self) -> float:
        return float(np.nanmax(self.rhat))

    def min_ess(self) -> float:
        return float(min(np.nanmin(self.ess_bulk), np.nanmin(self.ess_tail)))

    def to_json(self, param_names=None) -> str:
        doc = {
            "rhat": [float(v) for v in self.rhat],
            "ess_bulk": [float(v) for v in self.ess_bulk],
            "ess_tail": [float(v) for v in self.ess_tail],
            "n_divergent": int(self.n_divergent),
            "mean_accept": float(self.mean_accept),
        }
        if param_names is not None:
            doc["param_names"] = list(param_names)
        return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# Hamiltonian pieces
# ---------------------------------------------------------------------------

def leapfrog(state, step_size: float, target,
             inv_mass: np.ndarray | None = None):
    """One velocity-Verlet step ``(position, momentum) -> (position, momentum)``.

    ``inv_mass`` is the diagonal of the inverse mass matrix (defaults to
    ones).  The map is volume preserving and time reversible: composing a
    step, a momentum flip, and another step returns the start up to
    rounding.
    """
    q, r = state
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
        raise ValidationError("leapfrog state must be finite")
    if inv_mass is None:
        inv_mass = np.ones_like(q)
    _, grad = target.logp_and_grad(q)
    r_half = r + 0.5 * step_size * grad
    q_new = q + step_size * inv_mass * r_half
    _, grad_new = target.logp_and_grad(q_new)
    r_new = r_half + 0.5 * step_size * grad_new
    return q_new, r_new


def _kinetic(r: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.dot(inv_mass * r, r))


def find_reasonable_step_size(target, q0: np.ndarray, inv_mass: np.ndarray,
                              rng: np.random.Generator) -> float:
    """Doubling/halving search for a step size with ~50% acceptance."""
    logp0, grad0 = target.logp_and_grad(q0)
    r0 = rng.standard_normal(q0.size) / np.sqrt(inv_mass)
    h0 = -logp0 + _kinetic(r0, inv_mass)

    def accept_logprob(eps: float) -> float:
        r_half = r0 + 0.5 * eps * grad0
        q1 = q0 + eps * inv_mass * r_half
        logp1, grad1 = target.logp_and_grad(q1)
        if not (np.isfinite(logp1) and np.all(np.isfinite(grad1))):
            return -np.inf
        r1 = r_half + 0.5 * eps * grad1
        return min(0.0, h0 - (-logp1 + _kinetic(r1, inv_mass)))

    eps = 1.0
    log_half = math.log(0.5)
    a = 1.0 if accept_logprob(eps) > log_half else -1.0
    for _ in range(100):
        # Scale while prob^a > 2^-a, i.e. until acceptance crosses 1/2.
        if not a * accept_logprob(eps) > a * log_half:
            break
        eps *= 2.0 ** a
        if not 1e-10 < eps < 1e10:
            break
    return eps


class _DualAveraging:
    """Nesterov dual averaging on log step size (gamma/t0/kappa as published)."""

    def __init__(self, eps0: float, gamma: float = 0.05, t0: float = 10.0,
                 kappa: float = 0.75):
        self.mu = math.log(10.0 * eps0)
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def step(self, adapt_stat: float) -> None:
        """``adapt_stat`` is target acceptance minus observed acceptance."""
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * adapt_stat
        self.log_eps = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        weight = self.t ** (-self.kappa)
        self.log_eps_bar = (weight * self.log_eps
                            + (1.0 - weight) * self.log_eps_bar)

    @property
    def current(self) -> float:
        return math.exp(self.log_eps)

    @property
    def averaged(self) -> float:
        return math.exp(self.log_eps_bar)


class _Welford:
    """Running mean/variance accumulator for mass-matrix windows."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        """Sample variance shrunk toward unit with 5 pseudo-draws."""
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        return (self.n * var + 5.0) / (self.n + 5.0)


def _mass_windows(warmup: int) -> list[tuple[int, int]]:
    """Expanding (25/50/100/...) mass-estimation windows inside warmup.

    Step-size-only buffers at both ends; the final window is stretched to
    meet the terminal buffer so its estimate is frozen for sampling.
    """
    init_buf, term_buf, base = 75, 50, 25
    if warmup < init_buf + term_buf + 2 * base:
        init_buf = max(1, int(0.15 * warmup))
        term_buf = max(1, int(0.10 * warmup))
        return [(init_buf, warmup - term_buf)]
    windows = []
    start, size = init_buf, base
    last = warmup - term_buf
    while True:
        end = start + size
        if end + 2 * size > last:
            windows.append((start, last))
            break
        windows.append((start, end))
        start, size = end, size * 2
    return windows


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------

class _State:
    __slots__ = ("q", "r", "grad", "logp")

    def __init__(self, q, r, grad, logp):
        self.q = q
        self.r = r
        self.grad = grad
        self.logp = logp


class _Subtree:
    __slots__ = ("outer", "proposal", "log_sum_weight", "sum_accept",
                 "n_accept", "cont", "divergent", "inner")

    def __init__(self, inner, outer, proposal, log_sum_weight, sum_accept,
                 n_accept, cont, divergent):
        self.inner = inner
        self.outer = outer
        self.proposal = proposal
        self.log_sum_weight = log_sum_weight
        self.sum_accept = sum_accept
        self.n_accept = n_accept
        self.cont = cont
        self.divergent = divergent


def _no_uturn(minus: _State, plus: _State, inv_mass: np.ndarray) -> bool:
    """Classic criterion on the trajectory ends, in velocity space."""
    dq = plus.q - minus.q
    return (np.dot(dq, inv_mass * minus.r) >= 0.0
            and np.dot(dq, inv_mass * plus.r) >= 0.0)


class _ChainRunner:
    """Per-chain sampler state: step size, mass matrix, tree builder."""

    def __init__(self, target, config: SamplerConfig, rng: np.random.Generator):
        self.target = target
        self.config = config
        self.rng = rng
        self.inv_mass = np.ones(target.dim)
        self.eps = 1.0

    def _leapfrog(self, state: _State, eps: float) -> _State | None:
        """One integrator step with cached gradients; None when non-finite."""
        r_half = state.r + 0.5 * eps * state.grad
        q_new = state.q + eps * self.inv_mass * r_half
        logp, grad = self.target.logp_and_grad(q_new)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return None
        r_new = r_half + 0.5 * eps * grad
        return _State(q_new, r_new, grad, logp)

    def _build_tree(self, depth: int, edge: _State, direction: float,
                    h0: float) -> _Subtree:
        if depth == 0:
            new = self._leapfrog(edge, direction * self.eps)
            if new is None:
                return _Subtree(edge, edge, None, -np.inf, 0.0, 1, False, True)
            energy_error = (-new.logp + _kinetic(new.r, self.inv_mass)) - h0
            accept = math.exp(min(0.0, -energy_error))
            if energy_error > self.config.divergence_energy_threshold:
                return _Subtree(new, new, None, -np.inf, accept, 1, False, True)
            return _Subtree(new, new, new, -energy_error, accept, 1, True, False)

        first = self._build_tree(depth - 1, edge, direction, h0)
        if not first.cont:
            return first
        second = self._build_tree(depth - 1, first.outer, direction, h0)
        log_sum_weight = float(np.logaddexp(first.log_sum_weight,
                                            second.log_sum_weight))
        proposal = first.proposal
        if second.proposal is not None and (
                math.log(self.rng.uniform())
                < second.log_sum_weight - log_sum_weight):
            proposal = second.proposal
        inner, outer = first.inner, second.outer
        if direction > 0:
            ok = _no_uturn(inner, outer, self.inv_mass)
        else:
            ok = _no_uturn(outer, inner, self.inv_mass)
        return _Subtree(inner, outer, proposal, log_sum_weight,
                        first.sum_accept + second.sum_accept,
                        first.n_accept + second.n_accept,
                        second.cont and ok,
                        first.divergent or second.divergent)

    def transition(self, state: _State) -> tuple[_State, bool, float]:
        """One NUTS draw with biased progressive multinomial selection."""
        rng = self.rng
        r0 = rng.standard_normal(self.target.dim) / np.sqrt(self.inv_mass)
        current = _State(state.q, r0, state.grad, state.logp)
        h0 = -current.logp + _kinetic(r0, self.inv_mass)
        minus, plus, proposal = current, current, current
        log_sum_weight = 0.0
        sum_accept, n_accept = 0.0, 0
        divergent = False
        for depth in range(self.config.max_tree_depth):
            direction = 1.0 if rng.uniform() < 0.5 else -1.0
            edge = plus if direction > 0 else minus
            subtree = self._build_tree(depth, edge, direction, h0)
            sum_accept += subtree.sum_accept
            n_accept += subtree.n_accept
            divergent = divergent or subtree.divergent
            if not subtree.cont:
                break
            # Biased progressive sampling favors the fresh subtree.
            if (subtree.log_sum_weight > log_sum_weight
                    or math.log(rng.uniform())
                    < subtree.log_sum_weight - log_sum_weight):
                proposal = subtree.proposal
            log_sum_weight = float(np.logaddexp(log_sum_weight,
                                                subtree.log_sum_weight))
            if direction > 0:
                plus = subtree.outer
            else:
                minus = subtree.outer
            if not _no_uturn(minus, plus, self.inv_mass):
                break
        return proposal, divergent, sum_accept / max(n_accept, 1)


def _run_chain(target, config: SamplerConfig, rng: np.random.Generator,
               q0: np.ndarray) -> dict:
    runner = _ChainRunner(target, config, rng)
    logp, grad = target.logp_and_grad(q0)
    if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
        raise ValidationError("target is not finite at the initial point")
    state = _State(q0, np.zeros_like(q0), grad, logp)

    eps0 = find_reasonable_step_size(target, q0, runner.inv_mass, rng)
    initial_eps = eps0
    averaging = _DualAveraging(eps0)
    windows = _mass_windows(config.warmup) if config.adapt_mass else []
    window_idx = 0
    welford = _Welford(target.dim)

    warmup_divergent = 0
    for m in range(config.warmup):
        runner.eps = averaging.current
        state, divergent, accept_stat = runner.transition(state)
        warmup_divergent += divergent
        averaging.step(config.target_accept - accept_stat)
        if window_idx < len(windows):
            start, end = windows[window_idx]
            if start <= m < end:
                welford.push(state.q)
            if m == end - 1:
                runner.inv_mass = welford.regularized_variance()
                welford = _Welford(target.dim)
                window_idx += 1
                eps0 = find_reasonable_step_size(target, state.q,
                                                 runner.inv_mass, rng)
                averaging = _DualAveraging(eps0)
    if warmup_divergent == config.warmup:
        raise DiagnosticError(
            "every warmup iteration diverged; increase target_accept "
            "(for example 0.95) or reparameterize the model")

    runner.eps = averaging.averaged
    draws = np.empty((config.draws, target.dim))
    divergent_flags = np.zeros(config.draws, dtype=bool)
    accept_stats = np.empty(config.draws)
    for s in range(config.draws):
        state, divergent, accept_stat = runner.transition(state)
        draws[s] = state.q
        divergent_flags[s] = divergent
        accept_stats[s] = accept_stat
    return {
        "draws": draws,
        "divergent": divergent_flags,
        "mean_accept": float(accept_stats.mean()),
        "final_eps": runner.eps,
        "initial_eps": initial_eps,
        "inv_mass": runner.inv_mass,
    }


def sample(target, config: SamplerConfig, param_names=None,
           workers: int = 1) -> tuple[PosteriorTrace, Diagnostics]:
    """Run NUTS chains on ``target`` and compute convergence diagnostics.

    Warmup draws are discarded; the trace holds exactly ``chains x draws``
    post-warmup states.  Chains use independent generator streams, so
    identical ``(target, config)`` produce bit-identical traces regardless
    of ``workers``; the target's ``logp_and_grad`` must be thread-safe
    when ``workers > 1``.
    """
    config.validate()
    dim = target.dim
    if config.init == "point":
        base = np.asarray(config.init_point, dtype=np.float64)
        if base.shape != (dim,):
            raise ValidationError(
                f"init_point has shape {base.shape}, expected ({dim},)")
    else:
        base = np.zeros(dim)
    if param_names is None:
        param_names = tuple(f"theta[{i}]" for i in range(dim))
    elif len(param_names) != dim:
        raise ValidationError("param_names length must equal target dim")

    rngs = spawn(config.seed, config.chains)
    starts = [base + rngs[c].uniform(-config.jitter, config.jitter, dim)
              for c in range(config.chains)]
    if workers > 1 and config.chains > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=min(workers, config.chains)) as pool:
            results = list(pool.map(
                lambda c: _run_chain(target, config, rngs[c], starts[c]),
                range(config.chains)))
    else:
        results = [_run_chain(target, config, rngs[c], starts[c])
                   for c in range(config.chains)]

    trace = PosteriorTrace(
        draws=np.stack([r["draws"] for r in results]),
        divergent=np.stack([r["divergent"] for r in results]),
        step_sizes=np.array([r["final_eps"] for r in results]),
        initial_step_sizes=np.array([r["initial_eps"] for r in results]),
        mass_diag=np.stack([r["inv_mass"] for r in results]),
        param_names=tuple(param_names),
        seed=config.seed,
        config=config.to_dict(),
    )
    mean_accept = float(np.mean([r["mean_accept"] for r in results]))
    return trace, compute_diagnostics(trace, mean_accept)


def compute_diagnostics(trace: PosteriorTrace,
                        mean_accept: float = math.nan) -> Diagnostics:
    """Per-parameter split R-hat and bulk/tail ESS for a stored trace."""
    dim = trace.dim
    rhats = np.full(dim, np.nan)
    bulk = np.empty(dim)
    tail = np.empty(dim)
    for d in range(dim):
        chains = trace.draws[:, :, d]
        if trace.n_chains >= 2 and trace.n_draws >= 4:
            rhats[d] = rhat(chains)
        bulk[d], tail[d] = ess(chains)
    return Diagnostics(rhats, bulk, tail,
                       int(trace.divergent.sum()), mean_accept)


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def _split_chains(chains: np.ndarray) -> np.ndarray:
    """Halve every chain; drops one trailing draw per chain when odd."""
    half = chains.shape[1] // 2
    return np.concatenate([chains[:, :half], chains[:, half:2 * half]], axis=0)


def rhat(chain_draws) -> float:
    """Split-chain potential scale reduction factor.

    Every chain is halved (``2C`` pseudo-chains of length ``N = S // 2``)
    and ``sqrt((N-1)/N + B/(N W))`` is returned, with ``B`` and ``W`` the
    standard between/within mean squares over the split chains.  Constant
    chains yield ``inf`` with a warning.
    """
    chains = np.asarray(chain_draws, dtype=np.float64)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 4:
        raise ValidationError("rhat needs a (chains >= 2, draws >= 4) array")
    split = _split_chains(chains)
    n = split.shape[1]
    means = split.mean(axis=1)
    w = float(split.var(axis=1, ddof=1).mean())
    if w <= 0.0:
        warnings.warn("zero within-chain variance; rhat undefined", stacklevel=2)
        return math.inf
    b = n * float(means.var(ddof=1))
    return math.sqrt((n - 1) / n + b / (n * w))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance (denominator n) of one chain via FFT."""
    n = x.size
    centered = x - x.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    f = np.fft.rfft(centered, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / n


def _ess_from_chains(chains: np.ndarray) -> float:
    """Combined-chain ESS with Geyer initial-monotone pair truncation."""
    c, n = chains.shape
    acov = np.stack([_autocovariance(chains[i]) for i in range(c)])
    mean_var = float((acov[:, 0] * n / (n - 1.0)).mean())
    var_plus = mean_var * (n - 1.0) / n
    if c > 1:
        var_plus += float(chains.mean(axis=1).var(ddof=1))
    if var_plus <= 0.0 or mean_var <= 0.0:
        warnings.warn("constant draws; ess reported as 0", stacklevel=2)
        return 0.0

    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev_pair = math.inf
    k = 0
    while 2 * k + 1 < rho.size:
        pair = rho[2 * k] + rho[2 * k + 1]
        if not pair > 0.0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        total += pair
        k += 1
    tau = max(-1.0 + 2.0 * total, 1.0 / ESS_CAP_FACTOR)
    return float(min(c * n / tau, ESS_CAP_FACTOR * c * n))


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    """Average-tie ranks mapped through the normal quantile function."""
    flat = chains.reshape(-1)
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size)
    ranks[order] = np.arange(1, flat.size + 1)
    sorted_vals = flat[order]
    i = 0
    while i < flat.size:
        j = i
        while j + 1 < flat.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    z = norm_ppf((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(chains.shape)


def ess(chain_draws) -> tuple[float, float]:
    """Bulk and tail effective sample sizes.

    Bulk ESS runs the autocorrelation estimator on rank-normalized draws;
    tail ESS is the smaller of the ESS of the 5% and 95% quantile
    indicator sequences.  Estimates are capped at
    ``ESS_CAP_FACTOR * chains * draws``; constant input reports 0 with a
    warning.
    """
    chains = np.asarray(chain_draws, dtype=np.float64)
    if chains.ndim == 1:
        chains = chains[None, :]
    if chains.ndim != 2:
        raise ValidationError("ess needs a (chains, draws) array")
    if chains.shape[1] < 8:
        raise ValidationError("ess needs at least 8 draws per chain")
    if np.all(chains == chains.reshape(-1)[0]):
        warnings.warn("constant draws; ess reported as 0", stacklevel=2)
        return 0.0, 0.0
    bulk = _ess_from_chains(_rank_normalize(chains))
    q05, q95 = np.quantile(chains.reshape(-1), [0.05, 0.95])
    tails = []
    for q in (q05, q95):
        indicator = (chains <= q).astype(np.float64)
        if np.all(indicator == indicator.reshape(-1)[0]):
            tails.append(0.0)
        else:
            tails.append(_ess_from_chains(indicator))
    return bulk, float(min(tails))
