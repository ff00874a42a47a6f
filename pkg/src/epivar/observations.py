"""Observations, posterior factors with floor regularization, and the
observation-induced restriction of feasible (t_inf, t_rec) pairs.

The posterior over cascades is proportional to the dynamics prior times one
likelihood term per observation.  Factors that are impossible under a cascade
(zero transition or observation probability) would make the log posterior
diverge; the regularized evaluation floors every per-(individual, time) log
factor at ``log(epsilon)`` so that every cascade has a finite score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .contact_graph import TemporalContactGraph
from .epidemic import (
    EpidemicParams,
    I,
    R,
    S,
    STATE_CHARS,
    states_from_times,
    trajectory_log_factors,
)
from .errors import InfeasibleEvidenceError


@dataclass(frozen=True)
class Observation:
    individual: int
    time: int
    state: int                     # S, I or R
    false_negative_rate: float = 0.0
    false_positive_rate: float = 0.0

    def __post_init__(self):
        if self.state not in (S, I, R):
            raise ValueError(f"unknown state {self.state}")
        for rate in (self.false_negative_rate, self.false_positive_rate):
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"noise rate {rate} outside [0, 1)")

    @property
    def is_exact(self) -> bool:
        return self.false_negative_rate == 0.0 and self.false_positive_rate == 0.0


def _confusion_prob(obs: Observation, actual: int) -> float:
    """P(reported state | actual state) under the test-noise model.

    The false-negative rate moves true-I reports to S; the false-positive rate
    moves true-S reports to I; R reports are noise-free.
    """
    fnr, fpr = obs.false_negative_rate, obs.false_positive_rate
    table = {
        (S, S): 1.0 - fpr, (I, S): fpr, (R, S): 0.0,
        (S, I): fnr, (I, I): 1.0 - fnr, (R, I): 0.0,
        (S, R): 0.0, (I, R): 0.0, (R, R): 1.0,
    }
    return table[(obs.state, actual)]


def obs_log_likelihood(obs: Observation, actual_state: int) -> float:
    """Log-likelihood of the reported state given the actual one; -inf marks an
    impossible report (floored to log epsilon only at the regularized layer)."""
    p = _confusion_prob(obs, actual_state)
    return float(np.log(p)) if p > 0 else -np.inf


def structural_pairs(horizon: int) -> np.ndarray:
    """All valid (t_inf, t_rec) pairs for one individual: never infected, or
    infected at some t <= horizon with strictly later recovery (possibly never)."""
    never = horizon + 1
    pairs = [(never, never)]
    for ti in range(horizon + 1):
        for tr in range(ti + 1, never + 1):
            pairs.append((ti, tr))
    return np.array(pairs, dtype=np.int64)


def feasible_support(individual: int, observations, horizon: int) -> np.ndarray:
    """(t_inf, t_rec) pairs consistent with every exact observation of an individual.

    Noisy observations do not restrict the support; they only contribute
    likelihood factors.  Raises InfeasibleEvidenceError when no pair survives.
    """
    pairs = structural_pairs(horizon)
    ti, tr = pairs[:, 0], pairs[:, 1]
    keep = np.ones(len(pairs), dtype=bool)
    for obs in observations:
        if obs.individual != individual or not obs.is_exact:
            continue
        if obs.time > horizon:
            raise ValueError(f"observation time {obs.time} beyond horizon {horizon}")
        if obs.state == I:
            keep &= (ti <= obs.time) & (tr > obs.time)
        elif obs.state == S:
            keep &= ti > obs.time
        else:
            keep &= tr <= obs.time
    if not keep.any():
        raise InfeasibleEvidenceError(
            f"observations of individual {individual} admit no trajectory"
        )
    return pairs[keep]


def model_supports(
    observations, horizon: int, n: int, params: EpidemicParams | None = None
) -> list[np.ndarray]:
    """Per-individual feasible supports; with mu = 0 recovery never happens, so
    the support is additionally restricted to t_rec = horizon + 1."""
    supports = []
    for i in range(n):
        pairs = feasible_support(i, observations, horizon)
        if params is not None and params.mu == 0.0:
            pairs = pairs[pairs[:, 1] == horizon + 1]
            if len(pairs) == 0:
                raise InfeasibleEvidenceError(
                    f"individual {i} is observed recovered but mu = 0"
                )
        supports.append(pairs)
    return supports


@dataclass
class PosteriorModel:
    """Posterior over cascades: graph + params + observations, with the
    regularization floor ``epsilon`` and the annealing temperature ``beta``.

    ``beta`` is the only mutable field; a single coordinator (the trainer)
    updates it between steps.  Evaluation is pure.
    """

    graph: TemporalContactGraph
    params: EpidemicParams
    observations: tuple[Observation, ...]
    epsilon: float = 1e-10
    beta: float = 1.0
    _obs_by_it: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.observations = tuple(self.observations)
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        for obs in self.observations:
            if not 0 <= obs.individual < self.graph.n:
                raise ValueError(f"observation of unknown individual {obs.individual}")
            if not 0 <= obs.time <= self.graph.horizon:
                raise ValueError(
                    f"observation time {obs.time} outside [0, {self.graph.horizon}]"
                )

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def horizon(self) -> int:
        return self.graph.horizon

    def supports(self) -> list[np.ndarray]:
        return model_supports(self.observations, self.horizon, self.n, self.params)

    def log_factors(self, tau_i: np.ndarray, tau_r: np.ndarray) -> np.ndarray:
        """(B, n, T + 1) log factors: dynamics plus observation likelihoods, unfloored."""
        factors = trajectory_log_factors(tau_i, tau_r, self.graph, self.params)
        if self.observations:
            st = states_from_times(tau_i, tau_r, self.horizon)
            with np.errstate(divide="ignore"):
                for obs in self.observations:
                    actual = st[:, obs.individual, obs.time]
                    probs = np.array([_confusion_prob(obs, s) for s in (S, I, R)])
                    factors[:, obs.individual, obs.time] += np.log(probs)[actual]
        return factors

    def regularized_log_posterior(self, tau_i: np.ndarray, tau_r: np.ndarray) -> np.ndarray:
        """Unnormalized log posterior with every factor floored at log(epsilon); finite."""
        factors = self.log_factors(tau_i, tau_r)
        return np.maximum(factors, np.log(self.epsilon)).sum(axis=(1, 2))

    def strict_log_posterior(self, tau_i: np.ndarray, tau_r: np.ndarray) -> np.ndarray:
        """Unnormalized log posterior without flooring; -inf on impossible cascades."""
        return self.log_factors(tau_i, tau_r).sum(axis=(1, 2))

    def tempered_target(self, tau_i: np.ndarray, tau_r: np.ndarray) -> np.ndarray:
        """beta times the regularized log posterior; identically 0 at beta = 0."""
        if self.beta == 0.0:
            return np.zeros(len(tau_i))
        return self.beta * self.regularized_log_posterior(tau_i, tau_r)


def regularized_log_posterior(cascade, posterior: PosteriorModel):
    """Module-level convenience accepting a Cascade or a (tau_i, tau_r) batch."""
    tau_i, tau_r, squeeze = _as_batch(cascade)
    out = posterior.regularized_log_posterior(tau_i, tau_r)
    return float(out[0]) if squeeze else out


def tempered_target(cascade, posterior: PosteriorModel):
    tau_i, tau_r, squeeze = _as_batch(cascade)
    out = posterior.tempered_target(tau_i, tau_r)
    return float(out[0]) if squeeze else out


def _as_batch(cascade):
    from .epidemic import Cascade

    if isinstance(cascade, Cascade):
        return cascade.tau_i[None, :], cascade.tau_r[None, :], True
    tau_i, tau_r = cascade
    return tau_i, tau_r, False


def full_snapshot(cascade, horizon: int, time: int | None = None) -> tuple[Observation, ...]:
    """Exact observation of every individual's state at one time (default: final)."""
    t = horizon if time is None else time
    st = cascade.states(horizon)[:, t]
    return tuple(Observation(i, t, int(st[i])) for i in range(cascade.n))


def save_observations(observations, path) -> None:
    noisy = any(not o.is_exact for o in observations)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "state", "t", "fnr", "fpr"] if noisy else ["i", "state", "t"])
        for o in observations:
            row = [o.individual, STATE_CHARS[o.state], o.time]
            if noisy:
                row += [o.false_negative_rate, o.false_positive_rate]
            writer.writerow(row)


def load_observations(path) -> tuple[Observation, ...]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader)]
        if header[:3] != ["i", "state", "t"]:
            raise ValueError(f"unexpected observation header {header}")
        for row in reader:
            if not row:
                continue
            fnr = float(row[3]) if len(row) > 3 else 0.0
            fpr = float(row[4]) if len(row) > 4 else 0.0
            out.append(
                Observation(
                    individual=int(row[0]),
                    time=int(row[2]),
                    state=STATE_CHARS.index(row[1].strip().upper()),
                    false_negative_rate=fnr,
                    false_positive_rate=fpr,
                )
            )
    return tuple(out)
