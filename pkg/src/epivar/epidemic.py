"""Discrete-time SIR dynamics on temporal contact graphs.

Individual histories are encoded as a pair of times ``(t_inf, t_rec)`` in
``0 .. horizon + 1``: the individual is S strictly before ``t_inf``, I from
``t_inf`` up to (excluding) ``t_rec``, and R from ``t_rec`` on.  The value
``horizon + 1`` means "never": a never-infected individual carries
``(horizon + 1, horizon + 1)``.  Recovery is strictly later than infection.

Transitions are synchronous: the states at ``t + 1`` depend only on the
states at ``t`` and the contacts active at ``t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .contact_graph import TemporalContactGraph

S, I, R = 0, 1, 2
STATE_CHARS = "SIR"

# survival probabilities below exp(_LOG_CLAMP) are treated as exactly zero
_LOG_CLAMP = np.log(1e-15)


@dataclass
class EpidemicParams:
    """Epidemic parameters and how per-contact transmission probabilities resolve.

    mode "graph" uses the probabilities stored on the graph as-is; mode
    "prob" replaces them with a per-class probability ``values[class_of[src]]``;
    mode "rate" maps stored contact durations (default 1.0) through
    ``1 - exp(-rate * duration)`` with the transmitter's class rate.  The
    "prob" and "rate" modes are the inference targets.
    """

    mu: float
    mode: str = "graph"
    values: np.ndarray | None = None
    class_of: np.ndarray | None = None
    p0: float | None = None   # None resolves to 1/n

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError(f"mu must be in [0, 1], got {self.mu}")
        if self.mode not in ("graph", "prob", "rate"):
            raise ValueError(f"unknown params mode {self.mode!r}")
        if self.mode != "graph":
            if self.values is None:
                raise ValueError(f"mode {self.mode!r} requires per-class values")
            self.values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
            if self.mode == "prob" and (np.any(self.values < 0) or np.any(self.values > 1)):
                raise ValueError("transmission probabilities must be in [0, 1]")
            if self.mode == "rate" and np.any(self.values < 0):
                raise ValueError("transmission rates must be non-negative")
        if self.class_of is not None:
            self.class_of = np.asarray(self.class_of, dtype=np.int64)
        if self.p0 is not None and not 0.0 <= self.p0 <= 1.0:
            raise ValueError(f"p0 must be in [0, 1], got {self.p0}")

    def n_classes(self) -> int:
        return 1 if self.values is None else len(self.values)

    def classes(self, graph: TemporalContactGraph) -> np.ndarray:
        if self.class_of is None:
            return np.zeros(graph.n, dtype=np.int64)
        if len(self.class_of) != graph.n:
            raise ValueError("class_of does not cover all individuals")
        return self.class_of

    def p0_value(self, n: int) -> float:
        return 1.0 / n if self.p0 is None else self.p0

    def copy(self) -> "EpidemicParams":
        return EpidemicParams(
            mu=self.mu, mode=self.mode,
            values=None if self.values is None else self.values.copy(),
            class_of=None if self.class_of is None else self.class_of.copy(),
            p0=self.p0,
        )


@dataclass
class Cascade:
    """One epidemic realization as per-individual (t_inf, t_rec) pairs."""

    tau_i: np.ndarray
    tau_r: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.tau_i = np.asarray(self.tau_i, dtype=np.int64)
        self.tau_r = np.asarray(self.tau_r, dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.tau_i)

    def states(self, horizon: int) -> np.ndarray:
        return states_from_times(self.tau_i[None, :], self.tau_r[None, :], horizon)[0]


def validate_times(tau_i: np.ndarray, tau_r: np.ndarray, horizon: int) -> None:
    never = horizon + 1
    if np.any((tau_i < 0) | (tau_i > never)) or np.any((tau_r < 0) | (tau_r > never)):
        raise ValueError(f"times must lie in [0, {never}]")
    if np.any((tau_i == never) & (tau_r != never)):
        raise ValueError("never-infected individuals cannot recover")
    if np.any((tau_i < never) & (tau_r <= tau_i)):
        raise ValueError("recovery must be strictly later than infection")


def states_from_times(tau_i: np.ndarray, tau_r: np.ndarray, horizon: int) -> np.ndarray:
    """Decode (B, n) time pairs into a (B, n, horizon + 1) state matrix."""
    tgrid = np.arange(horizon + 1, dtype=np.int64)
    st = (tgrid >= tau_i[..., None]).astype(np.int8)
    st += tgrid >= tau_r[..., None]
    return st


def times_from_states(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Encode a (n, T+1) or (B, n, T+1) state matrix; rejects non-SIR histories."""
    squeeze = states.ndim == 2
    if squeeze:
        states = states[None]
    diffs = np.diff(states.astype(np.int8), axis=-1)
    if np.any(diffs < 0) or np.any(diffs > 1):
        raise ValueError("state history is not a monotone S->I->R progression")
    if np.any(states[..., 0] == R):
        raise ValueError("individuals cannot start recovered")
    horizon = states.shape[-1] - 1
    never = horizon + 1
    infected = states >= I
    tau_i = np.where(infected.any(-1), infected.argmax(-1), never)
    recovered = states == R
    tau_r = np.where(recovered.any(-1), recovered.argmax(-1), never)
    if squeeze:
        return tau_i[0], tau_r[0]
    return tau_i, tau_r


def step_distribution(state: int, infected_contact_lambdas, mu: float) -> np.ndarray:
    """One-step transition probabilities (P[S], P[I], P[R]) for a single individual."""
    lams = np.asarray(infected_contact_lambdas, dtype=np.float64)
    if np.any(lams < 0) or np.any(lams > 1) or not 0 <= mu <= 1:
        raise ValueError("probabilities must lie in [0, 1]")
    if state == S:
        stay = float(np.prod(1.0 - lams)) if lams.size else 1.0
        return np.array([stay, 1.0 - stay, 0.0])
    if state == I:
        return np.array([0.0, 1.0 - mu, mu])
    return np.array([0.0, 0.0, 1.0])


def _survival_stacks(graph: TemporalContactGraph, params: EpidemicParams):
    """Per-timestep (n, n) matrices W with W[t, src, dst] = log(1 - lambda), plus a
    boolean stack marking contacts with lambda exactly 1."""
    T, n = graph.horizon, graph.n
    W = np.zeros((T, n, n))
    sure = np.zeros((T, n, n), dtype=bool)
    if params.mode == "graph":
        lam = graph.lam
    elif params.mode == "prob":
        lam = params.values[params.classes(graph)[graph.src]]
    else:
        dur = graph.duration if graph.duration is not None else np.ones(len(graph.src))
        rate = params.values[params.classes(graph)[graph.src]]
        lam = -np.expm1(-rate * dur)
    one = lam >= 1.0
    W[graph.t, graph.src, graph.dst] = np.log1p(-np.minimum(lam, 1.0 - 1e-15))
    sure[graph.t, graph.src, graph.dst] = one
    return W, sure


def _log_survival(infected_f: np.ndarray, W: np.ndarray, sure: np.ndarray):
    """Log-probability that each individual escapes infection at each timestep.

    infected_f: (B, n, T) float indicator of being infectious at contact time t.
    Returns (Ls, forced): (B, n, T) log-survival and a bool mask where survival
    is exactly impossible (a lambda = 1 contact with an infected transmitter).
    """
    B, n, T = infected_f.shape
    Ls = np.empty((B, n, T))
    forced = np.zeros((B, n, T), dtype=bool)
    any_sure = sure.any()
    for t in range(T):
        Ls[:, :, t] = infected_f[:, :, t] @ W[t]
        if any_sure:
            forced[:, :, t] = infected_f[:, :, t] @ sure[t].astype(np.float64) > 0
    return Ls, forced


def trajectory_log_factors(
    tau_i: np.ndarray,
    tau_r: np.ndarray,
    graph: TemporalContactGraph,
    params: EpidemicParams,
) -> np.ndarray:
    """Per-(sample, individual, time) log dynamics factors of a batch of cascades.

    Entry [b, i, 0] is the initial-state log prior; entry [b, i, t] for t >= 1
    is the log transition probability into the state at t.  Impossible
    transitions yield -inf.  Summing over (individual, time) gives the strict
    log prior of each cascade.
    """
    T = graph.horizon
    st = states_from_times(tau_i, tau_r, T)
    B, n = tau_i.shape
    p0 = params.p0_value(n)
    W, sure = _survival_stacks(graph, params)
    infected_f = (st[:, :, :T] == I).astype(np.float64)
    Ls, forced = _log_survival(infected_f, W, sure)

    factors = np.zeros((B, n, T + 1))
    with np.errstate(divide="ignore"):
        log_p0 = np.log(p0)
        log_q0 = np.log1p(-p0)
        log_mu = np.log(params.mu)
        log_keep = np.log1p(-params.mu)
        factors[:, :, 0] = np.where(tau_i == 0, log_p0, log_q0)
        prev = st[:, :, :T]
        cur = st[:, :, 1:]
        ss = (prev == S) & (cur == S)
        si = (prev == S) & (cur == I)
        ii = (prev == I) & (cur == I)
        ir = (prev == I) & (cur == R)
        infect = np.log(np.maximum(-np.expm1(Ls), 0.0))
    infect = np.where(forced, 0.0, infect)
    surv = np.where(forced, -np.inf, Ls)
    trans = np.zeros((B, n, T))
    trans = np.where(ss, surv, trans)
    trans = np.where(si, infect, trans)
    trans = np.where(ii, log_keep, trans)
    trans = np.where(ir, log_mu, trans)
    factors[:, :, 1:] = trans
    return factors


def log_prior(cascade, graph: TemporalContactGraph, params: EpidemicParams):
    """Strict log prior probability of one cascade or a (B, n) batch of time pairs.

    Returns -inf for dynamically impossible cascades (e.g. infection without
    any infected contact).
    """
    if isinstance(cascade, Cascade):
        tau_i, tau_r = cascade.tau_i[None, :], cascade.tau_r[None, :]
        squeeze = True
    else:
        tau_i, tau_r = cascade
        squeeze = False
    validate_times(tau_i, tau_r, graph.horizon)
    out = trajectory_log_factors(tau_i, tau_r, graph, params).sum(axis=(1, 2))
    return float(out[0]) if squeeze else out


def simulate_batch(
    graph: TemporalContactGraph,
    params: EpidemicParams,
    init,
    batch: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``batch`` cascades synchronously; returns (tau_i, tau_r) of shape (B, n).

    ``init`` is either a sequence of source ids (those individuals start
    infected) or the string "prior" (each individual starts infected
    independently with probability p0).
    """
    T, n = graph.horizon, graph.n
    never = T + 1
    state = np.zeros((batch, n), dtype=np.int8)
    if isinstance(init, str):
        if init != "prior":
            raise ValueError(f"unknown init {init!r}")
        state[rng.random((batch, n)) < params.p0_value(n)] = I
    else:
        sources = np.asarray(init, dtype=np.int64)
        if sources.size and (sources.min() < 0 or sources.max() >= n):
            raise ValueError("source id outside [0, n)")
        state[:, sources] = I
    tau_i = np.full((batch, n), never, dtype=np.int64)
    tau_r = np.full((batch, n), never, dtype=np.int64)
    tau_i[state == I] = 0
    W, sure = _survival_stacks(graph, params)
    for t in range(T):
        infected_f = (state == I).astype(np.float64)
        ls = infected_f @ W[t]
        p_inf = -np.expm1(ls)
        if sure[t].any():
            p_inf = np.where(infected_f @ sure[t].astype(np.float64) > 0, 1.0, p_inf)
        new_inf = (state == S) & (rng.random((batch, n)) < p_inf)
        new_rec = (state == I) & (rng.random((batch, n)) < params.mu)
        state[new_inf] = I
        tau_i[new_inf] = t + 1
        state[new_rec] = R
        tau_r[new_rec] = t + 1
    return tau_i, tau_r


def simulate(graph: TemporalContactGraph, params: EpidemicParams, init, seed) -> Cascade:
    """Sample one cascade; ``seed`` is an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    provenance = seed if isinstance(seed, (int, np.integer)) else None
    tau_i, tau_r = simulate_batch(graph, params, init, 1, rng)
    return Cascade(tau_i[0], tau_r[0], seed=provenance)


def hamming_distance(a: Cascade, b: Cascade, t: int, mode: str = "infected") -> int:
    """Number of individuals whose status differs between two cascades at time t.

    mode "infected" compares the binary ever-infected indicator (state I or R);
    mode "states" compares the full three-state configuration.
    """
    if a.n != b.n:
        raise ValueError("cascades must cover the same population")
    horizon = int(max(a.tau_i.max(), a.tau_r.max(), b.tau_i.max(), b.tau_r.max(), t + 1)) + 1
    sa = a.states(horizon)[:, t]
    sb = b.states(horizon)[:, t]
    if mode == "infected":
        return int(np.sum((sa >= I) != (sb >= I)))
    if mode == "states":
        return int(np.sum(sa != sb))
    raise ValueError(f"unknown mode {mode!r}")


def final_infected_fraction(cascade: Cascade, horizon: int) -> float:
    """Fraction of individuals ever infected by the final time."""
    return float(np.mean(cascade.tau_i <= horizon))


def save_cascade(cascade: Cascade, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "t_inf", "t_rec"])
        for i, (ti, tr) in enumerate(zip(cascade.tau_i, cascade.tau_r)):
            writer.writerow([i, int(ti), int(tr)])


def load_cascade(path) -> Cascade:
    rows = {}
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["i", "t_inf", "t_rec"]:
            raise ValueError(f"unexpected cascade header {header}")
        for row in reader:
            rows[int(row[0])] = (int(row[1]), int(row[2]))
    n = max(rows) + 1
    tau_i = np.array([rows[i][0] for i in range(n)], dtype=np.int64)
    tau_r = np.array([rows[i][1] for i in range(n)], dtype=np.int64)
    return Cascade(tau_i, tau_r)


def export_states(cascade: Cascade, horizon: int, path) -> None:
    st = cascade.states(horizon)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "t", "state"])
        for i in range(cascade.n):
            for t in range(horizon + 1):
                writer.writerow([i, t, STATE_CHARS[st[i, t]]])
