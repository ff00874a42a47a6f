"""Annealed variational training of the autoregressive sampler.

Each step draws a batch from the model, scores it against the tempered
regularized posterior, and applies one Adam step along the score-function
gradient estimate

    grad ~= mean_s [ (log q(x_s) - beta * log target(x_s)) - baseline ] * grad log q(x_s)

with the batch mean of the bracket as the (optional, default) variance-
reducing baseline.  The temperature rises linearly from ~0 to 1 over the
run.  Epidemic-parameter learning interleaves an ascent step on the sample
average of the regularized log posterior (the Gibbs bound, up to the
entropy term, which does not depend on the epidemic parameters) after each
network update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autoreg import (
    AutoregressiveModel,
    SampleBatch,
    marginals,
    new_model_grads,
    sample,
    score_gradient,
)
from .epidemic import I, R, S
from .errors import TrainingDivergenceError
from .nn import AdamState, adam_step
from .observations import PosteriorModel


@dataclass
class TrainConfig:
    steps: int = 10_000
    samples_per_step: int = 1_000
    lr: float = 1e-3
    baseline: str = "batch_mean"        # "batch_mean" | "none"
    param_learning: bool = False
    learn: tuple = ("lambda",)          # any of "lambda", "mu"
    param_lr: float = 0.05
    param_warmup: float = 0.5           # no parameter updates before beta reaches this
    refine_steps: int = 0               # extra steps held at beta = 1 after the schedule
    risk_prior: bool = False
    eval_samples: int = 2_000
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.baseline not in ("batch_mean", "none"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.baseline == "batch_mean" and self.samples_per_step < 2:
            raise ValueError("batch-mean baseline needs at least 2 samples per step")
        if not 0.0 <= self.param_warmup <= 1.0:
            raise ValueError("param_warmup is a fraction of the schedule")
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be non-negative")
        for name in self.learn:
            if name not in ("lambda", "mu"):
                raise ValueError(f"cannot learn {name!r}")


@dataclass
class TrainReport:
    beta: np.ndarray
    mean_tempered_logw: np.ndarray
    mean_log_q: np.ndarray
    elbo: np.ndarray
    lambda_hat: np.ndarray          # (steps, n_classes)
    mu_hat: np.ndarray
    final_marginals: np.ndarray | None = None
    final_elbo: float = math.nan
    final_elbo_se: float = math.nan
    stationary: bool = True
    steps_run: int = 0

    def to_csv(self, path) -> None:
        n_classes = self.lambda_hat.shape[1]
        cols = ["step", "beta", "mean_tempered_logw", "mean_log_q", "elbo"]
        cols += [f"lambda_hat_{c}" for c in range(n_classes)] + ["mu_hat"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for k in range(self.steps_run):
                row = [k + 1, self.beta[k], self.mean_tempered_logw[k],
                       self.mean_log_q[k], self.elbo[k]]
                row += list(self.lambda_hat[k]) + [self.mu_hat[k]]
                writer.writerow(row)


@dataclass
class ElboEstimate:
    value: float
    stderr: float
    n_samples: int


def make_optimizers(model: AutoregressiveModel, lr: float) -> dict:
    opts = {}
    for nc in model.nodes:
        oi = AdamState.for_net(nc.inf_net, lr) if nc.inf_net is not None else None
        orr = AdamState.for_net(nc.rec_net, lr) if nc.rec_net is not None else None
        if oi is not None or orr is not None:
            opts[nc.node] = (oi, orr)
    return opts


def _final_states(tau_i: np.ndarray, tau_r: np.ndarray, horizon: int) -> np.ndarray:
    st = np.full(tau_i.shape, S, dtype=np.int64)
    st[tau_i <= horizon] = I
    st[tau_r <= horizon] = R
    return st


def risk_prior_log_factors(supports, horizon: int) -> np.ndarray:
    """Per-individual log factors on the final-time state that, applied at full
    strength, make sampling each present state equally likely under an
    otherwise uniform distribution over the support."""
    n = len(supports)
    log_f0 = np.zeros((n, 3))
    for i, pairs in enumerate(supports):
        st = _final_states(pairs[:, 0][None], pairs[:, 1][None], horizon)[0]
        for s in range(3):
            count = int((st == s).sum())
            if count:
                log_f0[i, s] = -np.log(count)
    return log_f0


def risk_prior_schedule(beta: float, log_f0: np.ndarray) -> np.ndarray:
    """Final-time state factors with strength decreasing linearly in beta:
    full equalization at beta = 0, identity (log factor 0) at beta = 1."""
    return (1.0 - beta) * log_f0


def _tempered_target(posterior: PosteriorModel, batch: SampleBatch, beta: float,
                     risk_log_f0: np.ndarray | None):
    reg = posterior.regularized_log_posterior(batch.tau_i, batch.tau_r)
    target = beta * reg
    if risk_log_f0 is not None:
        sched = risk_prior_schedule(beta, risk_log_f0)
        final = _final_states(batch.tau_i, batch.tau_r, posterior.horizon)
        target = target + sched[np.arange(posterior.n)[None, :], final].sum(axis=1)
    return target, reg


def kl_gradient_step(
    model: AutoregressiveModel,
    posterior: PosteriorModel,
    beta: float,
    batch: SampleBatch,
    optimizers: dict,
    baseline: str = "batch_mean",
    risk_log_f0: np.ndarray | None = None,
) -> dict:
    """One score-function gradient step on the tempered KL objective."""
    target, reg = _tempered_target(posterior, batch, beta, risk_log_f0)
    bracket = batch.log_q - target
    if not np.all(np.isfinite(bracket)):
        bad = int(np.flatnonzero(~np.isfinite(bracket))[0])
        raise TrainingDivergenceError(
            "non-finite sample weight",
            diagnostics={
                "sample": bad,
                "log_q": float(batch.log_q[bad]),
                "target": float(target[bad]),
            },
        )
    b = bracket.mean() if baseline == "batch_mean" else 0.0
    upstream = (bracket - b) / len(batch)
    grads = score_gradient(model, batch.tau_i, batch.tau_r, upstream, batch=batch)
    for node, (gi, gr) in grads.items():
        oi, orr = optimizers[node]
        nc = model.nodes[node]
        if gi is not None:
            adam_step(nc.inf_net.parameters(), gi, oi)
        if gr is not None:
            adam_step(nc.rec_net.parameters(), gr, orr)
    return {
        "mean_tempered_logw": float(target.mean()),
        "mean_log_q": float(batch.log_q.mean()),
        "elbo": float((reg - batch.log_q).mean()),
    }


def estimate_kl_gradient(
    model: AutoregressiveModel,
    posterior: PosteriorModel,
    beta: float,
    batch: SampleBatch,
    baseline: str = "batch_mean",
) -> dict:
    """The raw sampled gradient estimate (no optimizer step); oracle-testable."""
    target, _ = _tempered_target(posterior, batch, beta, None)
    bracket = batch.log_q - target
    b = bracket.mean() if baseline == "batch_mean" else 0.0
    upstream = (bracket - b) / len(batch)
    return score_gradient(model, batch.tau_i, batch.tau_r, upstream)


@dataclass
class ParamState:
    """Adam ascent state for the epidemic parameters, in unconstrained
    coordinates (logit for probabilities, log for rates)."""

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def ensure(self, size: int) -> None:
        if self.m is None:
            self.m = np.zeros(size)
            self.v = np.zeros(size)


def em_param_step(
    posterior: PosteriorModel,
    batch: SampleBatch,
    state: ParamState,
    learn: tuple = ("lambda",),
) -> dict:
    """Ascend the epidemic parameters along the gradient of the sample mean of
    the regularized log posterior (the energetic part of the Gibbs bound).

    Transmission gradients have closed form from exposure and transmission
    events in the samples; recovery gradients from the I->I / I->R event
    counts.  Gradients of floored factors are zero.  Coordinates with no
    informative events in the batch are left unchanged and flagged.
    """
    params = posterior.params
    if params.mode not in ("prob", "rate"):
        raise ValueError("parameter learning requires prob or rate mode")
    graph = posterior.graph
    n_classes = params.n_classes()
    tau_i, tau_r = batch.tau_i, batch.tau_r
    T = graph.horizon
    log_eps = np.log(posterior.epsilon)

    from .epidemic import _survival_stacks, states_from_times

    st = states_from_times(tau_i, tau_r, T)
    prev, cur = st[:, :, :T], st[:, :, 1:]
    factors = posterior.log_factors(tau_i, tau_r)
    live = factors[:, :, 1:] > log_eps
    ss = (prev == S) & (cur == S) & live
    si = (prev == S) & (cur == I) & live
    ii = (prev == I) & (cur == I) & live
    ir = (prev == I) & (cur == R) & live

    infected_f = (st[:, :, :T] == I).astype(np.float64)
    classes = params.classes(graph)
    B = len(batch)
    grad = np.zeros(n_classes + 1)   # per-class transmission, then mu
    counts = np.zeros(n_classes + 1)

    # per-class exposure statistic: contact count (prob mode) or summed duration
    W, _ = _survival_stacks(graph, params)
    ls = np.empty((B, graph.n, T))
    for t in range(T):
        ls[:, :, t] = infected_f[:, :, t] @ W[t]
    with np.errstate(over="ignore"):
        odds = np.exp(ls) / np.maximum(-np.expm1(ls), 1e-300)   # survival / infection
    for c in range(n_classes):
        stack = np.zeros((T, graph.n, graph.n))
        sel = classes[graph.src] == c
        if params.mode == "prob":
            stack[graph.t[sel], graph.src[sel], graph.dst[sel]] = 1.0
        else:
            dur = graph.duration if graph.duration is not None else np.ones(len(graph.src))
            stack[graph.t[sel], graph.src[sel], graph.dst[sel]] = dur[sel]
        u = np.empty((B, graph.n, T))
        for t in range(T):
            u[:, :, t] = infected_f[:, :, t] @ stack[t]
        raw = -(u * ss).sum() + (u * odds * si).sum()
        if params.mode == "prob":
            lam_c = params.values[c]
            raw /= max(1.0 - lam_c, 1e-12)
        counts[c] = (u * (ss | si)).sum()
        grad[c] = raw / B

    counts[-1] = ii.sum() + ir.sum()
    if params.mu > 0.0 and params.mu < 1.0:
        grad[-1] = (-ii.sum() / (1.0 - params.mu) + ir.sum() / params.mu) / B

    # ascend in unconstrained coordinates: logit for probabilities, log for rates
    state.ensure(n_classes + 1)
    active = np.zeros(n_classes + 1, dtype=bool)
    if "lambda" in learn:
        active[:n_classes] = counts[:n_classes] > 0
    if "mu" in learn:
        active[-1] = counts[-1] > 0
    flagged = [k for k in range(n_classes + 1) if not active[k]]

    theta = np.empty(n_classes + 1)
    chain = np.empty(n_classes + 1)
    vals = np.clip(params.values, 1e-9, 1 - 1e-9 if params.mode == "prob" else np.inf)
    if params.mode == "prob":
        theta[:n_classes] = np.log(vals) - np.log1p(-vals)
        chain[:n_classes] = vals * (1.0 - vals)
    else:
        theta[:n_classes] = np.log(vals)
        chain[:n_classes] = vals
    mu = np.clip(params.mu, 1e-9, 1 - 1e-9)
    theta[-1] = np.log(mu) - np.log1p(-mu)
    chain[-1] = mu * (1.0 - mu)

    g = grad * chain
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    delta = state.lr * (state.m / c1) / (np.sqrt(state.v / c2) + state.eps)
    theta = np.where(active, theta + delta, theta)

    if params.mode == "prob":
        mapped = 1.0 / (1.0 + np.exp(-theta[:n_classes]))
    else:
        mapped = np.exp(theta[:n_classes])
    new_values = params.values.copy()
    new_values[active[:n_classes]] = mapped[active[:n_classes]]
    params.values = new_values
    if active[-1]:
        params.mu = float(1.0 / (1.0 + np.exp(-theta[-1])))
    return {"grad": grad, "flagged": flagged, "values": params.values.copy(),
            "mu": params.mu}


def elbo(model: AutoregressiveModel, posterior: PosteriorModel,
         samples: SampleBatch) -> ElboEstimate:
    """Evidence lower bound estimate at beta = 1: mean of the regularized log
    posterior minus log q; its expectation never exceeds log Z."""
    reg = posterior.regularized_log_posterior(samples.tau_i, samples.tau_r)
    diff = reg - samples.log_q
    n = len(diff)
    se = float(diff.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ElboEstimate(value=float(diff.mean()), stderr=se, n_samples=n)


def anneal_train(
    model: AutoregressiveModel,
    posterior: PosteriorModel,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainReport:
    """Run the full annealing schedule: at step k of K the temperature is k / K.

    With ``param_learning`` the epidemic parameters are updated right after
    each network update, starting once the temperature reaches
    ``param_warmup`` (early batches are drawn from a nearly uniform
    distribution and carry no information about the parameters).  After the
    schedule, ``refine_steps`` extra steps run at beta = 1.  Aborts with a
    checkpoint if the mean sample weight becomes non-finite.
    """
    K, M = config.steps, config.samples_per_step
    total = K + config.refine_steps
    n_classes = posterior.params.n_classes()
    report = TrainReport(
        beta=np.zeros(total), mean_tempered_logw=np.zeros(total),
        mean_log_q=np.zeros(total), elbo=np.zeros(total),
        lambda_hat=np.zeros((total, n_classes)), mu_hat=np.zeros(total),
    )
    optimizers = make_optimizers(model, config.lr)
    param_state = ParamState(lr=config.param_lr)
    risk_log_f0 = (
        risk_prior_log_factors(model.supports, posterior.horizon)
        if config.risk_prior else None
    )
    for k in range(1, total + 1):
        beta = min(k / K, 1.0)
        posterior.beta = beta
        batch = sample(model, M, rng, keep_caches=True)
        try:
            stats = kl_gradient_step(
                model, posterior, beta, batch, optimizers,
                baseline=config.baseline, risk_log_f0=risk_log_f0,
            )
        except (TrainingDivergenceError, FloatingPointError) as exc:
            path = config.checkpoint_path
            if path is not None:
                from .autoreg import save_model

                save_model(model, path)
            raise TrainingDivergenceError(
                f"training diverged at step {k}: {exc}",
                diagnostics=getattr(exc, "diagnostics", {}),
                checkpoint_path=path,
            ) from exc
        if config.param_learning and beta >= config.param_warmup:
            em_param_step(posterior, batch, param_state, learn=config.learn)
        idx = k - 1
        report.beta[idx] = beta
        report.mean_tempered_logw[idx] = stats["mean_tempered_logw"]
        report.mean_log_q[idx] = stats["mean_log_q"]
        report.elbo[idx] = stats["elbo"]
        if posterior.params.values is not None:
            report.lambda_hat[idx] = posterior.params.values
        report.mu_hat[idx] = posterior.params.mu
        report.steps_run = k

    posterior.beta = 1.0
    eval_batch = sample(model, config.eval_samples, rng)
    report.final_marginals = marginals(eval_batch.tau_i, eval_batch.tau_r, posterior.horizon)
    est = elbo(model, posterior, eval_batch)
    report.final_elbo, report.final_elbo_se = est.value, est.stderr
    report.stationary = _stationary(report.mean_tempered_logw[: report.steps_run])
    return report


def _stationary(series: np.ndarray) -> bool:
    """Whether the mean tempered log weight stopped decreasing over the last 10%
    of steps (two-half comparison with a 2-standard-error allowance)."""
    k = len(series)
    tail = series[int(np.floor(k * 0.9)):]
    if len(tail) < 4:
        return True
    half = len(tail) // 2
    a, b = tail[:half], tail[half:]
    se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)) if len(a) > 1 else 0.0
    return bool(b.mean() >= a.mean() - 2.0 * se)


@dataclass
class TwoClassResult:
    values: np.ndarray
    elbo: float
    elbo_se: float
    report: TrainReport
    model: AutoregressiveModel


def two_class_fit(
    model: AutoregressiveModel,
    posterior: PosteriorModel,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TwoClassResult:
    """Jointly train the sampler and two per-class transmission parameters;
    the returned bound estimate supports model comparison."""
    if posterior.params.n_classes() != 2:
        raise ValueError("two-class fit needs exactly two parameter classes")
    cfg = replace(config, param_learning=True)
    report = anneal_train(model, posterior, cfg, rng)
    return TwoClassResult(
        values=posterior.params.values.copy(),
        elbo=report.final_elbo, elbo_se=report.final_elbo_se,
        report=report, model=model,
    )
