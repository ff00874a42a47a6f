"""Experiment harness: wires graphs, cascades, observations, methods and
metrics into the five runnable tasks (patient-zero, risk, params, scaling,
diagnose).

Runs are deterministic: one master seed spawns independent per-instance and
per-method streams, and metrics files are written with sorted keys so a
repeated run is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .autoreg import (
    FULL,
    MEAN_FIELD,
    NEAREST,
    NEXT_NEAREST,
    build_model,
    build_ordering,
    marginals,
    sample,
)
from .baselines import SoftMarginConfig, contact_tracing_scores, soft_margin_scores
from .contact_graph import (
    TemporalContactGraph,
    gen_proximity,
    gen_random_regular,
    gen_tree,
    is_acyclic,
    load_contacts,
    load_graph,
)
from .epidemic import (
    Cascade,
    EpidemicParams,
    I,
    R,
    S,
    final_infected_fraction,
    hamming_distance,
    log_prior,
    simulate_batch,
)
from .errors import ConfigError, EnumerationTooLargeError, EpivarError
from .metrics import fraction_found_curve, roc_auc, top1_rate
from .observations import Observation, PosteriorModel, full_snapshot, load_observations
from .oracle import enumerate_posterior
from .training import TrainConfig, anneal_train, two_class_fit
from . import report as rpt

TASKS = ("patient-zero", "risk", "params", "scaling", "diagnose")

_POLICIES = {
    "mean-field": MEAN_FIELD,
    "nearest": NEAREST,
    "next-nearest": NEXT_NEAREST,
    "full": FULL,
}

_METHODS_BY_TASK = {
    "patient-zero": {"ann", "soft-margin", "oracle"},
    "risk": {"ann", "contact-tracing", "oracle"},
    "scaling": {"ann", "soft-margin"},
}


@dataclass
class ExperimentSpec:
    task: str
    graph: dict
    params: dict
    methods: list = field(default_factory=lambda: ["ann"])
    instances: int = 10
    seed: int = 0
    out: str | None = None
    train: dict = field(default_factory=dict)
    ann: dict = field(default_factory=dict)
    soft_margin: dict = field(default_factory=dict)
    contact_tracing: dict = field(default_factory=dict)
    cascade: dict = field(default_factory=dict)
    observations: dict = field(default_factory=dict)
    risk: dict = field(default_factory=dict)
    params_task: dict = field(default_factory=dict)
    scaling: dict = field(default_factory=dict)
    diagnose: dict = field(default_factory=dict)
    oracle_guard: float = 1e7
    save_artifacts: bool = False

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            spec = cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(payload)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not isinstance(self.graph, dict) or "kind" not in self.graph:
            raise ConfigError("graph config needs a 'kind'")
        if self.instances < 1:
            raise ConfigError("need at least one instance")
        if self.task in _METHODS_BY_TASK:
            if not self.methods:
                raise ConfigError("method list is empty")
            bad = set(self.methods) - _METHODS_BY_TASK[self.task]
            if bad:
                raise ConfigError(
                    f"methods {sorted(bad)} not available for task {self.task}"
                )
        if self.task == "risk" and float(self.params.get("mu", -1)) != 0.0:
            raise ConfigError("the risk task requires mu = 0")

    def to_dict(self) -> dict:
        return {
            name: getattr(self, name) for name in self.__dataclass_fields__
        }


def build_graph(spec: ExperimentSpec, rng: np.random.Generator) -> TemporalContactGraph:
    g = dict(spec.graph)
    kind = g.pop("kind")
    seed = g.pop("seed", None)
    seed = int(rng.integers(2**31 - 1)) if seed is None else seed
    try:
        if kind == "rrg":
            return gen_random_regular(
                g["n"], g["degree"], g["horizon"], g.get("lambda", 0.0), seed
            )
        if kind == "proximity":
            return gen_proximity(
                g["n"], g["length_scale"], g["horizon"], g.get("lambda", 0.0), seed
            )
        if kind == "tree":
            return gen_tree(g["degree"], g["depth"], g["horizon"], g.get("lambda", 0.0))
        if kind == "file":
            path = g["path"]
            if str(path).endswith(".json"):
                return load_graph(path)
            return load_contacts(
                path, format=g.get("format", "probability"), gamma=g.get("gamma"),
                directed=g.get("directed", False), n=g.get("n"), horizon=g.get("horizon"),
            )
    except KeyError as exc:
        raise ConfigError(f"graph config for {kind!r} is missing {exc}") from None
    raise ConfigError(f"unknown graph kind {kind!r}")


def build_params(spec: ExperimentSpec, graph, initial: bool = False) -> EpidemicParams:
    p = spec.params
    mode = p.get("mode", "graph")
    values = p.get("init_values") if initial and "init_values" in p else p.get("values")
    class_of = p.get("class_of")
    return EpidemicParams(
        mu=float(p.get("mu", 0.0)),
        mode=mode,
        values=None if values is None else np.asarray(values, dtype=np.float64),
        class_of=None if class_of is None else np.asarray(class_of, dtype=np.int64),
        p0=p.get("p0"),
    )


def train_config(spec: ExperimentSpec, **overrides) -> TrainConfig:
    cfg = dict(spec.train)
    cfg.update(overrides)
    known = set(TrainConfig.__dataclass_fields__)
    bad = set(cfg) - known
    if bad:
        raise ConfigError(f"unknown train config fields: {sorted(bad)}")
    if "learn" in cfg:
        cfg["learn"] = tuple(cfg["learn"])
    return TrainConfig(**cfg)


def draw_cascade(graph, params, spec: ExperimentSpec, rng: np.random.Generator):
    """One source-seeded cascade whose final infected fraction lies inside the
    configured window (retried up to a cap, then accepted as-is)."""
    c = spec.cascade
    window = c.get("final_fraction", [0.2, 0.8])
    cap = int(c.get("retry_cap", 100))
    n_sources = int(c.get("sources", 1))
    cascade, sources = None, None
    for _ in range(cap):
        sources = rng.choice(graph.n, size=n_sources, replace=False)
        tau_i, tau_r = simulate_batch(graph, params, sources, 1, rng)
        cascade = Cascade(tau_i[0], tau_r[0])
        frac = final_infected_fraction(cascade, graph.horizon)
        if window[0] <= frac <= window[1]:
            break
    return cascade, sources


def _ann_model(spec: ExperimentSpec, graph, posterior, rng):
    opts = spec.ann
    policy = _POLICIES.get(opts.get("policy", "next-nearest"))
    if policy is None:
        raise ConfigError(f"unknown dependency policy {spec.ann.get('policy')!r}")
    method = opts.get("ordering", "auto")
    if method == "auto":
        method = "spanning_tree" if is_acyclic(graph) else "random"
    ordering = build_ordering(graph, method, rng, root=opts.get("root"))
    return build_model(graph, ordering, policy, posterior.supports(), rng)


def _ann_marginals(spec, graph, params, observations, rng, artifacts_dir=None,
                   **cfg_overrides):
    posterior = PosteriorModel(
        graph, params, tuple(observations),
        epsilon=float(spec.params.get("epsilon", 1e-10)),
    )
    model = _ann_model(spec, graph, posterior, rng)
    cfg = train_config(spec, **cfg_overrides)
    report = anneal_train(model, posterior, cfg, rng)
    if artifacts_dir is not None:
        artifacts_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(artifacts_dir / "train_report.csv")
        rpt.write_marginals_csv(artifacts_dir / "marginals.csv", report.final_marginals)
        from .autoreg import save_model

        save_model(model, artifacts_dir / "model.json")
    return report, model, posterior


def _artifacts_dir(spec: ExperimentSpec, out: Path, instance: int):
    if spec.save_artifacts:
        return out / f"instance_{instance:03d}"
    return None


def _spawn(seed_seq, n):
    return [np.random.default_rng(s) for s in seed_seq.spawn(n)]


def _manifest(spec: ExperimentSpec) -> dict:
    return {
        "spec": spec.to_dict(),
        "package_version": __version__,
        "numpy_version": np.__version__,
    }


@dataclass
class TaskOutcome:
    metrics: dict
    failures: list

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def run_patient_zero(spec: ExperimentSpec, out: Path) -> TaskOutcome:
    master = np.random.SeedSequence(spec.seed)
    graph_rng, *instance_rngs = _spawn(master, spec.instances + 1)
    graph = build_graph(spec, graph_rng)
    params = build_params(spec, graph)
    failures = []
    rankings = {m: [] for m in spec.methods}
    truths = []
    rows = []
    sm_grid = None
    for idx, rng in enumerate(instance_rngs):
        cascade, sources = draw_cascade(graph, params, spec, rng)
        truth = int(sources[0])
        obs = full_snapshot(cascade, graph.horizon)
        candidates = [
            i for i in range(graph.n)
            if cascade.states(graph.horizon)[i, graph.horizon] != S
        ]
        truths.append(truth)
        for method in spec.methods:
            try:
                if method == "ann":
                    report, model, _ = _ann_marginals(
                        spec, graph, params.copy(), obs, rng,
                        artifacts_dir=_artifacts_dir(spec, out, idx),
                    )
                    p0_marg = report.final_marginals[:, 0, I]
                    scores = {c: float(p0_marg[c]) for c in candidates}
                    rankings[method].append(scores)
                    rows += [[idx, method, c, s, ""] for c, s in scores.items()]
                elif method == "soft-margin":
                    cfg = SoftMarginConfig(
                        seed=int(rng.integers(2**31 - 1)), **spec.soft_margin
                    )
                    sm_grid = cfg.sharpness
                    result = soft_margin_scores(graph, params, obs, cfg,
                                                candidates=candidates)
                    per_a = {}
                    for a in cfg.sharpness:
                        per_a[a] = dict(zip(result.candidates.tolist(),
                                            result.scores[a].tolist()))
                        rows += [[idx, method, c, s, a] for c, s in per_a[a].items()]
                    rankings[method].append(per_a)
                elif method == "oracle":
                    exact = enumerate_posterior(
                        graph, params, obs, guard=spec.oracle_guard
                    )
                    scores = {c: float(exact.p_source[c]) for c in candidates}
                    rankings[method].append(scores)
                    rows += [[idx, method, c, s, ""] for c, s in scores.items()]
            except EpivarError as exc:
                failures.append({"instance": idx, "method": method, "error": str(exc)})
                rankings[method].append(None)

    curves = {}
    metrics = {"task": spec.task, "n_instances": spec.instances,
               "auc": {}, "top1": {}, "failures": len(failures)}
    for method in spec.methods:
        if method == "soft-margin":
            best_auc, best_a = -1.0, None
            for a in sm_grid or ():
                pairs = [(r[a], t) for r, t in zip(rankings[method], truths) if r]
                if not pairs:
                    continue
                curve = fraction_found_curve([p[0] for p in pairs], [p[1] for p in pairs])
                name = f"soft-margin[a={a}]"
                curves[name] = curve
                metrics["auc"][name] = curve.auc
                metrics["top1"][name] = top1_rate([p[0] for p in pairs], [p[1] for p in pairs])
                if curve.auc > best_auc:
                    best_auc, best_a = curve.auc, a
            if best_a is not None:
                metrics["auc"]["soft-margin[best]"] = best_auc
                metrics["soft_margin_best_a"] = best_a
        else:
            pairs = [(r, t) for r, t in zip(rankings[method], truths) if r]
            if not pairs:
                continue
            curve = fraction_found_curve([p[0] for p in pairs], [p[1] for p in pairs])
            curves[method] = curve
            metrics["auc"][method] = curve.auc
            metrics["top1"][method] = top1_rate([p[0] for p in pairs], [p[1] for p in pairs])
    metrics["per_instance"] = [
        {"instance": k, "truth": truths[k]} for k in range(spec.instances)
    ]

    rpt.write_csv(out / "rankings.csv", ["instance", "method", "candidate", "score", "a"], rows)
    if curves:
        rpt.save_fraction_found_figure(out / "fraction_found.png", curves)
        curve_rows = []
        for name, curve in sorted(curves.items()):
            curve_rows += [[name, f, v] for f, v in zip(curve.fractions, curve.found)]
        rpt.write_csv(out / "fraction_found.csv", ["method", "fraction", "found"], curve_rows)
    rpt.write_metrics_json(out / "metrics.json", metrics)
    return TaskOutcome(metrics, failures)


def _risk_observations(cascade, horizon, rng, observed_fraction=0.5):
    infected = np.flatnonzero(cascade.tau_i <= horizon)
    k = int(round(observed_fraction * len(infected)))
    chosen = rng.choice(infected, size=k, replace=False) if k else np.array([], dtype=int)
    obs = tuple(Observation(int(i), horizon, I) for i in sorted(chosen.tolist()))
    unobserved = np.array([i for i in range(cascade.n) if i not in set(chosen.tolist())])
    return obs, unobserved


def run_risk(spec: ExperimentSpec, out: Path) -> TaskOutcome:
    master = np.random.SeedSequence(spec.seed)
    graph_rng, *instance_rngs = _spawn(master, spec.instances + 1)
    graph = build_graph(spec, graph_rng)
    params = build_params(spec, graph)
    observed_fraction = float(spec.risk.get("observed_fraction", 0.5))
    failures, rows = [], []
    aucs = {m: [] for m in spec.methods}
    for idx, rng in enumerate(instance_rngs):
        cascade, _ = draw_cascade(graph, params, spec, rng)
        obs, unobserved = _risk_observations(cascade, graph.horizon, rng, observed_fraction)
        labels = cascade.tau_i[unobserved] <= graph.horizon
        if labels.all() or not labels.any():
            failures.append({"instance": idx, "method": "recipe",
                             "error": "degenerate labels: all unobserved share one class"})
            continue
        for method in spec.methods:
            try:
                if method == "ann":
                    risk_prior = bool(spec.risk.get("risk_prior", True))
                    report, model, _ = _ann_marginals(
                        spec, graph, params.copy(), obs, rng,
                        artifacts_dir=_artifacts_dir(spec, out, idx),
                        risk_prior=risk_prior,
                    )
                    risk = report.final_marginals[:, graph.horizon, I]
                    scores = risk[unobserved]
                elif method == "contact-tracing":
                    ct = contact_tracing_scores(
                        graph, obs,
                        window=int(spec.contact_tracing.get("window", 5)),
                        final_time=graph.horizon,
                        weighted=bool(spec.contact_tracing.get("weighted", True)),
                    )
                    scores = np.array([ct[int(i)] for i in unobserved])
                elif method == "oracle":
                    exact = enumerate_posterior(graph, params, obs, guard=spec.oracle_guard)
                    scores = exact.marginals[unobserved, graph.horizon, I]
                auc = roc_auc(scores, labels)
                aucs[method].append(auc)
                rows += [[idx, method, int(i), float(s)] for i, s in zip(unobserved, scores)]
            except EpivarError as exc:
                failures.append({"instance": idx, "method": method, "error": str(exc)})
    metrics = {
        "task": spec.task, "n_instances": spec.instances, "failures": len(failures),
        "auc": {
            m: {
                "mean": float(np.mean(v)) if v else None,
                "se": float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else None,
                "per_instance": [float(x) for x in v],
            }
            for m, v in aucs.items()
        },
    }
    rpt.write_csv(out / "risk_scores.csv", ["instance", "method", "i", "score"], rows)
    strip = {m: v for m, v in aucs.items() if v}
    if strip:
        rpt.save_auc_strip_figure(out / "risk_auc.png", strip, "ROC AUC (unobserved infected)")
    rpt.write_metrics_json(out / "metrics.json", metrics)
    return TaskOutcome(metrics, failures)


def run_params(spec: ExperimentSpec, out: Path) -> TaskOutcome:
    mode = spec.params_task.get("mode", "single")
    master = np.random.SeedSequence(spec.seed)
    graph_rng, *instance_rngs = _spawn(master, spec.instances + 1)
    graph = build_graph(spec, graph_rng)
    true_params = build_params(spec, graph)
    failures, rows = [], []
    if true_params.values is None:
        raise ConfigError("params task needs explicit true parameter values")
    if mode == "single":
        rel_errors, trajectories, elbos = [], [], []
        for idx, rng in enumerate(instance_rngs):
            cascade, _ = draw_cascade(graph, true_params, spec, rng)
            obs = full_snapshot(cascade, graph.horizon)
            fit_params = build_params(spec, graph, initial=True)
            try:
                posterior = PosteriorModel(graph, fit_params, obs)
                model = _ann_model(spec, graph, posterior, rng)
                cfg = train_config(spec, param_learning=True,
                                   learn=tuple(spec.params.get("learn", ("lambda",))))
                report = anneal_train(model, posterior, cfg, rng)
            except EpivarError as exc:
                failures.append({"instance": idx, "method": "ann", "error": str(exc)})
                continue
            est = report.lambda_hat[-1]
            err = float(np.abs(est - true_params.values).mean()
                        / np.abs(true_params.values).mean())
            rel_errors.append(err)
            elbos.append(report.final_elbo)
            trajectories.append(report.lambda_hat[:, 0])
            rows += [[idx, k + 1, float(v)] for k, v in enumerate(report.lambda_hat[:, 0])]
        metrics = {
            "task": spec.task, "mode": mode, "n_instances": spec.instances,
            "failures": len(failures),
            "true_value": [float(v) for v in true_params.values],
            "relative_error": {
                "mean": float(np.mean(rel_errors)) if rel_errors else None,
                "per_instance": [float(e) for e in rel_errors],
            },
            "elbo": [float(e) for e in elbos],
        }
        rpt.write_csv(out / "param_trajectory.csv", ["instance", "step", "value"], rows)
        if trajectories:
            rpt.save_param_trajectories_figure(
                out / "param_trajectories.png", trajectories,
                float(true_params.values[0]), "transmission parameter estimate",
            )
    elif mode == "two-class":
        if true_params.n_classes() != 2 or true_params.class_of is None:
            raise ConfigError("two-class mode needs two values and a class map")
        diffs, fits = [], []
        for idx, rng in enumerate(instance_rngs):
            cascade, _ = draw_cascade(graph, true_params, spec, rng)
            obs = full_snapshot(cascade, graph.horizon)
            try:
                results = {}
                for split in ("true", "null"):
                    fit_params = build_params(spec, graph, initial=True)
                    if split == "null":
                        fit_params.class_of = rng.permutation(fit_params.class_of)
                    posterior = PosteriorModel(graph, fit_params, obs)
                    model = _ann_model(spec, graph, posterior, rng)
                    cfg = train_config(spec, learn=tuple(spec.params.get("learn", ("lambda",))))
                    results[split] = two_class_fit(model, posterior, cfg, rng)
                diff = results["true"].elbo - results["null"].elbo
                diffs.append(float(diff))
                fits.append({
                    "instance": idx,
                    "true_split": [float(v) for v in results["true"].values],
                    "null_split": [float(v) for v in results["null"].values],
                    "elbo_true": float(results["true"].elbo),
                    "elbo_null": float(results["null"].elbo),
                })
                rows.append([idx, results["true"].elbo, results["null"].elbo, diff,
                             *results["true"].values, *results["null"].values])
            except EpivarError as exc:
                failures.append({"instance": idx, "method": "ann", "error": str(exc)})
        metrics = {
            "task": spec.task, "mode": mode, "n_instances": spec.instances,
            "failures": len(failures),
            "true_values": [float(v) for v in true_params.values],
            "elbo_difference": diffs,
            "wins": int(sum(d > 0 for d in diffs)),
            "fits": fits,
        }
        rpt.write_csv(
            out / "two_class.csv",
            ["instance", "elbo_true", "elbo_null", "difference",
             "true_fit_0", "true_fit_1", "null_fit_0", "null_fit_1"],
            rows,
        )
        if diffs:
            rpt.save_elbo_difference_figure(out / "elbo_difference.png", diffs)
    else:
        raise ConfigError(f"unknown params mode {mode!r}")
    rpt.write_metrics_json(out / "metrics.json", metrics)
    return TaskOutcome(metrics, failures)


def _l1_source_error(est: np.ndarray, exact: np.ndarray) -> float:
    return float(np.abs(est - exact).sum())


def run_scaling(spec: ExperimentSpec, out: Path) -> TaskOutcome:
    sc = spec.scaling
    lambdas = sc.get("lambdas", [0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75])
    sizes = sc.get("sizes")   # optional per-instance exact epidemic sizes
    size_lo, size_hi = sc.get("target_sizes", [2, 8])
    criterion = float(sc.get("criterion", 0.1))
    step_grid = sc.get("step_grid", [2**k for k in range(4, 12)])
    samples_per_step = int(sc.get("samples_per_step",
                                  spec.train.get("samples_per_step", 1000)))
    eval_samples = int(sc.get("eval_samples", 8000))
    sm_base = int(sc.get("sm_base", 2048))
    sm_cap = int(sc.get("sm_cap", 2_000_000))
    master = np.random.SeedSequence(spec.seed)
    graph_rng, *instance_rngs = _spawn(master, spec.instances + 1)
    graph = build_graph(spec, graph_rng)
    params = build_params(spec, graph)
    if params.mu != 0.0:
        raise ConfigError("the scaling task requires mu = 0")
    failures, rows = [], []
    for idx, rng in enumerate(instance_rngs):
        lam = float(lambdas[idx % len(lambdas)])
        target = int(sizes[idx % len(sizes)]) if sizes else None
        run_params_ = EpidemicParams(mu=0.0, mode="prob", values=[lam], p0=params.p0)
        cascade = None
        for _ in range(int(spec.cascade.get("retry_cap", 500))):
            source = int(rng.integers(graph.n))
            tau_i, tau_r = simulate_batch(graph, run_params_, [source], 1, rng)
            cand = Cascade(tau_i[0], tau_r[0])
            n_inf = int((cand.tau_i <= graph.horizon).sum())
            hit = n_inf == target if target else size_lo <= n_inf <= size_hi
            if hit:
                cascade = cand
                break
        if cascade is None:
            wanted = target if target else f"[{size_lo}, {size_hi}]"
            failures.append({"instance": idx, "method": "recipe",
                             "error": f"no cascade with epidemic size {wanted}"})
            continue
        obs = full_snapshot(cascade, graph.horizon)
        try:
            exact = enumerate_posterior(graph, run_params_, obs, guard=spec.oracle_guard)
        except EpivarError as exc:
            failures.append({"instance": idx, "method": "oracle", "error": str(exc)})
            continue
        for method in spec.methods:
            try:
                if method == "ann":
                    samples_used, converged, err = None, False, None
                    prev_steps = None
                    for steps in step_grid:
                        posterior = PosteriorModel(graph, run_params_.copy(), obs)
                        model = _ann_model(spec, graph, posterior, rng)
                        cfg = train_config(
                            spec, steps=steps, samples_per_step=samples_per_step,
                            eval_samples=eval_samples,
                        )
                        report = anneal_train(model, posterior, cfg, rng)
                        err = _l1_source_error(
                            report.final_marginals[:, 0, I], exact.p_source
                        )
                        if err < criterion:
                            bracket_lo = prev_steps if prev_steps else steps
                            samples_used = 0.5 * (steps + bracket_lo) * samples_per_step
                            converged = True
                            break
                        prev_steps = steps
                    if not converged:
                        samples_used = step_grid[-1] * samples_per_step
                elif method == "soft-margin":
                    candidates = np.flatnonzero(cascade.tau_i <= graph.horizon)
                    grid = tuple(spec.soft_margin.get("sharpness",
                                                      (0.05, 0.1, 0.2, 0.4, 0.8)))
                    m, converged, err = sm_base, False, None
                    while True:
                        cfg = SoftMarginConfig(
                            n_simulations=m, sharpness=grid,
                            seed=int(rng.integers(2**31 - 1)),
                        )
                        result = soft_margin_scores(graph, run_params_, obs, cfg,
                                                    candidates=candidates)
                        errs = []
                        for a in grid:
                            est = np.zeros(graph.n)
                            est[result.candidates] = result.scores[a]
                            errs.append(_l1_source_error(est, exact.p_source))
                        err = min(errs)
                        if err < criterion:
                            converged = True
                            break
                        if 2 * m > sm_cap:
                            break
                        m *= 2
                    samples_used = m * len(candidates)
                n_inf = int((cascade.tau_i <= graph.horizon).sum())
                rows.append({"instance": idx, "method": method, "lambda": lam,
                             "n_infected": n_inf, "samples": float(samples_used),
                             "converged": bool(converged), "final_error": float(err)})
            except EpivarError as exc:
                failures.append({"instance": idx, "method": method, "error": str(exc)})
    slopes = {}
    for method in spec.methods:
        pts = [(r["n_infected"], r["samples"]) for r in rows
               if r["method"] == method and r["converged"]]
        if len(pts) >= 2 and len({p[0] for p in pts}) >= 2:
            x = np.array([p[0] for p in pts], dtype=float)
            y = np.log(np.array([p[1] for p in pts], dtype=float))
            slopes[method] = float(np.polyfit(x, y, 1)[0])
        else:
            slopes[method] = None
    metrics = {
        "task": spec.task, "n_instances": spec.instances, "failures": len(failures),
        "criterion": criterion,
        "log_samples_slope": slopes,
        "censored": {
            m: int(sum(1 for r in rows if r["method"] == m and not r["converged"]))
            for m in spec.methods
        },
        "rows": rows,
    }
    rpt.write_csv(
        out / "scaling.csv",
        ["instance", "method", "lambda", "n_infected", "samples", "converged", "final_error"],
        [[r["instance"], r["method"], r["lambda"], r["n_infected"], r["samples"],
          r["converged"], r["final_error"]] for r in rows],
    )
    if rows:
        rpt.save_scaling_figure(out / "scaling.png", rows)
    rpt.write_metrics_json(out / "metrics.json", metrics)
    return TaskOutcome(metrics, failures)


def run_diagnose(spec: ExperimentSpec, out: Path) -> TaskOutcome:
    dg = spec.diagnose
    mode = dg.get("mode", "prior")
    n_cascades = int(dg.get("n_cascades", 1000))
    master = np.random.SeedSequence(spec.seed)
    graph_rng, ref_rng, batch_rng = _spawn(master, 3)
    graph = build_graph(spec, graph_rng)
    params = build_params(spec, graph)
    source = dg.get("source")
    source = int(ref_rng.integers(graph.n)) if source is None else int(source)
    window = spec.cascade.get("final_fraction", [0.2, 0.8])
    reference = None
    for _ in range(int(spec.cascade.get("retry_cap", 100))):
        tau_i0, tau_r0 = simulate_batch(graph, params, [source], 1, ref_rng)
        reference = Cascade(tau_i0[0], tau_r0[0])
        if window[0] <= final_infected_fraction(reference, graph.horizon) <= window[1]:
            break
    failures = []
    T = graph.horizon
    if mode == "prior":
        tau_i, tau_r = simulate_batch(graph, params, [source], n_cascades, batch_rng)
    elif mode == "posterior":
        obs = full_snapshot(reference, T)
        try:
            report, model, posterior = _ann_marginals(spec, graph, params.copy(), obs,
                                                      batch_rng)
            batch = sample(model, n_cascades, batch_rng)
            tau_i, tau_r = batch.tau_i, batch.tau_r
        except EpivarError as exc:
            failures.append({"instance": 0, "method": "ann", "error": str(exc)})
            rpt.write_metrics_json(out / "metrics.json",
                                   {"task": spec.task, "failures": 1})
            return TaskOutcome({"task": spec.task}, failures)
    else:
        raise ConfigError(f"unknown diagnose mode {mode!r}")

    steps = np.arange(T + 1)
    cumulative = (tau_i[:, :, None] <= steps[None, None, :]).sum(axis=1)
    ref_cum = (reference.tau_i[:, None] <= steps[None, :]).sum(axis=0)
    hamming = np.empty((n_cascades, T + 1), dtype=np.int64)
    for t in range(T + 1):
        ref_inf = (reference.tau_i <= t)
        sim_inf = tau_i <= t
        hamming[:, t] = (sim_inf != ref_inf[None, :]).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        prior_logprobs = log_prior((tau_i, tau_r), graph, params)
    ref_logprob = log_prior(reference, graph, params)

    rpt.write_csv(out / "cumulative_infected.csv", ["cascade", "t", "cumulative"],
                  [[b, t, int(cumulative[b, t])] for b in range(n_cascades)
                   for t in range(T + 1)])
    rpt.write_csv(out / "hamming.csv", ["cascade", "t", "distance"],
                  [[b, t, int(hamming[b, t])] for b in range(n_cascades)
                   for t in range(T + 1)])
    rpt.write_csv(out / "prior_logprob.csv", ["cascade", "log_prior"],
                  [[b, float(prior_logprobs[b])] for b in range(n_cascades)])
    rpt.save_diagnose_figures(out, cumulative, hamming, prior_logprobs,
                              ref_logprob, ref_cum)
    mean_h = hamming.mean(axis=0)
    metrics = {
        "task": spec.task, "mode": mode, "n_cascades": n_cascades,
        "failures": len(failures),
        "source": source,
        "reference_log_prior": float(ref_logprob),
        "mean_hamming": [float(v) for v in mean_h],
        "fraction_zero_at_final": float((hamming[:, T] == 0).mean()),
        "hamming_monotone_start": bool(np.all(np.diff(mean_h[: min(4, T + 1)]) >= 0)),
        "finite_prior_fraction": float(np.isfinite(prior_logprobs).mean()),
    }
    rpt.write_metrics_json(out / "metrics.json", metrics)
    return TaskOutcome(metrics, failures)


_RUNNERS = {
    "patient-zero": run_patient_zero,
    "risk": run_risk,
    "params": run_params,
    "scaling": run_scaling,
    "diagnose": run_diagnose,
}


def run_experiment(spec: ExperimentSpec, out_dir=None) -> TaskOutcome:
    out = Path(out_dir if out_dir is not None else (spec.out or "."))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(_manifest(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    outcome = _RUNNERS[spec.task](spec, out)
    if outcome.failures:
        rpt.write_metrics_json(out / "failures.json", {"failures": outcome.failures})
    return outcome
