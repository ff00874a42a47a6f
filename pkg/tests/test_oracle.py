import math

import numpy as np
import pytest

from epivar.autoreg import NEXT_NEAREST, build_model, build_ordering, log_density, sample
from epivar.epidemic import Cascade, EpidemicParams, I, R, S, simulate_batch
from epivar.errors import EnumerationTooLargeError
from epivar.observations import Observation, PosteriorModel, full_snapshot
from epivar.oracle import (
    SINGLE_SOURCE,
    enumerate_posterior,
    exact_kl,
    exact_kl_gradient,
)

from conftest import chain_graph, empty_graph


def make_model(graph, params, obs, seed=3, method="spanning_tree", root=0,
               policy=NEXT_NEAREST):
    rng = np.random.default_rng(seed)
    post = PosteriorModel(graph, params, tuple(obs))
    ordering = build_ordering(graph, method, rng, root=root)
    return post, build_model(graph, ordering, policy, post.supports(), rng)


def two_cascade_instance(mu=0.25):
    """Single isolated node, T=1, observed infected at t=0: the posterior has
    exactly two cascades, recover-at-1 with mass mu and stay-infected with 1-mu."""
    g = empty_graph(1, horizon=1)
    params = EpidemicParams(mu=mu, p0=0.5)
    obs = [Observation(0, 0, I)]
    return g, params, obs


class TestEnumeration:
    def test_single_node_three_trajectories(self):
        g = empty_graph(1, horizon=1)
        params = EpidemicParams(mu=0.5, p0=0.5)
        exact = enumerate_posterior(g, params, [])
        # no observations: the posterior is the prior, which normalizes exactly
        assert exact.log_z == pytest.approx(0.0, abs=1e-12)
        weights = {}
        for start, tau_i, tau_r in exact.blocks():
            for k in range(len(tau_i)):
                weights[(tau_i[k, 0], tau_r[k, 0])] = math.exp(exact.log_weight[start + k])
        assert weights[(2, 2)] == pytest.approx(0.5)
        assert weights[(0, 1)] == pytest.approx(0.25)
        assert weights[(0, 2)] == pytest.approx(0.25)
        assert weights[(1, 2)] == 0.0

    def test_prior_normalizes_on_small_instances(self):
        # sum of exp(log_prior) over all trajectory combinations equals 1
        for n, T in ((2, 3), (3, 2), (3, 3)):
            g = chain_graph(n, horizon=T, lam=0.35)
            params = EpidemicParams(mu=0.4, p0=0.3)
            exact = enumerate_posterior(g, params, [])
            assert exact.log_z == pytest.approx(0.0, abs=1e-10)

    def test_disconnected_source_marginal_independent_of_observation(self):
        g = empty_graph(2, horizon=2)
        params = EpidemicParams(mu=0.5, p0=0.3)
        with_obs = enumerate_posterior(g, params, [Observation(1, 2, I)])
        assert with_obs.p_source[0] == pytest.approx(0.3, abs=1e-12)

    def test_fully_observed_log_z_is_cascade_score(self):
        g = chain_graph(2, horizon=2, lam=0.5)
        params = EpidemicParams(mu=0.25, p0=0.4)
        truth = Cascade([0, 1], [2, 3])
        obs = []
        st = truth.states(g.horizon)
        for i in range(2):
            for t in range(g.horizon + 1):
                obs.append(Observation(i, t, int(st[i, t])))
        post = PosteriorModel(g, params, tuple(obs))
        exact = enumerate_posterior(g, params, obs)
        assert exact.n_cascades == 1
        expected = post.regularized_log_posterior(
            truth.tau_i[None, :], truth.tau_r[None, :]
        )[0]
        assert exact.log_z == pytest.approx(expected, abs=1e-12)

    def test_marginals_normalize(self):
        g = chain_graph(3, horizon=3, lam=0.4)
        params = EpidemicParams(mu=0.2, p0=0.25)
        exact = enumerate_posterior(g, params, [Observation(2, 3, I)])
        assert np.allclose(exact.marginals.sum(axis=-1), 1.0, atol=1e-10)

    def test_guard_rejects_large_instances(self):
        g = chain_graph(8, horizon=8, lam=0.3)
        params = EpidemicParams(mu=0.3, p0=0.2)
        with pytest.raises(EnumerationTooLargeError):
            enumerate_posterior(g, params, [], guard=1e4)

    def test_log_z_invariant_under_relabeling(self):
        g = chain_graph(3, horizon=2, lam=0.45)
        params = EpidemicParams(mu=0.3, p0=0.2)
        obs = [Observation(0, 2, I), Observation(2, 2, S)]
        exact = enumerate_posterior(g, params, obs)
        # relabel nodes with the reversal permutation 0<->2
        g2 = chain_graph(3, horizon=2, lam=0.45)  # chain is symmetric under reversal
        obs2 = [Observation(2, 2, I), Observation(0, 2, S)]
        exact2 = enumerate_posterior(g2, params, obs2)
        assert exact.log_z == pytest.approx(exact2.log_z, abs=1e-12)

    def test_rejection_sampling_agrees_with_enumeration(self):
        # mu = 0 chain: simulate from the factorized prior, keep cascades matching
        # the full final snapshot, compare source frequencies with exact marginals
        g = chain_graph(4, horizon=3, lam=0.45)
        params = EpidemicParams(mu=0.0, p0=0.25)
        truth = Cascade([3, 0, 1, 4], [4, 4, 4, 4])
        obs = full_snapshot(truth, g.horizon)
        exact = enumerate_posterior(g, params, obs)
        rng = np.random.default_rng(99)
        tau_i, tau_r = simulate_batch(g, params, "prior", 400_000, rng)
        final = truth.states(g.horizon)[:, g.horizon]
        sim_final = np.where(tau_i <= g.horizon, I, S)
        accept = np.all(sim_final == final[None, :], axis=1)
        kept = tau_i[accept]
        assert kept.shape[0] > 500
        for i in range(4):
            freq = (kept[:, i] == 0).mean()
            p = exact.p_source[i]
            se = math.sqrt(max(p * (1 - p), 1e-12) / kept.shape[0])
            assert abs(freq - p) < 3 * se + 1e-3


class TestSingleSource:
    def test_source_posterior_sums_to_one(self):
        g = chain_graph(4, horizon=3, lam=0.5)
        params = EpidemicParams(mu=0.2, p0=0.25)
        truth = Cascade([0, 1, 2, 4], [4, 4, 4, 4])
        obs = full_snapshot(truth, g.horizon)
        exact = enumerate_posterior(g, params, obs, initial=SINGLE_SOURCE)
        assert exact.p_source.sum() == pytest.approx(1.0, abs=1e-10)

    def test_single_source_excludes_multi_source_mass(self):
        g = empty_graph(2, horizon=1)
        params = EpidemicParams(mu=0.5, p0=0.5)
        exact = enumerate_posterior(g, params, [], initial=SINGLE_SOURCE)
        # every surviving cascade has exactly one source
        for start, tau_i, _ in exact.blocks():
            w = np.exp(exact.log_weight[start:start + len(tau_i)] - exact.log_z)
            n_src = (tau_i == 0).sum(axis=1)
            assert np.all(w[n_src != 1] == 0.0)


class TestExactKL:
    def test_uniform_vs_quarter_three_quarter(self):
        g, params, obs = two_cascade_instance(mu=0.25)
        post, model = make_model(g, params, obs)
        for nc in model.nodes:
            for net in (nc.inf_net, nc.rec_net):
                if net is not None:
                    for p in net.parameters():
                        p[:] = 0.0
        exact = enumerate_posterior(g, params, obs)
        # hand value: 0.5 log(0.5/0.25) + 0.5 log(0.5/0.75)
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert exact_kl(model, exact) == pytest.approx(expected, abs=1e-12)

    def test_zero_when_model_equals_posterior(self):
        g, params, obs = two_cascade_instance(mu=0.25)
        post, model = make_model(g, params, obs)
        nc = model.nodes[0]
        for p in nc.rec_net.parameters():
            p[:] = 0.0
        nc.rec_net.biases[-1][:] = np.log([0.25, 0.75])
        exact = enumerate_posterior(g, params, obs)
        assert exact_kl(model, exact) == pytest.approx(0.0, abs=1e-10)

    def test_nonnegative(self, rng):
        g = chain_graph(2, horizon=2, lam=0.4)
        params = EpidemicParams(mu=0.3, p0=0.3)
        obs = [Observation(1, 2, I)]
        post, model = make_model(g, params, obs, seed=7)
        exact = enumerate_posterior(g, params, obs)
        assert exact_kl(model, exact, regularized=True) >= -1e-12

    def test_mass_on_impossible_cascade_reports_infinity(self):
        g = empty_graph(1, horizon=1)
        params = EpidemicParams(mu=0.5, p0=0.5)
        post, model = make_model(g, params, [])
        exact = enumerate_posterior(g, params, [])
        with pytest.warns(UserWarning, match="zero-posterior"):
            assert exact_kl(model, exact) == math.inf
        assert np.isfinite(exact_kl(model, exact, regularized=True))

    def test_regularized_matches_strict_when_nothing_clamped(self):
        g, params, obs = two_cascade_instance(mu=0.3)
        post, model = make_model(g, params, obs, seed=11)
        exact = enumerate_posterior(g, params, obs)
        assert exact_kl(model, exact) == pytest.approx(
            exact_kl(model, exact, regularized=True), abs=1e-10
        )


class TestExactKLGradient:
    def test_zero_at_posterior(self):
        g, params, obs = two_cascade_instance(mu=0.25)
        post, model = make_model(g, params, obs)
        nc = model.nodes[0]
        for p in nc.rec_net.parameters():
            p[:] = 0.0
        nc.rec_net.biases[-1][:] = np.log([0.25, 0.75])
        exact = enumerate_posterior(g, params, obs)
        grads = exact_kl_gradient(model, exact)
        for gi, gr in grads.values():
            for block in (gi or []) + (gr or []):
                assert np.all(np.abs(block) < 1e-8)

    def test_matches_finite_difference_of_exact_kl(self):
        g = chain_graph(2, horizon=2, lam=0.5)
        params = EpidemicParams(mu=0.3, p0=0.4)
        obs = [Observation(0, 2, I)]
        post, model = make_model(g, params, obs, seed=13)
        # move every parameter off its init so no ReLU sits exactly at the kink,
        # where the finite-difference quotient is ill-defined
        noise = np.random.default_rng(5)
        for nc in model.nodes:
            for net in (nc.inf_net, nc.rec_net):
                if net is not None:
                    for p in net.parameters():
                        p += noise.normal(0.0, 0.1, size=p.shape)
        exact = enumerate_posterior(g, params, obs)
        grads = exact_kl_gradient(model, exact)
        h = 1e-5
        num, den = 0.0, 0.0
        for node, (gi, gr) in grads.items():
            nc = model.nodes[node]
            for net, buf in ((nc.inf_net, gi), (nc.rec_net, gr)):
                if net is None:
                    continue
                for p, g_ana in zip(net.parameters(), buf):
                    if p.size == 0:
                        continue
                    it = np.nditer(p, flags=["multi_index"])
                    for _ in it:
                        mi = it.multi_index
                        orig = p[mi]
                        p[mi] = orig + h
                        plus = exact_kl(model, exact, regularized=True)
                        p[mi] = orig - h
                        minus = exact_kl(model, exact, regularized=True)
                        p[mi] = orig
                        fd = (plus - minus) / (2 * h)
                        num += (g_ana[mi] - fd) ** 2
                        den += fd**2
        assert math.sqrt(num) < 1e-4 * max(math.sqrt(den), 1e-12)

    def test_logit_shift_gauge_direction_is_flat(self, rng):
        g = chain_graph(2, horizon=2, lam=0.4)
        params = EpidemicParams(mu=0.2, p0=0.3)
        post, model = make_model(g, params, [], seed=17)
        exact = enumerate_posterior(g, params, [])
        grads = exact_kl_gradient(model, exact)
        for node, (gi, gr) in grads.items():
            for buf in (gi, gr):
                if buf is not None:
                    assert abs(buf[-1].sum()) < 1e-10
