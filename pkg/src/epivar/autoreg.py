"""Autoregressive variational distribution over epidemic cascades.

Individuals are visited in a fixed order; each individual carries up to two
dense networks, one producing a distribution over its feasible infection
times and one over its feasible recovery times.  Network inputs are the
concatenated one-hot encodings of the (already sampled) infection and
recovery times of the individual's dependency set; the recovery network
additionally receives the individual's own infection time.  Components whose
feasible value set is a single point are parameter-free and contribute no
input block downstream, so fully observed individuals drop out of the
network entirely.

The recovery distribution is masked to the recovery times compatible with
the sampled infection time (recovery strictly later, never-infected pairs
with never-recovered) and renormalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .contact_graph import TemporalContactGraph, second_neighbors
from .errors import EpivarError
from .nn import DenseNet, backward, forward, init_dense_net, net_from_payload, net_to_payload, new_grad_buffer

ORDER_RANDOM = "random"
ORDER_SPANNING_TREE = "spanning_tree"

MEAN_FIELD = "mean_field"
NEAREST = "nearest"
NEXT_NEAREST = "next_nearest"
FULL = "full"
POLICIES = (MEAN_FIELD, NEAREST, NEXT_NEAREST, FULL)

IMPOSSIBLE = -np.inf


@dataclass
class Ordering:
    order: np.ndarray          # order[k] = individual sampled at position k
    method: str
    root: int | None = None

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        n = len(self.order)
        if sorted(self.order.tolist()) != list(range(n)):
            raise ValueError("order must be a permutation of 0..n-1")
        self.rank = np.empty(n, dtype=np.int64)
        self.rank[self.order] = np.arange(n)


def build_ordering(
    graph: TemporalContactGraph,
    method: str = ORDER_RANDOM,
    rng: np.random.Generator | None = None,
    root: int | None = None,
) -> Ordering:
    """Random permutation, or BFS order of a spanning tree so that every node
    appears after its tree parent (per connected component)."""
    rng = rng if rng is not None else np.random.default_rng()
    if method == ORDER_RANDOM:
        return Ordering(rng.permutation(graph.n), method)
    if method != ORDER_SPANNING_TREE:
        raise ValueError(f"unknown ordering method {method!r}")
    if root is None:
        root = int(rng.integers(graph.n))
    adj = graph.union_adjacency
    visited = np.zeros(graph.n, dtype=bool)
    order = []
    starts = [root] + [i for i in range(graph.n) if i != root]
    for start in starts:
        if visited[start]:
            continue
        queue = [start]
        visited[start] = True
        while queue:
            node = queue.pop(0)
            order.append(node)
            for nb in adj[node]:
                if not visited[nb]:
                    visited[nb] = True
                    queue.append(int(nb))
    return Ordering(np.array(order), method, root=root)


def dependency_set(
    graph: TemporalContactGraph, ordering: Ordering, policy: str, node: int
) -> np.ndarray:
    """Earlier-ordered individuals the conditional of ``node`` may depend on,
    sorted by ascending position in the ordering."""
    rank = ordering.rank
    if policy == MEAN_FIELD:
        cand = np.array([], dtype=np.int64)
    elif policy == NEAREST:
        cand = graph.union_adjacency[node]
    elif policy == NEXT_NEAREST:
        cand = second_neighbors(graph, node)
    elif policy == FULL:
        cand = np.array([j for j in range(graph.n) if j != node], dtype=np.int64)
    else:
        raise ValueError(f"unknown dependency policy {policy!r}")
    cand = cand[rank[cand] < rank[node]]
    return cand[np.argsort(rank[cand])]


@dataclass
class NodeConditional:
    node: int
    deps: np.ndarray
    input_deps: list          # (dep node, "ti" | "tr") blocks actually encoded
    ti_values: np.ndarray
    tr_values: np.ndarray
    tr_allowed: np.ndarray    # (len(ti_values), len(tr_values)) bool
    inf_net: DenseNet | None
    rec_net: DenseNet | None


@dataclass
class SampleBatch:
    tau_i: np.ndarray
    tau_r: np.ndarray
    log_q: np.ndarray
    # forward caches and drawn value indices from the sampling pass; valid for
    # gradient replay until the model parameters change
    caches: dict | None = None
    ti_idx: np.ndarray | None = None
    tr_idx: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.log_q)


@dataclass
class AutoregressiveModel:
    n: int
    horizon: int
    ordering: Ordering
    policy: str
    supports: list
    nodes: list

    def node_sequence(self):
        return (self.nodes[i] for i in self.ordering.order)


def _block_width(values: np.ndarray) -> int:
    # single-point components are constant; they carry no information downstream
    return len(values) if len(values) >= 2 else 0


def build_model(
    graph: TemporalContactGraph,
    ordering: Ordering,
    policy: str,
    supports: list,
    rng: np.random.Generator,
) -> AutoregressiveModel:
    """Assemble the per-individual conditionals for the given feasible supports."""
    if policy not in POLICIES:
        raise ValueError(f"unknown dependency policy {policy!r}")
    n, horizon = graph.n, graph.horizon
    ti_values = [np.unique(s[:, 0]) for s in supports]
    tr_values = [np.unique(s[:, 1]) for s in supports]
    nodes: list[NodeConditional | None] = [None] * n
    for node in range(n):
        deps = dependency_set(graph, ordering, policy, node)
        input_deps = []
        in_width = 0
        for j in deps:
            if _block_width(ti_values[j]):
                input_deps.append((int(j), "ti"))
                in_width += len(ti_values[j])
            if _block_width(tr_values[j]):
                input_deps.append((int(j), "tr"))
                in_width += len(tr_values[j])
        tiv, trv = ti_values[node], tr_values[node]
        tr_allowed = np.zeros((len(tiv), len(trv)), dtype=bool)
        a = np.searchsorted(tiv, supports[node][:, 0])
        b = np.searchsorted(trv, supports[node][:, 1])
        tr_allowed[a, b] = True
        inf_net = init_dense_net(in_width, len(tiv), rng) if len(tiv) >= 2 else None
        rec_in = in_width + _block_width(tiv)
        rec_net = init_dense_net(rec_in, len(trv), rng) if len(trv) >= 2 else None
        nodes[node] = NodeConditional(
            node=node, deps=deps, input_deps=input_deps,
            ti_values=tiv, tr_values=trv, tr_allowed=tr_allowed,
            inf_net=inf_net, rec_net=rec_net,
        )
    return AutoregressiveModel(
        n=n, horizon=horizon, ordering=ordering, policy=policy,
        supports=supports, nodes=nodes,
    )


def _node_input(model: AutoregressiveModel, nc: NodeConditional,
                ti_idx: np.ndarray, tr_idx: np.ndarray) -> np.ndarray:
    B = ti_idx.shape[0]
    width = sum(
        len(model.nodes[j].ti_values if comp == "ti" else model.nodes[j].tr_values)
        for j, comp in nc.input_deps
    )
    x = np.zeros((B, width))
    col = 0
    rows = np.arange(B)
    for j, comp in nc.input_deps:
        if comp == "ti":
            k = len(model.nodes[j].ti_values)
            x[rows, col + ti_idx[:, j]] = 1.0
        else:
            k = len(model.nodes[j].tr_values)
            x[rows, col + tr_idx[:, j]] = 1.0
        col += k
    return x


def _rec_input(nc: NodeConditional, x: np.ndarray, ti: np.ndarray) -> np.ndarray:
    if len(nc.ti_values) < 2:
        return x
    own = np.zeros((x.shape[0], len(nc.ti_values)))
    own[np.arange(x.shape[0]), ti] = 1.0
    return np.hstack([x, own])


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < u[:, None]).sum(axis=1)
    np.minimum(idx, probs.shape[1] - 1, out=idx)
    bad = probs[np.arange(len(idx)), idx] <= 0.0
    if bad.any():
        idx[bad] = probs[bad].argmax(axis=1)
    return idx


def sample(model: AutoregressiveModel, batch: int, rng: np.random.Generator,
           keep_caches: bool = False) -> SampleBatch:
    """Ancestral sampling; the returned log_q equals log_density of the samples exactly.

    ``keep_caches`` retains the forward caches for a gradient replay over the
    same batch (see :func:`score_gradient`), trading memory for one forward
    pass per conditional.
    """
    B, n = batch, model.n
    ti_idx = np.zeros((B, n), dtype=np.int64)
    tr_idx = np.zeros((B, n), dtype=np.int64)
    log_q = np.zeros(B)
    rows = np.arange(B)
    caches = {} if keep_caches else None
    for nc in model.node_sequence():
        cache_i = cache_r = None
        if nc.inf_net is not None:
            probs, cache_i = forward(nc.inf_net, _node_input(model, nc, ti_idx, tr_idx))
            it = _draw(probs, rng)
            log_q += np.log(probs[rows, it])
        else:
            it = np.zeros(B, dtype=np.int64)
        if nc.rec_net is not None:
            xr = _rec_input(nc, _node_input(model, nc, ti_idx, tr_idx), it)
            probs, cache_r = forward(nc.rec_net, xr, mask=nc.tr_allowed[it])
            rt = _draw(probs, rng)
            log_q += np.log(probs[rows, rt])
        else:
            rt = np.zeros(B, dtype=np.int64)
        ti_idx[:, nc.node] = it
        tr_idx[:, nc.node] = rt
        if keep_caches:
            caches[nc.node] = (cache_i, cache_r)
    tau_i = np.empty((B, n), dtype=np.int64)
    tau_r = np.empty((B, n), dtype=np.int64)
    for i in range(n):
        tau_i[:, i] = model.nodes[i].ti_values[ti_idx[:, i]]
        tau_r[:, i] = model.nodes[i].tr_values[tr_idx[:, i]]
    return SampleBatch(tau_i=tau_i, tau_r=tau_r, log_q=log_q,
                       caches=caches, ti_idx=ti_idx if keep_caches else None,
                       tr_idx=tr_idx if keep_caches else None)


def _value_indices(model: AutoregressiveModel, tau_i: np.ndarray, tau_r: np.ndarray):
    """Map times to per-node value indices; flags rows outside the support."""
    B, n = tau_i.shape
    ti_idx = np.zeros((B, n), dtype=np.int64)
    tr_idx = np.zeros((B, n), dtype=np.int64)
    valid = np.ones(B, dtype=bool)
    for i in range(n):
        nc = model.nodes[i]
        a = np.searchsorted(nc.ti_values, tau_i[:, i])
        a_ok = (a < len(nc.ti_values)) & (nc.ti_values[np.minimum(a, len(nc.ti_values) - 1)] == tau_i[:, i])
        b = np.searchsorted(nc.tr_values, tau_r[:, i])
        b_ok = (b < len(nc.tr_values)) & (nc.tr_values[np.minimum(b, len(nc.tr_values) - 1)] == tau_r[:, i])
        ok = a_ok & b_ok
        a = np.where(a_ok, a, 0)
        b = np.where(b_ok, b, 0)
        ok &= nc.tr_allowed[a, b]
        valid &= ok
        ti_idx[:, i] = a
        tr_idx[:, i] = b
    return ti_idx, tr_idx, valid


def log_density(model: AutoregressiveModel, tau_i: np.ndarray, tau_r: np.ndarray) -> np.ndarray:
    """Exact log q of a (B, n) batch; -inf for cascades outside the support."""
    squeeze = tau_i.ndim == 1
    if squeeze:
        tau_i, tau_r = tau_i[None, :], tau_r[None, :]
    ti_idx, tr_idx, valid = _value_indices(model, tau_i, tau_r)
    B = tau_i.shape[0]
    rows = np.arange(B)
    log_q = np.zeros(B)
    for nc in model.node_sequence():
        it = ti_idx[:, nc.node]
        if nc.inf_net is not None:
            probs, _ = forward(nc.inf_net, _node_input(model, nc, ti_idx, tr_idx))
            log_q += np.log(probs[rows, it])
        if nc.rec_net is not None:
            xr = _rec_input(nc, _node_input(model, nc, ti_idx, tr_idx), it)
            probs, _ = forward(nc.rec_net, xr, mask=nc.tr_allowed[it])
            log_q += np.log(probs[rows, tr_idx[:, nc.node]])
    log_q = np.where(valid, log_q, IMPOSSIBLE)
    return float(log_q[0]) if squeeze else log_q


def score_gradient(
    model: AutoregressiveModel,
    tau_i: np.ndarray,
    tau_r: np.ndarray,
    upstream: np.ndarray,
    grads: dict | None = None,
    batch: SampleBatch | None = None,
) -> dict:
    """Accumulate sum_b upstream[b] * d log q(x_b) / d(theta) into per-node buffers.

    The batch must lie inside the model support (samples and support
    enumerations always do).  Passing the originating ``batch`` with kept
    caches skips the forward replay.
    """
    if batch is not None and batch.caches is not None:
        ti_idx, tr_idx = batch.ti_idx, batch.tr_idx
        caches = batch.caches
    else:
        ti_idx, tr_idx, valid = _value_indices(model, tau_i, tau_r)
        if not valid.all():
            raise EpivarError("score_gradient called with out-of-support cascades")
        caches = None
    if grads is None:
        grads = new_model_grads(model)
    for nc in model.node_sequence():
        it = ti_idx[:, nc.node]
        if nc.inf_net is not None:
            if caches is not None:
                cache = caches[nc.node][0]
            else:
                _, cache = forward(nc.inf_net, _node_input(model, nc, ti_idx, tr_idx))
            backward(nc.inf_net, cache, it, upstream, grads[nc.node][0])
        if nc.rec_net is not None:
            if caches is not None:
                cache = caches[nc.node][1]
            else:
                xr = _rec_input(nc, _node_input(model, nc, ti_idx, tr_idx), it)
                _, cache = forward(nc.rec_net, xr, mask=nc.tr_allowed[it])
            backward(nc.rec_net, cache, tr_idx[:, nc.node], upstream, grads[nc.node][1])
    return grads


def new_model_grads(model: AutoregressiveModel) -> dict:
    grads = {}
    for nc in model.nodes:
        gi = new_grad_buffer(nc.inf_net) if nc.inf_net is not None else None
        gr = new_grad_buffer(nc.rec_net) if nc.rec_net is not None else None
        if gi is not None or gr is not None:
            grads[nc.node] = (gi, gr)
    return grads


def marginals(tau_i: np.ndarray, tau_r: np.ndarray, horizon: int) -> np.ndarray:
    """Empirical per-individual per-time state frequencies, shape (n, T + 1, 3)."""
    from .epidemic import states_from_times

    if len(tau_i) == 0:
        raise ValueError("need a nonempty sample batch")
    st = states_from_times(tau_i, tau_r, horizon)
    out = np.stack([(st == s).mean(axis=0) for s in range(3)], axis=-1)
    return out


def source_probability(tau_i: np.ndarray) -> np.ndarray:
    """Per-individual empirical probability of being infected at time zero."""
    return (tau_i == 0).mean(axis=0)


def count_parameters(model: AutoregressiveModel) -> int:
    total = 0
    for nc in model.nodes:
        if nc.inf_net is not None:
            total += nc.inf_net.n_params()
        if nc.rec_net is not None:
            total += nc.rec_net.n_params()
    return total


def save_model(model: AutoregressiveModel, path) -> None:
    payload = {
        "format": "epivar-model",
        "version": 1,
        "n": model.n,
        "horizon": model.horizon,
        "policy": model.policy,
        "ordering": {
            "order": model.ordering.order.tolist(),
            "method": model.ordering.method,
            "root": model.ordering.root,
        },
        "supports": [s.tolist() for s in model.supports],
        "nodes": [
            {
                "node": nc.node,
                "deps": nc.deps.tolist(),
                "input_deps": [[j, comp] for j, comp in nc.input_deps],
                "inf_net": net_to_payload(nc.inf_net) if nc.inf_net else None,
                "rec_net": net_to_payload(nc.rec_net) if nc.rec_net else None,
            }
            for nc in model.nodes
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_model(path) -> AutoregressiveModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "epivar-model" or payload.get("version") != 1:
        raise ValueError("not a recognized model checkpoint")
    ordering = Ordering(
        np.array(payload["ordering"]["order"]),
        payload["ordering"]["method"],
        root=payload["ordering"]["root"],
    )
    supports = [np.array(s, dtype=np.int64) for s in payload["supports"]]
    nodes = []
    for entry in payload["nodes"]:
        node = entry["node"]
        tiv = np.unique(supports[node][:, 0])
        trv = np.unique(supports[node][:, 1])
        tr_allowed = np.zeros((len(tiv), len(trv)), dtype=bool)
        a = np.searchsorted(tiv, supports[node][:, 0])
        b = np.searchsorted(trv, supports[node][:, 1])
        tr_allowed[a, b] = True
        nodes.append(
            NodeConditional(
                node=node,
                deps=np.array(entry["deps"], dtype=np.int64),
                input_deps=[(int(j), comp) for j, comp in entry["input_deps"]],
                ti_values=tiv,
                tr_values=trv,
                tr_allowed=tr_allowed,
                inf_net=net_from_payload(entry["inf_net"]) if entry["inf_net"] else None,
                rec_net=net_from_payload(entry["rec_net"]) if entry["rec_net"] else None,
            )
        )
    return AutoregressiveModel(
        n=payload["n"], horizon=payload["horizon"], ordering=ordering,
        policy=payload["policy"], supports=supports, nodes=nodes,
    )
