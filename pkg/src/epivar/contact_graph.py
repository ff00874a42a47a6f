"""Temporal contact networks: file ingestion and synthetic generators.

A :class:`TemporalContactGraph` stores directed contact entries
``(t, dst, src, lam)``: at timestep ``t`` the potential transmitter ``src``
infects the receiving individual ``dst`` with probability ``lam`` if ``src``
is infected.  Contacts at timestep ``t`` govern the transition from the
states at ``t`` to the states at ``t + 1``, so contact timesteps run over
``0 .. horizon - 1`` while states run over ``0 .. horizon``.

Undirected input contacts are expanded into both directed entries.  Multiple
contacts between the same pair at the same timestep combine as independent
exposures, ``lam = 1 - prod(1 - lam_k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from .errors import GraphFormatError


@dataclass
class TemporalContactGraph:
    n: int
    horizon: int
    t: np.ndarray            # (E,) int timestep of each contact entry
    dst: np.ndarray          # (E,) receiving individual
    src: np.ndarray          # (E,) potential transmitter
    lam: np.ndarray          # (E,) transmission probability in [0, 1]
    duration: np.ndarray | None = None   # (E,) contact durations, kept for rate-mode inference
    coords: np.ndarray | None = None     # (n, 2) point positions for proximity graphs
    _adjacency: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("t", "dst", "src"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=np.float64))
        if self.duration is not None:
            object.__setattr__(self, "duration", np.asarray(self.duration, dtype=np.float64))
        self._validate()
        for name in ("t", "dst", "src", "lam"):
            getattr(self, name).flags.writeable = False

    def _validate(self):
        if self.n < 1:
            raise GraphFormatError("graph needs at least one individual")
        if self.horizon < 1:
            raise GraphFormatError("horizon must be at least 1")
        if self.t.size:
            if self.t.min() < 0 or self.t.max() >= self.horizon:
                raise GraphFormatError(
                    f"contact timestep outside [0, {self.horizon}) found"
                )
            ids = np.concatenate([self.dst, self.src])
            if ids.min() < 0 or ids.max() >= self.n:
                raise GraphFormatError("individual id outside [0, n) found")
            if np.any(self.dst == self.src):
                raise GraphFormatError("self-contact found")
            if np.any(self.lam < 0) or np.any(self.lam > 1):
                raise GraphFormatError("contact probability outside [0, 1] found")

    @property
    def union_adjacency(self) -> list[np.ndarray]:
        """Neighbor sets of the static union graph (either contact direction)."""
        if self._adjacency is None:
            neigh = [set() for _ in range(self.n)]
            for a, b in zip(self.dst.tolist(), self.src.tolist()):
                neigh[a].add(b)
                neigh[b].add(a)
            self._adjacency = [np.array(sorted(s), dtype=np.int64) for s in neigh]
        return self._adjacency

    def neighbors(self, i: int) -> np.ndarray:
        return self.union_adjacency[i]

    def union_edges(self) -> set[tuple[int, int]]:
        """Unordered pairs appearing in at least one timestep."""
        pairs = set()
        for a, b in zip(self.dst.tolist(), self.src.tolist()):
            pairs.add((min(a, b), max(a, b)))
        return pairs

    def contacts_at(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sel = self.t == t
        return self.dst[sel], self.src[sel], self.lam[sel]


def infection_prob_from_duration(gamma: float, delta: float) -> float:
    """Map a contact duration to a transmission probability, 1 - exp(-gamma * delta)."""
    if gamma < 0:
        raise ValueError(f"rate must be non-negative, got {gamma}")
    if delta < 0:
        raise ValueError(f"duration must be non-negative, got {delta}")
    return -math.expm1(-gamma * delta)


def _combine_duplicates(t, dst, src, lam, dur):
    """Merge same-pair same-timestep entries: survival probabilities multiply."""
    order = np.lexsort((src, dst, t))
    t, dst, src, lam = t[order], dst[order], src[order], lam[order]
    if dur is not None:
        dur = dur[order]
    key = np.stack([t, dst, src], axis=1)
    new_group = np.ones(len(t), dtype=bool)
    if len(t) > 1:
        new_group[1:] = np.any(key[1:] != key[:-1], axis=1)
    group = np.cumsum(new_group) - 1
    ngroups = group[-1] + 1 if len(t) else 0
    log_surv = np.zeros(ngroups)
    np.add.at(log_surv, group, np.log1p(-np.minimum(lam, 1.0 - 1e-15)))
    out_lam = -np.expm1(log_surv)
    exact_one = np.zeros(ngroups, dtype=bool)
    np.logical_or.at(exact_one, group, lam >= 1.0)
    out_lam[exact_one] = 1.0
    sizes = np.zeros(ngroups, dtype=np.int64)
    np.add.at(sizes, group, 1)
    first = np.flatnonzero(new_group)
    # singleton groups keep their input probability bit-exactly
    singles = sizes == 1
    out_lam[singles] = lam[first[singles]]
    out_dur = None
    if dur is not None:
        out_dur = np.zeros(ngroups)
        np.add.at(out_dur, group, dur)
    return t[first], dst[first], src[first], out_lam, out_dur


def load_contacts(
    path,
    format: str = "probability",
    gamma: float | None = None,
    directed: bool = False,
    n: int | None = None,
    horizon: int | None = None,
) -> TemporalContactGraph:
    """Load a contact-list CSV with header ``t,i,j,value``.

    ``value`` is a transmission probability when ``format="probability"`` or a
    contact duration when ``format="duration"`` (requires ``gamma``).  Unless
    ``directed=True`` each row yields both directed entries.
    """
    if format not in ("probability", "duration"):
        raise ValueError(f"unknown contact format {format!r}")
    if format == "duration" and gamma is None:
        raise ValueError("duration format requires gamma")
    ts, dsts, srcs, lams, durs = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.lower().replace(" ", "") == "t,i,j,value":
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise GraphFormatError(f"expected 4 fields, got {len(parts)}", line=lineno)
            try:
                t = int(parts[0])
                i = int(parts[1])
                j = int(parts[2])
                value = float(parts[3])
            except ValueError as exc:
                raise GraphFormatError(str(exc), line=lineno) from None
            if i == j:
                raise GraphFormatError(f"self-contact ({i},{j}) rejected", line=lineno)
            if i < 0 or j < 0:
                raise GraphFormatError("negative individual id", line=lineno)
            if t < 0:
                raise GraphFormatError(f"negative timestep {t}", line=lineno)
            if horizon is not None and t >= horizon:
                raise GraphFormatError(f"timestep {t} outside [0, {horizon})", line=lineno)
            if format == "duration":
                if value < 0:
                    raise GraphFormatError(f"negative duration {value}", line=lineno)
                lam = infection_prob_from_duration(gamma, value)
                durs.append(value)
            else:
                if not 0 <= value <= 1:
                    raise GraphFormatError(f"probability {value} outside [0, 1]", line=lineno)
                lam = value
            ts.append(t)
            dsts.append(i)
            srcs.append(j)
            lams.append(lam)
            if not directed:
                ts.append(t)
                dsts.append(j)
                srcs.append(i)
                lams.append(lam)
                if format == "duration":
                    durs.append(value)
    t = np.array(ts, dtype=np.int64)
    dst = np.array(dsts, dtype=np.int64)
    src = np.array(srcs, dtype=np.int64)
    lam = np.array(lams, dtype=np.float64)
    dur = np.array(durs, dtype=np.float64) if format == "duration" else None
    t, dst, src, lam, dur = _combine_duplicates(t, dst, src, lam, dur)
    if n is None:
        n = int(max(dst.max(), src.max()) + 1) if dst.size else 1
    if horizon is None:
        horizon = int(t.max() + 1) if t.size else 1
    return TemporalContactGraph(n=n, horizon=horizon, t=t, dst=dst, src=src, lam=lam, duration=dur)


def _replicate_static(pairs, n, horizon, lam, coords=None) -> TemporalContactGraph:
    """Build a graph where the given undirected edges are active at every timestep."""
    pairs = sorted(pairs)
    e = len(pairs)
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    dst_one = np.concatenate([a, b])
    src_one = np.concatenate([b, a])
    t = np.repeat(np.arange(horizon, dtype=np.int64), 2 * e)
    dst = np.tile(dst_one, horizon)
    src = np.tile(src_one, horizon)
    lam_arr = np.full(2 * e * horizon, float(lam))
    return TemporalContactGraph(
        n=n, horizon=horizon, t=t, dst=dst, src=src, lam=lam_arr, coords=coords
    )


def gen_random_regular(n: int, degree: int, horizon: int, lam: float, seed) -> TemporalContactGraph:
    """Random regular graph, every edge active at every timestep with probability ``lam``."""
    if n * degree % 2 != 0 or degree >= n:
        raise ValueError(f"no {degree}-regular graph on {n} nodes exists")
    g = nx.random_regular_graph(degree, n, seed=_as_int_seed(seed))
    return _replicate_static(((min(u, v), max(u, v)) for u, v in g.edges()), n, horizon, lam)


def gen_proximity(n: int, length_scale: float, horizon: int, lam: float, seed) -> TemporalContactGraph:
    """Geometric graph: n points uniform on a square of side sqrt(n); each pair is an
    edge with probability exp(-d / length_scale), active at every timestep."""
    if n < 2:
        raise ValueError("need at least 2 individuals")
    if length_scale <= 0:
        raise ValueError("length scale must be positive")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, math.sqrt(n), size=(n, 2))
    iu, ju = np.triu_indices(n, k=1)
    d = np.linalg.norm(coords[iu] - coords[ju], axis=1)
    keep = rng.random(d.size) < np.exp(-d / length_scale)
    pairs = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    return _replicate_static(pairs, n, horizon, lam, coords=coords)


def gen_tree(degree: int, depth: int, horizon: int, lam: float) -> TemporalContactGraph:
    """Rooted tree: the root has ``degree`` children, every internal node
    ``degree - 1``, down to ``depth`` levels below the root (uniform node
    degree equal to ``degree``)."""
    if degree < 1 or depth < 1:
        raise ValueError("degree and depth must be at least 1")
    pairs = []
    frontier = [0]
    next_id = 1
    for level in range(depth):
        new_frontier = []
        for node in frontier:
            n_children = degree if level == 0 else degree - 1
            for _ in range(n_children):
                pairs.append((node, next_id))
                new_frontier.append(next_id)
                next_id += 1
        frontier = new_frontier
    return _replicate_static(pairs, next_id, horizon, lam)


def second_neighbors(graph: TemporalContactGraph, i: int) -> np.ndarray:
    """Union of first and second neighbors of ``i`` in the union graph, excluding ``i``."""
    adj = graph.union_adjacency
    out = set(adj[i].tolist())
    for j in adj[i]:
        out.update(adj[j].tolist())
    out.discard(i)
    return np.array(sorted(out), dtype=np.int64)


def is_acyclic(graph: TemporalContactGraph) -> bool:
    g = nx.Graph()
    g.add_nodes_from(range(graph.n))
    g.add_edges_from(graph.union_edges())
    return nx.is_forest(g)


def save_graph(graph: TemporalContactGraph, path) -> None:
    payload = {
        "n": graph.n,
        "horizon": graph.horizon,
        "contacts": [
            [int(t), int(i), int(j), float(l)]
            for t, i, j, l in zip(graph.t, graph.dst, graph.src, graph.lam)
        ],
    }
    if graph.duration is not None:
        payload["durations"] = [float(d) for d in graph.duration]
    if graph.coords is not None:
        payload["coords"] = [[float(x), float(y)] for x, y in graph.coords]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_graph(path) -> TemporalContactGraph:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    contacts = payload["contacts"]
    t = np.array([c[0] for c in contacts], dtype=np.int64)
    dst = np.array([c[1] for c in contacts], dtype=np.int64)
    src = np.array([c[2] for c in contacts], dtype=np.int64)
    lam = np.array([c[3] for c in contacts], dtype=np.float64)
    duration = None
    if "durations" in payload:
        duration = np.array(payload["durations"], dtype=np.float64)
    coords = None
    if "coords" in payload:
        coords = np.array(payload["coords"], dtype=np.float64)
    return TemporalContactGraph(
        n=payload["n"], horizon=payload["horizon"],
        t=t, dst=dst, src=src, lam=lam, duration=duration, coords=coords,
    )


def _as_int_seed(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.default_rng(seed).integers(2**31 - 1))
