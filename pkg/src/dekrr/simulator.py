"""Synchronous in-process execution of the decentralized solver.

A run has two phases.  During setup every directed edge ``j -> p`` carries
three payloads: node ``j``'s feature spec, its own block ``Z_j(X_j)`` and
the block ``Z_p(X_j)`` it computed with ``p``'s spec.  Afterwards each
round is a barrier: all nodes send ``theta_j`` to their neighbours, then
all nodes update from the previous round's values (Jacobi order).

Raw inputs never enter a message.  Payload arrays are frozen on send.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from dekrr import solver
from dekrr.features import FeatureSpec, feature_matrix
from dekrr.graph import Topology, TopologyError, validate
from dekrr.solver import NodeState, PenaltyConfig

PAYLOAD_KINDS = ("feature_spec", "z_block", "theta")


class NonFiniteError(FloatingPointError):
    def __init__(self, node: int, round: int):
        super().__init__(f"non-finite theta at node {node} in round {round}")
        self.node = node
        self.round = round


# --------------------------------------------------------------------------- messaging


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    kind: str
    payload: object
    key: tuple | None = None
    round: int = -1  # -1 during setup

    @property
    def scalars(self) -> int:
        if self.kind == "feature_spec":
            spec = self.payload
            return spec.omega.size + (0 if spec.phases is None else spec.phases.size)
        return int(np.asarray(self.payload).size)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


class MessageBus:
    """Per-node inboxes with scalar accounting and an optional full trace."""

    def __init__(self, J: int, record: bool = False):
        self.J = J
        self.record = record
        self.trace: list[Message] = []
        self.scalars = {k: 0 for k in PAYLOAD_KINDS}
        self.counts = {k: 0 for k in PAYLOAD_KINDS}
        self._inbox: list[list[Message]] = [[] for _ in range(J)]

    def send(self, msg: Message):
        if msg.kind not in PAYLOAD_KINDS:
            raise ValueError(f"unknown payload kind {msg.kind!r}")
        if msg.kind != "feature_spec":
            msg = Message(msg.src, msg.dst, msg.kind, _freeze(msg.payload), msg.key, msg.round)
        self._inbox[msg.dst].append(msg)
        self.scalars[msg.kind] += msg.scalars
        self.counts[msg.kind] += 1
        if self.record:
            self.trace.append(msg)

    def drain(self, dst: int) -> list[Message]:
        msgs, self._inbox[dst] = self._inbox[dst], []
        return msgs


# --------------------------------------------------------------------------- config / results


@dataclass(frozen=True)
class RunConfig:
    lam: float
    penalty: PenaltyConfig
    eps: float = 1e-6
    max_rounds: int = 2000
    safeguard: bool = True
    safeguard_cap: float = 2.0**20
    workers: int | None = None
    record_trace: bool = False


@dataclass(frozen=True)
class RoundLog:
    round: int
    objective: float
    max_dtheta: float
    disagreement: float
    cum_scalars: int


ROUND_FIELDS = ("round", "objective", "max_dtheta", "disagreement", "cum_scalars")


@dataclass
class TrainResult:
    states: list[NodeState]
    logs: list[RoundLog]
    reason: Literal["tolerance", "max_rounds", "safeguard_cap"]
    topology: Topology
    penalty: PenaltyConfig
    safeguard_factor: float
    setup_scalars: int
    per_round_scalars: int
    bus: MessageBus = field(repr=False, default=None)
    meta: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return self.logs[-1].round

    @property
    def thetas(self) -> list[np.ndarray]:
        return [s.theta for s in self.states]

    @property
    def iteration_scalars(self) -> int:
        return self.logs[-1].cum_scalars

    def round_log_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROUND_FIELDS)
        for r in self.logs:
            w.writerow([r.round, repr(r.objective), repr(r.max_dtheta), repr(r.disagreement), r.cum_scalars])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {
            "reason": self.reason,
            "rounds": self.rounds,
            "final_objective": self.logs[-1].objective,
            "safeguard_factor": self.safeguard_factor,
            "setup_scalars": self.setup_scalars,
            "per_round_scalars": self.per_round_scalars,
            "iteration_scalars": self.iteration_scalars,
            "nodes": [
                {"node": s.node, "n_train": s.n, "D": s.spec.D, "dim": s.dim, "kind": s.spec.kind}
                for s in self.states
            ],
        }

    def save(self, directory: str | Path, header: str | None = None):
        """JSON manifest, round-log CSV and a binary theta snapshot."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "rounds.csv").write_text(self.round_log_csv(header), encoding="utf-8")
        solver.save_snapshot(
            directory / "theta", {f"theta/{s.node}": s.theta for s in self.states}
        )
        (directory / "result.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))


# --------------------------------------------------------------------------- allocation / cost


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def allocate_features(
    N_js: Sequence[int], Dbar: int, strategy: Literal["equal", "sqrt_proportional"] = "equal"
) -> list[int]:
    """Per-node feature counts with a total of exactly ``J * Dbar``.

    ``sqrt_proportional`` gives node ``j`` ``sqrt(N_j) J Dbar / sum_p sqrt(N_p)``
    rounded; the rounding residue is settled one unit at a time starting
    from the node with the most data.
    """
    J = len(N_js)
    if J < 1:
        raise ValueError("no nodes")
    if Dbar < 1 or int(Dbar) != Dbar:
        raise ValueError(f"feature budget Dbar={Dbar} too small for {J} nodes")
    Dbar = int(Dbar)
    if strategy == "equal":
        return [Dbar] * J
    if strategy != "sqrt_proportional":
        raise ValueError(f"unknown allocation strategy {strategy!r}")
    w = np.sqrt(np.asarray(N_js, dtype=float))
    if np.any(w <= 0):
        raise ValueError("every node needs data for sqrt allocation")
    D = [max(1, _round_half_up(v)) for v in w * J * Dbar / w.sum()]
    residue = J * Dbar - sum(D)
    order = sorted(range(J), key=lambda j: (-N_js[j], j))
    step = 1 if residue > 0 else -1
    i = 0
    guard = 0
    while residue != 0:
        j = order[i % J]
        if step > 0 or D[j] > 1:
            D[j] += step
            residue -= step
        i += 1
        guard += 1
        if guard > 10 * J * (abs(residue) + 1):
            raise ValueError(f"feature budget Dbar={Dbar} too small for {J} nodes")
    if min(D) < 1:
        raise ValueError(f"feature budget Dbar={Dbar} too small for {J} nodes")
    return D


def comm_cost(
    topology: Topology,
    D_js: Sequence[int],
    rounds: int,
    kind: str = "cos_with_phase",
) -> dict:
    """Scalars sent per iteration round, ``sum_j |N_j| dim_j``, and over ``rounds``."""
    mult = 2 if kind == "paired_cos_sin" else 1
    per_round = sum(topology.degree(j) * mult * int(D) for j, D in enumerate(D_js))
    return {"per_round": per_round, "total": per_round * rounds}


# --------------------------------------------------------------------------- protocol


def _check(topology: Topology, states: Sequence[NodeState]):
    problem = validate(topology)
    if problem:
        raise TopologyError(problem)
    if len(states) != topology.J or any(s.node != j for j, s in enumerate(states)):
        raise ValueError("states must be listed in node order, one per topology node")


def setup_exchange(
    topology: Topology,
    states: Sequence[NodeState],
    config: RunConfig,
    bus: MessageBus | None = None,
) -> list[NodeState]:
    """Pre-iteration block exchange followed by auxiliary-matrix construction."""
    _check(topology, states)
    bus = bus or MessageBus(topology.J, record=config.record_trace)
    for s in states:
        s.Z = {(s.node, s.node): feature_matrix(s.spec, s.X)}
        s.neighbor_specs = {}

    # spec and own block to each neighbour
    for s in states:
        j = s.node
        for p in topology.neighbors[j]:
            bus.send(Message(j, p, "feature_spec", s.spec, None))
            bus.send(Message(j, p, "z_block", s.Z[(j, j)], (j, j)))
    for s in states:
        for m in bus.drain(s.node):
            if m.kind == "feature_spec":
                s.neighbor_specs[m.src] = m.payload
            else:
                s.Z[m.key] = m.payload

    # neighbour's features on local data, kept and returned
    for s in states:
        j = s.node
        for p in topology.neighbors[j]:
            block = feature_matrix(s.neighbor_specs[p], s.X)
            s.Z[(p, j)] = block
            bus.send(Message(j, p, "z_block", block, (p, j)))
    for s in states:
        for m in bus.drain(s.node):
            s.Z[m.key] = m.payload

    N, J = solver.total_count(states), topology.J
    for s in states:
        s.aux = solver.build_aux(s, topology, config.penalty, config.lam, N, J)
    return list(states)


def setup_cost(topology: Topology, states: Sequence[NodeState]) -> int:
    """Scalars moved by :func:`setup_exchange`."""
    total = 0
    for s in states:
        spec_size = s.spec.omega.size + (0 if s.spec.phases is None else s.spec.phases.size)
        for p in topology.neighbors[s.node]:
            total += spec_size + s.dim * s.n + states[p].dim * s.n
    return total


def edge_disagreement(states: Sequence[NodeState], topology: Topology, thetas=None) -> float:
    """Max over directed edges of the mean |f_j - f_p| on node j's training inputs."""
    th = [s.theta for s in states] if thetas is None else thetas
    worst = 0.0
    for s in states:
        j = s.node
        fj = th[j] @ s.Z[(j, j)]
        for p in topology.neighbors[j]:
            worst = max(worst, float(np.mean(np.abs(fj - th[p] @ s.Z[(p, j)]))))
    return worst


def _compute_round(states, inbox, thetas, pool):
    def one(s):
        return solver.local_update(s.aux, thetas[s.node], inbox[s.node])

    if pool is None:
        return [one(s) for s in states]
    return list(pool.map(one, states))


def run(
    config: RunConfig,
    states: Sequence[NodeState],
    topology: Topology,
    bus: MessageBus | None = None,
) -> TrainResult:
    """Iterate synchronous rounds until the relative theta change drops below ``eps``.

    With ``config.safeguard`` set, a round that would raise the objective is
    discarded, every ``c_self`` is doubled and the round is recomputed from
    the same neighbour values (no new messages are needed).  Exceeding
    ``safeguard_cap`` times the initial ``c_self`` ends the run.
    """
    _check(topology, states)
    if any(s.aux is None for s in states):
        raise RuntimeError("run setup_exchange before run")
    if bus is None:
        bus = MessageBus(topology.J, record=config.record_trace)
    setup_scalars = setup_cost(topology, states)

    N, J = solver.total_count(states), topology.J
    pc = config.penalty
    thetas = [np.array(s.theta, dtype=float) for s in states]
    L = solver.objective(states, topology, pc, config.lam, N, J, thetas)
    tol = 1e-12 * max(1.0, abs(L))
    logs = [RoundLog(0, L, 0.0, edge_disagreement(states, topology, thetas), 0)]
    per_round = sum(topology.degree(s.node) * s.dim for s in states)
    factor = 1.0
    reason = "max_rounds"
    pool = ThreadPoolExecutor(config.workers) if config.workers else None
    try:
        k = 0
        while k < config.max_rounds:
            start = bus.scalars["theta"]
            for s in states:
                for p in topology.neighbors[s.node]:
                    bus.send(Message(s.node, p, "theta", thetas[s.node], None, k))
            inbox = {s.node: {m.src: m.payload for m in bus.drain(s.node)} for s in states}
            sent = bus.scalars["theta"] - start
            assert sent == per_round

            while True:
                new = _compute_round(states, inbox, thetas, pool)
                for j, t in enumerate(new):
                    if not np.all(np.isfinite(t)):
                        raise NonFiniteError(j, k + 1)
                L_new = solver.objective(states, topology, pc, config.lam, N, J, new)
                if not config.safeguard or L_new <= L + tol:
                    break
                factor *= 2.0
                if factor > config.safeguard_cap:
                    reason = "safeguard_cap"
                    break
                pc = config.penalty.scale_self(factor)
                for s in states:
                    s.aux = solver.build_aux(s, topology, pc, config.lam, N, J)
            if reason == "safeguard_cap":
                break

            dmax, rel = 0.0, 0.0
            for t_old, t_new in zip(thetas, new):
                dn = float(np.linalg.norm(t_new - t_old))
                dmax = max(dmax, dn)
                rel = max(rel, dn / max(1.0, float(np.linalg.norm(t_old))))
            thetas = new
            L = L_new
            k += 1
            logs.append(
                RoundLog(k, L, dmax, edge_disagreement(states, topology, thetas), logs[-1].cum_scalars + sent)
            )
            if rel <= config.eps:
                reason = "tolerance"
                break
    finally:
        if pool is not None:
            pool.shutdown()
    for s, t in zip(states, thetas):
        s.theta = t
    return TrainResult(
        list(states), logs, reason, topology, pc, factor if reason != "safeguard_cap" else factor / 2,
        setup_scalars, per_round, bus,
    )


def _block_offsets(states):
    off = np.cumsum([0] + [s.dim for s in states])
    return off, int(off[-1])


def iteration_matrix(states: Sequence[NodeState], topology: Topology) -> np.ndarray:
    """Linear part of one synchronous round acting on the stacked thetas."""
    off, n = _block_offsets(states)
    M = np.zeros((n, n))
    for s in states:
        j = s.node
        G = s.aux.G
        M[off[j] : off[j + 1], off[j] : off[j + 1]] = G @ s.aux.S
        for p, P in s.aux.P.items():
            M[off[j] : off[j + 1], off[p] : off[p + 1]] = G @ P
    return M


def spectral_radius(states: Sequence[NodeState], topology: Topology) -> float:
    """Below one exactly when the rounds converge from every starting point."""
    return float(np.max(np.abs(np.linalg.eigvals(iteration_matrix(states, topology)))))


def stationary_point(states: Sequence[NodeState], topology: Topology) -> list[np.ndarray]:
    """Limit of the rounds, solved directly from the fixed-point equations.

    At a fixed point ``(G_j^{-1} - S_j) theta_j - sum_p P_jp theta_p = d_j``
    for every node, which is also where the objective gradient vanishes.
    Useful when penalties are so large that iterating takes millions of
    rounds.
    """
    off, n = _block_offsets(states)
    A = np.zeros((n, n))
    b = np.zeros(n)
    for s in states:
        j = s.node
        c, lower = s.aux.chol
        Lf = np.tril(c) if lower else np.triu(c).T
        A[off[j] : off[j + 1], off[j] : off[j + 1]] = Lf @ Lf.T - s.aux.S
        for p, P in s.aux.P.items():
            A[off[j] : off[j + 1], off[p] : off[p + 1]] = -P
        b[off[j] : off[j + 1]] = s.aux.d
    A = 0.5 * (A + A.T)
    theta = np.linalg.solve(A, b)
    return [theta[off[j] : off[j + 1]].copy() for j in range(len(states))]


def make_states(shards, specs: Sequence[FeatureSpec]) -> list[NodeState]:
    return [NodeState(sh.node, sh.X_train, sh.y_train, spec) for sh, spec in zip(shards, specs)]


def train(
    shards,
    specs: Sequence[FeatureSpec],
    topology: Topology,
    config: RunConfig,
) -> TrainResult:
    """Build states, run the setup exchange and iterate."""
    states = make_states(shards, specs)
    bus = MessageBus(topology.J, record=config.record_trace)
    setup_exchange(topology, states, config, bus)
    return run(config, states, topology, bus)
