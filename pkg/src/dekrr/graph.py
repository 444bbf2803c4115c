"""Undirected communication graphs over ``J`` nodes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    J: int
    neighbors: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, J: int, edges: Iterable[tuple[int, int]]) -> "Topology":
        adj: list[set[int]] = [set() for _ in range(J)]
        for j, p in edges:
            if not (0 <= j < J and 0 <= p < J):
                raise TopologyError(f"edge ({j}, {p}) out of range for J={J}")
            adj[j].add(p)
            adj[p].add(j)
        return cls(J, tuple(tuple(sorted(a)) for a in adj))

    @classmethod
    def single(cls) -> "Topology":
        return cls(1, ((),))

    def degree(self, j: int) -> int:
        return len(self.neighbors[j])

    @property
    def degrees(self) -> list[int]:
        return [len(n) for n in self.neighbors]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges ``(j, p)`` with ``j < p``."""
        return [(j, p) for j, nb in enumerate(self.neighbors) for p in nb if j < p]

    def directed_edges(self) -> list[tuple[int, int]]:
        return [(j, p) for j, nb in enumerate(self.neighbors) for p in nb]

    def relabel(self, perm) -> "Topology":
        """Topology seen under new ids: old node ``i`` becomes ``perm[i]``."""
        return Topology.from_edges(self.J, [(perm[j], perm[p]) for j, p in self.edges()])

    def to_edge_list(self) -> str:
        return "".join(f"{j} {p}\n" for j, p in self.edges())


def ring_lattice(J: int, k: int) -> Topology:
    """Ring where every node links to its ``k/2`` nearest nodes on each side."""
    if k % 2 or not 0 < k < J:
        raise TopologyError(f"ring lattice needs even k with 0 < k < J, got J={J}, k={k}")
    edges = [(j, (j + s) % J) for j in range(J) for s in range(1, k // 2 + 1)]
    return Topology.from_edges(J, edges)


def validate(t: Topology) -> str | None:
    """Return ``None`` for a valid topology, else a description of the first violation."""
    if t.J < 1 or len(t.neighbors) != t.J:
        return f"neighbor table has {len(t.neighbors)} entries for J={t.J}"
    for j, nb in enumerate(t.neighbors):
        for p in nb:
            if not 0 <= p < t.J:
                return f"node {j} lists out-of-range neighbor {p}"
            if p == j:
                return f"self-loop at node {j}"
            if j not in t.neighbors[p]:
                return f"asymmetric edge ({j}, {p}): {p} does not list {j}"
    seen = {0}
    queue = deque([0])
    while queue:
        j = queue.popleft()
        for p in t.neighbors[j]:
            if p not in seen:
                seen.add(p)
                queue.append(p)
    if len(seen) != t.J:
        missing = min(set(range(t.J)) - seen)
        return f"graph is disconnected: node {missing} unreachable from node 0"
    return None


def load_edge_list(path: str | Path, J: int | None = None) -> Topology:
    """Read ``j p`` pairs (0-indexed, each undirected edge once) from a text file."""
    edges: list[tuple[int, int]] = []
    seen: set[frozenset] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TopologyError(f"{path}:{lineno}: expected 'j p', got {line!r}")
            try:
                j, p = int(parts[0]), int(parts[1])
            except ValueError:
                raise TopologyError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            key = frozenset((j, p))
            if j == p:
                raise TopologyError(f"{path}:{lineno}: self-loop at {j}")
            if key in seen:
                raise TopologyError(f"{path}:{lineno}: duplicate edge ({j}, {p})")
            seen.add(key)
            edges.append((j, p))
    n = J if J is not None else 1 + max((max(e) for e in edges), default=0)
    topo = Topology.from_edges(n, edges)
    problem = validate(topo)
    if problem:
        raise TopologyError(f"{path}: {problem}")
    return topo
