"""Per-node algebra of the decision-function consensus problem.

Notation follows the usual block convention: ``Z[(i, j)]`` is node ``i``'s
feature map applied to node ``j``'s training inputs, shape
``(dim_i, N_j)``.  Node ``j`` holds ``Z[(j, j)]`` and, for each neighbour
``p``, the blocks ``Z[(j, p)]``, ``Z[(p, j)]`` and ``Z[(p, p)]``.

The global objective is::

    L = sum_j  1/N ||theta_j^T Z_jj - y_j||^2 + lam/J ||theta_j||^2
             + sum_{p in N_j} ct_nei[j] ||theta_j^T Z_jj - theta_p^T Z_pj||^2

with ``ct = c / (N (|N_j| + 1))``.  Each round every node minimises its
local part of ``L`` with neighbours frozen, plus a proximal term
``2 ct_self[j] ||(theta - theta_prev)^T Z_jj||^2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from dekrr.features import FeatureSpec
from dekrr.graph import Topology

RANK_TOL = 1e-12


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, node: int, msg: str):
        super().__init__(f"node {node}: {msg}")
        self.node = node


@dataclass(frozen=True)
class PenaltyConfig:
    """Raw penalty coefficients ``c_self`` and ``c_nei``, one per node."""

    c_self: np.ndarray
    c_nei: np.ndarray

    def __post_init__(self):
        cs = np.asarray(self.c_self, dtype=float).ravel()
        cn = np.asarray(self.c_nei, dtype=float).ravel()
        if cs.shape != cn.shape:
            raise ValueError("c_self and c_nei must have one entry per node")
        if np.any(cs <= 0) or np.any(cn <= 0):
            raise ValueError("penalty coefficients must be positive")
        object.__setattr__(self, "c_self", cs)
        object.__setattr__(self, "c_nei", cn)

    @classmethod
    def uniform(cls, J: int, c_nei: float, self_mult: float = 5.0) -> "PenaltyConfig":
        return cls(np.full(J, self_mult * c_nei), np.full(J, float(c_nei)))

    @classmethod
    def from_tilde(cls, ct_self, ct_nei, topology: Topology, N: int) -> "PenaltyConfig":
        scale = N * (np.asarray(topology.degrees, dtype=float) + 1.0)
        return cls(np.asarray(ct_self) * scale, np.asarray(ct_nei) * scale)

    def tilde(self, topology: Topology, N: int) -> tuple[np.ndarray, np.ndarray]:
        """Scaled coefficients ``(ct_self, ct_nei)``."""
        scale = N * (np.asarray(topology.degrees, dtype=float) + 1.0)
        return self.c_self / scale, self.c_nei / scale

    def scale_self(self, factor: float) -> "PenaltyConfig":
        return PenaltyConfig(self.c_self * factor, self.c_nei)

    def relabel(self, perm) -> "PenaltyConfig":
        cs = np.empty_like(self.c_self)
        cn = np.empty_like(self.c_nei)
        cs[list(perm)] = self.c_self
        cn[list(perm)] = self.c_nei
        return PenaltyConfig(cs, cn)


@dataclass
class AuxMatrices:
    """Cached per-node matrices.  ``chol`` factors the inverse of ``G``."""

    chol: tuple
    d: np.ndarray
    S: np.ndarray
    P: dict[int, np.ndarray]

    @property
    def G(self) -> np.ndarray:
        n = self.d.shape[0]
        return linalg.cho_solve(self.chol, np.eye(n))

    @property
    def dim(self) -> int:
        return self.d.shape[0]


@dataclass(eq=False)
class NodeState:
    node: int
    X: np.ndarray  # local training inputs, never transmitted
    y: np.ndarray
    spec: FeatureSpec
    theta: np.ndarray = None
    Z: dict = field(default_factory=dict)
    neighbor_specs: dict = field(default_factory=dict)
    aux: AuxMatrices | None = None
    lam_j: float | None = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.spec.dim)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.spec.dim


def effective_lambda(lam: float, N: int, J: int, N_j: int) -> float:
    """Local regulariser ``lam N / (J N_j)``, so that ``N_j/N * lam_j = lam / J``."""
    if N_j <= 0:
        raise ValueError("node holds no data")
    if lam <= 0 or N <= 0 or J <= 0:
        raise ValueError("lam, N and J must be positive")
    return lam * N / (J * N_j)


def total_count(states: Sequence[NodeState]) -> int:
    return sum(s.n for s in states)


def build_aux(
    state: NodeState,
    topology: Topology,
    pc: PenaltyConfig,
    lam: float,
    N: int,
    J: int,
) -> AuxMatrices:
    """Assemble ``G_j`` (factored), ``d_j``, ``S_j`` and ``P_{j,p}`` from exchanged blocks."""
    j = state.node
    ct_self, ct_nei = pc.tilde(topology, N)
    nbrs = topology.neighbors[j]
    Zjj = state.Z[(j, j)]
    K = Zjj @ Zjj.T
    A = (1.0 / N + 2.0 * ct_self[j] + len(nbrs) * ct_nei[j]) * K
    A[np.diag_indices_from(A)] += lam / J
    P = {}
    for p in nbrs:
        Zjp = state.Z[(j, p)]
        A += ct_nei[p] * (Zjp @ Zjp.T)
        P[p] = ct_nei[j] * (Zjj @ state.Z[(p, j)].T) + ct_nei[p] * (Zjp @ state.Z[(p, p)].T)
    A = 0.5 * (A + A.T)
    try:
        chol = linalg.cho_factor(A, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(j, f"cholesky of the update matrix failed ({exc})") from exc
    state.lam_j = effective_lambda(lam, N, J, state.n)
    return AuxMatrices(chol, Zjj @ state.y / N, 2.0 * ct_self[j] * K, P)


def local_update(
    aux: AuxMatrices, theta_j: np.ndarray, neighbor_thetas: Mapping[int, np.ndarray]
) -> np.ndarray:
    """One closed-form step ``G_j (d_j + S_j theta_j + sum_p P_jp theta_p)``."""
    if theta_j.shape != (aux.dim,):
        raise ValueError(f"theta_j has shape {theta_j.shape}, expected ({aux.dim},)")
    if set(neighbor_thetas) != set(aux.P):
        raise ValueError(
            f"expected neighbour thetas for {sorted(aux.P)}, got {sorted(neighbor_thetas)}"
        )
    rhs = aux.d + aux.S @ theta_j
    for p, Pjp in aux.P.items():
        tp = neighbor_thetas[p]
        if tp.shape != (Pjp.shape[1],):
            raise ValueError(f"theta_{p} has shape {tp.shape}, expected ({Pjp.shape[1]},)")
        rhs = rhs + Pjp @ tp
    return linalg.cho_solve(aux.chol, rhs, check_finite=False)


def local_subproblem(
    state: NodeState,
    theta: np.ndarray,
    theta_prev: np.ndarray,
    neighbor_thetas: Mapping[int, np.ndarray],
    topology: Topology,
    pc: PenaltyConfig,
    lam: float,
    N: int,
    J: int,
) -> float:
    """Value of the node-``j`` subproblem minimised by :func:`local_update`.

    The self-penalty terms are anchored at ``theta_prev``; each of the two
    neighbour-coupling sums holds every other node's ``theta`` fixed.
    """
    j = state.node
    ct_self, ct_nei = pc.tilde(topology, N)
    Zjj = state.Z[(j, j)]
    fj = theta @ Zjj
    val = np.sum((fj - state.y) ** 2) / N + lam / J * (theta @ theta)
    val += 2.0 * ct_self[j] * np.sum((fj - theta_prev @ Zjj) ** 2)
    for p in topology.neighbors[j]:
        tp = neighbor_thetas[p]
        val += ct_nei[j] * np.sum((fj - tp @ state.Z[(p, j)]) ** 2)
        val += ct_nei[p] * np.sum((theta @ state.Z[(j, p)] - tp @ state.Z[(p, p)]) ** 2)
    return float(val)


def _thetas(states, thetas):
    return [s.theta for s in states] if thetas is None else list(thetas)


def objective(
    states: Sequence[NodeState],
    topology: Topology,
    pc: PenaltyConfig,
    lam: float,
    N: int,
    J: int,
    thetas: Sequence[np.ndarray] | None = None,
) -> float:
    """Global objective; the identically-zero ``p == j`` penalty is skipped."""
    th = _thetas(states, thetas)
    _, ct_nei = pc.tilde(topology, N)
    total = 0.0
    for s in states:
        j = s.node
        fj = th[j] @ s.Z[(j, j)]
        total += np.sum((fj - s.y) ** 2) / N + lam / J * (th[j] @ th[j])
        for p in topology.neighbors[j]:
            total += ct_nei[j] * np.sum((fj - th[p] @ s.Z[(p, j)]) ** 2)
    return float(total)


def objective_gradient(
    states: Sequence[NodeState],
    topology: Topology,
    pc: PenaltyConfig,
    lam: float,
    N: int,
    J: int,
    thetas: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Per-node blocks of the gradient of :func:`objective`."""
    th = _thetas(states, thetas)
    _, ct_nei = pc.tilde(topology, N)
    grads = []
    for s in states:
        m = s.node
        Zmm = s.Z[(m, m)]
        fm = th[m] @ Zmm
        g = 2.0 / N * (Zmm @ (fm - s.y)) + 2.0 * lam / J * th[m]
        for p in topology.neighbors[m]:
            # m's own penalty on its data, then p's penalty on p's data
            g += 2.0 * ct_nei[m] * (Zmm @ (fm - th[p] @ s.Z[(p, m)]))
            Zmp = s.Z[(m, p)]
            g -= 2.0 * ct_nei[p] * (Zmp @ (th[p] @ s.Z[(p, p)] - th[m] @ Zmp))
        grads.append(g)
    return grads


@dataclass(frozen=True)
class Prop1Verdict:
    node: int
    satisfied: bool
    required: float | None  # None: no finite ct_self can satisfy the bound
    ct_self: float
    lam_max: float
    lam_min: float


def check_prop1(
    states: Sequence[NodeState], topology: Topology, pc: PenaltyConfig
) -> list[Prop1Verdict]:
    """Evaluate the per-node monotone-descent condition on ``ct_self``.

    The requirement is ``ct_nei[j] |N_j| / 2 + lmax(sum_p ct_nei[p] Z_jp Z_jp^T)
    / (2 lmin(Z_jj Z_jj^T))``.  A node without neighbours is always satisfied.
    When ``Z_jj Z_jj^T`` is singular (certainly so when ``dim_j > N_j``) the
    bound is infinite and the verdict is unsatisfiable.
    """
    N = total_count(states)
    ct_self, ct_nei = pc.tilde(topology, N)
    out = []
    for s in states:
        j = s.node
        nbrs = topology.neighbors[j]
        Zjj = s.Z[(j, j)]
        own = np.linalg.eigvalsh(Zjj @ Zjj.T)
        lam_min = float(own[0])
        if not nbrs:
            out.append(Prop1Verdict(j, True, 0.0, float(ct_self[j]), 0.0, lam_min))
            continue
        M = sum(ct_nei[p] * (s.Z[(j, p)] @ s.Z[(j, p)].T) for p in nbrs)
        lam_max = float(np.linalg.eigvalsh(M)[-1])
        tol = max(RANK_TOL, own.shape[0] * np.finfo(float).eps * float(own[-1]))
        if s.dim > s.n or lam_min <= tol:
            out.append(Prop1Verdict(j, False, None, float(ct_self[j]), lam_max, lam_min))
            continue
        req = len(nbrs) * ct_nei[j] / 2.0 + lam_max / (2.0 * lam_min)
        out.append(
            Prop1Verdict(j, bool(ct_self[j] >= req), float(req), float(ct_self[j]), lam_max, lam_min)
        )
    return out


# --------------------------------------------------------------------------- snapshots


def save_snapshot(directory: str | Path, blocks: Mapping[str, np.ndarray], meta: dict | None = None):
    """Write named float64 arrays as row-major blocks in ``blocks.bin`` plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "blocks.bin", "wb") as fh:
        for name, arr in blocks.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(a.tobytes(order="C"))
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    manifest = {"dtype": "float64-le", "order": "row-major", "blocks": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_snapshot(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "blocks.bin").read_bytes()
    out = {}
    for e in manifest["blocks"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).copy()
    return out


def aux_blocks(states: Sequence[NodeState]) -> dict[str, np.ndarray]:
    """Flatten every node's auxiliary matrices into snapshot blocks."""
    blocks = {}
    for s in states:
        j = s.node
        if s.aux is None:
            continue
        blocks[f"G/{j}"] = s.aux.G
        blocks[f"d/{j}"] = s.aux.d
        blocks[f"S/{j}"] = s.aux.S
        for p, P in s.aux.P.items():
            blocks[f"P/{j}/{p}"] = P
        blocks[f"theta/{j}"] = s.theta
    return blocks
