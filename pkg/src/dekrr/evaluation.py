"""Metrics, centralized reference solvers, baseline runners and grid CV.

Baselines
---------
``dkla_rff``
    One plain random-feature spec shared by every node.  With identical
    features the decision-function penalty reduces to coefficient
    consensus, so this stands in for coefficient-consensus methods; it is
    an emulation on the same solver, not an ADMM implementation.
``dkla_ddrf``
    Features selected on the largest node's training shard, then broadcast.
``dekrr_ddrf``
    Every node selects its own features from its own shard.
``dekrr_rff``
    Every node draws its own plain features (ablation).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import linalg

from dekrr.features import (
    FeatureSpec,
    feature_matrix,
    gaussian_kernel,
    sample_gaussian_features,
    select_ddrf,
)
from dekrr.graph import Topology
from dekrr.simulator import RunConfig, TrainResult, train
from dekrr.solver import NodeState, PenaltyConfig

KRR_MAX_N = 10_000
METHODS = ("dkla_rff", "dkla_ddrf", "dekrr_ddrf", "dekrr_rff")


def rse(predictions, targets) -> float:
    """Relative square error: residual sum of squares over total sum of squares."""
    f = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if f.shape != y.shape:
        raise ValueError(f"{f.shape[0]} predictions for {y.shape[0]} targets")
    if y.shape[0] < 2:
        raise ValueError("need at least two targets")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("targets are constant; RSE undefined")
    return float(np.sum((f - y) ** 2)) / denom


@dataclass(frozen=True)
class Predictor:
    kind: Literal["centralized_krr", "centralized_rff", "node_local"]
    spec: FeatureSpec | None = None
    theta: np.ndarray | None = None
    support: np.ndarray | None = None
    alpha: np.ndarray | None = None
    sigma: float | None = None

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "centralized_krr":
            return gaussian_kernel(X, self.support, self.sigma) @ self.alpha
        return self.theta @ feature_matrix(self.spec, X)

    predict = __call__


def centralized_krr(X, Y, lam: float, sigma: float) -> Predictor:
    """Exact kernel ridge regression, ``alpha = (K + lam N I)^{-1} y``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    N = X.shape[0]
    if N > KRR_MAX_N:
        raise MemoryError(
            f"exact KRR on N={N} exceeds the dense-solve guard of {KRR_MAX_N}; subsample first"
        )
    K = gaussian_kernel(X, X, sigma)
    K[np.diag_indices_from(K)] += lam * N
    alpha = linalg.solve(K, Y, assume_a="pos")
    return Predictor("centralized_krr", support=X.copy(), alpha=alpha, sigma=sigma)


def centralized_rff(X, Y, spec: FeatureSpec, lam: float) -> Predictor:
    """Ridge on random features: minimises ``1/N ||theta^T Z - y||^2 + lam ||theta||^2``."""
    Y = np.asarray(Y, dtype=float).ravel()
    Z = feature_matrix(spec, X)
    A = Z @ Z.T
    A[np.diag_indices_from(A)] += lam * Z.shape[1]
    theta = linalg.cho_solve(linalg.cho_factor(A, lower=True), Z @ Y)
    return Predictor("centralized_rff", spec=spec, theta=theta)


def node_predictors(states: Sequence[NodeState]) -> list[Predictor]:
    return [Predictor("node_local", spec=s.spec, theta=s.theta) for s in states]


def network_test_rse(states: Sequence[NodeState], shards) -> float:
    """Pooled RSE where each node predicts its own test half with its own model."""
    preds, ys = [], []
    for s, sh in zip(states, shards):
        if sh.X_test.shape[0] == 0:
            continue
        preds.append(s.theta @ feature_matrix(s.spec, sh.X_test))
        ys.append(sh.y_test)
    return rse(np.concatenate(preds), np.concatenate(ys))


def node_test_rse(states: Sequence[NodeState], shards) -> list[float]:
    return [rse(s.theta @ feature_matrix(s.spec, sh.X_test), sh.y_test) for s, sh in zip(states, shards)]


def probe_set(shards, M: int, seed=0) -> np.ndarray:
    pool = np.vstack([sh.X_test for sh in shards])
    rng = np.random.default_rng(seed)
    return pool[rng.choice(pool.shape[0], size=min(M, pool.shape[0]), replace=False)]


def consensus_disagreement(states: Sequence[NodeState], probe, topology: Topology) -> float:
    """Largest mean absolute gap between neighbouring decision functions on ``probe``."""
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    if probe.shape[0] < 1:
        raise ValueError("empty probe set")
    f = [s.theta @ feature_matrix(s.spec, probe) for s in states]
    gaps = [float(np.mean(np.abs(f[j] - f[p]))) for j, p in topology.edges()]
    return max(gaps, default=0.0)


# --------------------------------------------------------------------------- baselines


@dataclass(frozen=True)
class MethodConfig:
    lam: float
    sigma: float
    D_js: tuple[int, ...]
    c_nei: float
    c_self_mult: float = 5.0
    kind: str = "cos_with_phase"
    d0_ratio: int = 20
    eps: float = 1e-6
    max_rounds: int = 2000
    safeguard: bool = True
    workers: int | None = None

    def run_config(self, J: int) -> RunConfig:
        return RunConfig(
            lam=self.lam,
            penalty=PenaltyConfig.uniform(J, self.c_nei, self.c_self_mult),
            eps=self.eps,
            max_rounds=self.max_rounds,
            safeguard=self.safeguard,
            workers=self.workers,
        )


def _seed(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def inputs_digest(shards, topology: Topology, config: MethodConfig, seed: int) -> str:
    """Hash of everything shared by paired method comparisons."""
    h = hashlib.sha256()
    for sh in shards:
        for a in (sh.X_train, sh.y_train, sh.X_test, sh.y_test):
            h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    h.update(topology.to_edge_list().encode())
    shared = asdict(config)
    h.update(json.dumps(shared, sort_keys=True, default=list).encode())
    h.update(str(int(seed)).encode())
    return h.hexdigest()


def method_specs(kind: str, config: MethodConfig, shards, seed: int) -> list[FeatureSpec]:
    """Feature specs installed on each node by a method."""
    J = len(shards)
    d = shards[0].X_train.shape[1]
    if kind == "dkla_rff":
        D = int(round(np.mean(config.D_js)))
        spec = sample_gaussian_features(d, D, config.sigma, _seed(seed, 1), config.kind)
        return [spec] * J
    if kind == "dkla_ddrf":
        D = int(round(np.mean(config.D_js)))
        big = max(range(J), key=lambda j: (shards[j].n_train, -j))
        sh = shards[big]
        spec = select_ddrf(
            sh.X_train, sh.y_train, D, config.sigma, _seed(seed, 2), config.kind, config.d0_ratio
        )
        return [spec] * J
    if kind == "dekrr_ddrf":
        return [
            select_ddrf(
                sh.X_train, sh.y_train, D, config.sigma, _seed(seed, 3, j), config.kind, config.d0_ratio
            )
            for j, (sh, D) in enumerate(zip(shards, config.D_js))
        ]
    if kind == "dekrr_rff":
        return [
            sample_gaussian_features(d, D, config.sigma, _seed(seed, 4, j), config.kind)
            for j, D in enumerate(config.D_js)
        ]
    raise ValueError(f"unknown method {kind!r}; expected one of {METHODS}")


def run_baseline(
    kind: str, config: MethodConfig, topology: Topology, shards, seed: int = 0
) -> TrainResult:
    """Select features per ``kind``, then train with the shared simulator and solver."""
    if len(config.D_js) != topology.J or len(shards) != topology.J:
        raise ValueError("D_js, shards and topology disagree on the node count")
    specs = method_specs(kind, config, shards, seed)
    result = train(shards, specs, topology, config.run_config(topology.J))
    result.meta.update(
        method=kind,
        seed=int(seed),
        inputs_digest=inputs_digest(shards, topology, config, seed),
        test_rse=network_test_rse(result.states, shards),
    )
    return result


# --------------------------------------------------------------------------- cross-validation

LAMBDA_GRID = tuple(10.0**i for i in range(-8, -1))
SIGMA_GRID = tuple(2.0**i for i in range(-2, 3))


def cv_scores(
    X,
    Y,
    lams: Sequence[float] = LAMBDA_GRID,
    sigmas: Sequence[float] = SIGMA_GRID,
    folds: int = 5,
    seed=0,
    D: int = 500,
    kind: str = "cos_with_phase",
) -> dict[tuple[float, float], float]:
    """Mean validation RSE of centralized random-feature ridge per ``(lam, sigma)``."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).ravel()
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if not lams or not sigmas:
        raise ValueError("empty grid")
    rng = np.random.default_rng(seed)
    fold_of = rng.permutation(X.shape[0]) % folds
    scores = {}
    for si, sigma in enumerate(sigmas):
        spec = sample_gaussian_features(X.shape[1], D, sigma, _seed(seed, 5, si), kind)
        Z = feature_matrix(spec, X)
        per_lam = {lam: [] for lam in lams}
        for f in range(folds):
            tr, va = fold_of != f, fold_of == f
            Ztr, Zva = Z[:, tr], Z[:, va]
            A = Ztr @ Ztr.T
            b = Ztr @ Y[tr]
            w, V = np.linalg.eigh(A)
            Vb = V.T @ b
            for lam in lams:
                theta = V @ (Vb / (np.maximum(w, 0.0) + lam * Ztr.shape[1]))
                per_lam[lam].append(rse(theta @ Zva, Y[va]))
        for lam in lams:
            scores[(lam, sigma)] = float(np.mean(per_lam[lam]))
    return scores


def cross_validate(
    X,
    Y,
    lams: Sequence[float] = LAMBDA_GRID,
    sigmas: Sequence[float] = SIGMA_GRID,
    folds: int = 5,
    seed=0,
    D: int = 500,
    kind: str = "cos_with_phase",
) -> tuple[float, float]:
    """Grid point with the lowest mean fold RSE; ties prefer larger lam, then larger sigma."""
    scores = cv_scores(X, Y, lams, sigmas, folds, seed, D, kind)
    return min(scores, key=lambda k: (scores[k], -k[0], -k[1]))
