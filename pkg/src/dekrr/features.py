"""Gaussian random Fourier features and data-dependent selection.

The Gaussian kernel ``k(x, x') = exp(-||x - x'||^2 / (2 sigma^2))`` is
approximated by ``z(x)^T z(x')`` where the frequencies are drawn from
``N(0, sigma^-2 I)``.  Two real maps are supported:

``paired_cos_sin``
    ``z(x) = D^{-1/2} [cos(Omega x); sin(Omega x)]``, dimension ``2D``.
``cos_with_phase``
    ``z(x) = sqrt(2/D) cos(Omega x + b)``, ``b ~ U[0, 2 pi]``, dimension ``D``.

Data-dependent features over-sample ``D_0`` candidates, score each one on
local labelled data and keep the ``D`` best.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

MappingKind = Literal["paired_cos_sin", "cos_with_phase"]
KINDS = ("paired_cos_sin", "cos_with_phase")

_SCORE_CHUNK = 256


@dataclass(frozen=True, eq=False)
class FeatureSpec:
    """A node's random feature set.

    ``omega`` has one frequency per row, shape ``(D, d)``.
    """

    omega: np.ndarray
    phases: np.ndarray | None
    kind: str
    sigma: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mapping kind {self.kind!r}")
        omega = np.array(self.omega, dtype=float)
        if omega.ndim != 2 or omega.shape[0] < 1:
            raise ValueError(f"omega must be (D, d) with D >= 1, got {omega.shape}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        has_phase = self.phases is not None
        if has_phase != (self.kind == "cos_with_phase"):
            raise ValueError("phases must be present exactly when kind == 'cos_with_phase'")
        omega.flags.writeable = False
        object.__setattr__(self, "omega", omega)
        if has_phase:
            b = np.array(self.phases, dtype=float).ravel()
            if b.shape[0] != omega.shape[0]:
                raise ValueError("one phase per frequency required")
            if np.any(b < 0) or np.any(b > 2 * np.pi):
                raise ValueError("phases must lie in [0, 2 pi]")
            b.flags.writeable = False
            object.__setattr__(self, "phases", b)

    @property
    def D(self) -> int:
        return self.omega.shape[0]

    @property
    def d(self) -> int:
        return self.omega.shape[1]

    @property
    def dim(self) -> int:
        """Length of the feature vector (``2D`` for the paired map)."""
        return 2 * self.D if self.kind == "paired_cos_sin" else self.D

    def subset(self, idx) -> "FeatureSpec":
        idx = np.asarray(idx)
        b = None if self.phases is None else self.phases[idx]
        return FeatureSpec(self.omega[idx], b, self.kind, self.sigma)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma": self.sigma,
            "D": self.D,
            "d": self.d,
            "omega": self.omega.ravel().tolist(),
            "phases": None if self.phases is None else self.phases.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSpec":
        omega = np.asarray(obj["omega"], dtype=float).reshape(obj["D"], obj["d"])
        b = obj.get("phases")
        return cls(omega, None if b is None else np.asarray(b, dtype=float), obj["kind"], obj["sigma"])

    @classmethod
    def from_json(cls, text: str) -> "FeatureSpec":
        return cls.from_dict(json.loads(text))

    def to_bytes(self) -> bytes:
        """Flat little-endian float64 form: header ``[sigma, kind, D, d]``, omega, phases."""
        head = np.array([self.sigma, KINDS.index(self.kind), self.D, self.d], dtype="<f8")
        parts = [head, self.omega.astype("<f8").ravel()]
        if self.phases is not None:
            parts.append(self.phases.astype("<f8"))
        return np.concatenate(parts).tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureSpec":
        arr = np.frombuffer(buf, dtype="<f8")
        sigma, kind, D, d = arr[:4]
        kind, D, d = KINDS[int(kind)], int(D), int(d)
        omega = arr[4 : 4 + D * d].reshape(D, d)
        b = arr[4 + D * d :] if kind == "cos_with_phase" else None
        return cls(omega, b, kind, float(sigma))

    def __eq__(self, other):
        if not isinstance(other, FeatureSpec):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.sigma == other.sigma
            and np.array_equal(self.omega, other.omega)
            and (
                (self.phases is None and other.phases is None)
                or (
                    self.phases is not None
                    and other.phases is not None
                    and np.array_equal(self.phases, other.phases)
                )
            )
        )

    __hash__ = None


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_gaussian_features(
    d: int, D: int, sigma: float, seed=None, kind: MappingKind = "cos_with_phase"
) -> FeatureSpec:
    """Draw ``D`` frequencies from ``N(0, sigma^-2 I_d)`` (and phases if needed)."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if D < 1 or d < 1:
        raise ValueError(f"need D >= 1 and d >= 1, got D={D}, d={d}")
    if kind not in KINDS:
        raise ValueError(f"unknown mapping kind {kind!r}")
    rng = _rng(seed)
    omega = rng.standard_normal((D, d)) / sigma
    b = rng.uniform(0.0, 2 * np.pi, size=D) if kind == "cos_with_phase" else None
    return FeatureSpec(omega, b, kind, sigma)


def _check_X(spec: FeatureSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.d:
        raise ValueError(f"expected data of shape (M, {spec.d}), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("empty data matrix")
    return X


def feature_matrix(spec: FeatureSpec, X) -> np.ndarray:
    """Features of every row of ``X`` (shape ``(M, d)``) as columns: ``(spec.dim, M)``."""
    X = _check_X(spec, X)
    proj = spec.omega @ X.T
    if spec.kind == "paired_cos_sin":
        return np.vstack((np.cos(proj), np.sin(proj))) / np.sqrt(spec.D)
    proj += spec.phases[:, None]
    return np.sqrt(2.0 / spec.D) * np.cos(proj)


def feature_map(spec: FeatureSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != spec.d:
        raise ValueError(f"expected a vector of length {spec.d}, got shape {x.shape}")
    return feature_matrix(spec, x[None, :])[:, 0]


def gaussian_kernel(A, B, sigma: float) -> np.ndarray:
    """Exact kernel matrix between rows of ``A`` and rows of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * sigma**2))


# --------------------------------------------------------------------------- selection


@dataclass(frozen=True)
class CandidatePool:
    candidates: FeatureSpec
    scores: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.candidates.D


ScoreFn = Callable[[FeatureSpec, np.ndarray, np.ndarray], np.ndarray]


def sample_candidates(
    d: int, D0: int, sigma: float, seed=None, kind: MappingKind = "cos_with_phase"
) -> CandidatePool:
    return CandidatePool(sample_gaussian_features(d, D0, sigma, seed, kind))


def label_alignment_scores(cand: FeatureSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Squared empirical correlation between labels and each candidate's features.

    Without phases: ``(mean y cos(w.x))^2 + (mean y sin(w.x))^2``.
    With phases: ``(mean y cos(w.x + b))^2``.
    """
    Y = np.asarray(Y, dtype=float).ravel()
    N = Y.shape[0]
    out = np.empty(cand.D)
    for s in range(0, cand.D, _SCORE_CHUNK):
        proj = cand.omega[s : s + _SCORE_CHUNK] @ X.T
        if cand.phases is None:
            c = np.cos(proj) @ Y / N
            sn = np.sin(proj) @ Y / N
            out[s : s + _SCORE_CHUNK] = c * c + sn * sn
        else:
            proj += cand.phases[s : s + _SCORE_CHUNK, None]
            c = np.cos(proj) @ Y / N
            out[s : s + _SCORE_CHUNK] = c * c
    return out


def score_features(
    pool: CandidatePool, X, Y, score_fn: ScoreFn | None = None
) -> CandidatePool:
    X = _check_X(pool.candidates, X)
    Y = np.asarray(Y, dtype=float).ravel()
    if Y.shape[0] != X.shape[0]:
        raise ValueError("X and Y disagree on sample count")
    fn = score_fn or label_alignment_scores
    scores = np.asarray(fn(pool.candidates, X, Y), dtype=float)
    if scores.shape != (pool.size,):
        raise ValueError(f"score function returned shape {scores.shape}, expected ({pool.size},)")
    return CandidatePool(pool.candidates, scores)


def select_top(pool: CandidatePool, D: int) -> FeatureSpec:
    """Keep the ``D`` highest-scoring candidates; ties go to the earlier sample."""
    if pool.scores is None:
        raise ValueError("pool has not been scored")
    if not 1 <= D <= pool.size:
        raise ValueError(f"cannot select D={D} from a pool of {pool.size}")
    order = np.argsort(-pool.scores, kind="stable")[:D]
    return pool.candidates.subset(order)


def select_ddrf(
    X,
    Y,
    D: int,
    sigma: float,
    seed=None,
    kind: MappingKind = "cos_with_phase",
    ratio: int = 20,
    score_fn: ScoreFn | None = None,
) -> FeatureSpec:
    """Sample ``ratio * D`` candidates, score them on ``(X, Y)``, keep the best ``D``."""
    X = np.asarray(X, dtype=float)
    pool = sample_candidates(X.shape[1], ratio * D, sigma, seed, kind)
    return select_top(score_features(pool, X, Y, score_fn), D)
