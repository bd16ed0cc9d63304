"""Approximate coded computing with Berrut rational interpolation.

The master splits ``X`` into ``K`` row blocks, appends ``T`` random mask
blocks and builds the rational function

    u(z) = sum_j c_j(z) V_j,    c_j(z) = ((-1)^j / (z - beta_j)) / Gamma(z),

with ``Gamma(z) = sum_j (-1)^j / (z - beta_j)``.  Worker ``i`` receives
``u(alpha_i)``.  From any non-empty set of returned ``f(u(alpha_i))`` the
master rebuilds ``f(u(z))`` with a Berrut interpolant over the alphas and
reads off ``f(X_j) ~ h(beta_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InsufficientData, InvalidConfig
from .realmat import as_matrix

__all__ = [
    "CodecConfig",
    "EncodedShare",
    "ReturnedResult",
    "NODE_GUARD",
    "chebyshev_points",
    "default_anchors",
    "encoder_weights",
    "decoder_weights",
    "encode",
    "encode_at",
    "gen_masks",
    "decode",
    "recover",
]

# |z - node| below this returns the nodal value instead of the singular quotient
NODE_GUARD = 1e-9
MIN_SEPARATION = 1e-6


@dataclass(frozen=True)
class CodecConfig:
    N: int
    K: int
    T: int
    beta: tuple[float, ...]
    alpha: tuple[float, ...]
    mask_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.K < 1 or self.T < 0 or self.N < 1:
            raise InvalidConfig(f"need K >= 1, T >= 0, N >= 1; got K={self.K} T={self.T} N={self.N}")
        if len(self.beta) != self.K + self.T:
            raise InvalidConfig(f"expected {self.K + self.T} anchor points, got {len(self.beta)}")
        if len(self.alpha) != self.N:
            raise InvalidConfig(f"expected {self.N} evaluation points, got {len(self.alpha)}")
        if len(set(self.beta)) != len(self.beta):
            raise InvalidConfig("anchor points are not distinct")
        if len(set(self.alpha)) != len(self.alpha):
            raise InvalidConfig("evaluation points are not distinct")
        if set(self.alpha) & set(self.beta):
            raise InvalidConfig("evaluation points intersect anchor points")
        if self.mask_scale < 0:
            raise InvalidConfig(f"mask_scale must be >= 0, got {self.mask_scale}")

    @property
    def beta_arr(self) -> np.ndarray:
        return np.array(self.beta)

    @property
    def alpha_arr(self) -> np.ndarray:
        return np.array(self.alpha)

    def min_separation(self) -> float:
        return float(np.min(np.abs(self.alpha_arr[:, None] - self.beta_arr[None, :])))


@dataclass(frozen=True, eq=False)
class EncodedShare:
    worker_index: int
    payload: np.ndarray


@dataclass(frozen=True, eq=False)
class ReturnedResult:
    worker_index: int
    payload: np.ndarray


def chebyshev_points(n: int, shift: float = 0.0) -> np.ndarray:
    """First-kind Chebyshev points ``cos((2i + 1 + shift) pi / 2n)``."""
    i = np.arange(n)
    return np.cos((2 * i + 1 + shift) * np.pi / (2 * n))


# shifts of the alpha angle parameter, tried in order until separated
_SHIFTS = (0.0, 0.5, 0.25, 0.75, 0.125, 0.375, 0.625, 0.875)


def default_anchors(N: int, K: int, T: int, mask_scale: float = 1.0) -> CodecConfig:
    """Chebyshev anchors and evaluation points on [-1, 1].

    The evaluation points are shifted along the angle parameter (as little as
    possible) until every alpha sits more than ``1e-6`` from every beta.
    """
    if N < 1 or K < 1 or T < 0:
        raise InvalidConfig(f"need N >= 1, K >= 1, T >= 0; got N={N} K={K} T={T}")
    beta = chebyshev_points(K + T)
    for s in _SHIFTS:
        alpha = chebyshev_points(N, s)
        if np.min(np.abs(alpha[:, None] - beta[None, :])) > MIN_SEPARATION:
            return CodecConfig(N, K, T, tuple(beta), tuple(alpha), mask_scale)
    raise InvalidConfig(f"cannot separate {N} evaluation points from {K + T} anchors")


def _berrut_weights(z: float, nodes: np.ndarray, signs: np.ndarray) -> np.ndarray:
    d = z - nodes
    hit = np.flatnonzero(np.abs(d) < NODE_GUARD)
    if hit.size:
        w = np.zeros(len(nodes))
        w[hit[np.argmin(np.abs(d[hit]))]] = 1.0
        return w
    w = signs / d
    return w / w.sum()


def encoder_weights(z: float, cfg: CodecConfig) -> np.ndarray:
    """Coefficients ``c_j(z)`` of the K + T encoder inputs at ``z``."""
    j = np.arange(cfg.K + cfg.T)
    return _berrut_weights(z, cfg.beta_arr, (-1.0) ** j)


def _signs(indices: np.ndarray, nodes: np.ndarray, sign: str) -> np.ndarray:
    if sign == "global":
        return (-1.0) ** indices
    if sign == "rank":
        # alternate along the sorted returned nodes
        order = np.argsort(nodes, kind="stable")
        ranks = np.empty(len(nodes), dtype=int)
        ranks[order] = np.arange(len(nodes))
        return (-1.0) ** ranks
    raise ValueError(f"sign must be 'rank' or 'global', got {sign!r}")


def decoder_weights(z: float, indices: Sequence[int], cfg: CodecConfig,
                    sign: str = "rank") -> np.ndarray:
    """Berrut weights over the returned workers ``indices`` evaluated at ``z``.

    ``sign="rank"`` alternates signs along the sorted returned nodes, which
    keeps the interpolant pole-free on the real line whatever subset arrived.
    ``sign="global"`` keys the sign to each worker's global index instead.
    """
    idx = np.asarray(indices, dtype=int)
    nodes = cfg.alpha_arr[idx]
    return _berrut_weights(z, nodes, _signs(idx, nodes, sign))


def _check_blocks(mats: Sequence, what: str) -> list[np.ndarray]:
    return [as_matrix(m, name=what) for m in mats]


def encode(blocks: Sequence, masks: Sequence, cfg: CodecConfig) -> list[EncodedShare]:
    blocks = _check_blocks(blocks, "block")
    masks = _check_blocks(masks, "mask")
    if len(blocks) != cfg.K:
        raise ValueError(f"expected {cfg.K} blocks, got {len(blocks)}")
    if len(masks) != cfg.T:
        raise ValueError(f"expected {cfg.T} masks, got {len(masks)}")
    inputs = blocks + masks
    shape = inputs[0].shape
    for m in inputs[1:]:
        if m.shape != shape:
            raise ValueError(f"encode: shape mismatch {shape} vs {m.shape}")
    if cfg.min_separation() < NODE_GUARD:
        raise InvalidConfig("an evaluation point coincides with an anchor point")
    V = np.stack(inputs)
    return [
        EncodedShare(i, np.tensordot(encoder_weights(a, cfg), V, axes=1))
        for i, a in enumerate(cfg.alpha)
    ]


def encode_at(z: float, blocks: Sequence, masks: Sequence, cfg: CodecConfig) -> np.ndarray:
    """Evaluate the encoder rational function ``u`` at an arbitrary point ``z``."""
    V = np.stack(_check_blocks(list(blocks) + list(masks), "input"))
    return np.tensordot(encoder_weights(z, cfg), V, axes=1)


def gen_masks(T: int, shape: tuple[int, int], mask_scale: float, rng_seed=None) -> list[np.ndarray]:
    """``T`` matrices with i.i.d. entries uniform on ``[-mask_scale, mask_scale]``."""
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    rng = np.random.default_rng(rng_seed)
    return [rng.uniform(-mask_scale, mask_scale, size=shape) for _ in range(T)]


def _collect(results: Sequence[ReturnedResult], cfg: CodecConfig):
    if not results:
        raise InsufficientData("no results to decode from")
    idx = [r.worker_index for r in results]
    if len(set(idx)) != len(idx):
        raise ValueError(f"duplicate worker indices in results: {sorted(idx)}")
    for i in idx:
        if not 0 <= i < cfg.N:
            raise ValueError(f"worker index {i} outside [0, {cfg.N})")
    # sort so the result does not depend on arrival order
    ordered = sorted(results, key=lambda r: r.worker_index)
    Y = np.stack([as_matrix(r.payload, name="result") for r in ordered])
    return np.array([r.worker_index for r in ordered]), Y


def decode(results: Sequence[ReturnedResult], cfg: CodecConfig, targets: Sequence[float],
           sign: str = "rank") -> list[np.ndarray]:
    idx, Y = _collect(results, cfg)
    return [np.tensordot(decoder_weights(z, idx, cfg, sign), Y, axes=1) for z in targets]


def recover(results: Sequence[ReturnedResult], cfg: CodecConfig, sign: str = "rank") -> list[np.ndarray]:
    """Approximate ``f(X_j)`` for every data block ``j < K``."""
    return decode(results, cfg, cfg.beta[:cfg.K], sign)
