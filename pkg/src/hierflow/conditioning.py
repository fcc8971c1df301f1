"""Deterministic conditioning features: masked atom-to-token attention,
radial-basis distance encoding, and edge-descriptor assembly.

The learned pieces that normally feed these (atom backbone states, token
keys/values, the distance-bias network) sit behind plain arrays and callables,
so the mechanisms are testable on their own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .molstate import BondOrderVector, DimensionError, RelaxedState, pair_id, soft_degrees

DEFAULT_EPS_MASK = 1e-8
DEFAULT_N_BASIS = 32
DEFAULT_RBF_RANGE = (0.0, 10.0)


def linear_distance_bias(offset: float = 0.0, slope: float = 1.0) -> Callable[[np.ndarray], np.ndarray]:
    """Distance-decayed attention bias b(d) = offset - slope * d.

    A fixed parametric stand-in for the learned bias network: closer tokens
    get a larger additive score.
    """
    return lambda d: offset - slope * np.asarray(d, dtype=float)


@dataclass(frozen=True)
class AttentionInputs:
    """Inputs for one masked attention pass.

    queries: (N, d) per-atom queries; keys/values: (A, d) per-token.
    distances: (N, A) hierarchy distances fed to the bias function.
    ancestor_mask: (N, A) soft ancestor probabilities in [0, 1].
    token_mask: (A,) hard mask; masked tokens are excluded before the softmax
        (this is distinct from the soft ancestor penalty).
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    distances: np.ndarray
    ancestor_mask: np.ndarray
    token_mask: np.ndarray
    bias_fn: Callable[[np.ndarray], np.ndarray] = field(default=lambda d: np.zeros_like(d))
    eps_mask: float = DEFAULT_EPS_MASK

    def __post_init__(self):
        q, k, v = self.queries, self.keys, self.values
        n, d = q.shape
        a = k.shape[0]
        if k.shape != (a, d) or v.shape[0] != a:
            raise DimensionError("keys/values must share the token axis and query width")
        if self.distances.shape != (n, a) or self.ancestor_mask.shape != (n, a):
            raise DimensionError("distances and ancestor mask must be (n_atoms, n_tokens)")
        if self.token_mask.shape != (a,):
            raise DimensionError("token mask must have one entry per token")
        if np.any(self.ancestor_mask < 0) or np.any(self.ancestor_mask > 1):
            raise ValueError("ancestor mask entries must lie in [0, 1]")
        if not self.eps_mask > 0:
            raise ValueError("eps_mask must be positive")


def masked_attention(inputs: AttentionInputs) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights and per-atom context vectors.

    Scores are scaled dot products plus the distance bias plus
    log(ancestor + eps); masked tokens are removed before the softmax.  With a
    uniform ancestor mask and zero bias this reduces to plain scaled
    dot-product attention.
    """
    if not inputs.token_mask.any():
        raise ValueError("attention needs at least one unmasked token")
    d = inputs.queries.shape[1]
    scores = inputs.queries @ inputs.keys.T / np.sqrt(d)
    scores = scores + inputs.bias_fn(inputs.distances)
    scores = scores + np.log(inputs.ancestor_mask + inputs.eps_mask)
    scores = np.where(inputs.token_mask[None, :], scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    exp = np.where(np.isfinite(scores), np.exp(scores), 0.0)
    weights = exp / exp.sum(axis=1, keepdims=True)
    contexts = weights @ inputs.values
    return weights, contexts


def rbf_encode(d: float | np.ndarray, n_basis: int = DEFAULT_N_BASIS,
               d_min: float = DEFAULT_RBF_RANGE[0],
               d_max: float = DEFAULT_RBF_RANGE[1]) -> np.ndarray:
    """Gaussian radial-basis encoding of a distance.

    Centers are linearly spaced over [d_min, d_max]; the Gaussian width equals
    the center spacing, so the entry at a center is exactly 1 and decays
    smoothly off-center.
    """
    if n_basis < 2:
        raise ValueError("need at least two basis functions")
    if d_min >= d_max:
        raise ValueError("d_min must be below d_max")
    centers = np.linspace(d_min, d_max, n_basis)
    sigma = centers[1] - centers[0]
    d = np.asarray(d, dtype=float)
    return np.exp(-((d[..., None] - centers) ** 2) / (2.0 * sigma ** 2))


def edge_descriptor(s_i: np.ndarray, s_j: np.ndarray, state: RelaxedState,
                    i: int, j: int, c_i: np.ndarray, c_j: np.ndarray,
                    delta_h: float, omega: BondOrderVector,
                    n_basis: int = DEFAULT_N_BASIS,
                    rbf_range: tuple[float, float] = DEFAULT_RBF_RANGE) -> np.ndarray:
    """Pairwise feature vector for the bond head, in fixed block order.

    [|s_i - s_j|, s_i * s_j, deg_i, deg_j, RBF(||r_i - r_j||), c_i, c_j, t,
    hierarchy distance], total length 4H + n_basis + 4.  Swapping i and j
    leaves the first two blocks unchanged and swaps the degree and context
    blocks.
    """
    s_i = np.asarray(s_i, float)
    s_j = np.asarray(s_j, float)
    c_i = np.asarray(c_i, float)
    c_j = np.asarray(c_j, float)
    if s_i.shape != s_j.shape or c_i.shape != c_j.shape:
        raise DimensionError("atom states / contexts must come in equal-shape pairs")
    if s_i.ndim != 1 or c_i.ndim != 1:
        raise DimensionError("atom states and contexts must be vectors")
    degrees = soft_degrees(state, omega)
    pid = pair_id(i, j, state.n_atoms)
    del pid  # validates the pair exists
    dist = float(np.linalg.norm(state.coords[i] - state.coords[j]))
    return np.concatenate([
        np.abs(s_i - s_j),
        s_i * s_j,
        [degrees[i], degrees[j]],
        rbf_encode(dist, n_basis, *rbf_range),
        c_i,
        c_j,
        [state.t, delta_h],
    ])
