"""Attention weights, head outputs and the scalar field readout.

All array functions broadcast over leading axes, so the same code evaluates a
single parameter draw or a whole batch of draws (and several heads at once).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .embedding import EmbeddingKind, FeatureParams, embed_point
from .ensembles import AttentionMode, EnsembleConfig, HeadParams, ReadoutParams


class ContextSource(str, Enum):
    SINGLE_POINT = "single_point"
    FIXED_POINTS = "fixed_points"
    INSERTION_POINTS = "insertion_points"


@dataclass(frozen=True)
class ContextSet:
    """Context tokens (keys and values), shape ``(..., L, D)``."""

    tokens: np.ndarray
    source: ContextSource

    def __post_init__(self):
        if np.ndim(self.tokens) < 2 or np.shape(self.tokens)[-2] < 1:
            raise ValueError("a context needs at least one token")


@dataclass(frozen=True)
class FieldSample:
    value: float
    head_components: Optional[np.ndarray] = None


def softmax_row(scores) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    s = np.asarray(scores, dtype=float)
    if s.ndim == 0 or s.shape[-1] == 0:
        raise ValueError("softmax of an empty score vector")
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def score_scale(cfg: EnsembleConfig) -> float:
    return float(cfg.d_k) ** cfg.score_power


def attention_from_tokens(tq, tctx, WQ, WK, scale: float) -> np.ndarray:
    """Weights ``softmax((tq WQ) . (t_u WK) / scale)`` over context tokens.

    ``tq`` is ``(..., D)``, ``tctx`` is ``(..., L, D)``, ``WQ``/``WK`` are
    ``(..., D, d_k)``; returns ``(..., L)``.
    """
    q = tq[..., None, :] @ WQ
    k = tctx @ WK
    scores = (k @ np.swapaxes(q, -1, -2))[..., 0] / scale
    return softmax_row(scores)


def mix_values(alpha, tctx, WV) -> np.ndarray:
    """``sum_u alpha_u (t_u WV)``; the one weight vector serves every output coordinate."""
    values = tctx @ WV
    return (alpha[..., None, :] @ values)[..., 0, :]


def _token(x, cfg: EnsembleConfig, fp: Optional[FeatureParams]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != cfg.d:
        raise ValueError(f"point has dimension {x.shape[-1]}, ensemble has d={cfg.d}")
    return embed_point(x, cfg.embedding, fp if cfg.embedding.kind is EmbeddingKind.COSNET else None)


def build_context(cfg: EnsembleConfig, points=None, fp: Optional[FeatureParams] = None) -> ContextSet:
    """Context for the configured mode.

    fixed_context uses ``cfg.context_points``; insertion_set uses ``points``
    (the correlator's insertion points); single_token has no shared context,
    each query attends to its own token only.
    """
    mode = cfg.attention_mode
    if mode is AttentionMode.FIXED_CONTEXT:
        return ContextSet(_token(cfg.context_array, cfg, fp), ContextSource.FIXED_POINTS)
    if mode is AttentionMode.INSERTION_SET:
        if points is None or len(points) == 0:
            raise ValueError("insertion_set mode needs the insertion points")
        return ContextSet(_token(np.asarray(points, dtype=float), cfg, fp), ContextSource.INSERTION_POINTS)
    if points is None or len(points) != 1:
        raise ValueError("single_token context is built from exactly one point")
    return ContextSet(_token(np.asarray(points, dtype=float), cfg, fp), ContextSource.SINGLE_POINT)


def _keys_for_query(tq, ctx: ContextSet, cfg: EnsembleConfig) -> np.ndarray:
    if ctx.tokens.shape[-1] != tq.shape[-1]:
        raise ValueError("query and context tokens differ in dimension")
    if cfg.attention_mode is AttentionMode.FIXED_CONTEXT and cfg.include_query:
        return np.concatenate([ctx.tokens, tq[..., None, :]], axis=-2)
    return ctx.tokens


def attention_weights(x, ctx: ContextSet, head: HeadParams, cfg: EnsembleConfig,
                      fp: Optional[FeatureParams] = None) -> np.ndarray:
    """Weights of query point ``x`` over the context, shape ``(..., L)``.

    With stacked heads (``WQ`` of shape ``(N_h, D, d_k)``) a row per head is returned.
    """
    if cfg.attention_mode is AttentionMode.SINGLE_TOKEN:
        lead = np.shape(head.WQ)[:-2]
        return np.ones(lead + (1,))
    tq = _token(x, cfg, fp)
    return attention_from_tokens(tq, _keys_for_query(tq, ctx, cfg), head.WQ, head.WK, score_scale(cfg))


def head_output(x, ctx: ContextSet, head: HeadParams, cfg: EnsembleConfig,
                fp: Optional[FeatureParams] = None, return_weights: bool = False):
    """Head output vector (length ``d_k``, per head) at query point ``x``."""
    tq = _token(x, cfg, fp)
    if cfg.attention_mode is AttentionMode.SINGLE_TOKEN:
        out = tq @ head.WV
        alpha = np.ones(out.shape[:-1] + (1,))
    else:
        keys = _keys_for_query(tq, ctx, cfg)
        alpha = attention_from_tokens(tq, keys, head.WQ, head.WK, score_scale(cfg))
        out = mix_values(alpha, keys, head.WV)
    return (out, alpha) if return_weights else out


def field_value(x, ctx: ContextSet, head: HeadParams, readout: ReadoutParams, cfg: EnsembleConfig,
                fp: Optional[FeatureParams] = None, keep_components: bool = False) -> FieldSample:
    """``phi(x) = sum_h sum_i z_hi head^(h)_i(x)`` for one parameter draw."""
    if np.shape(head.WQ)[-3:-2] != (cfg.N_h,) and cfg.N_h != 1:
        raise ValueError(f"expected {cfg.N_h} heads")
    comps = head_output(x, ctx, head, cfg, fp)
    z = np.asarray(readout.z)
    if z.shape[-1] != comps.shape[-1]:
        raise ValueError("readout width does not match head width")
    value = float(np.sum(z * comps))
    return FieldSample(value, comps if keep_components else None)
