"""Batched Monte Carlo engine.

Samples are split into fixed batches by index.  Batch ``b`` owns the stream
``stream.child("batch", b)`` and every parameter block inside it has its own
sub-stream, so batch results do not depend on how many workers run them or
on which statistics are requested.  Within a batch the draws are evaluated
in chunks of a size fixed by the ensemble config alone.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from functools import cached_property

import numpy as np

from .attention import attention_from_tokens, score_scale, softmax_row
from .embedding import EmbeddingKind, FeatureParams, embed_point
from .ensembles import (
    AttentionMode,
    EnsembleConfig,
    draw_readout,
    draw_score_matrices,
    draw_weight,
)
from .rng import RngStream

_CHUNK_FLOATS = 1 << 21


def check_batching(n_samples: int, n_batches: int) -> int:
    if n_batches < 2 or n_samples < n_batches:
        raise ValueError(f"invalid batch split: need n_samples >= n_batches >= 2, got {n_samples}, {n_batches}")
    if n_samples % n_batches:
        raise ValueError(f"invalid batch split: {n_samples} samples do not divide into {n_batches} batches")
    return n_samples // n_batches


def chunk_size(cfg: EnsembleConfig) -> int:
    D, dk, H = cfg.token_dim, cfg.d_k, cfg.N_h
    n = 4
    L = max(len(cfg.context_points) + 1, n)
    per = H * (3 * D * dk + dk + 4 * n * dk + 2 * n * L)
    if cfg.decoupled_alpha:
        per += H * dk * (2 * D * D + 3 * n * L + 2 * n * D)
    per += D * (cfg.d + 1) + 2 * n * D
    return max(1, _CHUNK_FLOATS // per)


class BatchSampler:
    """Lazily created per-block generators for one batch."""

    def __init__(self, cfg: EnsembleConfig, stream: RngStream):
        self.cfg = cfg
        self.stream = stream
        self._gens = {}

    def gen(self, tag: str) -> np.random.Generator:
        if tag not in self._gens:
            self._gens[tag] = self.stream.child(tag).generator()
        return self._gens[tag]

    def chunk(self, size: int) -> ParamChunk:
        return ParamChunk(self, size)


class ParamChunk:
    """``size`` parameter draws; each block is drawn on first access."""

    def __init__(self, sampler: BatchSampler, size: int):
        self.sampler = sampler
        self.cfg = sampler.cfg
        self.size = size

    @cached_property
    def features(self):
        from .embedding import sample_feature_params

        if self.cfg.embedding.kind is not EmbeddingKind.COSNET:
            return None
        return sample_feature_params(self.cfg.embedding, self.sampler.gen("features"), self.cfg.d, self.size)

    @cached_property
    def WQ(self):
        return draw_weight(self.cfg, "Q", self.sampler.gen("WQ"), self.size)

    @cached_property
    def WK(self):
        return draw_weight(self.cfg, "K", self.sampler.gen("WK"), self.size)

    @cached_property
    def WV(self):
        return draw_weight(self.cfg, "V", self.sampler.gen("WV"), self.size)

    @cached_property
    def z(self):
        return draw_readout(self.cfg, self.sampler.gen("readout"), self.size)

    @cached_property
    def score_matrices(self):
        return draw_score_matrices(self.cfg, self.sampler.gen("QK_decoupled"), self.size)

    def tokens(self, pts) -> np.ndarray:
        """Tokens of fixed points for every draw, shape ``(S, n, D)``."""
        pts = np.asarray(pts, dtype=float)
        if self.cfg.embedding.kind is EmbeddingKind.IDENTITY:
            return np.broadcast_to(pts, (self.size,) + pts.shape)
        fp = self.features
        return embed_point(pts, self.cfg.embedding, FeatureParams(fp.b[:, None], fp.c[:, None]))


class FieldBatch:
    """Derived quantities for one chunk at a fixed list of insertion points.

    ``attended`` is the attention-averaged token ``m_a = sum_u alpha_au t_u``;
    head outputs are ``m_a W^V`` and the conditional two-point objects are
    ``X_ab = sigma_V^2 / D  m_a . m_b``.  Shapes carry a head axis, plus a
    per-coordinate axis when attention is decoupled across coordinates.
    """

    def __init__(self, chunk: ParamChunk, points):
        self.chunk = chunk
        self.cfg = chunk.cfg
        self.points = np.asarray(points, dtype=float)
        self.n = len(self.points)

    @cached_property
    def query_tokens(self):
        return self.chunk.tokens(self.points)

    def _context(self):
        cfg, tq = self.cfg, self.query_tokens
        if cfg.attention_mode is AttentionMode.INSERTION_SET:
            return tq[:, None, None]
        ctx = self.chunk.tokens(cfg.context_array)[:, None, None]
        if cfg.include_query:
            ctx = np.concatenate(
                [np.broadcast_to(ctx, (ctx.shape[0], 1, self.n) + ctx.shape[-2:]), tq[:, None, :, None, :]],
                axis=-2,
            )
        return ctx

    @cached_property
    def attended(self):
        cfg, tq = self.cfg, self.query_tokens
        if cfg.attention_mode is AttentionMode.SINGLE_TOKEN:
            return tq[:, None]
        ctx = self._context()  # (S, 1, n|1, L, D)
        scale = score_scale(cfg)
        if not cfg.decoupled_alpha:
            WQ, WK = self.chunk.WQ[:, :, None], self.chunk.WK[:, :, None]
            alpha = attention_from_tokens(tq[:, None], ctx, WQ, WK, scale)  # (S, H, n, L)
            return (alpha[..., None, :] @ ctx)[..., 0, :]
        M = self.chunk.score_matrices[:, :, :, None]  # (S, H, dk, 1, D, D)
        ctx = ctx[:, :, None]  # (S, 1, 1, n|1, L, D)
        tqM = tq[:, None, None, :, None, :] @ M  # (S, H, dk, n, 1, D)
        scores = (tqM @ np.swapaxes(ctx, -1, -2))[..., 0, :] / scale
        alpha = softmax_row(scores)  # (S, H, dk, n, L)
        return (alpha[..., None, :] @ ctx)[..., 0, :]

    @cached_property
    def heads(self):
        """Head components, shape ``(S, H, n, d_k)``."""
        m, WV = self.attended, self.chunk.WV
        if self.cfg.decoupled_alpha:
            return np.einsum("shiad,shdi->shai", m, WV)
        return m @ WV

    @cached_property
    def phi(self):
        """Field values, shape ``(S, n)``."""
        z = self.chunk.z
        if self.cfg.decoupled_alpha:
            return np.einsum("shai,shi->sa", self.heads, z)
        w = self.chunk.WV @ z[..., None]  # (S, H, D, 1)
        return (self.attended @ w)[..., 0].sum(axis=1)

    @cached_property
    def X(self):
        """Conditional two-point objects, ``(S, H, n, n)`` or ``(S, H, d_k, n, n)`` if decoupled."""
        m = self.attended
        scale = self.cfg.sigma_V**2 / self.cfg.token_dim
        X = scale * (m @ np.swapaxes(m, -1, -2))
        if self.cfg.attention_mode is AttentionMode.SINGLE_TOKEN:
            X = np.broadcast_to(X, (X.shape[0], self.cfg.N_h) + X.shape[2:])
        return X


def _run_batch(cfg, stream, b, batch_size, points, stat_fn):
    sampler = BatchSampler(cfg, stream.child("batch", b))
    step = chunk_size(cfg)
    total = None
    done = 0
    while done < batch_size:
        size = min(step, batch_size - done)
        stats = stat_fn(FieldBatch(sampler.chunk(size), points))
        sums = {k: float(np.sum(v)) for k, v in stats.items()}
        if total is None:
            total = sums
        else:
            for k, v in sums.items():
                total[k] += v
        done += size
    return {k: v / batch_size for k, v in total.items()}


def run_batches(cfg: EnsembleConfig, points, n_samples: int, n_batches: int, stream: RngStream,
                stat_fn, threads: int = 1):
    """Batch means of the per-sample statistics returned by ``stat_fn``.

    Returns ``(labels, means)`` with ``means`` of shape ``(n_batches, k)``.
    """
    batch_size = check_batching(n_samples, n_batches)
    job = lambda b: _run_batch(cfg, stream, b, batch_size, points, stat_fn)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, range(n_batches)))
    else:
        rows = [job(b) for b in range(n_batches)]
    labels = tuple(rows[0])
    return labels, np.array([[row[k] for k in labels] for row in rows])
