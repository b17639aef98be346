"""Toy text conditioning.

A frozen random encoder stands in for CLIP/LLM text encoders. It exposes
per-layer hidden states so the layer-selection, concatenation, projection and
pooling mechanics can be exercised without pretrained weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import kernels as K
from .numerics.rng import Rng

POOL_MODES = ("causal", "bidirectional")


@dataclass
class CondBundle:
    """Projected token embeddings (B, l_text, d), pooled embedding (B, d) and a
    per-sample null flag (B,). Null rows are replaced by the model's learned
    unconditional embedding."""

    tokens: np.ndarray
    pooled: np.ndarray
    is_null: np.ndarray

    def __post_init__(self):
        self.is_null = np.asarray(self.is_null, dtype=bool).reshape(-1)
        if self.tokens.ndim != 3 or self.pooled.ndim != 2:
            raise ValueError(f"bad bundle shapes {self.tokens.shape}, {self.pooled.shape}")
        if not (self.tokens.shape[0] == self.pooled.shape[0] == self.is_null.shape[0]):
            raise ValueError("bundle batch sizes disagree")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "CondBundle":
        return CondBundle(self.tokens[idx], self.pooled[idx], self.is_null[idx])


def null_condition(l_text: int, d: int, batch: int = 1, dtype=np.float32) -> CondBundle:
    """Marker bundle selecting the learned unconditional embedding."""
    return CondBundle(
        np.zeros((batch, l_text, d), dtype=dtype),
        np.zeros((batch, d), dtype=dtype),
        np.ones(batch, dtype=bool),
    )


def drop_conditions(bundle: CondBundle, p_drop: float, rng: Rng) -> CondBundle:
    """Mark each sample null with probability ``p_drop`` (CFG training)."""
    drop = rng.bernoulli(p_drop, (bundle.batch,))
    return CondBundle(bundle.tokens, bundle.pooled, bundle.is_null | drop)


def pool(hidden: np.ndarray, mode: str) -> np.ndarray:
    """Causal: last token. Bidirectional: mean over tokens. ``hidden`` is (..., l, d)."""
    if hidden.shape[-2] == 0:
        raise ValueError("cannot pool an empty sequence")
    if mode == "causal":
        return hidden[..., -1, :]
    if mode == "bidirectional":
        return hidden.mean(axis=-2)
    raise ValueError(f"unknown pooling mode {mode!r}")


def _orthogonal(rng: Rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


class ToyEncoder:
    """Embedding table followed by ``n_layers`` fixed mixing layers.

    Each layer averages every token with the mean of the tokens it may see
    (its prefix in causal mode, the whole sequence in bidirectional mode),
    applies a random orthogonal map and a tanh.
    """

    def __init__(self, vocab: int = 64, d_enc: int = 16, n_layers: int = 4, mode: str = "bidirectional", seed: int = 0):
        if mode not in POOL_MODES:
            raise ValueError(f"unknown mode {mode!r}")
        rng = Rng(seed, 0x7E47)
        self.vocab = vocab
        self.d_enc = d_enc
        self.n_layers = n_layers
        self.mode = mode
        self.table = rng.normal((vocab, d_enc))
        self.mixers = [_orthogonal(rng, d_enc) for _ in range(n_layers)]

    def hidden_states(self, token_ids) -> list[np.ndarray]:
        """Hidden states of layers 1..M, each (B, l, d_enc)."""
        ids = np.atleast_2d(np.asarray(token_ids))
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError("token id outside vocabulary")
        h, _ = K.embedding_fwd(self.table, ids)
        states = []
        length = ids.shape[1]
        for q in self.mixers:
            if self.mode == "causal":
                ctx = np.cumsum(h, axis=1) / np.arange(1, length + 1)[None, :, None]
            else:
                ctx = np.broadcast_to(h.mean(axis=1, keepdims=True), h.shape)
            h = np.tanh((0.5 * h + 0.5 * ctx) @ q)
            states.append(h)
        return states


class TextConditioner:
    """Selects encoder layers, concatenates them, projects to ``d_enc`` and then
    to the model's text width ``d``, and pools.

    The concat projection starts as ``[I; 0; ...]``, so the first listed layer
    passes through unchanged.
    """

    def __init__(self, encoder: ToyEncoder, layer_spec, d: int, seed: int = 0):
        spec = [layer_spec] if np.isscalar(layer_spec) else list(layer_spec)
        for k in spec:
            if not 1 <= k <= encoder.n_layers:
                raise ValueError(f"layer {k} outside [1, {encoder.n_layers}]")
        self.encoder = encoder
        self.layer_spec = spec
        self.concat = isinstance(layer_spec, (list, tuple))
        e = encoder.d_enc
        self.concat_proj = np.zeros((len(spec) * e, e))
        self.concat_proj[:e] = np.eye(e)
        rng = Rng(seed, 0xC0DE)
        self.out_proj = np.eye(e, d) if d == e else rng.normal((e, d)) / np.sqrt(e)

    def encode(self, token_ids, dtype=np.float32) -> CondBundle:
        states = self.encoder.hidden_states(token_ids)
        picked = [states[k - 1] for k in self.layer_spec]
        if self.concat:
            h = np.concatenate(picked, axis=-1) @ self.concat_proj
        else:
            h = picked[0]
        tokens = h @ self.out_proj
        pooled = pool(tokens, self.encoder.mode)
        return CondBundle(tokens.astype(dtype), pooled.astype(dtype), np.zeros(tokens.shape[0], dtype=bool))


def encode(encoder: ToyEncoder, token_ids, layer_spec, d: int | None = None) -> CondBundle:
    return TextConditioner(encoder, layer_spec, d or encoder.d_enc).encode(token_ids, dtype=np.float64)


def read_prompts(path, length: int | None = None, pad_id: int = 0) -> list[list[int]]:
    """One whitespace-separated token-id sequence per line.

    With ``length`` set, sequences are left-padded with ``pad_id`` (so the last
    token stays last for causal pooling) or truncated from the left.
    """
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        ids = [int(tok) for tok in line.split()]
        if length is not None:
            ids = ([pad_id] * (length - len(ids)) + ids)[-length:]
        out.append(ids)
    return out


def write_prompts(path, prompts) -> None:
    Path(path).write_text("".join(" ".join(str(i) for i in p) + "\n" for p in prompts))
