"""Denoising network: predicts per-position clean-token logits from a
corrupted sequence and a timestep.

Token embeddings are summed with two positional tables, one over element
slots and one over the five attribute streams (a single flat table is kept
as an ablation switch).  Timestep information enters through modulated
normalization inside each transformer block.  The output head projects to
the full vocabulary and is masked so each position can only score its own
modality's tokens plus PAD; MASK is never a valid clean-state prediction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .nn import Block, Embedding, LayerNorm, Linear, Module, TimeEmbedding
from .vocab import MODALITIES, Vocabulary


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    max_elements: int = 25
    layers: int = 4
    heads: int = 8
    embed_dim: int = 512
    hidden_dim: int = 2048
    dropout: float = 0.1
    decoupled_pe: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise DataError("SHAPE_MISMATCH", "embed_dim must divide into heads")
        if min(self.layers, self.heads, self.embed_dim, self.hidden_dim,
               self.max_elements, self.vocab_size) < 1:
            raise DataError("SHAPE_MISMATCH", "all dimensions must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(vocab: Vocabulary, max_elements: int = 25, **overrides) -> DenoiserConfig:
    """Small configuration for CPU-scale experiments and the test suite."""
    kw = dict(vocab_size=vocab.n_tokens, max_elements=max_elements,
              layers=2, heads=8, embed_dim=128, hidden_dim=512, dropout=0.1)
    kw.update(overrides)
    return DenoiserConfig(**kw)


def paper_config(vocab: Vocabulary, max_elements: int = 25, **overrides) -> DenoiserConfig:
    kw = dict(vocab_size=vocab.n_tokens, max_elements=max_elements)
    kw.update(overrides)
    return DenoiserConfig(**kw)


def encode_positions(length: int):
    """Element-slot and attribute index streams for a flattened sequence."""
    p = np.arange(length)
    return p // 5, p % 5


def modality_logit_mask(vocab: Vocabulary) -> np.ndarray:
    """(5, n_tokens) additive mask: 0 on a position's modality range plus
    PAD, -inf elsewhere (including MASK)."""
    mask = np.full((5, vocab.n_tokens), -np.inf)
    for j, mod in enumerate(MODALITIES):
        lo, hi = vocab.range_for(mod)
        mask[j, lo:hi] = 0.0
        mask[j, vocab.pad_id] = 0.0
    return mask


class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, vocab: Vocabulary,
                 rng: np.random.Generator):
        if config.vocab_size != vocab.n_tokens:
            raise DataError("SHAPE_MISMATCH", "config vocab_size disagrees with vocabulary")
        self.config = config
        dt = np.float32 if config.dtype == "float32" else np.float64
        d = config.embed_dim
        m = config.max_elements
        self.tok = Embedding(config.vocab_size, d, rng, dt)
        if config.decoupled_pe:
            self.pos_elem = Embedding(m, d, rng, dt)
            self.pos_attr = Embedding(5, d, rng, dt)
        else:
            self.pos_flat = Embedding(5 * m, d, rng, dt)
        self.time = TimeEmbedding(d, rng, dt)
        self.blocks = []
        for i in range(config.layers):
            blk = Block(d, config.heads, config.hidden_dim, d, rng, dt, config.dropout)
            setattr(self, f"block{i}", blk)
            self.blocks.append(blk)
        self.norm_out = LayerNorm(d, dt)
        self.head = Linear(d, config.vocab_size, rng, dt)
        self._logit_mask = modality_logit_mask(vocab)
        self._length = 5 * m
        self.forward_calls = 0

    # ---- forward / backward ------------------------------------------------
    def forward(self, tokens: np.ndarray, t: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                return_hidden: bool = False) -> np.ndarray:
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        b, length = tokens.shape
        if length != self._length:
            raise DataError("SHAPE_MISMATCH",
                            f"sequence length {length} != {self._length}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise DataError("SHAPE_MISMATCH", "token id outside the vocabulary")
        if train and rng is None and self.config.dropout > 0:
            raise DataError("INVALID_CONDITION", "training forward needs an rng for dropout")
        self.forward_calls += 1

        h = self.tok.forward(tokens)
        if self.config.decoupled_pe:
            elem_idx, attr_idx = encode_positions(length)
            self._elem_idx = np.broadcast_to(elem_idx, (b, length))
            self._attr_idx = np.broadcast_to(attr_idx, (b, length))
            h = h + self.pos_elem.forward(self._elem_idx) \
                  + self.pos_attr.forward(self._attr_idx)
        else:
            self._flat_idx = np.broadcast_to(np.arange(length), (b, length))
            h = h + self.pos_flat.forward(self._flat_idx)
        cond = self.time.forward(np.broadcast_to(np.asarray(t), (b,)))
        for blk in self.blocks:
            h = blk.forward(h, cond, train, rng)
        hidden = self.norm_out.forward(h)
        logits = self.head.forward(hidden) + self._logit_mask[np.arange(length) % 5]
        if return_hidden:
            return (logits[0], hidden[0]) if squeeze else (logits, hidden)
        return logits[0] if squeeze else logits

    def backward(self, dlogits: np.ndarray) -> None:
        if dlogits.ndim == 2:
            dlogits = dlogits[None]
        dh = self.norm_out.backward(self.head.backward(dlogits))
        dcond = None
        for blk in reversed(self.blocks):
            dh, dc = blk.backward(dh)
            dcond = dc if dcond is None else dcond + dc
        self.time.backward(dcond)
        self.tok.backward(dh)
        if self.config.decoupled_pe:
            self.pos_elem.backward(dh)
            self.pos_attr.backward(dh)
        else:
            self.pos_flat.backward(dh)

    # ---- persistence ---------------------------------------------------------
    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_params()}

    def load_state(self, state: dict) -> None:
        for name, p in self.named_params():
            if name not in state:
                raise DataError("CORRUPT_FILE", f"missing parameter {name}")
            if state[name].shape != p.data.shape:
                raise DataError("SHAPE_MISMATCH", f"bad shape for parameter {name}")
            p.data[...] = state[name].astype(p.data.dtype)

    def n_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_params())

    def features(self, tokens: np.ndarray) -> np.ndarray:
        """Mean-pooled final hidden state at t=1 on an uncorrupted sequence."""
        _, hidden = self.forward(tokens, np.array(1), return_hidden=True)
        return hidden.mean(axis=-2)
