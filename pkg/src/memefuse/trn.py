"""Relation network over caption, OCR, and visual rows, plus the classifier.

One-stream: a single post-norm transformer stack over the joint sequence
(all modalities share parameters). Two-stream: separate text and visual
encoders that exchange information through co-attention layers (queries
from one stream, keys/values from the other). Either way the classifier
reads the final [CLS] row.
"""

from __future__ import annotations

import numpy as np

from .config import InputFlags, ModelConfig, VARIANT_ONE_STREAM, VARIANT_TWO_STREAM
from .data import MemeSample
from .embedding import (InputSequence, SequenceAssembler, TextEmbedder,
                        VisualEmbedder)
from .errors import DimensionError, InputError
from .layers import (Linear, ParamInit, TransformerBlock, key_padding_blocked)
from .numerics import (Tensor, add, clip, concatenate, log, mul, reshape,
                       scale, slice_axis, softmax, stack, tmean)
from .text import Vocab, wordpiece_tokenize


def _pad_rows(rows: Tensor, mask: np.ndarray, length: int, d: int):
    """Zero-extend one sample's rows and mask to a common batch length."""
    gap = length - rows.shape[0]
    if gap <= 0:
        return rows, mask
    padded = concatenate([rows, Tensor(np.zeros((gap, d)))], axis=0)
    return padded, np.concatenate([mask, np.zeros(gap)])


def _tokenize_inputs(sample: MemeSample, vocab: Vocab, cfg: ModelConfig,
                     flags: InputFlags):
    ocr = wordpiece_tokenize(sample.text, vocab, cfg.max_ocr_len)
    caption = None
    if flags.use_caption:
        caption = wordpiece_tokenize(sample.caption or "", vocab, cfg.max_caption_len)
    labels = None
    if flags.use_object_labels:
        words = " ".join(r.label for r in sample.regions[:cfg.n_regions])
        labels = wordpiece_tokenize(words, vocab, cfg.max_label_len)
    return ocr, caption, labels


class ClassifierHead:
    """Fully-connected layer to two logits, softmax on top."""

    def __init__(self, init: ParamInit, d: int):
        self.fc = Linear(init, d, 2)

    def params(self, prefix: str = "head") -> dict:
        return self.fc.params(f"{prefix}/fc")


def classify(h_cls: Tensor, head: ClassifierHead) -> Tensor:
    """(non-hateful, hateful) probability pairs, shape (B, 2)."""
    return softmax(head.fc(h_cls), axis=-1)


def hateful_probability(probs: Tensor) -> Tensor:
    """Second softmax component, shape (B,)."""
    return reshape(slice_axis(probs, -1, 1, 2), (probs.shape[0],))


def bce_loss(p_hateful: Tensor, labels) -> Tensor:
    """Binary cross-entropy against probabilities, mean over the batch."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p_hateful.shape:
        raise DimensionError(
            f"labels shape {y.shape} does not match probabilities {p_hateful.shape}")
    p = clip(p_hateful, 1e-12, 1.0 - 1e-12)
    one_minus_p = add(scale(p, -1.0), Tensor(np.ones_like(y)))
    terms = add(mul(log(p), Tensor(y)), mul(log(one_minus_p), Tensor(1.0 - y)))
    return scale(tmean(terms), -1.0)


class OneStreamModel:
    """Joint-sequence encoder: all modality rows share one block stack."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        init = ParamInit(seed)
        self.text_embedder = TextEmbedder(init, cfg)
        self.visual_embedder = VisualEmbedder(init, cfg)
        self.assembler = SequenceAssembler(self.text_embedder, self.visual_embedder, cfg)
        self.blocks = [TransformerBlock(init, cfg.d, cfg.heads, cfg.dropout,
                                        cfg.layer_norm_eps)
                       for _ in range(cfg.layers)]
        self.head = ClassifierHead(init, cfg.d)

    def prepare(self, samples: list, vocab: Vocab, flags: InputFlags,
                pad_to: int | None = None) -> list:
        seqs = []
        for s in samples:
            ocr, caption, labels = _tokenize_inputs(s, vocab, self.cfg, flags)
            seqs.append(self.assembler.assemble(ocr, caption, labels,
                                                s.regions, flags, pad_to=pad_to))
        return seqs

    def forward(self, seqs: list, training: bool = False, rng=None) -> Tensor:
        """h_[CLS] for a batch of assembled sequences, shape (B, d)."""
        length = max(s.rows.shape[0] for s in seqs)
        rows, masks = [], []
        for s in seqs:
            r, m = _pad_rows(s.rows, s.mask, length, self.cfg.d)
            rows.append(r)
            masks.append(m)
        x = stack(rows)
        blocked = key_padding_blocked(np.stack(masks))
        for block in self.blocks:
            x = block(x, x, blocked, rng=rng, training=training)
        return reshape(slice_axis(x, 1, 0, 1), (len(seqs), self.cfg.d))

    def named_params(self) -> dict:
        out = {}
        out.update(self.text_embedder.params("text_emb"))
        out.update(self.visual_embedder.params("vis_emb"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"block{i}"))
        out.update(self.head.params())
        return out


class TwoStreamModel:
    """Per-modality encoders joined by co-attention exchanges."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        init = ParamInit(seed)
        self.text_embedder = TextEmbedder(init, cfg)
        self.visual_embedder = VisualEmbedder(init, cfg)
        self.assembler = SequenceAssembler(self.text_embedder, self.visual_embedder, cfg)
        mk = lambda: TransformerBlock(init, cfg.d, cfg.heads, cfg.dropout,
                                      cfg.layer_norm_eps)
        self.text_blocks = [mk() for _ in range(cfg.text_layers)]
        self.visual_blocks = [mk() for _ in range(cfg.visual_layers)]
        self.co_text_blocks = [mk() for _ in range(cfg.co_layers)]
        self.co_visual_blocks = [mk() for _ in range(cfg.co_layers)]
        self.head = ClassifierHead(init, cfg.d)

    def prepare(self, samples: list, vocab: Vocab, flags: InputFlags,
                pad_to: int | None = None) -> list:
        seqs = []
        for s in samples:
            ocr, caption, labels = _tokenize_inputs(s, vocab, self.cfg, flags)
            seqs.append(self.assembler.assemble(ocr, caption, labels,
                                                s.regions, flags, pad_to=None))
        return seqs

    def forward(self, seqs: list, training: bool = False, rng=None) -> Tensor:
        d = self.cfg.d
        text_len = max(s.n_text for s in seqs)
        # at least one (masked) visual slot so co-attention stays well-defined
        vis_len = max(1, max(s.n_visual for s in seqs))
        t_rows, t_masks, v_rows, v_masks = [], [], [], []
        for s in seqs:
            text = slice_axis(s.rows, 0, 0, s.n_text)
            tr, tm = _pad_rows(text, np.ones(s.n_text), text_len, d)
            t_rows.append(tr)
            t_masks.append(tm)
            vis = slice_axis(s.rows, 0, s.n_text, s.n_text + s.n_visual)
            vr, vm = _pad_rows(vis, np.ones(s.n_visual), vis_len, d)
            v_rows.append(vr)
            v_masks.append(vm)
        tx = stack(t_rows)
        vx = stack(v_rows)
        blocked_t = key_padding_blocked(np.stack(t_masks))
        blocked_v = key_padding_blocked(np.stack(v_masks))
        for block in self.text_blocks:
            tx = block(tx, tx, blocked_t, rng=rng, training=training)
        for block in self.visual_blocks:
            vx = block(vx, vx, blocked_v, rng=rng, training=training)
        for co_t, co_v in zip(self.co_text_blocks, self.co_visual_blocks):
            tx_new = co_t(tx, vx, blocked_v, rng=rng, training=training)
            vx_new = co_v(vx, tx, blocked_t, rng=rng, training=training)
            tx, vx = tx_new, vx_new
        return reshape(slice_axis(tx, 1, 0, 1), (len(seqs), d))

    def named_params(self) -> dict:
        out = {}
        out.update(self.text_embedder.params("text_emb"))
        out.update(self.visual_embedder.params("vis_emb"))
        for name, blocks in (("text", self.text_blocks), ("vis", self.visual_blocks),
                             ("co_text", self.co_text_blocks),
                             ("co_vis", self.co_visual_blocks)):
            for i, b in enumerate(blocks):
                out.update(b.params(f"{name}{i}"))
        out.update(self.head.params())
        return out


def build_model(cfg: ModelConfig, seed: int = 0):
    if cfg.variant == VARIANT_ONE_STREAM:
        return OneStreamModel(cfg, seed)
    if cfg.variant == VARIANT_TWO_STREAM:
        return TwoStreamModel(cfg, seed)
    raise InputError(f"unknown variant '{cfg.variant}'")


def forward_one_stream(seqs, model: OneStreamModel, training: bool = False,
                       rng=None) -> Tensor:
    """h_[CLS] rows; accepts one InputSequence or a batch list."""
    if isinstance(seqs, InputSequence):
        seqs = [seqs]
    return model.forward(seqs, training=training, rng=rng)


def forward_two_stream(seqs, model: TwoStreamModel, training: bool = False,
                       rng=None) -> Tensor:
    if isinstance(seqs, InputSequence):
        seqs = [seqs]
    return model.forward(seqs, training=training, rng=rng)


def self_attention(block: TransformerBlock, rows: Tensor, mask) -> Tensor:
    """One self-attention block over a single (L, d) sequence."""
    x = stack([rows])
    blocked = key_padding_blocked(np.asarray(mask)[None, :])
    out = block(x, x, blocked)
    return reshape(out, rows.shape)


def co_attention(block: TransformerBlock, rows_a: Tensor, rows_b: Tensor,
                 mask_b) -> Tensor:
    """Queries from ``rows_a`` attend to keys/values from ``rows_b``."""
    if rows_a.shape[-1] != rows_b.shape[-1]:
        raise DimensionError(
            f"streams disagree on d: {rows_a.shape} vs {rows_b.shape}")
    xa = stack([rows_a])
    xb = stack([rows_b])
    blocked = key_padding_blocked(np.asarray(mask_b)[None, :])
    out = block(xa, xb, blocked)
    return reshape(out, rows_a.shape)
