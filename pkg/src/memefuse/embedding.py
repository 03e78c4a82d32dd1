"""Input embeddings and joint-sequence assembly.

Text rows are LN(word + segment + position); visual rows are
LN(W_f v + b_f + W_p box + b_p). The assembled layout is always
[CLS], OCR, [SEP], caption, [SEP], object-label words, [SEP], visual
slots, pads -- with segments toggled by input flags. Positions restart at 0
inside each textual segment; visual slots carry position 0 because their
geometry enters through the box projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import InputFlags, ModelConfig
from .errors import DimensionError, InputError
from .layers import Linear, LayerNormParams, ParamInit
from .numerics import Tensor, add, concatenate, embedding_lookup
from .text import CLS_ID, SEP_ID, TokenizedText

SEG_OCR, SEG_CAPTION, SEG_LABELS = 0, 1, 2
NO_SEGMENT = -1

TAG_SPECIAL = "special"
TAG_OCR = "ocr"
TAG_CAPTION = "caption"
TAG_OBJLABEL = "objlabel"
TAG_VISUAL = "visual"
TAG_PAD = "pad"


class TextEmbedder:
    """Shared word/segment/position tables with a layer norm on the sum."""

    def __init__(self, init: ParamInit, cfg: ModelConfig):
        if cfg.vocab_size <= 0:
            raise InputError("vocab_size must be set before building embedders")
        self.word = init.normal(cfg.vocab_size, cfg.d)
        self.segment = init.normal(3, cfg.d)
        self.position = init.normal(cfg.max_positions, cfg.d)
        self.ln = LayerNormParams(init, cfg.d, cfg.layer_norm_eps)

    def embed(self, token_ids, segment_ids, position_ids) -> Tensor:
        w = embedding_lookup(self.word, token_ids)
        s = embedding_lookup(self.segment, segment_ids)
        p = embedding_lookup(self.position, position_ids)
        return self.ln(add(add(w, s), p))

    def params(self, prefix: str = "text_emb") -> dict:
        return {f"{prefix}/word": self.word, f"{prefix}/segment": self.segment,
                f"{prefix}/position": self.position, **self.ln.params(f"{prefix}/ln")}


class VisualEmbedder:
    """Region feature and box projections summed under a layer norm."""

    def __init__(self, init: ParamInit, cfg: ModelConfig):
        self.d_o = cfg.d_o
        self.feat_proj = Linear(init, cfg.d_o, cfg.d)
        self.box_proj = Linear(init, 4, cfg.d)
        self.ln = LayerNormParams(init, cfg.d, cfg.layer_norm_eps)

    def embed(self, regions: list) -> Tensor:
        """Rows for a list of regions, in input order."""
        feats = np.stack([r.feat for r in regions]) if regions else np.zeros((0, self.d_o))
        boxes = np.stack([r.box for r in regions]) if regions else np.zeros((0, 4))
        if feats.shape[1] != self.d_o:
            raise DimensionError(
                f"region features have length {feats.shape[1]}, expected {self.d_o}")
        return self.ln(add(self.feat_proj(Tensor(feats)), self.box_proj(Tensor(boxes))))

    def params(self, prefix: str = "vis_emb") -> dict:
        return {**self.feat_proj.params(f"{prefix}/feat"),
                **self.box_proj.params(f"{prefix}/box"),
                **self.ln.params(f"{prefix}/ln")}


@dataclass
class InputSequence:
    """The assembled joint sequence for one sample."""

    rows: Tensor                # (L, d) embedded rows
    segment_ids: np.ndarray     # -1 where no text segment applies
    position_ids: np.ndarray
    modality: list              # one tag per row
    mask: np.ndarray            # 1 = real slot, 0 = pad
    cls_index: int
    n_text: int                 # leading textual rows (incl. [CLS] and [SEP]s)
    n_visual: int


def _fit_layout(segments: list[tuple[str, list, int]], n_visual: int,
                cap: int) -> tuple[list, int]:
    """Truncate to the model cap: visual slots go first, then textual tails.

    Specials ([CLS]/[SEP]) are never dropped; textual segments keep their
    earliest tokens, with the last segment trimmed first.
    """
    def total(segs, nv):
        return 1 + sum(len(toks) + 1 for _, toks, _ in segs) + nv

    overflow = total(segments, n_visual) - cap
    if overflow > 0:
        drop = min(overflow, n_visual)
        n_visual -= drop
        overflow -= drop
    if overflow > 0:
        for i in range(len(segments) - 1, -1, -1):
            tag, toks, seg_id = segments[i]
            drop = min(overflow, len(toks))
            if drop:
                segments[i] = (tag, toks[:len(toks) - drop], seg_id)
                overflow -= drop
            if overflow == 0:
                break
    if overflow > 0:
        raise InputError(
            f"sequence cap {cap} cannot hold the specials of {len(segments)} segments")
    return segments, n_visual


class SequenceAssembler:
    """Pure function from tokenized inputs and flags to an InputSequence."""

    def __init__(self, text_embedder: TextEmbedder, visual_embedder: VisualEmbedder,
                 cfg: ModelConfig):
        self.text_embedder = text_embedder
        self.visual_embedder = visual_embedder
        self.cfg = cfg

    def assemble(self, ocr: TokenizedText | None, caption: TokenizedText | None,
                 labels: TokenizedText | None, regions: list, flags: InputFlags,
                 pad_to: int | None = None) -> InputSequence:
        segments = []
        if flags.use_ocr and ocr is not None:
            segments.append((TAG_OCR, list(ocr.ids), SEG_OCR))
        if flags.use_caption and caption is not None:
            segments.append((TAG_CAPTION, list(caption.ids), SEG_CAPTION))
        if flags.use_object_labels and labels is not None:
            segments.append((TAG_OBJLABEL, list(labels.ids), SEG_LABELS))

        regions = list(regions[:self.cfg.n_regions]) if flags.use_regions else []
        segments, n_visual = _fit_layout(segments, len(regions), self.cfg.max_seq_len)
        regions = regions[:n_visual]

        token_ids = [CLS_ID]
        segment_ids = [SEG_OCR]          # [CLS] rides the first segment table row
        position_ids = [0]
        modality = [TAG_SPECIAL]
        for tag, toks, seg_id in segments:
            token_ids.extend(toks)
            segment_ids.extend([seg_id] * len(toks))
            position_ids.extend(range(len(toks)))
            modality.extend([tag] * len(toks))
            token_ids.append(SEP_ID)
            segment_ids.append(seg_id)
            position_ids.append(len(toks))
            modality.append(TAG_SPECIAL)

        text_rows = self.text_embedder.embed(token_ids, segment_ids, position_ids)
        parts = [text_rows]
        if regions:
            parts.append(self.visual_embedder.embed(regions))
        n_text = len(token_ids)
        length = n_text + len(regions)

        seg_arr = np.array(segment_ids + [NO_SEGMENT] * len(regions), dtype=np.int64)
        pos_arr = np.array(position_ids + [0] * len(regions), dtype=np.int64)
        modality = modality + [TAG_VISUAL] * len(regions)
        mask = np.ones(length, dtype=np.float64)

        if pad_to is not None and pad_to > length:
            pad = pad_to - length
            parts.append(Tensor(np.zeros((pad, self.cfg.d))))
            seg_arr = np.concatenate([seg_arr, np.full(pad, NO_SEGMENT, dtype=np.int64)])
            pos_arr = np.concatenate([pos_arr, np.zeros(pad, dtype=np.int64)])
            modality = modality + [TAG_PAD] * pad
            mask = np.concatenate([mask, np.zeros(pad)])

        rows = concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
        return InputSequence(rows=rows, segment_ids=seg_arr, position_ids=pos_arr,
                             modality=modality, mask=mask, cls_index=0,
                             n_text=n_text, n_visual=len(regions))
