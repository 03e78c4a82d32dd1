"""Caption generation from region features.

A pooled region encoding plus per-region rows form the cross-attention
memory of a small causal transformer decoder. Training is teacher-forced
cross-entropy first, then self-critical fine-tuning: sample a caption,
decode greedily as the baseline, and weight the sampled sequence's
log-likelihood by the reward difference (rewards never carry gradients).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import MemeSample
from .errors import InputError
from .layers import DecoderBlock, LayerNormParams, Linear, ParamInit, causal_blocked
from .metrics import IdfTable, cider_d
from .numerics import (Tape, Tensor, add, concatenate, cross_entropy_logits,
                       embedding_lookup, mul, reshape, scale, tsum)
from .text import BOS_ID, EOS_ID, PAD_ID, Vocab, detokenize


@dataclass
class DecodeConfig:
    max_len: int = 16
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.max_len < 1:
            raise InputError("decode max_len must be at least 1")
        if self.temperature <= 0.0:
            raise InputError("decode temperature must be positive")


class ImageEncoder:
    """Mean-pooled region encoding, shared projection for per-region rows."""

    def __init__(self, init: ParamInit, cfg: ModelConfig):
        self.d_o = cfg.d_o
        self.proj = Linear(init, cfg.d_o, cfg.d)
        self.ln = LayerNormParams(init, cfg.d, cfg.layer_norm_eps)

    def pooled(self, feats: Tensor) -> Tensor:
        """(B, N, d_o) -> (B, d): mean over regions, project, normalize."""
        mean = scale(tsum(feats, axis=1), 1.0 / feats.shape[1])
        return self.ln(self.proj(mean))

    def memory(self, feats: Tensor) -> Tensor:
        """(B, N, d_o) -> (B, 1+N, d): pooled row first, then region rows."""
        B = feats.shape[0]
        pooled = reshape(self.pooled(feats), (B, 1, -1))
        region_rows = self.ln(self.proj(feats))
        return concatenate([pooled, region_rows], axis=1)

    def params(self, prefix: str = "img_enc") -> dict:
        return {**self.proj.params(f"{prefix}/proj"), **self.ln.params(f"{prefix}/ln")}


class SentenceDecoder:
    """Causal transformer decoder with cross-attention to region memory."""

    def __init__(self, init: ParamInit, cfg: ModelConfig):
        if cfg.vocab_size <= 0:
            raise InputError("vocab_size must be set before building the decoder")
        self.cfg = cfg
        self.word = init.normal(cfg.vocab_size, cfg.d)
        self.position = init.normal(cfg.decoder_max_len, cfg.d)
        self.ln_in = LayerNormParams(init, cfg.d, cfg.layer_norm_eps)
        self.blocks = [DecoderBlock(init, cfg.d, cfg.heads, cfg.dropout,
                                    cfg.layer_norm_eps)
                       for _ in range(cfg.decoder_layers)]
        self.out = Linear(init, cfg.d, cfg.vocab_size)

    def forward_logits(self, token_ids: np.ndarray, memory: Tensor,
                       training: bool = False, rng=None) -> Tensor:
        """(B, T) input ids -> (B, T, V) next-token logits."""
        ids = np.asarray(token_ids, dtype=np.int64)
        B, T = ids.shape
        if T > self.cfg.decoder_max_len:
            raise InputError(
                f"decoder input length {T} exceeds max {self.cfg.decoder_max_len}")
        w = embedding_lookup(self.word, ids)
        p = embedding_lookup(self.position, np.tile(np.arange(T), (B, 1)))
        x = self.ln_in(add(w, p))
        blocked = causal_blocked(T)
        for block in self.blocks:
            x = block(x, memory, blocked, rng=rng, training=training)
        return self.out(x)

    def params(self, prefix: str = "decoder") -> dict:
        out = {f"{prefix}/word": self.word, f"{prefix}/position": self.position}
        out.update(self.ln_in.params(f"{prefix}/ln_in"))
        for i, b in enumerate(self.blocks):
            out.update(b.params(f"{prefix}/block{i}"))
        out.update(self.out.params(f"{prefix}/out"))
        return out


class Captioner:
    """Image encoder plus sentence decoder, trained as one unit."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        init = ParamInit(seed)
        self.encoder = ImageEncoder(init, cfg)
        self.decoder = SentenceDecoder(init, cfg)

    def region_memory(self, regions_batch: list) -> Tensor:
        """Stack per-sample region features into one memory tensor."""
        counts = {len(r) for r in regions_batch}
        if len(counts) != 1 or counts == {0}:
            raise InputError(
                f"batched captioning needs equal nonzero region counts, got {sorted(counts)}")
        feats = np.stack([np.stack([r.feat for r in regions])
                          for regions in regions_batch])
        return self.encoder.memory(Tensor(feats))

    def named_params(self) -> dict:
        return {**self.encoder.params(), **self.decoder.params()}


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _decode(model: Captioner, regions_batch: list, cfg: DecodeConfig,
            rng=None) -> tuple[list, np.ndarray]:
    """Step-wise decoding; greedy when ``rng`` is None, else multinomial.

    Returns per-sample generated ids (with [EOS] when emitted) and the exact
    sum of chosen-token log-probs under the temperature-1 distribution.
    """
    memory = model.region_memory(regions_batch)
    B = len(regions_batch)
    tokens = np.full((B, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    logprobs = np.zeros(B)
    lengths = np.zeros(B, dtype=np.int64)
    for _ in range(cfg.max_len):
        logits = model.decoder.forward_logits(tokens, memory).data
        last = logits[:, -1, :]
        log_p = _log_softmax(last)
        if rng is None:
            chosen = last.argmax(axis=-1)
        else:
            probs = np.exp(_log_softmax(last / cfg.temperature))
            probs /= probs.sum(axis=-1, keepdims=True)
            chosen = np.array([rng.choice(last.shape[-1], p=probs[b])
                               for b in range(B)])
        chosen = np.where(done, EOS_ID, chosen)
        logprobs += np.where(done, 0.0, log_p[np.arange(B), chosen])
        lengths += (~done).astype(np.int64)
        done |= chosen == EOS_ID
        tokens = np.concatenate([tokens, chosen[:, None]], axis=1)
        if done.all():
            break
    out = [tokens[b, 1:1 + lengths[b]].tolist() for b in range(B)]
    return out, logprobs


def decode_greedy(regions_batch: list, model: Captioner,
                  cfg: DecodeConfig) -> list:
    """Argmax decoding until [EOS] or the length cap; deterministic."""
    tokens, _ = _decode(model, regions_batch, cfg, rng=None)
    return tokens


def sample_caption(regions_batch: list, model: Captioner, cfg: DecodeConfig,
                   rng) -> tuple[list, np.ndarray]:
    """Multinomial decoding; returns sequences and their exact log-probs."""
    return _decode(model, regions_batch, cfg, rng=rng)


def strip_eos(tokens: list) -> list:
    return [t for t in tokens if t != EOS_ID]


def reward_tokens(ids: list) -> list:
    """Token-id strings; the reward metric only needs a consistent alphabet."""
    return [str(t) for t in strip_eos(ids)]


def sequence_logprob(model: Captioner, regions_batch: list,
                     sequences: list) -> np.ndarray:
    """Teacher-forced re-scoring: sum of log p(token | prefix, image)."""
    memory = model.region_memory(regions_batch)
    T = max(len(s) for s in sequences)
    B = len(sequences)
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, seq in enumerate(sequences):
        inputs[i, :len(seq)] = [BOS_ID] + list(seq[:-1])
        targets[i, :len(seq)] = seq
        mask[i, :len(seq)] = 1.0
    logits = model.decoder.forward_logits(inputs, memory).data
    log_p = _log_softmax(logits)
    picked = np.take_along_axis(log_p, targets[..., None], axis=-1)[..., 0]
    return (picked * mask).sum(axis=-1)


def xe_loss(regions_batch: list, references: list, model: Captioner,
            training: bool = False, rng=None) -> Tensor:
    """Teacher-forced NLL, summed per caption, averaged over the batch.

    Each reference must be a token-id list ending with [EOS].
    """
    B = len(references)
    for ref in references:
        if not ref or ref[-1] != EOS_ID:
            raise InputError("each reference must be nonempty and end with [EOS]")
        if len(ref) > model.cfg.decoder_max_len:
            raise InputError(
                f"reference length {len(ref)} exceeds decoder max "
                f"{model.cfg.decoder_max_len}")
    memory = model.region_memory(regions_batch)
    T = max(len(r) for r in references)
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, ref in enumerate(references):
        inputs[i, :len(ref)] = [BOS_ID] + list(ref[:-1])
        targets[i, :len(ref)] = ref
        mask[i, :len(ref)] = 1.0
    logits = model.decoder.forward_logits(inputs, memory, training=training, rng=rng)
    nll = cross_entropy_logits(logits, targets)
    return scale(tsum(mul(nll, Tensor(mask))), 1.0 / B)


@dataclass
class ScstResult:
    surrogate: float
    reward_sample: np.ndarray
    reward_greedy: np.ndarray
    grads: dict


def scst_step(regions_batch: list, references_tokens: list, model: Captioner,
              idf: IdfTable, decode_cfg: DecodeConfig, rng) -> ScstResult:
    """One self-critical step: sampled caption against the greedy baseline.

    ``references_tokens`` holds, per sample, reference token lists in the
    same string alphabet as ``reward_tokens``. The advantage (sampled minus
    greedy reward) is treated as a constant, so a zero advantage produces
    exactly zero gradients.
    """
    greedy = decode_greedy(regions_batch, model, decode_cfg)
    sampled, _ = sample_caption(regions_batch, model, decode_cfg, rng)
    r_sample = np.array([cider_d(reward_tokens(s), refs, idf)
                         for s, refs in zip(sampled, references_tokens)])
    r_greedy = np.array([cider_d(reward_tokens(g), refs, idf)
                         for g, refs in zip(greedy, references_tokens)])
    advantage = r_sample - r_greedy

    params = model.named_params()
    with Tape() as tape:
        for p in params.values():
            tape.watch(p)
        memory = model.region_memory(regions_batch)
        B = len(sampled)
        T = max(len(s) for s in sampled)
        inputs = np.full((B, T), PAD_ID, dtype=np.int64)
        targets = np.full((B, T), PAD_ID, dtype=np.int64)
        mask = np.zeros((B, T))
        for i, seq in enumerate(sampled):
            inputs[i, :len(seq)] = [BOS_ID] + list(seq[:-1])
            targets[i, :len(seq)] = seq
            mask[i, :len(seq)] = 1.0
        logits = model.decoder.forward_logits(inputs, memory)
        nll = cross_entropy_logits(logits, targets)
        seq_logp = scale(tsum(mul(nll, Tensor(mask)), axis=1), -1.0)
        surrogate = scale(tsum(mul(seq_logp, Tensor(-advantage))), 1.0 / B)
    table = tape.backward(surrogate)
    grads = {k: table.wrt(p) for k, p in params.items()}
    return ScstResult(surrogate=surrogate.item(), reward_sample=r_sample,
                      reward_greedy=r_greedy, grads=grads)


# ---------------------------------------------------------------------------
# dataset captioning and the caption cache file
# ---------------------------------------------------------------------------

def caption_dataset(memes: list, model: Captioner, vocab: Vocab,
                    decode_cfg: DecodeConfig) -> tuple[list, list, list]:
    """Greedy-caption every meme; returns (memes, cache rows, error records).

    Samples without region features keep an empty caption and get an error
    record instead of failing the whole run.
    """
    groups: dict[int, list[int]] = {}
    errors = []
    for i, m in enumerate(memes):
        n = min(len(m.regions), model.cfg.n_regions)
        if n == 0:
            errors.append({"id": m.id, "error": "no region features"})
        else:
            groups.setdefault(n, []).append(i)

    captions: dict[int, str] = {}
    logps: dict[int, float] = {}
    for n, idxs in sorted(groups.items()):
        regions = [memes[i].regions[:n] for i in idxs]
        toks, _ = _decode(model, regions, decode_cfg, rng=None)
        scored = sequence_logprob(model, regions,
                                  [t if t else [EOS_ID] for t in toks])
        for j, i in enumerate(idxs):
            captions[i] = detokenize(strip_eos(toks[j]), vocab)
            logps[i] = float(scored[j])

    captioned, cache_rows = [], []
    for i, m in enumerate(memes):
        caption = captions.get(i)
        captioned.append(MemeSample(id=m.id, text=m.text, label=m.label,
                                    regions=m.regions, caption=caption))
        if caption is not None:
            cache_rows.append({"id": m.id, "caption": caption, "log_prob": logps[i]})
    return captioned, cache_rows, errors


def save_caption_cache(rows: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_caption_cache(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
