"""Training loops for the detector and the captioner (XE then SCST).

All randomness (batching, dropout, sampling) flows through counter-based
streams keyed by the run seed, so re-running a schedule reproduces losses
bit for bit. SCST keeps the best parameters by corpus reward, evaluated
before the first step, which makes the phase non-regressive by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .captioner import (Captioner, DecodeConfig, decode_greedy, reward_tokens,
                        scst_step, xe_loss)
from .config import InputFlags, TrainConfig
from .data import WorldConfig
from .metrics import ScoreSet, accuracy, auroc, cider_d, compute_idf
from .numerics import (STREAM_BATCH, STREAM_DROPOUT, STREAM_SAMPLER, AdamState,
                       LrSchedule, RngState, Tape, adam_step)
from .text import (BOS_ID, EOS_ID, PAD_ID, ParaphraseConfig, Vocab,
                   paraphrase_augment, wordpiece_tokenize)
from .trn import bce_loss, classify, hateful_probability


@dataclass
class TrainResult:
    log: list
    final_metric: float | None = None


def _batch_indices(n: int, batch_size: int, rng) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=batch_size > n)


def predict_probs(model, vocab: Vocab, samples: list, flags: InputFlags,
                  batch_size: int = 64) -> np.ndarray:
    """Hateful probability per sample, deterministic (no dropout)."""
    probs = np.zeros(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        seqs = model.prepare(chunk, vocab, flags)
        h = model.forward(seqs)
        p = hateful_probability(classify(h, model.head))
        probs[start:start + len(chunk)] = p.data
    return probs


def evaluate_detector(model, vocab: Vocab, samples: list,
                      flags: InputFlags) -> dict:
    probs = predict_probs(model, vocab, samples, flags)
    scores = ScoreSet([s.id for s in samples], probs,
                      np.array([s.label for s in samples]))
    return {"auroc": auroc(scores), "accuracy": accuracy(scores)}


def augment_training_set(samples: list, world: WorldConfig, diversity: int,
                         seed: int) -> list:
    """Original samples plus label-preserving paraphrase variants."""
    cfg = ParaphraseConfig(mode="both", diversity=diversity, seed=seed,
                           synonyms=dict(world.synonyms),
                           protected=frozenset(world.trigger_words))
    out = list(samples)
    for s in samples:
        out.extend(paraphrase_augment(s, cfg).samples)
    return out


def train_detector(model, vocab: Vocab, train_samples: list, tcfg: TrainConfig,
                   flags: InputFlags, dev_samples: list | None = None) -> TrainResult:
    """Fixed-step Adam training on the batch BCE."""
    params = model.named_params()
    state = AdamState(LrSchedule(tcfg.lr, tcfg.lr_end, tcfg.steps))
    batch_stream = RngState(tcfg.seed, STREAM_BATCH)
    drop_stream = RngState(tcfg.seed, STREAM_DROPOUT)
    log = []
    for step in range(tcfg.steps):
        idx = _batch_indices(len(train_samples), tcfg.batch_size,
                             batch_stream.at(step))
        batch = [train_samples[i] for i in idx]
        labels = np.array([s.label for s in batch], dtype=np.float64)
        with Tape() as tape:
            for p in params.values():
                tape.watch(p)
            seqs = model.prepare(batch, vocab, flags)
            h = model.forward(seqs, training=True, rng=drop_stream.at(step))
            loss = bce_loss(hateful_probability(classify(h, model.head)), labels)
        table = tape.backward(loss)
        grads = {k: table.wrt(p) for k, p in params.items()}
        adam_step(state, params, grads)
        row = {"step": step, "loss": loss.item(),
               "lr": state.schedule.at(step)}
        if dev_samples and tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            row["dev_auroc"] = evaluate_detector(model, vocab, dev_samples,
                                                 flags)["auroc"]
        log.append(row)
    final = None
    if dev_samples:
        final = evaluate_detector(model, vocab, dev_samples, flags)["auroc"]
    return TrainResult(log=log, final_metric=final)


# ---------------------------------------------------------------------------
# captioner training
# ---------------------------------------------------------------------------

def tokenize_references(samples: list, vocab: Vocab, max_len: int) -> list:
    """Per-sample reference id lists, truncated to leave room for [EOS]."""
    out = []
    for s in samples:
        refs = [wordpiece_tokenize(r, vocab, max_len - 1).ids + [EOS_ID]
                for r in s.references]
        out.append(refs)
    return out


def token_accuracy(model: Captioner, samples: list, vocab: Vocab) -> float:
    """Teacher-forced argmax accuracy against each sample's first reference."""
    refs = tokenize_references(samples, vocab, model.cfg.decoder_max_len)
    correct, total = 0, 0
    for start in range(0, len(samples), 32):
        chunk = samples[start:start + 32]
        chunk_refs = [r[0] for r in refs[start:start + 32]]
        memory = model.region_memory([s.regions[:model.cfg.n_regions]
                                      for s in chunk])
        T = max(len(r) for r in chunk_refs)
        inputs = np.full((len(chunk), T), PAD_ID, dtype=np.int64)
        targets = np.full((len(chunk), T), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), T), dtype=bool)
        for i, ref in enumerate(chunk_refs):
            inputs[i, :len(ref)] = [BOS_ID] + list(ref[:-1])
            targets[i, :len(ref)] = ref
            mask[i, :len(ref)] = True
        logits = model.decoder.forward_logits(inputs, memory).data
        pred = logits.argmax(axis=-1)
        correct += int(((pred == targets) & mask).sum())
        total += int(mask.sum())
    return correct / total if total else 0.0


def corpus_greedy_cider(model: Captioner, samples: list, vocab: Vocab,
                        decode_cfg: DecodeConfig, idf=None) -> float:
    """Mean reward of greedy captions against the reference corpus."""
    ref_token_lists = [[reward_tokens(r) for r in refs]
                       for refs in tokenize_references(samples, vocab,
                                                       model.cfg.decoder_max_len)]
    if idf is None:
        idf = compute_idf(ref_token_lists)
    scores = []
    for start in range(0, len(samples), 32):
        chunk = samples[start:start + 32]
        decoded = decode_greedy([s.regions[:model.cfg.n_regions] for s in chunk],
                                model, decode_cfg)
        for d, refs in zip(decoded, ref_token_lists[start:start + 32]):
            scores.append(cider_d(reward_tokens(d), refs, idf))
    return float(np.mean(scores))


def train_captioner_xe(model: Captioner, vocab: Vocab, samples: list,
                       tcfg: TrainConfig) -> TrainResult:
    """Teacher-forced phase; one random reference per sample per batch."""
    params = model.named_params()
    total_steps = tcfg.xe_epochs * max(1, len(samples) // tcfg.xe_batch_size)
    state = AdamState(LrSchedule(tcfg.xe_lr, tcfg.xe_lr_end, total_steps))
    refs = tokenize_references(samples, vocab, model.cfg.decoder_max_len)
    batch_stream = RngState(tcfg.seed, STREAM_BATCH)
    drop_stream = RngState(tcfg.seed, STREAM_DROPOUT)
    log = []
    step = 0
    for epoch in range(tcfg.xe_epochs):
        order = batch_stream.at(epoch).permutation(len(samples))
        for start in range(0, len(samples), tcfg.xe_batch_size):
            idx = order[start:start + tcfg.xe_batch_size]
            batch = [samples[i] for i in idx]
            pick = batch_stream.at(10_000_000 + step)
            batch_refs = [refs[i][pick.integers(0, len(refs[i]))] for i in idx]
            regions = [s.regions[:model.cfg.n_regions] for s in batch]
            with Tape() as tape:
                for p in params.values():
                    tape.watch(p)
                loss = xe_loss(regions, batch_refs, model, training=True,
                               rng=drop_stream.at(step))
            table = tape.backward(loss)
            adam_step(state, params, {k: table.wrt(p) for k, p in params.items()})
            log.append({"step": step, "loss": loss.item(),
                        "lr": state.schedule.at(step), "epoch": epoch})
            step += 1
    return TrainResult(log=log, final_metric=token_accuracy(model, samples, vocab))


def train_captioner_scst(model: Captioner, vocab: Vocab, samples: list,
                         tcfg: TrainConfig,
                         decode_cfg: DecodeConfig | None = None) -> TrainResult:
    """Self-critical phase; keeps the best parameters by corpus reward."""
    decode_cfg = decode_cfg or DecodeConfig(max_len=model.cfg.decoder_max_len)
    params = model.named_params()
    state = AdamState(LrSchedule(tcfg.scst_lr))
    ref_token_lists = [[reward_tokens(r) for r in refs]
                       for refs in tokenize_references(samples, vocab,
                                                       model.cfg.decoder_max_len)]
    idf = compute_idf(ref_token_lists)
    batch_stream = RngState(tcfg.seed, STREAM_BATCH)
    sample_stream = RngState(tcfg.seed, STREAM_SAMPLER)

    def snapshot():
        return {k: p.data.copy() for k, p in params.items()}

    best_score = corpus_greedy_cider(model, samples, vocab, decode_cfg, idf)
    best_params = snapshot()
    log = [{"step": -1, "corpus_cider": best_score}]
    for step in range(tcfg.scst_steps):
        idx = _batch_indices(len(samples), tcfg.batch_size,
                             batch_stream.at(20_000_000 + step))
        regions = [samples[i].regions[:model.cfg.n_regions] for i in idx]
        refs = [ref_token_lists[i] for i in idx]
        result = scst_step(regions, refs, model, idf, decode_cfg,
                           sample_stream.at(step))
        adam_step(state, params, result.grads)
        row = {"step": step, "surrogate": result.surrogate,
               "reward_sample": float(result.reward_sample.mean()),
               "reward_greedy": float(result.reward_greedy.mean())}
        if (step + 1) % tcfg.scst_eval_every == 0 or step == tcfg.scst_steps - 1:
            score = corpus_greedy_cider(model, samples, vocab, decode_cfg, idf)
            row["corpus_cider"] = score
            if score > best_score:
                best_score = score
                best_params = snapshot()
        log.append(row)
    for k, p in params.items():
        p.data[...] = best_params[k]
    return TrainResult(log=log, final_metric=best_score)
