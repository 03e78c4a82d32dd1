"""Operator surface: data generation, captioner/detector training, evaluation.

Every command is reproducible from (config, seed): outputs are bit-identical
across re-runs. Each training command writes its resolved config next to its
outputs. Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import __version__
from .captioner import (Captioner, DecodeConfig, caption_dataset,
                        save_caption_cache)
from .config import (InputFlags, ModelConfig, RunConfig, load_run_config,
                     run_config_to_dict, save_run_config, _from_dict)
from .data import (gen_synthetic, load_captions, load_memes, save_memes,
                   save_world)
from .errors import MemefuseError
from .metrics import (ScoreSet, accuracy, auroc, read_predictions,
                      write_predictions)
from .numerics import (config_hash, load_checkpoint, restore_params,
                       save_checkpoint)
from .text import Vocab, build_vocab
from .train import (augment_training_set, evaluate_detector, predict_probs,
                    train_captioner_scst, train_captioner_xe, train_detector)
from .trn import build_model


def _fail(message: str) -> "click.ClickException":
    return click.ClickException(message)


def _load_config(path: str) -> RunConfig:
    try:
        return load_run_config(path)
    except (MemefuseError, OSError) as exc:
        raise _fail(f"cannot load config {path}: {exc}") from exc


def _write_log(rows: list, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _vocab_corpus(world) -> list:
    corpus = [s.text for s in world.train]
    corpus.extend(s.caption for s in world.train if s.caption)
    corpus.extend(r.label for s in world.train for r in s.regions)
    return corpus


def _load_vocab(path: str) -> Vocab:
    try:
        return Vocab.load(path)
    except (MemefuseError, OSError) as exc:
        raise _fail(f"cannot load vocab {path}: {exc}") from exc


def _load_dataset(path: str) -> list:
    try:
        return load_memes(path)
    except (MemefuseError, OSError) as exc:
        raise _fail(f"cannot load dataset {path}: {exc}") from exc


@click.group()
@click.version_option(version=__version__, prog_name="memefuse")
def main():
    """Multimodal meme detection: caption + OCR + region fusion."""


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_gen_data(config_path, out_dir):
    """Generate the synthetic world, vocabulary, and provenance sidecar."""
    cfg = _load_config(config_path)
    out = Path(out_dir)
    try:
        world = gen_synthetic(cfg.world)
        save_world(world, out)
        vocab = build_vocab(_vocab_corpus(world), cfg.vocab_target_size)
        vocab.save(out / "vocab.txt")
        save_run_config(cfg, out / "resolved-config.json")
    except MemefuseError as exc:
        raise _fail(str(exc)) from exc
    click.echo(f"wrote {len(world.train)}/{len(world.dev)}/{len(world.test)} "
               f"train/dev/test samples and a {len(vocab)}-token vocab to {out}")


@main.command("train-captioner")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--scst", is_flag=True, help="Run the self-critical phase after XE.")
def cmd_train_captioner(config_path, data_dir, out_dir, scst):
    """Train the captioner: cross-entropy phase, then optional SCST."""
    cfg = _load_config(config_path)
    data = Path(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = _load_vocab(data / "vocab.txt")
    try:
        caps = load_captions(data / "captions.jsonl")
        train_ids = {s.id for s in load_memes(data / "train.jsonl")}
    except (MemefuseError, OSError) as exc:
        raise _fail(str(exc)) from exc
    caps = [c for c in caps if c.id in train_ids]
    if not caps:
        raise _fail("no caption samples overlap the train split")

    mcfg = ModelConfig(**{**cfg.model.__dict__, "vocab_size": len(vocab)})
    model = Captioner(mcfg, seed=cfg.train.seed)
    xe = train_captioner_xe(model, vocab, caps, cfg.train)
    log = [{"phase": "xe", **row} for row in xe.log]
    metric = {"token_accuracy": xe.final_metric}
    if scst:
        rl = train_captioner_scst(model, vocab, caps, cfg.train)
        log.extend({"phase": "scst", **row} for row in rl.log)
        metric["corpus_cider"] = rl.final_metric
    header = {"kind": "captioner", "config_hash": config_hash(run_config_to_dict(cfg)),
              "model": mcfg.__dict__, "metrics": metric}
    save_checkpoint(out / "captioner.ckpt", model.named_params(), header)
    _write_log(log, out / "log.jsonl")
    save_run_config(cfg, out / "resolved-config.json")
    click.echo(json.dumps(metric, sort_keys=True))


@main.command("caption")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", type=click.Path(exists=True),
              help="Defaults to vocab.txt beside the dataset file.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_caption(model_path, data_path, vocab_path, out_dir):
    """Fill captions for a meme dataset with a trained captioner."""
    data_file = Path(data_path)
    vocab = _load_vocab(vocab_path or data_file.parent / "vocab.txt")
    try:
        header, arrays = load_checkpoint(model_path)
    except (MemefuseError, OSError, KeyError) as exc:
        raise _fail(f"cannot load checkpoint {model_path}: {exc}") from exc
    if header.get("kind") != "captioner":
        raise _fail(f"{model_path} is not a captioner checkpoint")
    mcfg = _from_dict(ModelConfig, header["model"])
    model = Captioner(mcfg, seed=0)
    restore_params(model.named_params(), arrays)

    memes = _load_dataset(data_file)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    captioned, cache, errors = caption_dataset(
        memes, model, vocab, DecodeConfig(max_len=mcfg.decoder_max_len))
    save_memes(captioned, out / f"captioned-{data_file.name}")
    save_caption_cache(cache, out / "caption-cache.jsonl")
    if errors:
        _write_log(errors, out / "caption-errors.jsonl")
    click.echo(f"captioned {len(cache)} of {len(memes)} samples "
               f"({len(errors)} errors)")


def _train_detector_once(cfg: RunConfig, data_dir: Path, flags: InputFlags):
    vocab = _load_vocab(data_dir / "vocab.txt")
    train = _load_dataset(data_dir / "train.jsonl")
    dev_path = data_dir / "dev.jsonl"
    dev = _load_dataset(dev_path) if dev_path.exists() else None
    if flags.use_augmentation:
        train = augment_training_set(train, cfg.world, flags.augment_diversity,
                                     cfg.train.seed)
    mcfg = ModelConfig(**{**cfg.model.__dict__, "vocab_size": len(vocab)})
    model = build_model(mcfg, seed=cfg.train.seed)
    result = train_detector(model, vocab, train, cfg.train, flags, dev_samples=dev)
    return model, vocab, mcfg, result, dev


@main.command("train-detector")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_train_detector(config_path, data_dir, out_dir):
    """Train the meme detector with the configured inputs and variant."""
    cfg = _load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, vocab, mcfg, result, dev = _train_detector_once(
            cfg, Path(data_dir), cfg.flags)
    except MemefuseError as exc:
        raise _fail(str(exc)) from exc
    header = {"kind": "detector", "config_hash": config_hash(run_config_to_dict(cfg)),
              "model": mcfg.__dict__, "flags": cfg.flags.__dict__,
              "dev_auroc": result.final_metric}
    save_checkpoint(out / "detector.ckpt", model.named_params(), header)
    _write_log(result.log, out / "log.jsonl")
    save_run_config(cfg, out / "resolved-config.json")
    click.echo(json.dumps({"dev_auroc": result.final_metric}, sort_keys=True))


@main.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--vocab", "vocab_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_predict(model_path, data_path, vocab_path, out_path):
    """Write challenge-style probabilities for a dataset."""
    data_file = Path(data_path)
    vocab = _load_vocab(vocab_path or data_file.parent / "vocab.txt")
    try:
        header, arrays = load_checkpoint(model_path)
    except (MemefuseError, OSError, KeyError) as exc:
        raise _fail(f"cannot load checkpoint {model_path}: {exc}") from exc
    if header.get("kind") != "detector":
        raise _fail(f"{model_path} is not a detector checkpoint")
    mcfg = _from_dict(ModelConfig, header["model"])
    flags = _from_dict(InputFlags, header["flags"])
    model = build_model(mcfg, seed=0)
    restore_params(model.named_params(), arrays)
    samples = _load_dataset(data_file)
    probs = predict_probs(model, vocab, samples, flags)
    rows = [(s.id, float(p), int(p >= 0.5)) for s, p in zip(samples, probs)]
    write_predictions(out_path, rows)
    click.echo(f"wrote {len(rows)} predictions to {out_path}")


@main.command("eval")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
def cmd_eval(pred_path, gold_path):
    """AUROC and accuracy of a prediction file against gold labels."""
    try:
        preds = read_predictions(pred_path)
        gold = {s.id: s.label for s in load_memes(gold_path)}
        missing = [i for i in preds.ids if i not in gold]
        if missing:
            raise _fail(f"{len(missing)} predicted ids missing from gold "
                        f"(first: {missing[0]})")
        scores = ScoreSet(preds.ids, preds.scores,
                          np.array([gold[i] for i in preds.ids]))
        result = {"auroc": auroc(scores), "accuracy": accuracy(scores)}
    except MemefuseError as exc:
        raise _fail(str(exc)) from exc
    click.echo(json.dumps(result, sort_keys=True))


ABLATION_GRID = [
    {"use_object_labels": False, "use_augmentation": False, "use_caption": False},
    {"use_object_labels": False, "use_augmentation": False, "use_caption": True},
    {"use_object_labels": False, "use_augmentation": True, "use_caption": False},
    {"use_object_labels": False, "use_augmentation": True, "use_caption": True},
    {"use_object_labels": True, "use_augmentation": False, "use_caption": False},
    {"use_object_labels": True, "use_augmentation": False, "use_caption": True},
    {"use_object_labels": True, "use_augmentation": True, "use_caption": False},
    {"use_object_labels": True, "use_augmentation": True, "use_caption": True},
]


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True),
              help="Existing dataset directory; generated from the config when omitted.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_ablate(config_path, data_dir, out_dir):
    """Run the 8-cell input-flag grid for one variant; write a results table."""
    cfg = _load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data_dir is None:
        data_dir = out / "data"
        try:
            world = gen_synthetic(cfg.world)
            save_world(world, data_dir)
            build_vocab(_vocab_corpus(world), cfg.vocab_target_size).save(
                data_dir / "vocab.txt")
        except MemefuseError as exc:
            raise _fail(str(exc)) from exc
    rows = []
    for cell in ABLATION_GRID:
        flags = InputFlags(**{**cfg.flags.__dict__, **cell})
        try:
            model, vocab, _, result, dev = _train_detector_once(
                cfg, Path(data_dir), flags)
        except MemefuseError as exc:
            raise _fail(str(exc)) from exc
        metrics = (evaluate_detector(model, vocab, dev, flags)
                   if dev else {"auroc": float("nan"), "accuracy": float("nan")})
        rows.append({**cell, "dev_auroc": metrics["auroc"],
                     "dev_accuracy": metrics["accuracy"]})
        click.echo(json.dumps(rows[-1], sort_keys=True))
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("object_labels,augmentation,caption,dev_auroc,dev_accuracy\n")
        for r in rows:
            f.write(f"{int(r['use_object_labels'])},{int(r['use_augmentation'])},"
                    f"{int(r['use_caption'])},{r['dev_auroc']:.6f},"
                    f"{r['dev_accuracy']:.6f}\n")
    save_run_config(cfg, out / "resolved-config.json")
    click.echo(f"wrote {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
