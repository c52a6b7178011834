"""Command-line entry point: synth, train, embed, eval, cfr.

Runs are driven by a JSON configuration (named encoder preset plus
overrides) merged with command-line flags; flags win. Every command
writes its outputs under one directory together with a ``files.json``
manifest of what was produced. Exit codes: 0 success, 1 runtime or data
failure, 2 usage/configuration error. Set ``YVEC_STRICT_DETERMINISM=1``
for single-lane bit-exact runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import aggregator, analysis, audio, evaluator, trainer
from . import encoder as enc
from .encoder import ConfigError
from .model import SpeakerNet

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_DEFAULT_CONFIG = {
    "seed": 0,
    "preset": "yvector-5",
    "encoder": {"width_scale": 1.0, "dropout_rate": 0.1},
    "tdnn": {"width_scale": 1.0},
    "train": {
        "lr0": 0.01,
        "momentum": 0.9,
        "decay_factor": 0.5,
        "decay_every_epochs": 60,
        "epochs": 300,
        "batch_size": 96,
        "crop_seconds": 3.9,
        "utterances_per_epoch": 240000,
        "l2_lambda": 1e-4,
        "am_scale": 30.0,
        "am_margin": 0.35,
        "save_every_epochs": 0,
    },
    "paths": {"corpus": None, "trials": None, "checkpoint": None, "out_dir": None},
}


def _reject_unknown(section: dict, allowed: dict, context: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {context}")


def load_run_config(path: Optional[str], overrides: dict) -> dict:
    """Defaults <- config file <- flag overrides; unknown keys are errors."""
    cfg = json.loads(json.dumps(_DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        _reject_unknown(data, cfg, "top level")
        for section in ("encoder", "tdnn", "train", "paths"):
            if section in data:
                _reject_unknown(data[section], cfg[section], f"section {section!r}")
                cfg[section].update(data[section])
        for key in ("seed", "preset"):
            if key in data:
                cfg[key] = data[key]
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if key:
            cfg[section][key] = value
        else:
            cfg[dotted] = value
    enc.get_preset(cfg["preset"])  # fail early on unknown presets
    return cfg


def config_snapshot(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=1)


def build_model(cfg: dict, n_classes: int) -> SpeakerNet:
    enc_cfg = enc.get_preset(cfg["preset"])
    if cfg["encoder"]["width_scale"] != 1.0:
        enc_cfg = enc.scale_widths(enc_cfg, cfg["encoder"]["width_scale"])
    enc_cfg = dataclasses.replace(enc_cfg, dropout_rate=cfg["encoder"]["dropout_rate"])
    tdnn_cfg = aggregator.TdnnConfig(n_classes=n_classes)
    if cfg["tdnn"]["width_scale"] != 1.0:
        tdnn_cfg = tdnn_cfg.scaled(cfg["tdnn"]["width_scale"])
    tdnn_cfg = dataclasses.replace(tdnn_cfg, n_classes=n_classes)
    return SpeakerNet(enc_cfg, tdnn_cfg, seed=cfg["seed"])


def train_config_of(cfg: dict) -> trainer.TrainConfig:
    t = dict(cfg["train"])
    t.pop("save_every_epochs")
    return trainer.TrainConfig(seed=cfg["seed"], **t)


def _write_run_manifest(out_dir: Path, files: list[str]) -> None:
    (out_dir / "files.json").write_text(json.dumps(sorted(files), indent=1) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest = audio.synth_corpus_generate(out, n_speakers=args.speakers,
                                           utts_per_speaker=args.utts,
                                           duration_s=args.seconds, seed=args.seed)
    trials = audio.make_trial_list(manifest, args.trials, seed=args.seed)
    audio.write_trial_list(out / "trials.txt", trials)
    files = [r.path for r in manifest.records] + ["manifest.json", "trials.txt"]
    _write_run_manifest(out, files)
    print(f"synth: {len(manifest.records)} utterances from {args.speakers} speakers, "
          f"{len(trials)} trials -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, {
        "seed": args.seed, "preset": args.preset,
        "encoder.width_scale": args.width_scale,
        "tdnn.width_scale": args.width_scale,
        "encoder.dropout_rate": args.dropout_rate,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.crop_seconds": args.crop_seconds,
        "train.utterances_per_epoch": args.utts_per_epoch,
        "train.lr0": args.lr0,
        "train.save_every_epochs": args.save_every,
        "paths.corpus": args.corpus,
        "paths.out_dir": args.out,
    })
    corpus_path = cfg["paths"]["corpus"]
    out_dir = cfg["paths"]["out_dir"]
    if corpus_path is None or out_dir is None:
        raise ConfigError("train needs a corpus manifest and an output directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = audio.CorpusManifest.load(corpus_path)
    corpus = audio.load_corpus(manifest)
    snapshot = config_snapshot(cfg)
    tcfg = train_config_of(cfg)

    start_epoch = 0
    velocities = None
    if args.resume:
        ckpt = trainer.checkpoint_load(args.resume)
        net = ckpt.build_model()
        velocities = dict(ckpt.velocities)
        start_epoch = ckpt.epoch
        snapshot = ckpt.config_snapshot or snapshot
    else:
        net = build_model(cfg, corpus.n_classes)

    ckpt_path = cfg["paths"]["checkpoint"] or str(out / "checkpoint.yvec")
    log_path = out / "train_log.jsonl"
    with open(log_path, "a" if args.resume else "w") as log_fh:
        def log_fn(record):
            log_fh.write(json.dumps(record) + "\n")

        metrics = trainer.train_run(
            net, corpus, tcfg, start_epoch=start_epoch, velocities=velocities,
            ckpt_path=ckpt_path, save_every=cfg["train"]["save_every_epochs"],
            config_snapshot=snapshot, log_fn=log_fn)
    _write_run_manifest(out, [Path(ckpt_path).name, log_path.name])
    for m in metrics:
        print(f"epoch {m.epoch}: loss {m.mean_loss:.4f} acc {m.accuracy:.3f}")
    print(f"train: checkpoint -> {ckpt_path}")
    return EXIT_OK


def _embed_corpus(net: SpeakerNet, manifest: audio.CorpusManifest,
                  crop_samples: int, batch_size: int) -> list[aggregator.SpeakerEmbedding]:
    embeddings = []
    records = manifest.records
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        waves = []
        for r in chunk:
            u = audio.normalize_by_max(audio.read_wav_pcm16(manifest.root / r.path))
            waves.append(audio.center_crop(u.samples, crop_samples))
        vectors = net.embed_batch(np.stack(waves))
        embeddings.extend(
            aggregator.SpeakerEmbedding(vector=v, utterance_id=r.utterance_id)
            for v, r in zip(vectors, chunk))
    return embeddings


def cmd_embed(args) -> int:
    ckpt = trainer.checkpoint_load(args.checkpoint)
    net = ckpt.build_model()
    manifest = audio.CorpusManifest.load(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    embeddings = _embed_corpus(net, manifest, args.crop_samples, args.batch_size)
    aggregator.embeddings_to_binary(out / "embeddings.bin", embeddings)
    aggregator.embeddings_to_csv(out / "embeddings.csv", embeddings)
    _write_run_manifest(out, ["embeddings.bin", "embeddings.csv"])
    print(f"embed: {len(embeddings)} embeddings of dimension "
          f"{embeddings[0].vector.size} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    embeddings = {e.utterance_id: e for e in aggregator.read_embeddings_csv(args.embeddings)}
    trials = audio.parse_trial_list(args.trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = evaluator.score_trials(trials, embeddings)
    report = evaluator.evaluation_report(scores, evaluator.DcfConfig(),
                                         n_resamples=args.resamples,
                                         confidence=args.confidence, seed=args.seed)
    evaluator.save_report(out / "report.json", report)
    evaluator.save_score_csv(out / "scores.csv", trials, scores)
    evaluator.save_roc_csv(out / "roc.csv", scores)
    _write_run_manifest(out, ["report.json", "scores.csv", "roc.csv"])
    print(f"eval: eer {report['eer']:.4f} (ci {report['ci_low']:.4f}"
          f"..{report['ci_high']:.4f}) min_dcf {report['min_dcf']:.4f} -> {out}")
    return EXIT_OK


def cmd_cfr(args) -> int:
    ckpt = trainer.checkpoint_load(args.checkpoint)
    if args.preset is not None:
        stored = json.loads(ckpt.config_snapshot or "{}").get("preset")
        if stored is not None and stored != args.preset:
            raise ValueError(f"checkpoint was trained with preset {stored!r}, "
                             f"not {args.preset!r}")
    net = ckpt.build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = analysis.encoder_cfrs(net.enc_cfg, net.enc_params)
    analysis.save_cfr_csv(out / "cfr.csv", results)
    report = analysis.flatness_report(results, args.band_lo, args.band_hi)
    analysis.save_flatness_json(out / "flatness.json", report)
    _write_run_manifest(out, ["cfr.csv", "flatness.json"])
    for source, stats in report.items():
        print(f"cfr[{source}]: peak-mean {stats['peak_minus_mean_db']:.2f} dB, "
              f"stddev {stats['stddev_db']:.2f} dB, argmax {stats['argmax_hz']:.0f} Hz")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yvec",
        description="Multi-scale raw-waveform speaker embeddings: synthesize a "
                    "corpus, train, embed, evaluate, and analyze learned filters.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic speaker corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a speaker classifier")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--corpus", help="corpus manifest JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=enc.PRESET_NAMES)
    p.add_argument("--width-scale", type=float, dest="width_scale")
    p.add_argument("--dropout-rate", type=float, dest="dropout_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--crop-seconds", type=float, dest="crop_seconds")
    p.add_argument("--utts-per-epoch", type=int, dest="utts_per_epoch")
    p.add_argument("--lr0", type=float)
    p.add_argument("--save-every", type=int, dest="save_every")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract one embedding per utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop-samples", type=int, default=audio.DEFAULT_CROP_SAMPLES,
                   dest="crop_samples")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score a trial list and report EER/minDCF")
    p.add_argument("--embeddings", required=True, help="embeddings.csv from embed")
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cfr", help="cumulative frequency response of learned filters")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--band-lo", type=float, default=0.0, dest="band_lo")
    p.add_argument("--band-hi", type=float, default=8000.0, dest="band_hi")
    p.add_argument("--preset", help="assert the checkpoint's preset")
    p.set_defaults(func=cmd_cfr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.speakers < 2:
        parser.error("--speakers must be >= 2 to form nontarget trials")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"yvec {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"yvec {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
