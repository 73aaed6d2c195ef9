"""``importantaug`` command line: every pipeline stage behind one JSON config.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from . import data, evaluation, spectral, training
from .augment import AugmentPolicy, MASKED_KINDS
from .config import RunConfig, load_config
from .errors import (CheckpointError, DataError, InvalidConfigError, InvalidInputError,
                     InvalidStateError, NumericError)
from .models import Generator, Recognizer
from .seeding import substream

log = logging.getLogger("importantaug")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# --------------------------------------------------------------------- helpers

def _require_dir(value: str | None, field: str) -> Path:
    if not value:
        raise InvalidConfigError(f"{field} is required for this command")
    path = Path(value)
    if not path.is_dir():
        raise InvalidConfigError(f"{field}: directory not found: {path}")
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_split(cfg: RunConfig, need_noise: bool = True) -> data.DatasetSplit:
    """Speech corpus plus the seeded noise train/test split named in ``cfg.data``."""
    speech_root = _require_dir(cfg.data.speech_root, "data.speech_root")
    noise_root = _require_dir(cfg.data.noise_root, "data.noise_root") if need_noise else None
    split = data.load_speech_corpus(speech_root, cfg.data.dev_list, cfg.data.test_list)
    if cfg.n_classes is not None and cfg.n_classes != len(split.words):
        raise InvalidConfigError(
            f"n_classes is {cfg.n_classes} but {speech_root} holds {len(split.words)} words")
    if noise_root is not None:
        split.noise_train, split.noise_test = data.load_noise_corpus(
            noise_root, cfg.data.noise_train_fraction, substream(cfg.seed, "data-split"))
    return split


def _meta(split: data.DatasetSplit, result: training.TrainResult | None = None, **extra) -> dict:
    meta = {"words": list(split.words), "n_classes": len(split.words)}
    if result is not None:
        meta.update(result.meta())
    meta.update(extra)
    return meta


def _check_stft(ckpt: ckpt_io.Checkpoint, cfg: RunConfig, path) -> None:
    stored = ckpt.config.get("stft")
    if stored is not None and stored != cfg.to_dict()["stft"]:
        raise InvalidConfigError(f"{path} was trained with STFT settings {stored}, "
                                 f"the config asks for {cfg.to_dict()['stft']}")


def load_recognizer(path, cfg: RunConfig, words: list[str] | None = None) -> Recognizer:
    ckpt = ckpt_io.load(path, "recognizer")
    _check_stft(ckpt, cfg, path)
    stored_words = ckpt.meta.get("words")
    if words is not None and stored_words is not None and list(stored_words) != list(words):
        raise DataError(f"{path} was trained on words {stored_words}, the corpus has {words}")
    n_classes = int(ckpt.meta.get("n_classes", len(stored_words or [])) or 0)
    if n_classes < 1:
        raise CheckpointError(f"{path} does not record its class count")
    rec = Recognizer(n_freq=cfg.stft.n_freq, n_classes=n_classes)
    return ckpt.load_into(rec)


def load_generator(path, cfg: RunConfig) -> Generator:
    ckpt = ckpt_io.load(path, "generator")
    _check_stft(ckpt, cfg, path)
    return ckpt.load_into(Generator())


def _train_data(split: data.DatasetSplit, cfg: RunConfig) -> training.TrainData:
    if cfg.data.dev_snr_db != math.inf and not split.noise_train:
        raise InvalidConfigError("data.dev_snr_db is finite but no noise corpus is loaded (data.noise_root)")
    return training.TrainData.from_split(split, cfg.stft, cfg.data.dev_snr_db, cfg.seed)


def _policy(cfg: RunConfig, kind: str | None = None) -> AugmentPolicy:
    p = cfg.policy
    return AugmentPolicy(kind or p.kind, p.snr_db, p.max_roll, p.p_null, p.q)


# -------------------------------------------------------------------- commands

def cmd_make_toy(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    toy = data.gen_toy_dataset(cfg.toy.n_classes, cfg.toy.n_per_class,
                               data.ToySpec(n_noise=cfg.toy.n_noise), substream(cfg.seed, "toy"))
    data.write_toy_corpus(toy, out)
    run_cfg = cfg.with_overrides([f"data.speech_root={(out / 'speech').as_posix()}",
                                  f"data.noise_root={(out / 'noise').as_posix()}",
                                  f"output_dir={(out / 'runs').as_posix()}"])
    run_cfg.save(out / "config.json")
    print(f"toy corpus written to {out} (config: {out / 'config.json'})")
    return EXIT_OK


def cmd_train_baseline(cfg: RunConfig, args) -> int:
    split = load_split(cfg, need_noise=cfg.data.dev_snr_db != math.inf)
    td = _train_data(split, cfg)
    out = _out_dir(cfg)
    res = training.train_baseline(td, cfg.optim, cfg.seed, n_classes=len(split.words),
                                  log_path=out / "baseline_log.csv")
    path = Path(args.out) if args.out else out / "baseline.ckpt"
    ckpt_io.save(ckpt_io.from_module("recognizer", res.model, cfg.to_dict(), _meta(split, res)), path)
    print(f"baseline: best epoch {res.best_epoch}, dev loss {res.best_dev_loss:.4f} -> {path}")
    return EXIT_OK


def cmd_train_generator(cfg: RunConfig, args) -> int:
    split = load_split(cfg)
    rec = load_recognizer(args.baseline, cfg, split.words)
    td = _train_data(split, cfg)
    out = _out_dir(cfg)
    res = training.train_generator(rec, td, cfg.loss, cfg.policy.snr_db, cfg.optim, cfg.seed,
                                   log_path=out / "generator_log.csv")
    path = Path(args.out) if args.out else out / "generator.ckpt"
    ckpt_io.save(ckpt_io.from_module("generator", res.model, cfg.to_dict(), _meta(split, res)), path)
    print(f"generator: best epoch {res.best_epoch}, dev loss {res.best_dev_loss:.4f} -> {path}")
    return EXIT_OK


def cmd_train_importantaug(cfg: RunConfig, args) -> int:
    policy = _policy(cfg)
    if policy.kind == "none":
        raise InvalidConfigError("policy.kind 'none' is the baseline; use train-baseline")
    needs_gen = policy.kind in MASKED_KINDS and policy.kind != "null-importantaug"
    if needs_gen and not args.generator:
        raise InvalidConfigError(f"policy.kind {policy.kind!r} needs --generator")
    split = load_split(cfg)
    init = load_recognizer(args.baseline, cfg, split.words)
    gen = load_generator(args.generator, cfg) if needs_gen else None
    td = _train_data(split, cfg)
    out = _out_dir(cfg)
    res = training.train_recognizer(init, td, policy, cfg.optim, cfg.seed, gen,
                                    log_path=out / f"{policy.kind}_log.csv")
    path = Path(args.out) if args.out else out / f"recognizer_{policy.kind}.ckpt"
    ckpt_io.save(ckpt_io.from_module("recognizer", res.model, cfg.to_dict(),
                                     _meta(split, res, policy=policy.kind)), path)
    print(f"{policy.kind}: best epoch {res.best_epoch}, dev loss {res.best_dev_loss:.4f} -> {path}")
    return EXIT_OK


def _test_noise(cfg: RunConfig, split: data.DatasetSplit, source: str) -> list[data.NoiseClip]:
    if source == "indomain":
        return split.noise_test
    if not cfg.data.noise_file:
        raise InvalidConfigError("data.noise_file is required for --noise file")
    if not Path(cfg.data.noise_file).is_file():
        raise InvalidConfigError(f"data.noise_file: file not found: {cfg.data.noise_file}")
    return data.crop_long_noise(cfg.data.noise_file, len(split.test), substream(cfg.seed, "test-noise"))


def _named_checkpoints(items: list[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise InvalidConfigError(f"--checkpoint expects NAME=PATH, got {item!r}")
        out.append((name, path))
    return out


def cmd_evaluate(cfg: RunConfig, args) -> int:
    named = _named_checkpoints(args.checkpoint)
    split = load_split(cfg, need_noise=args.testset == "noisy-grid" and args.noise == "indomain")
    if not split.test:
        raise DataError("the test list selects no utterances")
    if args.testset == "clean":
        sets = {math.inf: data.clean_set(split.test, "clean", cfg.stft)}
    else:
        sets = data.synth_noisy_testset(split.test, _test_noise(cfg, split, args.noise),
                                        cfg.eval.snr_grid, substream(cfg.seed, "test-noise"),
                                        args.noise, cfg.stft)
    results = []
    for name, path in named:
        rec = load_recognizer(path, cfg, split.words)
        results += evaluation.snr_grid_eval(rec, sets, name, cfg.eval.batch_size)
    path = Path(args.out) if args.out else _out_dir(cfg) / f"eval_{args.testset}.csv"
    evaluation.emit_table(results, path)
    for r in results:
        print(f"{r.condition:>24s}  {evaluation.format_snr(r.snr_db):>6s} dB  {r.error_rate:6.2f}%")
    print(f"-> {path}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    split = load_split(cfg)
    init = load_recognizer(args.baseline, cfg, split.words)
    td = _train_data(split, cfg)
    out = _out_dir(cfg)
    log_dir = out / f"sweep_{args.kind}"
    if args.kind == "noiseaug-snr":
        dev_sets = data.synth_noisy_testset(split.dev, split.noise_train, cfg.sweep.dev_snr_grid,
                                            substream(cfg.seed, "dev-noise"), "dev", cfg.stft)
        outcome = evaluation.noiseaug_snr_sweep(init, td, cfg.sweep.noiseaug_snr_grid, dev_sets,
                                                cfg.optim, cfg.seed, log_dir)
        best = evaluation.EvalResult("best", outcome.best.snr_db, outcome.best.error_rate,
                                     outcome.best.n_examples)
    else:
        if not args.generator:
            raise InvalidConfigError("--kind binarize-q needs --generator")
        gen = load_generator(args.generator, cfg)
        outcome = evaluation.binarize_q_sweep(
            gen, init, td, cfg.sweep.q_list, data.clean_set(split.dev, "dev", cfg.stft),
            data.clean_set(split.test, "test", cfg.stft), cfg.optim, cfg.seed,
            cfg.policy.snr_db, cfg.policy.max_roll, log_dir)
        b = outcome.best
        best = evaluation.EvalResult(f"best:{b.condition.split(':')[0]}", b.snr_db, b.error_rate,
                                     b.n_examples)
    rows = outcome.rows + [best]
    path = Path(args.out) if args.out else out / f"sweep_{args.kind}.csv"
    evaluation.emit_table(rows, path)
    for r in rows:
        print(f"{r.condition:>16s}  {evaluation.format_snr(r.snr_db):>6s}  {r.error_rate:6.2f}%")
    print(f"-> {path}")
    return EXIT_OK


def cmd_export_masks(cfg: RunConfig, args) -> int:
    root = _require_dir(cfg.data.speech_root, "data.speech_root")
    gen = load_generator(args.generator, cfg)
    gen.eval()
    out = Path(args.out) if args.out else _out_dir(cfg) / "masks"
    for utt_id in args.ids:
        wav = root / utt_id
        if not wav.is_file():
            raise DataError(f"utterance {utt_id!r} not found under {root}")
        samples = data.pad_to_clip(data.read_wav(wav))
        spec = spectral.stft(torch.as_tensor(samples, dtype=torch.float64), cfg.stft)
        with torch.no_grad():
            feats = spectral.log_magnitude(spec, cfg.stft.amplitude_floor).to(torch.float32)
            mask = gen(feats)
        name = utt_id.replace("/", "__").rsplit(".", 1)[0] + ".png"
        print(evaluation.export_mask_image(mask, out / name))
    return EXIT_OK


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON); defaults are used if omitted")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set optim.max_epochs=30 (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true", help="log every epoch")

    parser = argparse.ArgumentParser(prog="importantaug", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", parents=[common], help="write a synthetic corpus with known cue regions")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train-baseline", parents=[common], help="train the clean recognizer")
    p.add_argument("--out", help="checkpoint path (default: <output_dir>/baseline.ckpt)")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("train-generator", parents=[common], help="stage 1: fit the mask generator")
    p.add_argument("--baseline", required=True, help="baseline recognizer checkpoint")
    p.add_argument("--out", help="checkpoint path (default: <output_dir>/generator.ckpt)")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("train-importantaug", parents=[common],
                       help="stage 2: retrain the recognizer under policy.kind")
    p.add_argument("--baseline", required=True, help="baseline recognizer checkpoint (initialization)")
    p.add_argument("--generator", help="generator checkpoint (mask policies)")
    p.add_argument("--out", help="checkpoint path (default: <output_dir>/recognizer_<kind>.ckpt)")
    p.set_defaults(func=cmd_train_importantaug)

    p = sub.add_parser("evaluate", parents=[common], help="error rates on the clean or noisy test set")
    p.add_argument("--checkpoint", action="append", required=True, metavar="NAME=PATH",
                   help="recognizer to score, labelled NAME in the report (repeatable)")
    p.add_argument("--testset", choices=("clean", "noisy-grid"), default="clean")
    p.add_argument("--noise", choices=("indomain", "file"), default="indomain",
                   help="held-out noise pool, or crops of data.noise_file")
    p.add_argument("--out", help="CSV path (default: <output_dir>/eval_<testset>.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="noise-SNR or binarization-q sweep")
    p.add_argument("--kind", choices=("noiseaug-snr", "binarize-q"), required=True)
    p.add_argument("--baseline", required=True, help="baseline recognizer checkpoint (initialization)")
    p.add_argument("--generator", help="generator checkpoint (binarize-q)")
    p.add_argument("--out", help="CSV path (default: <output_dir>/sweep_<kind>.csv)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-masks", parents=[common], help="write generator masks as PNG images")
    p.add_argument("--generator", required=True, help="generator checkpoint")
    p.add_argument("--ids", nargs="+", required=True, help="utterance ids relative to data.speech_root")
    p.add_argument("--out", help="image directory (default: <output_dir>/masks)")
    p.set_defaults(func=cmd_export_masks)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except InvalidConfigError as exc:
        print(f"importantaug: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"importantaug: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InvalidInputError, InvalidStateError, CheckpointError, OSError) as exc:
        print(f"importantaug: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
