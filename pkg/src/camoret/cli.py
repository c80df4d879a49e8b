"""``camoret`` command line: gen-data, train, eval, ablate, gradcheck."""

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import RunConfig, example_config_text
from .errors import (ConfigError, ConvergenceError, DataError, NonFiniteLossError,
                     NumericError, StructuralError, VocabularyError)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("camoret")


def _load_corpus(data_dir):
    from .retrieval import Corpus
    from .synth import read_shard

    d = Path(data_dir)
    try:
        return Corpus.from_samples(read_shard(d / "train.shard"), read_shard(d / "test.shard"))
    except FileNotFoundError as e:
        raise DataError(f"missing shard: {e.filename}") from e


def _write(path, text):
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def _outdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {path}: {e}") from e
    return Path(path)


def cmd_gen_data(args, cfg):
    from .synth import DEFAULT_GRAMMAR, gen_corpus, write_shard

    d = cfg["data"]
    lo = d["camo_min"] if args.camo_min is None else args.camo_min
    hi = d["camo_max"] if args.camo_max is None else args.camo_max
    seed = d["seed"] if args.seed is None else args.seed
    ntr = d["train_n"] if args.train_n is None else args.train_n
    nte = d["test_n"] if args.test_n is None else args.test_n
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"invalid camouflage range [{lo}, {hi}]")
    if ntr < 1 or nte < 1:
        raise ConfigError("split sizes must be positive")
    out = _outdir(args.out)
    train = gen_corpus(ntr, seed, "train", (lo, hi))
    test = gen_corpus(nte, seed, "test", (lo, hi))
    try:
        write_shard(train, out / "train.shard")
        write_shard(test, out / "test.shard")
        DEFAULT_GRAMMAR.vocabulary().save(out / "vocab.txt")
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}") from e
    for name, split in (("train", train), ("test", test)):
        lams = np.array([s.camo_level for s in split])
        hist, edges = np.histogram(lams, bins=5, range=(0.0, 1.0))
        lens = Counter(len(s.caption_tokens) for s in split)
        print(f"{name}: n={len(split)} mean_lambda={lams.mean():.4f} "
              f"min_lambda={lams.min():.4f} max_lambda={lams.max():.4f}")
        print("  lambda histogram: " + " ".join(
            f"[{a:.1f},{b:.1f}):{c}" for a, b, c in zip(edges[:-1], edges[1:], hist)))
        print("  caption length (tokens): " + " ".join(f"{k}:{v}" for k, v in sorted(lens.items())))
    return 0


def _mask_for(corpus, condition, use_expert):
    from .retrieval import condition_masks

    if not use_expert:
        return None, None
    try:
        return (condition_masks(corpus.train_masks, condition, corpus.train_seeds),
                condition_masks(corpus.test_masks, condition, corpus.test_seeds))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_train(args, cfg):
    from .model import CECNet, prepare_inputs
    from .training import loss_log_csv, save_checkpoint, train

    seed = cfg["seed"] if args.seed is None else args.seed
    mcfg = cfg.model_config()
    corpus = _load_corpus(args.data)
    use_expert = mcfg.fusion != "none"
    tr_masks, _ = _mask_for(corpus, cfg["mask"], use_expert)
    inputs = prepare_inputs(corpus.train_images, corpus.train_tokens, tr_masks,
                            mcfg.encoder.patch_size, use_expert)
    out = _outdir(args.out)
    echo = {"run": cfg.raw, "model": mcfg.to_dict(), "seed": seed}
    model = CECNet(mcfg, seed=seed)
    rows = []

    def on_epoch(ckpt, row):
        rows.append(row)
        save_checkpoint(ckpt, out / "checkpoint.cecn")
        _write(out / "loss.csv", loss_log_csv(rows))

    try:
        result = train(model, inputs, cfg.stages(), seed, on_epoch=on_epoch, config=echo,
                       normalize=cfg["train"]["normalize"])
    except NumericError as e:
        if getattr(e, "checkpoint", None) is not None:
            save_checkpoint(e.checkpoint, out / "checkpoint.cecn")
        print(f"training aborted on a non-finite loss; last good checkpoint kept in {out}",
              file=sys.stderr)
        raise
    save_checkpoint(result.checkpoint, out / "checkpoint.cecn")
    _write(out / "loss.csv", result.log_csv())
    _write(out / "config.json", json.dumps(echo, indent=1, sort_keys=True) + "\n")
    print(f"wrote {out / 'checkpoint.cecn'} and {out / 'loss.csv'}")
    return 0


def cmd_eval(args, cfg):
    from .model import CECNet, ModelConfig, prepare_inputs
    from .retrieval import evaluate
    from .training import load_checkpoint, restore

    ckpt = load_checkpoint(args.ckpt)
    if "model" not in ckpt.config:
        raise StructuralError(f"{args.ckpt}: checkpoint carries no model configuration")
    mcfg = ModelConfig(**ckpt.config["model"])
    run = ckpt.config.get("run", cfg.raw)
    model = CECNet(mcfg, seed=ckpt.seed)
    restore(model, ckpt)
    corpus = _load_corpus(args.data)
    use_expert = mcfg.fusion != "none"
    _, te_masks = _mask_for(corpus, args.mask or run.get("mask", "gt"), use_expert)
    inputs = prepare_inputs(corpus.test_images, corpus.test_tokens, te_masks,
                            mcfg.encoder.patch_size, use_expert)
    V, T = model.embed(inputs)
    report = evaluate(V, T, cfg["eval"]["ks"], config=ckpt.config, seeds=[ckpt.seed])
    text = (f"# checkpoint: {args.ckpt}\n# config: {json.dumps(ckpt.config, sort_keys=True)}\n"
            f"# test samples: {len(inputs)}\n{report.table()}\n")
    print(text, end="")
    if args.out:
        _write(args.out, text)
    return 0


def cmd_ablate(args, cfg):
    from .retrieval import Corpus, report_csv, run_ablation, summary_csv

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    if args.data:
        corpus = _load_corpus(args.data)
    else:
        d = cfg["data"]
        corpus = Corpus.generate(d["train_n"], d["test_n"], d["seed"],
                                 (d["camo_min"], d["camo_max"]))
    rows = run_ablation(args.suite, seeds, corpus, cfg.model_config(), cfg.stages())
    out = _outdir(args.out)
    _write(out / f"{args.suite}.csv", report_csv(rows))
    _write(out / f"{args.suite}_summary.csv", summary_csv(rows))
    _write(out / f"{args.suite}_config.json", cfg.echo() + "\n")
    print(summary_csv(rows), end="")
    return 0


def cmd_gradcheck(args, cfg):
    from .model import ModelConfig
    from .training import full_model_grad_check

    g = cfg["gradcheck"]
    mcfg = ModelConfig(g["encoder"], g["text"], "c2ga", cfg["model"]["aggregate_normalize"])
    res = full_model_grad_check(mcfg, g["batch"], g["eps"], g["seed"], g["jitter"])
    print(f"coordinates checked: {res.coords}")
    print(f"max relative error: {res.max_rel_err:.3e} ({res.worst_param} {res.worst_index})")
    ok = res.max_rel_err < 1e-4
    print("PASS" if ok else "FAIL")
    return 0 if ok else EXIT_NUMERIC


def cmd_show_config(args, cfg):
    print(example_config_text() if args.example else cfg.echo())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="camoret", description=__doc__)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.stage2.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/test shards and the vocabulary")
    g.add_argument("--out", required=True)
    g.add_argument("--train-n", type=int)
    g.add_argument("--test-n", type=int)
    g.add_argument("--camo-min", type=float)
    g.add_argument("--camo-max", type=float)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training; writes checkpoint and loss CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Recall@K on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mask", help="mask condition (default: the one used in training)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every variant of a suite")
    a.add_argument("--suite", required=True, choices=("fusion_variants", "mask_quality", "main"))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--data", help="shard directory (default: generate from the config)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("show-config", help="print the effective or the example config")
    s.add_argument("--example", action="store_true")
    s.set_defaults(func=cmd_show_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        return args.func(args, cfg)
    except (ConfigError, StructuralError, VocabularyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteLossError, ConvergenceError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
