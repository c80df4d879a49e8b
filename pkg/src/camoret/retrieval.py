"""Similarity, Recall@K, and the ablation harness."""

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .cod import mask_iou, mask_mae, oracle_masks
from .errors import ConfigError
from .model import CECNet, ModelConfig, prepare_inputs
from .numerics import ShapeError
from .synth import corpus_arrays, gen_corpus
from .training import default_stages, train

log = logging.getLogger(__name__)

KS = (1, 5, 10)
DIRECTIONS = ("i2t", "t2i")
REPORT_FIELDS = ("variant", "seed", "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5",
                 "t2i_r10", "mask_iou", "mask_mae")


def similarity_matrix(V, T):
    """``sim[i, j] = V_i . T_j``; rows are images, columns are captions."""
    V, T = np.asarray(V, dtype=np.float64), np.asarray(T, dtype=np.float64)
    if V.ndim != 2 or V.shape != T.shape:
        raise ShapeError(f"similarity_matrix: V {V.shape} and T {T.shape} must be equal m x d")
    return V @ T.T


def ranks(sim, direction):
    """0-based rank of the matching item for every query.

    An item outranks the match if its score is higher, or equal with a lower
    index, so ties resolve towards lower indices.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {sim.shape}")
    if direction == "t2i":
        sim = sim.T
    elif direction != "i2t":
        raise ValueError(f"direction must be 'i2t' or 't2i', got {direction!r}")
    m = sim.shape[0]
    pos = np.diag(sim)[:, None]
    cols = np.arange(m)
    better = (sim > pos) | ((sim == pos) & (cols[None, :] < cols[:, None]))
    return better.sum(axis=1)


def recall_at_k(sim, K, direction):
    m = np.shape(sim)[0]
    if not 1 <= K <= m:
        raise ValueError(f"K={K} outside [1, {m}]")
    hits = int(np.count_nonzero(ranks(sim, direction) < K))
    return 100.0 * hits / m


@dataclass
class RetrievalReport:
    sim: np.ndarray
    r_at: dict
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def table(self):
        lines = ["direction  " + "  ".join(f"R@{k:<5d}" for k in self.ks)]
        for d in DIRECTIONS:
            lines.append(f"{d:<9s}  " + "  ".join(f"{self.r_at[(d, k)]:6.2f}" for k in self.ks))
        return "\n".join(lines)

    @property
    def ks(self):
        return sorted({k for _, k in self.r_at})


def evaluate(V, T, ks=KS, config=None, seeds=None):
    sim = similarity_matrix(V, T)
    ks = [k for k in ks if k <= sim.shape[0]]
    r_at = {(d, k): recall_at_k(sim, k, d) for d in DIRECTIONS for k in ks}
    return RetrievalReport(sim, r_at, dict(config or {}), list(seeds or []))


# ---------------------------------------------------------------- ablations

# variant -> (fusion, mask condition); "none" fusion ignores masks
VARIANTS = {
    "baseline": ("none", "gt"),
    "B1-add": ("add", "gt"),
    "B2-linear": ("linear", "gt"),
    "B3-graph": ("graph", "gt"),
    "cecnet": ("c2ga", "gt"),
    "cecnet-white": ("c2ga", "white"),
    "cecnet-iou0.6": ("c2ga", "iou:0.6"),
    "cecnet-iou0.8": ("c2ga", "iou:0.8"),
}
SUITES = {
    "fusion_variants": ("baseline", "B1-add", "B2-linear", "B3-graph", "cecnet"),
    "mask_quality": ("cecnet-white", "cecnet-iou0.6", "cecnet-iou0.8", "cecnet"),
    "main": ("baseline", "cecnet-white", "cecnet"),
}


@dataclass
class Corpus:
    """Decoded train/test splits as arrays (see ``synth.corpus_arrays``)."""

    train_images: np.ndarray
    train_masks: np.ndarray
    train_tokens: list
    train_seeds: list
    test_images: np.ndarray
    test_masks: np.ndarray
    test_tokens: list
    test_seeds: list

    @classmethod
    def from_samples(cls, train, test):
        a, b = corpus_arrays(train), corpus_arrays(test)
        return cls(a[0], a[1], a[2], [s.seed for s in train], b[0], b[1], b[2],
                   [s.seed for s in test])

    @classmethod
    def generate(cls, train_n=2000, test_n=500, seed=0, camo_range=(0.6, 1.0)):
        return cls.from_samples(gen_corpus(train_n, seed, "train", camo_range),
                                gen_corpus(test_n, seed, "test", camo_range))


_mask_cache = {}


def condition_masks(gt, condition, seeds):
    """Oracle masks for a condition; degraded masks are memoised per sample seed."""
    if not condition.startswith("iou:"):
        return oracle_masks(gt, condition)
    key = (condition, tuple(seeds))
    if key not in _mask_cache:
        _mask_cache[key] = oracle_masks(gt, condition, seeds)
    return _mask_cache[key]


def run_variant(variant, corpus, seed, model_cfg=None, stages=None):
    """Train one variant from scratch and evaluate it on the test split."""
    fusion, condition = VARIANTS[variant]
    base = model_cfg or ModelConfig()
    cfg = ModelConfig(base.encoder, base.text, fusion, base.aggregate_normalize)
    stages = stages or default_stages()
    P = cfg.encoder.patch_size
    use_expert = fusion != "none"
    tr_masks = condition_masks(corpus.train_masks, condition, corpus.train_seeds)
    te_masks = condition_masks(corpus.test_masks, condition, corpus.test_seeds)
    train_in = prepare_inputs(corpus.train_images, corpus.train_tokens, tr_masks, P, use_expert)
    test_in = prepare_inputs(corpus.test_images, corpus.test_tokens, te_masks, P, use_expert)
    model = CECNet(cfg, seed=seed)
    t0 = time.process_time()
    result = train(model, train_in, stages, seed, config={"model": cfg.to_dict()})
    V, T = model.embed(test_in)
    report = evaluate(V, T, config={"variant": variant, "model": cfg.to_dict()}, seeds=[seed])
    gt = corpus.test_masks
    row = {"variant": variant, "seed": seed}
    row.update({f"{d}_r{k}": report.r_at[(d, k)] for d in DIRECTIONS for k in KS})
    if use_expert:
        row["mask_iou"] = float(np.mean([mask_iou(a, b) for a, b in zip(te_masks, gt)]))
        row["mask_mae"] = float(np.mean([mask_mae(a, b) for a, b in zip(te_masks, gt)]))
    else:
        row["mask_iou"] = row["mask_mae"] = float("nan")
    row["cpu_s"] = time.process_time() - t0
    log.info("%s seed %d: i2t R@1 %.2f (%.0fs cpu)", variant, seed, row["i2t_r1"], row["cpu_s"])
    return row, result


def run_ablation(suite, seeds, corpus, model_cfg=None, stages=None, cache=None):
    """Rows for every (variant, seed) of a suite.

    ``cache`` is an optional dict keyed by ``(variant, seed)``; suites that
    share variants reuse rows from it instead of retraining.
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    rows = []
    for variant in SUITES[suite]:
        for seed in seeds:
            key = (variant, seed)
            if cache is not None and key in cache:
                rows.append(cache[key])
                continue
            row, _ = run_variant(variant, corpus, seed, model_cfg, stages)
            if cache is not None:
                cache[key] = row
            rows.append(row)
    return rows


def _fmt(v):
    return "nan" if v != v else f"{v:.4f}"


def report_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow([r["variant"], r["seed"]] + [_fmt(r[f]) for f in REPORT_FIELDS[2:]])
    return buf.getvalue()


def summarize(rows):
    """Per-variant mean and population std of every metric, in first-seen order."""
    out = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r)
    summary = {}
    for variant, rs in out.items():
        summary[variant] = {f: (float(np.mean([r[f] for r in rs])), float(np.std([r[f] for r in rs])))
                            for f in REPORT_FIELDS[2:]}
    return summary


def summary_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "n_seeds"] + [f"{f}_{s}" for f in REPORT_FIELDS[2:]
                                         for s in ("mean", "std")])
    counts = {}
    for r in rows:
        counts[r["variant"]] = counts.get(r["variant"], 0) + 1
    for variant, stats in summarize(rows).items():
        w.writerow([variant, counts[variant]] + [_fmt(x) for f in REPORT_FIELDS[2:]
                                                 for x in stats[f]])
    return buf.getvalue()
