"""Persistent runner for the reference experiments.

Rows are stored in a JSON file together with the canonical configuration and
a fingerprint of the modules that compute them; a file written under a
different configuration or code is ignored, so stale results are never mixed
in.
"""

import hashlib
import json
import logging
from pathlib import Path

from .config import RunConfig
from .retrieval import SUITES, Corpus, run_variant

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)


# modules whose code determines the numbers in a row
RESULT_MODULES = ("numerics/tensor.py", "numerics/_kernels_py.py", "numerics/_kernels_c.pyx",
                  "numerics/rng.py", "params.py", "layers.py", "vit.py", "c2ga.py", "text.py",
                  "model.py", "training.py", "retrieval.py", "cod.py", "noise.py", "synth.py")


def code_fingerprint():
    root = Path(__file__).parent
    h = hashlib.sha256()
    for name in RESULT_MODULES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()


def reference_key(cfg):
    return {"model": cfg["model"], "train": cfg["train"], "data": cfg["data"],
            "code": code_fingerprint()}


def load_rows(path, key):
    path = Path(path)
    if not path.exists():
        return {}
    doc = json.loads(path.read_text())
    if doc.get("config") != key:
        log.warning("%s was written under another configuration; ignoring it", path)
        return {}
    return {(r["variant"], r["seed"]): r for r in doc["rows"]}


def save_rows(path, key, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = [rows[k] for k in sorted(rows, key=lambda k: (k[1], k[0]))]
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"config": key, "rows": ordered}, indent=1, sort_keys=True))
    tmp.replace(path)


def reference_rows(path, suites=("main", "mask_quality", "fusion_variants"), seeds=SEEDS,
                   cfg=None):
    """All rows needed by ``suites``, computing and persisting missing ones."""
    cfg = cfg or RunConfig.load()
    key = reference_key(cfg.raw)
    rows = load_rows(path, key)
    variants = []
    for s in suites:
        variants += [v for v in SUITES[s] if v not in variants]
    todo = [(v, s) for s in seeds for v in variants if (v, s) not in rows]
    if todo:
        d = cfg["data"]
        corpus = Corpus.generate(d["train_n"], d["test_n"], d["seed"],
                                 (d["camo_min"], d["camo_max"]))
        for v, s in todo:
            row, _ = run_variant(v, corpus, s, cfg.model_config(), cfg.stages())
            rows[(v, s)] = row
            save_rows(path, key, rows)
    return rows
