"""Bidirectional InfoNCE, Adam, the two-stage schedule and checkpoints."""

import csv
import io
import json
import logging
import math
import struct
import warnings
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import (BadMagicError, ChecksumError, ConfigError, NameCollisionError,
                     NumericError, StructuralError, TruncatedError, VersionMismatchError)
from .numerics import Stream

log = logging.getLogger(__name__)

TEMPERATURE = 0.05


@dataclass
class InfoNCE:
    loss: nx.Tensor
    t2i: nx.Tensor
    i2t: nx.Tensor


def info_nce(V, T, tau=TEMPERATURE, normalize=True):
    """``L_T2I + L_I2T`` for row-aligned image/text features.

    With ``normalize`` the rows are unit-normalised first, so the logits are
    cosine similarities over ``tau``. Each direction is a batch mean.
    """
    if V.shape != T.shape or V.ndim != 2:
        raise nx.ShapeError(f"info_nce: V {V.shape} and T {T.shape} must be equal n x d")
    n = V.shape[0]
    if n < 2:
        warnings.warn("InfoNCE with a single pair is identically zero", RuntimeWarning,
                      stacklevel=2)
    if normalize:
        V, T = nx.l2_normalize(V), nx.l2_normalize(T)
    logits = nx.scale(nx.matmul(T, V.transpose()), 1.0 / tau)  # row i: text i vs images
    diag = (np.arange(n), np.arange(n))
    t2i = nx.scale(nx.log_softmax(logits)[diag].sum(), -1.0 / n)
    i2t = nx.scale(nx.log_softmax(logits.transpose())[diag].sum(), -1.0 / n)
    loss = nx.add(t2i, i2t)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"InfoNCE is non-finite (t2i={t2i.item()}, i2t={i2t.item()})")
    return InfoNCE(loss, t2i, i2t)


class Adam:
    """Adam with bias correction; only tensors with ``requires_grad`` move."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p in params:
            if not p.requires_grad or p.grad is None:
                continue
            key = p.name or id(p)
            g = p.grad
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state, lr):
    """Functional wrapper: ``state`` is an :class:`Adam` (created if None)."""
    state = state if state is not None else Adam(lr)
    state.lr = lr
    state.step(params)
    return state


@dataclass
class StageConfig:
    stage: int
    groups: tuple
    lr: float
    epochs: int
    batch_size: int = 32
    tau: float = TEMPERATURE

    def __post_init__(self):
        self.groups = tuple(self.groups)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.tau != TEMPERATURE:
            raise ConfigError(f"temperature is fixed at {TEMPERATURE}")
        if self.batch_size < 2 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError(f"invalid stage settings: {asdict(self)}")


ALL_GROUPS = ("vit", "fusion", "head", "text")


def default_stages(stage1_epochs=10, stage2_epochs=30, stage1_lr=1e-3, stage2_lr=5e-4,
                   batch_size=32):
    return [
        StageConfig(1, ("fusion",), stage1_lr, stage1_epochs, batch_size),
        StageConfig(2, ALL_GROUPS, stage2_lr, stage2_epochs, batch_size),
    ]


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"CECN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: OrderedDict
    config: dict = field(default_factory=dict)
    stage: int = 0
    epoch: int = 0
    step: int = 0
    seed: int = 0
    adam_t: int = 0

    def params(self):
        return OrderedDict((k[2:], v) for k, v in self.tensors.items() if k.startswith("p/"))

    def adam_state(self, prefix):
        return {k[2:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}

    def equals(self, other):
        return (self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
                and (self.config, self.stage, self.epoch, self.step, self.seed, self.adam_t)
                == (other.config, other.stage, other.epoch, other.step, other.seed, other.adam_t))


def make_checkpoint(model, opt=None, stage=0, epoch=0, step=0, seed=0, config=None):
    tensors = OrderedDict(("p/" + n, t.data.copy()) for n, t in model.store.items())
    adam_t = 0
    if opt is not None:
        adam_t = opt.t
        for n in model.store:
            if n in opt.m:
                tensors["m/" + n] = opt.m[n].copy()
                tensors["v/" + n] = opt.v[n].copy()
    return Checkpoint(tensors, config or {}, stage, epoch, step, seed, adam_t)


def _tensor_record(name, arr):
    nb = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    body = (struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_bytes(ckpt):
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(ckpt.tensors))]
    parts += [_tensor_record(n, a) for n, a in ckpt.tensors.items()]
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    trailer = (struct.pack("<BIQQQ", ckpt.stage, ckpt.epoch, ckpt.step, ckpt.seed, ckpt.adam_t)
               + struct.pack("<I", len(cfg)) + cfg)
    parts += [trailer, struct.pack("<I", zlib.crc32(trailer))]
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _take(buf, pos, n, what, path):
    if pos + n > len(buf):
        raise TruncatedError(f"{path}: truncated while reading {what}")
    return buf[pos:pos + n], pos + n


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    head, pos = _take(buf, 0, 12, "header", path)
    if head[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a CECN checkpoint")
    version, count = struct.unpack("<II", head[4:])
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    tensors = OrderedDict()
    for i in range(count):
        start = pos
        raw, pos = _take(buf, pos, 2, f"tensor {i} name length", path)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, nlen + 1, f"tensor {i} name", path)
        name, rank = raw[:nlen].decode("utf-8"), raw[nlen]
        raw, pos = _take(buf, pos, 4 * rank, f"tensor {name} dims", path)
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims)) if rank else 1
        raw, pos = _take(buf, pos, 8 * size, f"tensor {name} payload", path)
        body = buf[start:pos]
        crc_raw, pos = _take(buf, pos, 4, f"tensor {name} checksum", path)
        if zlib.crc32(body) != struct.unpack("<I", crc_raw)[0]:
            raise ChecksumError(f"{path}: checksum mismatch in tensor {name!r}", record=i)
        if name in tensors:
            raise NameCollisionError(f"{path}: tensor name {name!r} appears twice")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    tstart = pos
    raw, pos = _take(buf, pos, struct.calcsize("<BIQQQI"), "trailer", path)
    stage, epoch, step, seed, adam_t, clen = struct.unpack("<BIQQQI", raw)
    cfg_raw, pos = _take(buf, pos, clen, "config echo", path)
    crc_raw, pos = _take(buf, pos, 4, "trailer checksum", path)
    if zlib.crc32(buf[tstart:pos - 4]) != struct.unpack("<I", crc_raw)[0]:
        raise ChecksumError(f"{path}: checksum mismatch in trailer")
    return Checkpoint(tensors, json.loads(cfg_raw.decode("utf-8")), stage, epoch, step, seed,
                      adam_t)


def restore(model, ckpt):
    """Load checkpoint parameters into ``model``; shapes and names must agree."""
    model.store.load_state(ckpt.params())


# ---------------------------------------------------------------- training loop

LOG_FIELDS = ("epoch", "stage", "loss_t2i", "loss_i2t")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list

    def log_csv(self):
        return loss_log_csv(self.log)


def loss_log_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["epoch"], r["stage"], repr(r["loss_t2i"]), repr(r["loss_i2t"])])
    return buf.getvalue()


def batch_loss(model, batch, tau=TEMPERATURE, normalize=True):
    V = model.image_features(batch)
    T = model.text_features(batch.tokens)
    return info_nce(V, T, tau, normalize)


def epoch_batches(n, batch_size, seed, stage, epoch):
    """Seeded batch order; a trailing batch with fewer than 2 samples is dropped."""
    perm = Stream(seed, f"shuffle/{stage}/{epoch}").permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def train(model, data, stages, seed, resume=None, on_epoch=None, config=None, normalize=True):
    """Run the stages in order; returns the final checkpoint and per-epoch loss log.

    ``resume`` continues from a checkpoint written at an epoch boundary by
    this function; the result is bitwise identical to the uninterrupted run.
    ``on_epoch(checkpoint, row)`` is called after every epoch.
    """
    config = config or {}
    rows = []
    global_epoch, step = 0, 0
    start_stage, start_epoch, opt_state = 0, 0, None
    if resume is not None:
        restore(model, resume)
        start_stage = resume.stage - 1 if resume.stage else 0
        start_epoch, step = resume.epoch, resume.step
        global_epoch = sum(s.epochs for s in stages[:start_stage]) + start_epoch
        opt_state = resume
        if start_stage < len(stages) and start_epoch >= stages[start_stage].epochs:
            start_stage, start_epoch, opt_state = start_stage + 1, 0, None

    ckpt = make_checkpoint(model, None, start_stage + 1 if resume else 0, start_epoch, step,
                           seed, config)
    params = list(model.store._tensors.values())
    for si in range(start_stage, len(stages)):
        sc = stages[si]
        model.store.set_trainable(sc.groups)
        trainable = model.store.trainable()
        first_epoch = start_epoch if si == start_stage else 0
        if not trainable:
            log.info("stage %d has no trainable parameters for this model; skipped", sc.stage)
            global_epoch += sc.epochs - first_epoch
            continue
        opt = Adam(sc.lr)
        if opt_state is not None and si == start_stage:
            opt.t = opt_state.adam_t
            opt.m = {k: v.copy() for k, v in opt_state.adam_state("m").items()}
            opt.v = {k: v.copy() for k, v in opt_state.adam_state("v").items()}
        for epoch in range(first_epoch, sc.epochs):
            t2i_sum = i2t_sum = 0.0
            batches = epoch_batches(len(data), sc.batch_size, seed, sc.stage, epoch)
            for idx in batches:
                model.store.zero_grad()
                try:
                    with nx.Tape() as tape:
                        res = batch_loss(model, data.take(idx), sc.tau, normalize)
                    if not math.isfinite(res.loss.item()):
                        raise NumericError("non-finite loss")
                except NumericError as e:
                    err = NumericError(f"stage {sc.stage} epoch {epoch + 1} step {step}: {e}")
                    err.checkpoint = ckpt  # last good epoch boundary
                    raise err from e
                tape.backward(res.loss)
                opt.step(trainable)
                step += 1
                t2i_sum += res.t2i.item()
                i2t_sum += res.i2t.item()
            global_epoch += 1
            row = {"epoch": global_epoch, "stage": sc.stage,
                   "loss_t2i": t2i_sum / len(batches), "loss_i2t": i2t_sum / len(batches)}
            rows.append(row)
            log.info("epoch %d stage %d  t2i %.4f  i2t %.4f", global_epoch, sc.stage,
                     row["loss_t2i"], row["loss_i2t"])
            ckpt = make_checkpoint(model, opt, sc.stage, epoch + 1, step, seed, config)
            if on_epoch is not None:
                on_epoch(ckpt, row)
    for p in params:
        p.requires_grad = True
        p.grad = None
    return TrainResult(ckpt, rows)


def check_config_echo(ckpt, model_cfg_dict):
    echo = ckpt.config.get("model")
    if echo is not None and echo != model_cfg_dict:
        raise StructuralError("checkpoint was written for a different model configuration")


def grad_check_batch(model_cfg, batch=2, seed=0):
    """Random images, captions and soft masks sized for ``model_cfg``.

    Each mask covers one rectangle, so every image has both foreground and
    background patches and both confidence paths are exercised.
    """
    from .model import prepare_inputs

    enc = model_cfg.encoder
    st = Stream(seed, "gradcheck-batch")
    H = enc.image_size
    images = st.uniform((batch, H, H, enc.channels))
    masks = np.zeros((batch, H, H))
    for b in range(batch):
        r0, c0 = st.integers(0, H // 2, 2)
        masks[b, r0:r0 + H // 2, c0:c0 + H // 2] = st.uniform(low=0.3, high=1.0)
    vocab_hi = model_cfg.text.vocab_size
    tokens = [[1] + list(st.integers(3, vocab_hi, 4 + b)) + [2] for b in range(batch)]
    return prepare_inputs(images, tokens, masks, enc.patch_size, model_cfg.fusion != "none")


def full_model_grad_check(model_cfg, batch=2, eps=3e-5, seed=0, jitter=0.1):
    """Finite-difference check of every parameter through the InfoNCE loss.

    At the initial point the fusion outputs are tiny and some gradients sit
    below the finite-difference noise floor, so every parameter is first
    moved by seeded Gaussian noise of std ``jitter`` to a generic point.
    """
    from .model import CECNet

    model = CECNet(model_cfg, seed=seed)
    inputs = grad_check_batch(model_cfg, batch, seed)
    model.store.set_trainable(ALL_GROUPS)
    params = [t for _, t in model.store.items()]
    if jitter:
        for t in params:
            t.data += Stream(seed, "gradcheck-jitter/" + t.name).normal(t.shape, jitter)
    return nx.grad_check(lambda: batch_loss(model, inputs).loss, params, eps=eps)
