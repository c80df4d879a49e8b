import math
import struct
import warnings

import numpy as np
import pytest

from camoret import numerics as nx
from camoret.errors import (BadMagicError, ChecksumError, ConfigError, NameCollisionError,
                            NumericError,
                            StructuralError, TruncatedError, VersionMismatchError)
from camoret.model import CECNet, ModelConfig, prepare_inputs
from camoret.retrieval import Corpus
from camoret.training import (ALL_GROUPS, Adam, StageConfig, adam_step, batch_loss,
                              check_config_echo, checkpoint_bytes, default_stages, info_nce,
                              load_checkpoint, make_checkpoint, restore, save_checkpoint, train)

TINY = ModelConfig(
    encoder={"image_size": 64, "patch_size": 16, "channels": 3, "embed_dim": 16,
             "num_heads": 2, "num_blocks": 2, "mlp_ratio": 2},
    text={"vocab_size": 64, "max_len": 16, "embed_dim": 16, "num_heads": 2,
          "num_blocks": 1, "mlp_ratio": 2, "pooling": "eos"},
)


@pytest.fixture(scope="module")
def data():
    c = Corpus.generate(train_n=24, test_n=4, seed=3)
    return prepare_inputs(c.train_images, c.train_tokens, c.train_masks, 16)


def stages(e1=1, e2=1, bs=8):
    return default_stages(e1, e2, batch_size=bs)


# ---------------------------------------------------------------- loss

def T(a):
    return nx.Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_single_pair_loss_is_zero_with_warning():
    with pytest.warns(RuntimeWarning):
        res = info_nce(T([[0.3, -1.0, 2.0]]), T([[1.0, 0.5, 0.0]]))
    assert res.t2i.item() == 0.0 and res.i2t.item() == 0.0 and res.loss.item() == 0.0


@pytest.mark.parametrize("n", [2, 3, 7, 16])
def test_uniform_similarities_give_two_log_n(n):
    V = np.tile([[1.0, 0.0, 0.0]], (n, 1))
    res = info_nce(T(V), T(V.copy()))
    assert abs(res.loss.item() - 2 * math.log(n)) < 1e-9
    assert abs(res.t2i.item() - math.log(n)) < 1e-9


def test_uniform_n2_value():
    V = np.ones((2, 4))
    assert abs(info_nce(T(V), T(V)).loss.item() - 1.3862943611198906) < 1e-9


def test_orthonormal_rows_nearly_zero():
    n = 5
    Q = np.eye(n)
    res = info_nce(T(Q), T(Q), tau=0.05)
    assert abs(res.loss.item() - 2 * math.log1p((n - 1) * math.exp(-20))) < 1e-12
    assert res.loss.item() < 1e-7


def test_permutation_invariance(rng):
    V, Tt = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    perm = rng.permutation(6)
    a = info_nce(T(V), T(Tt))
    b = info_nce(T(V[perm]), T(Tt[perm]))
    assert abs(a.t2i.item() - b.t2i.item()) < 1e-12
    assert abs(a.i2t.item() - b.i2t.item()) < 1e-12


def test_scale_invariance_of_normalized_loss(rng):
    V, Tt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a = info_nce(T(V), T(Tt)).loss.item()
    b = info_nce(T(3.0 * V), T(0.1 * Tt)).loss.item()
    assert abs(a - b) < 1e-10


def test_normalized_embeddings_unit_norm(rng):
    X = nx.l2_normalize(T(rng.normal(size=(8, 5)) * 7.0)).data
    assert np.all(np.abs(np.linalg.norm(X, axis=1) - 1.0) < 1e-9)


def test_loss_against_direct_formula(rng):
    V, Tt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    Vn = V / np.linalg.norm(V, axis=1, keepdims=True)
    Tn = Tt / np.linalg.norm(Tt, axis=1, keepdims=True)
    S = Tn @ Vn.T / 0.05
    t2i = -np.mean([S[i, i] - np.log(np.exp(S[i]).sum()) for i in range(4)])
    i2t = -np.mean([S[i, i] - np.log(np.exp(S[:, i]).sum()) for i in range(4)])
    res = info_nce(T(V), T(Tt))
    assert abs(res.t2i.item() - t2i) < 1e-10 and abs(res.i2t.item() - i2t) < 1e-10


def test_loss_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        info_nce(T(np.ones((2, 3))), T(np.ones((3, 3))))


def test_loss_grad_check(rng):
    V, Tt = T(rng.normal(size=(3, 4))), T(rng.normal(size=(3, 4)))
    assert nx.grad_check(lambda: info_nce(V, Tt).loss, [V, Tt]).max_rel_err < 1e-6


# ---------------------------------------------------------------- adam

def test_scalar_adam_oracle():
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = nx.Tensor(np.array([0.5]), requires_grad=True, name="w")
    opt = Adam(lr)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([1.0, 1.0, -0.5, 2.0], start=1):
        p.grad = np.array([g])
        opt.step([p])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - x) < 1e-15
    q = nx.Tensor(np.array([0.0]), requires_grad=True, name="q")
    q.grad = np.array([1.0])
    adam_step([q], None, lr)
    assert abs(q.data[0] + lr) < 1e-10


def test_zero_gradient_leaves_params():
    p = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")
    opt = Adam(1e-2)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step([p])
    assert np.array_equal(p.data, [1.0, -2.0])


def test_frozen_tensor_unchanged():
    p = nx.Tensor(np.array([1.0]), requires_grad=False, name="w")
    p.grad = np.array([5.0])
    Adam(1e-2).step([p])
    assert p.data[0] == 1.0


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        StageConfig(1, ("fusion",), 1e-3, 1, tau=0.07)
    with pytest.raises(ConfigError):
        StageConfig(3, ("fusion",), 1e-3, 1)
    s1, s2 = default_stages()
    assert s1.groups == ("fusion",) and set(s2.groups) == set(ALL_GROUPS)
    assert s1.tau == s2.tau == 0.05 and s1.batch_size == 32


# ---------------------------------------------------------------- training loop

def test_zero_epochs_returns_init(data):
    model = CECNet(TINY, seed=1)
    res = train(model, data, stages(0, 0), seed=1)
    assert res.log == []
    fresh = CECNet(TINY, seed=1)
    assert res.checkpoint.equals(make_checkpoint(fresh, seed=1))


def test_stage1_descends_and_freezes_the_rest(data):
    model = CECNet(TINY, seed=2)
    fixed = data.take(np.arange(8))
    with nx.no_grad():
        before = batch_loss(model, fixed).loss.item()
    snap = {n: t.data.copy() for n, t in model.store.items()}
    train(model, data, [StageConfig(1, ("fusion",), 1e-2, 1, 8)], seed=2)
    with nx.no_grad():
        after = batch_loss(model, fixed).loss.item()
    assert after < before
    moved = [n for n, t in model.store.items() if not np.array_equal(t.data, snap[n])]
    assert moved and all(model.store.group_of(n) == "fusion" for n in moved)


def test_training_is_deterministic(data):
    a = train(CECNet(TINY, seed=4), data, stages(1, 1), seed=4)
    b = train(CECNet(TINY, seed=4), data, stages(1, 1), seed=4)
    assert a.log_csv() == b.log_csv()
    assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)
    assert a.log_csv().splitlines()[0] == "epoch,stage,loss_t2i,loss_i2t"
    assert [r["epoch"] for r in a.log] == [1, 2]


@pytest.mark.parametrize("cut", [1, 2, 3])
def test_resume_is_bitwise(data, tmp_path, cut):
    st = stages(2, 2)
    full = train(CECNet(TINY, seed=5), data, st, seed=5)
    saved = []
    train(CECNet(TINY, seed=5), data, st, seed=5, on_epoch=lambda c, r: saved.append(c))
    path = tmp_path / "mid.cecn"
    save_checkpoint(saved[cut - 1], path)
    resumed = train(CECNet(TINY, seed=99), data, st, seed=5, resume=load_checkpoint(path))
    assert checkpoint_bytes(resumed.checkpoint) == checkpoint_bytes(full.checkpoint)
    assert resumed.log == full.log[cut:]


# ---------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def trained(data):
    return train(CECNet(TINY, seed=6), data, stages(1, 1), seed=6,
                 config={"model": TINY.to_dict()}).checkpoint


def test_checkpoint_round_trip(trained, tmp_path):
    p1, p2 = tmp_path / "a.cecn", tmp_path / "b.cecn"
    save_checkpoint(trained, p1)
    back = load_checkpoint(p1)
    assert back.equals(trained)
    save_checkpoint(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert any(k.startswith("m/") for k in back.tensors)
    model = CECNet(TINY, seed=0)
    restore(model, back)
    for n, t in model.store.items():
        assert np.array_equal(t.data, trained.tensors["p/" + n])


def test_mismatched_config_is_structural(trained):
    other = ModelConfig(TINY.encoder, TINY.text, "none")
    with pytest.raises(StructuralError):
        restore(CECNet(other), trained)
    wide = ModelConfig({**TINY.encoder.__dict__, "embed_dim": 8, "num_heads": 2},
                       {**TINY.text.__dict__, "embed_dim": 8, "num_heads": 2})
    with pytest.raises(StructuralError, match="shape mismatch"):
        restore(CECNet(wide), trained)
    with pytest.raises(StructuralError):
        check_config_echo(trained, other.to_dict())


def test_checkpoint_faults(trained, tmp_path):
    buf = checkpoint_bytes(trained)
    cases = {}
    bad = bytearray(buf); bad[:4] = b"XXXX"; cases["magic"] = (bytes(bad), BadMagicError)
    bad = bytearray(buf); bad[4:8] = struct.pack("<I", 2); cases["ver"] = (bytes(bad), VersionMismatchError)
    cases["trunc"] = (buf[: len(buf) // 2], TruncatedError)
    # flip one payload byte inside the first tensor record
    (nlen,) = struct.unpack("<H", buf[12:14])
    rank = buf[14 + nlen]
    off = 15 + nlen + 4 * rank + 3
    bad = bytearray(buf); bad[off] ^= 0x10; cases["crc"] = (bytes(bad), ChecksumError)
    bad = bytearray(buf); bad[-20] ^= 0x01; cases["trailer"] = (bytes(bad), ChecksumError)
    for name, (blob, err) in cases.items():
        p = tmp_path / name
        p.write_bytes(blob)
        with pytest.raises(err):
            load_checkpoint(p)


def test_checkpoint_name_collision(tmp_path):
    from collections import OrderedDict

    from camoret.training import Checkpoint, _tensor_record

    ck = Checkpoint(OrderedDict([("p/a", np.zeros(2))]))
    buf = bytearray(checkpoint_bytes(ck))
    rec = _tensor_record("p/a", np.ones(2))
    buf[8:12] = struct.pack("<I", 2)
    buf[12:12] = rec
    p = tmp_path / "dup.cecn"
    p.write_bytes(bytes(buf))
    with pytest.raises(NameCollisionError):
        load_checkpoint(p)


def test_non_finite_loss_keeps_checkpoint(data):
    model = CECNet(TINY, seed=7)
    model.store["head.proj.w"].data[0, 0] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericError) as ei:
            train(model, data, stages(1, 1), seed=7)
    assert ei.value.checkpoint.stage == 0 and "stage 1" in str(ei.value)
