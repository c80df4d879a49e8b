import struct
import zlib

import numpy as np
import pytest

from camoret.errors import (BadMagicError, ChecksumError, ConfigError, DataError, TruncatedError,
                            VersionMismatchError)
from camoret.synth import (BACKGROUNDS, DEFAULT_GRAMMAR, SIZE_BUCKETS, TEXTURE_KINDS, gen_corpus,
                           gen_sample, gen_texture, read_shard, region_stats, split_seeds,
                           write_shard)
from camoret.text import tokenize

GREY = {"palette": ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))}


@pytest.mark.parametrize("kind", TEXTURE_KINDS)
def test_texture_determinism_and_range(kind):
    assert np.array_equal(gen_texture(kind, GREY, 7), gen_texture(kind, GREY, 7))
    for seed in range(100):
        t = gen_texture(kind, GREY, seed, size=16)
        assert t.shape == (16, 16, 3) and t.min() >= 0.0 and t.max() <= 1.0


def test_texture_kinds_are_distinguishable():
    for a in TEXTURE_KINDS:
        for b in TEXTURE_KINDS:
            if a < b:
                assert np.abs(gen_texture(a, GREY, 3) - gen_texture(b, GREY, 3)).mean() > 0.05


def test_unknown_texture_kind():
    with pytest.raises(ConfigError):
        gen_texture("plaid", GREY, 0)


def test_sample_determinism():
    assert gen_sample(0.7, 11) == gen_sample(0.7, 11)
    assert gen_sample(0.7, 11).caption == gen_sample(0.7, 11).caption


def test_sample_invariants_and_caption_faithfulness():
    for seed in range(40):
        s = gen_sample(0.8, 5000 + seed)
        area = (s.gt_mask.values > 0.5).mean()
        assert 0.04 <= area <= 0.40
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        a = s.attributes
        lo, hi = SIZE_BUCKETS[a["size"]]
        assert lo <= a["area"] < hi
        assert s.caption == DEFAULT_GRAMMAR.render(a["size"], a["texture"], a["shape"], a["bg"],
                                                   a["position"])
        assert s.caption_tokens == tokenize(s.caption, DEFAULT_GRAMMAR.vocabulary())
        # the object sits near the anchor its position word names
        yy, xx = np.nonzero(s.gt_mask.values > 0.5)
        anchor = {"center": (32, 32), "top": (21, 32), "bottom": (43, 32), "left": (32, 21),
                  "right": (32, 43)}[a["position"]]
        assert abs(yy.mean() - anchor[0]) < 12 and abs(xx.mean() - anchor[1]) < 12


def test_conspicuous_at_lambda_zero():
    diffs = []
    for seed in range(50):
        st = region_stats(gen_sample(0.0, 1000 + seed))
        diffs.append(np.linalg.norm(st["mean_in"] - st["mean_bg"]))
    assert min(diffs) > 0.2


def test_camouflaged_at_lambda_one():
    diffs = []
    for seed in range(50):
        st = region_stats(gen_sample(1.0, 1000 + seed))
        diffs.append(np.linalg.norm(st["mean_in"] - st["mean_ring"]))
    assert np.mean(diffs) < 0.05


def test_invalid_lambda():
    with pytest.raises(ConfigError):
        gen_sample(1.5, 0)
    with pytest.raises(ConfigError):
        gen_corpus(2, 0, "train", camo_range=(0.8, 0.2))


def test_split_seeds_disjoint():
    tr, te = set(split_seeds(2000, 0, "train")), set(split_seeds(500, 0, "test"))
    assert len(tr) == 2000 and len(te) == 500 and not tr & te


def test_corpus_lambda_range():
    lams = [s.camo_level for s in gen_corpus(20, 1, "train", camo_range=(0.9, 1.0))]
    assert min(lams) >= 0.9 - 1e-6 and max(lams) <= 1.0


@pytest.fixture
def shard(tmp_path):
    samples = gen_corpus(3, 2, "test")
    path = tmp_path / "s.shard"
    write_shard(samples, path)
    return samples, path


def test_shard_round_trip(shard):
    samples, path = shard
    back = read_shard(path)
    assert back == samples
    for a, b in zip(back, samples):
        assert a.camo_level == b.camo_level and a.caption == b.caption


def test_shard_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        write_shard([], tmp_path / "e.shard")


def _record_offsets(buf):
    pos, offs = 12, []
    count = struct.unpack("<I", buf[8:12])[0]
    for _ in range(count):
        start = pos
        _, _, H, W = struct.unpack("<IfII", buf[pos:pos + 16])
        pos += 16 + H * W * 16
        (nt,) = struct.unpack("<I", buf[pos:pos + 4])
        pos += 4 + 4 * nt
        (nc,) = struct.unpack("<I", buf[pos:pos + 4])
        pos += 4 + nc
        offs.append((start, pos))
        pos += 4
    return offs


def test_shard_fault_injection(shard, tmp_path):
    _, path = shard
    buf = bytearray(path.read_bytes())
    offs = _record_offsets(bytes(buf))
    assert offs[-1][1] + 4 == len(buf)

    bad = bytearray(buf)
    bad[0:4] = b"JUNK"
    (tmp_path / "magic").write_bytes(bad)
    with pytest.raises(BadMagicError):
        read_shard(tmp_path / "magic")

    bad = bytearray(buf)
    bad[4:8] = struct.pack("<I", 9)
    (tmp_path / "ver").write_bytes(bad)
    with pytest.raises(VersionMismatchError):
        read_shard(tmp_path / "ver")

    (tmp_path / "trunc").write_bytes(buf[:-7])
    with pytest.raises(TruncatedError):
        read_shard(tmp_path / "trunc")

    bad = bytearray(buf)
    bad[offs[1][0] + 100] ^= 0x40
    (tmp_path / "crc").write_bytes(bad)
    with pytest.raises(ChecksumError) as ei:
        read_shard(tmp_path / "crc")
    assert ei.value.record == 1 and "record 1" in str(ei.value)

    (tmp_path / "tail").write_bytes(bytes(buf) + b"\0")
    with pytest.raises(DataError):
        read_shard(tmp_path / "tail")


def test_shard_checksum_is_crc32_of_payload(shard):
    _, path = shard
    buf = path.read_bytes()
    start, end = _record_offsets(buf)[0]
    assert struct.unpack("<I", buf[end:end + 4])[0] == zlib.crc32(buf[start:end])


def test_backgrounds_cover_all_grammar_words():
    assert set(DEFAULT_GRAMMAR.backgrounds) == set(BACKGROUNDS)
