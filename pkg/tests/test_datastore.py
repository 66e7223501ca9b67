import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_container, same_records
from dpcvqa.datastore import (
    HEADER, MAGIC, ContainerHeader, Container, SyntheticConfig, decode_container, derive_seed,
    encode_container, generate_synthetic, normalize_mos, planted_direction, planted_residual,
    read_container, rng_for, validate_record, write_container,
)
from dpcvqa.errors import FormatError, InvalidInputError, RecordError
from dpcvqa.evaluation import srcc
from dpcvqa.perception import PerceptionRecord, VerbalizerSet, judge


def rec(vid="a", k=5, n=1, d_m=3, n_a=0, d_a=2, mos=3.0):
    return PerceptionRecord(vid, np.zeros(k, np.float32), np.ones((n, d_m), np.float32),
                            np.ones((n_a, d_a), np.float32), mos)


HDR = ContainerHeader(5, 3, 2, 0, 1.0, 5.0)


def test_empty_container_is_header_only():
    buf = encode_container(ContainerHeader(5, 3, 2), [])
    assert len(buf) == 40
    assert buf[:8] == MAGIC
    c = decode_container(buf)
    assert len(c) == 0 and c.header.k == 5


def test_record_layout_by_hand():
    r = PerceptionRecord("ab", np.array([1, 2], np.float32), np.array([[3.0]], np.float32),
                         np.zeros((0, 1), np.float32), 4.0)
    buf = encode_container(ContainerHeader(2, 1, 1, 0, 0.0, 5.0), [r])
    expected = (
        HEADER.pack(MAGIC, 1, 2, 1, 1, 1, 0.0, 5.0)
        + struct.pack("<I", 2) + b"ab" + struct.pack("<IIf", 1, 0, 4.0)
        + struct.pack("<3f", 1, 2, 3)
    )
    assert buf == expected


def test_unlabeled_round_trip_uses_nan():
    buf = encode_container(HDR, [rec(mos=None)])
    mos = struct.unpack_from("<f", buf, 40 + 4 + 1 + 8)[0]
    assert math.isnan(mos)
    assert decode_container(buf).records[0].mos_raw is None


def test_randomized_round_trips():
    rng = np.random.default_rng(1)
    for _ in range(100):
        header, records = random_container(rng)
        buf = encode_container(header, records)
        back = decode_container(buf)
        assert same_records(records, back.records)
        assert encode_container(back.header, back.records) == buf


def test_file_round_trip(tmp_path):
    c = generate_synthetic(SyntheticConfig(record_count=5, seed=2))
    path = tmp_path / "x.dpcf"
    write_container(path, c.header, c.records)
    assert same_records(c.records, read_container(path).records)


def test_bad_magic():
    buf = bytearray(encode_container(HDR, [rec()]))
    buf[:8] = b"NOTMAGIC"
    with pytest.raises(FormatError, match="magic") as info:
        decode_container(bytes(buf))
    assert info.value.offset == 0


def test_bad_version():
    buf = bytearray(encode_container(HDR, [rec()]))
    buf[8:12] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        decode_container(bytes(buf))


def test_truncation_reports_lengths_and_offset():
    buf = encode_container(HDR, [rec(), rec("b")])
    for cut in (0, 10, 39, 41, 50, len(buf) - 1):
        with pytest.raises(FormatError, match="truncated") as info:
            decode_container(buf[:cut])
        assert info.value.offset is not None
        assert f"file has {cut}" in str(info.value)


def test_trailing_bytes():
    with pytest.raises(FormatError, match="trailing"):
        decode_container(encode_container(HDR, [rec()]) + b"\0")


def test_zero_visual_tokens_rejected_on_read():
    buf = bytearray(encode_container(HDR, [rec()]))
    struct.pack_into("<I", buf, 40 + 4 + 1, 0)
    with pytest.raises(FormatError, match="N = 0"):
        decode_container(bytes(buf[:-12]))


def test_non_finite_payload_reports_offset():
    buf = bytearray(encode_container(HDR, [rec()]))
    off = 40 + 4 + 1 + 12 + 8
    struct.pack_into("<f", buf, off, float("inf"))
    with pytest.raises(FormatError, match="non-finite") as info:
        decode_container(bytes(buf))
    assert info.value.offset == off


@pytest.mark.parametrize("record, code", [
    (rec(vid=""), "id"),
    (rec(k=4), "logits-length"),
    (rec(d_m=2), "visual-shape"),
    (rec(n=0), "visual-empty"),
    (rec(n_a=1, d_a=3), "aux-shape"),
    (rec(mos=float("nan")), "mos-non-finite"),
    (rec(mos=5.5), "mos-range"),
])
def test_validate_record_codes(record, code):
    with pytest.raises(RecordError) as info:
        validate_record(record, HDR)
    assert info.value.code == code


def test_validate_non_finite_tokens():
    r = rec()
    r.visual_tokens[0, 0] = np.nan
    with pytest.raises(RecordError) as info:
        validate_record(r, HDR)
    assert info.value.code == "non-finite"


def test_header_validation():
    for bad in (ContainerHeader(1, 3, 2), ContainerHeader(5, 0, 2), ContainerHeader(5, 3, 2, 0, 2.0, 2.0)):
        with pytest.raises(FormatError):
            encode_container(bad, [])


def test_normalize_mos():
    assert normalize_mos(73.0, ContainerHeader(5, 1, 0, 0, 0.0, 100.0)) == pytest.approx(0.73)
    assert normalize_mos(1.0, HDR) == 0.0 and normalize_mos(5.0, HDR) == 1.0
    with pytest.raises(InvalidInputError):
        normalize_mos(6.0, HDR)


def test_duplicate_ids_rejected():
    with pytest.raises(InvalidInputError):
        Container(HDR, [rec("a"), rec("a")])


def test_target_of_unlabeled_raises():
    c = Container(HDR, [rec("a", mos=None)])
    assert c.labeled_ids == []
    with pytest.raises(InvalidInputError):
        c.target("a")


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(7, "x") == derive_seed(7, "x")
    assert derive_seed(7, "x") != derive_seed(7, "y")
    assert derive_seed(7, "x") != derive_seed(8, "x")
    assert 0 <= derive_seed(2 ** 64 - 1, "x") < 2 ** 64
    assert rng_for(3, "a").random() == rng_for(3, "a").random()


def test_planted_residual():
    w = planted_direction(0, 4)
    assert np.linalg.norm(w) == pytest.approx(1.0)
    assert planted_residual(0.5, np.zeros((2, 4)), w) == 0.0
    assert planted_residual(0.0, np.zeros((2, 4)), w) == pytest.approx(0.075)
    big = np.tile(w * 100, (3, 1))
    assert planted_residual(0.5, big, w) == pytest.approx(0.05)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(-1e3, 1e3), st.integers(0, 50))
def test_planted_residual_is_bounded(q, scale, seed):
    w = planted_direction(seed, 3)
    assert abs(planted_residual(q, np.full((2, 3), scale), w)) <= 0.2


def test_synthetic_is_deterministic_and_valid():
    cfg = SyntheticConfig(record_count=40, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert encode_container(a.header, a.records) == encode_container(b.header, b.records)
    assert encode_container(a.header, a.records) != encode_container(
        *(lambda c: (c.header, c.records))(generate_synthetic(SyntheticConfig(record_count=40, seed=6))))
    for r in a.records:
        validate_record(r, a.header)
        assert r.labeled


def test_synthetic_base_score_is_informative_but_imperfect():
    c = generate_synthetic(SyntheticConfig(record_count=300, seed=0))
    v = VerbalizerSet()
    q = [judge(r, v).q_b for r in c.records]
    y = [c.target(r.video_id) for r in c.records]
    assert 0.5 < srcc(q, y) < 1.0


def test_noise_free_labels_match_planted_formula():
    cfg = SyntheticConfig(record_count=30, seed=4, noise_sigma=0.0)
    c = generate_synthetic(cfg)
    w = planted_direction(cfg.seed, cfg.d_m)
    v = VerbalizerSet()
    for r in c.records:
        q = judge(r, v).q_b
        y = min(max(q + planted_residual(q, r.visual_tokens, w), 0.0), 1.0)
        assert c.target(r.video_id) == pytest.approx(y, abs=1e-6)


def test_synthetic_config_validation():
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticConfig(record_count=0))
    with pytest.raises(InvalidInputError):
        generate_synthetic(SyntheticConfig(noise_sigma=-1))
