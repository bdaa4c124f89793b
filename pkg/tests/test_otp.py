import math
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from entqkd.errors import InvalidInputError, KeyExhaustedError, ReuseForbiddenError
from entqkd.otp import (
    BitImage,
    KeyPad,
    decode_image,
    demo_image,
    encode_image,
    format_pbm,
    pack_ciphertext,
    parse_pbm,
    read_pbm,
    unpack_ciphertext,
    write_pbm,
    xor_apply,
)
from entqkd.proto.engine import BitKey


def pad(bits, provenance="corrected"):
    return KeyPad(BitKey(np.asarray(bits, np.uint8), provenance))


def test_zero_key_is_identity():
    data = np.array([1, 0, 1, 1, 0], np.uint8)
    assert np.array_equal(xor_apply(data, pad(np.zeros(5))), data)


@given(st.lists(st.integers(0, 1), max_size=300), st.integers(0, 2**32 - 1))
def test_involution(data, seed):
    key = np.random.default_rng(seed).integers(0, 2, len(data))
    cipher = xor_apply(data, pad(key))
    assert np.array_equal(xor_apply(cipher, pad(key)), np.asarray(data, np.uint8))


def test_short_key_exhausted():
    with pytest.raises(KeyExhaustedError):
        xor_apply(np.ones(10), pad(np.zeros(9)))


def test_key_bits_never_reused():
    p = pad(np.random.default_rng(0).integers(0, 2, 100))
    first = p.take(40)
    second = p.take(40)
    assert p.spent == 80 and p.remaining == 20
    assert not np.array_equal(first, second) or first.sum() == 0
    with pytest.raises(ReuseForbiddenError):
        p.take_at(30, 20)
    with pytest.raises(KeyExhaustedError):
        p.take(21)
    assert p.take_at(80, 20).size == 20


def test_start_offset_marks_bits_spent():
    p = KeyPad(BitKey(np.ones(50, np.uint8), "corrected"), start=30)
    assert p.remaining == 20
    with pytest.raises(ReuseForbiddenError):
        p.take_at(0, 1)


def test_concurrent_takes_never_overlap():
    key = BitKey(np.arange(4000) % 2, "corrected")
    p = KeyPad(key)
    chunks = []

    def worker():
        for _ in range(50):
            chunks.append(p.take(10))

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert p.spent == 4000 and p.remaining == 0
    assert len(chunks) == 400


@pytest.mark.parametrize("prov", ["raw", "sifted"])
def test_uncorrected_keys_refused(prov):
    with pytest.raises(InvalidInputError):
        pad([0, 1], prov)
    KeyPad(BitKey(np.array([0, 1], np.uint8), prov), allow_raw=True)


def test_non_bit_data_rejected():
    with pytest.raises(InvalidInputError):
        xor_apply([0, 2], pad([0, 0]))


# --- image codec ---------------------------------------------------------------

def test_p1_parse_with_comments():
    data = b"P1\n# a comment\n3 2\n1 0 1\n0 1 0\n"
    img = parse_pbm(data)
    assert (img.width, img.height) == (3, 2)
    assert img.as_array().tolist() == [[1, 0, 1], [0, 1, 0]]


def test_p4_known_bytes():
    img = BitImage(10, 1, [1, 0, 0, 0, 0, 0, 0, 1, 1, 1])
    assert format_pbm(img) == b"P4\n10 1\n" + bytes([0x81, 0xC0])
    assert parse_pbm(format_pbm(img)) == img


def test_one_by_one_image(tmp_path):
    img = BitImage(1, 1, [1])
    write_pbm(tmp_path / "a.pbm", img)
    back = read_pbm(tmp_path / "a.pbm")
    assert back.bits.tolist() == [1] and (back.width, back.height) == (1, 1)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_random_image_round_trip(w, h, seed):
    bits = np.random.default_rng(seed).integers(0, 2, w * h)
    img = BitImage(w, h, bits)
    back = parse_pbm(format_pbm(img))
    assert (back.width, back.height) == (w, h)
    assert np.array_equal(back.bits, img.bits)
    assert np.array_equal(decode_image(encode_image(img), w, h).bits, img.bits)


def test_p1_and_p4_agree():
    img = BitImage(64, 64, np.random.default_rng(5).integers(0, 2, 64 * 64))
    rows = "\n".join(" ".join(str(b) for b in row) for row in img.as_array())
    p1 = parse_pbm(f"P1\n64 64\n{rows}\n".encode())
    assert np.array_equal(p1.bits, parse_pbm(format_pbm(img)).bits)


@pytest.mark.parametrize("data", [b"P5\n1 1\n\x00", b"P4\n8 2\n\x00", b"P1\n2 2\n1 0 1", b"P1\nx 2\n",
                                  b"P4"])
def test_malformed_pbm(data):
    with pytest.raises(InvalidInputError):
        parse_pbm(data)


def test_image_shape_validation():
    with pytest.raises(InvalidInputError):
        BitImage(3, 3, [0] * 8)
    with pytest.raises(InvalidInputError):
        BitImage(0, 3, [])


# --- ciphertext ---------------------------------------------------------------------

def test_ciphertext_format():
    blob = pack_ciphertext([1, 0, 1, 1, 0, 0, 0, 0, 1])
    assert blob == struct.pack(">Q", 9) + bytes([0xB0, 0x80])
    assert unpack_ciphertext(blob).tolist() == [1, 0, 1, 1, 0, 0, 0, 0, 1]
    with pytest.raises(InvalidInputError):
        unpack_ciphertext(blob[:-1])
    with pytest.raises(InvalidInputError):
        unpack_ciphertext(b"\x00")


def test_ciphertext_of_structured_image_passes_monobit():
    img = demo_image()
    key = np.random.default_rng(99).integers(0, 2, img.bits.size)
    cipher = xor_apply(encode_image(img), pad(key))
    n = cipher.size
    s = abs(2 * int(cipher.sum()) - n) / math.sqrt(n)
    assert math.erfc(s / math.sqrt(2)) > 0.01
    # the plaintext itself is strongly biased
    assert abs(2 * int(img.bits.sum()) - n) / math.sqrt(n) > 10
    # and ciphertext is independent of plaintext
    table = np.array([[np.sum((img.bits == i) & (cipher == j)) for j in (0, 1)] for i in (0, 1)])
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_demo_image_deterministic():
    a, b = demo_image(), demo_image()
    assert (a.width, a.height) == (240, 180)
    assert np.array_equal(a.bits, b.bits)
    assert 0 < a.bits.mean() < 1
