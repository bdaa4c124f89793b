import io
import math
import socket

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entqkd.chrono import ClockModel, PartyRecords, SourceConfig
from entqkd.entangle import IDEAL, NoiseModel
from entqkd.errors import (
    InsufficientDataError,
    InvalidInputError,
    ProtocolDesyncError,
    UndefinedEstimateError,
)
from entqkd.proto import (
    ChannelMessage,
    LocalChannel,
    MessageType,
    ProtocolKind,
    read_frame,
    write_frame,
)
from entqkd.proto.engine import (
    BitKey,
    WignerEstimate,
    estimate_probability,
    estimate_qber,
    run_protocol,
    security_decision,
    sift,
    wigner_closed_form,
    wigner_from_counts,
    wigner_test,
    wigner_test_over_channel,
)

bit_lists = st.lists(st.integers(0, 1), max_size=200)


def records(party, settings_idx, outcomes, kind=ProtocolKind.BB84):
    settings = kind.alice_settings if party == "alice" else kind.bob_settings
    return PartyRecords(party, np.asarray(settings_idx, np.int8), np.asarray(outcomes, np.int8), settings)


# --- framing ---------------------------------------------------------------------

@given(st.sampled_from([MessageType.SETTINGS_DISCLOSURE, MessageType.PARITY_VECTOR,
                        MessageType.PARITY_DECISION]), bit_lists)
def test_frame_round_trip(mtype, bits):
    msg = ChannelMessage(mtype, bits)
    frame = msg.encode()
    assert len(frame) == 5 + 4 + (len(bits) + 7) // 8
    assert int.from_bytes(frame[:4], "big") == len(frame) - 5
    assert frame[4] == int(mtype)
    assert ChannelMessage.decode(frame) == msg


@given(st.lists(st.tuples(st.integers(0, 2**32 - 1), st.integers(0, 1)), max_size=100))
def test_test_reveal_round_trip(items):
    pos = [p for p, _ in items]
    bits = [b for _, b in items]
    msg = ChannelMessage(MessageType.TEST_SUBSET_REVEAL, bits, pos)
    assert ChannelMessage.decode(msg.encode()) == msg


def test_known_byte_layout():
    frame = ChannelMessage(MessageType.PARITY_VECTOR, [1, 0, 1, 1, 0, 0, 0, 0, 1]).encode()
    assert frame == bytes.fromhex("00000006" "03" "00000009" "b0" "80")
    assert ChannelMessage(MessageType.ACK).encode() == bytes.fromhex("0000000005")


def test_frames_over_byte_stream_and_socket():
    msgs = [ChannelMessage(MessageType.SETTINGS_DISCLOSURE, [1, 0, 1]),
            ChannelMessage(MessageType.TEST_SUBSET_REVEAL, [1, 1], [7, 300000]),
            ChannelMessage(MessageType.ACK)]
    buf = io.BytesIO()
    for m in msgs:
        write_frame(buf, m)
    buf.seek(0)
    assert [read_frame(buf) for _ in msgs] == msgs
    with pytest.raises(EOFError):
        read_frame(buf)

    left, right = socket.socketpair()
    with left, right:
        wf, rf = left.makefile("wb"), right.makefile("rb")
        for m in msgs:
            write_frame(wf, m)
        wf.flush()
        assert [read_frame(rf) for _ in msgs] == msgs
        wf.close()
        rf.close()


@pytest.mark.parametrize("frame", [
    b"\x00\x00",
    bytes.fromhex("00000001" "09" "00"),          # unknown type
    bytes.fromhex("00000006" "03" "00000009" "b0"),  # truncated body
    bytes.fromhex("00000005" "03" "00000000" "ff"),  # trailing byte
    bytes.fromhex("00000001" "05" "00"),          # ACK with payload
])
def test_malformed_frames_rejected(frame):
    with pytest.raises(InvalidInputError):
        ChannelMessage.decode(frame)


def test_channel_order_and_desync():
    ch = LocalChannel()
    ch.send("alice", ChannelMessage(MessageType.ACK))
    with pytest.raises(ProtocolDesyncError):
        ch.recv("alice")
    with pytest.raises(ProtocolDesyncError):
        ch.recv("bob", MessageType.PARITY_VECTOR)


# --- probabilities and the Wigner statistic ---------------------------------------------

def test_estimate_probability_examples():
    assert estimate_probability({"pp": 125, "pm": 375, "mp": 375, "mm": 125}) == 0.125
    assert estimate_probability([0, 10, 10, 0]) == 0.0
    with pytest.raises(UndefinedEstimateError):
        estimate_probability([0, 0, 0, 0])
    with pytest.raises(InvalidInputError):
        estimate_probability([1, -1, 0, 0])


@given(st.lists(st.integers(0, 10**6), min_size=4, max_size=4).filter(lambda c: sum(c) > 0),
       st.integers(1, 1000))
def test_estimate_probability_scale_invariant(counts, k):
    p = estimate_probability(counts)
    assert 0 <= p <= 1
    assert estimate_probability([k * c for c in counts]) == pytest.approx(p)


@pytest.mark.parametrize("v,w", [(1.0, -0.125), (0.932, -0.0995), (2 / 3, 0.0), (0.0, 0.25)])
def test_wigner_closed_form(v, w):
    assert wigner_closed_form(NoiseModel(v)) == pytest.approx(w, abs=1e-12)


def test_wigner_from_exact_counts():
    n = 80_000
    cells = lambda p: {"pp": round(p * n), "pm": n // 2 - round(p * n),  # noqa: E731
                       "mp": n // 2 - round(p * n), "mm": round(p * n)}
    est = wigner_from_counts({"chi_psi": cells(1 / 8), "psi_omega": cells(1 / 8),
                              "chi_omega": cells(3 / 8)})
    assert est.w == pytest.approx(-0.125)
    assert est.violated
    ref = math.sqrt(2 * (1 / 8 * 7 / 8) / n + (3 / 8 * 5 / 8) / n)
    assert est.std_error == pytest.approx(ref)


def test_wigner_needs_all_three_combinations():
    with pytest.raises(InsufficientDataError):
        wigner_from_counts({"chi_psi": {"pp": 1, "pm": 1, "mp": 1, "mm": 1}})


def test_wigner_test_rejects_bb84_coincidences():
    run = run_protocol("bb84", SourceConfig(1e5, 1.0, 0.01), IDEAL, seed=1)
    with pytest.raises(InvalidInputError):
        wigner_test(run.coincidences)


def test_simulated_wigner_run_near_closed_form():
    noise = NoiseModel(0.932)
    run = run_protocol("wigner", SourceConfig(1e5, 1.0, 2.0), noise, seed=4)
    est = wigner_test(run.coincidences)
    assert abs(est.w - wigner_closed_form(noise)) < 4 * est.std_error
    ch = LocalChannel()
    sr = sift("wigner", run.alice_records, run.bob_records, ch)
    over = wigner_test_over_channel(run.alice_records, run.bob_records, sr.public_settings, ch)
    assert over.w == est.w and over.counts == est.counts


# --- sifting ---------------------------------------------------------------------

@pytest.mark.parametrize("kind,discard", [("bb84", 0.5), ("wigner", 0.75)])
def test_sift_discards_expected_fraction(kind, discard):
    run = run_protocol(kind, SourceConfig(1e5, 1.0, 1.0), IDEAL, seed=9)
    sr = sift(kind, run.alice_records, run.bob_records)
    n = len(run.coincidences)
    assert abs(sr.discarded_fraction - discard) < 4 * math.sqrt(discard * (1 - discard) / n)


@pytest.mark.parametrize("kind", ["bb84", "wigner"])
def test_perfect_visibility_gives_identical_keys(kind):
    run = run_protocol(kind, SourceConfig(1e5, 1.0, 0.5), IDEAL,
                       clocks=(ClockModel(0, 0.05),) * 2, seed=2)
    # drop accidentals so only genuine pairs remain
    sel = run.coincidences.select(run.coincidences.true_pair)
    sr = sift(kind, sel.party_view("alice"), sel.party_view("bob"))
    assert len(sr.alice_key) > 1000
    assert np.array_equal(sr.alice_key.bits, sr.bob_key.bits)


def test_sift_bit_convention():
    a = records("alice", [0, 0, 1, 1, 0], [1, -1, 1, -1, 1])
    b = records("bob", [0, 0, 1, 0, 1], [-1, 1, -1, 1, -1])
    sr = sift("bb84", a, b)
    assert sr.alice_key.bits.tolist() == [1, 0, 1]
    assert sr.bob_key.bits.tolist() == [1, 0, 1]
    assert sr.key_positions.tolist() == [0, 1, 2]
    assert sr.discarded_fraction == pytest.approx(0.4)


def test_sift_empty_warns():
    a = records("alice", [0, 1], [1, 1])
    b = records("bob", [1, 0], [1, 1])
    with pytest.warns(UserWarning):
        sr = sift("bb84", a, b)
    assert len(sr.alice_key) == 0 and sr.discarded_fraction == 1.0


def test_message_log_is_complete_public_record():
    a = records("alice", [0, 1, 1], [1, -1, 1])
    b = records("bob", [0, 1, 0], [-1, 1, 1])
    ch = LocalChannel()
    sift("bb84", a, b, ch)
    assert [(s, m.type) for s, m in ch.log] == [
        ("alice", MessageType.SETTINGS_DISCLOSURE), ("bob", MessageType.SETTINGS_DISCLOSURE)]
    # settings cross the channel, outcomes never do
    assert ch.log[0][1].bits.tolist() == [0, 1, 1]
    assert ch.bytes_sent == sum(len(m.encode()) for _, m in ch.log)


# --- QBER ---------------------------------------------------------------------

def test_qber_full_sample_example():
    a = BitKey(np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1]))
    b = BitKey(np.array([0, 1, 0, 0, 1, 0, 0, 1, 1, 0]), party="bob")
    est = estimate_qber(a, b, 0.999, np.random.default_rng(0))
    assert est.sample_size == 10 and est.errors == 2 and est.qber == pytest.approx(0.2)


def test_qber_of_identical_keys_is_zero(rng):
    bits = rng.integers(0, 2, 1000)
    est = estimate_qber(BitKey(bits), BitKey(bits, party="bob"), 0.1, rng)
    assert est.qber == 0.0 and est.sample_size == 100
    assert len(np.unique(est.revealed_positions)) == 100


def test_qber_sample_statistics(rng):
    a = rng.integers(0, 2, 200_000).astype(np.uint8)
    b = a ^ (rng.random(a.size) < 0.03)
    est = estimate_qber(BitKey(a), BitKey(b, party="bob"), 0.1, rng)
    assert abs(est.qber - 0.03) < 4 * math.sqrt(0.03 * 0.97 / est.sample_size)
    rest = BitKey(a).without(est.revealed_positions)
    assert len(rest) == a.size - est.sample_size


def test_qber_desync_and_validation(rng):
    with pytest.raises(ProtocolDesyncError):
        estimate_qber(BitKey([0, 1]), BitKey([0]), 0.5, rng)
    with pytest.raises(InvalidInputError):
        estimate_qber(BitKey([0, 1]), BitKey([0, 1]), 1.0, rng)
    with pytest.raises(UndefinedEstimateError):
        estimate_qber(BitKey([]), BitKey([]), 0.5, rng)


# --- decision -----------------------------------------------------------------------

@pytest.mark.parametrize("w,se,accepted", [(-0.10, 0.01, True), (-0.02, 0.01, False),
                                           (0.05, 0.001, False), (-0.031, 0.01, True)])
def test_wigner_decision(w, se, accepted):
    d = security_decision("wigner", WignerEstimate(w, se, {}, {}))
    assert d.accepted is accepted
    assert d.label == ("accept" if accepted else "abort")


@pytest.mark.parametrize("q,accepted", [(0.02, True), (0.109, True), (0.11, False), (0.25, False)])
def test_bb84_decision(q, accepted):
    assert security_decision("bb84", qber=q).accepted is accepted


def test_decision_needs_its_statistic():
    with pytest.raises(InsufficientDataError):
        security_decision("wigner", qber=0.01)
    with pytest.raises(InsufficientDataError):
        security_decision("bb84")


# --- whole protocol run ----------------------------------------------------------------

def test_setting_combinations_equally_likely():
    run = run_protocol("wigner", SourceConfig(1e5, 1.0, 1.0), IDEAL, seed=5)
    c = run.coincidences
    n = len(c)
    for ia in (0, 1):
        for ib in (0, 1):
            frac = np.mean((c.setting_a == ia) & (c.setting_b == ib))
            assert abs(frac - 0.25) < 4 * math.sqrt(0.25 * 0.75 / n)


def test_zero_duration_run_is_empty():
    with pytest.warns(UserWarning):
        run = run_protocol("bb84", SourceConfig(7e5, 0.05, 0.0), IDEAL)
    assert len(run.coincidences) == 0


def test_run_is_deterministic():
    r1 = run_protocol("bb84", SourceConfig(1e5, 0.3, 0.2), NoiseModel(0.9), seed=77)
    r2 = run_protocol("bb84", SourceConfig(1e5, 0.3, 0.2), NoiseModel(0.9), seed=77)
    assert r1.alice_stream.to_text() == r2.alice_stream.to_text()
    assert np.array_equal(r1.coincidences.index_b, r2.coincidences.index_b)


def test_key_file_round_trip(rng):
    key = BitKey(rng.integers(0, 2, 1001), "corrected", "bob")
    back = BitKey.from_bytes(key.to_bytes(), party="bob")
    assert back.provenance == "corrected" and np.array_equal(back.bits, key.bits)
    with pytest.raises(InvalidInputError):
        BitKey.from_bytes(b"NOPE" + key.to_bytes()[4:])
    with pytest.raises(InvalidInputError):
        BitKey.from_bytes(key.to_bytes()[:-1])
