"""Key-distribution protocol steps for the Wigner and entangled-BB84 schemes."""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .. import chrono
from ..entangle import NoiseModel, outcome_to_bit
from ..errors import (
    InsufficientDataError,
    InvalidInputError,
    ProtocolDesyncError,
    UndefinedEstimateError,
)
from .channel import ChannelMessage, LocalChannel, MessageType
from .schedule import ProtocolKind, SettingSchedule

PROVENANCES = ("raw", "sifted", "corrected")
_PROV_CODE = {p: i for i, p in enumerate(PROVENANCES)}
KEY_MAGIC = b"QKEY"


@dataclass
class BitKey:
    bits: np.ndarray
    provenance: str = "sifted"
    party: str = "alice"

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {self.provenance!r}")
        if np.any(self.bits > 1):
            raise InvalidInputError("key bits must be 0 or 1")

    def __len__(self) -> int:
        return self.bits.size

    def without(self, positions) -> "BitKey":
        keep = np.ones(self.bits.size, bool)
        keep[np.asarray(positions, dtype=np.int64)] = False
        return BitKey(self.bits[keep], self.provenance, self.party)

    def to_bytes(self) -> bytes:
        """``QKEY`` | provenance byte | u64 bit count | packed bits (MSB first)."""
        return (
            KEY_MAGIC
            + struct.pack("!BQ", _PROV_CODE[self.provenance], self.bits.size)
            + np.packbits(self.bits).tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes, party: str = "alice") -> "BitKey":
        if data[:4] != KEY_MAGIC or len(data) < 13:
            raise InvalidInputError("not a key file")
        prov, n = struct.unpack_from("!BQ", data, 4)
        if prov >= len(PROVENANCES):
            raise InvalidInputError(f"bad provenance code {prov}")
        body = np.frombuffer(data, np.uint8, offset=13)
        if body.size != (n + 7) // 8:
            raise InvalidInputError("key file length does not match header")
        return cls(np.unpackbits(body, count=n), PROVENANCES[prov], party)


@dataclass
class ProtocolRun:
    kind: ProtocolKind
    alice_stream: chrono.TimestampStream
    bob_stream: chrono.TimestampStream
    coincidences: chrono.CoincidenceSet
    rng: np.random.Generator = field(repr=False)

    @property
    def alice_records(self) -> chrono.PartyRecords:
        return self.coincidences.party_view("alice")

    @property
    def bob_records(self) -> chrono.PartyRecords:
        return self.coincidences.party_view("bob")


def run_protocol(
    kind: ProtocolKind,
    source: chrono.SourceConfig,
    noise: NoiseModel,
    clocks: tuple[chrono.ClockModel, chrono.ClockModel] = (chrono.ClockModel(), chrono.ClockModel()),
    seed: int = 0,
    attack=None,
    window: float = chrono.DEFAULT_WINDOW_NS,
    offset_correction: bool = True,
    run_id: str | None = None,
) -> ProtocolRun:
    """Generate both detection streams for ``kind`` and extract coincidences.

    All randomness derives from ``seed``: the two setting schedules, the
    photon source, and a spare generator (``ProtocolRun.rng``) for later
    classical steps.
    """
    kind = ProtocolKind.parse(kind)
    alice, bob, rng = prepare_streams(kind, source, noise, clocks, seed, attack, run_id)
    coinc = chrono.find_coincidences(alice, bob, window, offset_correction=offset_correction)
    return ProtocolRun(kind, alice, bob, coinc, rng)


def prepare_streams(kind: ProtocolKind, source: chrono.SourceConfig, noise: NoiseModel,
                    clocks, seed: int, attack=None, run_id: str | None = None):
    """Detection streams for one run plus the spare generator for later steps."""
    ss = np.random.SeedSequence(seed)
    key_a, key_b, src_seq, proto_seq = ss.spawn(4)
    schedules = (
        SettingSchedule.for_party(kind, "alice", int(key_a.generate_state(1, np.uint64)[0]),
                                  dwell_ns=source.switch_interval),
        SettingSchedule.for_party(kind, "bob", int(key_b.generate_state(1, np.uint64)[0]),
                                  dwell_ns=source.switch_interval),
    )
    run_id = run_id or f"{kind.value}-{seed}"
    alice, bob = chrono.generate_streams(
        source, clocks, schedules, noise, np.random.default_rng(src_seq), attack, run_id
    )
    return alice, bob, np.random.default_rng(proto_seq)


def estimate_probability(counts) -> float:
    """Fraction of ++ coincidences among all four outcome combinations.

    ``counts`` is a mapping with keys pp, pm, mp, mm or a 4-sequence in that order.
    """
    if isinstance(counts, dict):
        c = [counts["pp"], counts["pm"], counts["mp"], counts["mm"]]
    else:
        c = list(counts)
    if len(c) != 4 or any(x < 0 for x in c):
        raise InvalidInputError("need four non-negative counts")
    total = sum(c)
    if total == 0:
        raise UndefinedEstimateError("no coincidences recorded for this setting combination")
    return c[0] / total


@dataclass(frozen=True)
class WignerEstimate:
    w: float
    std_error: float
    probabilities: dict
    counts: dict

    @property
    def violated(self) -> bool:
        return self.w < 0


def wigner_closed_form(noise: NoiseModel) -> float:
    """Expected Wigner value at (-30, 0, 30) under the depolarizing model."""
    return (2.0 - 3.0 * noise.visibility) / 8.0


def _cells(out_a, out_b) -> dict:
    a = np.asarray(out_a) > 0
    b = np.asarray(out_b) > 0
    return {
        "pp": int(np.sum(a & b)), "pm": int(np.sum(a & ~b)),
        "mp": int(np.sum(~a & b)), "mm": int(np.sum(~a & ~b)),
    }


def wigner_from_counts(counts: dict) -> WignerEstimate:
    """Combine cell counts for the chi_psi, psi_omega and chi_omega
    combinations into the Wigner value and its binomial standard error."""
    probs, var = {}, 0.0
    for name in ("chi_psi", "psi_omega", "chi_omega"):
        if name not in counts or sum(counts[name].values()) == 0:
            raise InsufficientDataError(f"no coincidences for combination {name}")
        n = sum(counts[name].values())
        p = estimate_probability(counts[name])
        probs[name] = p
        # a zero-variance cell still carries at least 1/N resolution
        var += max(p * (1 - p), 1.0 / n) / n
    w = probs["chi_psi"] + probs["psi_omega"] - probs["chi_omega"]
    return WignerEstimate(w, math.sqrt(var), probs, counts)


def wigner_counts(setting_a, setting_b, outcome_a, outcome_b) -> dict:
    setting_a = np.asarray(setting_a)
    setting_b = np.asarray(setting_b)
    out = {}
    for name, (ia, ib) in ProtocolKind.WIGNER.wigner_combinations.items():
        m = (setting_a == ia) & (setting_b == ib)
        out[name] = _cells(np.asarray(outcome_a)[m], np.asarray(outcome_b)[m])
    return out


def wigner_test(coincidences: chrono.CoincidenceSet) -> WignerEstimate:
    """Wigner value from a Wigner-protocol coincidence list."""
    if tuple(coincidences.settings_a) != ProtocolKind.WIGNER.alice_settings or tuple(
        coincidences.settings_b
    ) != ProtocolKind.WIGNER.bob_settings:
        raise InvalidInputError("coincidences were not recorded with Wigner settings")
    return wigner_from_counts(
        wigner_counts(coincidences.setting_a, coincidences.setting_b,
                      coincidences.outcome_a, coincidences.outcome_b)
    )


def exchange_settings(alice: chrono.PartyRecords, bob: chrono.PartyRecords, channel: LocalChannel):
    """Both parties announce their setting index per coincidence.

    Returns the public (alice_settings, bob_settings) arrays as each side
    reconstructs them from the channel.
    """
    if len(alice) != len(bob):
        raise ProtocolDesyncError("parties hold different numbers of coincidences")
    channel.send("alice", ChannelMessage(MessageType.SETTINGS_DISCLOSURE, alice.setting_index))
    channel.send("bob", ChannelMessage(MessageType.SETTINGS_DISCLOSURE, bob.setting_index))
    seen_by_bob = channel.recv("bob", MessageType.SETTINGS_DISCLOSURE).bits
    seen_by_alice = channel.recv("alice", MessageType.SETTINGS_DISCLOSURE).bits
    if len(seen_by_bob) != len(bob) or len(seen_by_alice) != len(alice):
        raise ProtocolDesyncError("settings disclosure length mismatch")
    return seen_by_bob.astype(np.int8), seen_by_alice.astype(np.int8)


@dataclass
class SiftResult:
    alice_key: BitKey
    bob_key: BitKey
    discarded_fraction: float
    key_positions: np.ndarray
    public_settings: tuple[np.ndarray, np.ndarray]


def key_mask(kind: ProtocolKind, setting_a, setting_b) -> np.ndarray:
    m = np.zeros(len(setting_a), bool)
    for ia, ib in kind.key_combinations:
        m |= (np.asarray(setting_a) == ia) & (np.asarray(setting_b) == ib)
    return m


def sift(kind, alice_records: chrono.PartyRecords, bob_records: chrono.PartyRecords,
         channel: LocalChannel | None = None) -> SiftResult:
    """Keep parallel-setting coincidences and turn them into key bits.

    Outcome +1 gives bit 1 and -1 gives bit 0; Bob inverts his bits so that
    perfectly anticorrelated pairs yield identical keys.
    """
    kind = ProtocolKind.parse(kind)
    channel = channel or LocalChannel()
    settings_a, settings_b = exchange_settings(alice_records, bob_records, channel)
    # each side evaluates the same public rule on the same public data
    keep = key_mask(kind, settings_a, bob_records.setting_index)
    if not np.array_equal(keep, key_mask(kind, alice_records.setting_index, settings_b)):
        raise ProtocolDesyncError("parties disagree on the sifted positions")
    n = len(alice_records)
    if not keep.any():
        warnings.warn("no parallel-setting coincidences; sifted keys are empty")
    alice_key = BitKey(outcome_to_bit(alice_records.outcome[keep]), "sifted", "alice")
    bob_key = BitKey(1 - outcome_to_bit(bob_records.outcome[keep]), "sifted", "bob")
    discarded = 1.0 - keep.sum() / n if n else 1.0
    return SiftResult(alice_key, bob_key, float(discarded), np.flatnonzero(keep),
                      (settings_a, settings_b))


def wigner_test_over_channel(alice_records, bob_records, public_settings, channel: LocalChannel):
    """Reveal outcomes of the oblique-setting coincidences and evaluate the
    Wigner value from what crossed the channel."""
    settings_a, settings_b = public_settings
    test = ~key_mask(ProtocolKind.WIGNER, settings_a, settings_b)
    pos = np.flatnonzero(test)
    channel.send("alice", ChannelMessage(MessageType.TEST_SUBSET_REVEAL,
                                         outcome_to_bit(alice_records.outcome[pos]), pos))
    got = channel.recv("bob", MessageType.TEST_SUBSET_REVEAL)
    channel.send("bob", ChannelMessage(MessageType.TEST_SUBSET_REVEAL,
                                       outcome_to_bit(bob_records.outcome[pos]), pos))
    back = channel.recv("alice", MessageType.TEST_SUBSET_REVEAL)
    if not (np.array_equal(got.positions, pos) and np.array_equal(back.positions, pos)):
        raise ProtocolDesyncError("test positions differ")
    out_a = np.where(got.bits == 1, 1, -1)
    out_b = np.where(back.bits == 1, 1, -1)
    return wigner_from_counts(wigner_counts(settings_a[pos], settings_b[pos], out_a, out_b))


@dataclass(frozen=True)
class QberEstimate:
    qber: float
    revealed_positions: np.ndarray
    sample_size: int
    errors: int


def estimate_qber(alice_key: BitKey, bob_key: BitKey, sample_fraction: float,
                  rng: np.random.Generator, channel: LocalChannel | None = None) -> QberEstimate:
    """Compare a random subset of the two keys in public.

    The revealed positions must be removed from both keys afterwards
    (``key.without(est.revealed_positions)``).
    """
    if len(alice_key) != len(bob_key):
        raise ProtocolDesyncError(
            f"key lengths differ: alice {len(alice_key)}, bob {len(bob_key)}"
        )
    if not 0 < sample_fraction < 1:
        raise InvalidInputError("sample_fraction must lie strictly between 0 and 1")
    n = len(alice_key)
    if n == 0:
        raise UndefinedEstimateError("cannot estimate QBER of an empty key")
    channel = channel or LocalChannel()
    k = min(n, max(1, int(round(sample_fraction * n))))
    pos = np.sort(rng.choice(n, size=k, replace=False))

    channel.send("alice", ChannelMessage(MessageType.TEST_SUBSET_REVEAL, alice_key.bits[pos], pos))
    got = channel.recv("bob", MessageType.TEST_SUBSET_REVEAL)
    channel.send("bob", ChannelMessage(MessageType.TEST_SUBSET_REVEAL, bob_key.bits[got.positions],
                                       got.positions))
    back = channel.recv("alice", MessageType.TEST_SUBSET_REVEAL)
    errors = int(np.sum(got.bits != bob_key.bits[got.positions]))
    if errors != int(np.sum(back.bits != alice_key.bits[pos])):
        raise ProtocolDesyncError("parties computed different error counts")
    return QberEstimate(errors / k, pos, k, errors)


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: str

    @property
    def label(self) -> str:
        return "accept" if self.accepted else "abort"


def security_decision(kind, wigner: WignerEstimate | None = None, qber: float | None = None,
                      k_sigma: float = 3.0, qber_threshold: float = 0.11) -> Decision:
    """Wigner runs pass iff w + k_sigma * std_error < 0; BB84 runs pass iff
    the estimated QBER is below ``qber_threshold``."""
    kind = ProtocolKind.parse(kind)
    if kind is ProtocolKind.WIGNER:
        if wigner is None:
            raise InsufficientDataError("Wigner protocol needs a Wigner estimate")
        bound = wigner.w + k_sigma * wigner.std_error
        if bound < 0:
            return Decision(True, f"Wigner inequality violated: w={wigner.w:.4f}+{k_sigma:g}sigma<0")
        return Decision(False, f"no significant Wigner violation: w={wigner.w:.4f}, "
                               f"w+{k_sigma:g}sigma={bound:.4f}>=0")
    if qber is None:
        raise InsufficientDataError("BB84 protocol needs a QBER estimate")
    if qber < qber_threshold:
        return Decision(True, f"QBER {qber:.4f} below threshold {qber_threshold:g}")
    return Decision(False, f"QBER {qber:.4f} at or above threshold {qber_threshold:g}")
