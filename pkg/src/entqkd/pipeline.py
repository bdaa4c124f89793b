"""End-to-end run: generate -> coincide -> sift -> test -> decide -> correct.

Each stage appends one JSON-serializable dict to the run report. Reports hold
no wall-clock data, so identical configurations give byte-identical reports.
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import chrono
from .adversary import NONE, AttackModel
from .entangle import NoiseModel
from .errors import (
    InsufficientDataError,
    InvalidInputError,
    QKDError,
    StageError,
    UndefinedEstimateError,
)
from .parity_ec import ECParams, optimal_block, parity_reduce
from .proto.channel import LocalChannel
from .proto.engine import (
    BitKey,
    Decision,
    estimate_qber,
    prepare_streams,
    security_decision,
    sift,
    wigner_test_over_channel,
)
from .proto.schedule import ProtocolKind


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise InvalidInputError(f"not a boolean: {text!r}")


def _optional_floats(text):
    if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none")):
        return None
    return _floats(text)


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "bb84"
    seed: int = 0
    pair_rate: float = 7e5
    path_efficiency: float = 0.05
    duration: float = 1.0
    visibility: float = 0.95
    window_ns: float = chrono.DEFAULT_WINDOW_NS
    switch_interval_ns: float = 100.0
    drift_a: float = 0.0
    drift_b: float = 0.0
    jitter_a: float = 0.35
    jitter_b: float = 0.35
    max_drift: float = 1.0
    offset_correction: bool = True
    attack: str = NONE
    eve_bases: tuple[float, ...] = ()
    eve_probabilities: tuple[float, ...] | None = None
    sample_fraction: float = 0.1
    ec_block: str = "auto"
    wigner_k_sigma: float = 3.0
    qber_threshold: float = 0.11

    def __post_init__(self):
        for f in fields(self):
            if f.name not in self._PARSERS:
                object.__setattr__(self, f.name, float(getattr(self, f.name)))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "offset_correction", _bool(self.offset_correction))
        object.__setattr__(self, "protocol", ProtocolKind.parse(self.protocol).value)
        object.__setattr__(self, "eve_bases", _floats(self.eve_bases))
        object.__setattr__(self, "eve_probabilities", _optional_floats(self.eve_probabilities))
        object.__setattr__(self, "ec_block", str(self.ec_block).strip().lower())
        for name in ("pair_rate", "path_efficiency", "window_ns", "switch_interval_ns",
                     "wigner_k_sigma", "qber_threshold", "max_drift"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.duration < 0:
            raise InvalidInputError("duration must be non-negative")
        if self.ec_block != "auto":
            try:
                n = int(self.ec_block)
            except ValueError:
                raise InvalidInputError(f"ec_block must be 'auto' or an integer, got {self.ec_block!r}") from None
            if n < 2:
                raise InvalidInputError("ec_block must be at least 2")
        # constructing the models validates the remaining fields
        self.noise_model()
        self.clocks()
        self.source()
        self.attack_model()

    _PARSERS = {
        "protocol": str, "seed": int, "offset_correction": _bool, "attack": str,
        "eve_bases": _floats, "eve_probabilities": _optional_floats, "ec_block": str,
    }

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for raw_key, raw in values.items():
            key = raw_key.strip().replace("-", "_")
            if key not in known:
                raise InvalidInputError(f"unknown config key {raw_key!r}")
            kwargs[key] = cls._PARSERS.get(key, float)(raw)
        return cls(**kwargs)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """Flat ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InvalidInputError(f"line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eve_bases"] = list(self.eve_bases)
        d["eve_probabilities"] = None if self.eve_probabilities is None else list(self.eve_probabilities)
        return d

    @property
    def kind(self) -> ProtocolKind:
        return ProtocolKind(self.protocol)

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.visibility)

    def source(self) -> chrono.SourceConfig:
        return chrono.SourceConfig(self.pair_rate, self.path_efficiency, self.duration,
                                   self.switch_interval_ns)

    def clocks(self) -> tuple[chrono.ClockModel, chrono.ClockModel]:
        return (chrono.ClockModel(self.drift_a, self.jitter_a, self.max_drift),
                chrono.ClockModel(self.drift_b, self.jitter_b, self.max_drift))

    def attack_model(self) -> AttackModel:
        if self.attack == NONE:
            return AttackModel()
        # Eve defaults to Bob's analyzer settings
        bases = self.eve_bases or self.kind.bob_settings
        return AttackModel(self.attack, bases, self.eve_probabilities)


@dataclass
class PipelineResult:
    config: RunConfig
    report: list[dict]
    stats: dict
    decision: Decision
    alice_stream: chrono.TimestampStream | None = None
    bob_stream: chrono.TimestampStream | None = None
    coincidences: chrono.CoincidenceSet | None = None
    sifted: tuple[BitKey, BitKey] | None = None
    corrected: tuple[BitKey, BitKey] | None = None
    channel: LocalChannel = field(default_factory=LocalChannel)

    @property
    def exit_code(self) -> int:
        return 0 if self.decision.accepted else 2

    def report_text(self) -> str:
        return format_report(self.report)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def format_report(report: list[dict]) -> str:
    return "".join(json.dumps(_plain(line), sort_keys=True) + "\n" for line in report)


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (QKDError, ValueError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(config: RunConfig, streams_dir=None) -> PipelineResult:
    kind = config.kind
    report: list[dict] = [{"stage": "config", **config.to_dict()}]
    stats: dict = {}
    channel = LocalChannel()
    duration = config.duration

    with _stage("generate"):
        alice, bob, rng = prepare_streams(
            kind, config.source(), config.noise_model(), config.clocks(), config.seed,
            config.attack_model() if config.attack != NONE else None,
        )
        gen = {"stage": "generate", "singles_a": len(alice), "singles_b": len(bob)}
        if duration > 0:
            gen["singles_rate_a"] = len(alice) / duration
            gen["singles_rate_b"] = len(bob) / duration
        if streams_dir is not None:
            out = Path(streams_dir)
            out.mkdir(parents=True, exist_ok=True)
            for s in (alice, bob):
                s.public().save(out / f"{s.run_id}-{s.party}.tsv")
            gen["streams"] = [f"{alice.run_id}-alice.tsv", f"{bob.run_id}-bob.tsv"]
        report.append(gen)

    with _stage("coincide"):
        coinc = chrono.find_coincidences(alice, bob, config.window_ns,
                                         offset_correction=config.offset_correction)
        co = {"stage": "coincide", "coincidences": len(coinc), "offset_ns": coinc.offset,
              "window_ns": config.window_ns}
        if duration > 0:
            co["coincidence_rate"] = len(coinc) / duration
            if len(coinc) and len(alice) and len(bob):
                st = chrono.source_stats(len(alice) / duration, len(bob) / duration,
                                         len(coinc) / duration, config.window_ns)
                co["source_stats"] = asdict(st)
        report.append(co)
        stats["coincidences"] = len(coinc)

    with _stage("sift"):
        a_rec, b_rec = coinc.party_view("alice"), coinc.party_view("bob")
        sres = sift(kind, a_rec, b_rec, channel)
        combos = {}
        for ia, sa in enumerate(kind.alice_settings):
            for ib, sb in enumerate(kind.bob_settings):
                m = (coinc.setting_a == ia) & (coinc.setting_b == ib)
                combos[f"{sa:g},{sb:g}"] = int(m.sum())
        sf = {"stage": "sift", "sifted_length": len(sres.alice_key),
              "discarded_fraction": sres.discarded_fraction,
              "sift_fraction": 1.0 - sres.discarded_fraction if len(coinc) else 0.0,
              "combination_counts": combos}
        if duration > 0:
            sf["key_rate"] = len(sres.alice_key) / duration
        report.append(sf)
        stats["sifted_length"] = len(sres.alice_key)

    with _stage("test"):
        test: dict = {"stage": "test"}
        wig = None
        if kind is ProtocolKind.WIGNER:
            try:
                wig = wigner_test_over_channel(a_rec, b_rec, sres.public_settings, channel)
            except (InsufficientDataError, UndefinedEstimateError) as exc:
                test["wigner_error"] = str(exc)
            else:
                test.update(w=wig.w, w_std_error=wig.std_error, probabilities=wig.probabilities,
                            counts=wig.counts)
                stats["w"], stats["w_std_error"] = wig.w, wig.std_error
        qest = None
        key_a, key_b = sres.alice_key, sres.bob_key
        if len(key_a):
            qest = estimate_qber(key_a, key_b, config.sample_fraction, rng, channel)
            key_a = key_a.without(qest.revealed_positions)
            key_b = key_b.without(qest.revealed_positions)
            test.update(qber=qest.qber, qber_sample=qest.sample_size, qber_errors=qest.errors,
                        remaining_length=len(key_a))
            stats["qber"] = qest.qber
        report.append(test)

    with _stage("decide"):
        try:
            decision = security_decision(kind, wig, None if qest is None else qest.qber,
                                         config.wigner_k_sigma, config.qber_threshold)
        except InsufficientDataError as exc:
            decision = Decision(False, f"insufficient data: {exc}")
        report.append({"stage": "decide", "decision": decision.label, "reason": decision.reason})

    corrected = None
    with _stage("correct"):
        if decision.accepted and qest is not None:
            p = qest.qber
            if config.ec_block == "auto":
                n = optimal_block(min(max(p, 1e-9), 0.499), first_peak=True)
            else:
                n = int(config.ec_block)
            out_a, out_b, ec = parity_reduce(key_a, key_b, ECParams(n, min(p, 0.499)), channel)
            corrected = (out_a, out_b)
            report.append({"stage": "correct", **ec.to_dict()})
            stats["corrected_length"] = ec.output_length
            stats["residual"] = ec.realized_residual
        else:
            report.append({"stage": "correct", "skipped": True})

    report.append({
        "stage": "summary", "decision": decision.label, "exit_code": 0 if decision.accepted else 2,
        "final_key_length": 0 if corrected is None else len(corrected[0]),
        "channel_messages": len(channel.log), "channel_bytes": channel.bytes_sent,
    })
    return PipelineResult(config, report, stats, decision, alice, bob, coinc,
                          (sres.alice_key, sres.bob_key), corrected, channel)
