"""Timestamped detection streams and coincidence extraction.

Times are float64 nanoseconds since the run-start sync pulse. Each party's
time base drifts linearly and adds Gaussian jitter; coincidences are found
afterwards by comparing the two recorded lists.
"""
from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .entangle import NoiseModel, sample_pairs
from .errors import InvalidInputError, NoSignalError, UndefinedEstimateError
from .proto.schedule import MIN_SWITCH_INTERVAL_NS, SettingSchedule

NS_PER_S = 1e9
NS_PER_MIN = 60e9

DEFAULT_WINDOW_NS = 4.0


@dataclass(frozen=True)
class ClockModel:
    """Linear drift (ns per minute, signed) plus white timing jitter (ns)."""

    drift_rate: float = 0.0
    jitter_sigma: float = 0.35
    max_drift: float = 1.0

    def __post_init__(self):
        if abs(self.drift_rate) > self.max_drift:
            raise InvalidInputError(
                f"|drift_rate| = {abs(self.drift_rate)} ns/min exceeds bound {self.max_drift}"
            )
        if self.jitter_sigma < 0:
            raise InvalidInputError("jitter_sigma must be non-negative")

    def offset(self, t_ns):
        return self.drift_rate * np.asarray(t_ns, dtype=float) / NS_PER_MIN


@dataclass(frozen=True)
class SourceConfig:
    pair_rate: float = 7e5
    path_efficiency: float = 0.05
    run_duration: float = 1.0
    switch_interval: float = MIN_SWITCH_INTERVAL_NS

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise InvalidInputError("pair_rate must be positive")
        if not 0 < self.path_efficiency <= 1:
            raise InvalidInputError("path_efficiency must lie in (0, 1]")
        if not self.run_duration >= 0:
            raise InvalidInputError("run_duration must be non-negative")
        if not self.switch_interval >= MIN_SWITCH_INTERVAL_NS:
            raise InvalidInputError(
                f"switch_interval must be at least {MIN_SWITCH_INTERVAL_NS} ns"
            )

    @property
    def expected_singles_rate(self) -> float:
        return self.pair_rate * self.path_efficiency

    @property
    def expected_coincidence_rate(self) -> float:
        return self.pair_rate * self.path_efficiency**2


@dataclass
class TimestampStream:
    """One party's detection list.

    ``pair_id`` holds ground-truth emission labels from the simulator; it is
    never serialized and :meth:`public` strips it.
    """

    party: str
    times: np.ndarray
    setting_index: np.ndarray
    outcome: np.ndarray
    settings: tuple[float, ...]
    run_id: str = "run"
    schedule: str = ""
    pair_id: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.setting_index = np.asarray(self.setting_index, dtype=np.int8)
        self.outcome = np.asarray(self.outcome, dtype=np.int8)
        self.settings = tuple(float(s) for s in self.settings)
        n = len(self.times)
        if len(self.setting_index) != n or len(self.outcome) != n:
            raise InvalidInputError("times, setting_index and outcome must have equal length")
        if self.pair_id is not None and len(self.pair_id) != n:
            raise InvalidInputError("pair_id length mismatch")
        if n:
            if self.times[0] < 0:
                raise InvalidInputError("detection times must be non-negative")
            if not is_strictly_increasing(self.times):
                raise InvalidInputError("detection times must be strictly increasing")
        if np.any(np.abs(self.outcome) != 1):
            raise InvalidInputError("outcomes must be +1 or -1")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def angles(self) -> np.ndarray:
        return np.asarray(self.settings)[self.setting_index]

    def public(self) -> "TimestampStream":
        return replace(self, pair_id=None)

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# party={self.party}\n")
        buf.write(f"# run_id={self.run_id}\n")
        buf.write(f"# schedule={self.schedule}\n")
        buf.write("# settings=" + ",".join(repr(s) for s in self.settings) + "\n")
        buf.write("# columns=time_ns\tsetting_index\toutcome\n")
        buf.writelines(
            f"{t!r}\t{s}\t{o}\n"
            for t, s, o in zip(self.times.tolist(), self.setting_index.tolist(), self.outcome.tolist())
        )
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TimestampStream":
        header: dict[str, str] = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            elif line.strip():
                rows.append(line.split("\t"))
        for required in ("party", "run_id", "schedule", "settings"):
            if required not in header:
                raise InvalidInputError(f"stream header lacks '{required}'")
        settings = tuple(float(x) for x in header["settings"].split(",") if x)
        times = np.array([float(r[0]) for r in rows], dtype=np.float64)
        sidx = np.array([int(r[1]) for r in rows], dtype=np.int8)
        outc = np.array([int(r[2]) for r in rows], dtype=np.int8)
        return cls(header["party"], times, sidx, outc, settings, header["run_id"], header["schedule"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TimestampStream":
        return cls.from_text(Path(path).read_text())


def is_strictly_increasing(x: np.ndarray) -> bool:
    return bool(np.all(np.diff(x) > 0))


def _empty_stream(party, settings, run_id, schedule) -> TimestampStream:
    return TimestampStream(
        party, np.empty(0), np.empty(0, np.int8), np.empty(0, np.int8), settings,
        run_id, schedule, np.empty(0, np.int64),
    )


def generate_streams(
    source: SourceConfig,
    clocks: tuple[ClockModel, ClockModel],
    schedules: tuple[SettingSchedule, SettingSchedule],
    noise: NoiseModel,
    rng: np.random.Generator,
    attack=None,
    run_id: str = "run",
) -> tuple[TimestampStream, TimestampStream]:
    """Simulate one measurement run and return (alice, bob) detection streams.

    Pair emissions form a Poisson process; each photon survives to its
    detector independently with ``path_efficiency``. Pairs with no surviving
    photon leave no trace, so only the three visible sub-processes (both
    photons, A only, B only) are drawn, each a thinned Poisson process.
    """
    sched_a, sched_b = schedules
    clock_a, clock_b = clocks
    eta = source.path_efficiency
    t_end = source.run_duration * NS_PER_S
    visible_rate = source.pair_rate * (1.0 - (1.0 - eta) ** 2)

    if visible_rate * source.run_duration <= 0:
        warnings.warn("run duration yields zero expected events; returning empty streams")
        return (
            _empty_stream("alice", sched_a.settings, run_id, sched_a.describe()),
            _empty_stream("bob", sched_b.settings, run_id, sched_b.describe()),
        )

    rates = source.pair_rate * np.array([eta * eta, eta * (1 - eta), (1 - eta) * eta])
    counts = rng.poisson(rates * source.run_duration)
    kind = np.repeat(np.arange(3, dtype=np.int8), counts)
    t_true = rng.uniform(0.0, t_end, size=kind.size)
    order = np.argsort(t_true, kind="stable")
    t_true = t_true[order]
    kind = kind[order]
    pair_id = np.arange(t_true.size, dtype=np.int64)

    idx_a = sched_a.index_at(t_true)
    idx_b = sched_b.index_at(t_true)
    alpha = np.asarray(sched_a.settings)[idx_a]
    beta = np.asarray(sched_b.settings)[idx_b]
    out_a, out_b = sample_pairs(alpha, beta, noise, rng, attack)

    def record(party, mask, clock, idx, out, sched):
        t = t_true[mask]
        rec = t + clock.offset(t)
        if clock.jitter_sigma > 0:
            rec = rec + rng.normal(0.0, clock.jitter_sigma, size=t.size)
        o = np.argsort(rec, kind="stable")
        rec, sid, oc, pid = rec[o], idx[mask][o], out[mask][o], pair_id[mask][o]
        keep = rec >= 0
        if rec.size > 1:
            # two detections closer than float resolution register as one
            keep[1:] &= np.diff(rec) > 0
        return TimestampStream(
            party, rec[keep], sid[keep], oc[keep], sched.settings, run_id,
            sched.describe(), pid[keep],
        )

    alice = record("alice", kind != 2, clock_a, idx_a, out_a, sched_a)
    bob = record("bob", kind != 1, clock_b, idx_b, out_b, sched_b)
    return alice, bob


def poisson_stream(
    party: str, rate: float, duration_s: float, rng: np.random.Generator,
    settings: tuple[float, ...] = (0.0,),
) -> TimestampStream:
    """Uncorrelated detections at ``rate`` per second with random outcomes."""
    n = rng.poisson(rate * duration_s)
    t = np.unique(rng.uniform(0.0, duration_s * NS_PER_S, size=n))
    out = np.where(rng.random(t.size) < 0.5, 1, -1)
    return TimestampStream(party, t, np.zeros(t.size, np.int8), out, settings)


@dataclass(frozen=True)
class CoincidenceRecord:
    time_a: float
    time_b: float
    setting_a: float
    setting_b: float
    outcome_a: int
    outcome_b: int


@dataclass
class PartyRecords:
    """One party's private view of the shared coincidence list."""

    party: str
    setting_index: np.ndarray
    outcome: np.ndarray
    settings: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.outcome)


@dataclass
class CoincidenceSet:
    """Matched detections, column-wise. ``index_a``/``index_b`` point into the
    source streams."""

    index_a: np.ndarray
    index_b: np.ndarray
    time_a: np.ndarray
    time_b: np.ndarray
    setting_a: np.ndarray
    setting_b: np.ndarray
    outcome_a: np.ndarray
    outcome_b: np.ndarray
    settings_a: tuple[float, ...]
    settings_b: tuple[float, ...]
    window: float
    offset: float = 0.0
    true_pair: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.index_a)

    @property
    def angle_a(self) -> np.ndarray:
        return np.asarray(self.settings_a)[self.setting_a]

    @property
    def angle_b(self) -> np.ndarray:
        return np.asarray(self.settings_b)[self.setting_b]

    def records(self):
        aa, ab = self.angle_a, self.angle_b
        for i in range(len(self)):
            yield CoincidenceRecord(
                float(self.time_a[i]), float(self.time_b[i]), float(aa[i]), float(ab[i]),
                int(self.outcome_a[i]), int(self.outcome_b[i]),
            )

    def party_view(self, party: str) -> PartyRecords:
        if party == "alice":
            return PartyRecords("alice", self.setting_a, self.outcome_a, self.settings_a)
        return PartyRecords("bob", self.setting_b, self.outcome_b, self.settings_b)

    def select(self, mask) -> "CoincidenceSet":
        return replace(
            self,
            **{
                name: getattr(self, name)[mask]
                for name in ("index_a", "index_b", "time_a", "time_b", "setting_a",
                             "setting_b", "outcome_a", "outcome_b")
            },
            true_pair=None if self.true_pair is None else self.true_pair[mask],
        )


def _window_candidates(ta: np.ndarray, tb: np.ndarray, half_width: float):
    """All index pairs (i, j) with |tb[j] - ta[i]| <= half_width; both sorted."""
    lo = np.searchsorted(tb, ta - half_width, side="left")
    hi = np.searchsorted(tb, ta + half_width, side="right")
    n = hi - lo
    ia = np.repeat(np.arange(ta.size), n)
    starts = np.repeat(np.cumsum(n) - n, n)
    ib = np.arange(ia.size) - starts + np.repeat(lo, n)
    d = tb[ib] - ta[ia]
    ok = np.abs(d) <= half_width
    return ia[ok], ib[ok], d[ok]


def _greedy_match(ia, ib, dist, n_a, n_b):
    """Accept candidate edges in order of increasing distance, each detection
    used at most once."""
    deg_a = np.bincount(ia, minlength=n_a)
    deg_b = np.bincount(ib, minlength=n_b)
    lone = (deg_a[ia] == 1) & (deg_b[ib] == 1)
    # an edge whose endpoints have no competitors is always taken
    keep_a = [ia[lone]]
    keep_b = [ib[lone]]

    rest = np.flatnonzero(~lone)
    if rest.size:
        rest = rest[np.argsort(dist[rest], kind="stable")]
        used_a = np.zeros(n_a, bool)
        used_b = np.zeros(n_b, bool)
        sel_a, sel_b = [], []
        for i, j in zip(ia[rest].tolist(), ib[rest].tolist()):
            if not used_a[i] and not used_b[j]:
                used_a[i] = used_b[j] = True
                sel_a.append(i)
                sel_b.append(j)
        keep_a.append(np.array(sel_a, dtype=np.int64))
        keep_b.append(np.array(sel_b, dtype=np.int64))

    ma = np.concatenate(keep_a).astype(np.int64)
    mb = np.concatenate(keep_b).astype(np.int64)
    o = np.argsort(ma, kind="stable")
    return ma[o], mb[o]


def find_coincidences(
    a: TimestampStream,
    b: TimestampStream,
    window: float = DEFAULT_WINDOW_NS,
    offset_correction: bool = False,
    offset: float | None = None,
    search_span: float = 50.0,
    bin_ns: float = 0.5,
) -> CoincidenceSet:
    """Pair detections of ``a`` and ``b`` whose (offset-corrected) times differ
    by at most ``window`` ns.

    With ``offset_correction`` the constant offset of ``b`` relative to ``a``
    is estimated from the cross-correlation histogram unless ``offset`` is
    given explicitly. Nearest pairs are matched first; matching is symmetric
    in the two streams and never shrinks as the window grows.
    """
    if not window > 0:
        raise InvalidInputError("window must be positive")
    for s in (a, b):
        if len(s) and not is_strictly_increasing(s.times):
            raise InvalidInputError(f"{s.party} stream is not sorted")

    if offset is None:
        offset = 0.0
        if offset_correction and len(a) and len(b):
            try:
                offset = estimate_offset(a, b, search_span, bin_ns)
            except NoSignalError:
                warnings.warn("no correlation peak found; matching without offset correction")

    tb = b.times - offset
    ia, ib, d = _window_candidates(a.times, tb, window)
    ma, mb = _greedy_match(ia, ib, np.abs(d), len(a), len(b))

    true_pair = None
    if a.pair_id is not None and b.pair_id is not None:
        true_pair = a.pair_id[ma] == b.pair_id[mb]

    return CoincidenceSet(
        index_a=ma, index_b=mb,
        time_a=a.times[ma], time_b=b.times[mb],
        setting_a=a.setting_index[ma], setting_b=b.setting_index[mb],
        outcome_a=a.outcome[ma], outcome_b=b.outcome[mb],
        settings_a=a.settings, settings_b=b.settings,
        window=float(window), offset=float(offset), true_pair=true_pair,
    )


def estimate_offset(
    a: TimestampStream,
    b: TimestampStream,
    search_span: float = 50.0,
    bin_ns: float = 0.5,
    significance: float = 1e-6,
) -> float:
    """Offset (b minus a, in ns) at the peak of the time-difference histogram.

    Raises :class:`NoSignalError` if the peak is compatible with a flat
    accidental background (Poisson tail probability above ``significance``
    after correcting for the number of bins searched).
    """
    if not len(a) or not len(b):
        raise InvalidInputError("both streams must be non-empty")
    if not (search_span > 0 and bin_ns > 0):
        raise InvalidInputError("search_span and bin must be positive")

    _, _, d = _window_candidates(a.times, b.times, search_span)
    if d.size == 0:
        raise NoSignalError("no detection pairs within the search span")

    k = int(math.ceil(search_span / bin_ns))
    edges = (np.arange(-k, k + 2) - 0.5) * bin_ns
    hist, _ = np.histogram(d, bins=edges)
    peak = int(np.argmax(hist))
    lo, hi = max(peak - 1, 0), min(peak + 2, hist.size)
    n_bins = hist.size
    background = (hist.sum() - hist[lo:hi].sum()) / max(n_bins - (hi - lo), 1)
    background = max(background, 1.0 / n_bins)
    p_tail = stats.poisson.sf(hist[peak] - 1, background) * n_bins
    if p_tail > significance:
        raise NoSignalError(
            f"histogram peak of {hist[peak]} counts is consistent with background {background:.3g}"
        )
    center = (peak - k) * bin_ns
    near = d[np.abs(d - center) <= 1.5 * bin_ns]
    return float(np.median(near))


@dataclass(frozen=True)
class SourceStats:
    efficiency_a: float
    efficiency_b: float
    pair_rate: float
    two_pair_ratio: float


def source_stats(singles_a: float, singles_b: float, coincidences: float, window: float) -> SourceStats:
    """Infer detection efficiencies and pair rate from singles and coincidence
    rates (per second). ``window`` is in ns."""
    if coincidences <= 0:
        raise UndefinedEstimateError("coincidence rate must be positive")
    if singles_a <= 0 or singles_b <= 0 or window <= 0:
        raise InvalidInputError("singles rates and window must be positive")
    pair_rate = singles_a * singles_b / coincidences
    return SourceStats(
        efficiency_a=coincidences / singles_b,
        efficiency_b=coincidences / singles_a,
        pair_rate=pair_rate,
        two_pair_ratio=pair_rate * window / NS_PER_S,
    )
