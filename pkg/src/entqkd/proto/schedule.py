"""Analyzer setting sets per protocol and the random switching schedule."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError

MIN_SWITCH_INTERVAL_NS = 100.0


class ProtocolKind(enum.Enum):
    WIGNER = "wigner"
    BB84 = "bb84"

    @property
    def alice_settings(self) -> tuple[float, float]:
        return (-30.0, 0.0) if self is ProtocolKind.WIGNER else (0.0, 45.0)

    @property
    def bob_settings(self) -> tuple[float, float]:
        return (0.0, 30.0) if self is ProtocolKind.WIGNER else (0.0, 45.0)

    @property
    def key_combinations(self) -> tuple[tuple[int, int], ...]:
        """(alice index, bob index) pairs with parallel analyzers."""
        if self is ProtocolKind.WIGNER:
            return ((1, 0),)
        return ((0, 0), (1, 1))

    @property
    def wigner_combinations(self) -> dict[str, tuple[int, int]]:
        """Index pairs for the three oblique terms, chi=-30, psi=0, omega=30."""
        if self is not ProtocolKind.WIGNER:
            raise InvalidInputError("only the Wigner protocol has test combinations")
        return {"chi_psi": (0, 0), "psi_omega": (1, 1), "chi_omega": (0, 1)}

    @classmethod
    def parse(cls, value) -> "ProtocolKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidInputError(f"unknown protocol kind {value!r}") from None


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class SettingSchedule:
    """Setting choice per dwell slot, i.i.d. across slots.

    The schedule is a pure function of time: the setting active at time ``t``
    is drawn from a counter-based hash of (key, slot index), so it can be
    queried in any order and still gives the same answer.
    """

    settings: tuple[float, ...]
    probabilities: tuple[float, ...] | None = None
    dwell_ns: float = MIN_SWITCH_INTERVAL_NS
    key: int = 0
    min_dwell_ns: float = MIN_SWITCH_INTERVAL_NS

    def __post_init__(self):
        if not self.settings:
            raise InvalidInputError("schedule needs at least one setting")
        probs = self.probabilities
        if probs is None:
            probs = tuple([1.0 / len(self.settings)] * len(self.settings))
            object.__setattr__(self, "probabilities", probs)
        if len(probs) != len(self.settings):
            raise InvalidInputError("one probability per setting required")
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise InvalidInputError(f"setting probabilities must sum to 1, got {probs}")
        if not self.dwell_ns >= self.min_dwell_ns:
            raise InvalidInputError(
                f"dwell {self.dwell_ns} ns is below the minimum switching interval "
                f"{self.min_dwell_ns} ns"
            )

    @classmethod
    def for_party(cls, kind: ProtocolKind, party: str, key: int, **kw) -> "SettingSchedule":
        settings = kind.alice_settings if party == "alice" else kind.bob_settings
        return cls(settings=settings, key=key, **kw)

    def index_at(self, times_ns) -> np.ndarray:
        t = np.asarray(times_ns, dtype=float)
        slot = np.floor(t / self.dwell_ns).astype(np.int64).astype(np.uint64)
        seed = _mix64(np.array([self.key & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        u = (_mix64(slot ^ seed) >> np.uint64(11)).astype(float) * 2.0**-53
        cum = np.cumsum(self.probabilities)
        cum[-1] = 1.0
        return np.searchsorted(cum, u, side="right").astype(np.int8)

    def angle_at(self, times_ns) -> np.ndarray:
        return np.asarray(self.settings, dtype=float)[self.index_at(times_ns)]

    def describe(self) -> str:
        s = ",".join(f"{x:g}" for x in self.settings)
        p = ",".join(f"{x:g}" for x in self.probabilities)
        return f"settings={s};probabilities={p};dwell_ns={self.dwell_ns:g}"
