"""Intercept-resend eavesdropping on Bob's photon.

Eve measures photon B in one of her bases and sends Bob a fresh photon
polarized along her result. This destroys the entanglement: the Wigner value
climbs to a non-negative number and errors appear at parallel settings.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .entangle import (
    IDEAL,
    JointProbabilities,
    NoiseModel,
    depolarize,
    joint_probabilities,
    singlet_cells,
)
from .errors import InvalidInputError

NONE = "none"
INTERCEPT_RESEND = "intercept-resend"


@dataclass(frozen=True)
class AttackModel:
    kind: str = NONE
    bases: tuple[float, ...] = ()
    probabilities: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in (NONE, INTERCEPT_RESEND):
            raise InvalidInputError(f"unknown attack kind {self.kind!r}")
        object.__setattr__(self, "bases", tuple(float(b) for b in self.bases))
        if self.kind == NONE:
            return
        if not self.bases:
            raise InvalidInputError("intercept-resend needs at least one basis")
        if not all(math.isfinite(b) for b in self.bases):
            raise InvalidInputError("Eve's bases must be finite angles")
        probs = self.probabilities
        if probs is None:
            probs = (1.0 / len(self.bases),) * len(self.bases)
        probs = tuple(float(p) for p in probs)
        if len(probs) != len(self.bases) or any(p < 0 for p in probs):
            raise InvalidInputError("one non-negative probability per basis required")
        if not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise InvalidInputError(f"basis probabilities must sum to 1, got {sum(probs)}")
        object.__setattr__(self, "probabilities", probs)

    @classmethod
    def intercept_resend(cls, bases, probabilities=None) -> "AttackModel":
        return cls(INTERCEPT_RESEND, tuple(bases), probabilities)

    @property
    def active(self) -> bool:
        return self.kind != NONE

    def intercept(self, polarization, rng: np.random.Generator) -> np.ndarray:
        """Measure photons of the given polarization (degrees) and return the
        polarization of the photons Eve resends."""
        pol = np.asarray(polarization, dtype=float)
        if not self.active:
            return pol
        choice = rng.choice(len(self.bases), size=pol.shape, p=self.probabilities)
        e = np.asarray(self.bases)[choice]
        parallel = rng.random(pol.shape) < np.cos(np.radians(pol - e)) ** 2
        return np.where(parallel, e, e + 90.0)


NO_ATTACK = AttackModel()


def _resend_transfer(e: float, beta: float) -> np.ndarray:
    """P(Bob result | Eve result) for a photon resent along e (+) or e+90 (-)."""
    c = math.cos(math.radians(e - beta)) ** 2
    s = 1.0 - c
    return np.array([[c, s], [s, c]])


def attacked_joint_probabilities(alpha: float, beta: float, attack: AttackModel = NO_ATTACK,
                                 noise: NoiseModel = IDEAL) -> JointProbabilities:
    """Joint outcome law seen by Alice (alpha) and Bob (beta) with Eve on
    photon B, mixed over Eve's basis choice, then depolarized."""
    if not attack.active:
        return joint_probabilities(alpha, beta, noise)
    if not (math.isfinite(alpha) and math.isfinite(beta)):
        raise InvalidInputError("angles must be finite")
    cells = np.zeros((2, 2))
    for e, w in zip(attack.bases, attack.probabilities):
        # Alice vs Eve is a singlet measurement; Bob then sees Eve's resent state
        cells += w * singlet_cells(alpha, e) @ _resend_transfer(e, beta)
    m = depolarize(cells, noise)
    return JointProbabilities(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))


def attacked_wigner_value(attack: AttackModel, noise: NoiseModel = IDEAL) -> float:
    p = lambda a, b: attacked_joint_probabilities(a, b, attack, noise).p_pp  # noqa: E731
    return p(-30.0, 0.0) + p(0.0, 30.0) - p(-30.0, 30.0)


@dataclass(frozen=True)
class AttackReport:
    kind: str
    clean: dict
    attacked: dict
    detected: bool

    @property
    def statistic(self) -> str:
        return "w" if self.kind == "wigner" else "qber"

    @property
    def clean_value(self) -> float:
        return self.clean[self.statistic]

    @property
    def attacked_value(self) -> float:
        return self.attacked[self.statistic]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "statistic": self.statistic, "clean": self.clean,
            "attacked": self.attacked, "detected": self.detected,
        }


def attack_report(kind, attack: AttackModel, run_size: int, noise: NoiseModel = IDEAL,
                  seed: int = 0, source=None, **overrides) -> AttackReport:
    """Run the full pipeline with and without ``attack``.

    ``run_size`` is the target number of coincidences. Without an explicit
    ``source`` a lossless desk source (1e5 pairs/s, efficiency 1) is used so
    that large runs stay cheap.
    """
    from .pipeline import RunConfig, run_pipeline  # pipeline imports this module

    pair_rate = source.pair_rate if source is not None else 1e5
    eff = source.path_efficiency if source is not None else 1.0
    duration = run_size / (pair_rate * eff * eff)
    base = dict(
        protocol=str(getattr(kind, "value", kind)), seed=seed, pair_rate=pair_rate,
        path_efficiency=eff, duration=duration, visibility=noise.visibility,
    )
    base.update(overrides)

    def summary(cfg):
        res = run_pipeline(cfg)
        return {
            "coincidences": res.stats["coincidences"],
            "sifted_length": res.stats["sifted_length"],
            "w": res.stats.get("w"),
            "w_std_error": res.stats.get("w_std_error"),
            "qber": res.stats.get("qber"),
            "decision": res.decision.label,
            "reason": res.decision.reason,
        }

    clean = summary(RunConfig(**base, attack=NONE))
    attacked = summary(RunConfig(**base, attack=attack.kind, eve_bases=attack.bases,
                                 eve_probabilities=attack.probabilities))
    return AttackReport(str(base["protocol"]), clean, attacked, attacked["decision"] == "abort")
