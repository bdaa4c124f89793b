"""Singlet-pair polarization statistics.

Closed-form joint outcome probabilities for the polarization singlet under
a white-noise (depolarizing) channel, and a seeded Monte-Carlo sampler that
realizes them by sequential projective measurement.

Angles are in degrees. An outcome of +1 means "polarization parallel to the
analyzer axis" (key bit 1), -1 means orthogonal (key bit 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

PLUS = 1
MINUS = -1


def normalize_angle(deg):
    """Map a polarizer angle onto its representative in [-90, 90).

    Works on scalars and arrays alike.
    """
    out = (np.asarray(deg, dtype=float) + 90.0) % 180.0 - 90.0
    return float(out) if np.ndim(out) == 0 else out


def outcome_to_bit(outcome):
    """+1 -> 1, -1 -> 0."""
    return (np.asarray(outcome) > 0).astype(np.uint8)


@dataclass(frozen=True)
class NoiseModel:
    """Depolarizing channel: the pair state is the singlet with probability
    ``visibility`` and white noise otherwise."""

    visibility: float = 1.0

    def __post_init__(self):
        v = self.visibility
        if not (isinstance(v, (int, float)) and math.isfinite(v) and 0.0 <= v <= 1.0):
            raise InvalidInputError(f"visibility must lie in [0, 1], got {v!r}")

    @classmethod
    def from_qber(cls, qber: float) -> "NoiseModel":
        return cls(visibility_for_qber(qber))


IDEAL = NoiseModel(1.0)


@dataclass(frozen=True)
class JointProbabilities:
    p_pp: float
    p_pm: float
    p_mp: float
    p_mm: float

    def as_array(self) -> np.ndarray:
        """Cells in order ++, +-, -+, --."""
        return np.array([self.p_pp, self.p_pm, self.p_mp, self.p_mm])

    @property
    def p_equal(self) -> float:
        """Probability of equal outcomes, i.e. a key error after Bob's inversion."""
        return self.p_pp + self.p_mm


def _check_angle(x, name):
    if not np.all(np.isfinite(np.asarray(x, dtype=float))):
        raise InvalidInputError(f"{name} must be finite, got {x!r}")


def _sin2(deg):
    return np.sin(np.radians(deg)) ** 2


def _cos2(deg):
    return np.cos(np.radians(deg)) ** 2


def singlet_cells(alpha, beta) -> np.ndarray:
    """Ideal singlet cell probabilities, shape (..., 2, 2) indexed [a, b]
    with index 0 for +1 and 1 for -1."""
    d = np.asarray(alpha, dtype=float) - np.asarray(beta, dtype=float)
    same = 0.5 * _sin2(d)
    diff = 0.5 * _cos2(d)
    return np.stack(
        [np.stack([same, diff], axis=-1), np.stack([diff, same], axis=-1)], axis=-2
    )


def depolarize(cells: np.ndarray, noise: NoiseModel) -> np.ndarray:
    v = noise.visibility
    return v * cells + (1.0 - v) / 4.0


def joint_probabilities(alpha: float, beta: float, noise: NoiseModel = IDEAL) -> JointProbabilities:
    _check_angle(alpha, "alpha")
    _check_angle(beta, "beta")
    m = depolarize(singlet_cells(alpha, beta), noise)
    return JointProbabilities(
        float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1])
    )


def qber_for_visibility(noise: NoiseModel) -> float:
    """Error rate at parallel analyzer settings: (1 - V) / 2."""
    return (1.0 - noise.visibility) / 2.0


def visibility_for_qber(qber: float) -> float:
    if not 0.0 <= qber <= 0.5:
        raise InvalidInputError(f"qber must lie in [0, 0.5], got {qber!r}")
    return 1.0 - 2.0 * qber


def sample_pairs(alpha, beta, noise: NoiseModel, rng: np.random.Generator, attack=None):
    """Draw outcome pairs for analyzer angles ``alpha`` (photon A) and ``beta``
    (photon B); both broadcast to a common shape.

    Alice's photon is measured first: her outcome is a fair coin and photon B
    collapses to the orthogonal polarization. If ``attack`` is given, its
    ``intercept(polarization, rng)`` replaces photon B's polarization before Bob
    measures. With probability 1 - V the pair is replaced by two independent
    fair coins.

    Returns two int8 arrays of +1/-1.
    """
    _check_angle(alpha, "alpha")
    _check_angle(beta, "beta")
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    shape = alpha.shape
    n = alpha.size
    alpha = alpha.ravel()
    beta = beta.ravel()

    a_plus = rng.random(n) < 0.5
    pol_b = alpha + np.where(a_plus, 90.0, 0.0)
    if attack is not None:
        pol_b = attack.intercept(pol_b, rng)
    b_plus = rng.random(n) < _cos2(pol_b - beta)

    out_a = np.where(a_plus, PLUS, MINUS).astype(np.int8)
    out_b = np.where(b_plus, PLUS, MINUS).astype(np.int8)

    if noise.visibility < 1.0:
        noisy = rng.random(n) >= noise.visibility
        k = int(noisy.sum())
        coins = rng.random((2, k)) < 0.5
        out_a[noisy] = np.where(coins[0], PLUS, MINUS)
        out_b[noisy] = np.where(coins[1], PLUS, MINUS)

    return out_a.reshape(shape), out_b.reshape(shape)


def sample_pair(alpha: float, beta: float, noise: NoiseModel, rng: np.random.Generator, attack=None):
    a, b = sample_pairs(np.array([alpha]), np.array([beta]), noise, rng, attack)
    return int(a[0]), int(b[0])


def count_cells(out_a, out_b) -> dict:
    """Tally outcome pairs into the four coincidence counts."""
    a = np.asarray(out_a) > 0
    b = np.asarray(out_b) > 0
    return {
        "pp": int(np.sum(a & b)),
        "pm": int(np.sum(a & ~b)),
        "mp": int(np.sum(~a & b)),
        "mm": int(np.sum(~a & ~b)),
    }
