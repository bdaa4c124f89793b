"""Single-pass parity-block error reduction.

Keys are cut into blocks of ``n`` bits. Alice publishes one parity bit per
block, Bob answers which blocks agree, and both keep the agreeing blocks minus
their last bit. Blocks with an even number of errors slip through, so some
errors remain; the closed forms below neglect three or more errors per block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError, ProtocolDesyncError
from .proto.channel import ChannelMessage, LocalChannel, MessageType
from .proto.engine import BitKey

N_MAX = 64


def binom_pnk(n: int, k: int, p: float) -> float:
    """Probability of exactly ``k`` errors in ``n`` bits at error rate ``p``."""
    if not (isinstance(n, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise InvalidInputError("n and k must be integers")
    if n < 0 or not 0 <= k <= n:
        raise InvalidInputError(f"need 0 <= k <= n, got n={n}, k={k}")
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return 1.0 if k == 0 else 0.0
    if p == 1.0:
        return 1.0 if k == n else 0.0
    log_c = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    return math.exp(log_c + k * math.log(p) + (n - k) * math.log1p(-p))


@dataclass(frozen=True)
class ECParams:
    n: int
    p: float = 0.0

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 2:
            raise InvalidInputError(f"block length must be an integer >= 2, got {self.n!r}")
        if not 0.0 <= self.p < 0.5:
            raise InvalidInputError(f"error rate must lie in [0, 0.5), got {self.p}")


def efficiency(n: int, p: float) -> float:
    """Expected ratio of key length after / before reduction."""
    ECParams(n, p)
    return (1.0 - binom_pnk(n, 1, p)) * (n - 1) / n


def residual_error(n: int, p: float) -> float:
    """Expected bit error rate after reduction (two-error blocks dominate)."""
    ECParams(n, p)
    # summing the tail avoids cancellation in 1 - P0 - P1 at small p
    tail = math.fsum(binom_pnk(n, k, p) for k in range(2, n + 1))
    return min(tail, 1.0) * 2.0 / n


def optimal_block(p: float, n_max: int = N_MAX, first_peak: bool = False) -> int:
    """Block length in [2, n_max] maximizing :func:`efficiency`; ties go to
    the smaller block. For vanishing ``p`` this is ``n_max``.

    The efficiency formula ignores the cost of multi-error blocks, so above
    roughly p = 3% it turns back up at large n, where the residual error is
    no longer small. ``first_peak=True`` stops at the first local maximum.
    """
    if not 0.0 < p < 0.5:
        raise InvalidInputError(f"error rate must lie in (0, 0.5), got {p}")
    if n_max < 2:
        raise InvalidInputError("n_max must be at least 2")
    best_n, best = 2, -1.0
    for n in range(2, n_max + 1):
        e = efficiency(n, p)
        if e > best:
            best_n, best = n, e
        elif first_peak and e < best:
            break
    return best_n


@dataclass(frozen=True)
class ECReport:
    n: int
    p: float
    input_length: int
    output_length: int
    blocks_total: int
    blocks_kept: int
    disclosed_bits: int
    predicted_efficiency: float
    realized_efficiency: float
    predicted_residual: float
    realized_residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def block_parities(bits: np.ndarray, n: int) -> np.ndarray:
    m = bits.size // n
    return (bits[: m * n].reshape(m, n).sum(axis=1) & 1).astype(np.uint8)


def parity_reduce(alice_key: BitKey, bob_key: BitKey, params: ECParams,
                  transport: LocalChannel | None = None) -> tuple[BitKey, BitKey, ECReport]:
    if len(alice_key) != len(bob_key):
        raise ProtocolDesyncError(
            f"key lengths differ: alice {len(alice_key)}, bob {len(bob_key)}"
        )
    channel = transport or LocalChannel()
    n = params.n
    m = len(alice_key) // n

    channel.send("alice", ChannelMessage(MessageType.PARITY_VECTOR, block_parities(alice_key.bits, n)))
    alice_par = channel.recv("bob", MessageType.PARITY_VECTOR).bits
    if alice_par.size != m:
        raise ProtocolDesyncError("parity vector length does not match Bob's block count")
    decision = (alice_par == block_parities(bob_key.bits, n)).astype(np.uint8)
    channel.send("bob", ChannelMessage(MessageType.PARITY_DECISION, decision))
    keep = channel.recv("alice", MessageType.PARITY_DECISION).bits.astype(bool)

    def reduce(key: BitKey, mask: np.ndarray) -> BitKey:
        blocks = key.bits[: m * n].reshape(m, n)
        return BitKey(blocks[mask, : n - 1].ravel(), "corrected", key.party)

    out_a = reduce(alice_key, keep)
    out_b = reduce(bob_key, decision.astype(bool))

    length_in = len(alice_key)
    length_out = len(out_a)
    realized_residual = float(np.mean(out_a.bits != out_b.bits)) if length_out else 0.0
    report = ECReport(
        n=n,
        p=params.p,
        input_length=length_in,
        output_length=length_out,
        blocks_total=m,
        blocks_kept=int(keep.sum()),
        disclosed_bits=m,
        predicted_efficiency=efficiency(n, params.p),
        realized_efficiency=length_out / length_in if length_in else 0.0,
        predicted_residual=residual_error(n, params.p),
        realized_residual=realized_residual,
    )
    return out_a, out_b, report
