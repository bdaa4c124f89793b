"""One-time pad over distilled keys, plus a 1-bit PBM image codec."""
from __future__ import annotations

import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, KeyExhaustedError, ReuseForbiddenError
from .proto.engine import BitKey


class KeyPad:
    """Spend ledger over one party's key.

    Bits handed out by :meth:`take` or :meth:`take_at` are marked spent and
    can never be handed out again.
    """

    def __init__(self, key: BitKey, allow_raw: bool = False, start: int = 0):
        if key.provenance != "corrected" and not allow_raw:
            raise InvalidInputError(
                f"refusing to encrypt with a {key.provenance} key; pass allow_raw=True to override"
            )
        self.key = key
        self._spent = np.zeros(len(key), bool)
        self._spent[:start] = True
        self._cursor = start
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.key)

    @property
    def spent(self) -> int:
        return int(self._spent.sum())

    @property
    def remaining(self) -> int:
        return len(self.key) - self._cursor

    def take(self, n: int) -> np.ndarray:
        with self._lock:
            if n > self.remaining:
                raise KeyExhaustedError(f"need {n} key bits, only {self.remaining} left")
            return self._mark(self._cursor, n)

    def take_at(self, start: int, n: int) -> np.ndarray:
        with self._lock:
            if start < 0 or start + n > len(self.key):
                raise KeyExhaustedError(f"key range [{start}, {start + n}) exceeds key length")
            return self._mark(start, n)

    def _mark(self, start: int, n: int) -> np.ndarray:
        sl = slice(start, start + n)
        if self._spent[sl].any():
            raise ReuseForbiddenError(f"key bits in [{start}, {start + n}) were already used")
        self._spent[sl] = True
        self._cursor = max(self._cursor, start + n)
        return self.key.bits[sl].copy()


def xor_apply(data, pad: KeyPad) -> np.ndarray:
    """XOR ``data`` bits with the next unspent bits of ``pad``."""
    data = np.asarray(data, dtype=np.uint8)
    if np.any(data > 1):
        raise InvalidInputError("data must be a bit array")
    return data ^ pad.take(data.size)


@dataclass(frozen=True, eq=False)
class BitImage:
    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image dimensions must be positive")
        bits = np.asarray(self.bits, dtype=np.uint8).ravel()
        if bits.size != self.width * self.height:
            raise InvalidInputError(
                f"{bits.size} pixels do not fill a {self.width}x{self.height} image"
            )
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        if not isinstance(other, BitImage):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and np.array_equal(
            self.bits, other.bits)

    def as_array(self) -> np.ndarray:
        return self.bits.reshape(self.height, self.width)


def encode_image(img: BitImage) -> np.ndarray:
    return img.bits.copy()


def decode_image(bits, width: int, height: int) -> BitImage:
    return BitImage(width, height, np.asarray(bits, dtype=np.uint8).copy())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pbm(data: bytes) -> BitImage:
    """Read a P1 (ASCII) or P4 (binary) portable bitmap. 1 = black."""
    pos = 0
    tokens = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m:
            raise InvalidInputError("truncated PBM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    try:
        w, h = int(tokens[1]), int(tokens[2])
    except ValueError:
        raise InvalidInputError("malformed PBM dimensions") from None
    if magic == b"P4":
        pos += 1  # single whitespace byte before the raster
        row_bytes = (w + 7) // 8
        raster = np.frombuffer(data, np.uint8, offset=pos)
        if raster.size < row_bytes * h:
            raise InvalidInputError("truncated PBM raster")
        rows = np.unpackbits(raster[: row_bytes * h].reshape(h, row_bytes), axis=1)[:, :w]
        return BitImage(w, h, rows)
    if magic == b"P1":
        body = re.sub(rb"#[^\n]*", b"", data[pos:])
        digits = np.frombuffer(bytes(c for c in body if c in b"01"), np.uint8) - ord("0")
        if digits.size < w * h:
            raise InvalidInputError("truncated PBM raster")
        return BitImage(w, h, digits[: w * h])
    raise InvalidInputError(f"not a PBM file (magic {magic!r})")


def format_pbm(img: BitImage) -> bytes:
    """Binary (P4) encoding."""
    header = f"P4\n{img.width} {img.height}\n".encode()
    return header + np.packbits(img.as_array(), axis=1).tobytes()


def read_pbm(path) -> BitImage:
    return parse_pbm(Path(path).read_bytes())


def write_pbm(path, img: BitImage) -> None:
    Path(path).write_bytes(format_pbm(img))


def pack_ciphertext(bits) -> bytes:
    """8-byte big-endian bit count followed by packed bits, MSB first."""
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("!Q", bits.size) + np.packbits(bits).tobytes()


def unpack_ciphertext(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise InvalidInputError("ciphertext shorter than its header")
    (n,) = struct.unpack_from("!Q", data)
    body = np.frombuffer(data, np.uint8, offset=8)
    if body.size != (n + 7) // 8:
        raise InvalidInputError("ciphertext length does not match header")
    return np.unpackbits(body, count=n)


def demo_image(width: int = 240, height: int = 180) -> BitImage:
    """A deterministic test figure: nested ellipses on a dithered ground."""
    y, x = np.mgrid[0:height, 0:width]
    cx, cy = (width - 1) / 2, (height - 1) / 2
    r = np.hypot((x - cx) / (0.35 * width), (y - cy) / (0.45 * height))
    body = (r < 1.0) & ((np.floor(r * 5) % 2) == 0)
    ground = ((x + y) % 7 == 0) & (r >= 1.0)
    return BitImage(width, height, (body | ground).astype(np.uint8))
