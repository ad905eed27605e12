"""Message segmentation, frame encryption and reassembly.

Wire layout of one frame plaintext (``chunk_bytes`` long, a multiple of
the AES block)::

    byte 0                 seq / type tag
    bytes 1..chunk_bytes-1 body

Data frames carry consecutive slices of ``len(payload).to_bytes(4) ||
payload || random pad`` and are numbered 0, 1, 2, ...  Tags 0xFE and 0xFF
mark acknowledgment and chaff frames; 251-253 are reserved.
"""
from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import BlockSizeError, CorruptMessage, IncompleteMessage, MessageTooLarge, ProfileTooSmall

BLOCK_BYTES = 16
LENGTH_BYTES = 4
MAX_DATA_SEQ = 250
MAX_FRAMES = MAX_DATA_SEQ + 1
ACK_TAG = 0xFE
CHAFF_TAG = 0xFF
MIN_CHUNK_BYTES = 32


@dataclass(frozen=True)
class Frame:
    seq: int
    body: bytes

    @property
    def kind(self) -> str:
        if self.seq <= MAX_DATA_SEQ:
            return "data"
        if self.seq == ACK_TAG:
            return "ack"
        if self.seq == CHAFF_TAG:
            return "chaff"
        return "reserved"

    def to_bytes(self) -> bytes:
        return bytes([self.seq]) + self.body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Frame":
        return cls(raw[0], bytes(raw[1:]))


def _check_chunk(chunk_bytes: int) -> None:
    if chunk_bytes < MIN_CHUNK_BYTES or chunk_bytes % BLOCK_BYTES:
        raise BlockSizeError(f"chunk size {chunk_bytes} must be >= {MIN_CHUNK_BYTES} and a multiple of {BLOCK_BYTES}")


def frames_needed(payload_len: int, chunk_bytes: int) -> int:
    return math.ceil((LENGTH_BYTES + payload_len) / (chunk_bytes - 1))


def max_payload(chunk_bytes: int) -> int:
    """Largest payload that still fits in the 1-byte sequence space."""
    return MAX_FRAMES * (chunk_bytes - 1) - LENGTH_BYTES


def segment(
    payload: bytes,
    chunk_bytes: int,
    randbytes: Callable[[int], bytes] = secrets.token_bytes,
) -> list[Frame]:
    """Split one message into data frames, padding the last body with random bytes."""
    _check_chunk(chunk_bytes)
    if not payload:
        raise ValueError("cannot segment an empty message")
    if len(payload) >= 1 << 32:
        raise MessageTooLarge("payload length does not fit the 4-byte prefix")
    body_len = chunk_bytes - 1
    n = frames_needed(len(payload), chunk_bytes)
    if n > MAX_FRAMES:
        raise MessageTooLarge(
            f"{len(payload)} bytes need {n} frames, at most {MAX_FRAMES} fit (max payload {max_payload(chunk_bytes)})"
        )
    stream = len(payload).to_bytes(LENGTH_BYTES, "big") + payload
    stream += randbytes(n * body_len - len(stream))
    return [Frame(i, stream[i * body_len:(i + 1) * body_len]) for i in range(n)]


def declared_length(frame0: Frame) -> int:
    return int.from_bytes(frame0.body[:LENGTH_BYTES], "big")


def reassemble(frames: Iterable[Frame], chunk_bytes: int) -> bytes:
    """Rebuild the payload from its data frames (any order, duplicates allowed).

    Raises IncompleteMessage when sequence numbers are missing and
    CorruptMessage on conflicting duplicates or an impossible length.
    """
    _check_chunk(chunk_bytes)
    body_len = chunk_bytes - 1
    by_seq: dict[int, bytes] = {}
    for f in frames:
        if f.kind != "data":
            raise CorruptMessage(f"frame tag {f.seq:#04x} is not a data frame")
        if len(f.body) != body_len:
            raise CorruptMessage(f"frame {f.seq}: body is {len(f.body)} bytes, expected {body_len}")
        prev = by_seq.setdefault(f.seq, f.body)
        if prev != f.body:
            raise CorruptMessage(f"two different frames share seq {f.seq}")
    if not by_seq:
        raise IncompleteMessage([0])
    top = max(by_seq)
    missing = [i for i in range(top + 1) if i not in by_seq]
    if missing:
        raise IncompleteMessage(missing)
    length = declared_length(Frame(0, by_seq[0]))
    if LENGTH_BYTES + length > (top + 1) * body_len:
        raise CorruptMessage(f"declared length {length} exceeds the {top + 1} frames present")
    if frames_needed(length, chunk_bytes) < top + 1:
        raise CorruptMessage(f"declared length {length} leaves frames past the end")
    stream = b"".join(by_seq[i] for i in range(top + 1))
    return stream[LENGTH_BYTES:LENGTH_BYTES + length]


@lru_cache(maxsize=32)
def _cipher(key: bytes) -> Cipher:
    return Cipher(algorithms.AES(key), modes.ECB())


def encrypt_frame(frame: Frame | bytes, key: bytes) -> bytes:
    plain = frame.to_bytes() if isinstance(frame, Frame) else bytes(frame)
    if not plain or len(plain) % BLOCK_BYTES:
        raise BlockSizeError(f"frame of {len(plain)} bytes is not a whole number of blocks")
    enc = _cipher(bytes(key)).encryptor()
    return enc.update(plain) + enc.finalize()


def decrypt_frame(ciphertext: bytes, key: bytes) -> Frame:
    if not ciphertext or len(ciphertext) % BLOCK_BYTES:
        raise BlockSizeError(f"ciphertext of {len(ciphertext)} bytes is not a whole number of blocks")
    dec = _cipher(bytes(key)).decryptor()
    return Frame.from_bytes(dec.update(bytes(ciphertext)) + dec.finalize())


def chunk_size_for(usable_bits) -> int:
    """Largest whole-block frame size whose bits fit in one datagram.

    Accepts a profile or a bit count.
    """
    bits = getattr(usable_bits, "usable_bits", usable_bits)
    if bits < 8 * MIN_CHUNK_BYTES:
        raise ProfileTooSmall(f"datagram carries {bits} bits, need at least {8 * MIN_CHUNK_BYTES}")
    return (bits // (8 * BLOCK_BYTES)) * BLOCK_BYTES
