"""Covert transport: header-field steganography plus QIM audio watermarking.

Two sub-channels share each voice packet.  A 32-bit control word is scattered
over unused/optional header fields (the stego channel) and up to
bits_per_frame payload bits are quantized into the PCM samples (the watermark
channel).  Neither changes the packet's byte length, so monitoring data rides
for free on the media stream.

Control word layout, MSB first (frozen wire format):

    [version:2][msg_type:3][seq:8][payload_len:6][crc8:8][reserved:5]

crc8 uses polynomial 0x07, init 0x00, computed over the leading 19 bits
zero-padded to 24.  Default field map, in serialization order:

    field              offset  width
    ip_id                   0     16
    ip_tos                  0      8
    ip_flags_reserved       0      1
    udp_checksum            0     16

41 mapped bits total; the word occupies the first 32, the trailing 9 are
written as zero and checked on extraction.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

from .packet import PCM_MAX, PCM_MIN, SimPacket, VoiceFrame

CONTROL_WORD_BITS = 32


class CapacityError(ValueError):
    """Requested payload does not fit the covert channel."""


class MsgType(IntEnum):
    QOS = 0
    SEC = 1
    REP_SHARE = 2
    KEEPALIVE = 3


# --- crc8 -------------------------------------------------------------------

def _make_crc8_table(poly: int) -> Tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = ((crc << 1) ^ poly) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table.append(crc)
    return tuple(table)


_CRC8_TABLE = _make_crc8_table(0x07)


def crc8(data: bytes) -> int:
    """CRC-8, polynomial 0x07, init 0x00, no reflection."""
    crc = 0
    for b in data:
        crc = _CRC8_TABLE[crc ^ b]
    return crc


# --- control word ------------------------------------------------------------

@dataclass(frozen=True)
class ControlWord:
    version: int
    msg_type: int
    seq: int
    payload_len: int
    crc: int

    def _prefix24(self) -> bytes:
        # 19 content bits, left-aligned in 3 bytes
        v = (self.version << 22) | (self.msg_type << 19) | (self.seq << 11) | (self.payload_len << 5)
        return v.to_bytes(3, "big")

    @classmethod
    def compose(cls, msg_type: int, seq: int, payload_len: int, version: int = 0) -> "ControlWord":
        if not 0 <= version < 4 or not 0 <= msg_type < 8:
            raise ValueError("version/msg_type out of range")
        if not 0 <= seq < 256 or not 0 <= payload_len < 64:
            raise ValueError("seq/payload_len out of range")
        word = cls(version=version, msg_type=msg_type, seq=seq, payload_len=payload_len, crc=0)
        return replace(word, crc=crc8(word._prefix24()))

    def packed(self) -> int:
        return ((self.version << 30) | (self.msg_type << 27) | (self.seq << 19)
                | (self.payload_len << 13) | (self.crc << 5))

    @classmethod
    def from_packed(cls, word: int) -> "ControlWord":
        return cls(
            version=(word >> 30) & 0x3,
            msg_type=(word >> 27) & 0x7,
            seq=(word >> 19) & 0xFF,
            payload_len=(word >> 13) & 0x3F,
            crc=(word >> 5) & 0xFF,
        )

    def verify(self, packed: int) -> bool:
        # reserved bits must be zero and the crc must match
        if packed & 0x1F:
            return False
        return crc8(self._prefix24()) == self.crc


# --- field map ----------------------------------------------------------------

FIELD_WIDTHS = {
    "ip_tos": 8,
    "ip_id": 16,
    "ip_flags_reserved": 1,
    "udp_checksum": 16,
}


@dataclass(frozen=True)
class FieldSlot:
    """A bit range inside one covert-capable header field.

    offset counts from the field's most significant bit.
    """

    field: str
    offset: int
    width: int


@dataclass(frozen=True)
class FieldMap:
    slots: Tuple[FieldSlot, ...]

    def __post_init__(self):
        used: Dict[str, set] = {}
        for slot in self.slots:
            if slot.field not in FIELD_WIDTHS:
                raise ValueError(f"unknown covert field {slot.field!r}")
            fw = FIELD_WIDTHS[slot.field]
            if slot.offset < 0 or slot.width <= 0 or slot.offset + slot.width > fw:
                raise ValueError(f"slot {slot} exceeds {slot.field} width {fw}")
            bits = set(range(slot.offset, slot.offset + slot.width))
            if bits & used.setdefault(slot.field, set()):
                raise ValueError(f"overlapping slots on {slot.field}")
            used[slot.field] |= bits

    @property
    def total_width(self) -> int:
        return sum(s.width for s in self.slots)


DEFAULT_FIELD_MAP = FieldMap(slots=(
    FieldSlot("ip_id", 0, 16),
    FieldSlot("ip_tos", 0, 8),
    FieldSlot("ip_flags_reserved", 0, 1),
    FieldSlot("udp_checksum", 0, 16),
))


def _pack_stream(packet: SimPacket, fmap: FieldMap, stream: int) -> SimPacket:
    """Write total_width bits (MSB first) across the mapped field slots."""
    changes = {}
    consumed = 0
    total = fmap.total_width
    for slot in fmap.slots:
        chunk = (stream >> (total - consumed - slot.width)) & ((1 << slot.width) - 1)
        fw = FIELD_WIDTHS[slot.field]
        shift = fw - slot.offset - slot.width
        mask = ((1 << slot.width) - 1) << shift
        old = changes.get(slot.field, getattr(packet, slot.field))
        changes[slot.field] = (old & ~mask) | (chunk << shift)
        consumed += slot.width
    return replace(packet, **changes)


def _unpack_stream(packet: SimPacket, fmap: FieldMap) -> int:
    stream = 0
    for slot in fmap.slots:
        fw = FIELD_WIDTHS[slot.field]
        shift = fw - slot.offset - slot.width
        chunk = (getattr(packet, slot.field) >> shift) & ((1 << slot.width) - 1)
        stream = (stream << slot.width) | chunk
    return stream


def stego_embed(packet: SimPacket, word: ControlWord, fmap: FieldMap = DEFAULT_FIELD_MAP) -> SimPacket:
    """Spread the 32 control bits over the mapped header fields.

    Mapped bits beyond the word are zeroed so that extraction can tell a
    tampered trailer from a clean one.
    """
    if fmap.total_width < CONTROL_WORD_BITS:
        raise CapacityError(
            f"field map provides {fmap.total_width} bits, control word needs {CONTROL_WORD_BITS}")
    stream = word.packed() << (fmap.total_width - CONTROL_WORD_BITS)
    return _pack_stream(packet, fmap, stream)


def stego_extract(packet: SimPacket, fmap: FieldMap = DEFAULT_FIELD_MAP) -> Optional[ControlWord]:
    """Recover the control word, or None when the packet fails validation.

    Rejects on crc mismatch, nonzero reserved bits, or nonzero trailer bits,
    which together flag tampering and non-monitoring packets.
    """
    if fmap.total_width < CONTROL_WORD_BITS:
        raise CapacityError("field map narrower than a control word")
    stream = _unpack_stream(packet, fmap)
    pad_bits = fmap.total_width - CONTROL_WORD_BITS
    if pad_bits and stream & ((1 << pad_bits) - 1):
        return None
    packed = stream >> pad_bits
    word = ControlWord.from_packed(packed)
    if not word.verify(packed):
        return None
    return word


# --- QIM watermark ------------------------------------------------------------

@dataclass(frozen=True)
class QimParams:
    """Quantization-index-modulation parameters for one session.

    Carrier positions are a keyed pseudorandom pick of sample indices; both
    ends derive the same positions from the shared session key.
    """

    step: int = 64
    bits_per_frame: int = 16
    carrier: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.step <= 0 or self.step % 2:
            raise ValueError("QIM step must be a positive even integer")
        if len(self.carrier) != self.bits_per_frame:
            raise ValueError("carrier index count must equal bits_per_frame")
        if len(set(self.carrier)) != len(self.carrier):
            raise ValueError("carrier indices must be distinct")

    @classmethod
    def keyed(cls, key: bytes, frame_samples: int = 160, bits_per_frame: int = 16,
              step: int = 64) -> "QimParams":
        if bits_per_frame > frame_samples:
            raise ValueError("bits_per_frame exceeds frame sample count")
        seed = int.from_bytes(hashlib.sha256(key + b"|carrier").digest()[:8], "big")
        rng = random.Random(seed)
        positions = list(range(frame_samples))
        rng.shuffle(positions)
        return cls(step=step, bits_per_frame=bits_per_frame,
                   carrier=tuple(positions[:bits_per_frame]))


def qim_embed_sample(x: int, bit: int, step: int) -> int:
    """Quantize one sample onto the lattice selected by bit.

    Lattice points are step*k + bit*step/2; ties round toward the larger
    point.  The result is clamped to the PCM range.
    """
    offset = step // 2 if bit else 0
    q = (x - offset + step // 2) // step
    y = q * step + offset
    return min(PCM_MAX, max(PCM_MIN, y))


def qim_decode_sample(x: int, step: int) -> int:
    """Nearest-lattice decision; equidistant samples decode as 0."""
    half = step // 2
    r0 = x % step
    d0 = min(r0, step - r0)
    r1 = (x - half) % step
    d1 = min(r1, step - r1)
    return 0 if d0 <= d1 else 1


def wm_embed(frame: VoiceFrame, payload_bits: Sequence[int], params: QimParams) -> VoiceFrame:
    """Embed payload_bits at the keyed carrier positions; other samples stay."""
    if len(payload_bits) > params.bits_per_frame:
        raise CapacityError(
            f"{len(payload_bits)} bits exceed frame capacity {params.bits_per_frame}")
    samples = list(frame.samples)
    for bit, pos in zip(payload_bits, params.carrier):
        samples[pos] = qim_embed_sample(samples[pos], bit, params.step)
    return replace(frame, samples=tuple(samples))


def wm_extract(frame: VoiceFrame, nbits: int, params: QimParams) -> Tuple[int, ...]:
    """Decode nbits from the carrier positions.  Always decodes; integrity is
    checked upstream by the token layer."""
    if nbits > params.bits_per_frame:
        raise CapacityError(f"cannot extract {nbits} bits, capacity {params.bits_per_frame}")
    samples = frame.samples
    return tuple(qim_decode_sample(samples[pos], params.step) for pos in params.carrier[:nbits])


def bytes_to_bits(data: bytes) -> Tuple[int, ...]:
    bits = []
    for byte in data:
        for i in range(7, -1, -1):
            bits.append((byte >> i) & 1)
    return tuple(bits)


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    if len(bits) % 8:
        raise ValueError("bit count must be a byte multiple")
    out = bytearray()
    for i in range(0, len(bits), 8):
        byte = 0
        for b in bits[i:i + 8]:
            byte = (byte << 1) | (b & 1)
        out.append(byte)
    return bytes(out)


# --- per-session channel -------------------------------------------------------

class CovertChannel:
    """Session-scoped sender/receiver for the two covert sub-channels.

    Holds the per-type sequence counters; one instance per session owner.
    The watermark payload budget is bits_per_frame per packet, i.e.
    floor(bits_per_frame / 8) bytes.
    """

    def __init__(self, session_key: bytes, fmap: FieldMap = DEFAULT_FIELD_MAP,
                 qim: Optional[QimParams] = None, version: int = 0):
        self.key = session_key
        self.fmap = fmap
        self.qim = qim if qim is not None else QimParams.keyed(session_key)
        self.version = version
        self._counters: Dict[int, int] = {t: 0 for t in MsgType}

    @property
    def payload_capacity(self) -> int:
        return self.qim.bits_per_frame // 8

    def next_seq(self, msg_type: int) -> int:
        seq = self._counters[msg_type]
        self._counters[msg_type] = (seq + 1) % 256
        return seq

    def send_measurement(self, packet: SimPacket, msg_type: int, payload_bytes: bytes,
                         seq: Optional[int] = None) -> SimPacket:
        """Compose and embed a control word plus watermark payload.

        The packet's byte length is unchanged: both sub-channels overwrite
        existing bits instead of appending data.
        """
        if len(payload_bytes) > self.payload_capacity:
            raise CapacityError(
                f"{len(payload_bytes)} payload bytes exceed per-packet capacity "
                f"{self.payload_capacity}")
        if seq is None:
            seq = self.next_seq(msg_type)
        word = ControlWord.compose(msg_type, seq, len(payload_bytes), version=self.version)
        out = stego_embed(packet, word, self.fmap)
        if payload_bytes:
            frame = wm_embed(out.payload, bytes_to_bits(payload_bytes), self.qim)
            out = replace(out, payload=frame)
        return out

    def receive(self, packet: SimPacket) -> Optional[Tuple[ControlWord, bytes]]:
        """Extract (control word, payload bytes); None for non-monitoring or
        tampered headers."""
        word = stego_extract(packet, self.fmap)
        if word is None:
            return None
        if word.payload_len:
            bits = wm_extract(packet.payload, 8 * word.payload_len, self.qim)
            return word, bits_to_bytes(bits)
        return word, b""


class RepShareAssembler:
    """Reassembles multi-packet REP_SHARE payloads from per-packet chunks.

    Fragments of one message share a control-word seq; chunks are ordered by
    the carrier's rtp_seq and the first byte of the message announces the
    total record count.  A lost fragment voids the message.
    """

    RECORD_BYTES = 3

    def __init__(self):
        self._partial: Dict[int, Dict[int, bytes]] = {}

    def feed(self, msg_seq: int, rtp_seq: int, chunk: bytes) -> Optional[bytes]:
        frags = self._partial.setdefault(msg_seq, {})
        frags[rtp_seq] = chunk
        data = b"".join(frags[k] for k in sorted(frags))
        if not data:
            return None
        count = data[0] & 0x7F
        total = 1 + count * self.RECORD_BYTES
        if len(data) >= total:
            del self._partial[msg_seq]
            return data[:total]
        return None

    def reset(self):
        self._partial.clear()
