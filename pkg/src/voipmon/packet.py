"""Simulated VoIP packet and voice-frame structures.

Everything here is a plain value: the overlay simulator moves these objects
between node handlers instead of doing real socket I/O.  The header fields
mirror the IPv4/UDP/RTP fields that the covert layer is allowed to rewrite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_FRAME_MS = 20
DEFAULT_FRAME_SAMPLES = DEFAULT_SAMPLE_RATE * DEFAULT_FRAME_MS // 1000  # 160

PCM_MIN = -32768
PCM_MAX = 32767

# Modeled wire overhead: IPv4 (20) + UDP (8) + RTP (12) bytes.  Used only for
# byte accounting, nothing is serialized onto a real wire.
HEADER_BYTES = 40

RTP_SEQ_MOD = 1 << 16


class FrameError(ValueError):
    """Voice frame violates its framing invariants."""


class PacketError(ValueError):
    """Packet constructed with out-of-domain arguments."""


@dataclass(frozen=True)
class VoiceFrame:
    """One codec frame of signed 16-bit PCM samples (G.711-like framing)."""

    samples: Tuple[int, ...]
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frame_ms: int = DEFAULT_FRAME_MS

    def __post_init__(self):
        expected = self.sample_rate * self.frame_ms // 1000
        if len(self.samples) != expected:
            raise FrameError(
                f"frame must hold {expected} samples at {self.sample_rate} Hz / "
                f"{self.frame_ms} ms, got {len(self.samples)}"
            )
        if self.samples and (min(self.samples) < PCM_MIN or max(self.samples) > PCM_MAX):
            raise FrameError("sample out of signed 16-bit PCM range")

    def __len__(self) -> int:
        return len(self.samples)


def silence_frame(sample_rate: int = DEFAULT_SAMPLE_RATE,
                  frame_ms: int = DEFAULT_FRAME_MS) -> VoiceFrame:
    """All-zero frame, the default synthetic voice payload."""
    n = sample_rate * frame_ms // 1000
    return VoiceFrame(samples=(0,) * n, sample_rate=sample_rate, frame_ms=frame_ms)


@dataclass(frozen=True)
class PacketMeta:
    """Simulation-side bookkeeping that rides along with a packet."""

    send_time: float
    origin: str
    flow: int
    prev_hop: str = ""
    tampered: bool = False
    replayed: bool = False
    # non-empty only for source-routed adversary traffic
    route: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SimPacket:
    """Modeled IP/UDP/RTP packet carrying one voice frame.

    ip_tos, ip_id, ip_flags_reserved and udp_checksum are the covert-capable
    header fields; the covert codec is the only writer of those after
    construction.
    """

    ip_tos: int
    ip_id: int
    ip_flags_reserved: int
    udp_checksum: int
    rtp_seq: int
    rtp_timestamp: int
    rtp_ssrc: int
    payload: VoiceFrame
    meta: PacketMeta

    def byte_length(self) -> int:
        return HEADER_BYTES + 2 * len(self.payload)


def flow_ssrc(flow: int) -> int:
    """Deterministic per-flow synchronization source id."""
    return (0x10000000 + flow) & 0xFFFFFFFF


def make_voice_packet(flow: int, seq: int, samples: VoiceFrame, now: float,
                      origin: str = "") -> SimPacket:
    """Build a fresh packet with all covert-capable fields zeroed.

    seq wraps modulo 2**16 into rtp_seq; rtp_timestamp advances by one frame
    of samples per packet.
    """
    if seq < 0:
        raise PacketError(f"sequence number must be >= 0, got {seq}")
    if not isinstance(samples, VoiceFrame):
        raise PacketError("samples must be a VoiceFrame")
    return SimPacket(
        ip_tos=0,
        ip_id=0,
        ip_flags_reserved=0,
        udp_checksum=0,
        rtp_seq=seq % RTP_SEQ_MOD,
        rtp_timestamp=(seq * len(samples)) % (1 << 32),
        rtp_ssrc=flow_ssrc(flow),
        payload=samples,
        meta=PacketMeta(send_time=now, origin=origin, flow=flow),
    )


def with_meta(packet: SimPacket, **changes) -> SimPacket:
    """Return a copy of the packet with updated meta fields."""
    return replace(packet, meta=replace(packet.meta, **changes))


# --- trace export -----------------------------------------------------------
#
# One JSON object per line; the record round-trips losslessly through
# trace_line / parse_trace_line.

def trace_record(packet: SimPacket, **extra) -> dict:
    rec = {
        "flow": packet.meta.flow,
        "seq": packet.rtp_seq,
        "send_time": round(packet.meta.send_time, 3),
        "origin": packet.meta.origin,
        "ip_tos": packet.ip_tos,
        "ip_id": packet.ip_id,
        "ip_flags_reserved": packet.ip_flags_reserved,
        "udp_checksum": packet.udp_checksum,
        "rtp_timestamp": packet.rtp_timestamp,
        "rtp_ssrc": packet.rtp_ssrc,
        "tampered": packet.meta.tampered,
        "replayed": packet.meta.replayed,
    }
    rec.update(extra)
    return rec


def trace_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def parse_trace_line(line: str) -> dict:
    return json.loads(line)
