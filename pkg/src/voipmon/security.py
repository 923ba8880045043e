"""Keyed integrity tokens over voice content.

Every W_f consecutive frames form a verification window.  The sender computes
a 32-bit truncated HMAC over the window's samples and ships it through the
covert channel during the next window; any node holding the session key can
recompute and compare.

The carrier samples are hashed after quantizing them to the half-step QIM
lattice, so the hash commutes with watermark embedding and survives
sub-threshold channel noise; all other samples are hashed verbatim.  The
window index and the rtp sequence range are part of the preimage, which makes
replayed windows fail verification.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .covert import QimParams
from .packet import VoiceFrame

DEFAULT_WINDOW_FRAMES = 10  # 200 ms at 20 ms frames
TAG_BYTES = 4


class WindowError(ValueError):
    """Window has the wrong frame count."""


class NotReadyError(RuntimeError):
    """No verdicts in the reporting period."""


@dataclass(frozen=True)
class SessionKeys:
    """Group secret shared by all path nodes of one session."""

    session_id: int
    group_key: bytes

    def __post_init__(self):
        if len(self.group_key) < 16:
            raise ValueError("group key must be at least 128 bits")


@dataclass(frozen=True)
class IntegrityToken:
    window: int
    tag: int  # 32-bit truncation of the keyed hash

    def to_bytes(self) -> bytes:
        return self.tag.to_bytes(TAG_BYTES, "big")

    @classmethod
    def from_bytes(cls, data: bytes, window: int) -> "IntegrityToken":
        if len(data) != TAG_BYTES:
            raise ValueError("token tag is exactly 4 bytes")
        return cls(window=window, tag=int.from_bytes(data, "big"))


@dataclass(frozen=True)
class SecVerdict:
    window: int
    ssr_ok: bool
    cause: str  # ok | token_absent | tag_mismatch


def _half_lattice(x: int, step: int) -> int:
    """Quantize to the union of both QIM lattices (multiples of step/2)."""
    half = step // 2
    return ((x + half // 2) // half) * half


def _window_digest(frames: Sequence[Optional[VoiceFrame]], window: int,
                   keys: SessionKeys, qim: QimParams, first_seq: int) -> int:
    carrier = set(qim.carrier)
    step = qim.step
    parts: List[bytes] = [
        keys.session_id.to_bytes(8, "big"),
        window.to_bytes(8, "big"),
        (first_seq & 0xFFFF).to_bytes(2, "big"),
        ((first_seq + len(frames) - 1) & 0xFFFF).to_bytes(2, "big"),
    ]
    for frame in frames:
        if frame is None:
            parts.append(b"\x00")
            continue
        parts.append(b"\x01")
        vals = [
            _half_lattice(s, step) if i in carrier else s
            for i, s in enumerate(frame.samples)
        ]
        parts.append(b"".join(v.to_bytes(4, "big", signed=True) for v in vals))
    digest = hmac.new(keys.group_key, b"".join(parts), hashlib.sha256).digest()
    return int.from_bytes(digest[:TAG_BYTES], "big")


def token_generate(frames: Sequence[VoiceFrame], window: int, keys: SessionKeys,
                   qim: QimParams, first_seq: int,
                   window_frames: int = DEFAULT_WINDOW_FRAMES) -> IntegrityToken:
    """Tag the post-embedding frames of one complete window."""
    if len(frames) != window_frames or any(f is None for f in frames):
        raise WindowError(f"window needs exactly {window_frames} frames")
    return IntegrityToken(window=window,
                          tag=_window_digest(frames, window, keys, qim, first_seq))


def token_verify(frames: Sequence[Optional[VoiceFrame]], window: int, keys: SessionKeys,
                 qim: QimParams, first_seq: int, received: Optional[IntegrityToken],
                 window_frames: int = DEFAULT_WINDOW_FRAMES) -> SecVerdict:
    """Recompute the tag over whatever frames arrived and compare.

    Missing frames are hashed as absent, so loss or replacement shows up as a
    mismatch; a missing token is a failure of its own kind.
    """
    if len(frames) != window_frames:
        raise WindowError(f"window needs exactly {window_frames} frame slots")
    if received is None:
        return SecVerdict(window=window, ssr_ok=False, cause="token_absent")
    tag = _window_digest(frames, window, keys, qim, first_seq)
    if tag != received.tag:
        return SecVerdict(window=window, ssr_ok=False, cause="tag_mismatch")
    return SecVerdict(window=window, ssr_ok=True, cause="ok")


def emit_security_metric(verdicts: Sequence[SecVerdict]) -> float:
    """Fraction of verified windows over a reporting period."""
    if not verdicts:
        raise NotReadyError("no security verdicts in period")
    return sum(1 for v in verdicts if v.ssr_ok) / len(verdicts)
