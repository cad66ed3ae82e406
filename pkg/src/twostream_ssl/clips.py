"""Fixed-length clip extraction from frame sequences.

A clip spans 70 frames by default (about 2.5 s at typical frame rates). Two
views are derived from it: the center RGB frame, and six equi-distant frames
used for the motion encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .motion import MOTION_FRAME_COUNT
from .rng import substream

DEFAULT_CLIP_LENGTH = 70


@dataclass(frozen=True)
class ClipSampleSpec:
    clip_length: int = DEFAULT_CLIP_LENGTH
    clips_per_video: int = 1
    motion_frame_count: int = MOTION_FRAME_COUNT
    seed: int = 0

    def __post_init__(self):
        if self.motion_frame_count != MOTION_FRAME_COUNT:
            # Changing this would change the SOD channel count; locked in v1.
            raise ConfigError(
                f"motion_frame_count is fixed to {MOTION_FRAME_COUNT}, "
                f"got {self.motion_frame_count}"
            )
        if self.clip_length < MOTION_FRAME_COUNT:
            raise ConfigError(
                f"clip_length must be >= {MOTION_FRAME_COUNT}, got {self.clip_length}"
            )
        if self.clips_per_video < 1:
            raise ConfigError(f"clips_per_video must be >= 1, got {self.clips_per_video}")


@dataclass
class VideoClip:
    source_id: str
    start_frame: int
    frames: np.ndarray  # (L, H, W, 3) float32 in [0, 1]

    @property
    def length(self) -> int:
        return len(self.frames)


class ClipTooShortError(DataError):
    """Source video shorter than the requested clip length."""

    def __init__(self, source_id: str, video_length: int, clip_length: int):
        super().__init__(
            f"video {source_id!r} has {video_length} frames, "
            f"need >= {clip_length}; skip it or lower clip_length"
        )
        self.source_id = source_id
        self.video_length = video_length
        self.clip_length = clip_length


def sample_clips(frames: np.ndarray, spec: ClipSampleSpec, source_id: str) -> list[VideoClip]:
    """Draw clips with uniformly random valid start frames (with replacement).

    Uses a per-video substream keyed on source_id, so sampling is independent
    of the order videos are processed in.
    """
    num_frames = len(frames)
    if num_frames < spec.clip_length:
        raise ClipTooShortError(source_id, num_frames, spec.clip_length)
    rng = substream(spec.seed, "clip-starts", source_id)
    starts = rng.integers(0, num_frames - spec.clip_length + 1, size=spec.clips_per_video)
    return [
        VideoClip(source_id, int(s), frames[int(s) : int(s) + spec.clip_length])
        for s in starts
    ]


def center_index(length: int) -> int:
    """Index of the center frame; the earlier middle frame for even lengths."""
    return (length - 1) // 2


def center_frame(clip: VideoClip) -> np.ndarray:
    return clip.frames[center_index(clip.length)]


def motion_frame_indices(length: int, count: int = MOTION_FRAME_COUNT) -> list[int]:
    """Equi-distant indices round(i * (L-1) / (count-1)) for i = 0..count-1.

    Computed in integer arithmetic. The fractional part of i*(L-1)/(count-1)
    is a multiple of 1/(count-1), so an exact .5 never occurs for count 6 and
    the result agrees with round-half-to-even.
    """
    if length < count:
        raise ValueError(f"need length >= {count}, got {length}")
    span = length - 1
    denom = count - 1
    indices = []
    for i in range(count):
        q, r = divmod(i * span, denom)
        indices.append(q + (1 if 2 * r >= denom else 0))
    return indices


def motion_frames(clip: VideoClip) -> np.ndarray:
    """The six equi-distant frames of the clip, endpoints included."""
    return clip.frames[motion_frame_indices(clip.length)]
