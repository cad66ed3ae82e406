"""Stack-of-differences (SOD) motion encoding.

Six equi-distant frames are converted to grayscale and consecutive
differences are stacked, giving a 5-channel image in [-1, 1]. The map is
linear and unnormalized, so reversing the frame order negates and reverses
the channels, which is what makes temporal order detectable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

MOTION_FRAME_COUNT = 6
SOD_CHANNELS = MOTION_FRAME_COUNT - 1

# Rec. 601 luma coefficients.
LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


def _validate_frame(frame: np.ndarray, name: str = "frame") -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {frame.shape}")
    # NaNs fail both comparisons, so they are rejected here too.
    if not bool(((frame >= 0.0) & (frame <= 1.0)).all()):
        raise ValueError(f"{name} has values outside [0, 1]")
    return frame.astype(np.float32, copy=False)


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """Luma projection 0.299 R + 0.587 G + 0.114 B; returns (H, W, 1)."""
    frame = _validate_frame(frame)
    gray = (
        frame[..., 0] * np.float32(LUMA_R)
        + frame[..., 1] * np.float32(LUMA_G)
        + frame[..., 2] * np.float32(LUMA_B)
    )
    return gray[..., np.newaxis]


@dataclass(frozen=True)
class StackOfDifferences:
    """5-channel motion encoding; channel c = gray(frame c+1) - gray(frame c)."""

    channels: np.ndarray  # (H, W, 5) float32, values in [-1, 1]

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[2] != SOD_CHANNELS:
            raise ValueError(
                f"SOD must have shape (H, W, {SOD_CHANNELS}), got {ch.shape}"
            )

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]


def stack_of_differences(frames: np.ndarray) -> StackOfDifferences:
    """Compute the SOD from exactly six (H, W, 3) frames in [0, 1]."""
    frames = np.asarray(frames)
    if len(frames) != MOTION_FRAME_COUNT:
        raise ValueError(
            f"stack_of_differences needs {MOTION_FRAME_COUNT} frames, got {len(frames)}"
        )
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames have mismatched shapes: {sorted(shapes)}")
    grays = [to_grayscale(f)[..., 0] for f in frames]
    channels = np.stack(
        [grays[c + 1] - grays[c] for c in range(SOD_CHANNELS)], axis=-1
    )
    return StackOfDifferences(channels.astype(np.float32, copy=False))


def apply_permutation(frames: np.ndarray, perm) -> np.ndarray:
    """Reorder frames so output[i] = frames[perm[i]]; perm must be a bijection."""
    frames = np.asarray(frames)
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(len(frames))):
        raise ValueError(f"perm must be a permutation of 0..{len(frames) - 1}, got {perm}")
    return frames[list(perm)]


def resize_frames(frames: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (..., H, W, 3) frames to (height, width).

    Resizing happens before differencing everywhere in the pipeline so that
    SOD values are reproducible to the bit.
    """
    frames = np.asarray(frames, dtype=np.float32)
    squeeze = frames.ndim == 3
    if squeeze:
        frames = frames[np.newaxis]
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ValueError(f"expected (N, H, W, 3) frames, got {frames.shape}")
    h, w = int(size[0]), int(size[1])
    if (frames.shape[1], frames.shape[2]) != (h, w):
        t = torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2)
        t = torch.nn.functional.interpolate(
            t, size=(h, w), mode="bilinear", align_corners=False
        )
        frames = np.clip(t.permute(0, 2, 3, 1).numpy(), 0.0, 1.0)
    return frames[0] if squeeze else frames
