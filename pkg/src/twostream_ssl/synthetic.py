"""Deterministic toy-video corpus with motion-defined action classes.

Each video shows one or more shapes following a motion program on a toroidal
canvas (shapes wrap around the edges). The action label is the program index,
so class identity is recoverable from motion but, because background, shape
kind, color, size, and position are randomized per video, not from any single
frame. Identical (spec, seed) produces bit-identical corpora: all randomness
comes from per-video PCG64 substreams and rendering is plain float64 pixel
membership with anti-aliasing off.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, CorruptionError
from .rng import substream

MOTION_PROGRAMS = (
    "translate-right",
    "translate-down",
    "clockwise-orbit",
    "horizontal-oscillation",
)

CORPUS_FORMAT = "corpus-manifest"
CORPUS_FORMAT_VERSION = 1
MIN_FRAME_SIDE = 16

# Shape geometry bounds, in pixels. Kept well under the minimum frame side so
# a shape never covers the majority of the canvas (the foreground oracle in
# the tests relies on the background being the most common color).
DISC_RADIUS = (3.0, 5.0)
RECT_HALF_EXTENT = (2.5, 4.5)
ORBIT_RADIUS = (5.0, 9.0)
ORBIT_PERIOD = (20.0, 40.0)
OSC_AMPLITUDE = (4.0, 8.0)
OSC_PERIOD = (16.0, 32.0)
TRANSLATE_SPEEDS = (1, 2)
MIN_COLOR_CONTRAST = 0.25


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_videos: int
    frames_per_video: int = 140
    frame_size: tuple[int, int] = (32, 32)
    num_action_classes: int = 4
    shapes_per_video: int = 1
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be >= 1, got {self.num_videos}")
        if self.frames_per_video < 2:
            raise ConfigError(
                f"frames_per_video must be >= 2, got {self.frames_per_video}"
            )
        h, w = self.frame_size
        if min(h, w) < MIN_FRAME_SIDE:
            raise ConfigError(
                f"frame_size {self.frame_size} too small to render shapes; "
                f"need both sides >= {MIN_FRAME_SIDE}"
            )
        if not 2 <= self.num_action_classes <= len(MOTION_PROGRAMS):
            raise ConfigError(
                f"num_action_classes must be in [2, {len(MOTION_PROGRAMS)}], "
                f"got {self.num_action_classes}"
            )
        if self.shapes_per_video < 1:
            raise ConfigError(
                f"shapes_per_video must be >= 1, got {self.shapes_per_video}"
            )
        if not 0.0 <= self.noise_std <= 1.0:
            raise ConfigError(f"noise_std must be in [0, 1], got {self.noise_std}")


@dataclass
class SyntheticVideo:
    video_id: str
    action_label: int
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1], on the 8-bit grid


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    """Float [0,1] frames to uint8 with round-half-up."""
    clipped = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def dequantize_frames(data: np.ndarray) -> np.ndarray:
    return (data.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _toroidal_delta(coords: np.ndarray, pos: float, size: int) -> np.ndarray:
    # Signed distance on a circle of circumference `size`, in [-size/2, size/2).
    return (coords - pos + size / 2.0) % size - size / 2.0


def _shape_mask(shape: dict, x: float, y: float, cols: np.ndarray, rows: np.ndarray,
                width: int, height: int) -> np.ndarray:
    dx = _toroidal_delta(cols, x, width)[np.newaxis, :]
    dy = _toroidal_delta(rows, y, height)[:, np.newaxis]
    if shape["kind"] == "disc":
        return dx * dx + dy * dy <= shape["radius"] ** 2
    return (np.abs(dx) <= shape["half_w"]) & (np.abs(dy) <= shape["half_h"])


def _draw_shape_params(rng: np.random.Generator, bg: np.ndarray,
                       width: int, height: int) -> dict:
    shape: dict = {"kind": "disc" if rng.uniform() < 0.5 else "rect"}
    while True:
        color = rng.uniform(0.0, 1.0, size=3)
        if np.max(np.abs(color - bg)) >= MIN_COLOR_CONTRAST:
            break
    shape["color"] = color
    if shape["kind"] == "disc":
        shape["radius"] = rng.uniform(*DISC_RADIUS)
    else:
        shape["half_w"] = rng.uniform(*RECT_HALF_EXTENT)
        shape["half_h"] = rng.uniform(*RECT_HALF_EXTENT)
    shape["x0"] = rng.uniform(0.0, width)
    shape["y0"] = rng.uniform(0.0, height)
    return shape


def generate_video(spec: SyntheticCorpusSpec, index: int) -> SyntheticVideo:
    """Render video `index` of the corpus; a pure function of (spec, index)."""
    rng = substream(spec.seed, "video", index)
    label = index % spec.num_action_classes
    program = MOTION_PROGRAMS[label]
    height, width = spec.frame_size
    cols = np.arange(width, dtype=np.float64)
    rows = np.arange(height, dtype=np.float64)

    # Draw order is fixed: background, program parameters, per-shape
    # appearance, then per-frame noise. Reordering would change corpora.
    bg = rng.uniform(0.0, 1.0, size=3)

    if program in ("translate-right", "translate-down"):
        speed = int(TRANSLATE_SPEEDS[rng.integers(0, len(TRANSLATE_SPEEDS))])
        omega = phase = 0.0
    elif program == "clockwise-orbit":
        speed = 0
        omega = 2.0 * np.pi / rng.uniform(*ORBIT_PERIOD)
        phase = rng.uniform(0.0, 2.0 * np.pi)
    else:  # horizontal-oscillation
        speed = 0
        omega = 2.0 * np.pi / rng.uniform(*OSC_PERIOD)
        phase = rng.uniform(0.0, 2.0 * np.pi)

    shapes = []
    for _ in range(spec.shapes_per_video):
        shape = _draw_shape_params(rng, bg, width, height)
        if program == "clockwise-orbit":
            shape["orbit_radius"] = rng.uniform(*ORBIT_RADIUS)
        elif program == "horizontal-oscillation":
            shape["amplitude"] = rng.uniform(*OSC_AMPLITUDE)
        shapes.append(shape)

    def position(shape: dict, t: int) -> tuple[float, float]:
        if program == "translate-right":
            return shape["x0"] + speed * t, shape["y0"]
        if program == "translate-down":
            return shape["x0"], shape["y0"] + speed * t
        if program == "clockwise-orbit":
            # Image coordinates have y pointing down, so an increasing angle
            # in (cos, sin) sweeps right -> down -> left -> up: clockwise.
            theta = phase + omega * t
            return (
                shape["x0"] + shape["orbit_radius"] * np.cos(theta),
                shape["y0"] + shape["orbit_radius"] * np.sin(theta),
            )
        return shape["x0"] + shape["amplitude"] * np.sin(phase + omega * t), shape["y0"]

    frames = np.empty((spec.frames_per_video, height, width, 3), dtype=np.float32)
    for t in range(spec.frames_per_video):
        canvas = np.broadcast_to(bg, (height, width, 3)).copy()
        for shape in shapes:
            x, y = position(shape, t)
            mask = _shape_mask(shape, x, y, cols, rows, width, height)
            canvas[mask] = shape["color"]
        if spec.noise_std > 0.0:
            canvas = canvas + rng.normal(0.0, spec.noise_std, size=canvas.shape)
        frames[t] = dequantize_frames(quantize_frames(canvas))

    return SyntheticVideo(f"video-{index:05d}", label, frames)


def generate_corpus(spec: SyntheticCorpusSpec, workers: int = 1) -> list[SyntheticVideo]:
    """Generate the full corpus; output is identical for any worker count."""
    if workers <= 1:
        return [generate_video(spec, i) for i in range(spec.num_videos)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: generate_video(spec, i), range(spec.num_videos)))


# ---------------------------------------------------------------------------
# Disk format: manifest.json plus one flat binary file per video, uint8
# little-endian (endianness is trivial for single bytes), frame-major layout
# [frame][row][col][channel]. Dimensions live only in the manifest.
# ---------------------------------------------------------------------------


def _manifest_entry(video: SyntheticVideo, path: str) -> dict:
    t, h, w, _ = video.frames.shape
    return {
        "video_id": video.video_id,
        "action_label": int(video.action_label),
        "num_frames": int(t),
        "height": int(h),
        "width": int(w),
        "path": path,
    }


def _write_manifest(root: Path, corpus_seed: int, entries: list[dict],
                    spec: SyntheticCorpusSpec | None) -> dict:
    manifest = {
        "format": CORPUS_FORMAT,
        "format_version": CORPUS_FORMAT_VERSION,
        "corpus_seed": int(corpus_seed),
        "entries": entries,
    }
    if spec is not None:
        manifest["spec"] = asdict(spec)
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def corpus_to_disk(corpus: list[SyntheticVideo], root: str | Path,
                   spec: SyntheticCorpusSpec | None = None) -> dict:
    """Write binary frame containers plus manifest.json; returns the manifest."""
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for video in corpus:
        rel = f"videos/{video.video_id}.bin"
        quantize_frames(video.frames).tofile(root / rel)
        entries.append(_manifest_entry(video, rel))
    seed = spec.seed if spec is not None else 0
    return _write_manifest(root, seed, entries, spec)


def corpus_to_image_dirs(corpus: list[SyntheticVideo], root: str | Path,
                         spec: SyntheticCorpusSpec | None = None) -> dict:
    """Write each video as a directory of numbered PNG frames (same manifest)."""
    root = Path(root)
    entries = []
    for video in corpus:
        rel = f"videos/{video.video_id}"
        video_dir = root / rel
        video_dir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(quantize_frames(video.frames)):
            Image.fromarray(frame, mode="RGB").save(video_dir / f"frame_{t:06d}.png")
        entries.append(_manifest_entry(video, rel))
    seed = spec.seed if spec is not None else 0
    return _write_manifest(root, seed, entries, spec)


def _load_entry_frames(root: Path, entry: dict) -> np.ndarray:
    t, h, w = entry["num_frames"], entry["height"], entry["width"]
    path = root / entry["path"]
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if len(files) != t:
            raise CorruptionError(
                f"{entry['video_id']}: expected {t} frame images, found {len(files)}"
            )
        stack = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
        if stack.shape != (t, h, w, 3):
            raise CorruptionError(
                f"{entry['video_id']}: frame images have shape {stack.shape[1:3]}, "
                f"manifest says ({h}, {w})"
            )
        return dequantize_frames(stack)
    data = np.fromfile(path, dtype=np.uint8)
    expected = t * h * w * 3
    if data.size != expected:
        raise CorruptionError(
            f"{entry['video_id']}: container {path.name} has {data.size} bytes, "
            f"expected {expected}"
        )
    return dequantize_frames(data.reshape(t, h, w, 3))


def read_corpus(root: str | Path) -> tuple[list[SyntheticVideo], dict]:
    """Read a corpus written by corpus_to_disk or corpus_to_image_dirs.

    Also accepts user-supplied data in the same layout: a manifest.json and,
    per video, either a flat uint8 container or a directory of numbered
    image frames.
    """
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != CORPUS_FORMAT:
        raise CorruptionError(f"not a corpus manifest: {root / 'manifest.json'}")
    if manifest.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorruptionError(
            f"unsupported corpus format_version {manifest.get('format_version')}"
        )
    videos = [
        SyntheticVideo(e["video_id"], int(e["action_label"]), _load_entry_frames(root, e))
        for e in manifest["entries"]
    ]
    return videos, manifest
