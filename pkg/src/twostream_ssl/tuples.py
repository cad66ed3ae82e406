"""Four-class pretext tuples: (center RGB frame, SOD, label).

The label jointly encodes two binary questions: is the motion encoding in
valid temporal order, and does it come from the same clip as the RGB frame.
Class I answers yes/yes, II no/yes, III yes/no, IV no/no.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .clips import VideoClip, center_frame, motion_frames
from .errors import ConfigError, CorruptionError, DataError
from .motion import (
    MOTION_FRAME_COUNT,
    SOD_CHANNELS,
    StackOfDifferences,
    apply_permutation,
    resize_frames,
    stack_of_differences,
)
from .rng import substream
from .synthetic import dequantize_frames, quantize_frames

FORWARD_ONLY = "forward_only"
FORWARD_AND_REVERSE = "forward_and_reverse"
DIFFERENT_VIDEO = "different_video"
DIFFERENT_CLIP_SAME_VIDEO = "different_clip_same_video"
BALANCED = "balanced"
IID_UNIFORM = "iid_uniform"

IDENTITY_PERM = tuple(range(MOTION_FRAME_COUNT))
REVERSAL_PERM = tuple(reversed(IDENTITY_PERM))

DATASET_FORMAT = "pretext-dataset"
DATASET_FORMAT_VERSION = 1


class PretextLabel(IntEnum):
    CLASS_I = 0  # valid order, spatially matched
    CLASS_II = 1  # invalid order, spatially matched
    CLASS_III = 2  # valid order, mismatched
    CLASS_IV = 3  # invalid order, mismatched

    @property
    def order_valid(self) -> bool:
        return self in (PretextLabel.CLASS_I, PretextLabel.CLASS_III)

    @property
    def spatially_matched(self) -> bool:
        return self in (PretextLabel.CLASS_I, PretextLabel.CLASS_II)

    @classmethod
    def from_flags(cls, order_valid: bool, spatially_matched: bool) -> "PretextLabel":
        if spatially_matched:
            return cls.CLASS_I if order_valid else cls.CLASS_II
        return cls.CLASS_III if order_valid else cls.CLASS_IV


NUM_PRETEXT_CLASSES = len(PretextLabel)


@dataclass(frozen=True)
class TupleGenSpec:
    valid_order_set: str = FORWARD_ONLY
    mismatch_source: str = DIFFERENT_VIDEO
    class_balance: str = BALANCED
    cross_action_fraction: float = 1.0
    output_size: tuple[int, int] | None = None  # resize target; None = native
    seed: int = 0

    def __post_init__(self):
        if self.valid_order_set not in (FORWARD_ONLY, FORWARD_AND_REVERSE):
            raise ConfigError(f"valid_order_set: unknown value {self.valid_order_set!r}")
        if self.mismatch_source not in (DIFFERENT_VIDEO, DIFFERENT_CLIP_SAME_VIDEO):
            raise ConfigError(f"mismatch_source: unknown value {self.mismatch_source!r}")
        if self.class_balance not in (BALANCED, IID_UNIFORM):
            raise ConfigError(f"class_balance: unknown value {self.class_balance!r}")
        if not 0.0 <= self.cross_action_fraction <= 1.0:
            raise ConfigError(
                f"cross_action_fraction must be in [0, 1], got {self.cross_action_fraction}"
            )


def valid_permutations(spec: TupleGenSpec) -> tuple[tuple[int, ...], ...]:
    if spec.valid_order_set == FORWARD_AND_REVERSE:
        return (IDENTITY_PERM, REVERSAL_PERM)
    return (IDENTITY_PERM,)


# Identity is never a corruption; reversal is excluded from the invalid pool
# in both modes because a reversed stack is a sign-flipped, channel-reversed
# SOD and arguably temporally plausible. That leaves 6! - 2 = 718 candidates.
EXCLUDED_FROM_INVALID = (IDENTITY_PERM, REVERSAL_PERM)


def sample_invalid_permutation(rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform draw from the 718 admissible invalid-order permutations."""
    while True:
        perm = tuple(int(p) for p in rng.permutation(MOTION_FRAME_COUNT))
        if perm not in EXCLUDED_FROM_INVALID:
            return perm


@dataclass
class PretextTuple:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    sod: StackOfDifferences
    label: PretextLabel
    provenance: dict


class ClipStore:
    """Indexed clip collection with optional per-source action labels."""

    def __init__(self, clips: list[VideoClip], action_labels: dict[str, int] | None = None):
        if not clips:
            raise DataError("clip store is empty")
        self.clips = list(clips)
        self.action_labels = dict(action_labels) if action_labels else None
        self._by_source: dict[str, list[int]] = {}
        for i, clip in enumerate(self.clips):
            self._by_source.setdefault(clip.source_id, []).append(i)
        self.sources = sorted(self._by_source)

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def action_of(self, source_id: str) -> int | None:
        if self.action_labels is None:
            return None
        return self.action_labels.get(source_id)


def _pick_motion_clip(store: ClipStore, spatial: VideoClip, matched: bool,
                      spec: TupleGenSpec, rng: np.random.Generator) -> VideoClip:
    if matched:
        return spatial
    if spec.mismatch_source == DIFFERENT_CLIP_SAME_VIDEO:
        candidates = [
            i for i in store._by_source[spatial.source_id]
            if store.clips[i].start_frame != spatial.start_frame
        ]
        if not candidates:
            raise DataError(
                f"no second clip with a distinct start in {spatial.source_id!r}; "
                "mismatch_source=different_clip_same_video needs one"
            )
    else:
        candidates = [
            i for i, c in enumerate(store.clips) if c.source_id != spatial.source_id
        ]
        if not candidates:
            raise DataError(
                "mismatched tuples need clips from >= 2 distinct source videos"
            )
        spatial_action = store.action_of(spatial.source_id)
        if spatial_action is not None and rng.uniform() < spec.cross_action_fraction:
            cross = [
                i for i in candidates
                if store.action_of(store.clips[i].source_id) != spatial_action
            ]
            if not cross:
                raise DataError(
                    "cross-action mismatch requested but all other videos share "
                    f"action {spatial_action}; need >= 2 action classes"
                )
            candidates = cross
    return store.clips[candidates[int(rng.integers(len(candidates)))]]


def make_tuple(store: ClipStore, target_label: PretextLabel, spec: TupleGenSpec,
               rng: np.random.Generator) -> PretextTuple:
    """Construct one tuple whose recomputed label equals target_label."""
    spatial = store.clips[int(rng.integers(len(store.clips)))]

    if target_label.order_valid:
        valid = valid_permutations(spec)
        perm = valid[int(rng.integers(len(valid)))] if len(valid) > 1 else valid[0]
    else:
        perm = sample_invalid_permutation(rng)

    motion_clip = _pick_motion_clip(store, spatial, target_label.spatially_matched, spec, rng)

    rgb = center_frame(spatial)
    frames6 = motion_frames(motion_clip)
    if spec.output_size is not None:
        rgb = resize_frames(rgb, spec.output_size)
        frames6 = resize_frames(frames6, spec.output_size)
    sod = stack_of_differences(apply_permutation(frames6, perm))

    provenance = {
        "spatial_source_id": spatial.source_id,
        "motion_source_id": motion_clip.source_id,
        "spatial_clip_start": int(spatial.start_frame),
        "motion_clip_start": int(motion_clip.start_frame),
        "permutation": list(perm),
    }
    if store.action_labels is not None:
        provenance["spatial_action_label"] = store.action_of(spatial.source_id)
        provenance["motion_action_label"] = store.action_of(motion_clip.source_id)
    return PretextTuple(np.ascontiguousarray(rgb), sod, target_label, provenance)


def label_oracle(tup: PretextTuple, spec: TupleGenSpec) -> PretextLabel:
    """Recompute the label from provenance alone.

    Shares no code path with make_tuple's label assignment; used by tests to
    check label soundness.
    """
    perm = tuple(int(p) for p in tup.provenance["permutation"])
    order_valid = perm in valid_permutations(spec)
    matched = (
        tup.provenance["spatial_source_id"] == tup.provenance["motion_source_id"]
        and tup.provenance["spatial_clip_start"] == tup.provenance["motion_clip_start"]
    )
    return PretextLabel.from_flags(order_valid, matched)


def generate_epoch(store: ClipStore, n: int, spec: TupleGenSpec,
                   workers: int = 1) -> list[PretextTuple]:
    """Generate n tuples; BALANCED gives exactly n/4 per class.

    Each tuple draws from its own (seed, index) substream, so the result is
    identical for any worker count.
    """
    if spec.class_balance == BALANCED:
        if n % NUM_PRETEXT_CLASSES != 0:
            raise ConfigError(
                f"n must be divisible by {NUM_PRETEXT_CLASSES} in balanced mode, got {n}"
            )
        targets = np.repeat(np.arange(NUM_PRETEXT_CLASSES), n // NUM_PRETEXT_CLASSES)
        targets = targets[substream(spec.seed, "epoch-order").permutation(n)]
    else:
        targets = substream(spec.seed, "epoch-order").integers(0, NUM_PRETEXT_CLASSES, size=n)

    def build(i: int) -> PretextTuple:
        return make_tuple(store, PretextLabel(int(targets[i])), spec,
                          substream(spec.seed, "tuple", i))

    if workers <= 1:
        return [build(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, range(n)))


# ---------------------------------------------------------------------------
# Dataset container: manifest.json plus numbered shards. Record layout:
# rgb uint8 (H*W*3), sod little-endian float32 (H*W*5), label byte,
# uint32-LE provenance length, provenance UTF-8 JSON.
# ---------------------------------------------------------------------------


def _record_bytes(tup: PretextTuple) -> bytes:
    prov = json.dumps(tup.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([
        quantize_frames(tup.rgb).tobytes(),
        tup.sod.channels.astype("<f4").tobytes(),
        bytes([int(tup.label)]),
        len(prov).to_bytes(4, "little"),
        prov,
    ])


def write_dataset(tuples: list[PretextTuple], root: str | Path,
                  spec: TupleGenSpec | None = None, shard_size: int = 1000) -> dict:
    """Write tuples to numbered shards plus a manifest; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if tuples:
        height, width = tuples[0].rgb.shape[:2]
    else:
        height = width = 0
    class_counts = [0] * NUM_PRETEXT_CLASSES
    shards = []
    for shard_idx in range(0, max(len(tuples), 0), shard_size):
        chunk = tuples[shard_idx : shard_idx + shard_size]
        blob = b"".join(_record_bytes(t) for t in chunk)
        rel = f"shard-{shard_idx // shard_size:05d}.bin"
        (root / rel).write_bytes(blob)
        shards.append({
            "path": rel,
            "count": len(chunk),
            "checksum": hashlib.sha256(blob).hexdigest(),
        })
    for t in tuples:
        class_counts[int(t.label)] += 1
    manifest = {
        "format": DATASET_FORMAT,
        "format_version": DATASET_FORMAT_VERSION,
        "spec": _spec_to_json(spec) if spec is not None else None,
        "num_tuples": len(tuples),
        "height": int(height),
        "width": int(width),
        "class_counts": class_counts,
        "shards": shards,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest


def _spec_to_json(spec: TupleGenSpec) -> dict:
    d = asdict(spec)
    if d["output_size"] is not None:
        d["output_size"] = list(d["output_size"])
    return d


def read_dataset(root: str | Path) -> list[PretextTuple]:
    """Read back a dataset written by write_dataset; validates every shard."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise CorruptionError(f"not a pretext dataset manifest: {root / 'manifest.json'}")
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise CorruptionError(
            f"unsupported dataset format_version {manifest.get('format_version')}"
        )
    height, width = manifest["height"], manifest["width"]
    rgb_bytes = height * width * 3
    sod_bytes = height * width * SOD_CHANNELS * 4
    tuples: list[PretextTuple] = []
    for shard in manifest["shards"]:
        blob = (root / shard["path"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != shard["checksum"]:
            raise CorruptionError(f"checksum mismatch in shard {shard['path']}")
        offset = 0
        for _ in range(shard["count"]):
            try:
                rgb = np.frombuffer(blob, np.uint8, rgb_bytes, offset).reshape(height, width, 3)
                offset += rgb_bytes
                sod = np.frombuffer(blob, "<f4", height * width * SOD_CHANNELS, offset)
                sod = sod.reshape(height, width, SOD_CHANNELS)
                offset += sod_bytes
                label = PretextLabel(blob[offset])
                offset += 1
                prov_len = int.from_bytes(blob[offset : offset + 4], "little")
                offset += 4
                prov = json.loads(blob[offset : offset + prov_len].decode("utf-8"))
                offset += prov_len
            except (ValueError, IndexError) as exc:
                raise CorruptionError(f"truncated or malformed shard {shard['path']}") from exc
            tuples.append(PretextTuple(
                dequantize_frames(rgb),
                StackOfDifferences(np.ascontiguousarray(sod.astype(np.float32))),
                label,
                prov,
            ))
        if offset != len(blob):
            raise CorruptionError(f"trailing bytes in shard {shard['path']}")
    if len(tuples) != manifest["num_tuples"]:
        raise CorruptionError(
            f"manifest says {manifest['num_tuples']} tuples, shards held {len(tuples)}"
        )
    return tuples
