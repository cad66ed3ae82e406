"""Two-tower network with subtraction fusion.

A spatial tower embeds the center RGB frame, a topology-identical motion
tower embeds the 5-channel stack of differences, and the two embeddings are
fused by elementwise subtraction (spatial minus motion) right after the
first fully connected layer's nonlinearity. Task heads sit on the fused
feature: a 4-way pretext head and a K-way downstream head.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, CorruptionError
from .motion import SOD_CHANNELS
from .rng import substream

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# (filters, kernel, stride, pool) per conv stage; pool 1 means no pooling.
TOWER_PRESETS: dict[str, tuple[tuple[int, int, int, int], ...]] = {
    "tiny": ((16, 3, 1, 2), (32, 3, 1, 2), (64, 3, 1, 2)),
    "tiny-grad": ((8, 3, 1, 2), (16, 3, 1, 2)),
    "alexnet-like": ((96, 11, 4, 2), (256, 5, 1, 2), (384, 3, 1, 1), (384, 3, 1, 1), (256, 3, 1, 2)),
}
PRESET_EMBEDDING_DIM = {"tiny": 256, "tiny-grad": 16, "alexnet-like": 4096}
PRESET_INPUT_SIZE = {"tiny": (32, 32), "tiny-grad": (8, 8), "alexnet-like": (224, 224)}


@dataclass(frozen=True)
class TowerSpec:
    name: str
    conv_stages: tuple[tuple[int, int, int, int], ...]
    embedding_dim: int
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(
            self, "conv_stages", tuple(tuple(int(v) for v in s) for s in self.conv_stages)
        )
        if not self.conv_stages:
            raise ConfigError("conv_stages must not be empty")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")

    @classmethod
    def preset(cls, name: str, input_channels: int = 3,
               embedding_dim: int | None = None) -> "TowerSpec":
        if name not in TOWER_PRESETS:
            raise ConfigError(f"unknown tower preset {name!r}; have {sorted(TOWER_PRESETS)}")
        return cls(
            name=name,
            conv_stages=TOWER_PRESETS[name],
            embedding_dim=embedding_dim or PRESET_EMBEDDING_DIM[name],
            input_channels=input_channels,
        )


@dataclass(frozen=True)
class TwoStreamConfig:
    tower: TowerSpec  # spatial variant; the motion tower differs only in input channels
    input_size: tuple[int, int] = (32, 32)
    fusion: str = "subtract"
    fusion_point: str = "embedding"
    spatial_frozen: bool = True
    pretext_classes: int = 4
    downstream_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.fusion != "subtract":
            raise ConfigError(f"fusion: only 'subtract' is supported, got {self.fusion!r}")
        if self.fusion_point != "embedding":
            raise ConfigError(
                f"fusion_point: only 'embedding' (the first fc layer) is supported, "
                f"got {self.fusion_point!r}"
            )
        if self.pretext_classes != 4:
            raise ConfigError(f"pretext_classes is fixed to 4, got {self.pretext_classes}")
        if self.downstream_classes < 2:
            raise ConfigError(
                f"downstream_classes must be >= 2, got {self.downstream_classes}"
            )

    def motion_tower(self) -> TowerSpec:
        return replace(self.tower, input_channels=SOD_CHANNELS)

    def fingerprint(self) -> str:
        return _digest({
            "tower": asdict(self.tower),
            "input_size": list(self.input_size),
            "fusion": self.fusion,
            "fusion_point": self.fusion_point,
            "pretext_classes": self.pretext_classes,
            "downstream_classes": self.downstream_classes,
        })

    def tower_fingerprint(self, which: str) -> str:
        spec = self.tower if which == "spatial" else self.motion_tower()
        return _digest({"tower": asdict(spec), "input_size": list(self.input_size)})


def _digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Tower(nn.Module):
    """Conv stages followed by one fully connected embedding layer (post-ReLU)."""

    def __init__(self, spec: TowerSpec, input_size: tuple[int, int]):
        super().__init__()
        self.spec = spec
        self.input_size = tuple(input_size)
        layers: list[nn.Module] = []
        channels = spec.input_channels
        h, w = self.input_size
        for i, (filters, kernel, stride, pool) in enumerate(spec.conv_stages):
            layers.append(nn.Conv2d(channels, filters, kernel, stride=stride, padding=kernel // 2))
            layers.append(nn.ReLU())
            h = (h + 2 * (kernel // 2) - kernel) // stride + 1
            w = (w + 2 * (kernel // 2) - kernel) // stride + 1
            if pool > 1:
                layers.append(nn.MaxPool2d(pool))
                h, w = h // pool, w // pool
            if h < 1 or w < 1:
                raise ConfigError(
                    f"conv stage {i} of tower {spec.name!r} shrinks {input_size} below 1x1"
                )
            channels = filters
        self.conv = nn.Sequential(*layers)
        self.flat_dim = channels * h * w
        self.fc = nn.Linear(self.flat_dim, spec.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        expected = (self.spec.input_channels, *self.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"tower {self.spec.name!r} expects input (B, {expected[0]}, "
                f"{expected[1]}, {expected[2]}), got {tuple(x.shape)}"
            )
        x = self.conv(x)
        return torch.relu(self.fc(x.flatten(1)))


def _make_head(embedding_dim: int, num_classes: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(embedding_dim, embedding_dim),
        nn.ReLU(),
        nn.Linear(embedding_dim, num_classes),
    )


def subtract_fusion(spatial_emb: torch.Tensor, motion_emb: torch.Tensor) -> torch.Tensor:
    """Elementwise spatial minus motion; swapping the inputs negates it."""
    if spatial_emb.shape != motion_emb.shape:
        raise ValueError(
            f"fusion needs equal-width embeddings, got {tuple(spatial_emb.shape)} "
            f"vs {tuple(motion_emb.shape)}"
        )
    return spatial_emb - motion_emb


class TwoStreamNet(nn.Module):
    def __init__(self, config: TwoStreamConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.spatial = Tower(config.tower, config.input_size)
        self.motion = Tower(config.motion_tower(), config.input_size)
        self.pretext_head = _make_head(config.tower.embedding_dim, config.pretext_classes)
        self.downstream_head = _make_head(config.tower.embedding_dim, config.downstream_classes)
        self.spatial_provenance = "random"
        self._spatial_frozen = False
        init_parameters(self, seed)
        if config.spatial_frozen:
            freeze_spatial(self)

    def embed_spatial(self, rgb: torch.Tensor) -> torch.Tensor:
        return self.spatial(rgb)

    def embed_motion(self, sod: torch.Tensor) -> torch.Tensor:
        return self.motion(sod)

    def fused(self, rgb: torch.Tensor, sod: torch.Tensor) -> torch.Tensor:
        return subtract_fusion(self.embed_spatial(rgb), self.embed_motion(sod))

    def forward_pretext(self, rgb: torch.Tensor, sod: torch.Tensor) -> torch.Tensor:
        return self.pretext_head(self.fused(rgb, sod))

    def forward_downstream(self, rgb: torch.Tensor, sod: torch.Tensor) -> torch.Tensor:
        return self.downstream_head(self.fused(rgb, sod))

    forward = forward_pretext


def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in-scaled uniform init from per-parameter substreams.

    Each parameter's values depend only on (seed, qualified name), so two
    models built with the same seed get identical heads even if their other
    parts are loaded from checkpoints afterwards.
    """
    with torch.no_grad():
        for mod_name, mod in model.named_modules():
            if not isinstance(mod, (nn.Conv2d, nn.Linear)):
                continue
            fan_in = mod.weight[0].numel()
            bound = float(np.sqrt(6.0 / fan_in))  # ReLU-gain uniform
            for pname, param in mod.named_parameters(prefix=mod_name, recurse=False):
                rng = substream(seed, "init", pname)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))


def freeze_spatial(model: TwoStreamNet) -> None:
    """Exclude the spatial tower from all future optimizer updates."""
    for p in model.spatial.parameters():
        p.requires_grad_(False)
    model._spatial_frozen = True


def unfreeze_spatial(model: TwoStreamNet) -> None:
    for p in model.spatial.parameters():
        p.requires_grad_(True)
    model._spatial_frozen = False


def is_frozen(model: TwoStreamNet) -> bool:
    return model._spatial_frozen


def trainable_parameters(model: nn.Module) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# Batch conversion helpers (numpy HWC -> torch CHW).
# ---------------------------------------------------------------------------


def rgb_batch_to_tensor(rgb: np.ndarray) -> torch.Tensor:
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim == 3:
        rgb = rgb[np.newaxis]
    return torch.from_numpy(np.ascontiguousarray(rgb.transpose(0, 3, 1, 2)))


def sod_batch_to_tensor(sod: np.ndarray) -> torch.Tensor:
    sod = np.asarray(sod, dtype=np.float32)
    if sod.ndim == 3:
        sod = sod[np.newaxis]
    return torch.from_numpy(np.ascontiguousarray(sod.transpose(0, 3, 1, 2)))


def embed_spatial_dataset(model: TwoStreamNet, rgb: torch.Tensor,
                          chunk: int = 256) -> torch.Tensor:
    """Spatial embeddings for a whole dataset, computed without gradients.

    Used to avoid re-running the frozen spatial tower every iteration; the
    tower parameters never change while frozen, so the cache is exact.
    """
    outs = []
    with torch.no_grad():
        for i in range(0, len(rgb), chunk):
            outs.append(model.embed_spatial(rgb[i : i + chunk]))
    return torch.cat(outs) if outs else torch.empty(0, model.config.tower.embedding_dim)


# ---------------------------------------------------------------------------
# Checkpoints: uint64-LE header length, JSON header, then raw little-endian
# float32 parameter payload at the offsets recorded in parameter_table.
# ---------------------------------------------------------------------------


@dataclass
class CheckpointBundle:
    params: dict[str, np.ndarray]
    config_fingerprint: str
    tower_fingerprints: dict[str, str]
    step: int = 0
    meta: dict = field(default_factory=dict)

    def _group(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    @property
    def spatial_tower_params(self) -> dict[str, np.ndarray]:
        return self._group("spatial.")

    @property
    def motion_tower_params(self) -> dict[str, np.ndarray]:
        return self._group("motion.")

    @property
    def head_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if "head" in k.split(".", 1)[0]}


def bundle_from_model(model: TwoStreamNet, step: int = 0,
                      meta: dict | None = None) -> CheckpointBundle:
    params = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }
    meta = dict(meta or {})
    meta.setdefault("spatial_provenance", model.spatial_provenance)
    return CheckpointBundle(
        params=params,
        config_fingerprint=model.config.fingerprint(),
        tower_fingerprints={
            "spatial": model.config.tower_fingerprint("spatial"),
            "motion": model.config.tower_fingerprint("motion"),
        },
        step=step,
        meta=meta,
    )


def save_checkpoint(model: TwoStreamNet, path: str | Path, step: int = 0,
                    meta: dict | None = None) -> CheckpointBundle:
    bundle = bundle_from_model(model, step=step, meta=meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    blobs = []
    for name, arr in bundle.params.items():
        blob = arr.astype("<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_fingerprint": bundle.config_fingerprint,
        "tower_fingerprints": bundle.tower_fingerprints,
        "step": bundle.step,
        "meta": bundle.meta,
        "parameter_table": table,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return bundle


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CorruptionError(f"checkpoint {path} too short for a header")
    header_len = int.from_bytes(raw[:8], "little")
    if 8 + header_len > len(raw):
        raise CorruptionError(f"checkpoint {path} truncated inside the header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"checkpoint {path} has a malformed header") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CorruptionError(
            f"unsupported checkpoint format_version {header.get('format_version')}"
        )
    payload = raw[8 + header_len :]
    params: dict[str, np.ndarray] = {}
    for entry in header["parameter_table"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + count * 4
        if end > len(payload):
            raise CorruptionError(
                f"checkpoint {path} truncated in parameter {entry['name']!r}"
            )
        params[entry["name"]] = (
            np.frombuffer(payload, "<f4", count, start).reshape(shape).copy()
        )
    return CheckpointBundle(
        params=params,
        config_fingerprint=header["config_fingerprint"],
        tower_fingerprints=header.get("tower_fingerprints", {}),
        step=header.get("step", 0),
        meta=header.get("meta", {}),
    )


def _copy_params(model: nn.Module, params: dict[str, np.ndarray], prefix: str = "") -> int:
    copied = 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not name.startswith(prefix):
                continue
            if name not in params:
                raise CorruptionError(f"checkpoint is missing parameter {name!r}")
            arr = params[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CorruptionError(
                    f"parameter {name!r} has shape {arr.shape}, model expects "
                    f"{tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr))
            copied += 1
    return copied


def apply_checkpoint(model: TwoStreamNet, bundle: CheckpointBundle) -> None:
    """Restore all parameters; refuses a bundle from a different config."""
    if bundle.config_fingerprint != model.config.fingerprint():
        raise ConfigError(
            "checkpoint config fingerprint mismatch: "
            f"{bundle.config_fingerprint[:12]} != {model.config.fingerprint()[:12]}"
        )
    _copy_params(model, bundle.params)
    model.spatial_provenance = bundle.meta.get("spatial_provenance", model.spatial_provenance)


def apply_motion_tower(model: TwoStreamNet, bundle: CheckpointBundle) -> None:
    """Transfer path: load only the motion tower; heads stay as initialized."""
    want = model.config.tower_fingerprint("motion")
    have = bundle.tower_fingerprints.get("motion")
    if have != want:
        raise ConfigError(
            f"motion tower fingerprint mismatch: checkpoint {str(have)[:12]} vs "
            f"model {want[:12]}"
        )
    _copy_params(model, bundle.params, prefix="motion.")


def apply_spatial_tower(model: TwoStreamNet, bundle: CheckpointBundle,
                        provenance: str = "external") -> None:
    want = model.config.tower_fingerprint("spatial")
    have = bundle.tower_fingerprints.get("spatial")
    if have != want:
        raise ConfigError(
            f"spatial tower fingerprint mismatch: checkpoint {str(have)[:12]} vs "
            f"model {want[:12]}"
        )
    was_frozen = is_frozen(model)
    if was_frozen:
        unfreeze_spatial(model)
    _copy_params(model, bundle.params, prefix="spatial.")
    if was_frozen:
        freeze_spatial(model)
    model.spatial_provenance = provenance


# ---------------------------------------------------------------------------
# Spatial warm start: the desk-scale stand-in for loading generic pretrained
# image weights. Supervised single-frame classification over a labeled video
# corpus, then the tower is frozen.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarmstartSpec:
    iterations: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-3
    momentum: float = 0.9
    holdout_fraction: float = 0.2
    eval_samples: int = 512
    seed: int = 0


@dataclass
class WarmstartResult:
    accuracy: float
    chance: float
    warned: bool
    iterations: int


def _sample_frames(videos, video_indices, rng, count) -> tuple[torch.Tensor, torch.Tensor]:
    picks = rng.integers(0, len(video_indices), size=count)
    frames = np.empty((count, *videos[0].frames.shape[1:]), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for j, pick in enumerate(picks):
        video = videos[int(video_indices[int(pick)])]
        t = int(rng.integers(0, len(video.frames)))
        frames[j] = video.frames[t]
        labels[j] = video.action_label
    return rgb_batch_to_tensor(frames), torch.from_numpy(labels)


def init_spatial_warmstart(model: TwoStreamNet, videos, spec: WarmstartSpec,
                           num_classes: int | None = None) -> WarmstartResult:
    """Supervised single-frame pretraining of the spatial tower, then freeze.

    If held-out single-frame accuracy stays below chance + 10 points (as it
    will on motion-defined labels, where no single frame carries the class),
    a warning is logged and recorded in the result.
    """
    if num_classes is None:
        num_classes = max(v.action_label for v in videos) + 1
    if num_classes < 2:
        raise ConfigError("warm start needs >= 2 action classes")

    perm = substream(spec.seed, "warmstart-split").permutation(len(videos))
    n_hold = max(1, int(round(spec.holdout_fraction * len(videos))))
    n_hold = min(n_hold, len(videos) - 1)
    holdout, train = perm[:n_hold], perm[n_hold:]

    was_frozen = is_frozen(model)
    unfreeze_spatial(model)
    head = _make_head(model.config.tower.embedding_dim, num_classes)
    init_parameters(head, spec.seed)

    params = list(model.spatial.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=spec.learning_rate, momentum=spec.momentum)
    rng = substream(spec.seed, "warmstart-batches")
    model.train()
    for _ in range(spec.iterations):
        x, y = _sample_frames(videos, train, rng, spec.batch_size)
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(head(model.embed_spatial(x)), y)
        loss.backward()
        opt.step()

    eval_rng = substream(spec.seed, "warmstart-eval")
    model.eval()
    correct = total = 0
    with torch.no_grad():
        remaining = spec.eval_samples
        while remaining > 0:
            n = min(remaining, 256)
            x, y = _sample_frames(videos, holdout, eval_rng, n)
            pred = np.argmax(head(model.embed_spatial(x)).numpy(), axis=1)
            correct += int((pred == y.numpy()).sum())
            total += n
            remaining -= n
    accuracy = correct / total
    chance = 1.0 / num_classes
    warned = accuracy < chance + 0.10
    if warned:
        logger.warning(
            "spatial warm start reached only %.1f%% single-frame accuracy "
            "(chance %.1f%%); freezing anyway", 100 * accuracy, 100 * chance,
        )
    freeze_spatial(model)
    if not was_frozen and not model.config.spatial_frozen:
        unfreeze_spatial(model)
    model.spatial_provenance = "warmstart"
    return WarmstartResult(accuracy, chance, warned, spec.iterations)
