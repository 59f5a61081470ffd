"""Procedural two-modality scenes and a parameterized degradation suite.

Each scene pairs an "appearance" image (3 channels) with a "range" image
(1 channel encoding synthetic distance) over a shared label grid of 6
classes: background plus 5 object types. Two object classes share a range
value and differ only in appearance, two share an appearance and differ
only in range, so neither modality suffices on its own and fusion has
something to gain. All generation and corruption is reproducible from
integer seeds alone.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .fields import Image, LabelMap
from .io import read_field, read_labels, write_field, write_labels
from .seeding import derive_seed
from .validation import check_unit_interval

NUM_CLASSES = 6

# Appearance palette (modality A). Classes 3 and 4 share a color: only the
# range channel separates them. The palette is deliberately muted: class
# separations sit a few noise-sigmas apart, so strong unseen noise genuinely
# confuses a clean-trained expert, while saturated values (blackout, salt
# and pepper hits) fall outside everything in distribution. Class 1 is deep
# and class 5 shallow with colors chosen so that at the seen fog level their
# fogged appearances coincide: the training set itself contains washed-out
# regions where appearance alone cannot decide, which is what teaches the
# temperature network that washed-out means unreliable.
APPEARANCE = np.array(
    [
        (0.78, 0.79, 0.82),   # background: light gray
        (0.30, 0.18, 0.20),   # class 1: dark maroon
        (0.36, 0.40, 0.62),   # class 2: muted blue
        (0.24, 0.32, 0.26),   # class 3: dark green, near
        (0.24, 0.32, 0.26),   # class 4: dark green, far
        (0.71, 0.72, 0.74),   # class 5: pale gray (a half-fogged background look-alike)
    ]
)

# Range palette (modality B). Classes 1 and 2 sit at the same distance: only
# appearance separates them. The background is not one distance but a
# vertical ramp receding toward the top of the image, so the seen fog level
# already produces a whole continuum of washed-out background appearances,
# the deepest of which run into the pale class-5 color.
RANGE_DEPTH = np.array([0.77, 0.33, 0.33, 0.24, 0.42, 0.12])

BG_DEPTH_NEAR = 0.54
BG_DEPTH_FAR = 1.0

FOG_GRAY = 0.6


class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise"
    IMPULSE_NOISE = "impulse_noise"
    MOTION_BLUR = "motion_blur"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    BLACKOUT = "blackout"
    STREAKS = "streaks"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Corruption:
    """A single degradation: what, how hard, on which modality, which stream."""

    kind: CorruptionKind
    severity: float
    target: str = "a"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        check_unit_interval(self.severity, "severity")
        if self.target not in ("a", "b"):
            raise ValidationError(f"corruption target must be 'a' or 'b', got {self.target!r}")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    class_id: int
    center_y: int
    center_x: int
    extent_y: int
    extent_x: int


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    min_objects: int = 6
    max_objects: int = 10
    min_extent: int = 9
    max_extent: int = 17
    pixel_noise: float = 0.035
    jitter: float = 0.04

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValidationError("scene size must be at least 8x8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValidationError("invalid object count range")
        if not 2 <= self.min_extent <= self.max_extent:
            raise ValidationError("invalid object extent range")


@dataclass(frozen=True)
class Scene:
    image_a: Image
    image_b: Image
    labels: LabelMap
    seed: int
    objects: tuple[SceneObject, ...]
    corruption: Corruption | None = None


@dataclass(frozen=True)
class Condition:
    """One evaluation column: a named corruption (or the clean pass-through)."""

    name: str
    kind: CorruptionKind | None
    severity: float
    target: str

    @property
    def in_distribution(self) -> bool:
        return self.name.startswith("in_")


def test_conditions() -> list[Condition]:
    """The 12 evaluation conditions: 2 seen, 7 on modality A, 3 on modality B."""
    k = CorruptionKind
    return [
        Condition("in_clean", None, 0.0, "a"),
        Condition("in_fog50", k.FOG, 0.5, "a"),
        Condition("a_fog100", k.FOG, 1.0, "a"),
        Condition("a_motion_blur", k.MOTION_BLUR, 0.6, "a"),
        Condition("a_streaks", k.STREAKS, 0.6, "a"),
        Condition("a_brightness", k.BRIGHTNESS, 0.6, "a"),
        Condition("a_blackout", k.BLACKOUT, 1.0, "a"),
        Condition("a_impulse", k.IMPULSE_NOISE, 0.6, "a"),
        Condition("a_gaussian", k.GAUSSIAN_NOISE, 0.6, "a"),
        Condition("b_gaussian", k.GAUSSIAN_NOISE, 0.6, "b"),
        Condition("b_shot", k.SHOT_NOISE, 0.6, "b"),
        Condition("b_impulse", k.IMPULSE_NOISE, 0.6, "b"),
    ]


def _object_mask(shape: str, cy: int, cx: int, ey: int, ex: int,
                 yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if shape == "rectangle":
        return (np.abs(yy - cy) <= ey) & (np.abs(xx - cx) <= ex)
    if shape == "disc":
        r = (ey + ex) / 2.0
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # upward triangle: apex at cy - ey, base at cy + ey
    dy = yy - (cy - ey)
    span = np.clip(dy, 0, None) * (ex / max(1, 2 * ey))
    return (dy >= 0) & (yy <= cy + ey) & (np.abs(xx - cx) <= span)


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministically place 4-8 colored/ranged shapes on a background.

    The first four objects always cover classes 1-4 (in shuffled order) so
    that both ambiguous pairs are well represented; any further objects draw
    their class uniformly.
    """
    rng = np.random.default_rng(seed)
    h, w = config.height, config.width
    yy, xx = np.mgrid[0:h, 0:w]

    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    # The first four objects cover the two ambiguous pairs; extras lean the
    # same way so neither single modality can resolve most object pixels.
    paired = rng.permutation([1, 2, 3, 4])[: min(count, 4)]
    extra = rng.choice(
        np.arange(1, NUM_CLASSES), size=max(0, count - 4),
        p=[0.22, 0.22, 0.22, 0.22, 0.12],
    )
    class_ids = np.concatenate([paired, extra]).astype(int)

    labels = np.zeros((h, w), dtype=np.uint8)
    color = np.empty((h, w, 3))
    color[:] = APPEARANCE[0]
    # Background recedes toward the top of the image; a small per-scene
    # offset keeps the ramp from being pixel-identical across scenes.
    ramp = BG_DEPTH_FAR - (BG_DEPTH_FAR - BG_DEPTH_NEAR) * (yy / max(1, h - 1))
    ramp = ramp + rng.uniform(-0.03, 0.03)
    depth = np.clip(ramp, 0.0, 1.0)[..., None].copy()

    objects = []
    for class_id in class_ids:
        shape = str(rng.choice(["rectangle", "disc", "triangle"]))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        ey = int(rng.integers(config.min_extent, config.max_extent + 1))
        ex = int(rng.integers(config.min_extent, config.max_extent + 1))
        color_jitter = rng.uniform(-config.jitter, config.jitter, size=3)
        depth_jitter = float(rng.uniform(-config.jitter, config.jitter))
        lightness = float(rng.uniform(0.45, 1.15)) if class_id in (3, 4) else 1.0
        mask = _object_mask(shape, cy, cx, ey, ex, yy, xx)
        labels[mask] = class_id
        # The shared-color pair varies in lightness (identically for both
        # classes), stretching the ambiguous appearance into a dark band
        # that reaches toward black.
        color[mask] = APPEARANCE[class_id] * lightness + color_jitter
        depth[mask, 0] = RANGE_DEPTH[class_id] + depth_jitter
        objects.append(SceneObject(shape, int(class_id), cy, cx, ey, ex))

    image_a = np.clip(color + rng.normal(0.0, config.pixel_noise, size=(h, w, 3)), 0.0, 1.0)
    image_b = np.clip(depth + rng.normal(0.0, config.pixel_noise, size=(h, w, 1)), 0.0, 1.0)
    return Scene(
        image_a=Image(image_a),
        image_b=Image(image_b),
        labels=LabelMap(labels, NUM_CLASSES),
        seed=int(seed),
        objects=tuple(objects),
    )


def _fog_blend(arr: np.ndarray, depth: np.ndarray, severity: float,
               column_mask: np.ndarray | None = None) -> np.ndarray:
    weight = np.minimum(1.0, severity * depth)
    if column_mask is not None:
        weight = weight * column_mask
    return (1.0 - weight[..., None]) * arr + weight[..., None] * FOG_GRAY


def _streak_mask(h: int, w: int, target_fraction: float, rng) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    budget = int(np.ceil(target_fraction * h * w))
    for _ in range(10 * max(1, budget // 4)):
        if mask.sum() >= budget:
            break
        y0 = rng.uniform(0, h)
        x0 = rng.uniform(0, w)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(h / 4.0, float(h))
        steps = int(2 * length) + 1
        t = np.linspace(0.0, length, steps)
        ys = np.clip(np.round(y0 + t * np.sin(angle)).astype(int), 0, h - 1)
        xs = np.clip(np.round(x0 + t * np.cos(angle)).astype(int), 0, w - 1)
        mask[ys, xs] = True
    return mask


def apply_corruption(img: Image, corruption: Corruption,
                     depth_hint: Image | None = None) -> Image:
    """Degrade one image. Severity 0 is a bit-exact identity for every kind."""
    severity = check_unit_interval(corruption.severity, "severity")
    if severity == 0.0:
        return img
    kind = corruption.kind
    rng = np.random.default_rng(corruption.seed)
    arr = np.array(img.data)
    h, w, _ = arr.shape

    if kind is CorruptionKind.GAUSSIAN_NOISE:
        arr = arr + rng.normal(0.0, 0.3 * severity, size=arr.shape)
    elif kind is CorruptionKind.SHOT_NOISE:
        rate = 2.0 + 60.0 * (1.0 - severity) ** 2
        arr = rng.poisson(arr * rate) / rate
    elif kind is CorruptionKind.IMPULSE_NOISE:
        hit = rng.random((h, w)) < severity / 2.0
        value = rng.integers(0, 2, size=(h, w)).astype(np.float64)
        arr[hit, :] = value[hit, None]
    elif kind is CorruptionKind.MOTION_BLUR:
        length = int(np.ceil(1.0 + 8.0 * severity))
        left = (length - 1) // 2
        padded = np.pad(arr, ((0, 0), (left, length - 1 - left), (0, 0)), mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(padded, length, axis=1)
        arr = windows.mean(axis=-1)
    elif kind is CorruptionKind.FOG:
        if depth_hint is None:
            raise ValidationError("fog corruption requires a depth hint")
        depth = depth_hint.data.mean(axis=-1)
        arr = _fog_blend(arr, depth, severity)
    elif kind is CorruptionKind.BRIGHTNESS:
        arr = arr + 0.5 * severity
    elif kind is CorruptionKind.BLACKOUT:
        arr = np.zeros_like(arr)
    elif kind is CorruptionKind.STREAKS:
        mask = _streak_mask(h, w, 0.2 * severity, rng)
        arr[mask, :] = 1.0
    else:  # pragma: no cover - enum is exhaustive
        raise ValidationError(f"unknown corruption kind {kind}")
    return Image(np.clip(arr, 0.0, 1.0))


def corrupt_scene(scene: Scene, corruption: Corruption) -> Scene:
    """Apply a corruption to the targeted modality; fog reads the clean range map."""
    if corruption.target == "a":
        degraded = apply_corruption(scene.image_a, corruption, depth_hint=scene.image_b)
        return replace(scene, image_a=degraded, corruption=corruption)
    degraded = apply_corruption(scene.image_b, corruption, depth_hint=scene.image_b)
    return replace(scene, image_b=degraded, corruption=corruption)


def half_fog_scene(scene: Scene, severity: float = 1.0, side: str = "left") -> Scene:
    """Fog only one horizontal half of modality A; the other half stays clean."""
    check_unit_interval(severity, "severity")
    if side not in ("left", "right"):
        raise ValidationError("side must be 'left' or 'right'")
    h, w = scene.image_a.height, scene.image_a.width
    column_mask = np.zeros((h, w))
    if side == "left":
        column_mask[:, : w // 2] = 1.0
    else:
        column_mask[:, w // 2:] = 1.0
    depth = scene.image_b.data.mean(axis=-1)
    fogged = _fog_blend(np.array(scene.image_a.data), depth, severity, column_mask)
    return replace(scene, image_a=Image(np.clip(fogged, 0.0, 1.0)))


def modality_view(scene: Scene, modality: str) -> np.ndarray:
    """The input array an expert of the given modality sees for this scene."""
    if modality == "a":
        return scene.image_a.data
    if modality == "b":
        return scene.image_b.data
    if modality == "ab":
        return np.concatenate([scene.image_a.data, scene.image_b.data], axis=2)
    raise ValidationError(f"unknown modality {modality!r}")


@dataclass
class DatasetSplits:
    train: list[Scene]
    val: list[Scene]
    test: list[Scene]
    seed: int
    config: SceneConfig
    conditions: list[Condition]


_SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}


def build_dataset(train_size: int = 600, val_size: int = 60, test_size: int = 60,
                  seed: int = 0, config: SceneConfig = SceneConfig(),
                  fog_severity: float = 0.5) -> DatasetSplits:
    """Deterministic splits: train/val mix clean and fogged scenes, test stays clean.

    Every second train/val scene gets fog at `fog_severity` on modality A,
    so the training distribution is clean plus one seen degradation. Test
    scenes are stored clean; evaluation corrupts them per condition.
    """
    for name, size in (("train", train_size), ("val", val_size), ("test", test_size)):
        if size < 1:
            raise ValidationError(f"{name} split must have at least 1 scene")

    def make_split(tag: int, size: int, with_fog: bool) -> list[Scene]:
        scenes = []
        for i in range(size):
            scene = generate_scene(derive_seed(seed, tag, i), config)
            if with_fog and i % 2 == 1:
                fog = Corruption(
                    CorruptionKind.FOG, fog_severity, "a",
                    seed=derive_seed(seed, tag, i, 1),
                )
                scene = corrupt_scene(scene, fog)
            scenes.append(scene)
        return scenes

    return DatasetSplits(
        train=make_split(_SPLIT_TAGS["train"], train_size, True),
        val=make_split(_SPLIT_TAGS["val"], val_size, True),
        test=make_split(_SPLIT_TAGS["test"], test_size, False),
        seed=int(seed),
        config=config,
        conditions=test_conditions(),
    )


def _corruption_to_json(c: Corruption | None):
    if c is None:
        return None
    return {"kind": c.kind.value, "severity": c.severity, "target": c.target, "seed": c.seed}


def _corruption_from_json(obj) -> Corruption | None:
    if obj is None:
        return None
    return Corruption(CorruptionKind(obj["kind"]), obj["severity"], obj["target"], obj["seed"])


def save_dataset(splits: DatasetSplits, out_dir) -> None:
    """Directory layout: <split>/<scene_id>/{a.unof, b.unof, labels.unol, meta.json}."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for split_name in ("train", "val", "test"):
        for i, scene in enumerate(getattr(splits, split_name)):
            scene_dir = root / split_name / f"scene_{i:05d}"
            scene_dir.mkdir(parents=True, exist_ok=True)
            write_field(scene_dir / "a.unof", scene.image_a.data)
            write_field(scene_dir / "b.unof", scene.image_b.data)
            write_labels(scene_dir / "labels.unol", scene.labels)
            meta = {
                "seed": scene.seed,
                "objects": [vars(o) for o in scene.objects],
                "corruption": _corruption_to_json(scene.corruption),
            }
            (scene_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = {
        "seed": splits.seed,
        "num_classes": NUM_CLASSES,
        "sizes": {
            "train": len(splits.train),
            "val": len(splits.val),
            "test": len(splits.test),
        },
        "config": vars(splits.config),
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    conditions = [
        {
            "name": c.name,
            "kind": c.kind.value if c.kind else None,
            "severity": c.severity,
            "target": c.target,
        }
        for c in splits.conditions
    ]
    (root / "conditions.json").write_text(json.dumps(conditions, indent=2) + "\n")


def load_scene(scene_dir) -> Scene:
    """Load one stored scene directory (a.unof, b.unof, labels.unol, meta.json)."""
    scene_dir = Path(scene_dir)
    meta_path = scene_dir / "meta.json"
    if not meta_path.exists():
        raise ValidationError(f"{scene_dir} does not look like a scene directory")
    meta = json.loads(meta_path.read_text())
    return Scene(
        image_a=Image(read_field(scene_dir / "a.unof")),
        image_b=Image(read_field(scene_dir / "b.unof")),
        labels=read_labels(scene_dir / "labels.unol", NUM_CLASSES),
        seed=meta["seed"],
        objects=tuple(SceneObject(**o) for o in meta["objects"]),
        corruption=_corruption_from_json(meta["corruption"]),
    )


def load_dataset(root) -> DatasetSplits:
    root = Path(root)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise ValidationError(f"{root} does not look like a dataset directory")
    manifest = json.loads(manifest_path.read_text())
    config = SceneConfig(**manifest["config"])

    def load_split(split_name: str) -> list[Scene]:
        split_dir = root / split_name
        return [load_scene(d) for d in sorted(split_dir.iterdir())]

    conditions = [
        Condition(
            name=c["name"],
            kind=CorruptionKind(c["kind"]) if c["kind"] else None,
            severity=c["severity"],
            target=c["target"],
        )
        for c in json.loads((root / "conditions.json").read_text())
    ]
    return DatasetSplits(
        train=load_split("train"),
        val=load_split("val"),
        test=load_split("test"),
        seed=manifest["seed"],
        config=config,
        conditions=conditions,
    )
