"""Synthetic detection scenes with a controllable spurious class/bias correlation.

Every scene is a pure function of its seed and the task/bias configs, so
datasets are reproducible element-wise regardless of build order. The bias
attribute (default: a colored background patch behind each object) can be
counterfactually reassigned without touching shapes, positions, or labels.
"""

from __future__ import annotations

import colorsys
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, GenerationError, VocParseError

SHAPE_KINDS = ("square", "disc", "triangle", "cross", "ring", "bar", "diamond", "frame")
BIAS_KINDS = ("background_color", "object_color", "corner_patch")

CANVAS_GRAY = 0.35
SHAPE_WHITE = 0.95
HAZE_VALUE = 0.78
FOG_NOISE_STD = 0.05
BIAS_PAD = 3  # background patch margin around the object box, px
SIGNATURE_CONTRAST = 0.25  # default blend of signature hues toward the canvas

MANIFEST_VERSION = 1


def stable_hash(base_seed, index):
    """Order-independent per-index seed derivation."""
    ss = np.random.SeedSequence([int(base_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TaskDef:
    task_id: str
    class_ids: tuple
    image_size: int = 64
    objects_per_image: tuple = (1, 3)
    shape_vocabulary: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        if not self.shape_vocabulary:
            object.__setattr__(self, "shape_vocabulary", default_shape_vocabulary(self.class_ids))
        for c in self.class_ids:
            kind = self.shape_vocabulary.get(c)
            if kind not in SHAPE_KINDS:
                raise ConfigError(f"class {c}: unknown shape kind {kind!r}")


@dataclass(frozen=True)
class BiasConfig:
    rho: float
    bias_kind: str = "background_color"
    signatures: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0,1], got {self.rho}")
        if self.bias_kind not in BIAS_KINDS:
            raise ConfigError(f"unknown bias_kind {self.bias_kind!r}")

    def signature_for(self, class_id):
        try:
            return self.signatures[class_id]
        except KeyError:
            raise ConfigError(f"no bias signature for class {class_id}") from None


def default_shape_vocabulary(class_ids):
    return {c: SHAPE_KINDS[i % len(SHAPE_KINDS)] for i, c in enumerate(sorted(class_ids))}


def default_signatures(class_ids, contrast=SIGNATURE_CONTRAST):
    """Evenly spaced hues, one per class, blended toward the canvas gray.

    contrast=1 gives fully saturated colors; the default keeps the cue
    reliably learnable by a plain detector without letting it dwarf the
    shape signal entirely.
    """
    ids = sorted(class_ids)
    sigs = {}
    for i, c in enumerate(ids):
        rgb = colorsys.hsv_to_rgb(i / max(len(ids), 1), 0.9, 0.9)
        sigs[c] = tuple(round(CANVAS_GRAY + contrast * (v - CANVAS_GRAY), 4) for v in rgb)
    return sigs


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    shape: str
    cx: float
    cy: float
    scale: float
    orientation: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    image_size: int
    objects: tuple  # of ObjectSpec
    bias_kind: str
    bias_classes: tuple  # per object: class whose signature paints the bias attribute
    signatures: dict  # class_id -> rgb, full map so the scene is re-renderable standalone
    domain: tuple = ("clear",)  # or ("fog", intensity)

    @property
    def fog_intensity(self):
        return self.domain[1] if self.domain[0] == "fog" else 0.0


@dataclass
class Sample:
    image: np.ndarray  # 3xHxW float32 in [0,1]
    annotations: list  # of (class_id, (x1, y1, x2, y2))
    scene: SceneSpec


def make_scene(rng_seed, task, bias, fog_intensity=0.0):
    """Sample a scene; each object's bias attribute matches its class signature
    with probability rho, otherwise a uniformly chosen different class's."""
    for c in task.class_ids:
        bias.signature_for(c)
    rng = np.random.default_rng(rng_seed)
    n_obj = int(rng.integers(task.objects_per_image[0], task.objects_per_image[1] + 1))
    size = task.image_size
    objects = []
    bias_classes = []
    classes = sorted(task.class_ids)
    for _ in range(n_obj):
        class_id = int(rng.choice(classes))
        scale = float(rng.uniform(12.0, min(24.0, size / 2.5)))
        margin = scale / 2 + BIAS_PAD + 2
        cx = float(rng.uniform(margin, size - margin))
        cy = float(rng.uniform(margin, size - margin))
        orientation = float(rng.uniform(0.0, math.pi))
        objects.append(ObjectSpec(class_id, task.shape_vocabulary[class_id], cx, cy, scale, orientation))
        if len(classes) == 1 or rng.random() < bias.rho:
            bias_classes.append(class_id)
        else:
            others = [c for c in classes if c != class_id]
            bias_classes.append(int(others[int(rng.integers(len(others)))]))
    domain = ("fog", float(fog_intensity)) if fog_intensity > 0 else ("clear",)
    return SceneSpec(
        seed=int(rng_seed),
        image_size=size,
        objects=tuple(objects),
        bias_kind=bias.bias_kind,
        bias_classes=tuple(bias_classes),
        signatures=dict(bias.signatures),
        domain=domain,
    )


def flip_bias(scene):
    """Counterfactual: cyclic-shift every object's bias class to the next class.

    Applying this len(signatures) times returns the original assignment.
    """
    classes = sorted(scene.signatures)
    if len(classes) < 2:
        raise ConfigError("flip_bias needs at least two classes with signatures")
    shifted = tuple(classes[(classes.index(b) + 1) % len(classes)] for b in scene.bias_classes)
    return replace(scene, bias_classes=shifted)


def _shape_mask(obj, size):
    cols = np.arange(size, dtype=np.float64) + 0.5
    u = cols[None, :] - obj.cx
    v = cols[:, None] - obj.cy
    h = obj.scale / 2.0
    if obj.shape in ("bar", "triangle"):
        c, s = math.cos(obj.orientation), math.sin(obj.orientation)
        u, v = u * c + v * s, -u * s + v * c
    if obj.shape == "square":
        mask = np.maximum(np.abs(u), np.abs(v)) < h
    elif obj.shape == "disc":
        mask = u * u + v * v < h * h
    elif obj.shape == "triangle":
        mask = (np.abs(v) < h) & (np.abs(u) < (v + h) / 2.0)
    elif obj.shape == "cross":
        arm = 0.3 * h
        mask = ((np.abs(u) < arm) & (np.abs(v) < h)) | ((np.abs(v) < arm) & (np.abs(u) < h))
    elif obj.shape == "ring":
        r2 = u * u + v * v
        mask = (r2 < h * h) & (r2 > (0.55 * h) ** 2)
    elif obj.shape == "bar":
        mask = (np.abs(u) < h) & (np.abs(v) < 0.35 * h)
    elif obj.shape == "diamond":
        mask = np.abs(u) + np.abs(v) < h
    elif obj.shape == "frame":
        m = np.maximum(np.abs(u), np.abs(v))
        mask = (m < h) & (m > 0.55 * h)
    else:
        raise ConfigError(f"unknown shape {obj.shape!r}")
    return mask


def _mask_box(mask):
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise GenerationError("shape rendered no pixels")
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render(scene):
    """Deterministic rasterization of a SceneSpec; boxes are tight over shape pixels."""
    size = scene.image_size
    img = np.full((3, size, size), CANVAS_GRAY, dtype=np.float64)
    annotations = []
    for obj, bias_class in zip(scene.objects, scene.bias_classes):
        mask = _shape_mask(obj, size)
        box = _mask_box(mask)
        if box[0] < 0 or box[1] < 0 or box[2] > size or box[3] > size:
            raise GenerationError(f"object box {box} outside {size}x{size} image")
        color = np.asarray(scene.signatures[bias_class], dtype=np.float64)
        x1, y1, x2, y2 = (int(v) for v in box)
        if scene.bias_kind == "background_color":
            px1, py1 = max(x1 - BIAS_PAD, 0), max(y1 - BIAS_PAD, 0)
            px2, py2 = min(x2 + BIAS_PAD, size), min(y2 + BIAS_PAD, size)
            img[:, py1:py2, px1:px2] = color[:, None, None]
            img[:, mask] = SHAPE_WHITE
        elif scene.bias_kind == "object_color":
            img[:, mask] = color[:, None]
        else:  # corner_patch
            img[:, mask] = SHAPE_WHITE
            p = max(4, int(obj.scale / 4))
            img[:, y1 : min(y1 + p, size), x1 : min(x1 + p, size)] = color[:, None, None]
        annotations.append((obj.class_id, box))
    sample = Sample(image=img.astype(np.float32), annotations=annotations, scene=scene)
    if scene.fog_intensity > 0:
        sample = apply_fog(sample, scene.fog_intensity)
    return sample


def apply_fog(sample, intensity, noise_std=FOG_NOISE_STD):
    """Haze blend plus seeded pixel noise; annotations unchanged."""
    if not 0.0 <= intensity <= 1.0:
        raise ConfigError(f"fog intensity must be in [0,1], got {intensity}")
    if intensity == 0.0:
        return sample
    img = (1.0 - intensity) * sample.image + intensity * HAZE_VALUE
    std = noise_std * intensity
    if std > 0:
        rng = np.random.default_rng(np.random.SeedSequence([sample.scene.seed, 0xF06]))
        img = img + rng.normal(0.0, std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(image=img, annotations=list(sample.annotations), scene=sample.scene)


class Dataset:
    """Seed-indexed scene collection; samples render lazily and cache."""

    def __init__(self, task, bias, scenes, base_seed=None, fog_intensity=0.0):
        self.task = task
        self.bias = bias
        self.scenes = list(scenes)
        self.base_seed = base_seed
        self.fog_intensity = fog_intensity
        self._cache = {}

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i):
        if i not in self._cache:
            self._cache[i] = render(self.scenes[i])
        return self._cache[i]

    def samples(self):
        for i in range(len(self)):
            yield self[i]

    def flipped(self):
        """Counterfactual twin: every scene's bias assignment cyclically shifted."""
        return Dataset(
            self.task,
            self.bias,
            [flip_bias(s) for s in self.scenes],
            base_seed=self.base_seed,
            fog_intensity=self.fog_intensity,
        )

    def manifest(self):
        if self.base_seed is None:
            raise ConfigError("dataset was not built from a base seed; no manifest")
        return {
            "format_version": MANIFEST_VERSION,
            "task": {
                "task_id": self.task.task_id,
                "class_ids": list(self.task.class_ids),
                "image_size": self.task.image_size,
                "objects_per_image": list(self.task.objects_per_image),
                "shape_vocabulary": {str(k): v for k, v in self.task.shape_vocabulary.items()},
            },
            "bias": {
                "rho": self.bias.rho,
                "bias_kind": self.bias.bias_kind,
                "signatures": {str(k): list(v) for k, v in self.bias.signatures.items()},
            },
            "n": len(self),
            "base_seed": self.base_seed,
            "fog_intensity": self.fog_intensity,
        }


def build_dataset(task, bias, n, base_seed, fog_intensity=0.0):
    if n < 1:
        raise ConfigError(f"dataset size must be >= 1, got {n}")
    scenes = [make_scene(stable_hash(base_seed, i), task, bias, fog_intensity) for i in range(n)]
    return Dataset(task, bias, scenes, base_seed=base_seed, fog_intensity=fog_intensity)


def dataset_from_manifest(manifest):
    version = manifest.get("format_version")
    if version != MANIFEST_VERSION:
        raise ConfigError(f"manifest format_version {version} != supported {MANIFEST_VERSION}")
    t = manifest["task"]
    task = TaskDef(
        task_id=t["task_id"],
        class_ids=tuple(t["class_ids"]),
        image_size=t["image_size"],
        objects_per_image=tuple(t["objects_per_image"]),
        shape_vocabulary={int(k): v for k, v in t["shape_vocabulary"].items()},
    )
    b = manifest["bias"]
    bias = BiasConfig(
        rho=b["rho"],
        bias_kind=b["bias_kind"],
        signatures={int(k): tuple(v) for k, v in b["signatures"].items()},
    )
    return build_dataset(task, bias, manifest["n"], manifest["base_seed"], manifest.get("fog_intensity", 0.0))


def bias_match_rate(dataset):
    """Fraction of objects whose bias attribute matches their class signature."""
    matched = total = 0
    for scene in dataset.scenes:
        for obj, bias_class in zip(scene.objects, scene.bias_classes):
            matched += obj.class_id == bias_class
            total += 1
    return matched / total if total else 0.0


def load_voc_xml(path):
    """Read (class_name, (x1, y1, x2, y2)) records from a VOC annotation file."""
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise VocParseError(f"{path}: malformed XML: {e}") from e
    records = []
    for i, obj in enumerate(root.iter("object")):
        name = obj.findtext("name")
        if name is None:
            raise VocParseError(f"{path}: object[{i}] missing <name>")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise VocParseError(f"{path}: object[{i}] ({name}) missing <bndbox>")
        coords = []
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            text = bnd.findtext(tag)
            if text is None:
                raise VocParseError(f"{path}: object[{i}] ({name}) missing <{tag}>")
            try:
                coords.append(float(text))
            except ValueError:
                raise VocParseError(f"{path}: object[{i}] ({name}) non-numeric <{tag}>: {text!r}") from None
        records.append((name, tuple(coords)))
    return records
