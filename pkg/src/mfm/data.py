"""Synthetic two-domain shape scenes and folder-based image/label ingestion."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
CLASS_NAMES = ("background", "circle", "rectangle", "triangle")

# base RGB per class in [0, 1]; instances jitter around these
PALETTE = np.array([
    [0.45, 0.45, 0.40],
    [0.85, 0.30, 0.25],
    [0.30, 0.75, 0.30],
    [0.30, 0.35, 0.85],
], dtype=np.float64)


@dataclass
class DomainShift:
    rotation: float = 0.0  # hue rotation about the grey axis, degrees
    noise: float = 0.0  # additive gaussian sigma
    texture_freq: float = 0.0  # cycles per image of an oblique stripe pattern, 0 = off
    texture_amp: float = 0.0
    brightness: float = 0.0  # additive offset

    @property
    def is_null(self):
        return self.rotation == 0 and self.noise == 0 and self.brightness == 0 and (
            self.texture_freq == 0 or self.texture_amp == 0)


def _default_target():
    return DomainShift(rotation=40.0, noise=0.06, texture_freq=6.0, texture_amp=0.08, brightness=-0.08)


@dataclass
class SceneSpec:
    size: int = 64
    num_classes: int = 4
    min_shapes: int = 2
    max_shapes: int = 5
    color_jitter: float = 0.12
    source: DomainShift = field(default_factory=DomainShift)
    target: DomainShift = field(default_factory=_default_target)

    def __post_init__(self):
        if isinstance(self.source, dict):
            self.source = DomainShift(**self.source)
        if isinstance(self.target, dict):
            self.target = DomainShift(**self.target)
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"synthetic scenes have exactly {len(CLASS_NAMES)} classes")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 0 <= min_shapes <= max_shapes")

    def to_dict(self):
        return asdict(self)


def _hue_rotation(deg):
    # Rodrigues rotation about (1,1,1)/sqrt(3)
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    k = np.ones((3, 3)) / 3.0
    skew = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3.0)
    return c * np.eye(3) + s * skew + (1 - c) * k


def _rasterize(rng, spec):
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    label = np.zeros((n, n), dtype=np.uint8)
    # smooth background: base colour plus a random linear gradient
    bg = PALETTE[0] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    g = rng.uniform(-0.15, 0.15, 2)
    ramp = (g[0] * (yy / n - 0.5) + g[1] * (xx / n - 0.5))[..., None]
    image = np.broadcast_to(bg, (n, n, 3)) + ramp

    count = rng.integers(spec.min_shapes, spec.max_shapes + 1)
    for _ in range(count):
        cls = int(rng.integers(1, spec.num_classes))
        r = rng.uniform(0.09, 0.2) * n
        cy, cx = rng.uniform(r, n - r, 2)
        if cls == 1:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif cls == 2:
            ry, rx = r * rng.uniform(0.6, 1.0, 2)
            inside = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            # upward triangle inscribed in the circle of radius r
            top = cy - r
            base = cy + 0.5 * r
            half = (yy - top) / (1.5 * r) * (r * np.sqrt(3) / 2)
            inside = (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)
        color = PALETTE[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        image = np.where(inside[..., None], color, image)
        label[inside] = cls
    return image, label


def _apply_shift(image, shift: DomainShift, rng):
    if shift.is_null:
        return image
    n = image.shape[0]
    out = image
    if shift.rotation:
        out = out @ _hue_rotation(shift.rotation).T
    if shift.texture_freq and shift.texture_amp:
        yy, xx = np.mgrid[0:n, 0:n] / n
        out = out + shift.texture_amp * np.sin(2 * np.pi * shift.texture_freq * (xx + yy))[..., None]
    if shift.brightness:
        out = out + shift.brightness
    if shift.noise:
        out = out + rng.normal(0.0, shift.noise, out.shape)
    return out


def generate_pair(seed, spec: SceneSpec, domain="source"):
    """Render scene ``seed``; returns (float32 3×H×W image in [0,1], uint8 H×W labels).

    The domain only changes pixels, so source and target share the label map.
    """
    if domain not in ("source", "target"):
        raise ValueError(f"unknown domain {domain!r}")
    rng = np.random.default_rng([seed, 0])
    image, label = _rasterize(rng, spec)
    shift = spec.source if domain == "source" else spec.target
    image = _apply_shift(image, shift, np.random.default_rng([seed, 1 if domain == "source" else 2]))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return np.ascontiguousarray(image.transpose(2, 0, 1)), label


def generate_set(seeds, spec, domain):
    pairs = [generate_pair(s, spec, domain) for s in seeds]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# ----------------------------------------------------------------------------
# folder datasets


class FolderDataset:
    """Lazily loaded ``images/*.png`` + ``labels/*.png`` pairs matched by stem."""

    def __init__(self, root, num_classes=19):
        self.root = Path(root)
        self.num_classes = num_classes
        images = {p.stem: p for p in sorted((self.root / "images").glob("*.png"))}
        labels = {p.stem: p for p in sorted((self.root / "labels").glob("*.png"))}
        self.stems = sorted(images.keys() & labels.keys())
        self.images, self.labels = images, labels
        self.unmatched = sorted(
            [f"images/{s}.png has no label" for s in images.keys() - labels.keys()]
            + [f"labels/{s}.png has no image" for s in labels.keys() - images.keys()]
        )

    def __len__(self):
        return len(self.stems)

    def load_label(self, stem):
        path = self.labels[stem]
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ValueError(f"{path}: label must be 8-bit single channel, got mode {im.mode}")
            arr = np.array(im, dtype=np.uint8)
        bad = np.unique(arr[(arr >= self.num_classes) & (arr != IGNORE_INDEX)])
        if bad.size:
            raise ValueError(f"{path}: invalid label value(s) {bad.tolist()} for {self.num_classes} classes")
        return arr

    def load_image(self, stem):
        path = self.images[stem]
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: image must be 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    def __getitem__(self, i):
        stem = self.stems[i]
        image, label = self.load_image(stem), self.load_label(stem)
        if image.shape[1:] != label.shape:
            raise ValueError(f"{stem}: image {image.shape[1:]} and label {label.shape} differ in size")
        return image, label

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def validate(self):
        """Per-file problems (plus unmatched stems) without raising."""
        errors = list(self.unmatched)
        for i, stem in enumerate(self.stems):
            try:
                self[i]
            except ValueError as e:
                errors.append(str(e))
        return errors


def load_folder(path, num_classes=19):
    return FolderDataset(path, num_classes)


def write_dataset(out, spec: SceneSpec, splits):
    """Write PNG pairs and manifest.json.

    ``splits`` maps split name to (domain, seeds). Returns the manifest dict.
    """
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    pairs = []
    for split, (domain, seeds) in splits.items():
        for seed in seeds:
            image, label = generate_pair(seed, spec, domain)
            stem = f"{split}_{domain}_{seed:06d}"
            Image.fromarray((image.transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8), "RGB").save(
                out / "images" / f"{stem}.png")
            Image.fromarray(label, "L").save(out / "labels" / f"{stem}.png")
            pairs.append({"image": f"images/{stem}.png", "label": f"labels/{stem}.png",
                          "split": split, "domain": domain, "seed": int(seed)})
    manifest = {"spec": spec.to_dict(), "pairs": pairs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
