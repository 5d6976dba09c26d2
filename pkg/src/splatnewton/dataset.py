"""Training views on disk: a JSON manifest of cameras plus PNG or PPM images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import InvalidInputError


def read_image(path):
    """Load an RGB image as float64 in [0, 1]. Plain-text PPM (P3) and
    anything Pillow reads are accepted."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P3":
        return _read_p3(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _read_p3(path):
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if tokens[0] != "P3":
        raise InvalidInputError(f"{path}: not a P3 file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:], dtype=np.float64)
    if vals.size != w * h * 3:
        raise InvalidInputError(f"{path}: expected {w * h * 3} samples, found {vals.size}")
    return vals.reshape(h, w, 3) / maxval


def write_image(path, image, maxval=65535):
    """Write ``image`` (H, W, 3) in [0, 1]. ``.ppm`` is written as P3 with
    ``maxval`` levels; other suffixes go through Pillow at 8 bits."""
    path = Path(path)
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if path.suffix.lower() == ".ppm":
        q = np.rint(img * maxval).astype(np.int64)
        h, w, _ = q.shape
        rows = "\n".join(" ".join(map(str, row.ravel())) for row in q)
        path.write_text(f"P3\n{w} {h}\n{maxval}\n{rows}\n")
    else:
        Image.fromarray(np.rint(img * 255.0).astype(np.uint8), "RGB").save(path)


@dataclass
class Dataset:
    """Cameras with their target images (H, W, 3) and the probe-view ids."""

    cameras: list
    images: list
    probe_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise InvalidInputError("camera and image counts differ")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise InvalidInputError(
                    f"view {i}: image is {img.shape[1]}x{img.shape[0]}, camera is "
                    f"{cam.width}x{cam.height}")
        if not self.probe_ids:
            n = len(self.cameras)
            ids = np.linspace(0, n - 1, min(4, n)).round().astype(int)
            self.probe_ids = sorted(set(ids.tolist()))
        for p in self.probe_ids:
            if not 0 <= p < len(self.cameras):
                raise InvalidInputError(f"probe id {p} out of range")

    def __len__(self):
        return len(self.cameras)

    def save(self, manifest_path, image_format="ppm"):
        manifest_path = Path(manifest_path)
        folder = manifest_path.parent
        folder.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            name = f"view_{i:03d}.{image_format}"
            write_image(folder / name, img)
            # row-major 16-vectors
            entries.append({"view": cam.view.ravel().tolist(),
                            "proj": cam.proj.ravel().tolist(),
                            "width": cam.width, "height": cam.height, "image": name})
        manifest = {"cameras": entries, "probe_ids": [int(p) for p in self.probe_ids]}
        manifest_path.write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, manifest_path):
        manifest_path = Path(manifest_path)
        try:
            manifest = json.loads(manifest_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read manifest {manifest_path}: {exc}") from exc
        cameras, images = [], []
        for entry in manifest["cameras"]:
            cam = Camera(entry["view"], entry["proj"], entry["width"], entry["height"])
            img_path = manifest_path.parent / entry["image"]
            if not img_path.exists():
                raise InvalidInputError(f"missing image {img_path}")
            cameras.append(cam)
            images.append(read_image(img_path))
        return cls(cameras, images, list(manifest.get("probe_ids", [])))
