"""Dataset ingestion and image/environment-map IO.

Scenes follow the NeRF manifest convention: `transforms_train.json` /
`transforms_val.json` with a global camera_angle_x and per-frame 4x4
camera-to-world matrices; images are PNG next to the manifest. PNGs are
converted sRGB -> linear on load and alpha-composited onto the configured
background. Optional per-frame "illumination" integers tag captures taken
under different lighting.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .config import ValidationError
from .render import Camera


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float32)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float32), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1.0 / 2.4) - 0.055)


def load_image(path, background=1.0):
    """PNG -> linear float RGB (H, W, 3); alpha composited onto background."""
    img = Image.open(path)
    arr = np.asarray(img).astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    rgb = srgb_to_linear(arr[..., :3])
    if arr.shape[-1] == 4:
        a = arr[..., 3:4]
        rgb = rgb * a + background * (1.0 - a)
    return rgb


def save_image(path, linear_rgb):
    """Linear float RGB -> 8-bit sRGB PNG."""
    u8 = np.round(linear_to_srgb(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def save_raw(path, arr):
    np.save(path, np.asarray(arr, dtype=np.float32))


def load_values(path, background=1.0):
    """Image-like file -> float array; .npy raw, .png sRGB->linear."""
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    return load_image(path, background)


ENVMAP_MAGIC = b"UVXE"


def save_envmap(path, envmap):
    """Equirect float map: magic, u32 width, u32 height, f32 LE row-major."""
    env = np.ascontiguousarray(np.asarray(envmap, dtype="<f4"))
    h, w, c = env.shape
    if c != 3:
        raise ValidationError(f"envmap must have 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(ENVMAP_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(env.tobytes())


def load_envmap(path):
    """Read an environment map: the binary float format or an sRGB PNG."""
    path = str(path)
    if path.endswith(".png"):
        return load_image(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != ENVMAP_MAGIC:
            raise ValidationError(f"{path}: not an environment map file")
        w, h = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(w * h * 12), dtype="<f4")
        if data.size != w * h * 3:
            raise ValidationError(f"{path}: truncated environment map")
        return data.reshape(h, w, 3).copy()


class View:
    """One posed image with an optional illumination tag."""

    __slots__ = ("name", "camera", "image", "illumination")

    def __init__(self, name, camera, image, illumination=0):
        self.name = name
        self.camera = camera
        self.image = image
        self.illumination = illumination


class Dataset:
    """Views keyed by split; all images in a split share one resolution."""

    def __init__(self, root, splits):
        self.root = root
        self.splits = splits

    def views(self, split) -> list:
        return self.splits.get(split, [])

    @property
    def n_train(self):
        return len(self.splits.get("train", []))


def _load_split(root, split, background):
    manifest = os.path.join(root, f"transforms_{split}.json")
    if not os.path.exists(manifest):
        if split == "train":
            raise ValidationError(f"missing manifest {manifest}")
        return []
    with open(manifest) as f:
        meta = json.load(f)
    angle = float(meta["camera_angle_x"])
    views = []
    shape = None
    for frame in meta["frames"]:
        rel = frame["file_path"]
        path = os.path.join(root, rel)
        if not os.path.splitext(path)[1]:
            path += ".png"
        img = load_image(path, background)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValidationError(f"{path}: resolution {img.shape[:2]} differs within split {split}")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        try:
            cam = Camera.from_fov(img.shape[1], img.shape[0], angle, c2w)
        except ValidationError as e:
            raise ValidationError(f"frame {rel}: {e}") from None
        views.append(View(os.path.splitext(os.path.basename(rel))[0], cam, img,
                          int(frame.get("illumination", 0))))
    return views


def load_dataset(root, background=1.0) -> Dataset:
    """Load train/val splits from a NeRF-style scene directory."""
    splits = {}
    for split in ("train", "val"):
        views = _load_split(root, split, background)
        if views:
            splits[split] = views
    if "train" not in splits:
        raise ValidationError(f"{root}: no training views")
    return Dataset(root, splits)
