"""File formats: binary PGM, single-channel PFM, rig and scene JSON."""

from __future__ import annotations

import json
import re

import numpy as np

from .geometry import CameraRig
from .scene import Scene


class FormatError(ValueError):
    pass


def write_pgm(path, image: np.ndarray, maxval: int = 255):
    """Binary P5. ``maxval > 255`` stores big-endian 16-bit samples."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError("PGM needs a 2-D image")
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.clip(img, 0, maxval).astype(dtype)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P5\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=m.end())
    return data.reshape(h, w).astype(np.int64), maxval


def write_mask_pgm(path, mask: np.ndarray):
    write_pgm(path, np.where(mask, 255, 0), 255)


def write_intensity_pgm(path, intensity: np.ndarray):
    """Intensities in [0, 1] as 16-bit PGM."""
    write_pgm(path, np.rint(np.clip(intensity, 0, 1) * 65535), 65535)


def read_intensity_pgm(path) -> np.ndarray:
    data, maxval = read_pgm(path)
    return data / float(maxval)


def write_pfm(path, array: np.ndarray):
    """Single-channel little-endian PFM ("Pf", scale -1), rows bottom to top."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError("PFM writer handles one channel")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(arr).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"(Pf|PF)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", blob)
    if not m:
        raise FormatError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(blob, dtype=dtype, count=w * h * channels, offset=m.end())
    shape = (h, w, channels) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def save_rig(path, rig: CameraRig):
    with open(path, "w") as fh:
        json.dump(rig.to_dict(), fh, indent=2)


def load_rig(path) -> CameraRig:
    with open(path) as fh:
        return CameraRig.from_dict(json.load(fh))


def save_scene(path, scene: Scene):
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=2)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return Scene.from_dict(json.load(fh))
