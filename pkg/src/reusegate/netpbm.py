"""Binary netpbm image I/O and the on-disk video layout.

A video directory holds frames as binary PPM (P6, 8-bit RGB) named
``frame_%05d.ppm`` and annotation masks as binary PGM (P5) named
``mask_%05d.pgm`` whose pixel value is the object id (0 is background).
"""

from __future__ import annotations

import os
import re

import numpy as np


def _read_header_token(f):
    # skip whitespace and '#' comments, return the next ASCII token
    token = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated netpbm header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as f:
        got = f.read(2)
        if got != magic:
            raise ValueError(f"{path}: expected {magic.decode()} file, got {got!r}")
        w = int(_read_header_token(f))
        h = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit images supported, maxval {maxval}")
        data = f.read(w * h * channels)
        if len(data) != w * h * channels:
            raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, channels)


def read_ppm(path):
    """8-bit RGB image as a (h, w, 3) uint8 array."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path):
    """8-bit gray image as a (h, w) uint8 array."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm expects (h, w, 3), got {img.shape}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects (h, w), got {img.shape}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def frame_to_u8(frame):
    """(3, h, w) float frame in [0, 1] -> (h, w, 3) uint8."""
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def u8_to_frame(img):
    """(h, w, 3) uint8 -> (3, h, w) float frame in [0, 1]."""
    return img.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_video_dir(directory, frames, masks):
    """Materialize a video as frame/mask files; masks carry object ids."""
    os.makedirs(directory, exist_ok=True)
    frames = np.asarray(frames)
    masks = np.asarray(masks).astype(np.uint8)
    if frames.shape[0] != masks.shape[0]:
        raise ValueError("frame/mask count mismatch")
    for t in range(frames.shape[0]):
        write_ppm(os.path.join(directory, f"frame_{t:05d}.ppm"), frame_to_u8(frames[t]))
        write_pgm(os.path.join(directory, f"mask_{t:05d}.pgm"), masks[t])


_FRAME_RE = re.compile(r"frame_(\d{5})\.ppm$")


def read_video_dir(directory):
    """Load a video directory; returns (frames (t,3,h,w), masks (t,h,w) int).

    All frames must share dimensions; the first-frame mask must exist and
    label objects with ids contiguous from 1.
    """
    names = sorted(os.listdir(directory))
    frame_ids = [int(m.group(1)) for n in names if (m := _FRAME_RE.match(n))]
    if not frame_ids:
        raise ValueError(f"{directory}: no frame_%05d.ppm files")
    if frame_ids != list(range(len(frame_ids))):
        raise ValueError(f"{directory}: frame numbering must be contiguous from 0")

    frames, masks = [], []
    shape = None
    for t in frame_ids:
        img = read_ppm(os.path.join(directory, f"frame_{t:05d}.ppm"))
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"{directory}: frame {t} dims {img.shape[:2]} != {shape[:2]}")
        frames.append(u8_to_frame(img))
        mask_path = os.path.join(directory, f"mask_{t:05d}.pgm")
        if not os.path.exists(mask_path):
            if t == 0:
                raise ValueError(f"{directory}: missing mask_00000.pgm")
            raise ValueError(f"{directory}: missing mask for frame {t}")
        mask = read_pgm(mask_path)
        if mask.shape != shape[:2]:
            raise ValueError(f"{directory}: mask {t} dims {mask.shape} != {shape[:2]}")
        masks.append(mask.astype(np.int32))

    ids = sorted(int(v) for v in np.unique(masks[0]) if v > 0)
    if not ids or ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"{directory}: first-frame object ids must be contiguous from 1, got {ids}")
    return np.stack(frames), np.stack(masks)
