"""Dataset ingestion: CIFAR-10 binary records, PPM/PGM images, resizing.

CIFAR-10 binary: 3073-byte records, one label byte (0..9) followed by 3072
pixel bytes in channel-planar R,G,B order (32x32 each). PPM (P6) and PGM
(P5) are the binary netpbm formats with maxval <= 255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


def load_cifar10(path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0,1], shape (N, 3, 32, 32), plus int labels."""
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
        raise DataError(
            f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD}"
        )
    n = len(blob) // CIFAR_RECORD
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label byte {labels.max()} out of range 0..9")
    pixels = raw[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    return pixels.astype(np.float64) / 255.0, labels


def write_cifar10(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of load_cifar10 for [0,1] images; round-trips bit-exactly."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4 or images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"write_cifar10: images must be (N, 3, 32, 32), got {images.shape}")
    if labels.shape != (images.shape[0],) or labels.min() < 0 or labels.max() > 9:
        raise DataError("write_cifar10: labels must be (N,) bytes in 0..9")
    pix = np.rint(images * 255.0).astype(np.uint8).reshape(images.shape[0], -1)
    rows = np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1)
    Path(path).write_bytes(rows.tobytes())


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over the whole set (std floor 1e-8)."""
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-8)
    return mean, std


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


# ---------------------------------------------------------------------------
# netpbm (PPM P6 / PGM P5)


def _parse_pnm_header(blob: bytes, path, magic: bytes):
    if blob[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DataError(f"{path}: truncated header")
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(blob) and blob[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise DataError(f"{path}: malformed header byte {c!r}")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return width, height, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Binary P6 image as uint8 (3, H, W)."""
    blob = Path(path).read_bytes()
    w, h, _, pos = _parse_pnm_header(blob, path, b"P6")
    need = w * h * 3
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: raster has {len(raster)} bytes, needs {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """Binary P5 image as uint8 (H, W)."""
    blob = Path(path).read_bytes()
    w, h, _, pos = _parse_pnm_header(blob, path, b"P5")
    need = w * h
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: raster has {len(raster)} bytes, needs {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"write_ppm: image must be (3, H, W), got {image.shape}")
    h, w = image.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(image.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise DataError(f"write_pgm: image must be (H, W), got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())


# ---------------------------------------------------------------------------
# resizing and segmentation pairs


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of the trailing two axes.

    Half-pixel-centered source mapping, src = floor((2i+1)*in / (2*out)),
    in exact integer arithmetic: bit-exact and displacement-symmetric.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("resize target must be >= 1")
    in_h, in_w = arr.shape[-2], arr.shape[-1]
    rows = ((2 * np.arange(out_h) + 1) * in_h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * in_w) // (2 * out_w)
    return arr[..., rows[:, None], cols[None, :]]


MASK_THRESHOLD = 128  # pgm value >= 128 means foreground


def load_segmentation_pairs(directory, size: int = 64):
    """PPM images paired with PGM masks by basename, resized to size x size.

    Returns ([0,1] float images (N, 3, s, s), binary int masks (N, s, s)).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    ppms = sorted(directory.glob("*.ppm"))
    pgms = {p.stem: p for p in directory.glob("*.pgm")}
    if not ppms:
        raise DataError(f"{directory}: no .ppm images found")
    extra = set(pgms) - {p.stem for p in ppms}
    if extra:
        raise DataError(f"{directory}: masks without images: {sorted(extra)}")
    images = []
    masks = []
    for img_path in ppms:
        mask_path = pgms.get(img_path.stem)
        if mask_path is None:
            raise DataError(f"{directory}: image {img_path.name} has no .pgm mask")
        img = resize_nearest(read_ppm(img_path), size, size)
        mask = resize_nearest(read_pgm(mask_path), size, size)
        images.append(img.astype(np.float64) / 255.0)
        masks.append((mask >= MASK_THRESHOLD).astype(np.int64))
    return np.stack(images), np.stack(masks)
