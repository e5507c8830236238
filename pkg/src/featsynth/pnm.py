"""Binary PGM (P5) / PPM (P6) readers and writers, maxval 255.

Masks are stored as P5 with pixel value = class id and 255 = ignore.
Images are stored as P6 with RGB in [0, 255].
"""

import numpy as np


def _read_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise ValueError(f"expected {magic.decode()} file, got header {data[:2]!r}")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed between tokens
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} (only 255)")
    return width, height, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array."""
    with open(path, "rb") as f:
        data = f.read()
    width, height, pos = _read_header(data, b"P5")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise ValueError(f"truncated PGM payload in {path}")
    return pixels.reshape(height, width).copy()


def write_pgm(path, array: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float32 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    width, height, pos = _read_header(data, b"P6")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    if pixels.size != width * height * 3:
        raise ValueError(f"truncated PPM payload in {path}")
    hwc = pixels.reshape(height, width, 3).astype(np.float32) / 255.0
    return np.ascontiguousarray(hwc.transpose(2, 0, 1))


def write_ppm(path, array: np.ndarray) -> None:
    """Write a (3, H, W) float array in [0, 1] as binary PPM."""
    arr = np.asarray(array)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) array, got shape {arr.shape}")
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    _, h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes())
