"""Image file I/O: binary PGM (P5) / PPM (P6), PNG via matplotlib."""

from __future__ import annotations

import numpy as np


def _read_pnm_header(f):
    fields = []
    while len(fields) < 4:
        line = f.readline()
        if not line:
            raise ValueError("truncated PNM header")
        line = line.split(b"#")[0]
        fields.extend(line.split())
    return fields


def write_pgm(path, image):
    """Write a 2-d float [0,1] or uint8 array as binary PGM."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a 2-d image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def read_pgm(path):
    """Read binary PGM into a float array in [0,1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h, maxval = int(w), int(h), int(maxval)
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.float32) / maxval


def write_ppm(path, image):
    """Write an (H, W, 3) float [0,1] or uint8 array as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM wants (H, W, 3), got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w, h, maxval = int(w), int(h), int(maxval)
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float32) / maxval


def write_image(path, image):
    """Dispatch on extension: .pgm, .ppm, or .png."""
    path = str(path)
    if path.endswith(".pgm"):
        write_pgm(path, image)
    elif path.endswith(".ppm"):
        write_ppm(path, image)
    elif path.endswith(".png"):
        import matplotlib.image
        arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
        matplotlib.image.imsave(path, arr,
                                cmap="gray" if arr.ndim == 2 else None,
                                vmin=0.0, vmax=1.0)
    else:
        raise ValueError(f"unsupported image extension: {path}")


def read_image(path):
    path = str(path)
    if path.endswith(".pgm"):
        return read_pgm(path)
    if path.endswith(".ppm"):
        return read_ppm(path)
    if path.endswith(".png"):
        import matplotlib.image
        arr = matplotlib.image.imread(path)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        if arr.ndim == 3 and arr.shape[2] == 4:
            arr = arr[:, :, :3]
        return arr.astype(np.float32)
    raise ValueError(f"unsupported image extension: {path}")
