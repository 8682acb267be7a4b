"""File formats: PGM (P2/P5) grayscale images, histogram CSV, plan CSV.

PGM covers DOTmark-style image instances; CSV is one value per line with an
optional header.  Pixel-to-index mapping is row-major throughout.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "read_pgm",
    "write_pgm",
    "read_histogram_csv",
    "write_histogram_csv",
    "write_matrix_csv",
    "block_mean_downsample",
]


def read_pgm(path) -> np.ndarray:
    """Read a P2 (ASCII) or P5 (binary) PGM image as a float 2-D array."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, fields, offset = _parse_pgm_header(data)
    width, height, maxval = fields
    if magic == b"P2":
        body = data[offset:].split()
        if len(body) < width * height:
            raise ValueError("truncated P2 image")
        px = np.array(body[: width * height], dtype=float)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        count = width * height
        px = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(float)
    if px.max(initial=0) > maxval:
        raise ValueError("pixel value exceeds declared maxval")
    return px.reshape(height, width)


def _parse_pgm_header(data: bytes):
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError("not a P2/P5 PGM file")
    magic = data[:2]
    # Header tokens: magic, width, height, maxval; '#' comments run to EOL.
    tokens = []
    i = 2
    while len(tokens) < 3 and i < len(data):
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 3:
        raise ValueError("truncated PGM header")
    i += 1  # single whitespace byte after maxval
    width, height, maxval = (int(t) for t in tokens)
    if width <= 0 or height <= 0 or not (0 < maxval < 65536):
        raise ValueError("invalid PGM dimensions")
    return magic, (width, height, maxval), i


def write_pgm(path, pixels, maxval: int = 255) -> None:
    """Write a 2-D array as binary P5, scaling [0, max(pixels)] to [0, maxval]."""
    img = np.asarray(pixels, dtype=float)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    top = img.max()
    scaled = np.zeros_like(img) if top <= 0 else img / top * maxval
    quantized = np.clip(np.rint(scaled), 0, maxval).astype("u1" if maxval < 256 else ">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(quantized.tobytes())


def read_histogram_csv(path) -> np.ndarray:
    """One value per line; a non-numeric first line is treated as a header."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError:
                if lineno == 0:
                    continue
                raise ValueError(f"{path}: bad value on line {lineno + 1}: {text!r}")
    if not values:
        raise ValueError(f"{path}: no histogram values")
    return np.array(values)


def write_histogram_csv(path, weights) -> None:
    with open(path, "w") as fh:
        for w in np.asarray(weights, dtype=float).ravel():
            fh.write(f"{w:.17g}\n")


def write_matrix_csv(path, matrix) -> None:
    m = np.asarray(matrix, dtype=float)
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def block_mean_downsample(pixels, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks; factor must divide both dims."""
    img = np.asarray(pixels, dtype=float)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image dimensions {h}x{w}")
    return img.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
