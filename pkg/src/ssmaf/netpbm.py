"""8-bit binary NetPBM (P5 grayscale, P6 colour) reading and writing.

Images are float arrays in [0, 1]: (H, W) for P5 and (3, H, W) for P6.
"""

from __future__ import annotations

import os

import numpy as np


class NetPBMError(ValueError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        h, w = img.shape
        body = quantize(img).tobytes()
        magic = b"P5"
    elif img.ndim == 3 and img.shape[0] == 3:
        _, h, w = img.shape
        body = quantize(img).transpose(1, 2, 0).tobytes()
        magic = b"P6"
    else:
        raise NetPBMError(f"expected (H, W) or (3, H, W) image, got shape {img.shape}")
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + body


def write_netpbm(path, img: np.ndarray) -> None:
    data = encode_netpbm(img)
    with open(path, "wb") as fh:
        fh.write(data)


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetPBMError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetPBMError("malformed header: missing whitespace before raster")
    return tokens, pos + 1


def decode_netpbm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetPBMError(f"{source}: unsupported magic {magic!r}, expected P5 or P6")
    try:
        tokens, offset = _header_tokens(data[2:], 3)
    except NetPBMError as exc:
        raise NetPBMError(f"{source}: {exc}") from None
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise NetPBMError(f"{source}: malformed header fields {tokens!r}") from None
    if w < 1 or h < 1:
        raise NetPBMError(f"{source}: invalid dimensions {w}x{h}")
    if maxval != 255:
        raise NetPBMError(f"{source}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = data[2 + offset:]
    if len(body) < need:
        raise NetPBMError(f"{source}: truncated raster, {len(body)} of {need} bytes")
    raster = np.frombuffer(body[:need], dtype=np.uint8).astype(float) / 255.0
    if channels == 1:
        return raster.reshape(h, w)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_netpbm(data, os.fspath(path))
