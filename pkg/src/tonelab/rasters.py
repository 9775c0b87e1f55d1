"""Raster file formats.

* Grayscale images: 8-bit PNG, pixel 255 = white paper.
* Float rasters: raw little-endian IEEE-754 float32 (``.f32``) plus a JSON
  sidecar ``<file>.json`` with ``{"shape": [C, H, W], "dtype": "f32le",
  "channels": [...]}``.
* Label rasters: raw little-endian uint16 (``.u16``) plus the same style of
  sidecar with ``dtype: "u16le"`` and a 2-D shape.
* Latent container (single stream, used by the CLI and the HTTP service):
  one UTF-8 JSON header line terminated by ``\\n`` followed by the raw
  f32le payload in channel-major order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from tonelab.core import ContractError, LatentMap

LATENT_CHANNELS = ["itn", "scr0", "scr1", "scr2"]


def load_gray_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_gray_png(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels, dtype=np.float32)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def encode_gray_png(pixels: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float32) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_gray_png(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_rgb_png(path, pixels: np.ndarray) -> None:
    """pixels: (H, W, 3) floats in [0, 1]."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float32) * 255.0), 0, 255)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path, format="PNG")


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_f32(path, array: np.ndarray, channels: list[str] | None = None) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ContractError(f"expected (C, H, W) array, got shape {arr.shape}")
    Path(path).write_bytes(arr.astype("<f4").tobytes(order="C"))
    meta = {"shape": list(arr.shape), "dtype": "f32le"}
    if channels is not None:
        if len(channels) != arr.shape[0]:
            raise ContractError("channel names must match channel count")
        meta["channels"] = channels
    _sidecar(path).write_text(json.dumps(meta))


def read_f32(path) -> tuple[np.ndarray, dict]:
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("dtype") != "f32le":
        raise ContractError(f"unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(meta["shape"])
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(shape)
    return arr.astype(np.float32), meta


def write_u16(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ContractError("label rasters are 2-D")
    if arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max:
        raise ContractError("labels out of uint16 range")
    Path(path).write_bytes(arr.astype("<u2").tobytes(order="C"))
    _sidecar(path).write_text(json.dumps({"shape": list(arr.shape), "dtype": "u16le"}))


def read_u16(path) -> np.ndarray:
    meta = json.loads(_sidecar(path).read_text())
    if meta.get("dtype") != "u16le":
        raise ContractError(f"unsupported dtype {meta.get('dtype')!r}")
    shape = tuple(meta["shape"])
    return np.frombuffer(Path(path).read_bytes(), dtype="<u2").reshape(shape).astype(np.int32)


def pack_latent(latent: LatentMap) -> bytes:
    """Single-stream latent container: JSON header line + f32le payload."""
    stacked = latent.stacked().astype("<f4")
    header = {
        "shape": list(stacked.shape),
        "dtype": "f32le",
        "channels": LATENT_CHANNELS,
    }
    return json.dumps(header).encode("utf-8") + b"\n" + stacked.tobytes(order="C")


def unpack_latent(data: bytes) -> LatentMap:
    newline = data.find(b"\n")
    if newline < 0:
        raise ContractError("latent container missing header line")
    header = json.loads(data[:newline].decode("utf-8"))
    if header.get("dtype") != "f32le":
        raise ContractError("latent container must be f32le")
    shape = tuple(header["shape"])
    if len(shape) != 3 or shape[0] != 4:
        raise ContractError(f"latent container must hold 4 channels, got {shape}")
    body = data[newline + 1 :]
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise ContractError(
            f"latent payload holds {len(body)} bytes, header implies {expected}"
        )
    payload = np.frombuffer(body, dtype="<f4")
    return LatentMap.from_stacked(payload.reshape(shape).copy())


def write_latent(path, latent: LatentMap) -> None:
    Path(path).write_bytes(pack_latent(latent))


def read_latent(path) -> LatentMap:
    return unpack_latent(Path(path).read_bytes())
