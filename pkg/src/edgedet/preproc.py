"""Image pre-processing: bilinear resize and per-channel normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

RESOLUTIONS = {"low": (416, 736), "mid": (576, 1024), "high": (832, 1472)}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB image stored as an (H, W, 3) uint8 array."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) RGB data, got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError("image data must be uint8")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def parse_resolution(value) -> tuple[int, int]:
    """A resolution name from ``RESOLUTIONS`` or an (H, W) pair."""
    if isinstance(value, str):
        if value not in RESOLUTIONS:
            raise ValueError(f"unknown resolution {value!r}; choose from {sorted(RESOLUTIONS)} or give [H, W]")
        return RESOLUTIONS[value]
    h, w = (int(v) for v in value)
    return h, w


@dataclass(frozen=True)
class PreprocConfig:
    resolution: tuple[int, int] = RESOLUTIONS["mid"]
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if min(self.resolution) < 1:
            raise ValueError("target resolution must be at least 1x1")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ValueError("mean/std need three entries and std must be positive")


def _source_coords(n_out: int, n_in: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: Image, target: tuple[int, int]) -> Image:
    """Half-pixel-centered bilinear resize with edge clamping; rounds half to even."""
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError("target dims must be >= 1")
    if (th, tw) == (img.height, img.width):
        return img
    src = img.data.astype(np.float64)
    y0, y1, wy = _source_coords(th, img.height)
    x0, x1, wx = _source_coords(tw, img.width)
    wx = wx[None, :, None]
    wy = wy[:, None, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def normalize(img: Image, cfg: PreprocConfig = PreprocConfig()) -> Tensor:
    """(u8 / 255 - mean) / std per channel, returned channel-planar (3, H, W)."""
    x = img.data.astype(np.float64) / 255.0
    y = (x - np.array(cfg.mean)) / np.array(cfg.std)
    return Tensor(np.ascontiguousarray(y.transpose(2, 0, 1)).astype(np.float32))


def preprocess(img: Image, cfg: PreprocConfig = PreprocConfig()) -> Tensor:
    return normalize(resize_bilinear(img, cfg.resolution), cfg)


# --- PPM (P6) --------------------------------------------------------------


def _tokens(buf: bytes, count: int):
    out, i = [], 2
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PPM header")
        out.append(int(buf[i:j]))
        i = j
    return out, i + 1


def read_ppm(path: str | Path) -> Image:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), offset = _tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM files are supported")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return Image(pixels.reshape(h, w, 3))


def write_ppm(img: Image, path: str | Path) -> None:
    with open(path, "wb") as fp:
        fp.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        fp.write(np.ascontiguousarray(img.data).tobytes())
