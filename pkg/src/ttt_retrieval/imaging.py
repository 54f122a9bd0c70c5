"""Deterministic, seed-driven image operations.

Images are height x width x 3 float arrays with values in [0, 1]; every
operation here is pure given (Image, Rng) and clamps its output back into
range. The interchange format is binary PPM (P6, maxval 255).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, PpmParseError, ShapeError

# Weights for the grayscale projection used by saturation and the sketch
# renderer (ITU-R 601 luma).
_LUMA = np.array([0.299, 0.587, 0.114])


class Rng:
    """Seeded random stream, splittable into independent child streams.

    Children are keyed by (seed, split path), so drawing order elsewhere in
    a batch never changes the randomness a given sample sees.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence([self.seed, *self._path])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, index: int) -> "Rng":
        """Independent child stream; same (seed, path) always gives the same stream."""
        return Rng(self.seed, (*self._path, int(index)))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


@dataclass
class Image:
    """Row-major float pixel grid, 3 channels, values in [0, 1]."""

    pixels: np.ndarray  # (height, width, 3) float64

    def __post_init__(self):
        arr = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"Image: expected (h, w, 3) pixels, got {arr.shape}")
        self.pixels = arr

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def copy(self) -> "Image":
        return Image(self.pixels.copy())

    def flat(self) -> np.ndarray:
        """Row-major flattened pixels, length h*w*3."""
        return self.pixels.reshape(-1)


def rotate(img: Image, angle: int) -> Image:
    """Counter-clockwise rotation by 0/90/180/270 degrees.

    90/270 require a square image so that label semantics stay shape-stable.
    """
    if angle not in (0, 90, 180, 270):
        raise ContractError(f"rotate: angle must be one of 0/90/180/270, got {angle}")
    if angle in (90, 270) and img.height != img.width:
        raise ShapeError(
            f"rotate: {angle} degrees needs a square image, got {img.height}x{img.width}")
    if angle == 0:
        return img.copy()
    k = angle // 90
    return Image(np.ascontiguousarray(np.rot90(img.pixels, k=k, axes=(0, 1))))


def tile3x3(img: Image) -> list[Image]:
    """Split into 9 equal tiles, row-major order (top-left first)."""
    h, w = img.height, img.width
    if h % 3 or w % 3:
        raise ShapeError(f"tile3x3: dimensions must divide by 3, got {h}x{w}")
    th, tw = h // 3, w // 3
    tiles = []
    for r in range(3):
        for c in range(3):
            tiles.append(Image(img.pixels[r * th:(r + 1) * th,
                                          c * tw:(c + 1) * tw].copy()))
    return tiles


def assemble3x3(tiles: Sequence[Image], order: Sequence[int]) -> Image:
    """Place tile order[p] at grid position p; inverse of tile3x3 for identity order."""
    if len(tiles) != 9:
        raise ShapeError(f"assemble3x3: need 9 tiles, got {len(tiles)}")
    if sorted(order) != list(range(9)):
        raise ContractError(f"assemble3x3: order {list(order)} is not a permutation of 0..8")
    th, tw = tiles[0].height, tiles[0].width
    for t in tiles:
        if (t.height, t.width) != (th, tw):
            raise ShapeError(
                f"assemble3x3: tile size {t.height}x{t.width} differs from {th}x{tw}")
    out = np.empty((3 * th, 3 * tw, 3))
    for p, src in enumerate(order):
        r, c = divmod(p, 3)
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = tiles[src].pixels
    return Image(out)


def bilinear_resize(img: Image, out_h: int, out_w: int) -> Image:
    """Bilinear resampling with half-pixel-center alignment."""
    h, w = img.height, img.width
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    p = img.pixels
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    return Image(np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0))


def random_resized_crop(img: Image, scale: tuple[float, float], out_h: int,
                        out_w: int, rng: Rng,
                        ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> Image:
    """Crop a random area fraction at a random aspect ratio, then resize.

    Area fraction is uniform in `scale`, aspect ratio uniform in `ratio`.
    After 10 rejected attempts (crop would not fit) falls back to the
    largest centered square crop.
    """
    lo, hi = scale
    if not (0.0 < lo <= hi <= 1.0):
        raise ContractError(f"random_resized_crop: bad scale range [{lo}, {hi}]")
    h, w = img.height, img.width
    area = h * w
    crop_h = crop_w = None
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        aspect = rng.uniform(ratio[0], ratio[1])  # width / height
        ch = int(round(np.sqrt(area * frac / aspect)))
        cw = int(round(np.sqrt(area * frac * aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            crop_h, crop_w = ch, cw
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            break
    if crop_h is None:
        crop_h, crop_w = min(h, w), min(h, w)
        top = (h - crop_h) // 2
        left = (w - crop_w) // 2
    crop = Image(img.pixels[top:top + crop_h, left:left + crop_w].copy())
    return bilinear_resize(crop, out_h, out_w)


def horizontal_flip(img: Image, p: float, rng: Rng) -> Image:
    """Mirror the columns with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"horizontal_flip: p must be in [0, 1], got {p}")
    if rng.uniform() < p:
        return Image(np.ascontiguousarray(img.pixels[:, ::-1]))
    return img.copy()


def _blend(img: np.ndarray, other: np.ndarray, factor: float) -> np.ndarray:
    # img * f + other * (1 - f): exact identity at f == 1.
    return np.clip(img * factor + other * (1.0 - factor), 0.0, 1.0)


def apply_brightness(img: Image, factor: float) -> Image:
    return Image(np.clip(img.pixels * factor, 0.0, 1.0))


def apply_contrast(img: Image, factor: float) -> Image:
    mean = float((img.pixels @ _LUMA).mean())
    return Image(_blend(img.pixels, mean, factor))


def apply_saturation(img: Image, factor: float) -> Image:
    gray = (img.pixels @ _LUMA)[:, :, None]
    return Image(_blend(img.pixels, gray, factor))


def color_jitter(img: Image, brightness: float, contrast: float,
                 saturation: float, rng: Rng) -> Image:
    """Brightness/contrast/saturation jitter in a seed-shuffled order.

    Each factor is uniform in [max(0, 1 - strength), 1 + strength]; zero
    strengths reproduce the input bit-exactly.
    """
    for s, name in ((brightness, "brightness"), (contrast, "contrast"),
                    (saturation, "saturation")):
        if s < 0:
            raise ContractError(f"color_jitter: {name} strength must be >= 0, got {s}")
    order = rng.permutation(3)
    factors = [
        float(rng.uniform(max(0.0, 1.0 - brightness), 1.0 + brightness)),
        float(rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)),
        float(rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)),
    ]
    ops = (apply_brightness, apply_contrast, apply_saturation)
    out = img
    for idx in order:
        out = ops[idx](out, factors[idx])
    return out


@dataclass
class AugmentConfig:
    """The stochastic view pipeline: resized crop, flip, color jitter."""

    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    @classmethod
    def identity(cls) -> "AugmentConfig":
        """A configuration under which augment() is the identity map."""
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0,
                   brightness=0.0, contrast=0.0, saturation=0.0)


def augment(img: Image, cfg: AugmentConfig, rng: Rng) -> Image:
    """One stochastic view: crop -> flip -> jitter, each on its own substream."""
    out = random_resized_crop(img, cfg.crop_scale, img.height, img.width,
                              rng.split(0), cfg.crop_ratio)
    out = horizontal_flip(out, cfg.flip_p, rng.split(1))
    return color_jitter(out, cfg.brightness, cfg.contrast, cfg.saturation,
                        rng.split(2))


# -- PPM (P6) files ---------------------------------------------------------

def write_ppm(img: Image, path) -> None:
    """Binary PPM, maxval 255, round-half-up quantization."""
    data = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comment lines, then read one token.
    n = len(buf)
    while pos < n:
        b = buf[pos]
        if b in b" \t\r\n":
            pos += 1
        elif b == ord("#"):
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PpmParseError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and buf[pos] not in b" \t\r\n":
        pos += 1
    return buf[start:pos], pos


def read_ppm(path) -> Image:
    """Parse a binary P6 PPM with maxval 255 into float pixels in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P6":
        raise PpmParseError(f"unsupported magic {buf[:2]!r} at byte 0 (want P6)")
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(buf, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise PpmParseError(
                f"non-numeric header token {token!r} at byte {pos - len(token)}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PpmParseError(f"bad dimensions {width}x{height} at byte {pos}")
    if maxval != 255:
        raise PpmParseError(f"unsupported maxval {maxval} at byte {pos}")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    payload = buf[pos:pos + expected]
    if len(payload) < expected:
        raise PpmParseError(
            f"truncated payload at byte {pos + len(payload)}: "
            f"expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0)
