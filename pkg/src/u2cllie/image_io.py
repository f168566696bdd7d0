"""Image files, color-space conversion, and synthetic low-light pairs.

Images on disk are 8-bit RGB (PNG through Pillow, PPM P6 through a small
hand-rolled codec as the no-dependency fallback). In memory everything is
float32 in [0, 1], channels-first.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS_DIV = 1e-6


class ImageIOError(RuntimeError):
    """Unreadable, unsupported, or unwritable image data."""


@dataclass
class Image:
    """8-bit RGB raster; pixels are uint8 with shape [height, width, 3]."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3) or self.pixels.dtype != np.uint8:
            raise ImageIOError(f"pixel buffer must be uint8 [{self.height},{self.width},3], "
                               f"got {self.pixels.dtype} {self.pixels.shape}")

    @classmethod
    def from_float(cls, arr: np.ndarray) -> "Image":
        """Quantize a [3,H,W] float array in [0,1] to 8-bit."""
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ImageIOError(f"expected [3,H,W] float array, got {arr.shape}")
        q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cls(width=arr.shape[2], height=arr.shape[1], pixels=q.transpose(1, 2, 0))

    def to_float(self) -> np.ndarray:
        """Channels-first float32 in [0,1]."""
        return (self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


@dataclass
class YcrcbImage:
    """Luma/chroma planes in [0,1], each shaped [H,W]."""

    y: np.ndarray
    cr: np.ndarray
    cb: np.ndarray


# Full-range BT.601 primaries. The inverse is solved numerically so that a
# zero-strength luminance edit round-trips to the identity at float precision.
YCRCB_FORWARD = np.array([
    [0.299, 0.587, 0.114],
    [0.5, -0.4187, -0.0813],
    [-0.1687, -0.3313, 0.5],
], dtype=np.float64)
YCRCB_OFFSET = np.array([0.0, 0.5, 0.5], dtype=np.float64)
YCRCB_INVERSE = np.linalg.inv(YCRCB_FORWARD)


class _ClampCounter:
    """Counts out-of-range values silently clamped during conversion."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_warnings = _ClampCounter()


def rgb_to_ycrcb(rgb: np.ndarray) -> YcrcbImage:
    """Convert a [3,H,W] float RGB array in [0,1] to YCrCb planes."""
    arr = np.asarray(getattr(rgb, "data", rgb), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageIOError(f"expected [3,H,W] RGB array, got {arr.shape}")
    out_of_range = int(((arr < 0.0) | (arr > 1.0)).sum())
    if out_of_range:
        clamp_warnings.count += out_of_range
        arr = np.clip(arr, 0.0, 1.0)
    planes = np.einsum("ij,jhw->ihw", YCRCB_FORWARD, arr) + YCRCB_OFFSET[:, None, None]
    planes = np.clip(planes, 0.0, 1.0).astype(np.float32)
    return YcrcbImage(y=planes[0], cr=planes[1], cb=planes[2])


def ycrcb_to_rgb(img: YcrcbImage) -> np.ndarray:
    """Invert rgb_to_ycrcb; output is [3,H,W] float32 clamped to [0,1]."""
    planes = np.stack([img.y, img.cr, img.cb]).astype(np.float64)
    planes -= YCRCB_OFFSET[:, None, None]
    rgb = np.einsum("ij,jhw->ihw", YCRCB_INVERSE, planes)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def luminance_diff_target(y_high: np.ndarray, y_low: np.ndarray) -> np.ndarray:
    """Normalized luminance gap (y_high - y_low) / (y_high + eps), in [0,1]."""
    y_high = np.asarray(y_high, dtype=np.float32)
    y_low = np.asarray(y_low, dtype=np.float32)
    if y_high.shape != y_low.shape:
        raise ImageIOError(f"luminance planes disagree: {y_high.shape} vs {y_low.shape}")
    diff = (y_high - y_low) / (y_high + np.float32(EPS_DIV))
    return np.clip(diff, 0.0, 1.0)


# ---------------------------------------------------------------------------
# file formats


def save_png(img: Image, path) -> None:
    try:
        from PIL import Image as PILImage
        PILImage.fromarray(img.pixels, mode="RGB").save(str(path), format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write PNG {path}: {exc}") from exc


def load_png(path) -> Image:
    try:
        from PIL import Image as PILImage
        with PILImage.open(str(path)) as handle:
            if handle.mode != "RGB":
                raise ImageIOError(f"{path}: unsupported color mode {handle.mode!r}, "
                                   "only 8-bit RGB is handled")
            arr = np.asarray(handle, dtype=np.uint8)
    except ImageIOError:
        raise
    except Exception as exc:  # Pillow raises several decode error types
        raise ImageIOError(f"cannot read PNG {path}: {exc}") from exc
    return Image(width=arr.shape[1], height=arr.shape[0], pixels=arr)


def save_gray_png(values: np.ndarray, path) -> None:
    """Write a [H, W] float map in [0, 1] as an 8-bit grayscale PNG."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ImageIOError(f"grayscale map must be 2-d, got shape {arr.shape}")
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    try:
        from PIL import Image as PILImage
        PILImage.fromarray(pixels, mode="L").save(str(path), format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write PNG {path}: {exc}") from exc


def save_ppm(img: Image, path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    try:
        Path(path).write_bytes(header + img.pixels.tobytes())
    except OSError as exc:
        raise ImageIOError(f"cannot write PPM {path}: {exc}") from exc


def load_ppm(path) -> Image:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read PPM {path}: {exc}") from exc
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ImageIOError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ImageIOError(f"{path}: unsupported max value {maxval}, only 8-bit handled")
    body = raw[m.end():]
    need = width * height * 3
    if len(body) < need:
        raise ImageIOError(f"{path}: truncated pixel data ({len(body)} < {need} bytes)")
    pixels = np.frombuffer(body[:need], dtype=np.uint8).reshape(height, width, 3)
    return Image(width=width, height=height, pixels=pixels.copy())


def save_image(img: Image, path) -> None:
    """Write PNG or, for .ppm paths, the fallback P6 codec."""
    if str(path).lower().endswith(".ppm"):
        save_ppm(img, path)
    else:
        save_png(img, path)


def load_image(path) -> Image:
    if str(path).lower().endswith(".ppm"):
        return load_ppm(path)
    return load_png(path)


# ---------------------------------------------------------------------------
# synthetic pairs and augmentation


def synth_lowlight(img: Image, gamma: float, scale: float, noise_sigma: float, seed) -> Image:
    """Darken a well-lit image: clamp(scale * I^gamma + gaussian noise).

    With noise_sigma = 0 the result is pointwise <= the input, so synthetic
    pairs behave like exposure-bracketed captures.
    """
    if gamma < 1.0:
        raise ImageIOError(f"gamma must be >= 1, got {gamma}")
    if not 0.0 < scale <= 1.0:
        raise ImageIOError(f"scale must be in (0, 1], got {scale}")
    if noise_sigma < 0.0:
        raise ImageIOError(f"noise_sigma must be >= 0, got {noise_sigma}")
    f = img.pixels.astype(np.float64) / 255.0
    low = scale * np.power(f, gamma)
    if noise_sigma > 0.0:
        rng = np.random.Generator(np.random.PCG64(seed))
        low = low + rng.normal(0.0, noise_sigma, size=low.shape)
    low = np.clip(low, 0.0, 1.0)
    return Image(width=img.width, height=img.height,
                 pixels=np.rint(low * 255.0).astype(np.uint8))


def _procedural_scene(rng, extent: int) -> np.ndarray:
    """Smooth random [3,H,W] scene: sinusoid gradients plus gaussian blobs."""
    yy, xx = np.mgrid[0:extent, 0:extent] / max(extent - 1, 1)
    channels = []
    for _ in range(3):
        freq = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        plane = (0.55 + 0.25 * np.sin(freq[0] * np.pi * xx + phase[0])
                 + 0.2 * np.cos(freq[1] * np.pi * yy + phase[1]))
        channels.append(plane)
    scene = np.stack(channels)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        radius = rng.uniform(0.08, 0.25)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2)))
        scene += rng.uniform(-0.3, 0.3, size=(3, 1, 1)) * blob
    return np.clip(scene, 0.05, 1.0).astype(np.float32)


def make_synthetic_dataset(count: int, extent: int, seed,
                           gamma_range=(2.0, 4.0), scale_range=(0.15, 0.4),
                           sigma_range=(0.01, 0.04)):
    """Deterministic list of (low, high) float pairs, each [3,extent,extent].

    Scenes are procedural, darkening parameters are drawn per pair, and both
    halves round-trip through 8-bit quantization the way file-backed pairs do.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = []
    for _ in range(count):
        high = Image.from_float(_procedural_scene(rng, extent))
        gamma = float(rng.uniform(*gamma_range))
        scale = float(rng.uniform(*scale_range))
        sigma = float(rng.uniform(*sigma_range))
        low = synth_lowlight(high, gamma, scale, sigma, seed=int(rng.integers(2 ** 31)))
        pairs.append((low.to_float(), high.to_float()))
    return pairs


def crop_flip_augment(pair, crop: int, seed, flips: bool = True):
    """Apply one shared random crop and flip pattern to both halves of a pair.

    Accepts float arrays with trailing [H, W] axes or Image instances; the
    same geometry hits both elements, so aligned pairs stay aligned.
    """
    low, high = pair
    low_arr, low_img = _as_hw_array(low)
    high_arr, high_img = _as_hw_array(high)
    h, w = low_arr.shape[-2:]
    if high_arr.shape[-2:] != (h, w):
        raise ImageIOError(f"pair extents disagree: {low_arr.shape[-2:]} vs {high_arr.shape[-2:]}")
    if crop > min(h, w):
        raise ImageIOError(f"crop {crop} exceeds image extents {h}x{w}")
    rng = np.random.Generator(np.random.PCG64(seed))
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip_h = flips and bool(rng.random() < 0.5)
    flip_v = flips and bool(rng.random() < 0.5)

    def apply(arr):
        out = arr[..., top:top + crop, left:left + crop]
        if flip_v:
            out = out[..., ::-1, :]
        if flip_h:
            out = out[..., :, ::-1]
        return np.ascontiguousarray(out)

    return (_restore(apply(low_arr), low_img), _restore(apply(high_arr), high_img))


def _as_hw_array(x):
    if isinstance(x, Image):
        return x.to_float(), True
    return np.asarray(x), False


def _restore(arr, was_image):
    return Image.from_float(arr) if was_image else arr
