"""Texture-enhancing preprocessing: grayscale, LBP, Haar DWT, channel stacking.

Images are plain ``uint8`` rasters. The standard pipeline resizes first, then
builds the three-channel sample ``[gray, lbp, dwt]`` scaled into [0, 1].
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import BadDims, DimMismatch, ImageFormatError, NotGrayscale, NotRGB

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major raster; ``pixels`` is ``[h, w]`` for grayscale, ``[h, w, 3]`` for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if not (px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 3)):
            raise BadDims(f"unsupported pixel array shape {px.shape}")
        if px.shape[0] < 2 or px.shape[1] < 2:
            raise BadDims(f"image must be at least 2x2, got {px.shape[1]}x{px.shape[0]}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return 1 if self.pixels.ndim == 2 else 3

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


def _round_half_up(x):
    return np.floor(x + 0.5)


def _require_gray(img, what):
    if img.channels != 1:
        raise NotGrayscale(f"{what} needs a single-channel image")


def to_grayscale(img):
    if img.channels != 3:
        raise NotRGB("to_grayscale needs a 3-channel image")
    rgb = img.pixels.astype(np.float64)
    y = GRAY_WEIGHTS[0] * rgb[..., 0] + GRAY_WEIGHTS[1] * rgb[..., 1] + GRAY_WEIGHTS[2] * rgb[..., 2]
    return Image(np.clip(_round_half_up(y), 0, 255).astype(np.uint8))


def gray_to_rgb(img):
    _require_gray(img, "gray_to_rgb")
    return Image(np.repeat(img.pixels[:, :, None], 3, axis=2))


def lbp(img):
    """8-neighbour, radius-1 LBP with replicate borders.

    Neighbours are read clockwise from the top-left; a neighbour ``>=`` the
    centre sets its bit, and the top-left neighbour is bit 7.
    """
    _require_gray(img, "lbp")
    return Image(_kernels.lbp(img.pixels))


def haar_dwt2(x):
    """Single-level 2-D Haar in averaging convention: returns (LL, LH, HL, HH)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] % 2 or x.shape[1] % 2:
        raise BadDims(f"haar_dwt2 needs an even-sized 2-D array, got {x.shape}")
    return _kernels.haar_forward(x)


def haar_idwt2(ll, lh, hl, hh):
    h2, w2 = ll.shape
    out = np.empty((2 * h2, 2 * w2))
    out[0::2, 0::2] = ll + lh + hl + hh
    out[0::2, 1::2] = ll - lh + hl - hh
    out[1::2, 0::2] = ll + lh - hl - hh
    out[1::2, 1::2] = ll - lh - hl + hh
    return out


def _pad_even(px):
    pad_h, pad_w = px.shape[0] % 2, px.shape[1] % 2
    if pad_h or pad_w:
        px = np.pad(px, ((0, pad_h), (0, pad_w)), mode="edge")
    return px


def dwt_haar(img):
    """Quadrant image of a one-level Haar DWT.

    LL goes top-left (rounded directly), LH top-right, HL bottom-left and HH
    bottom-right; detail coefficients are shifted by 127.5 so that zero detail
    lands on 128. Odd sizes are edge-padded and the padded size is kept.
    """
    _require_gray(img, "dwt_haar")
    px = _pad_even(img.pixels)
    ll, lh, hl, hh = haar_dwt2(px)
    h2, w2 = ll.shape
    out = np.empty((2 * h2, 2 * w2))
    out[:h2, :w2] = ll
    out[:h2, w2:] = lh + 127.5
    out[h2:, :w2] = hl + 127.5
    out[h2:, w2:] = hh + 127.5
    return Image(np.clip(_round_half_up(out), 0, 255).astype(np.uint8))


def stack_channels(gray, lbp_img, dwt_img):
    """Stack three grayscale images into a float32 ``[3, h, w]`` array in [0, 1]."""
    for im, name in ((gray, "gray"), (lbp_img, "lbp"), (dwt_img, "dwt")):
        _require_gray(im, f"stack_channels ({name})")
    if not (gray.pixels.shape == lbp_img.pixels.shape == dwt_img.pixels.shape):
        raise DimMismatch(
            f"stack_channels: sizes differ {gray.pixels.shape}, {lbp_img.pixels.shape}, {dwt_img.pixels.shape}"
        )
    stacked = np.stack([gray.pixels, lbp_img.pixels, dwt_img.pixels]).astype(np.float32)
    return stacked / np.float32(255.0)


def unstack_channels(sample):
    px = np.clip(_round_half_up(np.asarray(sample, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return Image(px[0]), Image(px[1]), Image(px[2])


def resize_nearest(img, out_w, out_h):
    if out_w < 2 or out_h < 2:
        raise BadDims(f"resize target must be at least 2x2, got {out_w}x{out_h}")
    rows = (np.arange(out_h) * img.height) // out_h
    cols = (np.arange(out_w) * img.width) // out_w
    return Image(img.pixels[rows[:, None], cols[None, :]])


def preprocess_image(img, size=None):
    """Full pipeline: grayscale if needed, nearest resize, then the channel stack."""
    gray = to_grayscale(img) if img.channels == 3 else img
    if size is not None and (gray.width, gray.height) != (size, size):
        gray = resize_nearest(gray, size, size)
    dwt_img = dwt_haar(gray)
    if dwt_img.pixels.shape != gray.pixels.shape:
        # odd sizes: the DWT keeps its padded size, crop it back for stacking
        dwt_img = Image(dwt_img.pixels[: gray.height, : gray.width])
    return stack_channels(gray, lbp(gray), dwt_img)


# ------------------------------------------------------------------ netpbm IO

def _tokens(buf, n):
    """Read the magic plus ``n`` integer header fields, skipping comments."""
    out, pos = [], 0
    while len(out) < n + 1:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated netpbm header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from raster data
    return out, pos + 1


def read_netpbm(path):
    """Read an 8-bit binary PGM (P5) or PPM (P6)."""
    buf = Path(path).read_bytes()
    (magic, *fields), offset = _tokens(buf, 3)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported netpbm magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images (maxval 255) are supported")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset) if len(buf) - offset >= n else None
    if data is None:
        raise ImageFormatError(f"{path}: raster is truncated")
    return Image(data.reshape((h, w) if ch == 1 else (h, w, 3)))


def write_netpbm(path, img):
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    Path(path).write_bytes(header + img.pixels.tobytes())


# ------------------------------------------------------------------ .olt cache

OLT_MAGIC = b"OLT1"


def write_olt(path, sample):
    sample = np.asarray(sample, dtype="<f4")
    if sample.ndim != 3 or sample.shape[0] != 3:
        raise DimMismatch(f"expected a [3, h, w] sample, got {sample.shape}")
    _, h, w = sample.shape
    Path(path).write_bytes(OLT_MAGIC + struct.pack("<II", h, w) + sample.tobytes())


def read_olt(path):
    buf = Path(path).read_bytes()
    if buf[:4] != OLT_MAGIC:
        raise ImageFormatError(f"{path}: not an OLT1 file")
    h, w = struct.unpack_from("<II", buf, 4)
    n = 3 * h * w
    if len(buf) != 12 + 4 * n:
        raise ImageFormatError(f"{path}: size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(3, h, w).astype(np.float32)
