"""Image primitives: bilinear resize with an exact adjoint, PNG IO, and the
augmentation operations (flip, vertical shift, color jitter).

Images are float64 arrays of shape (3, H, W).  Dataset pixel values live in
[0, 1]; sampler states may leave that range.
"""

import functools

import numpy as np
from PIL import Image

__all__ = [
    "bilinear_matrix",
    "resize_bilinear",
    "resize_adjoint",
    "resize_to_224",
    "save_png",
    "load_png",
    "hflip",
    "vshift",
    "adjust_brightness",
    "adjust_contrast",
    "adjust_saturation",
    "adjust_hue",
]

# RGB <-> YIQ for hue rotation.  The inverse is computed, not hardcoded, so
# the round trip is exact to float rounding.
_RGB2YIQ = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)
_LUMA = np.array([0.299, 0.587, 0.114])


@functools.lru_cache(maxsize=64)
def bilinear_matrix(n_out, n_in):
    """1D bilinear interpolation matrix W of shape (n_out, n_in).

    Half-pixel-center convention: output sample i reads source coordinate
    (i + 0.5) * n_in / n_out - 0.5, with edge clamping.  Rows sum to 1, so
    constants are preserved; n_out == n_in gives the exact identity.
    """
    if n_out < 1 or n_in < 1:
        raise ValueError("sizes must be positive")
    W = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    np.add.at(W, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(W, (np.arange(n_out), hi), frac)
    W.setflags(write=False)
    return W


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize of a (C, H, W) image to (C, out_h, out_w).

    Separable linear map; ``resize_adjoint`` is its exact transpose.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[1] < 1 or image.shape[2] < 1:
        raise ValueError(f"expected (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    Wh = bilinear_matrix(out_h, h)
    Ww = bilinear_matrix(out_w, w)
    return np.einsum("oh,chw,pw->cop", Wh, image, Ww, optimize=True)


def resize_adjoint(grad_out, in_h, in_w):
    """Transpose of resize_bilinear: maps a (C, out_h, out_w) gradient back
    to input shape (C, in_h, in_w)."""
    grad_out = np.asarray(grad_out, dtype=float)
    if grad_out.ndim != 3:
        raise ValueError(f"expected (C, H, W) gradient, got shape {grad_out.shape}")
    _, oh, ow = grad_out.shape
    if (oh, ow) == (in_h, in_w):
        return grad_out.copy()
    Wh = bilinear_matrix(oh, in_h)
    Ww = bilinear_matrix(ow, in_w)
    return np.einsum("oh,cop,pw->chw", Wh, grad_out, Ww, optimize=True)


def resize_to_224(image):
    """Resize a (3, H, W) image to the surrogate's 3x224x224 input grid."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {image.shape}")
    return resize_bilinear(image, 224, 224)


def save_png(image, path):
    """Write a (3, H, W) image in [0, 1] as 8-bit RGB."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got shape {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def load_png(path):
    """Read an RGB PNG as a (3, H, W) float64 image in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return (arr / 255.0).transpose(2, 0, 1)


def hflip(image):
    """Mirror a (C, H, W) image left-right."""
    return np.asarray(image)[:, :, ::-1].copy()


def vshift(image, pixels):
    """Shift image content down by ``pixels`` rows (up when negative).

    Rows exposed at the boundary are filled by edge replication.
    """
    image = np.asarray(image)
    h = image.shape[1]
    rows = np.clip(np.arange(h) - int(pixels), 0, h - 1)
    return image[:, rows, :].copy()


def adjust_brightness(image, factor):
    """Scale all pixel values by ``factor``."""
    if factor == 1.0:
        return np.asarray(image, dtype=float).copy()
    return np.asarray(image, dtype=float) * factor


def adjust_contrast(image, factor):
    """Blend with the image's mean luma: out = m + factor * (image - m)."""
    image = np.asarray(image, dtype=float)
    if factor == 1.0:
        return image.copy()
    m = float(np.einsum("c,chw->", _LUMA, image) / (image.shape[1] * image.shape[2]))
    return m + factor * (image - m)


def adjust_saturation(image, factor):
    """Blend with the per-pixel luma: out = gray + factor * (image - gray)."""
    image = np.asarray(image, dtype=float)
    if factor == 1.0:
        return image.copy()
    gray = np.einsum("c,chw->hw", _LUMA, image)
    return gray[None] + factor * (image - gray[None])


def adjust_hue(image, radians):
    """Rotate the chroma plane of YIQ space by ``radians``."""
    image = np.asarray(image, dtype=float)
    if radians == 0.0:
        return image.copy()
    c, s = np.cos(radians), np.sin(radians)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    M = _YIQ2RGB @ rot @ _RGB2YIQ
    return np.einsum("dc,chw->dhw", M, image)
