"""Raster types and image operations for the retrieval pipeline.

Images are plain numpy arrays in [0, 1]:
  - grayscale: float array of shape (H, W)
  - RGB: float array of shape (H, W, 3), interleaved
  - edge map: float array of shape (H, W) with values in {0, 1}
  - quad corners: float array of shape (4, 2) holding (x, y) points
    ordered top-left, top-right, bottom-right, bottom-left; must form a
    convex quadrilateral with positive area

Covers preprocessing for the encoder (resize, signed normalization),
Canny edge extraction for the baseline, and projective rectification +
binarization for dataset postprocessing. All functions are pure.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .numerics import Tensor


def validate_gray(img: np.ndarray, name: str = "image"):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D grayscale, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def validate_rgb(img: np.ndarray, name: str = "image"):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance reduction: 0.299 R + 0.587 G + 0.114 B, clamped to [0, 1]."""
    img = validate_rgb(img)
    gray = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return np.clip(gray, 0.0, 1.0).astype(np.float32)


def resize(img: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinear resize to exactly (h, w), sampling at half-pixel centers."""
    img = validate_gray(img)
    if w < 1 or h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {w}x{h}")
    ih, iw = img.shape
    if (ih, iw) == (h, w):
        return img.astype(np.float32, copy=True)
    out = img.astype(np.float64)
    out = _interp_axis(out, h, axis=0)
    out = _interp_axis(out, w, axis=1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _interp_axis(img: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = img.shape[axis]
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a * (1 - frac) + b * frac


def normalize_signed(img: np.ndarray) -> Tensor:
    """Map [0, 1] pixels to [-1, 1] and shape for the encoder.

    Grayscale (H, W) becomes a (1, H, W) tensor; RGB (H, W, 3) becomes
    (3, H, W) for the 3-channel profile.
    """
    img = np.asarray(img)
    if img.ndim == 2:
        validate_gray(img)
        data = (img.astype(np.float32) * 2.0 - 1.0)[None, :, :]
    elif img.ndim == 3 and img.shape[2] == 3:
        validate_rgb(img)
        data = np.moveaxis(img.astype(np.float32) * 2.0 - 1.0, 2, 0)
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    return Tensor(np.ascontiguousarray(data))


def binarize(img: np.ndarray, thresh: float = 0.5) -> np.ndarray:
    """Threshold to {0, 1}: v < thresh -> 0 (ink), else 1 (paper)."""
    img = validate_gray(img)
    if not 0.0 <= thresh <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {thresh}")
    return (img >= thresh).astype(np.float32)


# ---------------------------------------------------------------------------
# Canny edge extraction
# ---------------------------------------------------------------------------

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def _conv3x3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="reflect" if min(img.shape) > 1 else "edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return np.einsum("ijkl,kl->ij", win, kernel)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * sigma**2))
    kernel /= kernel.sum()
    out = img.astype(np.float64)
    for axis in (0, 1):
        mode = "reflect" if radius < out.shape[axis] else "edge"
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode=mode)
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=axis)
        out = win @ kernel
    return out


def canny(img: np.ndarray, sigma: float = 1.4, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Canny edge detection; returns a binary {0, 1} map.

    ``low`` and ``high`` are fractions of the maximum gradient magnitude
    of the smoothed image. Stages: Gaussian smoothing, Sobel gradients,
    non-maximum suppression along the quantized gradient direction
    (plateau ties keep the first pixel along the scan direction, so a
    symmetric step yields a one-pixel edge), then double-threshold
    hysteresis with 8-connected linking.
    """
    img = validate_gray(img)
    if not (0.0 < low < high <= 1.0):
        raise ValueError(f"need 0 < low < high <= 1, got low={low} high={high}")
    smoothed = gaussian_blur(img, sigma)
    gx = _conv3x3(smoothed, SOBEL_X)
    gy = _conv3x3(smoothed, SOBEL_Y)
    mag = np.hypot(gx, gy)
    mmax = mag.max()
    if mmax <= 0:
        return np.zeros_like(img, dtype=np.float32)

    keep = _nonmax_suppress(mag, gx, gy)
    nms = np.where(keep, mag, 0.0)
    strong = nms >= high * mmax
    weak = nms >= low * mmax
    return _hysteresis(strong, weak).astype(np.float32)


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that dominate both neighbors along the gradient line.

    Strictly greater than the preceding neighbor and at least equal to
    the following one, so two-pixel plateaus thin to a single pixel.
    """
    h, w = mag.shape
    angle = np.degrees(np.arctan2(gy, gx)) % 180.0
    bucket = np.zeros((h, w), dtype=np.int8)
    bucket[(angle >= 22.5) & (angle < 67.5)] = 1
    bucket[(angle >= 67.5) & (angle < 112.5)] = 2
    bucket[(angle >= 112.5) & (angle < 157.5)] = 3

    padded = np.pad(mag, 1, mode="constant")

    def shifted(dr, dc):
        return padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]

    # (prev, next) offsets per direction bucket, in (row, col) terms
    offsets = {0: ((0, -1), (0, 1)), 1: ((-1, -1), (1, 1)), 2: ((-1, 0), (1, 0)), 3: ((-1, 1), (1, -1))}
    keep = np.zeros((h, w), dtype=bool)
    for b, (prev_off, next_off) in offsets.items():
        sel = bucket == b
        prev_m = shifted(*prev_off)
        next_m = shifted(*next_off)
        keep |= sel & (mag > prev_m) & (mag >= next_m)
    return keep & (mag > 0)


def _hysteresis(strong: np.ndarray, weak: np.ndarray) -> np.ndarray:
    """Grow the strong set through the weak set with 8-connectivity."""
    edges = strong.copy()
    while True:
        padded = np.pad(edges, 1, mode="constant")
        h, w = edges.shape
        neighbor = np.zeros_like(edges)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                neighbor |= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        grown = edges | (neighbor & weak)
        if np.array_equal(grown, edges):
            return edges
        edges = grown


# ---------------------------------------------------------------------------
# Projective rectification
# ---------------------------------------------------------------------------


def validate_quad(corners: np.ndarray) -> np.ndarray:
    """Corners (4, 2) ordered TL, TR, BR, BL must be strictly convex."""
    corners = np.asarray(corners, dtype=np.float64)
    if corners.shape != (4, 2):
        raise ValueError(f"corners must have shape (4, 2), got {corners.shape}")
    if not np.all(np.isfinite(corners)):
        raise ValueError("corners contain non-finite values")
    # Shoelace area in image coordinates (y down); TL,TR,BR,BL is positive.
    x, y = corners[:, 0], corners[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    if area <= 1e-9:
        raise ValueError("corners are degenerate or mis-ordered (non-positive area)")
    for i in range(4):
        a, b, c = corners[i], corners[(i + 1) % 4], corners[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross <= 1e-9:
            raise ValueError("corners are collinear or concave")
    return corners


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Solve the 8-parameter projective map taking src points to dst points.

    Least-squares solution of the 8x8 linear system built from the four
    correspondences; returns a 3x3 matrix with H[2,2] = 1.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValueError("homography needs exactly four (x, y) correspondences")
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    params, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
    if rank < 8:
        raise ValueError("degenerate corner configuration (rank-deficient system)")
    return np.append(params, 1.0).reshape(3, 3)


def affine_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 6-parameter affine map over the four correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 6))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0]
        a[2 * i + 1] = [0, 0, 0, x, y, 1]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    params, _, rank, _ = np.linalg.lstsq(a, rhs, rcond=None)
    if rank < 6:
        raise ValueError("degenerate corner configuration (rank-deficient system)")
    h = np.eye(3)
    h[0] = params[:3]
    h[1] = params[3:]
    return h


def warp_projective(
    img: np.ndarray, h_out_to_src: np.ndarray, out_w: int, out_h: int, fill: float = 1.0
) -> np.ndarray:
    """Inverse-warp with bilinear sampling.

    ``h_out_to_src`` maps output pixel coordinates to source coordinates;
    samples falling outside the source raster take ``fill``.
    """
    img = validate_gray(img)
    ih, iw = img.shape
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    ones = np.ones_like(xs)
    pts = np.stack([xs, ys, ones])
    mapped = np.tensordot(h_out_to_src, pts, axes=1)
    denom = mapped[2]
    denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
    sx = mapped[0] / denom
    sy = mapped[1] / denom

    eps = 1e-6  # solver noise must not push boundary samples outside
    inside = (sx >= -eps) & (sx <= iw - 1 + eps) & (sy >= -eps) & (sy <= ih - 1 + eps)
    cx = np.clip(sx, 0, iw - 1)
    cy = np.clip(sy, 0, ih - 1)
    x0 = np.floor(cx).astype(int)
    y0 = np.floor(cy).astype(int)
    x1 = np.minimum(x0 + 1, iw - 1)
    y1 = np.minimum(y0 + 1, ih - 1)
    fx = cx - x0
    fy = cy - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    sampled = top * (1 - fy) + bot * fy
    out = np.where(inside, sampled, fill)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rect_corners(w: int, h: int) -> np.ndarray:
    """Pixel-center corners of a w x h raster in TL, TR, BR, BL order."""
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def rectify(
    img: np.ndarray,
    src_corners: np.ndarray,
    dst_w: int,
    dst_h: int,
    mode: str = "projective",
    fill: float = 1.0,
) -> np.ndarray:
    """Warp the quad marked by src_corners onto an upright dst_w x dst_h raster.

    Solves the homography (or least-squares affine map with
    mode="affine") sending the source corners to the destination
    rectangle corners, then inverse-warps with bilinear sampling.
    Out-of-source samples become ``fill`` (white paper by default).
    """
    src_corners = validate_quad(src_corners)
    if dst_w < 1 or dst_h < 1:
        raise ValueError("destination dimensions must be >= 1")
    if mode not in ("projective", "affine"):
        raise ValueError(f"unknown rectification mode: {mode!r}")
    dst = rect_corners(dst_w, dst_h)
    solver = homography_from_corners if mode == "projective" else affine_from_corners
    h_out_to_src = solver(dst, src_corners)
    return warp_projective(img, h_out_to_src, dst_w, dst_h, fill=fill)


# ---------------------------------------------------------------------------
# PNG / JPEG I/O
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load a PNG or JPEG as float [0, 1]; grayscale (H, W) or RGB (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        elif im.mode == "1":
            arr = np.asarray(im, dtype=np.float32)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def write_png(path, img: np.ndarray):
    """Write an image as 8-bit PNG; binary maps come out as {0, 255}."""
    img = np.asarray(img)
    if img.ndim == 2:
        validate_gray(img)
        data = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path, format="PNG")
    elif img.ndim == 3 and img.shape[2] == 3:
        validate_rgb(img)
        data = np.round(img * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
