"""Patch grids, mixed-size patch schemes, slicing and reassembly.

A grid or scheme is always an exact partition of the image rectangle:
every pixel belongs to exactly one patch, patches never overlap, and
reassembling sliced patches reproduces the input bit for bit.

Uniform grids are square (rows == cols == sqrt(n_patches)). When the
image is not divisible by the grid, a resize policy either rejects the
request or rounds each dimension up to the next multiple and resamples;
outputs are mapped back to the original size with the same resampling
mode.

The three mixed-size schemes refine monotonically toward the image
bottom (near objects are larger), coarse rows on top:

    A (needs H, W % 16 == 0): top half 2x4 of (H/4 x W/4), third quarter
      2x8 of (H/8 x W/8), bottom quarter 4x16 of (H/16 x W/16)
    B (needs H, W % 8 == 0):  top half 1x2 of (H/2 x W/2), bottom half
      4x8 of (H/8 x W/8)
    C (needs H % 8, W % 16 == 0): top quarter 1x4 of (H/4 x W/4), middle
      half 4x8 of (H/8 x W/8), bottom quarter 2x16 of (H/8 x W/16)
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, NotDivisible, NotPerfectSquare
from .raster_io import ManifestEntry, PatchManifest

Rect = tuple[int, int, int, int]  # (x, y, w, h)

SCHEME_KINDS = ("A", "B", "C")


class ResizePolicy(enum.Enum):
    """What to do when the image is not divisible by the grid."""

    REJECT = "reject"
    RESIZE_NEAREST = "nearest"
    RESIZE_BILINEAR = "bilinear"


@dataclass(frozen=True)
class PatchGrid:
    """A rows x cols partition into equal patches at the working size."""

    height: int
    width: int
    patch_height: int
    patch_width: int
    rows: int
    cols: int
    original_size: tuple[int, int] | None = None
    resize_mode: ResizePolicy | None = None

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def rects(self) -> list[Rect]:
        return [
            (c * self.patch_width, r * self.patch_height, self.patch_width, self.patch_height)
            for r in range(self.rows)
            for c in range(self.cols)
        ]


@dataclass(frozen=True)
class PatchScheme:
    """A mixed-size partition; rects are in row-major top-left order."""

    height: int
    width: int
    rects_: tuple[Rect, ...]

    def rects(self) -> list[Rect]:
        return list(self.rects_)


def make_uniform_grid(
    height: int,
    width: int,
    n_patches: int,
    policy: ResizePolicy = ResizePolicy.REJECT,
) -> PatchGrid:
    """Build a sqrt(N) x sqrt(N) grid; resize policy handles non-divisible sizes."""
    if n_patches < 1:
        raise NotPerfectSquare(f"n_patches must be >= 1, got {n_patches}")
    side = math.isqrt(n_patches)
    if side * side != n_patches:
        raise NotPerfectSquare(f"n_patches={n_patches} is not a perfect square")

    if height % side == 0 and width % side == 0:
        return PatchGrid(height, width, height // side, width // side, side, side)

    if policy is ResizePolicy.REJECT:
        raise NotDivisible(
            f"{height}x{width} not divisible into a {side}x{side} grid"
        )
    # Round each dimension up to the next multiple so no information is
    # thrown away by downscaling.
    work_h = ((height + side - 1) // side) * side
    work_w = ((width + side - 1) // side) * side
    return PatchGrid(
        work_h,
        work_w,
        work_h // side,
        work_w // side,
        side,
        side,
        original_size=(height, width),
        resize_mode=policy,
    )


def _band_rects(y0: int, band_h: int, width: int, ph: int, pw: int) -> list[Rect]:
    rows = band_h // ph
    cols = width // pw
    return [
        (c * pw, y0 + r * ph, pw, ph) for r in range(rows) for c in range(cols)
    ]


def make_scheme(kind: str, height: int, width: int) -> PatchScheme:
    """Build one of the fixed mixed-size layouts A, B or C."""
    if kind not in SCHEME_KINDS:
        raise NotDivisible(f"unknown scheme kind {kind!r}, expected one of {SCHEME_KINDS}")

    if kind == "A":
        if height % 16 or width % 16:
            raise NotDivisible(f"scheme A needs H, W divisible by 16, got {height}x{width}")
        rects = (
            _band_rects(0, height // 2, width, height // 4, width // 4)
            + _band_rects(height // 2, height // 4, width, height // 8, width // 8)
            + _band_rects(3 * height // 4, height // 4, width, height // 16, width // 16)
        )
    elif kind == "B":
        if height % 8 or width % 8:
            raise NotDivisible(f"scheme B needs H, W divisible by 8, got {height}x{width}")
        rects = (
            _band_rects(0, height // 2, width, height // 2, width // 2)
            + _band_rects(height // 2, height // 2, width, height // 8, width // 8)
        )
    else:
        if height % 8 or width % 16:
            raise NotDivisible(
                f"scheme C needs H divisible by 8 and W by 16, got {height}x{width}"
            )
        rects = (
            _band_rects(0, height // 4, width, height // 4, width // 4)
            + _band_rects(height // 4, height // 2, width, height // 8, width // 8)
            + _band_rects(3 * height // 4, height // 4, width, height // 8, width // 16)
        )

    rects.sort(key=lambda r: (r[1], r[0]))
    return PatchScheme(height, width, tuple(rects))


# --- resampling ---------------------------------------------------------------

_PIL_FILTERS = {
    ResizePolicy.RESIZE_NEAREST: Image.NEAREST,
    ResizePolicy.RESIZE_BILINEAR: Image.BILINEAR,
}


def resize_array(data: np.ndarray, out_hw: tuple[int, int], mode: ResizePolicy) -> np.ndarray:
    """Resample a 2-D float raster or uint8 image to (H, W) with the given mode."""
    if mode not in _PIL_FILTERS:
        raise DimensionMismatch(f"policy {mode} cannot resample")
    out_h, out_w = out_hw
    if data.shape[:2] == (out_h, out_w):
        return data.copy()
    resample = _PIL_FILTERS[mode]
    if data.ndim == 2 and data.dtype == np.float32:
        img = Image.fromarray(data, mode="F")
        out = np.asarray(img.resize((out_w, out_h), resample), dtype=np.float32)
        # Bilinear edge arithmetic can drift a hair outside the input range.
        return np.clip(out, 0.0, 1.0)
    if data.ndim == 2 and data.dtype == np.uint8:
        img = Image.fromarray(data, mode="L")
        return np.asarray(img.resize((out_w, out_h), resample), dtype=np.uint8)
    if data.ndim == 3 and data.shape[2] == 3 and data.dtype == np.uint8:
        img = Image.fromarray(data, mode="RGB")
        return np.asarray(img.resize((out_w, out_h), resample), dtype=np.uint8)
    raise DimensionMismatch(f"cannot resample dtype {data.dtype} shape {data.shape}")


def restore_original(raster: np.ndarray, manifest_or_grid: PatchManifest | PatchGrid) -> np.ndarray:
    """Map a working-size raster back to the size it was resized from."""
    src = manifest_or_grid
    if src.original_size is None:
        return raster
    mode = src.resize_mode
    if isinstance(mode, str):
        mode = ResizePolicy(mode)
    return resize_array(raster, src.original_size, mode)


# --- slicing / reassembly -------------------------------------------------------


def _tiles_rects(tiles: PatchGrid | PatchScheme) -> list[Rect]:
    rects = tiles.rects()
    return sorted(rects, key=lambda r: (r[1], r[0]))


def slice_image(
    data: np.ndarray,
    tiles: PatchGrid | PatchScheme,
    image_id: str = "image",
    path_suffix: str = ".png",
) -> tuple[list[np.ndarray], PatchManifest]:
    """Cut an image or raster into patches, returning them with their manifest.

    Accepts input either at the working size or, for a resized grid, at the
    original size (in which case the policy resize is applied first).
    Patches come back in row-major rectangle order.
    """
    work_hw = (tiles.height, tiles.width)
    original_size = getattr(tiles, "original_size", None)
    resize_mode = getattr(tiles, "resize_mode", None)

    if data.shape[:2] == work_hw:
        working = data
    elif original_size is not None and data.shape[:2] == original_size:
        working = resize_array(data, work_hw, resize_mode)
    else:
        raise DimensionMismatch(
            f"input {data.shape[:2]} matches neither working size {work_hw} "
            f"nor original size {original_size}"
        )

    rects = _tiles_rects(tiles)
    patches = []
    entries = []
    for i, (x, y, w, h) in enumerate(rects):
        patches.append(np.ascontiguousarray(working[y : y + h, x : x + w]))
        patch_id = f"{image_id}_p{i:04d}"
        entries.append(ManifestEntry(patch_id, x, y, w, h, patch_id + path_suffix))
    manifest = PatchManifest(
        image_id=image_id,
        entries=entries,
        original_size=original_size,
        resize_mode=resize_mode.value if isinstance(resize_mode, ResizePolicy) else resize_mode,
    )
    return patches, manifest


def reassemble(patches: list[np.ndarray], manifest: PatchManifest) -> np.ndarray:
    """Scatter patches back into one float32 raster at the manifest's extent.

    The result at pixel (r, c) is the value of the unique patch covering
    (r, c); (patch, entry) pair order does not matter.
    """
    manifest.validate()
    if len(patches) != len(manifest.entries):
        raise DimensionMismatch(
            f"{len(patches)} patches for {len(manifest.entries)} manifest entries"
        )
    out = np.empty((manifest.height, manifest.width), dtype=np.float32)
    for patch, e in zip(patches, manifest.entries):
        if patch.ndim != 2 or patch.shape != (e.h, e.w):
            raise DimensionMismatch(
                f"patch for '{e.patch_id}' is {patch.shape}, manifest says ({e.h}, {e.w})"
            )
        out[e.y : e.y + e.h, e.x : e.x + e.w] = patch
    return out
