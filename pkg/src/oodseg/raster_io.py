"""Bit-exact file formats: confidence rasters, label masks, patch manifests.

These formats are the contract between this toolkit and any external
inference program, so they are deliberately primitive:

CMAP (binary confidence raster)
    offset 0   4 bytes   ASCII "CMAP"
    offset 4   1 byte    format version, currently 0x01
    offset 5   4 bytes   height, unsigned 32-bit little-endian
    offset 9   4 bytes   width, unsigned 32-bit little-endian
    offset 13  4 bytes   reserved, must be zero
    offset 17  h*w*4     IEEE-754 binary32 little-endian, row-major,
                         top-left origin, every value finite and in [0, 1]

Label mask
    8-bit single-channel PNG; pixel values 0 (in-distribution),
    1 (OOD) and 255 (ignore). Any other value is an error.

Patch manifest (text, UTF-8)
    one entry per line: patch_id<TAB>x<TAB>y<TAB>w<TAB>h<TAB>relative_path
    '#' starts a comment. Two comment keys carry metadata and are written
    by this library: "# image_id: <id>" and
    "# original-size: <H> <W> <resize-mode>" (only after a policy resize).
    Entries must tile the image exactly: pairwise disjoint, no gaps.

Probability volume (directory)
    classes.txt with one class name per line (line number = channel
    index) plus one CMAP per channel named ch000.cmap, ch001.cmap, ...
    Per-pixel channel sums must be 1 within 1e-4.

Loading never silently clamps or repairs: out-of-range data is an error.
All writers go through a temp file + atomic rename, so readers never see
a partial file.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadMagic,
    CoverageGap,
    DimensionOverflow,
    IllegalLabelCode,
    IoFailure,
    MalformedLine,
    OverlappingPatches,
    TruncatedFile,
    UnsupportedPng,
    ValueOutOfRange,
)

CMAP_MAGIC = b"CMAP"
CMAP_VERSION = 1
CMAP_HEADER_LEN = 17

# Supported raster extent. Anything larger is refused rather than trusted.
MAX_SIDE = 1 << 20
MAX_PIXELS = 1 << 31

LABEL_IN_DIST = 0
LABEL_OOD = 1
LABEL_IGNORE = 255
_LEGAL_LABELS = (LABEL_IN_DIST, LABEL_OOD, LABEL_IGNORE)

CLASS_INDEX_FILENAME = "classes.txt"


def _check_dims(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise DimensionOverflow(f"dimensions must be positive, got {height}x{width}")
    if height > MAX_SIDE or width > MAX_SIDE or height * width > MAX_PIXELS:
        raise DimensionOverflow(f"raster {height}x{width} exceeds supported size")


def validate_raster(values: np.ndarray) -> np.ndarray:
    """Coerce to contiguous float32 (H, W) and enforce finite [0, 1] values."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionOverflow(f"raster must be 2-D, got shape {arr.shape}")
    _check_dims(arr.shape[0], arr.shape[1])
    if not np.isfinite(arr).all():
        raise ValueOutOfRange("raster contains non-finite values")
    if (arr < 0.0).any() or (arr > 1.0).any():
        lo, hi = float(arr.min()), float(arr.max())
        raise ValueOutOfRange(f"raster values outside [0, 1] (min={lo}, max={hi})")
    return arr


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- CMAP --------------------------------------------------------------------


def read_cmap(path: str | Path) -> np.ndarray:
    """Read a CMAP file into a float32 (H, W) array, validating every invariant."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(data) < CMAP_HEADER_LEN:
        raise TruncatedFile(f"{path}: {len(data)} bytes, header needs {CMAP_HEADER_LEN}")
    if data[:4] != CMAP_MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    if data[4] != CMAP_VERSION:
        raise BadMagic(f"{path}: unsupported version {data[4]}")
    if data[13:17] != b"\x00\x00\x00\x00":
        raise BadMagic(f"{path}: reserved header bytes are not zero")

    height = int.from_bytes(data[5:9], "little")
    width = int.from_bytes(data[9:13], "little")
    _check_dims(height, width)

    expected = CMAP_HEADER_LEN + 4 * height * width
    if len(data) != expected:
        raise TruncatedFile(f"{path}: {len(data)} bytes, header implies {expected}")

    values = np.frombuffer(data, dtype="<f4", offset=CMAP_HEADER_LEN)
    values = values.reshape(height, width).copy()
    if not np.isfinite(values).all():
        raise ValueOutOfRange(f"{path}: non-finite value in payload")
    if (values < 0.0).any() or (values > 1.0).any():
        raise ValueOutOfRange(f"{path}: value outside [0, 1]")
    return values


def write_cmap(raster: np.ndarray, path: str | Path) -> None:
    """Write a raster as CMAP. Roundtrips bit-exactly through :func:`read_cmap`."""
    arr = validate_raster(raster)
    height, width = arr.shape
    header = (
        CMAP_MAGIC
        + bytes([CMAP_VERSION])
        + height.to_bytes(4, "little")
        + width.to_bytes(4, "little")
        + b"\x00\x00\x00\x00"
    )
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    _atomic_write(Path(path), header + payload)


# --- label masks --------------------------------------------------------------


def validate_label_mask(labels: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(labels, dtype=np.uint8)
    if arr.ndim != 2:
        raise DimensionOverflow(f"label mask must be 2-D, got shape {arr.shape}")
    _check_dims(arr.shape[0], arr.shape[1])
    illegal = ~np.isin(arr, _LEGAL_LABELS)
    if illegal.any():
        bad = int(arr[illegal].flat[0])
        raise IllegalLabelCode(f"label code {bad} not in {{0, 1, 255}}")
    return arr


def read_label_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG of ternary label codes into uint8 (H, W)."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise UnsupportedPng(f"{path}: not a PNG (format={img.format})")
            if img.mode != "L":
                raise UnsupportedPng(f"{path}: mode {img.mode}, need 8-bit grayscale 'L'")
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedPng(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return validate_label_mask(arr)


def write_label_mask(labels: np.ndarray, path: str | Path) -> None:
    arr = validate_label_mask(labels)
    import io

    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    _atomic_write(Path(path), buf.getvalue())


def read_image(path: str | Path) -> np.ndarray:
    """Read a grayscale or RGB PNG as uint8 (H, W) or (H, W, 3)."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise UnsupportedPng(f"{path}: not a PNG (format={img.format})")
            if img.mode not in ("L", "RGB"):
                raise UnsupportedPng(f"{path}: mode {img.mode}, need 'L' or 'RGB'")
            return np.asarray(img, dtype=np.uint8).copy()
    except UnidentifiedImageError as exc:
        raise UnsupportedPng(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write uint8 (H, W) or (H, W, 3) pixels as PNG."""
    import io

    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    if arr.ndim == 2:
        img = Image.fromarray(arr, mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        img = Image.fromarray(arr, mode="RGB")
    else:
        raise DimensionOverflow(f"cannot encode shape {arr.shape} as PNG")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    _atomic_write(Path(path), buf.getvalue())


# --- patch manifests ----------------------------------------------------------


class ManifestEntry(NamedTuple):
    patch_id: str
    x: int
    y: int
    w: int
    h: int
    path: str

    @property
    def rect(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class PatchManifest:
    """Geometry of a patch set plus where each patch lives on disk.

    `original_size` / `resize_mode` are only set when the patches were cut
    at a policy-resized working size; they let downstream code map a
    reassembled raster back to the source resolution.
    """

    image_id: str
    entries: list[ManifestEntry] = field(default_factory=list)
    original_size: tuple[int, int] | None = None
    resize_mode: str | None = None

    @property
    def height(self) -> int:
        return max(e.y + e.h for e in self.entries)

    @property
    def width(self) -> int:
        return max(e.x + e.w for e in self.entries)

    def validate(self) -> None:
        """Check that the entries exactly partition the image rectangle."""
        if not self.entries:
            raise CoverageGap(f"manifest '{self.image_id}' has no entries")
        seen: set[str] = set()
        for e in self.entries:
            if e.w < 1 or e.h < 1 or e.x < 0 or e.y < 0:
                raise MalformedLine(f"patch '{e.patch_id}' has illegal rect {e.rect}")
            if e.patch_id in seen:
                raise MalformedLine(f"duplicate patch_id '{e.patch_id}'")
            seen.add(e.patch_id)

        height, width = self.height, self.width
        _check_dims(height, width)
        cover = np.zeros((height, width), dtype=np.uint16)
        for e in self.entries:
            cover[e.y : e.y + e.h, e.x : e.x + e.w] += 1
        if (cover > 1).any():
            y, x = np.argwhere(cover > 1)[0]
            raise OverlappingPatches(
                f"manifest '{self.image_id}': pixel ({int(y)}, {int(x)}) covered "
                f"{int(cover[y, x])} times"
            )
        if (cover == 0).any():
            y, x = np.argwhere(cover == 0)[0]
            raise CoverageGap(
                f"manifest '{self.image_id}': pixel ({int(y)}, {int(x)}) uncovered"
            )


def read_manifest(path: str | Path) -> PatchManifest:
    """Parse and validate a manifest file (see module docstring for the grammar)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    image_id = path.stem
    original_size: tuple[int, int] | None = None
    resize_mode: str | None = None
    entries: list[ManifestEntry] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("image_id:"):
                image_id = body[len("image_id:") :].strip()
            elif body.startswith("original-size:"):
                parts = body[len("original-size:") :].split()
                if len(parts) != 3:
                    raise MalformedLine(f"{path}:{lineno}: bad original-size comment")
                try:
                    original_size = (int(parts[0]), int(parts[1]))
                except ValueError as exc:
                    raise MalformedLine(f"{path}:{lineno}: bad original-size") from exc
                resize_mode = parts[2]
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise MalformedLine(f"{path}:{lineno}: expected 6 tab-separated fields")
        patch_id, xs, ys, ws, hs, rel = fields
        try:
            x, y, w, h = int(xs), int(ys), int(ws), int(hs)
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: non-integer geometry") from exc
        if x < 0 or y < 0 or w < 1 or h < 1:
            raise MalformedLine(f"{path}:{lineno}: illegal rect ({x},{y},{w},{h})")
        entries.append(ManifestEntry(patch_id, x, y, w, h, rel))

    manifest = PatchManifest(
        image_id=image_id,
        entries=entries,
        original_size=original_size,
        resize_mode=resize_mode,
    )
    manifest.validate()
    return manifest


def write_manifest(manifest: PatchManifest, path: str | Path) -> None:
    manifest.validate()
    if "\t" in manifest.image_id or "\n" in manifest.image_id:
        raise MalformedLine(f"image_id {manifest.image_id!r} contains tab/newline")
    lines = [f"# image_id: {manifest.image_id}"]
    if manifest.original_size is not None:
        oh, ow = manifest.original_size
        lines.append(f"# original-size: {oh} {ow} {manifest.resize_mode}")
    for e in manifest.entries:
        for text_field in (e.patch_id, e.path):
            if "\t" in text_field or "\n" in text_field:
                raise MalformedLine(f"field {text_field!r} contains tab/newline")
        lines.append(f"{e.patch_id}\t{e.x}\t{e.y}\t{e.w}\t{e.h}\t{e.path}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


# --- probability volumes --------------------------------------------------------

PROB_SUM_TOL = 1e-4


@dataclass
class ProbabilityVolume:
    """Per-pixel class distribution: float32 (H, W, C) plus channel names."""

    values: np.ndarray
    class_names: list[str]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]

    def validate(self) -> None:
        arr = self.values
        if arr.ndim != 3:
            raise DimensionOverflow(f"volume must be (H, W, C), got {arr.shape}")
        _check_dims(arr.shape[0], arr.shape[1])
        if arr.shape[2] != len(self.class_names):
            raise DimensionOverflow(
                f"{arr.shape[2]} channels but {len(self.class_names)} class names"
            )
        if not np.isfinite(arr).all():
            raise ValueOutOfRange("volume contains non-finite values")
        if (arr < 0.0).any() or (arr > 1.0).any():
            raise ValueOutOfRange("volume values outside [0, 1]")
        sums = arr.sum(axis=2, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > PROB_SUM_TOL:
            raise ValueOutOfRange(
                f"per-pixel probability sums deviate from 1 by up to {err:.2e}"
            )

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            from .errors import BadClassIndex

            raise BadClassIndex(f"class {name!r} not in {self.class_names}") from None


def read_class_index(path: str | Path) -> list[str]:
    """Read the class sidecar: one name per line, line number = channel index."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    names = [line.strip() for line in text.splitlines() if line.strip()]
    if not names:
        raise MalformedLine(f"{path}: empty class index")
    return names


def write_class_index(names: list[str], path: str | Path) -> None:
    if not names:
        raise MalformedLine("class index must name at least one class")
    _atomic_write(Path(path), ("\n".join(names) + "\n").encode("utf-8"))


def _channel_filename(index: int) -> str:
    return f"ch{index:03d}.cmap"


def read_probability_volume(directory: str | Path) -> ProbabilityVolume:
    directory = Path(directory)
    names = read_class_index(directory / CLASS_INDEX_FILENAME)
    channels = [read_cmap(directory / _channel_filename(i)) for i in range(len(names))]
    first = channels[0].shape
    for i, ch in enumerate(channels):
        if ch.shape != first:
            raise DimensionOverflow(
                f"channel {i} is {ch.shape}, channel 0 is {first}"
            )
    volume = ProbabilityVolume(np.stack(channels, axis=2), names)
    volume.validate()
    return volume


def write_probability_volume(volume: ProbabilityVolume, directory: str | Path) -> None:
    volume.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_class_index(volume.class_names, directory / CLASS_INDEX_FILENAME)
    for i in range(volume.num_classes):
        write_cmap(volume.values[:, :, i], directory / _channel_filename(i))
