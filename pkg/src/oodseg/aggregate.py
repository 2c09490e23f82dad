"""Combine per-scale confidence maps into one multi-scale map.

A schedule is an ordered list of (source, weight) pairs where a source is
either a uniform grid (by patch count N) or one of the mixed-size schemes
A/B/C. Weights are convex: each in [0, 1], summing to 1 within 1e-9
(normalized exactly on load, rejected beyond tolerance). Schedules are
canonicalized to ascending N with schemes after grids, which fixes the
per-pixel summation order and makes results independent of the order the
user wrote the entries in.

Combination accumulates in float64 per pixel, in schedule order, and
rounds once to float32 at the end. Zero-weight entries are skipped
entirely so they cannot perturb the result.

Schedule file format (text, '#' comments allowed), one entry per line:

    grid:<N>:<alpha>
    scheme:<A|B|C>:<alpha>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import BadWeights, DimensionMismatch, IoFailure, MalformedLine, ZeroScales
from .raster_io import validate_raster
from .tiling import (
    PatchGrid,
    PatchScheme,
    Rect,
    ResizePolicy,
    SCHEME_KINDS,
    make_scheme,
    make_uniform_grid,
    reassemble,
    restore_original,
    slice_image,
)

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True, order=True)
class ScaleSource:
    """One confidence-map source: a uniform grid (kind 'grid', value N)
    or a mixed-size scheme (kind 'scheme', value 'A'|'B'|'C')."""

    kind: str
    value: int | str

    def __post_init__(self) -> None:
        if self.kind == "grid":
            if not isinstance(self.value, int) or self.value < 1:
                raise MalformedLine(f"grid source needs a positive N, got {self.value!r}")
        elif self.kind == "scheme":
            if self.value not in SCHEME_KINDS:
                raise MalformedLine(f"scheme source must be one of {SCHEME_KINDS}")
        else:
            raise MalformedLine(f"unknown source kind {self.kind!r}")

    @property
    def tag(self) -> str:
        return f"{self.kind}{self.value}"

    def sort_key(self) -> tuple[int, int | str]:
        # Grids ascending by N first, then schemes by letter.
        if self.kind == "grid":
            return (0, self.value)
        return (1, self.value)

    def tiles(self, height: int, width: int, policy: ResizePolicy) -> PatchGrid | PatchScheme:
        if self.kind == "grid":
            return make_uniform_grid(height, width, self.value, policy)
        return make_scheme(self.value, height, width)


def _validated_weights(weights: Sequence[float]) -> list[float]:
    if len(weights) == 0:
        raise ZeroScales("weight vector is empty")
    ws = [float(w) for w in weights]
    for w in ws:
        if not np.isfinite(w) or w < 0.0 or w > 1.0:
            raise BadWeights(f"weight {w} outside [0, 1]")
    total = float(np.sum(np.asarray(ws, dtype=np.float64)))
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise BadWeights(f"weights sum to {total!r}, not 1 within {WEIGHT_SUM_TOL}")
    return [w / total for w in ws]


@dataclass
class ScaleSchedule:
    """Canonically ordered (source, weight) pairs with a convex weight vector."""

    entries: list[tuple[ScaleSource, float]]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ZeroScales("schedule has no entries")
        seen = set()
        for src, _ in self.entries:
            if src in seen:
                raise MalformedLine(f"duplicate schedule source {src.tag}")
            seen.add(src)
        self.entries = sorted(self.entries, key=lambda e: e[0].sort_key())
        weights = _validated_weights([w for _, w in self.entries])
        self.entries = [(src, w) for (src, _), w in zip(self.entries, weights)]

    @property
    def sources(self) -> list[ScaleSource]:
        return [src for src, _ in self.entries]

    @property
    def weights(self) -> list[float]:
        return [w for _, w in self.entries]

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, int | str, float]]) -> "ScaleSchedule":
        return cls([(ScaleSource(kind, value), w) for kind, value, w in pairs])


def uniform_weights(d: int) -> list[float]:
    """d equal weights 1/d."""
    if d < 1:
        raise ZeroScales(f"need at least one scale, got d={d}")
    return [1.0 / d] * d


def uniform_grid_schedule(patch_counts: Sequence[int]) -> ScaleSchedule:
    """Uniformly weighted schedule over the given grid patch counts."""
    ws = uniform_weights(len(patch_counts))
    return ScaleSchedule.from_pairs([("grid", int(n), w) for n, w in zip(patch_counts, ws)])


# Bundled example weightings over the standard five grid scales. Each row
# is convex; zero entries drop the scale entirely.
PRESET_WEIGHTINGS: dict[str, dict[int, float]] = {
    "preset1": {1: 0.0, 16: 0.25, 64: 0.35, 256: 0.2, 1024: 0.2},
    "preset2": {1: 0.0, 16: 0.3, 64: 0.4, 256: 0.2, 1024: 0.1},
    "preset3": {1: 0.2, 16: 0.25, 64: 0.4, 256: 0.1, 1024: 0.05},
    "preset4": {1: 0.05, 16: 0.1, 64: 0.4, 256: 0.25, 1024: 0.2},
    "preset5": {1: 0.0, 16: 0.4, 64: 0.4, 256: 0.2, 1024: 0.0},
}


def preset_schedule(name: str) -> ScaleSchedule:
    if name not in PRESET_WEIGHTINGS:
        raise MalformedLine(f"unknown preset {name!r}, have {sorted(PRESET_WEIGHTINGS)}")
    pairs = [("grid", n, w) for n, w in PRESET_WEIGHTINGS[name].items()]
    return ScaleSchedule.from_pairs(pairs)


def combine_scales(maps: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Pointwise convex combination of equally sized confidence maps.

    Output stays within [pointwise min, pointwise max] of the inputs.
    """
    if len(maps) == 0:
        raise ZeroScales("no maps to combine")
    if len(maps) != len(weights):
        raise BadWeights(f"{len(maps)} maps but {len(weights)} weights")
    ws = _validated_weights(weights)

    arrays = [validate_raster(m) for m in maps]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise DimensionMismatch(f"map {i} is {a.shape}, map 0 is {shape}")

    acc = np.zeros(shape, dtype=np.float64)
    for a, w in zip(arrays, ws):
        if w == 0.0:
            continue
        acc += a.astype(np.float64) * w
    return acc.astype(np.float32)


class ModelAdapter(Protocol):
    """Anything that turns an image patch into a same-size confidence patch.

    Adapters may additionally define ``begin_scale(tiles)``; the runner
    calls it once before each scale's per-patch loop, which lets
    scale-aware mocks precompute state. Real models ignore it.
    """

    def infer(self, patch: np.ndarray, rect: Rect) -> np.ndarray: ...


class IdentityAdapter:
    """Pass-through for inputs that already are confidence rasters."""

    def infer(self, patch: np.ndarray, rect: Rect) -> np.ndarray:
        return patch


def run_schedule(
    image: np.ndarray,
    schedule: ScaleSchedule,
    model: ModelAdapter,
    policy: ResizePolicy = ResizePolicy.REJECT,
) -> np.ndarray:
    """Slice, infer and reassemble per schedule entry, then combine.

    Equivalent to running the tile -> infer -> reassemble pipeline once per
    source and handing the per-scale maps to :func:`combine_scales`.
    """
    height, width = image.shape[:2]
    begin_scale = getattr(model, "begin_scale", None)
    maps = []
    for src in schedule.sources:
        tiles = src.tiles(height, width, policy)
        if begin_scale is not None:
            begin_scale(tiles)
        patches, manifest = slice_image(image, tiles, image_id=src.tag)
        confs = [
            model.infer(patch, entry.rect)
            for patch, entry in zip(patches, manifest.entries)
        ]
        scale_map = reassemble([validate_raster(c) for c in confs], manifest)
        maps.append(restore_original(scale_map, manifest))
    return combine_scales(maps, schedule.weights)


# --- schedule files -------------------------------------------------------------


def load_schedule(path: str | Path) -> ScaleSchedule:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    pairs: list[tuple[str, int | str, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(":")
        if len(parts) != 3:
            raise MalformedLine(f"{path}:{lineno}: expected kind:value:alpha")
        kind, value, alpha = parts
        try:
            weight = float(alpha)
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: bad weight {alpha!r}") from exc
        if kind == "grid":
            try:
                pairs.append(("grid", int(value), weight))
            except ValueError as exc:
                raise MalformedLine(f"{path}:{lineno}: bad grid size {value!r}") from exc
        elif kind == "scheme":
            pairs.append(("scheme", value, weight))
        else:
            raise MalformedLine(f"{path}:{lineno}: unknown source kind {kind!r}")
    if not pairs:
        raise ZeroScales(f"{path}: schedule file defines no entries")
    return ScaleSchedule.from_pairs(pairs)


def save_schedule(schedule: ScaleSchedule, path: str | Path) -> None:
    lines = [f"{src.kind}:{src.value}:{w!r}" for src, w in schedule.entries]
    from .raster_io import _atomic_write

    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))
