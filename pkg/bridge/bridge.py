#!/usr/bin/env python3
"""Reference inference bridge for the patch-file contract.

Reads a patch manifest, runs a model over every patch image, and writes
one confidence raster (CMAP) per patch into the output directory, named
<patch_id>.cmap. This script is deliberately self-contained - it parses
the manifest and emits CMAP bytes on its own - so it doubles as a
template for wiring any external model (any language) into the toolkit.

Models:
    mock-threshold   dependency-free: soft threshold of each patch's
                     brightness around the patch mean (sigmoid)
    <hub-id>         any torch.hub identifier "repo:model"; requires
                     torch and downloaded weights

Every output is validated (finite, inside [0, 1], dimensions matching
the patch) and written to a temp file first, so the consumer never sees
a partial or non-conformant CMAP.

Usage:
    bridge.py --manifest patches.manifest --model mock-threshold --out outdir
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

CMAP_MAGIC = b"CMAP"
CMAP_VERSION = 1


class BridgeError(Exception):
    pass


class ModelLoadFailure(BridgeError):
    pass


class InferenceFailure(BridgeError):
    pass


class NonConformantOutput(BridgeError):
    pass


# --- manifest / cmap plumbing (kept standalone on purpose) ---------------------


def parse_manifest(path: Path) -> list[tuple[str, int, int, int, int, str]]:
    entries = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise BridgeError(f"{path}: manifest line needs 6 fields: {line!r}")
        patch_id, x, y, w, h, rel = fields
        entries.append((patch_id, int(x), int(y), int(w), int(h), rel))
    if not entries:
        raise BridgeError(f"{path}: manifest has no entries")
    return entries


def write_cmap_atomic(values: np.ndarray, path: Path) -> None:
    height, width = values.shape
    header = CMAP_MAGIC + bytes([CMAP_VERSION]) + struct.pack("<II", height, width) + b"\0" * 4
    payload = values.astype("<f4", copy=False).tobytes(order="C")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def validate_output(conf: np.ndarray, patch_shape: tuple[int, int], patch_id: str) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float32)
    if conf.shape != patch_shape:
        raise NonConformantOutput(
            f"{patch_id}: model produced {conf.shape}, patch is {patch_shape}"
        )
    if not np.isfinite(conf).all():
        raise NonConformantOutput(f"{patch_id}: model produced non-finite values")
    if (conf < 0.0).any() or (conf > 1.0).any():
        raise NonConformantOutput(f"{patch_id}: model values outside [0, 1]")
    return conf


def load_patch(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            raise BridgeError(f"{path}: unsupported mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


# --- models ---------------------------------------------------------------------


class MockThresholdModel:
    """Soft threshold of brightness around the patch mean.

    Patches brighter than their own mean lean toward 1, darker toward 0;
    softness is in 8-bit brightness units.
    """

    def __init__(self, softness: float = 25.0):
        self.softness = softness

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        gray = patch.astype(np.float64)
        if gray.ndim == 3:
            gray = gray.mean(axis=2)
        centered = (gray - gray.mean()) / self.softness
        return (1.0 / (1.0 + np.exp(-centered))).astype(np.float32)


class HubModel:
    """torch.hub-backed foreground-background model.

    Preprocessing is configurable rather than hard-coded: --resize and
    --normalize are passed straight through.
    """

    def __init__(self, hub_id: str, device: str, resize, normalize):
        if ":" not in hub_id:
            raise ModelLoadFailure(f"hub id must look like 'repo:model', got {hub_id!r}")
        try:
            import torch
        except ImportError as exc:
            raise ModelLoadFailure(f"torch unavailable for {hub_id!r}: {exc}") from exc
        repo, name = hub_id.split(":", 1)
        try:
            self.model = torch.hub.load(repo, name)
            self.model.eval()
        except Exception as exc:
            raise ModelLoadFailure(f"cannot load {hub_id!r}: {exc}") from exc
        self.torch = torch
        self.device = device
        self.resize = resize
        self.normalize = normalize
        self.model.to(device)

    def __call__(self, patch: np.ndarray) -> np.ndarray:
        torch = self.torch
        arr = patch.astype(np.float32) / 255.0
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=2)
        original_hw = arr.shape[:2]
        tensor = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
        if self.resize:
            tensor = torch.nn.functional.interpolate(
                tensor, size=tuple(self.resize), mode="bilinear", align_corners=False
            )
        if self.normalize:
            mean, std = self.normalize
            tensor = (tensor - mean) / std
        try:
            with torch.no_grad():
                out = self.model(tensor.to(self.device))
        except Exception as exc:
            raise InferenceFailure(f"forward pass failed: {exc}") from exc
        if isinstance(out, (tuple, list)):
            out = out[0]
        out = torch.sigmoid(out.float()).squeeze()
        if out.ndim != 2:
            raise NonConformantOutput(f"model output has shape {tuple(out.shape)}")
        out = torch.nn.functional.interpolate(
            out[None, None], size=original_hw, mode="bilinear", align_corners=False
        )[0, 0]
        return out.cpu().numpy()


def build_model(name: str, args) -> object:
    if name == "mock-threshold":
        return MockThresholdModel(softness=args.softness)
    normalize = None
    if args.normalize:
        mean, std = (float(v) for v in args.normalize.split(":"))
        normalize = (mean, std)
    resize = [int(v) for v in args.resize.split("x")] if args.resize else None
    return HubModel(name, args.device, resize, normalize)


def run_bridge(manifest_path: Path, model_name: str, out_dir: Path, args) -> int:
    entries = parse_manifest(manifest_path)
    model = build_model(model_name, args)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent
    written = 0
    for patch_id, _x, _y, w, h, rel in entries:
        patch = load_patch(base / rel)
        if patch.shape[:2] != (h, w):
            raise BridgeError(
                f"{patch_id}: patch file is {patch.shape[:2]}, manifest says ({h}, {w})"
            )
        try:
            conf = model(patch)
        except BridgeError:
            raise
        except Exception as exc:
            raise InferenceFailure(f"{patch_id}: {exc}") from exc
        conf = validate_output(conf, (h, w), patch_id)
        write_cmap_atomic(conf, out_dir / f"{patch_id}.cmap")
        written += 1
    print(f"bridge: wrote {written} CMAPs to {out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--manifest", required=True, type=Path)
    parser.add_argument("--model", required=True, help="mock-threshold or a torch hub id")
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--softness", type=float, default=25.0,
                        help="mock-threshold brightness softness")
    parser.add_argument("--resize", default=None, metavar="HxW",
                        help="resize patches before hub inference")
    parser.add_argument("--normalize", default=None, metavar="MEAN:STD",
                        help="normalize hub inputs")
    args = parser.parse_args(argv)
    try:
        return run_bridge(args.manifest, args.model, args.out, args)
    except BridgeError as exc:
        print(f"bridge: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
