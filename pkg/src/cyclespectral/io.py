"""File formats: flow files, images, masks, sparse points and pair manifests.

Flow files use the Middlebury layout: float32 magic 202021.25, int32 width,
int32 height, then interleaved float32 ``(u, v)`` in row-major order.

A manifest is a CSV file whose header names the columns below; optional
columns may be left empty.  Relative paths resolve against the manifest's
directory.
"""

import csv
from dataclasses import dataclass, fields
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import ContractViolation, IngestionError
from .warp import ImageTensor

FLO_MAGIC = 202021.25
MANIFEST_FIELDS = ("pair_id", "path_a", "spectrum_a", "path_b", "spectrum_b",
                   "gt_flow_path", "mask_a", "mask_b", "points_path")
REQUIRED_FIELDS = MANIFEST_FIELDS[:5]
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


def write_flo(path, flow):
    """Write a ``(2, H, W)`` array or tensor as a ``.flo`` file."""
    if isinstance(flow, torch.Tensor):
        flow = flow.detach().cpu().numpy()
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim == 4:
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ContractViolation(f"flow must be (2,H,W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tofile(f)


def read_flo(path):
    """Read a ``.flo`` file into a float32 ``(2, H, W)`` array."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise IngestionError("bad magic number, not a .flo file", entry=str(path))
        dims = np.fromfile(f, "<i4", count=2)
        if dims.size != 2 or dims.min() < 0:
            raise IngestionError("truncated header", entry=str(path))
        w, h = int(dims[0]), int(dims[1])
        data = np.fromfile(f, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise IngestionError(f"expected {2 * w * h} floats, found {data.size}", entry=str(path))
    return data.reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


def read_image(path):
    """Load an 8/16-bit PNG or TIFF as float32 ``(C, H, W)`` in [0, 1], RGB order."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IngestionError("cannot read image", entry=str(path))
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise IngestionError(f"unsupported pixel type {img.dtype}", entry=str(path))
    if img.ndim == 2:
        img = img[..., None]
    elif img.shape[2] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    elif img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return (img.astype(np.float32) / scale).transpose(2, 0, 1).copy()


def write_image(path, data, bits=8):
    """Write a ``(C, H, W)`` array in [0, 1] as an 8- or 16-bit image."""
    if isinstance(data, torch.Tensor):
        data = data.detach().cpu().numpy()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 4:
        data = data[0]
    peak, dtype = (255.0, np.uint8) if bits == 8 else (65535.0, np.uint16)
    img = np.round(np.clip(data, 0.0, 1.0) * peak).astype(dtype).transpose(1, 2, 0)
    if img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    elif img.shape[2] == 1:
        img = img[..., 0]
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write image {path}")


def read_mask(path):
    """Single-channel mask file; nonzero pixels are foreground.  Returns float32 (H, W)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IngestionError("cannot read mask", entry=str(path))
    if img.ndim == 3:
        img = img.max(axis=2)
    return (img != 0).astype(np.float32)


def write_mask(path, mask):
    mask = (np.asarray(mask) != 0).astype(np.uint8) * 255
    if not cv2.imwrite(str(path), mask):
        raise OSError(f"could not write mask {path}")


def read_points(path):
    """Sparse correspondences, one ``x_a y_a x_b y_b category`` row per line."""
    points = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise IngestionError(f"expected 5 fields, got {len(parts)}", entry=f"{path}:{lineno}")
            try:
                xa, ya, xb, yb = (float(v) for v in parts[:4])
            except ValueError as exc:
                raise IngestionError(str(exc), entry=f"{path}:{lineno}") from None
            points.append((xa, ya, xb, yb, parts[4]))
    return points


def write_points(path, points):
    with open(path, "w") as f:
        for xa, ya, xb, yb, cat in points:
            f.write(f"{xa:g} {ya:g} {xb:g} {yb:g} {cat}\n")


@dataclass
class ManifestEntry:
    pair_id: str
    path_a: str
    spectrum_a: str
    path_b: str
    spectrum_b: str
    gt_flow_path: str = ""
    mask_a: str = ""
    mask_b: str = ""
    points_path: str = ""
    lineno: int = 0

    def row(self):
        return {name: getattr(self, name) for name in MANIFEST_FIELDS}


def write_manifest(path, entries):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for entry in entries:
            writer.writerow(entry.row() if isinstance(entry, ManifestEntry) else entry)


def read_manifest(path):
    """Parse and validate a manifest; returns entries in file order."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError("manifest not found", entry=str(path))
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if not header:
            return []
        missing = [name for name in REQUIRED_FIELDS if name not in header]
        if missing:
            raise IngestionError(f"header lacks columns {missing}", entry=f"{path}:1")
        entries = []
        for row in reader:
            lineno = reader.line_num
            values = {name: (row.get(name) or "").strip() for name in MANIFEST_FIELDS}
            empty = [name for name in REQUIRED_FIELDS if not values[name]]
            if empty:
                raise IngestionError(f"missing values for {empty}", entry=f"{path}:{lineno}")
            entries.append(ManifestEntry(**values, lineno=lineno))
    return entries


def _resolve(root, rel):
    p = Path(rel)
    return p if p.is_absolute() else root / p


def load_entry(entry, root):
    """Load one manifest entry into a :class:`PairSample`."""
    from .synthdata import PairSample

    where = f"line {entry.lineno} ({entry.pair_id})"
    paths = {"path_a": entry.path_a, "path_b": entry.path_b}
    for name in ("gt_flow_path", "mask_a", "mask_b", "points_path"):
        if getattr(entry, name):
            paths[name] = getattr(entry, name)
    resolved = {k: _resolve(root, v) for k, v in paths.items()}
    for key, p in resolved.items():
        if not p.is_file():
            raise IngestionError(f"{key} file not found: {p}", entry=where)
    try:
        data_a = read_image(resolved["path_a"])
        data_b = read_image(resolved["path_b"])
    except IngestionError as exc:
        raise IngestionError(str(exc), entry=where) from None
    if data_a.shape[1:] != data_b.shape[1:]:
        raise IngestionError(f"image dims differ: {data_a.shape[1:]} vs {data_b.shape[1:]}", entry=where)
    hw = data_a.shape[1:]
    gt = mask_a = mask_b = points = None
    if "gt_flow_path" in resolved:
        flow = read_flo(resolved["gt_flow_path"])
        if flow.shape[1:] != hw:
            raise IngestionError(f"flow dims {flow.shape[1:]} differ from image dims {hw}", entry=where)
        gt = torch.from_numpy(flow).unsqueeze(0)
    if "mask_a" in resolved:
        mask_a = read_mask(resolved["mask_a"])
    if "mask_b" in resolved:
        mask_b = read_mask(resolved["mask_b"])
    for m in (mask_a, mask_b):
        if m is not None and m.shape != hw:
            raise IngestionError(f"mask dims {m.shape} differ from image dims {hw}", entry=where)
    if "points_path" in resolved:
        points = read_points(resolved["points_path"])
    try:
        img_a = ImageTensor(torch.from_numpy(data_a), entry.spectrum_a)
        img_b = ImageTensor(torch.from_numpy(data_b), entry.spectrum_b)
        meta = {"pair_id": entry.pair_id, "line": entry.lineno,
                "path_a": str(resolved["path_a"]), "path_b": str(resolved["path_b"])}
        return PairSample(img_a, img_b, gt, meta, mask_a=mask_a, mask_b=mask_b, points=points)
    except ContractViolation as exc:
        raise IngestionError(str(exc), entry=where) from None


def load_manifest(path, shuffle=False, seed=0):
    """Stream the manifest's pairs, in file order or shuffled with ``seed``."""
    path = Path(path)
    entries = read_manifest(path)
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    root = path.parent
    for entry in entries:
        yield load_entry(entry, root)


def manifest_from_dirs(dir_a, dir_b, spectrum_a, spectrum_b, out_path=None):
    """Pair files with the same stem in two directories (pre-aligned or stereo rigs).

    Writes the manifest to ``out_path`` when given and returns the entries.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    files_b = {p.stem: p for p in sorted(dir_b.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    entries = []
    for p in sorted(dir_a.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.stem not in files_b:
            raise IngestionError(f"no counterpart for {p.name} in {dir_b}", entry=str(p))
        entries.append(ManifestEntry(p.stem, str(p.resolve()), spectrum_a, str(files_b[p.stem].resolve()), spectrum_b))
    if out_path is not None:
        write_manifest(out_path, entries)
    return entries


def manifest_field_names():
    return [f.name for f in fields(ManifestEntry) if f.name != "lineno"]
