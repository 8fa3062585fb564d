"""Datasets, the synthetic fine-grained generator, and binary file formats.

Images are binary PPM (P6). A dataset is a CSV manifest with header
``path,label,split`` whose paths are relative to the manifest's directory.

Checkpoint layout (little-endian)::

    b"FPH1" | u32 version=1 | u32 count
    per tensor: u32 name_len | name (utf-8) | u8 rank | u64 dims[rank] | f64 data

Code file layout (little-endian)::

    b"FPHC" | u32 version=1 | u32 q | u64 count
    per item: u32 label | u64 words[ceil(q/64)]
"""
from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, FormatError
from .pyramid import n_words
from .retrieval import BinaryCodeSet
from .tensor import Tensor

CKPT_MAGIC = b"FPH1"
CODES_MAGIC = b"FPHC"
FORMAT_VERSION = 1
SPLITS = ("train", "query")
MAX_LABEL = 2**32 - 1


# ---------------------------------------------------------------- PPM


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"PPM image must be (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(image.tobytes())


def _ppm_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    values, pos = [], 2
    while len(values) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PPM header")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: malformed PPM header")
    return values, pos + 1


def read_ppm(path) -> np.ndarray:
    """Decode a P6 file to an (H, W, 3) float64 array scaled to [0, 1]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image ({exc.strerror})") from exc
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, path)
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: bad PPM dimensions or maxval")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * 3 * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"{path}: truncated PPM pixel data")
    pix = np.frombuffer(buf, dtype=dtype, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return pix.astype(np.float64) / maxval


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize a (C, H, W) array to (C, size, size) with half-pixel bilinear sampling."""
    c, h, w = image.shape
    if (h, w) == (size, size):
        return image

    def axis(n_in):
        pos = (np.arange(size) + 0.5) * n_in / size - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise FormatError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
            if e.split not in SPLITS:
                raise FormatError(f"{e.path}: split must be one of {SPLITS}, got {e.split!r}")
            if not 0 <= e.label <= MAX_LABEL:
                raise FormatError(f"{e.path}: label {e.label} outside [0, {MAX_LABEL}]")

    def select(self, split: str | None) -> list[ManifestEntry]:
        return [e for e in self.entries if split in (None, "all") or e.split == split]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "label", "split"])
            for e in self.entries:
                w.writerow([e.path, e.label, e.split])


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label", "split"]:
        raise FormatError(f"{path}: manifest header must be 'path,label,split'")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        try:
            label = int(row["label"])
        except (TypeError, ValueError):
            raise FormatError(f"{path}:{lineno}: label {row['label']!r} is not an integer") from None
        entries.append(ManifestEntry(row["path"].strip(), label, (row["split"] or "").strip()))
    return DatasetManifest(entries, path.parent)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, S, S) float64 in [0, 1]
    labels: np.ndarray
    paths: list[str]
    splits: list[str]

    def subset(self, split: str) -> "Dataset":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return Dataset(self.images[idx], self.labels[idx], [self.paths[i] for i in idx], [self.splits[i] for i in idx])


def load_dataset(manifest_path, input_size: int | None = None, split: str | None = None) -> Dataset:
    """Decode every manifest image to a (3, S, S) array, resizing when needed."""
    manifest = read_manifest(manifest_path)
    entries = manifest.select(split)
    images = []
    for e in entries:
        img = read_ppm(manifest.root / e.path).transpose(2, 0, 1)
        if input_size is not None:
            img = resize_bilinear(img, input_size)
        elif images and img.shape != images[0].shape:
            raise FormatError(f"{e.path}: size {img.shape[1:]} differs from {images[0].shape[1:]}; pass input_size")
        images.append(img)
    size = input_size or (images[0].shape[-1] if images else 0)
    stack = np.stack(images) if images else np.zeros((0, 3, size, size))
    return Dataset(
        stack,
        np.array([e.label for e in entries], dtype=np.int64),
        [e.path for e in entries],
        [e.split for e in entries],
    )


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    groups: int = 2
    classes_per_group: int = 4
    images_per_class: int = 40
    image_size: int = 64
    detail_size: int = 14
    position_jitter: int = 2
    brightness_jitter: float = 0.1
    noise: float = 0.03
    query_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if min(self.groups, self.classes_per_group, self.images_per_class) < 1:
            raise ContractError("groups, classes_per_group and images_per_class must be >= 1")
        if not 0 < self.detail_size < self.image_size / 4:
            raise ContractError(f"detail_size must be in (0, image_size/4), got {self.detail_size}")
        if self.classes_per_group > len(GLYPHS):
            raise ContractError(f"at most {len(GLYPHS)} classes per group are supported")
        if not 0 <= self.query_fraction < 1:
            raise ContractError("query_fraction must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return self.groups * self.classes_per_group


def _glyph(name: str, n: int) -> np.ndarray:
    y, x = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    t = max(1, n // 5)
    if name == "plus":
        return (np.abs(y - c) < t) | (np.abs(x - c) < t)
    if name == "cross":
        return (np.abs(y - x) < t) | (np.abs(y + x - (n - 1)) < t)
    if name == "ring":
        r = np.hypot(y - c, x - c)
        return (r <= c) & (r >= c - t)
    if name == "block":
        return np.ones((n, n), dtype=bool)
    if name == "hbar":
        return np.abs(y - c) < t + 0.5
    if name == "vbar":
        return np.abs(x - c) < t + 0.5
    if name == "wedge":
        return x <= y
    if name == "corner":
        return (x < t + 1) | (y >= n - t - 1)
    raise KeyError(name)


GLYPHS = ("plus", "cross", "ring", "block", "hbar", "vbar", "wedge", "corner")


def _group_base(rng: np.random.Generator, size: int) -> dict:
    """Random parameters of a group's shared appearance."""
    return {
        "bg": rng.uniform(0.1, 0.5, 3),
        "body": rng.uniform(0.3, 0.9, 3),
        "freq": rng.uniform(2, 6),
        "angle": rng.uniform(0, np.pi),
        "radii": rng.uniform(0.25, 0.4, 2) * size,
        "center": rng.uniform(0.4, 0.6, 2) * size,
    }


def render_image(spec: SyntheticSpec, base: dict, glyph: str, rng: np.random.Generator) -> np.ndarray:
    """Render one (H, W, 3) float image in [0, 1]."""
    s = spec.image_size
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    shift = rng.integers(-spec.position_jitter, spec.position_jitter + 1, 2)
    cy, cx = base["center"] + shift
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * base["freq"] * (x * np.cos(base["angle"]) + y * np.sin(base["angle"])) / s)
    img = base["bg"][None, None, :] * (0.7 + 0.3 * wave[..., None])
    body = ((y - cy) / base["radii"][0]) ** 2 + ((x - cx) / base["radii"][1]) ** 2 <= 1
    img[body] = base["body"] * (0.8 + 0.2 * wave[body][:, None])
    # the class-specific detail sits at a fixed nominal spot inside the body
    d = spec.detail_size
    gy = int(round(cy - d / 2)) + int(rng.integers(-spec.position_jitter, spec.position_jitter + 1))
    gx = int(round(cx + base["radii"][1] * 0.35 - d / 2)) + int(rng.integers(-spec.position_jitter, spec.position_jitter + 1))
    gy, gx = int(np.clip(gy, 0, s - d)), int(np.clip(gx, 0, s - d))
    mask = _glyph(glyph, d)
    patch = img[gy : gy + d, gx : gx + d]
    # fixed-contrast ink so the detail never fades into the body colour
    ink = np.where(base["body"] < 0.5, base["body"] + 0.5, base["body"] - 0.5)
    patch[mask] = ink
    img = img * (1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter))
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write the synthetic dataset's PPM files and ``manifest.csv`` under ``out_dir``.

    Classes in one group share a base appearance and differ only by a small
    glyph. The last ``query_fraction`` of every class is tagged ``query``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: cannot create dataset directory ({exc.strerror})") from exc
    seeds = np.random.SeedSequence(spec.seed)
    group_seq, image_seq = seeds.spawn(2)
    group_rng = np.random.default_rng(group_seq)
    bases = [_group_base(group_rng, spec.image_size) for _ in range(spec.groups)]
    n_query = int(round(spec.images_per_class * spec.query_fraction))
    entries = []
    class_seqs = image_seq.spawn(spec.num_classes)
    for g in range(spec.groups):
        for k in range(spec.classes_per_group):
            label = g * spec.classes_per_group + k
            rng = np.random.default_rng(class_seqs[label])
            for i in range(spec.images_per_class):
                img = render_image(spec, bases[g], GLYPHS[k], rng)
                rel = f"images/c{label:03d}_{i:04d}.ppm"
                write_ppm(out / rel, to_uint8(img))
                split = "query" if i >= spec.images_per_class - n_query else "train"
                entries.append(ManifestEntry(rel, label, split))
    manifest = DatasetManifest(entries, out)
    manifest.write(out / "manifest.csv")
    return manifest


# ---------------------------------------------------------------- checkpoints


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} unexpected trailing bytes")


def _named_items(params) -> list[tuple[str, np.ndarray]]:
    items = params.items() if isinstance(params, dict) else params
    out = []
    for name, value in items:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        out.append((name, arr))
    return out


def checkpoint_bytes(params: dict[str, Tensor] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = _named_items(params)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in checkpoint")
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    r = _Reader(buf, path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not valid UTF-8") from None
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims, dtype=object)) if rank else 1
        data = r.take(8 * n)
        out[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    r.finish()
    return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return parse_checkpoint(buf, path)


# ---------------------------------------------------------------- code files


def codes_bytes(codes: BinaryCodeSet) -> bytes:
    if np.any(codes.labels > MAX_LABEL):
        raise FormatError("label overflow: labels must fit in u32")
    nw = n_words(codes.q)
    rows = np.zeros(codes.count, dtype=[("label", "<u4"), ("words", "<u8", (nw,))])
    rows["label"] = codes.labels
    rows["words"] = codes.codes
    return CODES_MAGIC + struct.pack("<IIQ", FORMAT_VERSION, codes.q, codes.count) + rows.tobytes()


def save_codes(codes: BinaryCodeSet, path) -> None:
    Path(path).write_bytes(codes_bytes(codes))


def parse_codes(buf: bytes, path="<bytes>") -> BinaryCodeSet:
    r = _Reader(buf, path)
    if r.take(4) != CODES_MAGIC:
        raise FormatError(f"{path}: bad code-file magic")
    version, q, count = r.unpack("<IIQ")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported code-file version {version}")
    if q < 1:
        raise FormatError(f"{path}: code length must be positive")
    nw = n_words(q)
    dtype = np.dtype([("label", "<u4"), ("words", "<u8", (nw,))])
    if count > len(buf):
        raise FormatError(f"{path}: truncated file (count {count} exceeds file size)")
    rows = np.frombuffer(r.take(dtype.itemsize * count), dtype=dtype)
    r.finish()
    try:
        return BinaryCodeSet(q, rows["words"].astype(np.uint64).reshape(count, nw), rows["label"].astype(np.int64))
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_codes(path) -> BinaryCodeSet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read code file ({exc.strerror})") from exc
    return parse_codes(buf, path)


def append_codes(codes: BinaryCodeSet, path) -> BinaryCodeSet:
    """Append ``codes`` to an existing code file (created if absent)."""
    if not os.path.exists(path):
        save_codes(codes, path)
        return codes
    existing = load_codes(path)
    if existing.q != codes.q:
        raise ContractError(f"{path}: holds {existing.q}-bit codes, cannot append {codes.q}-bit codes")
    merged = BinaryCodeSet(codes.q, np.vstack([existing.codes, codes.codes]), np.concatenate([existing.labels, codes.labels]))
    save_codes(merged, path)
    return merged
