"""Image/mask datasets on disk, the synthetic shape generator and checkpoints.

Dataset layout::

    root/images/<id>.pgm   (or .ppm for 3-channel images)
    root/masks/<id>.pgm
    root/splits.txt        optional, lines "<id> <train|val|test>"
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CHECKPOINT_MAGIC = b"AAE1"


class PNMError(ValueError):
    """Malformed portable anymap file."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


# --------------------------------------------------------------------------
# PGM / PPM


def _read_header(buf: bytes, path) -> tuple[bytes, list[int], int]:
    """Parse magic and three header integers; returns (magic, [w, h, maxval], payload offset)."""
    if len(buf) < 2:
        raise PNMError(f"{path}: file too short for a PNM header")
    magic = buf[:2]
    if magic not in (b"P2", b"P5", b"P3", b"P6"):
        raise PNMError(f"{path}: bad magic {magic!r}, expected P2, P3, P5 or P6")
    pos = 2
    values = []
    n = len(buf)
    while len(values) < 3:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PNMError(f"{path}: truncated or malformed header at byte {start}")
        values.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from a binary payload
    if pos >= n and magic in (b"P5", b"P6"):
        raise PNMError(f"{path}: missing payload after header")
    return magic, values, pos + 1


def load_pnm(path, binarize: bool = False) -> np.ndarray:
    """Read a PGM (H x W) or PPM (3 x H x W) file, scaled to [0, 1]."""
    path = Path(path)
    buf = path.read_bytes()
    magic, (w, h, maxval), start = _read_header(buf, path)
    if w < 1 or h < 1:
        raise PNMError(f"{path}: invalid extents {w}x{h}")
    if not 0 < maxval <= 255:
        raise PNMError(f"{path}: maxval {maxval} not supported (must be 1..255)")
    depth = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * depth
    if magic in (b"P5", b"P6"):
        payload = buf[start:start + count]
        if len(payload) < count:
            raise PNMError(f"{path}: truncated payload, expected {count} bytes, got {len(payload)}")
        raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        tokens = buf[start - 1:].split()
        if len(tokens) < count:
            raise PNMError(f"{path}: truncated payload, expected {count} values, got {len(tokens)}")
        try:
            raw = np.array([int(t) for t in tokens[:count]], dtype=np.float64)
        except ValueError as exc:
            raise PNMError(f"{path}: non-integer sample in ASCII payload") from exc
        if raw.max(initial=0) > maxval:
            raise PNMError(f"{path}: sample exceeds maxval {maxval}")
    grid = raw / maxval
    grid = grid.reshape(h, w) if depth == 1 else grid.reshape(h, w, 3).transpose(2, 0, 1)
    if binarize:
        grid = (grid >= 0.5).astype(np.float64)
    return grid


def load_pgm(path, binarize: bool = False) -> np.ndarray:
    grid = load_pnm(path, binarize)
    if grid.ndim != 2:
        raise PNMError(f"{path}: expected a graymap (P2/P5), got a color image")
    return grid


def _quantize(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    # round half up
    return np.floor(v * 255.0 + 0.5).astype(np.uint8).tobytes()


def save_pgm(grid, path) -> None:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"save_pgm expects a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + _quantize(grid))


def save_ppm(image, path) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"save_ppm expects 3 x H x W, got shape {image.shape}")
    _, h, w = image.shape
    _write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + _quantize(image.transpose(1, 2, 0)))


def _write(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# --------------------------------------------------------------------------
# datasets


@dataclass
class SamplePair:
    id: str
    image: Tensor
    mask: np.ndarray


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    image_size: tuple[int, int] | None = None
    image_files: dict[str, Path] = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits[split]

    def all_ids(self) -> list[str]:
        return sorted(i for ids in self.splits.values() for i in ids)

    def load(self, sample_id: str) -> SamplePair:
        img = load_pnm(self.image_files[sample_id])
        mask = load_pgm(self.root / "masks" / f"{sample_id}.pgm", binarize=True)
        if img.ndim == 2:
            img = img[None]
        if img.shape[1:] != mask.shape:
            raise ValueError(f"sample {sample_id}: image {img.shape[1:]} and mask {mask.shape} extents differ")
        return SamplePair(sample_id, Tensor(img, sample_id), mask)

    def load_split(self, split: str) -> list[SamplePair]:
        return [self.load(i) for i in self.ids(split)]


def _stems(directory: Path, suffixes) -> dict[str, Path]:
    found = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and p.suffix.lower() in suffixes:
            found.setdefault(p.stem, p)
    return found


def scan_dataset(root) -> DatasetManifest:
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory {d} does not exist")
    images = _stems(img_dir, {".pgm", ".ppm"})
    masks = _stems(mask_dir, {".pgm"})
    for stem in sorted(set(images) ^ set(masks)):
        where = "mask" if stem in images else "image"
        log.warning("excluding %s: no matching %s", stem, where)
    ids = sorted(set(images) & set(masks))
    if not ids:
        raise ValueError(f"no matched image/mask pairs under {root}")

    splits = {s: [] for s in SPLITS}
    split_file = root / "splits.txt"
    if split_file.exists():
        assigned = {}
        for lineno, line in enumerate(split_file.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise ValueError(f"{split_file}:{lineno}: expected '<id> <train|val|test>', got {line!r}")
            assigned[parts[0]] = parts[1]
        for i in ids:
            if i in assigned:
                splits[assigned[i]].append(i)
            else:
                log.warning("excluding %s: not listed in %s", i, split_file)
    else:
        n = len(ids)
        n_train, n_val = (8 * n) // 10, n // 10
        splits["train"] = ids[:n_train]
        splits["val"] = ids[n_train:n_train + n_val]
        splits["test"] = ids[n_train + n_val:]

    first = load_pnm(images[ids[0]])
    return DatasetManifest(root, splits, tuple(first.shape[-2:]), {i: images[i] for i in ids})


# --------------------------------------------------------------------------
# synthetic data

MIN_FOREGROUND = 0.01
MAX_FOREGROUND = 0.60


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly interpolated random lattice, values in [0, 1]."""
    lattice = rng.random((cells + 1, cells + 1))
    coords = np.linspace(0, cells, size, endpoint=False)
    i0 = coords.astype(int)
    f = coords - i0
    top = lattice[i0][:, i0] * (1 - f)[None, :] + lattice[i0][:, i0 + 1] * f[None, :]
    bot = lattice[i0 + 1][:, i0] * (1 - f)[None, :] + lattice[i0 + 1][:, i0 + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    kind = rng.integers(3)
    if kind == 0:  # disk
        r = rng.uniform(0.08, 0.22) * size
        cy, cx = rng.uniform(r, size - r, 2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 1:  # axis-aligned rectangle
        hh, ww = rng.uniform(0.12, 0.4, 2) * size
        y0 = rng.uniform(0, size - hh)
        x0 = rng.uniform(0, size - ww)
        return (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
    # triangle from three points around a center
    r = rng.uniform(0.12, 0.28) * size
    cy, cx = rng.uniform(r, size - r, 2)
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3 + rng.uniform(-0.4, 0.4, 3)
    py, px = cy + r * np.sin(angles), cx + r * np.cos(angles)
    inside = np.ones((size, size), dtype=bool)
    sign = np.sign((px[1] - px[0]) * (py[2] - py[0]) - (py[1] - py[0]) * (px[2] - px[0]))
    for a in range(3):
        b = (a + 1) % 3
        cross = (px[b] - px[a]) * (yy - py[a]) - (py[b] - py[a]) * (xx - px[a])
        inside &= sign * cross >= 0
    return inside


def synth_sample(seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair, deterministic in (seed, index, size)."""
    rng = np.random.default_rng([seed, index, size])
    while True:
        n_shapes = int(rng.integers(1, 4))
        mask = np.zeros((size, size), dtype=bool)
        placed = 0
        for _ in range(n_shapes):
            for _attempt in range(20):
                shape = _shape_mask(rng, size)
                if shape.any() and not (shape & mask).any():
                    mask |= shape
                    placed += 1
                    break
        frac = mask.mean()
        if placed and MIN_FOREGROUND <= frac <= MAX_FOREGROUND:
            break

    # background: coarse + fine value noise and a linear ramp
    coarse = _value_noise(rng, size, 4)
    fine = _value_noise(rng, size, 16)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    background = 0.45 * coarse + 0.25 * fine + 0.3 * ramp

    bg_level = background[~mask].mean()
    contrast = rng.uniform(0.18, 0.4)
    level = bg_level + contrast if bg_level < 0.5 else bg_level - contrast
    texture = _value_noise(rng, size, 8) - 0.5
    foreground = level + 0.3 * texture
    image = np.where(mask, foreground, background)
    image = image + rng.normal(0.0, 0.04, (size, size))
    return np.clip(image, 0.0, 1.0), mask.astype(np.float64)


def generate_synthetic(seed: int, n: int, size: int, out_root) -> DatasetManifest:
    """Write ``n`` synthetic samples plus an 80/10/10 splits.txt under ``out_root``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    root = Path(out_root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {root}: {exc.strerror}") from exc
    width = max(4, len(str(n - 1)))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    for i, sid in enumerate(ids):
        image, mask = synth_sample(seed, i, size)
        save_pgm(image, root / "images" / f"{sid}.pgm")
        save_pgm(mask, root / "masks" / f"{sid}.pgm")
    n_train, n_val = (8 * n) // 10, n // 10
    lines = [f"{sid} {'train' if k < n_train else 'val' if k < n_train + n_val else 'test'}"
             for k, sid in enumerate(ids)]
    _write(root / "splits.txt", ("\n".join(lines) + "\n").encode("ascii"))
    return scan_dataset(root)


# --------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(store) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    for name, t in store.items():
        raw = name.encode("utf-8")
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> OrderedDict:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic at byte 0: expected {CHECKPOINT_MAGIC!r}, got {buf[:4]!r}")
    pos = 4
    store = OrderedDict()

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}: need {n} bytes for {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"undecodable parameter name ending at byte {pos}") from exc
        if name in store:
            raise CheckpointError(f"duplicate parameter {name!r} ending at byte {pos}")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count, f"values of {name!r}"), dtype="<f8").astype(np.float64)
        store[name] = Tensor(values.reshape(shape), name)
    return store


def save_checkpoint(store, path) -> None:
    _write(path, encode_checkpoint(store))


def load_checkpoint(path) -> OrderedDict:
    path = Path(path)
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
