"""Datasets: image-folder ingestion, training augmentation, synthetic generator."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import Config, format_value
from .errors import ConfigError, IngestionError

IMAGE_SIZE = 112
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
MANIFEST = "manifest.txt"


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: int
    id: str


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    ids: list[str]
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]), self.ids[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], [self.ids[i] for i in idx], self.class_names)

    @property
    def M(self) -> int:
        return len(self.class_names)


@dataclass
class DatasetManifest:
    class_names: tuple[str, ...]
    splits: tuple[str, ...] = ("train", "test")
    source: dict[str, str] = field(default_factory=lambda: {"kind": "folder"})

    def to_lines(self) -> list[str]:
        lines = [f"class_names={','.join(self.class_names)}", f"splits={','.join(self.splits)}"]
        lines += [f"source.{k}={v}" for k, v in self.source.items()]
        return lines

    def write(self, root: str | Path) -> Path:
        path = Path(root) / MANIFEST
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, root: str | Path) -> "DatasetManifest":
        path = Path(root) / MANIFEST
        if not path.exists():
            raise IngestionError(f"{path} not found; a dataset root needs a manifest with class_names")
        names, splits, source = None, ("train", "test"), {}
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key == "class_names":
                names = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key == "splits":
                splits = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key.startswith("source."):
                source[key[len("source."):]] = value
        if not names:
            raise IngestionError(f"{path} has no class_names entry")
        if len(set(names)) != len(names):
            raise ConfigError(f"{path}: duplicate class names")
        return cls(names, splits, source or {"kind": "folder"})


# ---------------------------------------------------------------- ingestion

def decode_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    with Image.open(path) as im:
        if im.format not in ("PNG", "PPM"):
            raise ValueError(f"unsupported image format {im.format}")
        if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
            raise ValueError(f"unsupported pixel mode {im.mode} (8-bit images only)")
        im = im.convert("RGB")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_folder(root: str | Path, manifest: DatasetManifest) -> Dataset:
    """Read ``labels.csv`` (id,filename,class_name) in row order."""
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        raise IngestionError(f"{csv_path} not found")
    index = {n: i for i, n in enumerate(manifest.class_names)}
    images, labels, ids = [], [], []
    with csv_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "filename", "class_name"]:
            raise IngestionError(f"{csv_path}: header must be id,filename,class_name")
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise IngestionError(f"{csv_path} row {rowno}: expected 3 fields, got {row}")
            sid, fname, cname = (c.strip() for c in row[:3])
            if cname not in index:
                raise IngestionError(f"{csv_path} row {rowno} ({sid}): unknown class name {cname!r}")
            path = root / fname
            if not path.exists():
                raise IngestionError(f"{csv_path} row {rowno} ({sid}): missing file {fname}")
            try:
                images.append(decode_image(path))
            except Exception as exc:
                raise IngestionError(f"{csv_path} row {rowno} ({sid}): cannot decode {fname}: {exc}") from exc
            labels.append(index[cname])
            ids.append(sid)
    if not ids:
        return Dataset(np.zeros((0, 3, IMAGE_SIZE, IMAGE_SIZE), np.float32), np.zeros(0, np.int64), [],
                       manifest.class_names)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), ids, manifest.class_names)


def load_split(root: str | Path, split: str) -> Dataset:
    manifest = DatasetManifest.read(root)
    if split not in manifest.splits:
        raise IngestionError(f"split {split!r} not listed in {Path(root) / MANIFEST} ({manifest.splits})")
    return load_folder(Path(root) / split, manifest)


def write_folder(ds: Dataset, root: str | Path) -> Path:
    """Write ``ds`` as 8-bit PNGs plus labels.csv under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with (root / "labels.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "filename", "class_name"])
        for i in range(len(ds)):
            fname = f"{ds.ids[i]}.png"
            pix = np.clip(np.rint(ds.images[i].transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pix, "RGB").save(root / fname)
            w.writerow([ds.ids[i], fname, ds.class_names[ds.labels[i]]])
    return root


# ---------------------------------------------------------------- augmentation

def sample_rng(seed: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Per-sample augmentation stream, independent of worker scheduling."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


def grayscale(img: np.ndarray) -> np.ndarray:
    lum = np.tensordot(LUMA, img, axes=(0, 0)).astype(img.dtype)
    return np.broadcast_to(lum, img.shape).copy()


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


def random_erase(img: np.ndarray, rng: np.random.Generator, area_min: float, area_max: float) -> np.ndarray:
    C, H, W = img.shape
    area = rng.uniform(area_min, area_max) * H * W
    aspect = np.exp(rng.uniform(np.log(0.3), np.log(1.0 / 0.3)))
    h = int(min(H, max(1, round(np.sqrt(area * aspect)))))
    w = int(min(W, max(1, round(np.sqrt(area / aspect)))))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    out = img.copy()
    out[:, top : top + h, left : left + w] = rng.random((C, h, w), dtype=np.float32)
    return out


def augment(s: Sample, rng: np.random.Generator, cfg: Config | None = None) -> Sample:
    """Grayscale, horizontal flip, random erasing, each gated by its own draw."""
    cfg = cfg or Config()
    u = rng.random(3)
    img = s.image
    if u[0] < cfg.p_grayscale:
        img = grayscale(img)
    if u[1] < cfg.p_flip:
        img = hflip(img)
    if u[2] < cfg.p_erase:
        img = random_erase(img, rng, cfg.erase_area_min, cfg.erase_area_max)
    return Sample(img, s.label, s.id)


def augment_batch(ds: Dataset, idx, seed: int, epoch: int, cfg: Config) -> np.ndarray:
    out = np.empty((len(idx),) + ds.images.shape[1:], dtype=np.float32)
    for j, i in enumerate(idx):
        out[j] = augment(ds[int(i)], sample_rng(seed, epoch, ds.ids[int(i)]), cfg).image
    return out


# ---------------------------------------------------------------- synthetic data

def class_pattern(k: int, M: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic (3, size, size) pattern for class k: oriented grating plus a blob layout."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = np.pi * k / M
    freq = 3.0 + 2.0 * (k % 3)
    grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    layout = np.random.default_rng(1009 + 31 * k)
    blobs = np.zeros_like(xx)
    for _ in range(1 + k % 3):
        cy, cx = layout.uniform(0.2, 0.8, size=2)
        r = layout.uniform(0.08, 0.16)
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    tint = 0.6 + 0.4 * np.cos(2 * np.pi * (k / M + np.arange(3) / 3.0))
    img = 0.5 + 0.22 * grating[None] * tint[:, None, None] + 0.3 * np.minimum(blobs, 1.0)[None] - 0.15
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(seed: int, per_class: int, M: int, noise_level: float = 0.0, ambiguity_rate: float = 0.0,
                   class_names=None, prefix: str = "s") -> Dataset:
    """Class-major synthetic dataset; ambiguous samples blend two class patterns but keep their label."""
    if not 1 <= M <= 8:
        raise ConfigError(f"synthetic data supports 1..8 classes, got {M}")
    if class_names is None:
        from .config import FERPLUS_CLASSES
        class_names = FERPLUS_CLASSES[:M]
    class_names = tuple(class_names)
    if len(class_names) != M:
        raise ConfigError(f"{len(class_names)} class names for {M} classes")
    patterns = [class_pattern(k, M) for k in range(M)]
    rng = np.random.default_rng(seed)
    images = np.empty((M * per_class, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = np.empty(M * per_class, dtype=np.int64)
    ids = []
    j = 0
    for k in range(M):
        for i in range(per_class):
            img = patterns[k]
            if M > 1 and rng.random() < ambiguity_rate:
                other = int(rng.integers(0, M - 1))
                other += other >= k
                img = 0.5 * patterns[k] + 0.5 * patterns[other]
            if noise_level > 0:
                img = np.clip(img + rng.uniform(-noise_level, noise_level, img.shape).astype(np.float32), 0.0, 1.0)
            images[j] = img
            labels[j] = k
            ids.append(f"{prefix}{seed}_{k}_{i:04d}")
            j += 1
    return Dataset(images, labels, ids, class_names)


def synth_splits(cfg: Config, seed: int | None = None, class_names=None) -> tuple[Dataset, Dataset]:
    """Train split carries the configured ambiguity; test split is clean and drawn from a disjoint stream."""
    seed = cfg.seed if seed is None else seed
    train = synth_generate(seed, cfg.per_class, cfg.num_classes, cfg.noise_level, cfg.ambiguity_rate,
                           class_names, prefix="train")
    test = synth_generate(seed + 100_003, cfg.test_per_class, cfg.num_classes, cfg.noise_level, 0.0,
                          class_names, prefix="test")
    return train, test


def write_synthetic(root: str | Path, cfg: Config, seed: int | None = None) -> DatasetManifest:
    seed = cfg.seed if seed is None else seed
    train, test = synth_splits(cfg, seed)
    root = Path(root)
    write_folder(train, root / "train")
    write_folder(test, root / "test")
    manifest = DatasetManifest(train.class_names, ("train", "test"), {
        "kind": "synthetic", "seed": str(seed), "per_class": str(cfg.per_class),
        "test_per_class": str(cfg.test_per_class), "noise_level": format_value(cfg.noise_level),
        "ambiguity_rate": format_value(cfg.ambiguity_rate),
    })
    manifest.write(root)
    return manifest
