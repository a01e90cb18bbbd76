"""Dataset splits, on-disk sample layout and manifests."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError, DegenerateInputError, IngestionError
from ..geometry import DepthMap, check_image
from . import io
from .synthetic import SceneConfig, SceneSample, generate_sample

MANIFEST = "manifest.txt"
SAMPLE_FILES = ("rgb1.ppm", "rgb2.ppm", "depth1.pfm", "depth2.pfm", "intrinsics.txt", "pose1.txt", "pose2.txt")


@dataclass
class Splits:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __getitem__(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split {name!r}")
        return getattr(self, name)


def split_sizes(count: int) -> tuple[int, int, int]:
    """80/10/10 by index with at least one validation and one test item."""
    if count < 3:
        raise ConfigurationError(f"need at least 3 samples for three splits, got {count}")
    n_val = max(1, int(round(0.1 * count)))
    n_test = max(1, int(round(0.1 * count)))
    return count - n_val - n_test, n_val, n_test


def split_items(items: list) -> Splits:
    a, b, _ = split_sizes(len(items))
    return Splits(list(items[:a]), list(items[a : a + b]), list(items[a + b :]))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(cfg: SceneConfig, count: int, seed: int) -> Splits:
    samples = [generate_sample(cfg, sample_seed(seed, i), sample_id=f"{i:05d}") for i in range(count)]
    return split_items(samples)


def save_sample(sample: SceneSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_ppm(d / "rgb1.ppm", sample.rgb1)
    io.write_ppm(d / "rgb2.ppm", sample.rgb2)
    io.write_pfm(d / "depth1.pfm", sample.depth1)
    io.write_pfm(d / "depth2.pfm", sample.depth2)
    io.write_intrinsics(d / "intrinsics.txt", sample.intrinsics)
    io.write_pose(d / "pose1.txt", sample.pose1)
    io.write_pose(d / "pose2.txt", sample.pose2)
    return d


def _load_depth(d: Path, stem: str) -> DepthMap:
    pfm = d / f"{stem}.pfm"
    png = d / f"{stem}.png"
    if pfm.exists():
        return io.read_pfm(pfm)
    if png.exists():
        return io.read_png_depth(png)
    raise IngestionError(pfm, "file not found (no .pfm or 16-bit .png depth)")


def load_sample(directory) -> SceneSample:
    d = Path(directory)
    if not d.is_dir():
        raise IngestionError(d, "sample directory not found")
    k = io.read_intrinsics(d / "intrinsics.txt")
    rgb1 = io.read_ppm(d / "rgb1.ppm")
    rgb2 = io.read_ppm(d / "rgb2.ppm")
    depth1 = _load_depth(d, "depth1")
    depth2 = _load_depth(d, "depth2")
    for name, arr in (("rgb1.ppm", rgb1), ("rgb2.ppm", rgb2), ("depth1", depth1), ("depth2", depth2)):
        if tuple(arr.shape[:2]) != k.shape:
            raise IngestionError(d / name, f"shape {tuple(arr.shape[:2])} does not match intrinsics {k.shape}")
    check_image(rgb1)
    return SceneSample(
        rgb1=rgb1, rgb2=rgb2, depth1=depth1, depth2=depth2,
        pose1=io.read_pose(d / "pose1.txt"), pose2=io.read_pose(d / "pose2.txt"),
        intrinsics=k, id=d.name,
    )


def write_dataset(root, samples: list[SceneSample]) -> Path:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(root, f"cannot create dataset directory ({exc.strerror})") from None
    names = []
    for s in samples:
        save_sample(s, root / s.id)
        names.append(s.id)
    (root / MANIFEST).write_text("".join(f"{n}\n" for n in names))
    return root


def read_manifest(root) -> list[Path]:
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    if not path.is_file():
        raise IngestionError(path, "manifest not found")
    base = path.parent
    entries = [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not entries:
        raise DegenerateInputError(f"{path}: manifest lists no samples")
    return [base / e for e in entries]


def load_dataset(root) -> Splits:
    """Load every sample listed in the manifest and split by index."""
    return split_items([load_sample(p) for p in read_manifest(root)])
