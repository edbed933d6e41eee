"""Procedural camouflage scenes: a textured blob hidden in a textured background."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pnm

MIN_FRACTION = 0.05
MAX_FRACTION = 0.6
MAX_REJECTIONS = 100
N_HARMONICS = 6
BASE_CELLS = 8
OCTAVES = 3
TEXTURE_LOW = 0.3
TEXTURE_RANGE = 0.4
LUMINANCE_OFFSET = 0.15
SUPERSAMPLE = 4
MANIFEST_VERSION = 1

# stream tags keep the random draws for each part of a sample independent
_TAG_MASK, _TAG_BG, _TAG_FG = 1, 2, 3


class BlobRejectedError(RuntimeError):
    pass


@dataclass
class CamoSample:
    image: np.ndarray        # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray         # (H, W) float64 in {0, 1}
    seed: int
    difficulty: float


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _lattice_resample(lattice: np.ndarray, size: int) -> np.ndarray:
    """Bilinear interpolation of a square lattice onto size x size samples, corners aligned."""
    n = lattice.shape[0]
    pos = np.linspace(0.0, n - 1, size)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    t = pos - i0
    rows = lattice[i0] * (1 - t)[:, None] + lattice[i0 + 1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]


def value_noise(seed, size: int, octaves: int = OCTAVES, base_cells: int = BASE_CELLS) -> np.ndarray:
    """Sum of random lattices at doubling frequency and halving amplitude, rescaled to [0, 1]."""
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    if base_cells < 1:
        raise ValueError(f"base_cells must be >= 1, got {base_cells}")
    key = seed if isinstance(seed, (list, tuple)) else [seed]
    rng = _rng(*key)
    total = np.zeros((size, size))
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.random((cells + 1, cells + 1))
        total += 0.5 ** o * _lattice_resample(lattice, size)
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def radial_coverage(size: int, centre, r0: float, amps, phases, supersample: int = 1) -> np.ndarray:
    """Fraction of each pixel inside r(phi) = r0 (1 + sum_h a_h cos(h phi + rho_h))."""
    offs = (np.arange(supersample) + 0.5) / supersample
    coords = (np.arange(size)[:, None] + offs[None, :]).ravel()
    dy = coords[:, None] - centre[0]
    dx = coords[None, :] - centre[1]
    phi = np.arctan2(dy, dx)
    h = np.arange(1, len(amps) + 1)
    radius = r0 * (1 + np.tensordot(np.cos(phi[..., None] * h + np.asarray(phases)), amps, axes=1))
    inside = (np.hypot(dy, dx) <= radius).astype(np.float64)
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def _draw_blob(rng: np.random.Generator, size: int):
    h = np.arange(1, N_HARMONICS + 1)
    amps = rng.uniform(-0.25 / h, 0.25 / h)
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
    r0 = rng.uniform(0.15, 0.4) * size
    centre = rng.uniform(size / 4, 3 * size / 4, 2)
    return centre, r0, amps, phases


def _acceptable(mask: np.ndarray) -> bool:
    frac = mask.mean()
    if not MIN_FRACTION <= frac <= MAX_FRACTION:
        return False
    return ndimage.label(mask)[1] == 1


def blob_alpha(seed: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask (pixel-centre test) and anti-aliased coverage of one accepted blob."""
    rng = _rng(seed, _TAG_MASK)
    fractions = []
    for _ in range(MAX_REJECTIONS):
        centre, r0, amps, phases = _draw_blob(rng, size)
        mask = radial_coverage(size, centre, r0, amps, phases)
        if _acceptable(mask):
            alpha = radial_coverage(size, centre, r0, amps, phases, SUPERSAMPLE)
            return mask, alpha
        fractions.append(round(float(mask.mean()), 3))
    raise BlobRejectedError(
        f"seed {seed}, size {size}: {MAX_REJECTIONS} blobs rejected "
        f"(foreground fraction must lie in [{MIN_FRACTION}, {MAX_FRACTION}] with one component; "
        f"last fractions {fractions[-5:]})")


def blob_mask(seed: int, size: int) -> np.ndarray:
    return blob_alpha(seed, size)[0]


def _texture(seed: int, tag: int, size: int) -> np.ndarray:
    chans = [value_noise([seed, tag, c], size) for c in range(3)]
    return TEXTURE_LOW + TEXTURE_RANGE * np.stack(chans, axis=-1)


def synth_sample(seed: int, size: int, difficulty: float) -> CamoSample:
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    mask, alpha = blob_alpha(seed, size)
    bg = _texture(seed, _TAG_BG, size)
    fg = _texture(seed, _TAG_FG, size)
    d = float(difficulty)
    inside = (1 - d) * fg + d * bg + (1 - d) * LUMINANCE_OFFSET
    a = alpha[..., None]
    image = np.clip(a * inside + (1 - a) * bg, 0.0, 1.0)
    return CamoSample(image=image, mask=mask, seed=int(seed), difficulty=d)


@dataclass
class DatasetManifest:
    ids: list[str]
    images: list[str]
    masks: list[str]
    size: int
    base_seed: int
    difficulty: float
    version: int = MANIFEST_VERSION

    @property
    def count(self) -> int:
        return len(self.ids)

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version, "count": self.count, "size": self.size,
            "base_seed": self.base_seed, "difficulty": self.difficulty, "ids": self.ids,
            "files": [{"image": i, "mask": m} for i, m in zip(self.images, self.masks)],
        }, indent=1, sort_keys=True) + "\n"


class ManifestError(ValueError):
    pass


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def generate_dataset(out_dir, count: int, size: int, base_seed: int, difficulty: float) -> DatasetManifest:
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if size < 2:
        raise ValueError(f"size must be >= 2, got {size}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    ids, images, masks = [], [], []
    for i in range(count):
        sample = synth_sample(base_seed + i, size, difficulty)
        sid = f"{i:05d}"
        img_name, gt_name = f"img_{sid}.ppm", f"gt_{sid}.pgm"
        _write(out / img_name, pnm.write_ppm(sample.image))
        _write(out / gt_name, pnm.write_pgm(sample.mask))
        ids.append(sid)
        images.append(img_name)
        masks.append(gt_name)
    manifest = DatasetManifest(ids, images, masks, size, int(base_seed), float(difficulty))
    _write(out / "manifest.json", manifest.to_json().encode())
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    try:
        files = raw["files"]
        manifest = DatasetManifest(
            ids=list(raw["ids"]), images=[f["image"] for f in files], masks=[f["mask"] for f in files],
            size=int(raw["size"]), base_seed=int(raw["base_seed"]),
            difficulty=float(raw["difficulty"]), version=int(raw["version"]))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest {path} is missing field {exc}") from None
    if manifest.ids != sorted(set(manifest.ids)) or len(manifest.images) != len(manifest.ids):
        raise ManifestError(f"manifest {path}: ids must be unique, sorted and match the file list")
    for name in manifest.images + manifest.masks:
        if not (Path(data_dir) / name).is_file():
            raise ManifestError(f"manifest {path} references missing file {Path(data_dir) / name}")
    return manifest


def load_dataset(data_dir) -> tuple[DatasetManifest, np.ndarray, np.ndarray]:
    """Images as (N, 3, H, W) and masks as (N, 1, H, W), both float64."""
    manifest = load_manifest(data_dir)
    root = Path(data_dir)
    imgs = [pnm.read_ppm((root / n).read_bytes()).transpose(2, 0, 1) for n in manifest.images]
    gts = [pnm.read_pgm((root / n).read_bytes())[None] for n in manifest.masks]
    size = manifest.size
    shape_img, shape_gt = (0, 3, size, size), (0, 1, size, size)
    images = np.stack(imgs) if imgs else np.zeros(shape_img)
    masks = np.stack(gts) if gts else np.zeros(shape_gt)
    return manifest, images, masks
