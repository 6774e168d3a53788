"""Synthetic head phantoms with known landmarks, plus patient-level fold plans.

Each phantom is an axial stack: an elliptical skull shell around soft tissue,
a left and a right vessel track running along depth, and calcified blobs on
the vessel walls. Every landmark plane carries the same local signature on its
side (a dense ring around the vessel plus a one-slice lumen dilation), so a
band's identity follows from its place in the whole sequence, not from its
appearance. The two sides differ in lumen density so they can be told apart
after in-plane pooling.

Depth index z increases superiorly. Landmark order per case:
[left canal, left petrolingual, left clinoid, right canal, right petrolingual,
right clinoid]; per side canal <= petrolingual <= clinoid.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import BinaryMask, Volume, save_mask, save_volume

MANIFEST_SCHEMA = "depthseq.manifest/1"
N_LANDMARKS = 6

AIR_HU = -1000.0
TISSUE_HU = 40.0
LUMEN_HU = {"left": 200.0, "right": 110.0}
BAND_HU = 260.0


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 24)
    spacing: tuple[float, float, float] = (0.5, 0.5, 1.0)
    min_depth: int | None = None          # allow inferior crops down to this depth (never past the canal band)
    skull_radius: tuple[float, float] = (11.5, 13.0)
    skull_thickness: float = 2.0
    landmark_margin: int = 4
    max_gap: int = 6
    top_gap: tuple[int, int] = (1, 7)     # slices between the clinoid band and the top slice
    decoys: tuple[int, int] = (0, 0)      # extra look-alike bands per side
    calc_count: tuple[int, int] = (4, 10)
    calc_hu: tuple[float, float] = (400.0, 1200.0)
    skull_hu: tuple[float, float] = (700.0, 1400.0)
    noise_sigma: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        for name in ("skull_radius", "top_gap", "decoys", "calc_count", "calc_hu", "skull_hu"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        H, W, D = self.dims
        problems = []
        if min(H, W) < 16:
            problems.append("in-plane dims must be at least 16")
        if self.landmark_margin < 1 or self.max_gap < self.landmark_margin:
            problems.append("need 1 <= landmark_margin <= max_gap")
        for name in ("skull_radius", "top_gap", "decoys", "calc_count", "calc_hu", "skull_hu"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"{name} range is empty")
        if self.skull_radius[1] + self.skull_thickness > min(H, W) / 2 - 0.5:
            problems.append("skull does not fit in-plane")
        if self.top_gap[0] < 1:
            problems.append("top_gap must leave at least one slice above the clinoid band")
        # tallest landmark stack, from the top slice down to the canal band
        span = self.top_gap[1] + 1 + 2 * self.max_gap
        if span + 1 > D:
            problems.append(f"dims too small for margins: need depth > {span + 1}, have {D}")
        if self.min_depth is not None and not 1 <= self.min_depth <= D:
            problems.append("min_depth must lie in [1, D]")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if problems:
            raise PhantomError("; ".join(problems))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class PhantomCase:
    volume: Volume
    landmarks: np.ndarray                 # (6,) slice indices
    calc_mask: BinaryMask
    class_label: int | None = None
    meta: dict = field(default_factory=dict)


def _rng(case_seed) -> np.random.Generator:
    if isinstance(case_seed, np.random.Generator):
        return case_seed
    entropy = list(case_seed) if isinstance(case_seed, (tuple, list)) else [int(case_seed)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _side_landmarks(spec: PhantomSpec, rng: np.random.Generator, depth: int, shift: int) -> list[int]:
    top = depth - 1
    clinoid = top - min(shift + int(rng.integers(0, 2)), spec.top_gap[1])
    petro = clinoid - int(rng.integers(spec.landmark_margin, spec.max_gap + 1))
    canal = petro - int(rng.integers(spec.landmark_margin, spec.max_gap + 1))
    return [canal, petro, clinoid]


def _decoys(spec: PhantomSpec, rng: np.random.Generator, depth: int, marks: list[int]) -> list[int]:
    n = int(rng.integers(spec.decoys[0], spec.decoys[1] + 1))
    free = [z for z in range(depth) if all(abs(z - m) > 1 for m in marks)]
    if n == 0 or not free:
        return []
    return sorted(int(z) for z in rng.choice(free, size=min(n, len(free)), replace=False))


def generate_phantom(spec: PhantomSpec, case_seed, class_label: int | None = None) -> PhantomCase:
    """Build one deterministic phantom from ``(spec, case_seed)``."""
    rng = _rng(case_seed)
    H, W, D_full = spec.dims
    shift = int(rng.integers(spec.top_gap[0], spec.top_gap[1] + 1))
    left = _side_landmarks(spec, rng, D_full, shift)
    right = _side_landmarks(spec, rng, D_full, shift)
    lowest = min(left[0], right[0])
    max_crop = 0 if spec.min_depth is None else D_full - spec.min_depth
    crop = int(rng.integers(0, min(max_crop, lowest - 1) + 1)) if max_crop > 0 else 0
    D = D_full - crop
    left = [z - crop for z in left]
    right = [z - crop for z in right]

    xs = np.arange(H, dtype=np.float64)[:, None]
    ys = np.arange(W, dtype=np.float64)[None, :]
    cx = (H - 1) / 2 + rng.uniform(-1.5, 1.5)
    cy = (W - 1) / 2 + rng.uniform(-1.5, 1.5)
    radius = rng.uniform(*spec.skull_radius)
    aspect = rng.uniform(0.9, 1.0)
    rr = np.sqrt(((xs - cx) / aspect) ** 2 + (ys - cy) ** 2)
    shell = (rr <= radius + spec.skull_thickness) & (rr >= radius)
    inside = rr < radius
    skull_hu = rng.uniform(*spec.skull_hu)

    vol = np.full((H, W, D), AIR_HU, dtype=np.float64)
    vol[inside] = TISSUE_HU
    vol[shell] = skull_hu
    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape) * (inside | shell)[:, :, None]

    offset = rng.uniform(4.5, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    zz = np.arange(D)
    wiggle_x = 0.6 * np.sin(zz / 4.0 + phase)
    wiggle_y = 0.8 * np.cos(zz / 5.0 + phase)
    calc = np.zeros((H, W, D), dtype=bool)
    lumen_r = 1.5
    sides = {"left": (-1.0, left), "right": (1.0, right)}
    for name, (sign, marks) in sides.items():
        decoys = _decoys(spec, rng, D, marks)
        bands = set(marks) | set(decoys)
        vx = cx + sign * offset + wiggle_x
        vy = cy + rng.uniform(-1.0, 1.0) + wiggle_y
        for z in range(D):
            d2 = (xs - vx[z]) ** 2 + (ys - vy[z]) ** 2
            r = lumen_r + (0.8 if z in bands else 0.0)
            lumen = d2 <= r * r
            vol[:, :, z][lumen] = LUMEN_HU[name] + rng.normal(0.0, spec.noise_sigma, size=int(lumen.sum()))
            if z in bands:
                ring = (d2 <= (r + 1.6) ** 2) & ~lumen
                vol[:, :, z][ring] = BAND_HU
        n_calc = int(rng.integers(spec.calc_count[0], spec.calc_count[1] + 1)) // 2
        for _ in range(max(n_calc, 1)):
            z0 = int(rng.integers(0, D))
            ang = rng.uniform(0, 2 * np.pi)
            bx = vx[z0] + (lumen_r + 0.5) * np.cos(ang)
            by = vy[z0] + (lumen_r + 0.5) * np.sin(ang)
            blob = np.zeros((H, W, D), dtype=bool)
            zr = np.arange(D)[None, None, :]
            blob |= ((xs[:, :, None] - bx) ** 2 + (ys[:, :, None] - by) ** 2 + (zr - z0) ** 2 * 1.5) <= 1.3
            hu = rng.uniform(*spec.calc_hu)
            vol[blob] = hu
            calc |= blob
    landmarks = np.asarray(left + right, dtype=np.int64)
    volume = Volume(vol.astype(np.float32), spacing=spec.spacing,
                    origin=(-(H - 1) / 2 * spec.spacing[0], -(W - 1) / 2 * spec.spacing[1], 0.0))
    meta = {"crop": crop, "depth": D, "center": [float(cx), float(cy)]}
    return PhantomCase(volume, landmarks, BinaryMask(calc), class_label, meta)


def texture_band(vol: np.ndarray, region: np.ndarray, z_lo: int, z_hi: int, amplitude: float) -> np.ndarray:
    """Add a checkerboard with exactly zero mean over ``region`` to slices [z_lo, z_hi)."""
    H, W = region.shape
    pattern = np.where((np.arange(H)[:, None] + np.arange(W)[None, :]) % 2 == 0, amplitude, -amplitude)
    pattern = np.where(region, pattern, 0.0)
    pattern[region] -= pattern[region].mean()
    out = vol.copy()
    out[:, :, z_lo:z_hi] += pattern[:, :, None]
    return out


def generate_classification_case(spec: PhantomSpec, class_label: int, case_seed, amplitude: float = 60.0) -> PhantomCase:
    """Phantom whose class is the depth third (0 inferior .. 2 superior) carrying texture.

    The texture has zero mean within every slice, so per-slice mean intensity
    carries no class information; the class is only visible as a depth
    pattern across the sequence.
    """
    if class_label not in (0, 1, 2):
        raise PhantomError(f"class_label must be 0, 1 or 2, got {class_label}")
    case = generate_phantom(spec, case_seed, class_label=class_label)
    vol = case.volume.voxels.astype(np.float64)
    D = vol.shape[2]
    region = vol[:, :, 0] > -500
    region &= vol[:, :, 0] < 300
    edges = np.linspace(0, D, 4).round().astype(int)
    textured = texture_band(vol, region, int(edges[class_label]), int(edges[class_label + 1]), amplitude)
    case.volume = case.volume.with_voxels(textured.astype(np.float32))
    case.meta["texture_slices"] = [int(edges[class_label]), int(edges[class_label + 1])]
    return case


# ------------------------------------------------------------------- folds

@dataclass(frozen=True)
class Fold:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "folds": [dataclasses.asdict(f) for f in self.folds]}


class FoldError(ValueError):
    pass


def make_folds(case_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-level k-fold plan with a 70/10/20 split inside every fold.

    Ids are shuffled once and cut into 2k near-equal blocks. Fold f tests on
    blocks 2f and 2f+1, validates on block 2f+2 (mod 2k) and trains on the
    remaining 2k-3 blocks, so each id is tested exactly once.
    """
    ids = [str(c) for c in case_ids]
    if len(set(ids)) != len(ids):
        raise FoldError("case ids must be unique")
    if k < 2:
        raise FoldError("need k >= 2")
    if len(ids) < 2 * k:
        raise FoldError(f"too few cases: {len(ids)} ids for {k} folds (need >= {2 * k})")
    order = np.random.default_rng(seed).permutation(len(ids))
    blocks = [[ids[i] for i in part] for part in np.array_split(order, 2 * k)]
    folds = []
    for f in range(k):
        test_b = {2 * f, 2 * f + 1}
        val_b = {(2 * f + 2) % (2 * k)}
        train = [c for b in range(2 * k) if b not in test_b | val_b for c in blocks[b]]
        val = [c for b in sorted(val_b) for c in blocks[b]]
        test = [c for b in sorted(test_b) for c in blocks[b]]
        folds.append(Fold(tuple(train), tuple(val), tuple(test)))
    return FoldPlan(tuple(folds), seed)


# ---------------------------------------------------------------- cohorts

def write_cohort(spec: PhantomSpec, count: int, out_dir, seed: int = 0, task: str = "landmarks") -> Path:
    """Write ``count`` phantoms plus a versioned manifest; returns the manifest path.

    ``task="classification"`` cycles labels 0, 1, 2 over the cohort.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = {}
    for i in range(count):
        case_id = f"case{i:04d}"
        if task == "classification":
            case = generate_classification_case(spec, i % 3, (seed, i))
        elif task == "landmarks":
            case = generate_phantom(spec, (seed, i))
        else:
            raise PhantomError(f"unknown task {task!r}")
        vol_name = f"{case_id}.dstvol"
        calc_name = f"{case_id}_calc.dstvol"
        save_volume(case.volume, out / vol_name)
        save_mask(case.calc_mask, out / calc_name, like=case.volume)
        cases[case_id] = {
            "volume": vol_name,
            "calc_mask": calc_name,
            "landmarks": [int(z) for z in case.landmarks],
            "class_label": case.class_label,
            "depth": int(case.volume.dims[2]),
        }
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "task": task,
        "seed": seed,
        "z_increases_superior": True,
        "phantom_spec": spec.to_dict(),
        "cases": cases,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
