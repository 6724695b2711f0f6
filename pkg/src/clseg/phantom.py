"""Deterministic synthetic multi-contrast brain phantoms.

Each subject is a smoothed ellipsoid brain with a gray-matter shell of
uniform voxel thickness over a white-matter core, three intensity
contrasts with per-tissue means, planted cortical lesions of four
geometric types, white-matter lesions, Gaussian noise inside the brain
(background stays exactly zero), and two optional artifact modes.

Lesion types and their geometric contracts:
    type 1 (leukocortical)        straddles the GM/WM interface: the
                                  component contains both GM and WM voxels
    type 2 (intracortical)        strictly inside GM: no voxel 26-adjacent
                                  to background
    types 3, 4 (subpial)          at least one voxel 26-adjacent to
                                  background; type 4 is a larger-extent
                                  blob, recorded only as metadata
Types 2-4 map to lesion class 2, type 1 to class 1. Planted lesions are
pairwise non-adjacent (26-connectivity), so connected-component analysis
recovers exactly the planted records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import volume_io
from .volume_io import (CONTRAST_NAMES, DEFAULT_SPACING_MM, TISSUE_GM,
                        TISSUE_WM, make_volume, write_volume)

# Fraction of lesions per type observed in the reference cohort.
LESION_TYPE_MIX = (0.38, 0.07, 0.44, 0.11)
TYPE_TO_CLASS = {1: 1, 2: 2, 3: 2, 4: 2}

# Per-contrast tissue means; background is exactly 0 so the brain mask is
# recoverable as the nonzero support.
TISSUE_MEANS = {
    "mp2rage": {"wm": 0.85, "gm": 0.55},
    "t2s_epi": {"wm": 0.45, "gm": 0.70},
    "t2s_gre": {"wm": 0.50, "gm": 0.72},
}
# Intensity a lesion voxel is pulled toward, per contrast.
LESION_TARGETS = {"mp2rage": 0.30, "t2s_epi": 0.95, "t2s_gre": 0.95}
WML_TARGETS = {"mp2rage": 0.45, "t2s_epi": 0.95, "t2s_gre": 0.95}
# How far a lesion voxel moves toward the target (0 invisible, 1 full).
# Subpial/intracortical lesions are faint on MP2RAGE and strong on the two
# T2* contrasts, which is what makes multi-contrast input and channel
# dropout measurable.
LESION_VISIBILITY = {
    1: {"mp2rage": 0.90, "t2s_epi": 0.70, "t2s_gre": 0.70},
    2: {"mp2rage": 0.25, "t2s_epi": 0.90, "t2s_gre": 0.90},
}
WML_VISIBILITY = {"mp2rage": 0.80, "t2s_epi": 0.90, "t2s_gre": 0.90}

_PLACEMENT_RETRIES = 60


class PhantomError(Exception):
    """Infeasible spec: lesions cannot be placed within bounded retries."""


def counts_from_mix(total: int, mix=LESION_TYPE_MIX) -> tuple[int, int, int, int]:
    """Apportion `total` lesions to the four types by largest remainder."""
    raw = [total * m for m in mix]
    base = [int(np.floor(r)) for r in raw]
    rem = total - sum(base)
    order = sorted(range(4), key=lambda i: raw[i] - base[i], reverse=True)
    for i in order[:rem]:
        base[i] += 1
    return tuple(base)


@dataclass(frozen=True)
class PhantomSpec:
    side_voxels: int = 96
    spacing_mm: tuple[float, float, float] = DEFAULT_SPACING_MM
    cortex_thickness_voxels: int = 5
    lesion_counts: tuple[int, int, int, int] = counts_from_mix(12)
    lesion_size_range: tuple[int, int] = (6, 200)
    wml_count: int = 2
    noise_sigma: tuple[float, float, float] = (0.02, 0.03, 0.03)
    gre_missing_chunk: bool = False
    epi_banding: bool = False
    n_subjects: int = 12
    seed: int = 0

    def validate(self) -> None:
        if self.side_voxels < 32:
            raise PhantomError("side_voxels must be >= 32")
        if self.cortex_thickness_voxels < 3:
            raise PhantomError("cortex thickness must be >= 3 voxels")
        if min(self.lesion_counts) < 0 or self.wml_count < 0:
            raise PhantomError("lesion counts must be nonnegative")
        if self.lesion_size_range[0] < 6:
            raise PhantomError("minimum lesion size is 6 voxels (the evaluation floor)")
        if self.n_subjects < 1:
            raise PhantomError("n_subjects must be >= 1")


def _child_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


def _make_tissue(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Brain geometry: 0 background, 1 WM core, 2 GM shell."""
    n = spec.side_voxels
    center = n / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    semi = n * rng.uniform(0.36, 0.42, size=3)
    zz, yy, xx = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    r2 = (((zz - center[0]) / semi[0]) ** 2
          + ((yy - center[1]) / semi[1]) ** 2
          + ((xx - center[2]) / semi[2]) ** 2)
    brain = ndimage.gaussian_filter((r2 <= 1.0).astype(np.float32), sigma=1.0) > 0.5
    depth = ndimage.distance_transform_edt(brain)
    tissue = np.zeros((n, n, n), dtype=np.uint8)
    tissue[brain] = TISSUE_GM
    tissue[depth > spec.cortex_thickness_voxels] = TISSUE_WM
    if not (tissue == TISSUE_WM).any():
        raise PhantomError("brain too small for the requested cortex thickness")
    return tissue


_FULL = np.ones((3, 3, 3), dtype=bool)


def _ellipsoid_blob(shape, seed_voxel, radii, allowed, rng) -> np.ndarray | None:
    """Random-orientation ellipsoid around seed_voxel, clipped to `allowed`.
    Returns a boolean mask over the full volume, or None if empty."""
    r = np.asarray(radii, dtype=float)
    ext = int(np.ceil(r.max())) + 1
    lo = np.maximum(np.asarray(seed_voxel) - ext, 0)
    hi = np.minimum(np.asarray(seed_voxel) + ext + 1, shape)
    grids = np.meshgrid(*(np.arange(lo[a], hi[a]) for a in range(3)), indexing="ij")
    rel = np.stack([g - seed_voxel[a] for a, g in enumerate(grids)])
    # random rotation from QR keeps blob orientation varied
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rot = np.einsum("ab,bzyx->azyx", q, rel.astype(float))
    inside = ((rot / r[:, None, None, None]) ** 2).sum(axis=0) <= 1.0
    mask = np.zeros(shape, dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = inside
    mask &= allowed
    if not mask[tuple(seed_voxel)]:
        return None
    # keep only the piece connected to the seed
    lab, _ = ndimage.label(mask, structure=_FULL)
    mask = lab == lab[tuple(seed_voxel)]
    return mask if mask.any() else None


def _radii_for_size(target: int, flatten_axis: int | None, max_flat: float,
                    rng: np.random.Generator) -> np.ndarray:
    r0 = (3.0 * target / (4.0 * np.pi)) ** (1.0 / 3.0)
    radii = r0 * rng.uniform(0.75, 1.35, size=3)
    if flatten_axis is not None and radii[flatten_axis] > max_flat:
        scale = radii[flatten_axis] / max_flat
        radii[flatten_axis] = max_flat
        other = [a for a in range(3) if a != flatten_axis]
        radii[other] = radii[other] * np.sqrt(scale)
    return np.maximum(radii, 1.1)


def inject_lesions(tissue: np.ndarray, spec: PhantomSpec, rng: np.random.Generator):
    """Plant CLs of all four types plus WMLs; returns (cl, wml, records)."""
    shape = tissue.shape
    voxel_ul = float(np.prod(spec.spacing_mm))
    brain = tissue != 0
    gm = tissue == TISSUE_GM
    wm = tissue == TISSUE_WM
    bg_adjacent = ndimage.binary_dilation(~brain, structure=_FULL)
    gm_adjacent = ndimage.binary_dilation(gm, structure=_FULL)

    pial_gm = gm & bg_adjacent                      # GM touching background
    safe_gm = gm & ~bg_adjacent                     # GM not touching background
    interface_wm = wm & gm_adjacent                 # WM touching GM
    deep_wm = wm & ~ndimage.binary_dilation(gm_adjacent, structure=_FULL, iterations=2)
    juxta_wm = wm & ndimage.binary_dilation(gm, structure=_FULL, iterations=2)

    cl = np.zeros(shape, dtype=np.uint8)
    wml = np.zeros(shape, dtype=np.uint8)
    occupied_dil = np.zeros(shape, dtype=bool)  # 1-voxel halo keeps lesions non-adjacent
    records: list[dict] = []

    def seeds_of(mask):
        coords = np.argwhere(mask)
        if len(coords) == 0:
            raise PhantomError("no candidate seed voxels for a lesion type")
        return coords

    def place(lesion_type: int) -> dict:
        nonlocal occupied_dil
        lo_sz, hi_sz = spec.lesion_size_range
        for _ in range(_PLACEMENT_RETRIES):
            # log-uniform sizes so small lesions dominate, as in real cohorts
            target = int(np.exp(rng.uniform(np.log(lo_sz), np.log(hi_sz + 1))))
            if lesion_type == 1:
                seed_pool, allowed = interface_wm, brain
                radii = _radii_for_size(target, None, 0, rng)
            elif lesion_type == 2:
                seed_pool, allowed = safe_gm, safe_gm
                target = min(target, 40)  # thin shell cannot hold big blobs
                radii = _radii_for_size(target, 0, (spec.cortex_thickness_voxels - 2) / 2, rng)
            else:
                seed_pool, allowed = pial_gm, gm
                if lesion_type == 4:
                    target = max(target, 2 * lo_sz)
                radii = _radii_for_size(target, None, 0, rng)
            coords = seeds_of(seed_pool)
            seed_voxel = tuple(coords[rng.integers(len(coords))])
            blob = _ellipsoid_blob(shape, seed_voxel, radii, allowed, rng)
            if blob is None or (blob & occupied_dil).any():
                continue
            size = int(blob.sum())
            if size < max(6, lo_sz):
                continue
            if lesion_type == 1 and not ((blob & gm).any() and (blob & wm).any()):
                continue
            if lesion_type == 2 and (blob & bg_adjacent).any():
                continue
            if lesion_type in (3, 4) and not (blob & bg_adjacent).any():
                continue
            cls = TYPE_TO_CLASS[lesion_type]
            cl[blob] = cls
            occupied_dil |= ndimage.binary_dilation(blob, structure=_FULL)
            centroid = np.argwhere(blob).mean(axis=0)
            return {
                "type": lesion_type,
                "class": cls,
                "size_voxels": size,
                "volume_ul": size * voxel_ul,
                "centroid": [float(c) for c in centroid],
            }
        raise PhantomError(
            f"could not place a type-{lesion_type} lesion after {_PLACEMENT_RETRIES} retries")

    for lesion_type, count in zip((1, 2, 3, 4), spec.lesion_counts):
        for _ in range(count):
            records.append(place(lesion_type))

    # WMLs: strictly in WM; odd indices juxtacortical (within 2 voxels of GM)
    # to exercise the zero-weight confusion case, the rest deep
    for i in range(spec.wml_count):
        pool = juxta_wm if (i % 2 == 1 and juxta_wm.any()) else deep_wm
        if not pool.any():
            pool = wm
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            target = int(np.exp(rng.uniform(np.log(8), np.log(120))))
            radii = _radii_for_size(target, None, 0, rng)
            coords = np.argwhere(pool)
            seed_voxel = tuple(coords[rng.integers(len(coords))])
            blob = _ellipsoid_blob(shape, seed_voxel, radii, wm, rng)
            if blob is None or (blob & occupied_dil).any():
                continue
            if int(blob.sum()) < 6:
                continue
            wml[blob] = 1
            occupied_dil |= ndimage.binary_dilation(blob, structure=_FULL)
            placed = True
            break
        if not placed:
            raise PhantomError(f"could not place WML {i}")
    return cl, wml, records


def _render_contrasts(tissue, cl, wml, spec: PhantomSpec, rng: np.random.Generator):
    """Tissue means + lesion pulls + in-brain Gaussian noise per contrast."""
    brain = tissue != 0
    out = {}
    noise = {name: rng.standard_normal(tissue.shape).astype(np.float32)
             for name in CONTRAST_NAMES}  # drawn before scaling so sigma
    # changes never shift the stream
    for ci, name in enumerate(CONTRAST_NAMES):
        means = TISSUE_MEANS[name]
        img = np.zeros(tissue.shape, dtype=np.float32)
        img[tissue == TISSUE_WM] = means["wm"]
        img[tissue == TISSUE_GM] = means["gm"]
        for cls in (1, 2):
            m = cl == cls
            vis = LESION_VISIBILITY[cls][name]
            img[m] = (1 - vis) * img[m] + vis * LESION_TARGETS[name]
        m = wml == 1
        vis = WML_VISIBILITY[name]
        img[m] = (1 - vis) * img[m] + vis * WML_TARGETS[name]
        img[brain] += spec.noise_sigma[ci] * noise[name][brain]
        out[name] = img
    return out


def apply_artifacts(volumes: dict[str, np.ndarray], spec: PhantomSpec,
                    rng: np.random.Generator) -> dict[str, np.ndarray]:
    """GRE missing chunk and/or EPI banding; labels are never touched.

    The rng is consumed identically whether or not each flag is set, so a
    spec differing only in artifact flags yields an identical subject
    otherwise (used to build clean/artifacted twin cohorts).
    """
    volumes = dict(volumes)
    brain = volumes["tissue_labels"] != 0

    axis = int(rng.integers(3))
    high_side = bool(rng.integers(2))
    frac = float(rng.uniform(0.05, 0.15))
    if spec.gre_missing_chunk:
        per_plane = brain.sum(axis=tuple(a for a in range(3) if a != axis))
        cum = np.cumsum(per_plane[::-1] if high_side else per_plane)
        total = int(cum[-1])
        n_planes = int(np.searchsorted(cum, frac * total) + 1)
        gre = volumes["t2s_gre"].copy()
        sl = [slice(None)] * 3
        sl[axis] = slice(-n_planes, None) if high_side else slice(0, n_planes)
        gre[tuple(sl)] = 0.0
        volumes["t2s_gre"] = gre

    axis_b = int(rng.integers(3))
    cycles = float(rng.uniform(2.0, 6.0))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    amp = float(rng.uniform(0.10, 0.30))
    if spec.epi_banding:
        n = volumes["t2s_epi"].shape[axis_b]
        field = 1.0 + amp * np.sin(2 * np.pi * cycles * np.arange(n) / n + phase)
        shape = [1, 1, 1]
        shape[axis_b] = n
        volumes["t2s_epi"] = (volumes["t2s_epi"]
                              * field.reshape(shape).astype(np.float32))
    return volumes


def generate_subject(spec: PhantomSpec, subject_seed: int):
    """All six volumes plus ground-truth lesion records, pure in (spec, seed)."""
    spec.validate()
    rng_geo = _child_rng(subject_seed, 0)
    rng_les = _child_rng(subject_seed, 1)
    rng_noise = _child_rng(subject_seed, 2)
    rng_art = _child_rng(subject_seed, 3)

    tissue = _make_tissue(spec, rng_geo)
    cl, wml, records = inject_lesions(tissue, spec, rng_les)
    volumes = _render_contrasts(tissue, cl, wml, spec, rng_noise)
    volumes["cl_labels"] = cl
    volumes["tissue_labels"] = tissue
    volumes["wml_labels"] = wml
    volumes = apply_artifacts(volumes, spec, rng_art)
    return volumes, records


def subject_seeds(cohort_seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(entropy=cohort_seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n)]


def generate_cohort(spec: PhantomSpec, n_subjects: int, out_dir: str | Path,
                    seed: int | None = None) -> dict:
    """Write n subjects plus a ground-truth manifest; byte-stable in the seed."""
    spec.validate()
    if n_subjects < 1:
        raise PhantomError("n_subjects must be >= 1")
    seed = spec.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"spec": asdict(spec), "seed": seed, "subjects": [], "total_lesions": 0}
    for i, sseed in enumerate(subject_seeds(seed, n_subjects)):
        subject_id = f"subject_{i:02d}"
        volumes, records = generate_subject(spec, sseed)
        sdir = out_dir / subject_id
        sdir.mkdir(exist_ok=True)
        for name, arr in volumes.items():
            kind = name if name in volume_io.LABEL_CODES else "intensity"
            write_volume(make_volume(arr, kind, subject_id, spec.spacing_mm), sdir / name)
        manifest["subjects"].append({
            "subject_id": subject_id,
            "directory": str(sdir),
            "subject_seed": sseed,
            "lesions": records,
        })
        manifest["total_lesions"] += len(records)
    (out_dir / "cohort_manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
