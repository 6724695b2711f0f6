"""Raw-binary volume format: `<path>.json` header + `<path>.raw` payload.

The payload is little-endian and x-fastest: the flat index of voxel
(z, y, x) is x + nx*(y + ny*z). In memory every volume is a numpy array
of shape ``dims`` = (nz, ny, nx), so C-order flattening matches the file
layout exactly and all modules index volumes as ``vol[z, y, x]``.
Header ``dims`` and ``spacing_mm`` are stored in the same (z, y, x) axis
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

# Label code sets per volume kind. Values outside these sets are rejected.
LABEL_CODES = {
    "cl_labels": (0, 1, 2),      # 0 background, 1 leukocortical, 2 subpial/intracortical
    "tissue_labels": (0, 1, 2),  # 0 background, 1 WM, 2 GM
    "wml_labels": (0, 1),        # 0 no, 1 WML
}
CL_BACKGROUND, CL_LEUKOCORTICAL, CL_SUBPIAL_INTRACORTICAL = 0, 1, 2
TISSUE_BACKGROUND, TISSUE_WM, TISSUE_GM = 0, 1, 2
CL_CLASS_NAMES = {1: "leukocortical", 2: "subpial_intracortical"}

KINDS = ("intensity",) + tuple(LABEL_CODES)
DEFAULT_SPACING_MM = (0.5, 0.5, 0.5)

# Per-subject volume names required by the training protocol.
CONTRAST_NAMES = ("mp2rage", "t2s_epi", "t2s_gre")
LABEL_NAMES = ("cl_labels", "tissue_labels", "wml_labels")
SUBJECT_VOLUME_NAMES = CONTRAST_NAMES + LABEL_NAMES

_HEADER_KEYS = ("dims", "spacing_mm", "dtype", "kind", "subject_id")


class VolumeError(Exception):
    """Base for all volume format errors."""


class VolumeValidationError(VolumeError):
    """A volume violates its type invariants (dims, spacing, codes, pairing)."""


class MissingVolumeFileError(VolumeError):
    pass


class HeaderParseError(VolumeError):
    """Header JSON is malformed or has missing/extra/ill-typed keys."""


class UnknownDtypeError(VolumeError):
    pass


class UnknownKindError(VolumeError):
    pass


class PayloadSizeError(VolumeError):
    """Raw payload length disagrees with the header dims."""


class GeometryMismatchError(VolumeError):
    """Volumes of one subject disagree in dims or spacing."""


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]          # (nz, ny, nx)
    spacing_mm: tuple[float, float, float]
    dtype: str                          # "f32" | "u8"
    kind: str                           # "intensity" | label kinds
    subject_id: str

    @property
    def voxel_volume_ul(self) -> float:
        # 1 mm^3 == 1 uL, so 0.5 mm isotropic voxels are 0.125 uL each.
        return float(np.prod(self.spacing_mm))


@dataclass
class Volume:
    header: VolumeHeader
    data: np.ndarray  # shape == header.dims, dtype per header


def validate_volume(v: Volume) -> None:
    """Raise VolumeValidationError unless `v` satisfies all invariants."""
    h = v.header
    if len(h.dims) != 3 or any(int(d) != d or d < 1 for d in h.dims):
        raise VolumeValidationError(f"dims must be 3 integers >= 1, got {h.dims!r}")
    if len(h.spacing_mm) != 3 or any(not (s > 0) for s in h.spacing_mm):
        raise VolumeValidationError(f"spacing_mm must be 3 positive reals, got {h.spacing_mm!r}")
    if h.dtype not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype {h.dtype!r}, expected one of {sorted(DTYPES)}")
    if h.kind not in KINDS:
        raise UnknownKindError(f"unknown kind {h.kind!r}, expected one of {sorted(KINDS)}")
    if h.kind == "intensity" and h.dtype != "f32":
        raise VolumeValidationError("intensity volumes require dtype f32")
    if h.kind in LABEL_CODES and h.dtype != "u8":
        raise VolumeValidationError(f"{h.kind} volumes require dtype u8")
    if tuple(v.data.shape) != tuple(h.dims):
        raise VolumeValidationError(f"data shape {v.data.shape} != header dims {tuple(h.dims)}")
    if v.data.dtype != DTYPES[h.dtype]:
        # byte order matters only for f32; u8 has none
        if v.data.dtype.newbyteorder("<") != DTYPES[h.dtype]:
            raise VolumeValidationError(f"data dtype {v.data.dtype} != header dtype {h.dtype}")
    if h.kind in LABEL_CODES:
        codes = np.asarray(LABEL_CODES[h.kind], dtype=v.data.dtype)
        if not np.isin(v.data, codes).all():
            bad = sorted(set(np.unique(v.data)) - set(int(c) for c in codes))
            raise VolumeValidationError(f"{h.kind} contains codes outside {LABEL_CODES[h.kind]}: {bad}")


def make_volume(data: np.ndarray, kind: str, subject_id: str = "",
                spacing_mm=DEFAULT_SPACING_MM) -> Volume:
    """Wrap an array as a Volume, casting to the kind's required dtype."""
    dtype = "f32" if kind == "intensity" else "u8"
    arr = np.ascontiguousarray(data, dtype=DTYPES.get(dtype))
    header = VolumeHeader(
        dims=tuple(int(d) for d in arr.shape),
        spacing_mm=tuple(float(s) for s in spacing_mm),
        dtype=dtype,
        kind=kind,
        subject_id=subject_id,
    )
    v = Volume(header, arr)
    validate_volume(v)
    return v


def _header_json(h: VolumeHeader) -> str:
    # Fixed key order keeps serialization byte-stable across runs.
    doc = {
        "dims": list(h.dims),
        "spacing_mm": list(h.spacing_mm),
        "dtype": h.dtype,
        "kind": h.kind,
        "subject_id": h.subject_id,
    }
    return json.dumps(doc, indent=2) + "\n"


def write_volume(v: Volume, path: str | Path) -> None:
    """Write `<path>.json` + `<path>.raw`. Round-trips byte-identically."""
    validate_volume(v)
    path = Path(path)
    try:
        path.with_suffix(path.suffix + ".json").write_text(_header_json(v.header), encoding="utf-8")
        payload = np.ascontiguousarray(v.data, dtype=DTYPES[v.header.dtype])
        path.with_suffix(path.suffix + ".raw").write_bytes(payload.tobytes())
    except OSError as e:
        raise VolumeError(f"I/O failure writing {path}: {e}") from e


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    json_path = path.with_suffix(path.suffix + ".json")
    raw_path = path.with_suffix(path.suffix + ".raw")
    for p in (json_path, raw_path):
        if not p.exists():
            raise MissingVolumeFileError(f"missing volume file {p}")
    try:
        doc = json.loads(json_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise HeaderParseError(f"malformed header JSON {json_path}: {e}") from e
    if not isinstance(doc, dict) or set(doc) != set(_HEADER_KEYS):
        raise HeaderParseError(f"header {json_path} must have exactly keys {_HEADER_KEYS}")
    try:
        header = VolumeHeader(
            dims=tuple(int(d) for d in doc["dims"]),
            spacing_mm=tuple(float(s) for s in doc["spacing_mm"]),
            dtype=str(doc["dtype"]),
            kind=str(doc["kind"]),
            subject_id=str(doc["subject_id"]),
        )
    except (TypeError, ValueError) as e:
        raise HeaderParseError(f"ill-typed header field in {json_path}: {e}") from e
    if header.dtype not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype {header.dtype!r} in {json_path}")
    if header.kind not in KINDS:
        raise UnknownKindError(f"unknown kind {header.kind!r} in {json_path}")

    payload = raw_path.read_bytes()
    expected = int(np.prod(header.dims)) * DTYPES[header.dtype].itemsize
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{raw_path}: payload is {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=DTYPES[header.dtype]).reshape(header.dims).copy()
    v = Volume(header, data)
    validate_volume(v)
    return v


@dataclass
class SubjectEntry:
    subject_id: str
    directory: str
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    lesion_counts: dict[str, int]  # per CL class name
    n_lesions: int


@dataclass
class CohortManifest:
    subjects: list[SubjectEntry] = field(default_factory=list)
    total_lesions: int = 0

    def to_dict(self) -> dict:
        return {
            "subjects": [
                {
                    "subject_id": s.subject_id,
                    "directory": s.directory,
                    "dims": list(s.dims),
                    "spacing_mm": list(s.spacing_mm),
                    "lesion_counts": s.lesion_counts,
                    "n_lesions": s.n_lesions,
                }
                for s in self.subjects
            ],
            "total_lesions": self.total_lesions,
        }


def read_subject(subject_dir: str | Path) -> dict[str, Volume]:
    """Read the six volumes of one subject directory, checking geometry."""
    subject_dir = Path(subject_dir)
    vols = {}
    for name in SUBJECT_VOLUME_NAMES:
        vols[name] = read_volume(subject_dir / name)
    ref = vols["mp2rage"].header
    for name, v in vols.items():
        if v.header.dims != ref.dims or v.header.spacing_mm != ref.spacing_mm:
            raise GeometryMismatchError(
                f"{subject_dir}: {name} geometry {v.header.dims}/{v.header.spacing_mm} "
                f"!= mp2rage {ref.dims}/{ref.spacing_mm}")
    return vols


def check_cohort(subject_dirs: list[str | Path]) -> CohortManifest:
    """Validate a cohort on disk and count its lesions per class."""
    from .evaluation import connected_components

    manifest = CohortManifest()
    for d in subject_dirs:
        vols = read_subject(d)
        cl = vols["cl_labels"]
        comps = connected_components(cl.data)
        counts = {name: 0 for name in CL_CLASS_NAMES.values()}
        for c in comps:
            counts[CL_CLASS_NAMES[c.cl_class]] += 1
        manifest.subjects.append(SubjectEntry(
            subject_id=cl.header.subject_id,
            directory=str(d),
            dims=cl.header.dims,
            spacing_mm=cl.header.spacing_mm,
            lesion_counts=counts,
            n_lesions=len(comps),
        ))
    manifest.total_lesions = sum(s.n_lesions for s in manifest.subjects)
    return manifest
