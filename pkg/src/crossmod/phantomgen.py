"""Synthetic unpaired two-modality cardiac-like phantoms and the slice preprocessing pipeline.

Classes: 0 background, 1 AA, 2 LA-blood, 3 LV-blood, 4 LV-myo.  Modality ``B`` uses
the reversed intensity table of ``A`` passed through a gamma curve, with its own
noise level and bias field, so the shift is low-level while geometry priors are shared.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("background", "AA", "LA-blood", "LV-blood", "LV-myo")
STRUCTURES = CLASS_NAMES[1:]
MODALITY_CODES = {"A": 1, "B": 2}

# region codes used while rendering; classes are region - 1 with air/tissue -> background
_AIR, _TISSUE, _AA, _LA, _LV, _MYO = range(6)
_REGION_TO_CLASS = np.array([0, 0, 1, 2, 3, 4], dtype=np.uint8)
_IN_PLANE = np.zeros((3, 3, 3), dtype=bool)
_IN_PLANE[1] = ndimage.generate_binary_structure(2, 1)


class PhantomGeometryError(RuntimeError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ModalityStyle:
    # mean intensity per region: air, tissue, AA, LA, LV-blood, LV-myo
    table: tuple[float, ...]
    gamma: float = 1.0
    noise_sigma: float = 0.04
    bias_amplitude: float = 0.15
    blur_sigma: float = 0.6


_STYLE_A = ModalityStyle(table=(0.02, 0.30, 0.95, 0.62, 0.78, 0.45), gamma=1.0, noise_sigma=0.04, bias_amplitude=0.08)
_STYLE_B = ModalityStyle(
    table=tuple(1.0 - v for v in _STYLE_A.table), gamma=1.3, noise_sigma=0.05, bias_amplitude=0.15
)


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 64, 64)
    body_axes: tuple[float, float] = (24.0, 29.0)
    lv_blood_radius: tuple[float, float] = (5.5, 8.0)
    myo_thickness: tuple[float, float] = (3.0, 4.5)
    la_axes: tuple[float, float] = (5.0, 8.0)
    aa_radius: tuple[float, float] = (3.5, 5.0)
    z_extent: tuple[float, float] = (0.55, 0.8)  # ellipsoid half-length as a fraction of depth
    gap: float = 1.5
    max_retries: int = 200
    styles: dict[str, ModalityStyle] = field(default_factory=lambda: {"A": _STYLE_A, "B": _STYLE_B})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "styles" in d:
            d["styles"] = {k: ModalityStyle(**{**v, "table": tuple(v["table"])}) for k, v in d["styles"].items()}
        for k in ("shape", "body_axes", "lv_blood_radius", "myo_thickness", "la_axes", "aa_radius", "z_extent"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def case_rng(seed: int, modality: str) -> np.random.Generator:
    """Independent stream per (seed, modality): modality datasets never share draws."""
    if modality not in MODALITY_CODES:
        raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_CODES)}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(MODALITY_CODES[modality],)))


def _draw_regions(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    d, h, w = spec.shape
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    for _ in range(spec.max_retries):
        by, bx = h / 2 + rng.uniform(-2, 2), w / 2 + rng.uniform(-2, 2)
        ay = rng.uniform(*spec.body_axes) * h / 64
        ax = rng.uniform(*spec.body_axes) * w / 64
        body = ((y - by) / ay) ** 2 + ((x - bx) / ax) ** 2 <= 1.0

        rb = rng.uniform(*spec.lv_blood_radius)
        t = rng.uniform(*spec.myo_thickness)
        theta = rng.uniform(0, 2 * math.pi)
        la_a, la_b = rng.uniform(*spec.la_axes, size=2)
        dist = rb + t + spec.gap + max(la_a, la_b)
        theta2 = theta + rng.choice([-1, 1]) * rng.uniform(0.6 * math.pi, 0.9 * math.pi)
        ra = rng.uniform(*spec.aa_radius)
        dist2 = rb + t + spec.gap + ra + 1
        # LV at the origin; centre the LV/LA/AA complex on the body
        la_off = np.array([dist * math.sin(theta), dist * math.cos(theta)])
        aa_off = np.array([dist2 * math.sin(theta2), dist2 * math.cos(theta2)])
        shift = -(la_off + aa_off) / 3 + rng.uniform(-2, 2, size=2)
        cy, cx = by + shift[0], bx + shift[1]

        z0 = d / 2 + rng.uniform(-3, 3)
        az = rng.uniform(*spec.z_extent) * d
        prof = np.sqrt(np.clip(1 - ((z - z0) / az) ** 2, 0, None))
        r_lv = np.hypot(y - cy, x - cx)
        lv = r_lv <= rb * prof
        myo = ((r_lv <= (rb + t) * prof) | ndimage.binary_dilation(lv, structure=_IN_PLANE)) & ~lv

        ly, lx = cy + la_off[0], cx + la_off[1]
        z1 = z0 + rng.uniform(-4, 4)
        az1 = rng.uniform(0.4, 0.6) * d
        prof1 = np.sqrt(np.clip(1 - ((z - z1) / az1) ** 2, 0, None))
        phi = rng.uniform(0, math.pi)
        u = (y - ly) * math.cos(phi) + (x - lx) * math.sin(phi)
        v = -(y - ly) * math.sin(phi) + (x - lx) * math.cos(phi)
        with np.errstate(divide="ignore", invalid="ignore"):
            la = (u / (la_a * prof1)) ** 2 + (v / (la_b * prof1)) ** 2 <= 1.0
        la &= prof1 > 0

        drift = rng.uniform(-2, 2, size=2)
        ay_c = cy + aa_off[0] + drift[0] * (z / d - 0.5)
        ax_c = cx + aa_off[1] + drift[1] * (z / d - 0.5)
        aa = np.hypot(y - ay_c, x - ax_c) <= ra

        ring = ndimage.binary_dilation(lv | myo, iterations=1)
        if (ring & la).any() or (ring & aa).any() or (ndimage.binary_dilation(la, iterations=1) & aa).any():
            continue
        inner = ndimage.binary_erosion(body, structure=_IN_PLANE, iterations=2)
        if not inner[lv | myo | la | aa].all():
            continue
        regions = np.full(spec.shape, _AIR, dtype=np.uint8)
        regions[body] = _TISSUE
        regions[aa] = _AA
        regions[la] = _LA
        regions[myo] = _MYO
        regions[lv] = _LV
        return regions
    raise PhantomGeometryError(f"no valid geometry after {spec.max_retries} draws")


def _bias_field(shape: tuple[int, int, int], amplitude: float, rng: np.random.Generator) -> np.ndarray:
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    zz, yy, xx = grids
    coef = rng.uniform(-1, 1, size=5)
    field_ = coef[0] * yy + coef[1] * xx + coef[2] * yy * xx + coef[3] * zz + coef[4] * (yy**2 - xx**2)
    field_ /= max(np.abs(field_).max(), 1e-12)
    return 1.0 + amplitude * field_


def render(regions: np.ndarray, style: ModalityStyle, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(style.table, dtype=np.float64)[regions]
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, style.blur_sigma)
    img = np.clip(img, 0, 1) ** style.gamma
    img = img * _bias_field(regions.shape, style.bias_amplitude, rng)
    img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return img.astype(np.float32)


def gen_case(spec: PhantomSpec, seed: int, modality: str) -> tuple[Volume, LabelMap]:
    rng = case_rng(seed, modality)
    regions = _draw_regions(spec, rng)
    img = render(regions, spec.styles[modality], rng)
    return Volume(img), LabelMap(_REGION_TO_CLASS[regions])


def check_anatomy(labels: LabelMap) -> bool:
    """Every in-plane 4-neighbour of an LV-blood voxel is LV-blood or LV-myo."""
    lab = labels.data
    lv = lab == 3
    return bool(np.isin(lab[ndimage.binary_dilation(lv, structure=_IN_PLANE)], (3, 4)).all())


def standardize(v: Volume) -> Volume:
    data = v.data.astype(np.float64)
    std = data.std()
    if not np.isfinite(std) or std == 0:
        raise ValueError("cannot standardize a constant volume")
    return Volume(((data - data.mean()) / std).astype(v.data.dtype), v.spacing)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 15.0
    zoom: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.1


def affine_matrix(angle_deg: float, zoom: float, shear: float) -> np.ndarray:
    """Output->input coordinate map (rows, cols) for rotation, isotropic zoom and shear."""
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    return np.linalg.inv(rot @ sh * zoom)


def apply_affine(slab: np.ndarray, labels: np.ndarray, matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, w = labels.shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - matrix @ center
    chans = slab if slab.ndim == 3 else slab[None]
    out = np.stack(
        [ndimage.affine_transform(c, matrix, offset, order=1, mode="nearest") for c in chans]
    ).astype(slab.dtype)
    lab = ndimage.affine_transform(labels, matrix, offset, order=0, mode="nearest")
    return (out if slab.ndim == 3 else out[0]), lab


def augment(
    slab: np.ndarray, labels: np.ndarray, seed: int | np.random.Generator, cfg: AugmentConfig = AugmentConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation/zoom/shear applied identically to a (c, h, w) or (h, w) slab and its labels."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    zoom = rng.uniform(*cfg.zoom)
    shear = rng.uniform(-cfg.shear, cfg.shear)
    return apply_affine(slab, labels, affine_matrix(angle, zoom, shear))


def sample_stack(v: Volume, labels: LabelMap | None, index: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Slices index-1..index+1 along axis 0 as a (1, 3, h, w) stack, plus the middle label slice."""
    d = v.shape[0]
    if not 1 <= index <= d - 2:
        raise IndexError(f"stack index {index} outside 1..{d - 2}")
    x = np.ascontiguousarray(v.data[index - 1 : index + 2][None], dtype=np.float32)
    y = None if labels is None else labels.data[index].astype(np.int64)
    return x, y


def pad_slices(v: Volume) -> Volume:
    """Edge-replicate one slice at each end so every original slice can be a stack centre."""
    return Volume(np.pad(v.data, ((1, 1), (0, 0), (0, 0)), mode="edge"), v.spacing)


# --- on-disk format -----------------------------------------------------------------


def geometry_hash(labels: LabelMap) -> str:
    return hashlib.sha256(np.ascontiguousarray(labels.data, dtype=np.uint8).tobytes()).hexdigest()[:16]


def write_case(directory: Path, name: str, vol: Volume, labels: LabelMap, header: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    vol.data.astype("<f4").tofile(directory / f"{name}.img.f32")
    labels.data.astype("u1").tofile(directory / f"{name}.lbl.u8")
    meta = {"shape": "x".join(map(str, vol.shape)), "spacing": "x".join(map(str, vol.spacing)), **header}
    (directory / f"{name}.hdr.txt").write_text("".join(f"{k}: {v}\n" for k, v in meta.items()))


def read_header(path: Path) -> dict[str, str]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition(":")
            out[k.strip()] = v.strip()
    return out


def generate_dataset(
    out_dir: Path | str, spec: PhantomSpec, modality: str, n_train: int = 16, n_test: int = 4, seed: int = 0
) -> dict:
    """Write ``n_train + n_test`` cases of one modality plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for i in range(n_train + n_test):
        case_seed = seed + i
        vol, lab = gen_case(spec, case_seed, modality)
        if not check_anatomy(lab):
            raise PhantomGeometryError(f"case {i} violates annulus containment")
        split = "train" if i < n_train else "test"
        name = f"case_{i:03d}"
        write_case(out_dir, name, vol, lab, {"modality": modality, "seed": case_seed, "split": split})
        cases.append(
            {
                "name": name,
                "split": split,
                "seed": case_seed,
                "stream": [case_seed, MODALITY_CODES[modality]],
                "geometry_hash": geometry_hash(lab),
            }
        )
    manifest = {"modality": modality, "num_classes": len(CLASS_NAMES), "spec": spec.to_dict(), "cases": cases}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class FileAccess:
    path: str
    kind: str  # "image" | "label"
    modality: str
    split: str
    phase: str = ""


class CaseStore:
    """Reads one modality directory; every file opened is appended to ``audit``."""

    def __init__(self, root: Path | str, audit: list[FileAccess] | None = None):
        self.root = Path(root)
        self.audit = audit if audit is not None else []
        self.phase = ""  # caller-set tag copied into each audit record
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.modality = self.manifest["modality"]
        self._split = {c["name"]: c["split"] for c in self.manifest["cases"]}

    def names(self, split: str | None = None) -> list[str]:
        return [c["name"] for c in self.manifest["cases"] if split is None or c["split"] == split]

    def _log(self, path: Path, kind: str, name: str) -> None:
        self.audit.append(FileAccess(str(path), kind, self.modality, self._split[name], self.phase))

    def image(self, name: str) -> Volume:
        hdr = read_header(self.root / f"{name}.hdr.txt")
        shape = tuple(int(s) for s in hdr["shape"].split("x"))
        spacing = tuple(float(s) for s in hdr["spacing"].split("x"))
        path = self.root / f"{name}.img.f32"
        self._log(path, "image", name)
        data = np.fromfile(path, dtype="<f4")
        if data.size != math.prod(shape):
            raise ValueError(f"{path}: expected {math.prod(shape)} voxels, found {data.size}")
        return Volume(data.reshape(shape).astype(np.float32), spacing)

    def labels(self, name: str) -> LabelMap:
        hdr = read_header(self.root / f"{name}.hdr.txt")
        shape = tuple(int(s) for s in hdr["shape"].split("x"))
        path = self.root / f"{name}.lbl.u8"
        self._log(path, "label", name)
        data = np.fromfile(path, dtype="u1")
        if data.size != math.prod(shape):
            raise ValueError(f"{path}: expected {math.prod(shape)} voxels, found {data.size}")
        return LabelMap(data.reshape(shape))
