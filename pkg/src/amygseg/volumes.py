"""Labeled volumes: synthetic phantoms, normalization, patch sampling, file I/O.

Phantoms stand in for real acquisitions. Each one carries 8 ellipsoidal
foreground structures (4 per hemisphere, labels 1-4 left / 5-8 right), two
optional small "leftover" blobs (labels 9 left, 10 right), and background
label 0. The four structure families are sized so volume-to-surface ratio
strictly decreases in the order lateral > basal > centromedial >
cortico-superficial. Voxel intensity is the class mean plus Gaussian noise;
consecutive class means are separated by at least twice the noise sigma so
the classes are learnable.

Volume file format ("VOLSEG1"):
    bytes 0..7   magic b"VOLSEG1\\0"
    bytes 8..11  little-endian uint32 header length
    header       JSON: {"format", "dims" [D,H,W], "dtype", "subject_id",
                  "has_labels"}
    payload      raw little-endian float32 intensity, C order (D,H,W),
                 then raw uint8 labels (if has_labels)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor

VOLUME_MAGIC = b"VOLSEG1\x00"
VOLUME_FORMAT = "amygseg-volume-v1"

NUM_CLASSES = 11  # background + 8 structures + 2 leftovers
GROUPS = ("lateral", "basal", "centromedial", "cortico_superficial")
LEFT_CLASS = {"lateral": 1, "basal": 2, "centromedial": 3, "cortico_superficial": 4}
RIGHT_OFFSET = 4  # right-side class = left-side class + 4
LEFTOVER_LEFT, LEFTOVER_RIGHT = 9, 10

# Paper-style subject naming: 14 ids, 210 and 216 unused.
SUBJECT_IDS = tuple(
    f"subject{n}" for n in (205, 206, 207, 208, 209, 211, 212, 213, 214, 215, 217, 218, 219, 220)
)

MIN_PHANTOM_DIM = 32


@dataclass
class LabeledVolume:
    subject_id: str
    intensity: Tensor  # [1, D, H, W] float32
    labels: np.ndarray  # [D, H, W] uint8, values 0..10

    def __post_init__(self):
        if self.intensity.ndim != 4 or self.intensity.shape[0] != 1:
            raise ShapeError(f"intensity must be [1,D,H,W], got {self.intensity.shape}")
        if self.labels.shape != self.intensity.shape[1:]:
            raise ShapeError(
                f"labels {self.labels.shape} do not match intensity {self.intensity.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.intensity.shape[1:]


@dataclass
class Patch:
    intensity: Tensor  # [1, p, p, p]
    labels: np.ndarray  # [p, p, p]
    origin: tuple[int, int, int]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    seed: int = 0
    # semi-axis scale per structure family, as a fraction of min(dims);
    # strictly decreasing so the volume-to-surface ordering holds
    group_radius_frac: tuple[float, float, float, float] = (0.20, 0.15, 0.11, 0.075)
    leftover_radius_frac: float = 0.04
    noise_level: float = 0.05
    class_gap: float = 0.5  # intensity mean spacing between consecutive classes
    mirror: bool = True

    def __post_init__(self):
        if min(self.dims) < MIN_PHANTOM_DIM:
            raise ConfigError(
                f"phantom dims must be at least {MIN_PHANTOM_DIM} per axis "
                f"to place all structures disjointly, got {self.dims}"
            )
        if list(self.group_radius_frac) != sorted(self.group_radius_frac, reverse=True) or len(
            set(self.group_radius_frac)
        ) != 4:
            raise ConfigError(
                "group radii must strictly decrease from lateral to cortico-superficial"
            )
        if self.noise_level < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.noise_level}")
        if self.noise_level > 0 and self.class_gap < 2 * self.noise_level:
            raise ConfigError(
                f"class mean gap {self.class_gap} must be >= 2x noise level "
                f"{self.noise_level}"
            )


# fractional (z, y, x) centers in the left hemisphere; x mirrored for the right
_GROUP_CENTER_FRAC = {
    "lateral": (0.30, 0.30, 0.25),
    "basal": (0.30, 0.70, 0.25),
    "centromedial": (0.70, 0.30, 0.25),
    "cortico_superficial": (0.70, 0.70, 0.25),
}
_LEFTOVER_CENTER_FRAC = (0.5, 0.5, 0.20)
# slight anisotropy so structures are genuinely ellipsoidal
_SEMI_AXIS_RATIOS = (1.1, 1.0, 0.9)


def _paint_ellipsoid(labels, center, semi_axes, value):
    """Set ``value`` inside the ellipsoid; error if it would overwrite."""
    d, h, w = labels.shape
    zz = (np.arange(d)[:, None, None] - center[0]) / semi_axes[0]
    yy = (np.arange(h)[None, :, None] - center[1]) / semi_axes[1]
    xx = (np.arange(w)[None, None, :] - center[2]) / semi_axes[2]
    inside = zz * zz + yy * yy + xx * xx <= 1.0
    if not inside.any():
        raise ConfigError(
            f"phantom structure for class {value} is empty; dims too small"
        )
    if (labels[inside] != 0).any():
        raise ConfigError(
            f"phantom structures overlap at class {value}; increase dims"
        )
    labels[inside] = value


def generate_phantom(spec: PhantomSpec, subject_id: str = "phantom") -> LabeledVolume:
    """Deterministic synthetic labeled volume for the given spec."""
    d, h, w = spec.dims
    scale = min(spec.dims)
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros(spec.dims, dtype=np.uint8)

    jitter = 0.0 if spec.mirror else 1.0

    def centers_for(frac, rng):
        cz, cy, cx = frac[0] * d, frac[1] * h, frac[2] * w
        left = (cz, cy, cx)
        if spec.mirror:
            right = (cz, cy, (w - 1) - cx)
        else:
            right = tuple(
                c + rng.uniform(-jitter, jitter) for c in (cz, cy, (w - 1) - cx)
            )
        return left, right

    # left-hemisphere structures, then their right-side counterparts
    for gi, group in enumerate(GROUPS):
        r = spec.group_radius_frac[gi] * scale
        semi = tuple(r * s for s in _SEMI_AXIS_RATIOS)
        left_c, right_c = centers_for(_GROUP_CENTER_FRAC[group], rng)
        cls = LEFT_CLASS[group]
        if spec.mirror:
            # paint left, then mirror the x axis exactly
            left_only = np.zeros_like(labels)
            _paint_ellipsoid(left_only, left_c, semi, cls)
            if (labels[left_only > 0] != 0).any():
                raise ConfigError(f"phantom structures overlap at class {cls}")
            labels[left_only > 0] = cls
            mirrored = left_only[:, :, ::-1]
            if (labels[mirrored > 0] != 0).any():
                raise ConfigError(f"phantom structures overlap at class {cls + RIGHT_OFFSET}")
            labels[mirrored > 0] = cls + RIGHT_OFFSET
        else:
            _paint_ellipsoid(labels, left_c, semi, cls)
            _paint_ellipsoid(labels, right_c, semi, cls + RIGHT_OFFSET)

    if spec.leftover_radius_frac > 0:
        r = spec.leftover_radius_frac * scale
        semi = tuple(r * s for s in _SEMI_AXIS_RATIOS)
        left_c, right_c = centers_for(_LEFTOVER_CENTER_FRAC, rng)
        if spec.mirror:
            left_only = np.zeros_like(labels)
            _paint_ellipsoid(left_only, left_c, semi, LEFTOVER_LEFT)
            if (labels[left_only > 0] != 0).any():
                raise ConfigError("phantom leftover blob overlaps a structure")
            labels[left_only > 0] = LEFTOVER_LEFT
            mirrored = left_only[:, :, ::-1]
            if (labels[mirrored > 0] != 0).any():
                raise ConfigError("phantom leftover blob overlaps a structure")
            labels[mirrored > 0] = LEFTOVER_RIGHT
        else:
            _paint_ellipsoid(labels, left_c, semi, LEFTOVER_LEFT)
            _paint_ellipsoid(labels, right_c, semi, LEFTOVER_RIGHT)

    means = np.arange(NUM_CLASSES, dtype=np.float32) * spec.class_gap
    intensity = means[labels]
    if spec.noise_level > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_level, spec.dims).astype(
            np.float32
        )
    return LabeledVolume(
        subject_id=subject_id,
        intensity=Tensor(intensity[None].astype(np.float32)),
        labels=labels,
    )


def normalize_intensity(v: LabeledVolume) -> LabeledVolume:
    """Affine-map intensity so foreground voxels have zero mean, unit variance.

    Statistics come from the non-background mask (labels != 0); the same
    affine map is applied everywhere, labels are untouched. Falls back to
    whole-volume statistics when there is no foreground.
    """
    data = v.intensity.data[0]
    mask = v.labels != 0
    sel = data[mask] if mask.any() else data
    mu = float(sel.mean())
    sigma = float(sel.std())
    if sigma == 0.0:
        raise DataError(f"cannot normalize constant-intensity volume '{v.subject_id}'")
    out = (data - mu) / sigma
    return LabeledVolume(v.subject_id, Tensor(out[None].astype(np.float32)), v.labels)


def sample_patches(
    v: LabeledVolume,
    count: int,
    size: int,
    seed: int,
    fg_bias: float = 0.5,
) -> list[Patch]:
    """Deterministically sample ``count`` cubic patches of edge ``size``.

    At least ``ceil(fg_bias * count)`` patches are centered on a foreground
    voxel; the rest have uniformly random in-bounds origins. Foreground
    draws pick a label class uniformly first and then a voxel of that class,
    so small structures are centered as often as large ones. All patches lie
    fully inside the volume.
    """
    dims = v.dims
    if count < 1:
        raise ConfigError(f"patch count must be >= 1, got {count}")
    if size < 1 or size > min(dims):
        raise ConfigError(f"patch size {size} does not fit volume dims {dims}")
    if not 0.0 <= fg_bias <= 1.0:
        raise ConfigError(f"fg_bias must be in [0,1], got {fg_bias}")

    rng = np.random.default_rng(seed)
    half = size // 2
    n_fg = int(np.ceil(fg_bias * count))

    class_origins = None
    if n_fg > 0:
        # centers whose patch fits: origin = center - half must be in range
        lo = (half, half, half)
        hi = tuple(dims[a] - size + half for a in range(3))
        core = v.labels[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
        class_origins = [
            np.argwhere(core == c) for c in range(1, int(v.labels.max()) + 1)
        ]
        class_origins = [c for c in class_origins if len(c)]
        if not class_origins:
            raise DataError(
                f"volume '{v.subject_id}' has no foreground voxel that can center "
                f"a {size}^3 patch"
            )

    patches = []
    intensity = v.intensity.data
    for i in range(count):
        if i < n_fg:
            cand = class_origins[rng.integers(0, len(class_origins))]
            row = cand[rng.integers(0, len(cand))]
            origin = (int(row[0]), int(row[1]), int(row[2]))
        else:
            origin = tuple(int(rng.integers(0, dims[a] - size + 1)) for a in range(3))
        z, y, x = origin
        patches.append(
            Patch(
                intensity=Tensor(
                    intensity[:, z : z + size, y : y + size, x : x + size].copy()
                ),
                labels=v.labels[z : z + size, y : y + size, x : x + size].copy(),
                origin=origin,
            )
        )
    return patches


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def write_volume(v: LabeledVolume, path) -> None:
    d, h, w = v.dims
    header = {
        "format": VOLUME_FORMAT,
        "dims": [d, h, w],
        "dtype": "float32",
        "subject_id": v.subject_id,
        "has_labels": True,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(v.intensity.data[0], dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())


def read_volume(path) -> LabeledVolume:
    with open(path, "rb") as fh:
        magic = fh.read(len(VOLUME_MAGIC))
        if magic != VOLUME_MAGIC:
            raise DataError(f"bad volume magic {magic!r} in {path}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise DataError(f"truncated header length in {path}")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise DataError(f"truncated header in {path}")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise DataError(f"unparseable volume header in {path}: {exc}") from exc
        for key in ("format", "dims", "dtype", "subject_id", "has_labels"):
            if key not in header:
                raise DataError(f"volume header missing field '{key}' in {path}")
        if header["format"] != VOLUME_FORMAT:
            raise DataError(f"unsupported volume format {header['format']!r}")
        if header["dtype"] != "float32":
            raise DataError(f"unsupported intensity dtype {header['dtype']!r}")
        dims = tuple(int(x) for x in header["dims"])
        if len(dims) != 3 or any(x < 1 for x in dims):
            raise DataError(f"invalid dims field {header['dims']} in {path}")
        count = dims[0] * dims[1] * dims[2]
        buf = fh.read(count * 4)
        if len(buf) != count * 4:
            raise DataError(
                f"truncated intensity buffer in {path}: expected {count * 4} bytes, "
                f"got {len(buf)}"
            )
        intensity = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
        labels = np.zeros(dims, dtype=np.uint8)
        if header["has_labels"]:
            lbuf = fh.read(count)
            if len(lbuf) != count:
                raise DataError(
                    f"truncated label buffer in {path}: expected {count} bytes, "
                    f"got {len(lbuf)}"
                )
            labels = np.frombuffer(lbuf, dtype=np.uint8).reshape(dims).copy()
    return LabeledVolume(header["subject_id"], Tensor(intensity[None]), labels)


def write_phantom_dataset(
    out_dir,
    dims: tuple[int, int, int],
    seed: int,
    count: int = len(SUBJECT_IDS),
    spec: PhantomSpec | None = None,
) -> list[Path]:
    """Write ``count`` phantoms named after the standard subject ids.

    Ids follow SUBJECT_IDS; generation beyond 14 continues subject221, ...
    Each subject uses an independent seed derived from ``seed``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = spec or PhantomSpec(dims=dims, seed=seed)
    names = list(SUBJECT_IDS) + [f"subject{221 + i}" for i in range(max(0, count - 14))]
    paths = []
    for i, name in enumerate(names[:count]):
        sub_seed = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        vol = generate_phantom(replace(base, dims=dims, seed=sub_seed), subject_id=name)
        path = out_dir / f"{name}.vol"
        write_volume(vol, path)
        paths.append(path)
    return paths


def load_dataset(data_dir, subject_ids=SUBJECT_IDS) -> dict[str, LabeledVolume]:
    """Read one .vol file per subject id; missing files are data errors."""
    data_dir = Path(data_dir)
    out = {}
    for sid in subject_ids:
        path = data_dir / f"{sid}.vol"
        if not path.exists():
            raise DataError(f"missing volume for subject '{sid}' (expected {path})")
        out[sid] = read_volume(path)
    return out
