"""Face records, image normalisation, the synthetic face renderer and splits.

Real images follow the UTKFace naming convention
``[age]_[gender]_[race]_[timestamp].ext`` with gender ``0`` = male and
``1`` = female. Synthetic faces are rendered on the fly from a small set of
parameters, so a synthetic record never needs an image file on disk.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import BadChannels, EmptySource, MalformedName, OutOfRange

N_GROUPS = 10
MAX_AGE = 116
MAX_SYNTHETIC_AGE = 100
SEXES = ("male", "female")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")

# Inclusive upper bound of each age bucket; the last bucket is open (>70).
GROUP_UPPER_BOUNDS = (5, 10, 15, 20, 30, 40, 50, 60, 70)
GROUP_NAMES = ("0-5", "6-10", "11-15", "16-20", "21-30", "31-40",
               "41-50", "51-60", "61-70", ">70")


@dataclass(frozen=True)
class FaceRecord:
    """One labelled face.

    ``source`` is a file path for real images and ``synthetic:<seed>`` for
    rendered ones. ``identity`` groups records that show the same person and
    is ``None`` when unknown.
    """

    source: str
    age: int
    sex: str
    group: int
    identity: int | None = None

    def __post_init__(self):
        if not 0 <= self.age <= MAX_AGE:
            raise OutOfRange(f"age {self.age} outside [0, {MAX_AGE}]")
        if self.sex not in SEXES:
            raise ValueError(f"unknown sex {self.sex!r}")
        if self.group != age_to_group(self.age):
            raise ValueError(f"group {self.group} inconsistent with age {self.age}")

    @property
    def sex_index(self) -> int:
        return SEXES.index(self.sex)

    @property
    def is_synthetic(self) -> bool:
        return self.source.startswith("synthetic:")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FaceRecord":
        return cls(source=d["source"], age=int(d["age"]), sex=d["sex"],
                   group=int(d["group"]), identity=d.get("identity"))


def age_to_group(age: int) -> int:
    """Map an age in years onto one of the ten buckets 0-5, 6-10, ..., >70."""
    if isinstance(age, bool) or int(age) != age:
        raise OutOfRange(f"age must be an integer, got {age!r}")
    age = int(age)
    if not 0 <= age <= MAX_AGE:
        raise OutOfRange(f"age {age} outside [0, {MAX_AGE}]")
    for idx, upper in enumerate(GROUP_UPPER_BOUNDS):
        if age <= upper:
            return idx
    return N_GROUPS - 1


def one_hot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.float32)
    out[index] = 1.0
    return out


def parse_face_filename(name: str) -> FaceRecord:
    base = os.path.basename(name)
    stem = base.split(".", 1)[0]
    fields = stem.split("_")
    if len(fields) < 3 or not all(f.isdigit() for f in fields[:3]):
        raise MalformedName(f"{base!r}: expected age_gender_race_... fields")
    age, gender = int(fields[0]), int(fields[1])
    if not 0 <= age <= MAX_AGE:
        raise MalformedName(f"{base!r}: age {age} outside [0, {MAX_AGE}]")
    if gender not in (0, 1):
        raise MalformedName(f"{base!r}: gender field must be 0 or 1")
    return FaceRecord(source=name, age=age, sex=SEXES[gender], group=age_to_group(age))


# ---------------------------------------------------------------------------
# Pixel conversion


def normalize_image(raw, image_size: int | None = None) -> np.ndarray:
    """Map uint8-range pixels to [-1, 1] and optionally resize (bilinear)."""
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadChannels(f"expected H x W x 3 image, got shape {arr.shape}")
    out = arr.astype(np.float64) / 127.5 - 1.0
    if image_size is not None and out.shape[:2] != (image_size, image_size):
        out = resize_bilinear(out, image_size)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def denormalize_image(x) -> np.ndarray:
    arr = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.as_tensor(np.ascontiguousarray(img), dtype=torch.float64)
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def load_image_file(path, image_size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    h, w = arr.shape[:2]
    if h != w:
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        arr = arr[top:top + side, left:left + side]
    return normalize_image(arr, image_size)


def save_png(path, image) -> None:
    from PIL import Image

    Image.fromarray(denormalize_image(image)).save(path)


# ---------------------------------------------------------------------------
# Synthetic faces

BAND_HEIGHT = 0.12
BAND_WIDTH = {"male": 0.30, "female": 0.80}
# Before puberty the band has the same width for both sexes.
NEUTRAL_BAND_WIDTH = 0.55
MATURITY_START_AGE = 5
MATURITY_END_AGE = 20
BAND_VALUE = 1.0
WRINKLE_VALUE = -0.85
FEATURE_VALUE = -0.9

FACE_CENTER_Y = 0.56
FACE_HALF_HEIGHT = 0.36
EYE_RADIUS = 0.045
EYE_ROW = -0.10          # offsets below are in units of FACE_HALF_HEIGHT
MOUTH_ROW = 0.50
FOREHEAD_TOP = -0.85
FOREHEAD_BOTTOM = -0.35


@dataclass(frozen=True)
class SyntheticFaceParams:
    identity_seed: int
    age: int
    sex: str
    size: int = 64

    def __post_init__(self):
        if not 0 <= self.age <= MAX_SYNTHETIC_AGE:
            raise OutOfRange(f"synthetic age {self.age} outside [0, {MAX_SYNTHETIC_AGE}]")
        if self.sex not in SEXES:
            raise ValueError(f"unknown sex {self.sex!r}")
        if self.size < 16:
            raise ValueError("synthetic faces need size >= 16")


@dataclass(frozen=True)
class IdentityTraits:
    background: np.ndarray
    skin: np.ndarray
    eye_spacing: float
    mouth_width: float


def identity_traits(identity_seed: int) -> IdentityTraits:
    rng = np.random.default_rng(int(identity_seed) & 0xFFFFFFFFFFFFFFFF)
    return IdentityTraits(
        background=rng.uniform(-0.8, 0.1, size=3),
        skin=rng.uniform(-0.1, 0.7, size=3),
        eye_spacing=float(rng.uniform(0.20, 0.30)),
        mouth_width=float(rng.uniform(0.12, 0.30)),
    )


def face_aspect_ratio(age: int) -> float:
    return 0.95 + (0.70 - 0.95) * age / MAX_SYNTHETIC_AGE


def gender_band_width(age: int, sex: str) -> float:
    maturity = np.clip((age - MATURITY_START_AGE) / (MATURITY_END_AGE - MATURITY_START_AGE), 0.0, 1.0)
    return float(NEUTRAL_BAND_WIDTH + maturity * (BAND_WIDTH[sex] - NEUTRAL_BAND_WIDTH))


def wrinkle_rows(age: int, size: int) -> list[int]:
    """Pixel rows of the forehead strokes: one stroke per full decade of age."""
    n = age // 10
    if n == 0:
        return []
    cy, hb = FACE_CENTER_Y * size, FACE_HALF_HEIGHT * size
    top, bottom = cy + FOREHEAD_TOP * hb, cy + FOREHEAD_BOTTOM * hb
    return [int(round(r)) for r in np.linspace(top, bottom, n)]


def band_region(size: int) -> tuple[slice, slice]:
    return slice(0, int(math.ceil(BAND_HEIGHT * size))), slice(0, size)


def eye_regions(identity_seed: int, size: int) -> list[tuple[slice, slice]]:
    t = identity_traits(identity_seed)
    cy = FACE_CENTER_Y * size + EYE_ROW * FACE_HALF_HEIGHT * size
    r = EYE_RADIUS * size
    boxes = []
    for sign in (-1, 1):
        cx = size / 2 + sign * t.eye_spacing * size / 2
        boxes.append((slice(int(cy - r) - 1, int(cy + r) + 2), slice(int(cx - r) - 1, int(cx + r) + 2)))
    return boxes


def skin_region(size: int) -> tuple[slice, slice]:
    cy = int(FACE_CENTER_Y * size + 0.2 * FACE_HALF_HEIGHT * size)
    half = max(1, size // 32)
    return slice(cy - half, cy + half + 1), slice(size // 2 - half, size // 2 + half + 1)


def render_synthetic_face(params: SyntheticFaceParams) -> np.ndarray:
    """Render a deterministic cartoon face as an H x W x 3 array in [-1, 1].

    Identity (background, skin tone, eye spacing, mouth width) comes from the
    seed only. Age changes the face ellipse aspect ratio and the number of
    forehead strokes; sex sets the width of the band across the top of the
    image once the face has matured.
    """
    size = params.size
    t = identity_traits(params.identity_seed)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = t.background

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = FACE_CENTER_Y * size, size / 2
    hb = FACE_HALF_HEIGHT * size
    ha = face_aspect_ratio(params.age) * hb
    face = ((yy - cy) / hb) ** 2 + ((xx - cx) / ha) ** 2 <= 1.0
    img[face] = t.skin

    for row in wrinkle_rows(params.age, size):
        on_row = face & (np.arange(size)[:, None] == row)
        img[on_row] = WRINKLE_VALUE

    r = EYE_RADIUS * size
    ey = cy + EYE_ROW * hb
    for sign in (-1, 1):
        ex = cx + sign * t.eye_spacing * size / 2
        img[(yy - ey) ** 2 + (xx - ex) ** 2 <= r * r] = FEATURE_VALUE

    my = cy + MOUTH_ROW * hb
    mouth = (np.abs(yy - my) <= max(1.0, size / 64)) & (np.abs(xx - cx) <= t.mouth_width * size / 2)
    img[mouth] = FEATURE_VALUE

    rows, _ = band_region(size)
    width = gender_band_width(params.age, params.sex) * size
    left = int(round((size - width) / 2))
    right = int(round((size + width) / 2))
    img[rows, left:right] = BAND_VALUE
    return img.astype(np.float32)


def synthetic_records(count: int, seed: int = 0, identities: int | None = None,
                      age_range: Sequence[int] = (0, MAX_SYNTHETIC_AGE)) -> list[FaceRecord]:
    """Draw ``count`` synthetic records spread over ``identities`` people.

    Each identity gets ``count // identities`` faces (remainder to the first
    ones) with ages cycling through the age buckets that intersect
    ``age_range``. Sex alternates with identity index, so the set is balanced.
    """
    if count < 1:
        raise EmptySource("synthetic dataset asks for zero faces")
    identities = identities or count
    if not 1 <= identities <= count:
        raise ValueError("identities must lie in [1, count]")
    lo, hi = int(age_range[0]), int(age_range[1])
    if not 0 <= lo <= hi <= MAX_SYNTHETIC_AGE:
        raise OutOfRange(f"age_range {age_range} outside [0, {MAX_SYNTHETIC_AGE}]")
    buckets = []
    for g in range(N_GROUPS):
        g_lo = 0 if g == 0 else GROUP_UPPER_BOUNDS[g - 1] + 1
        g_hi = GROUP_UPPER_BOUNDS[g] if g < N_GROUPS - 1 else MAX_SYNTHETIC_AGE
        a, b = max(g_lo, lo), min(g_hi, hi)
        if a <= b:
            buckets.append((a, b))

    ss = np.random.SeedSequence(seed)
    id_seeds = ss.generate_state(identities, dtype=np.uint64)
    rng = np.random.default_rng(ss.spawn(1)[0])
    per_id = [count // identities + (1 if i < count % identities else 0) for i in range(identities)]
    records = []
    for i in range(identities):
        sex = SEXES[i % 2]
        offset = int(rng.integers(len(buckets)))
        for k in range(per_id[i]):
            a, b = buckets[(offset + k) % len(buckets)]
            age = int(rng.integers(a, b + 1))
            records.append(FaceRecord(source=f"synthetic:{int(id_seeds[i])}", age=age, sex=sex,
                                      group=age_to_group(age), identity=int(id_seeds[i])))
    return records


def record_image(record: FaceRecord, image_size: int) -> np.ndarray:
    if record.is_synthetic:
        seed = int(record.source.split(":", 1)[1])
        return render_synthetic_face(SyntheticFaceParams(seed, record.age, record.sex, image_size))
    return load_image_file(record.source, image_size)


def load_images(records: Iterable[FaceRecord], image_size: int) -> np.ndarray:
    images = [record_image(r, image_size) for r in records]
    if not images:
        return np.zeros((0, image_size, image_size, 3), dtype=np.float32)
    return np.stack(images)


def label_arrays(records: Sequence[FaceRecord]) -> np.ndarray:
    """Return an ``(n, 2)`` int array of (age group, sex index) rows."""
    return np.array([[r.group, r.sex_index] for r in records], dtype=np.int64).reshape(-1, 2)


def scan_directory(directory) -> list[FaceRecord]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptySource(f"{directory} is not a directory")
    records = []
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            records.append(parse_face_filename(str(p)))
        except MalformedName:
            warnings.warn(f"skipping malformed file name {p.name}", stacklevel=2)
    if not records:
        raise EmptySource(f"no usable face images in {directory}")
    return records


# ---------------------------------------------------------------------------
# Splitting


def build_dataset(records: Sequence[FaceRecord], split=(0.7, 0.15, 0.15), seed: int = 0):
    """Shuffle and split records into (train, val, test), stratified by (sex, group).

    Every populated stratum keeps at least one record in train. Global split
    sizes follow the requested fractions with largest-remainder rounding.
    """
    records = list(records)
    if not records:
        raise EmptySource("no records to split")
    fractions = np.asarray(split, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {split}")

    n = len(records)
    targets = _largest_remainder(fractions * n)
    rng = np.random.default_rng(seed)

    strata = defaultdict(list)
    for idx in rng.permutation(n):
        r = records[idx]
        strata[(r.sex, r.group)].append(idx)

    assigned = [[], [], []]
    leftovers = []
    for key in sorted(strata):
        members = strata[key]
        quota = [int(math.floor(f * len(members))) for f in fractions]
        quota[0] = max(1, quota[0])
        while sum(quota) > len(members):
            quota[2 if quota[2] else 1] -= 1
        pos = 0
        for s in range(3):
            assigned[s].extend(members[pos:pos + quota[s]])
            pos += quota[s]
        leftovers.extend(members[pos:])

    leftovers = [leftovers[i] for i in rng.permutation(len(leftovers))]
    for s in (1, 2, 0):
        need = max(0, targets[s] - len(assigned[s]))
        assigned[s].extend(leftovers[:need])
        leftovers = leftovers[need:]
    assigned[0].extend(leftovers)

    out = tuple([records[i] for i in sorted(part)] for part in assigned)
    if not out[1] or not out[2]:
        warnings.warn(f"degenerate split of {n} record(s): sizes {tuple(map(len, out))}", stacklevel=2)
    return out


def _largest_remainder(quotas: np.ndarray) -> list[int]:
    base = np.floor(quotas).astype(int)
    short = int(round(quotas.sum())) - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    for i in order[:short]:
        base[i] += 1
    return [int(b) for b in base]


def select_eval_inputs(splits, group: int = 0, exclude_eval_inputs: bool = True):
    """Pick young faces used as simulation inputs.

    With ``exclude_eval_inputs`` the inputs come from the test split only, so
    they were never seen in training. Otherwise every record in ``group`` is
    eligible.
    """
    train, val, test = splits
    pool = test if exclude_eval_inputs else [*train, *val, *test]
    return [r for r in pool if r.group == group]


# ---------------------------------------------------------------------------
# Manifest


def write_manifest(path, splits, meta: dict | None = None) -> None:
    rows = []
    for name, part in zip(("train", "val", "test"), splits):
        rows.extend({**r.to_dict(), "split": name} for r in part)
    doc = {"meta": meta or {}, "records": rows}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path):
    doc = json.loads(Path(path).read_text())
    parts = {"train": [], "val": [], "test": []}
    for row in doc.get("records", []):
        split = row.get("split", "train")
        parts[split].append(FaceRecord.from_dict(row))
    if not any(parts.values()):
        raise EmptySource(f"manifest {path} has no records")
    return parts["train"], parts["val"], parts["test"]
