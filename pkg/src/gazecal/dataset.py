"""Per-person sample stores, preparation and synthetic data.

A sample couples a normalized grayscale eye image (36x60, uint8) with
the head angle (yaw, pitch) in radians, the on-screen gaze target in
screen-normalized coordinates (both axes in [0, 1]) and the eye side.

On-disk store format (one ``<person_id>.gzd`` file per person):

    bytes 0..3   magic ``GZD1``
    bytes 4..7   sample count, little-endian uint32
    then per sample, 2177 bytes each:
        1 byte    eye side (0 = left, 1 = right)
        2160 B    image, row-major uint8, 36 rows of 60
        8 B       head angle, two little-endian float32 (yaw, pitch)
        8 B       gaze target, two little-endian float32 (x, y)

Synthetic persons are rendered from a documented map so tests can
recover the latent gaze from the image alone: a dark anti-aliased
pupil disk (radius 4 px, intensity 30) on a bright background (230).
For a left eye the disk center is

    cx = 6 + 48 * u_x + 8 * yaw        cy = 4 + 28 * u_y + 8 * pitch

with u the latent gaze in [0.1, 0.9]^2 and (yaw, pitch) the head angle
in [-0.3, 0.3]^2. Right-eye images are stored pre-mirrored: they show
the horizontal flip of the left-eye rendering for (u, (-yaw, pitch)),
so flipping a right-eye image and negating its yaw reproduces the
left-eye map exactly. The stored gaze is u plus a per-person bias plus
Gaussian noise, clipped to [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

__all__ = [
    "EYE_SIDES",
    "IMAGE_SHAPE",
    "PARTITION_COUNT",
    "PARTITION_SIZE",
    "PREPARED_SIZE",
    "NormalizedSample",
    "PartitionSet",
    "PersonDataset",
    "SyntheticPersonSpec",
    "dataset_fingerprint",
    "generate_synthetic_person",
    "load_dataset",
    "load_partitions",
    "load_person",
    "partition_person",
    "person_seed",
    "prepare_person",
    "pupil_center",
    "render_eye",
    "save_dataset",
    "save_partitions",
    "save_person",
    "to_training_arrays",
]

IMAGE_SHAPE = (36, 60)
EYE_SIDES = ("left", "right")
PREPARED_SIZE = 3000
_PER_SIDE = 1500
PARTITION_COUNT = 10
PARTITION_SIZE = 300

_MAGIC = b"GZD1"
_RECORD_DTYPE = np.dtype(
    [
        ("side", "u1"),
        ("image", "u1", IMAGE_SHAPE),
        ("head", "<f4", (2,)),
        ("gaze", "<f4", (2,)),
    ]
)
assert _RECORD_DTYPE.itemsize == 2177


@dataclass
class NormalizedSample:
    """One normalized eye image with its labels."""

    eye_image: np.ndarray
    head_angle: np.ndarray
    gaze: np.ndarray
    eye_side: str
    person_id: str

    def __post_init__(self):
        img = np.asarray(self.eye_image)
        if img.shape != IMAGE_SHAPE or img.dtype != np.uint8:
            raise ValidationError(
                f"eye image must be uint8 {IMAGE_SHAPE}, got {img.dtype} {img.shape}"
            )
        self.eye_image = img
        self.head_angle = self._label(self.head_angle, "head angle")
        self.gaze = self._label(self.gaze, "gaze")
        if self.gaze.min() < 0.0 or self.gaze.max() > 1.0:
            raise ValidationError(f"gaze must lie in [0, 1], got {self.gaze}")
        if self.eye_side not in EYE_SIDES:
            raise ValidationError(f"eye side must be one of {EYE_SIDES}, got {self.eye_side!r}")

    @staticmethod
    def _label(value, name: str) -> np.ndarray:
        arr = np.asarray(value, dtype=np.float32)
        if arr.shape != (2,):
            raise ValidationError(f"{name} must have shape (2,), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} contains non-finite values")
        return arr


@dataclass
class PersonDataset:
    """All samples of one person, in a reproducible order."""

    person_id: str
    samples: list

    def __post_init__(self):
        if not self.person_id:
            raise ValidationError("person id must be non-empty")

    def __len__(self) -> int:
        return len(self.samples)

    def count_side(self, side: str) -> int:
        if side not in EYE_SIDES:
            raise ValidationError(f"eye side must be one of {EYE_SIDES}, got {side!r}")
        return sum(1 for s in self.samples if s.eye_side == side)


@dataclass
class PartitionSet:
    """Disjoint index partitions of one prepared person."""

    person_id: str
    partitions: list

    def __post_init__(self):
        if len(self.partitions) != PARTITION_COUNT:
            raise ValidationError(
                f"expected {PARTITION_COUNT} partitions, got {len(self.partitions)}"
            )
        cleaned = []
        seen = np.zeros(PREPARED_SIZE, dtype=bool)
        for i, part in enumerate(self.partitions):
            arr = np.asarray(part, dtype=np.int64)
            if arr.shape != (PARTITION_SIZE,):
                raise ValidationError(f"partition {i} must hold {PARTITION_SIZE} indices")
            if arr.min() < 0 or arr.max() >= PREPARED_SIZE:
                raise ValidationError(f"partition {i} has out-of-range indices")
            if seen[arr].any():
                raise ValidationError(f"partition {i} overlaps an earlier partition")
            seen[arr] = True
            cleaned.append(np.sort(arr))
        if not seen.all():
            raise ValidationError("partitions do not cover all indices")
        self.partitions = cleaned

    def rest(self, index: int) -> np.ndarray:
        """All indices outside partition ``index``, sorted."""
        if not 0 <= index < PARTITION_COUNT:
            raise ValidationError(f"partition index must be in [0, {PARTITION_COUNT})")
        mask = np.ones(PREPARED_SIZE, dtype=bool)
        mask[self.partitions[index]] = False
        return np.nonzero(mask)[0]


@dataclass(frozen=True)
class SyntheticPersonSpec:
    """Parameters of one synthetic person."""

    person_id: str
    bias: tuple = (0.0, 0.0)
    noise_sigma: float = 0.0
    sample_count: int = PREPARED_SIZE

    def __post_init__(self):
        if not self.person_id:
            raise ValidationError("person id must be non-empty")
        bias = tuple(float(b) for b in self.bias)
        if len(bias) != 2 or not all(np.isfinite(bias)):
            raise ValidationError(f"bias must be two finite numbers, got {self.bias}")
        object.__setattr__(self, "bias", bias)
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0.0:
            raise ValidationError("noise sigma must be non-negative")
        if self.sample_count < 1:
            raise ValidationError("sample count must be positive")


def person_seed(master_seed: int, person_id: str, purpose: str = "") -> int:
    """Stable per-person seed derived from a master seed.

    Hashing keeps seeds for different persons and purposes independent
    of enumeration order.
    """
    digest = hashlib.sha256(
        f"{int(master_seed)}:{person_id}:{purpose}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Store input/output


def save_person(path, person: PersonDataset) -> None:
    """Write one person's samples as a GZD1 file."""
    records = np.empty(len(person.samples), dtype=_RECORD_DTYPE)
    for i, sample in enumerate(person.samples):
        records[i]["side"] = EYE_SIDES.index(sample.eye_side)
        records[i]["image"] = sample.eye_image
        records[i]["head"] = sample.head_angle
        records[i]["gaze"] = sample.gaze
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(person.samples)))
        fh.write(records.tobytes())


def load_person(path) -> PersonDataset:
    """Read one GZD1 file; the person id is the file stem."""
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a GZD1 store")
    (count,) = struct.unpack("<I", data[4:8])
    expected = 8 + count * _RECORD_DTYPE.itemsize
    if len(data) != expected:
        bad = min((len(data) - 8) // _RECORD_DTYPE.itemsize, count - 1) if count else 0
        raise FormatError(
            f"{path}: truncated or malformed record at index {max(bad, 0)} "
            f"(file holds {len(data)} bytes, header promises {expected})"
        )
    records = np.frombuffer(data, dtype=_RECORD_DTYPE, count=count, offset=8)

    sides = records["side"]
    bad = np.nonzero(sides > 1)[0]
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]}: invalid eye side {sides[bad[0]]}")
    heads = records["head"]
    bad = np.nonzero(~np.isfinite(heads).all(axis=1))[0]
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]}: non-finite head angle")
    gazes = records["gaze"]
    bad = np.nonzero(
        ~np.isfinite(gazes).all(axis=1) | (gazes < 0.0).any(axis=1) | (gazes > 1.0).any(axis=1)
    )[0]
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]}: gaze outside [0, 1]")

    person_id = path.stem
    samples = [
        NormalizedSample(
            eye_image=records[i]["image"].copy(),
            head_angle=heads[i].copy(),
            gaze=gazes[i].copy(),
            eye_side=EYE_SIDES[sides[i]],
            person_id=person_id,
        )
        for i in range(count)
    ]
    return PersonDataset(person_id=person_id, samples=samples)


def save_dataset(directory, persons) -> None:
    """Write each person to ``<directory>/<person_id>.gzd``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for person in persons:
        if not all(c.isalnum() or c in "_-" for c in person.person_id):
            raise ValidationError(
                f"person id {person.person_id!r} is not filesystem-safe"
            )
        save_person(directory / f"{person.person_id}.gzd", person)


def load_dataset(directory) -> list:
    """Load every ``*.gzd`` file in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory}: not a directory")
    return [load_person(p) for p in sorted(directory.glob("*.gzd"))]


def dataset_fingerprint(persons) -> str:
    """Order-independent content hash of a list of persons."""
    digest = hashlib.sha256()
    for person in sorted(persons, key=lambda p: p.person_id):
        digest.update(person.person_id.encode("utf-8"))
        digest.update(struct.pack("<I", len(person.samples)))
        for sample in person.samples:
            digest.update(bytes([EYE_SIDES.index(sample.eye_side)]))
            digest.update(sample.eye_image.tobytes())
            digest.update(sample.head_angle.tobytes())
            digest.update(sample.gaze.tobytes())
    return digest.hexdigest()


def save_partitions(directory, partitions: PartitionSet, seed=None) -> None:
    """Write a person's partitions as ``<person_id>.partitions.json``."""
    directory = Path(directory)
    payload = {
        "person_id": partitions.person_id,
        "seed": seed,
        "partitions": [p.tolist() for p in partitions.partitions],
    }
    path = directory / f"{partitions.person_id}.partitions.json"
    path.write_text(json.dumps(payload))


def load_partitions(directory, person_id: str):
    """Load a person's partition file, or None when absent."""
    path = Path(directory) / f"{person_id}.partitions.json"
    if not path.exists():
        return None
    try:
        payload = json.loads(path.read_text())
        partitions = PartitionSet(
            person_id=payload["person_id"], partitions=payload["partitions"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed partition file: {exc}") from exc
    if partitions.person_id != person_id:
        raise FormatError(
            f"{path}: partition file names person {partitions.person_id!r}"
        )
    return partitions


# ---------------------------------------------------------------------------
# Preparation


def prepare_person(raw: PersonDataset, seed: int) -> PersonDataset:
    """Balance a person's raw samples into a fixed-size training set.

    Draws up to 1500 samples per eye side without replacement, then
    pads the pool to 3000 by duplicating uniformly with replacement,
    and shuffles. Duplicated entries reference the same sample object.
    A person with no samples for one of the sides cannot be balanced.
    """
    left = [s for s in raw.samples if s.eye_side == "left"]
    right = [s for s in raw.samples if s.eye_side == "right"]
    if not left or not right:
        raise ValidationError(
            f"person {raw.person_id!r} needs samples for both eyes "
            f"(left={len(left)}, right={len(right)})"
        )
    rng = np.random.default_rng(seed)
    pool = []
    for side in (left, right):
        take = min(_PER_SIDE, len(side))
        idx = rng.choice(len(side), size=take, replace=False)
        pool.extend(side[i] for i in idx)
    if len(pool) < PREPARED_SIZE:
        extra = rng.integers(0, len(pool), size=PREPARED_SIZE - len(pool))
        pool.extend(pool[i] for i in extra)
    order = rng.permutation(PREPARED_SIZE)
    return PersonDataset(person_id=raw.person_id, samples=[pool[i] for i in order])


def partition_person(prepared: PersonDataset, seed: int) -> PartitionSet:
    """Split a prepared person's indices into 10 random 300-blocks."""
    if len(prepared.samples) != PREPARED_SIZE:
        raise ValidationError(
            f"person {prepared.person_id!r} has {len(prepared.samples)} samples, "
            f"expected {PREPARED_SIZE}; run preparation first"
        )
    perm = np.random.default_rng(seed).permutation(PREPARED_SIZE)
    parts = [
        perm[i * PARTITION_SIZE : (i + 1) * PARTITION_SIZE] for i in range(PARTITION_COUNT)
    ]
    return PartitionSet(person_id=prepared.person_id, partitions=parts)


# ---------------------------------------------------------------------------
# Synthetic persons

_BACKGROUND = 230.0
_PUPIL = 30.0
_PUPIL_RADIUS = 4.0
_GAZE_LOW, _GAZE_HIGH = 0.1, 0.9
_ANGLE_RANGE = 0.3


def pupil_center(u, head_angle, side: str):
    """Disk center (cx, cy) in pixels for latent gaze u and head angle."""
    ux, uy = float(u[0]), float(u[1])
    yaw, pitch = float(head_angle[0]), float(head_angle[1])
    if side == "left":
        cx = 6.0 + 48.0 * ux + 8.0 * yaw
    elif side == "right":
        # Mirror of the left-eye map rendered for (u, (-yaw, pitch)).
        cx = (IMAGE_SHAPE[1] - 1.0) - (6.0 + 48.0 * ux + 8.0 * (-yaw))
    else:
        raise ValidationError(f"eye side must be one of {EYE_SIDES}, got {side!r}")
    cy = 4.0 + 28.0 * uy + 8.0 * pitch
    return cx, cy


def render_eye(u, head_angle, side: str) -> np.ndarray:
    """Render the synthetic eye image for a latent gaze and head angle."""
    cx, cy = pupil_center(u, head_angle, side)
    ys = np.arange(IMAGE_SHAPE[0], dtype=np.float64)[:, None]
    xs = np.arange(IMAGE_SHAPE[1], dtype=np.float64)[None, :]
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    # Linear edge over one pixel approximates an anti-aliased disk rim.
    coverage = np.clip(_PUPIL_RADIUS + 0.5 - dist, 0.0, 1.0)
    values = _BACKGROUND + (_PUPIL - _BACKGROUND) * coverage
    return np.floor(values + 0.5).astype(np.uint8)


def generate_synthetic_person(spec: SyntheticPersonSpec, seed: int) -> PersonDataset:
    """Generate one synthetic person from a single seeded stream.

    Per sample, in order: latent gaze u ~ U[0.1, 0.9]^2, head angle
    ~ U[-0.3, 0.3]^2, two standard normal draws scaled by the noise
    sigma. Eye sides alternate left, right, left, ... The stored gaze
    is clip(u + bias + noise, 0, 1); with zero bias and zero noise it
    equals the latent u exactly (up to float32 storage).
    """
    rng = np.random.default_rng(seed)
    bias = np.asarray(spec.bias, dtype=np.float64)
    samples = []
    for i in range(spec.sample_count):
        u = rng.uniform(_GAZE_LOW, _GAZE_HIGH, 2)
        head = rng.uniform(-_ANGLE_RANGE, _ANGLE_RANGE, 2)
        noise = rng.standard_normal(2) * spec.noise_sigma
        side = EYE_SIDES[i % 2]
        gaze = np.clip(u + bias + noise, 0.0, 1.0)
        samples.append(
            NormalizedSample(
                eye_image=render_eye(u, head, side),
                head_angle=head.astype(np.float32),
                gaze=gaze.astype(np.float32),
                eye_side=side,
                person_id=spec.person_id,
            )
        )
    return PersonDataset(person_id=spec.person_id, samples=samples)


# ---------------------------------------------------------------------------
# Model-facing arrays


def to_training_arrays(samples, dtype=np.float64):
    """Stack samples into network inputs, canonicalizing eye sides.

    Right-eye samples are flipped horizontally and their yaw negated so
    one regressor serves both eyes. Images are scaled to [0, 1].
    Returns (images B x 1 x 36 x 60, head angles B x 2, gaze B x 2).
    """
    n = len(samples)
    if n == 0:
        raise ValidationError("no samples to convert")
    images = np.empty((n, 1) + IMAGE_SHAPE, dtype=dtype)
    heads = np.empty((n, 2), dtype=dtype)
    gazes = np.empty((n, 2), dtype=dtype)
    for i, sample in enumerate(samples):
        img = sample.eye_image
        yaw, pitch = float(sample.head_angle[0]), float(sample.head_angle[1])
        if sample.eye_side == "right":
            img = img[:, ::-1]
            yaw = -yaw
        images[i, 0] = img
        heads[i] = (yaw, pitch)
        gazes[i] = sample.gaze
    images /= 255.0
    return images, heads, gazes
