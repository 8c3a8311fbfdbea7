"""Dataset handling: directory ingestion, ROI preprocessing, subject-disjoint
splits, balanced pair/episode sampling, and an offline synthetic generator.

Directory layout (both real and synthetic trees):

    root/<subject_id>/<session_id>/<palm>_<instance>.png   palm in {L, R}

8-bit grayscale PNG (PGM also accepted). A manifest.txt at the root records
provenance (``real`` or ``synthetic:<seed>``) and counts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

ROI_SIZE = 128

_IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True, eq=False)
class Sample:
    """One enrollment instance: both palms of one subject in one session."""

    subject_id: str
    session_id: int
    left_image: np.ndarray   # (128, 128) float32 in [0, 1]
    right_image: np.ndarray


@dataclass(frozen=True, eq=False)
class PairExample:
    sample_a: Sample
    sample_b: Sample
    genuine: bool

    def __post_init__(self):
        if self.sample_a is self.sample_b:
            raise ValueError("pair must use two distinct samples")
        same = self.sample_a.subject_id == self.sample_b.subject_id
        if self.genuine != same:
            raise ValueError(
                f"label {self.genuine} inconsistent with subjects "
                f"{self.sample_a.subject_id!r} and {self.sample_b.subject_id!r}"
            )


@dataclass
class Dataset:
    subjects: dict[str, list[Sample]]
    provenance: str = "real"
    seed: int | None = None

    @property
    def subject_ids(self) -> list[str]:
        return list(self.subjects)

    @property
    def num_samples(self) -> int:
        return sum(len(s) for s in self.subjects.values())

    def all_samples(self) -> list[Sample]:
        out: list[Sample] = []
        for sid in self.subjects:
            out.extend(self.subjects[sid])
        return out

    def min_genuine_pairs(self) -> int:
        """Smallest per-subject count of distinct same-subject pairs."""
        return min(math.comb(len(s), 2) for s in self.subjects.values())


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


# -- preprocessing -----------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, out_size: int) -> np.ndarray:
    """Separable bilinear resize, half-pixel sample convention.

    An input already at the target size maps through exactly unchanged.
    """
    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, rf = axis(img.shape[0], out_size)
    c0, c1, cf = axis(img.shape[1], out_size)
    img = img.astype(np.float64, copy=False)
    top = img[r0][:, c0] * (1.0 - cf) + img[r0][:, c1] * cf
    bottom = img[r1][:, c0] * (1.0 - cf) + img[r1][:, c1] * cf
    return top * (1.0 - rf)[:, None] + bottom * rf[:, None]


def roi_preprocess(image: np.ndarray) -> np.ndarray:
    """Grayscale image of any extent -> (128, 128) float32 in [0, 1].

    Center-crops to the largest centered square, bilinear-resizes, and scales
    integer pixel values by their dtype maximum (floats are clipped to [0, 1]).
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a nonempty 2-D grayscale image, got shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float64) / np.iinfo(img.dtype).max
    elif np.issubdtype(img.dtype, np.floating):
        img = np.clip(img.astype(np.float64), 0.0, 1.0)
    else:
        raise ValueError(f"unsupported image dtype {img.dtype}")
    h, w = img.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    img = img[top : top + side, left : left + side]
    if side != ROI_SIZE:
        img = _resize_bilinear(img, ROI_SIZE)
    return img.astype(np.float32)


# -- ingestion ---------------------------------------------------------------------


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def _parse_manifest(root: Path) -> tuple[str, int | None]:
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        warnings.warn(f"no manifest.txt under {root}; assuming real provenance")
        return "real", None
    provenance, seed = "real", None
    for line in manifest.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line or "=" not in line:
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "provenance":
            if value.startswith("synthetic:"):
                provenance = "synthetic"
                seed = int(value.split(":", 1)[1])
            else:
                provenance = value
    return provenance, seed


def load_dataset(root_path) -> Dataset:
    """Walk the documented layout into a Dataset of preprocessed Samples.

    Instances missing either palm are skipped with a warning; subjects left
    with fewer than two samples (no genuine pair possible) are dropped.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    provenance, seed = _parse_manifest(root)
    subjects: dict[str, list[Sample]] = {}
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        samples: list[Sample] = []
        for session_dir in sorted(
            (p for p in subject_dir.iterdir() if p.is_dir()), key=lambda p: p.name
        ):
            try:
                session_id = int(session_dir.name)
            except ValueError:
                warnings.warn(f"skipping non-numeric session directory {session_dir}")
                continue
            sides: dict[str, dict[str, Path]] = {"L": {}, "R": {}}
            for f in sorted(session_dir.iterdir()):
                if f.suffix.lower() not in _IMAGE_SUFFIXES or not f.is_file():
                    continue
                stem = f.stem
                if "_" not in stem or stem.split("_", 1)[0] not in sides:
                    warnings.warn(f"skipping unrecognized file name {f}")
                    continue
                palm, instance = stem.split("_", 1)
                if instance in sides[palm]:
                    warnings.warn(f"duplicate instance {instance} for palm {palm} in {session_dir}")
                    continue
                sides[palm][instance] = f
            for instance in sorted(set(sides["L"]) | set(sides["R"])):
                if instance not in sides["L"] or instance not in sides["R"]:
                    warnings.warn(
                        f"skipping {subject_dir.name}/{session_dir.name} instance {instance}: "
                        "missing palm side"
                    )
                    continue
                samples.append(
                    Sample(
                        subject_id=subject_dir.name,
                        session_id=session_id,
                        left_image=roi_preprocess(_read_gray(sides["L"][instance])),
                        right_image=roi_preprocess(_read_gray(sides["R"][instance])),
                    )
                )
        if len(samples) >= 2:
            subjects[subject_dir.name] = samples
        elif samples:
            warnings.warn(
                f"dropping subject {subject_dir.name}: only {len(samples)} usable sample(s)"
            )
    if not subjects:
        raise ValueError(f"no usable subjects under {root}")
    return Dataset(subjects, provenance=provenance, seed=seed)


# -- splitting and sampling ----------------------------------------------------------


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Subject-level partition: seed-shuffled ids, first ceil(f*S) to train."""
    ids = sorted(dataset.subjects)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 subjects to split, have {len(ids)}")
    rng = np.random.default_rng(spec.seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_train = math.ceil(spec.train_fraction * len(ids))
    train_ids, test_ids = shuffled[:n_train], shuffled[n_train:]
    if not train_ids or not test_ids:
        raise ValueError(
            f"split of {len(ids)} subjects at fraction {spec.train_fraction} "
            "leaves one side empty"
        )
    def subset(chosen: list[str]) -> Dataset:
        return Dataset(
            {sid: dataset.subjects[sid] for sid in sorted(chosen)},
            provenance=dataset.provenance,
            seed=dataset.seed,
        )
    return subset(train_ids), subset(test_ids)


def _genuine_pair(dataset: Dataset, eligible: list[str], rng: np.random.Generator) -> PairExample:
    sid = eligible[rng.integers(len(eligible))]
    samples = dataset.subjects[sid]
    i, j = rng.choice(len(samples), size=2, replace=False)
    return PairExample(samples[i], samples[j], genuine=True)


def _imposter_pair(dataset: Dataset, ids: list[str], rng: np.random.Generator) -> PairExample:
    a, b = rng.choice(len(ids), size=2, replace=False)
    sa = dataset.subjects[ids[a]]
    sb = dataset.subjects[ids[b]]
    return PairExample(sa[rng.integers(len(sa))], sb[rng.integers(len(sb))], genuine=False)


def sample_pairs(dataset: Dataset, per_class: int, rng: np.random.Generator) -> list[PairExample]:
    """per_class genuine pairs followed by per_class imposter pairs."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    ids = list(dataset.subjects)
    if len(ids) < 2:
        raise ValueError(f"need at least 2 subjects for imposter pairs, have {len(ids)}")
    eligible = [sid for sid in ids if len(dataset.subjects[sid]) >= 2]
    if not eligible:
        raise ValueError("no subject has two samples to form a genuine pair")
    pairs = [_genuine_pair(dataset, eligible, rng) for _ in range(per_class)]
    pairs += [_imposter_pair(dataset, ids, rng) for _ in range(per_class)]
    return pairs


def sample_episode(dataset: Dataset, n: int, rng: np.random.Generator) -> list[PairExample]:
    """One balanced 2-way n-shot task: n genuine + n imposter pairs, shuffled."""
    pairs = sample_pairs(dataset, n, rng)
    return [pairs[i] for i in rng.permutation(len(pairs))]


# -- synthetic generator -------------------------------------------------------------

_BASE_SIZE = 256
_BG_LEVEL = 0.88
_VEIN_CONTRAST = 0.52


def _stamp_disk(darkness: np.ndarray, y: float, x: float, radius: float) -> None:
    size = darkness.shape[0]
    y0, y1 = max(0, int(y - radius)), min(size, int(y + radius) + 2)
    x0, x1 = max(0, int(x - radius)), min(size, int(x + radius) + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (yy - y) ** 2 + (xx - x) ** 2 <= radius * radius
    patch = darkness[y0:y1, x0:x1]
    np.maximum(patch, mask.astype(patch.dtype), out=patch)


def _render_base(rng: np.random.Generator) -> np.ndarray:
    """One palm's vein layout: branching random walks, dark on light."""
    darkness = np.zeros((_BASE_SIZE, _BASE_SIZE))
    walks: list[tuple[np.ndarray, float, float, int]] = []
    for _ in range(int(rng.integers(3, 7))):
        pos = rng.uniform(0.12 * _BASE_SIZE, 0.88 * _BASE_SIZE, size=2)
        walks.append((pos, rng.uniform(0.0, 2.0 * np.pi), float(rng.uniform(2.0, 5.0)), 170))
    drawn = 0
    while walks and drawn < 24:
        pos, angle, width, steps = walks.pop()
        drawn += 1
        for _ in range(steps):
            _stamp_disk(darkness, pos[0], pos[1], width / 2.0)
            angle += float(np.clip(rng.normal(0.0, 0.11), -0.22, 0.22))
            pos = pos + 2.0 * np.array([np.sin(angle), np.cos(angle)])
            if not (4.0 <= pos[0] < _BASE_SIZE - 4.0 and 4.0 <= pos[1] < _BASE_SIZE - 4.0):
                break
            if width >= 2.6 and len(walks) < 12 and rng.random() < 0.015:
                fork = angle + float(rng.choice([-1.0, 1.0])) * rng.uniform(0.45, 0.95)
                walks.append((pos.copy(), fork, max(2.0, width * 0.72), 110))
    darkness = ndimage.gaussian_filter(darkness, sigma=1.4)
    return np.clip(_BG_LEVEL - _VEIN_CONTRAST * darkness, 0.0, 1.0)


def _perturb(base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-sample capture variation: pose jitter, lighting, sensor noise."""
    angle = np.deg2rad(rng.uniform(-5.0, 5.0))
    shift = rng.uniform(-6.0, 6.0, size=2)
    cos, sin = np.cos(angle), np.sin(angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    center = np.array([(base.shape[0] - 1) / 2.0, (base.shape[1] - 1) / 2.0])
    offset = center - rot @ (center + shift)
    img = ndimage.affine_transform(base, rot, offset=offset, order=1, mode="constant", cval=_BG_LEVEL)
    img = img * (1.0 + rng.uniform(-0.10, 0.10))
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    num_subjects: int,
    sessions: int,
    instances_per_session: int,
    seed: int,
    out_path,
) -> Dataset:
    """Write a deterministic synthetic dataset tree and load it back.

    Each subject's left and right palms get independent base vein layouts;
    every sample is an independently perturbed capture of those layouts.
    Returning the loader's view keeps the on-disk tree and the in-memory
    Dataset exactly consistent (including PNG quantization).
    """
    for name, value in (
        ("num_subjects", num_subjects),
        ("sessions", sessions),
        ("instances_per_session", instances_per_session),
    ):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    for s in range(num_subjects):
        subject_id = f"s{s + 1:03d}"
        bases = {
            palm: _render_base(np.random.default_rng([seed, 0, s, p]))
            for p, palm in enumerate(("L", "R"))
        }
        for sess in range(1, sessions + 1):
            session_dir = root / subject_id / str(sess)
            session_dir.mkdir(parents=True, exist_ok=True)
            for inst in range(1, instances_per_session + 1):
                for p, palm in enumerate(("L", "R")):
                    rng = np.random.default_rng([seed, 1, s, p, sess, inst])
                    img = roi_preprocess(_perturb(bases[palm], rng))
                    pixels = np.round(img * 255.0).astype(np.uint8)
                    Image.fromarray(pixels, mode="L").save(session_dir / f"{palm}_{inst}.png")
    total = num_subjects * sessions * instances_per_session
    (root / "manifest.txt").write_text(
        f"provenance=synthetic:{seed}\n"
        f"subjects={num_subjects}\n"
        f"sessions={sessions}\n"
        f"instances={instances_per_session}\n"
        f"samples={total}\n"
    )
    return load_dataset(root)
