"""Synthetic knee phantoms, CSV manifests, and progression-balanced batching.

A phantom is two bright bone silhouettes (femur above, tibia below) separated
by a dark joint gap. KL grade controls gap width, osteophyte bumps at the
joint margins and a subchondral sclerosis band. Every patient also carries a
hidden within-grade severity in [0, 1]; it shifts the rendered features inside
the grade's ranges and is correlated with whether the grade increases over the
next 12 months, so progression is partly visible in the current image.

Coordinates are 1-based ``(row, col)`` pixel centres throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import ndtr, ndtri

from kneerisk.config import ConfigError, DatasetConfig, PhantomParams

N_LANDMARKS = 16
N_GRADES = 5
PAIR_GAP_MONTHS = 12

MANIFEST_HEADER = ["patient_id", "timepoint_months", "laterality", "kl_grade", "image_path"] + [
    f"lm{j}_{axis}" for j in range(1, N_LANDMARKS + 1) for axis in ("r", "c")
]
SPLIT_HEADER = ["patient_id", "split"]
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """Base class for manifest validation failures; names the offending record."""

    def __init__(self, record: str, message: str):
        super().__init__(f"record {record}: {message}")
        self.record = record


class MissingImageError(ManifestError):
    pass


class NonSquareImageError(ManifestError):
    pass


class GradeError(ManifestError):
    pass


class LandmarkBoundsError(ManifestError):
    pass


class BatchConfigError(ValueError):
    pass


@dataclass
class Sample:
    patient_id: str
    x0: np.ndarray
    x12: np.ndarray
    y0: int
    y12: int
    landmarks0: np.ndarray | None = None  # (16, 2) float, 1-based (row, col)
    has_landmarks: bool = False
    t0_months: int = 0

    @property
    def progressed(self) -> bool:
        return self.y12 > self.y0


@dataclass
class Record:
    patient_id: str
    timepoint_months: int
    laterality: str
    kl_grade: int
    image_path: str
    landmarks: np.ndarray | None = None


@dataclass
class PairDataset:
    samples: list
    splits: dict = field(default_factory=dict)  # patient_id -> split name
    image_size: int = 0

    def split(self, name: str, months: Sequence[int] | None = None) -> list:
        out = [s for s in self.samples if self.splits.get(s.patient_id) == name]
        if months is not None:
            out = [s for s in out if s.t0_months in months]
        return out


# ---------------------------------------------------------------- phantoms


def _check_grade(grade: int) -> None:
    if int(grade) != grade or not 0 <= grade < N_GRADES:
        raise ValueError(f"KL grade must be an integer in 0..4, got {grade!r}")


def _draw_geometry(rng: np.random.Generator, size: int) -> dict:
    s = size / 64.0
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.5 * s)
    texture /= texture.std() + 1e-12
    return {
        "center_row": size / 2 + rng.uniform(-2.0, 2.0) * s,
        "lo_col": rng.uniform(5.0, 9.0) * s,
        "hi_col": size - rng.uniform(5.0, 9.0) * s,
        "dome": rng.uniform(1.0, 2.5) * s,
        "bone": rng.uniform(0.6, 0.75),
        "background": rng.uniform(0.08, 0.15),
        "texture": 0.025 * texture,
        "osteophyte_sites": rng.permutation(4),
        "osteophyte_jitter": rng.uniform(-1.0, 1.0, size=(8, 2)) * s,
    }


def _features(grade: int, severity: float, params: PhantomParams) -> tuple[float, int, float]:
    """Map (grade, within-grade severity) to gap width, osteophyte count, sclerosis."""
    lo, hi = params.joint_space_width_by_grade[grade]
    gap = hi - severity * (hi - lo)
    olo, ohi = params.osteophyte_count_by_grade[grade]
    n_ost = int(olo + min(math.floor(severity * (ohi - olo + 1)), ohi - olo))
    slo, shi = params.sclerosis_intensity_by_grade[grade]
    return float(gap), n_ost, float(slo + severity * (shi - slo))


def _render(grade: int, severity: float, geom: dict, noise_rng: np.random.Generator,
            params: PhantomParams) -> tuple[np.ndarray, np.ndarray]:
    size = params.image_size
    s = size / 64.0
    gap, n_ost, sclerosis = _features(grade, severity, params)
    rows = np.arange(1, size + 1, dtype=float)[:, None]
    cols = np.arange(1, size + 1, dtype=float)[None, :]
    lo, hi = geom["lo_col"], geom["hi_col"]

    def femur_edge(c):
        return geom["center_row"] - gap / 2 + geom["dome"] * np.sin(np.pi * np.clip((c - lo) / (hi - lo), 0, 1))

    e_f = femur_edge(cols)
    e_t = e_f + gap
    colmask = np.clip(cols - lo + 0.5, 0, 1) * np.clip(hi - cols + 0.5, 0, 1)
    femur = np.clip(e_f - (rows - 0.5), 0, 1) * colmask
    tibia = np.clip((rows + 0.5) - e_t, 0, 1) * colmask
    bone = np.maximum(femur, tibia)

    img = geom["background"] + (geom["bone"] - geom["background"] + geom["texture"]) * bone
    if sclerosis > 0:
        band = (np.exp(-np.maximum(e_f - rows, 0) / (2.0 * s)) * femur
                + np.exp(-np.maximum(rows - e_t, 0) / (2.0 * s)) * tibia)
        img = img + sclerosis * band

    # margins: femur-left, femur-right, tibia-left, tibia-right
    margins = [(femur_edge(lo) - 1.5 * s, lo - 1.0 * s), (femur_edge(hi) - 1.5 * s, hi + 1.0 * s),
               (femur_edge(lo) + gap + 1.5 * s, lo - 1.0 * s), (femur_edge(hi) + gap + 1.5 * s, hi + 1.0 * s)]
    radius = 1.6 * s
    for i in range(n_ost):
        r0, c0 = margins[geom["osteophyte_sites"][i % 4]]
        jr, jc = geom["osteophyte_jitter"][i % 8]
        bump = np.exp(-((rows - r0 - 0.3 * jr) ** 2 + (cols - c0 - jc) ** 2) / (2 * radius**2))
        img = np.maximum(img, geom["background"] + (geom["bone"] - geom["background"]) * bump)

    if params.noise_sigma > 0:
        img = img + params.noise_sigma * noise_rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)

    lm_cols = np.linspace(lo + 2 * s, hi - 2 * s, N_LANDMARKS // 2)
    fr = femur_edge(lm_cols)
    landmarks = np.concatenate([np.stack([fr, lm_cols], 1), np.stack([fr + gap, lm_cols], 1)])
    landmarks = np.clip(np.round(landmarks), 1, size)
    return img, landmarks


def generate_phantom(grade: int, rng_seed: int, params: PhantomParams | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Render one phantom radiograph of the given KL grade.

    Returns:
        ``(image, landmarks)``: an ``H x W`` float image in [0, 1] and a
        ``(16, 2)`` array of 1-based ``(row, col)`` joint-surface points,
        8 on the femoral edge followed by 8 on the tibial edge.
    """
    params = params or PhantomParams()
    _check_grade(grade)
    params.validate()
    geo_ss, sev_ss, noise_ss = np.random.SeedSequence(rng_seed).spawn(3)
    geom = _draw_geometry(np.random.default_rng(geo_ss), params.image_size)
    severity = float(np.random.default_rng(sev_ss).uniform())
    return _render(grade, severity, geom, np.random.default_rng(noise_ss), params)


def _progress_step(grade: int, u: float, rng: np.random.Generator, params: PhantomParams
                   ) -> tuple[int, float]:
    """Advance one 12-month step.

    ``u`` is the uniform health score (severity = 1 - u). The progression
    draw ``v`` is a Gaussian-copula mix of ``u`` and fresh noise, so it is
    exactly uniform and progression happens with the configured marginal
    probability. The next ``u`` is ``v`` rescaled within its branch, which
    keeps it uniform too.
    """
    p = params.progression_prob_by_grade[grade]
    rho = params.progression_visibility
    u_c = min(max(u, 1e-12), 1 - 1e-12)
    v = float(ndtr(rho * ndtri(u_c) + math.sqrt(1 - rho**2) * rng.standard_normal()))
    if v < p:
        return grade + 1, v / p
    return grade, (v - p) / (1 - p) if p < 1 else v


def generate_progression_pair(grade0: int, rng_seed: int, params: PhantomParams | None = None,
                              patient_id: str | None = None) -> Sample:
    params = params or PhantomParams()
    _check_grade(grade0)
    params.validate()
    geo_ss, prog_ss, n0_ss, n12_ss = np.random.SeedSequence(rng_seed).spawn(4)
    geom = _draw_geometry(np.random.default_rng(geo_ss), params.image_size)
    prog = np.random.default_rng(prog_ss)
    u0 = float(prog.uniform())
    grade12, u12 = _progress_step(grade0, u0, prog, params)
    x0, lm0 = _render(grade0, 1 - u0, geom, np.random.default_rng(n0_ss), params)
    x12, _ = _render(grade12, 1 - u12, geom, np.random.default_rng(n12_ss), params)
    return Sample(patient_id or f"seed{rng_seed}", x0, x12, grade0, grade12, lm0, True, 0)


def measure_gap_width(image: np.ndarray, threshold: float | None = None) -> int:
    """Count dark rows in the joint gap along the middle column."""
    col = image[:, image.shape[1] // 2]
    if threshold is None:
        threshold = 0.5 * (col.min() + col.max())
    dark = col < threshold
    centre = image.shape[0] // 2
    # walk outwards from the darkest row near the centre
    window = slice(centre - image.shape[0] // 4, centre + image.shape[0] // 4)
    start = window.start + int(np.argmin(col[window]))
    if not dark[start]:
        return 0
    lo = start
    while lo > 0 and dark[lo - 1]:
        lo -= 1
    hi = start
    while hi < len(col) - 1 and dark[hi + 1]:
        hi += 1
    return hi - lo + 1


# ------------------------------------------------------------ flip / I/O


def flip_horizontal(image: np.ndarray, landmarks: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Mirror an image left-right; landmark columns map to ``W + 1 - col``."""
    flipped = np.ascontiguousarray(image[:, ::-1])
    if landmarks is None:
        return flipped, None
    lm = np.array(landmarks, dtype=float, copy=True)
    lm[:, 1] = image.shape[1] + 1 - lm[:, 1]
    return flipped, lm


def quantize16(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 65535.0) / 65535.0


def write_png16(image: np.ndarray, path: str | Path) -> None:
    arr = np.round(np.clip(image, 0, 1) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("I;16", "I;16B", "I"):
        return arr.astype(np.float64) / 65535.0
    if mode == "L":
        return arr.astype(np.float64) / 255.0
    raise ValueError(f"{path}: unsupported PNG mode {mode}")


def _split_sizes(cfg: DatasetConfig) -> dict:
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for name, n in sizes.items():
        if n < 1:
            raise ConfigError(f"split {name} needs at least one patient, got {n}")
    return sizes


def build_dataset(cfg: DatasetConfig, out_dir: str | Path, seed: int = 0) -> PairDataset:
    """Render a patient cohort to PNGs plus ``manifest.csv`` and ``splits.csv``.

    Each patient is followed across ``cfg.timepoints``; the grade can rise by
    one per 12 months. Val/test images always carry landmarks; a
    ``floor(landmark_fraction * n_train_images)`` subset of train images does.
    Left knees are stored mirrored, as acquired, and flagged in the manifest.

    Returns the same paired dataset ``load_manifest`` would produce.
    """
    params = cfg.phantom
    params.validate()
    sizes = _split_sizes(cfg)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    n_total = sum(sizes.values())
    root = np.random.SeedSequence(seed)
    patient_ss = root.spawn(n_total)
    cohort_rng = np.random.default_rng(root.spawn(1)[0])
    weights = np.asarray(cfg.grade_weights, dtype=float)
    weights = weights / weights.sum()
    order = cohort_rng.permutation(n_total)
    split_of = {}
    cursor = 0
    for name in SPLITS:
        for idx in order[cursor:cursor + sizes[name]]:
            split_of[int(idx)] = name
        cursor += sizes[name]

    records: list[tuple[Record, np.ndarray, str]] = []
    timepoints = sorted(int(t) for t in cfg.timepoints)
    for i in range(n_total):
        pid = f"P{i:05d}"
        geo_ss, prog_ss, noise_ss = patient_ss[i].spawn(3)
        geom = _draw_geometry(np.random.default_rng(geo_ss), params.image_size)
        prog = np.random.default_rng(prog_ss)
        grade = int(prog.choice(N_GRADES, p=weights))
        u = float(prog.uniform())
        left = bool(prog.uniform() < cfg.left_fraction)
        noise_children = noise_ss.spawn(len(timepoints))
        prev_t = timepoints[0]
        for k, t in enumerate(timepoints):
            for _ in range((t - prev_t) // PAIR_GAP_MONTHS):
                grade, u = _progress_step(grade, u, prog, params)
            prev_t = t
            img, lm = _render(grade, 1 - u, geom, np.random.default_rng(noise_children[k]), params)
            img = quantize16(img)
            rel = f"images/{pid}_m{t:03d}.png"
            if left:
                img, lm = flip_horizontal(img, lm)
            records.append((Record(pid, t, "left" if left else "right", grade, rel, lm), img,
                            split_of[i]))

    train_idx = [k for k, (_, _, sp) in enumerate(records) if sp == "train"]
    n_annot = math.floor(cfg.landmark_fraction * len(train_idx) + 1e-9)
    annotated = set(np.asarray(train_idx)[cohort_rng.permutation(len(train_idx))[:n_annot]].tolist())
    for k, (rec, _, sp) in enumerate(records):
        if sp == "train" and k not in annotated:
            rec.landmarks = None

    try:
        for rec, img, _ in records:
            write_png16(img, out / rec.image_path)
        write_manifest([r for r, _, _ in records], out / "manifest.csv")
        with open(out / "splits.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SPLIT_HEADER)
            for i in range(n_total):
                w.writerow([f"P{i:05d}", split_of[i]])
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    return load_manifest(out / "manifest.csv")


def write_manifest(records: Sequence[Record], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for r in records:
            row = [r.patient_id, r.timepoint_months, r.laterality, r.kl_grade, r.image_path]
            if r.landmarks is None:
                row += [""] * (2 * N_LANDMARKS)
            else:
                row += [_fmt_coord(v) for v in np.asarray(r.landmarks).reshape(-1)]
            w.writerow(row)


def _fmt_coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def read_manifest(path: str | Path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != MANIFEST_HEADER:
            raise ManifestError("<header>", "manifest header does not match the expected column order")
        records = []
        for row in reader:
            if not row:
                continue
            pid, t, lat, grade, img = row[:5]
            name = f"{pid}@{t}"
            try:
                grade_i = int(grade)
            except ValueError:
                raise GradeError(name, f"KL grade {grade!r} is not an integer") from None
            if not 0 <= grade_i < N_GRADES:
                raise GradeError(name, f"KL grade {grade_i} outside 0..4")
            if lat not in ("left", "right"):
                raise ManifestError(name, f"laterality must be left/right, got {lat!r}")
            cells = row[5:]
            lm = None
            if any(c.strip() for c in cells):
                if len(cells) != 2 * N_LANDMARKS or not all(c.strip() for c in cells):
                    raise ManifestError(name, "landmark columns must be all filled or all empty")
                lm = np.array([float(c) for c in cells]).reshape(N_LANDMARKS, 2)
            records.append(Record(pid, int(t), lat, grade_i, img, lm))
    return records


def _load_image(rec: Record, base: Path) -> np.ndarray:
    name = f"{rec.patient_id}@{rec.timepoint_months}"
    path = base / rec.image_path
    if not path.is_file():
        raise MissingImageError(name, f"image file {path} not found")
    img = read_png(path)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise NonSquareImageError(name, f"image {path} has shape {img.shape}, expected square")
    if rec.landmarks is not None:
        h, w = img.shape
        r, c = rec.landmarks[:, 0], rec.landmarks[:, 1]
        if r.min() < 1 or r.max() > h or c.min() < 1 or c.max() > w:
            raise LandmarkBoundsError(name, f"landmark outside [1,{h}]x[1,{w}]")
    if rec.laterality == "left":
        img, lm = flip_horizontal(img, rec.landmarks)
        rec.landmarks = lm
    return img


def load_manifest(path: str | Path) -> PairDataset:
    """Read a manifest and pair consecutive timepoints exactly 12 months apart.

    Left-knee images (and their landmark columns) are mirrored on load.
    A ``splits.csv`` next to the manifest, when present, assigns patients to
    train/val/test.
    """
    path = Path(path)
    base = path.parent
    records = read_manifest(path)
    images = {}
    for rec in records:
        images[(rec.patient_id, rec.timepoint_months)] = _load_image(rec, base)

    by_patient: dict[str, list] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    samples = []
    size = 0
    for pid, recs in by_patient.items():
        recs.sort(key=lambda r: r.timepoint_months)
        for a, b in zip(recs, recs[1:]):
            if b.timepoint_months - a.timepoint_months != PAIR_GAP_MONTHS:
                continue
            x0 = images[(pid, a.timepoint_months)]
            x12 = images[(pid, b.timepoint_months)]
            if x0.shape != x12.shape:
                raise NonSquareImageError(f"{pid}@{b.timepoint_months}", "pair images differ in size")
            size = x0.shape[0]
            samples.append(Sample(pid, x0, x12, a.kl_grade, b.kl_grade, a.landmarks,
                                  a.landmarks is not None, a.timepoint_months))

    splits = {}
    split_path = base / "splits.csv"
    if split_path.is_file():
        with open(split_path, newline="") as fh:
            for row in csv.DictReader(fh):
                splits[row["patient_id"]] = row["split"]
    return PairDataset(samples, splits, size)


# -------------------------------------------------------------- batching


def balanced_batch_indices(progressing: Sequence[bool], batch_size: int, rng_seed: int,
                           epochs: int = 1) -> Iterator[np.ndarray]:
    """Yield index batches with equal counts of progressing and stable items.

    An epoch is one pass over the larger class; the smaller class is
    reshuffled and reused whenever it runs out.
    """
    if batch_size < 2 or batch_size % 2:
        raise BatchConfigError(f"batch_size must be a positive even number, got {batch_size}")
    flags = np.asarray(progressing, dtype=bool)
    pos = np.flatnonzero(flags)
    neg = np.flatnonzero(~flags)
    if len(pos) == 0 or len(neg) == 0:
        raise BatchConfigError("balanced batching needs both progressing and stable items")
    rng = np.random.default_rng(rng_seed)
    half = batch_size // 2
    n_batches = math.ceil(max(len(pos), len(neg)) / half)

    def stream(pool):
        while True:
            yield from rng.permutation(pool)

    pos_s, neg_s = stream(pos), stream(neg)
    for _ in range(epochs * n_batches):
        batch = np.array([next(pos_s) for _ in range(half)] + [next(neg_s) for _ in range(half)])
        yield batch[rng.permutation(batch_size)]


def balanced_batches(samples: Sequence[Sample], batch_size: int, rng_seed: int,
                     epochs: int = 1) -> Iterator[list]:
    flags = [s.progressed for s in samples]
    for idx in balanced_batch_indices(flags, batch_size, rng_seed, epochs):
        yield [samples[i] for i in idx]


def manifest_images(path: str | Path) -> list:
    """``(record_id, image)`` for every manifest row in file order, left knees mirrored."""
    path = Path(path)
    return [(f"{rec.patient_id}@{rec.timepoint_months}", _load_image(rec, path.parent))
            for rec in read_manifest(path)]
