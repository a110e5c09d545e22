import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneerisk.config import ConfigError, DatasetConfig, PhantomParams
from kneerisk.dataset import (MANIFEST_HEADER, BatchConfigError, GradeError, LandmarkBoundsError,
                              MissingImageError, NonSquareImageError, Record, Sample, balanced_batch_indices,
                              balanced_batches, build_dataset, flip_horizontal, generate_phantom,
                              generate_progression_pair, load_manifest, measure_gap_width, write_manifest,
                              write_png16)


def _geometry_rows(image):
    """Independent oracle: dark run length at the middle column with a fixed midpoint threshold."""
    col = image[:, image.shape[1] // 2]
    thr = 0.5 * (col.min() + col.max())
    runs, n = [], 0
    for v in col[image.shape[0] // 4: 3 * image.shape[0] // 4]:
        if v < thr:
            n += 1
        elif n:
            runs.append(n)
            n = 0
    runs.append(n)
    return max(runs)


def test_phantom_shapes_and_range():
    img, lm = generate_phantom(2, 1)
    assert img.shape == (64, 64)
    assert img.min() >= 0 and img.max() <= 1
    assert lm.shape == (16, 2)
    assert lm.min() >= 1 and lm.max() <= 64


def test_phantom_grade0_gap_and_no_osteophytes():
    params = PhantomParams(noise_sigma=0.0)
    img, lm = generate_phantom(0, 1, params)
    lo, hi = params.joint_space_width_by_grade[0]
    # landmarks sit on the rounded edges, so their vertical spread brackets the gap width
    gap = lm[8:, 0] - lm[:8, 0]
    assert np.all(gap >= np.floor(lo) - 1) and np.all(gap <= np.ceil(hi) + 1)
    # no bright bumps outside the bone columns for grade 0
    bone_cols = np.flatnonzero(img.max(axis=0) > 0.4)
    outside = np.setdiff1d(np.arange(64), np.arange(bone_cols.min() - 1, bone_cols.max() + 2))
    assert np.all(img[:, outside] < 0.3)


def test_phantom_deterministic():
    a = generate_phantom(3, 11)
    b = generate_phantom(3, 11)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_gap_width_grade4_below_grade0():
    g4 = measure_gap_width(generate_phantom(4, 7)[0])
    g0 = measure_gap_width(generate_phantom(0, 7)[0])
    assert g4 < g0
    assert _geometry_rows(generate_phantom(4, 7)[0]) < _geometry_rows(generate_phantom(0, 7)[0])


def test_gap_width_decreasing_in_grade_on_average():
    means = [np.mean([_geometry_rows(generate_phantom(g, s)[0]) for s in range(100)]) for g in range(5)]
    assert all(a > b for a, b in zip(means, means[1:]))


@pytest.mark.parametrize("grade", [-1, 5, 2.5])
def test_invalid_grade_rejected(grade):
    with pytest.raises(ValueError):
        generate_phantom(grade, 0)


def test_grade4_never_progresses():
    assert all(generate_progression_pair(4, s).y12 == 4 for s in range(50))


def test_forced_progression():
    params = PhantomParams(progression_prob_by_grade=[1.0, 1.0, 1.0, 1.0, 0.0])
    s = generate_progression_pair(2, 5, params)
    assert (s.y0, s.y12) == (2, 3)


def test_progression_rate_monte_carlo():
    params = PhantomParams(progression_prob_by_grade=[0.3, 0.3, 0.3, 0.3, 0.0])
    rng = np.random.default_rng(0)
    from kneerisk.dataset import _progress_step

    hits = sum(_progress_step(1, float(rng.uniform()), rng, params)[0] == 2 for _ in range(10_000))
    assert abs(hits / 10_000 - 0.3) <= 0.02


def test_progression_pair_rate_with_rendering():
    n = 400
    rate = np.mean([generate_progression_pair(1, s).progressed for s in range(n)])
    assert abs(rate - 0.35) < 4 * np.sqrt(0.35 * 0.65 / n)


def test_progression_pair_shares_geometry():
    params = PhantomParams(progression_prob_by_grade=[1.0, 1.0, 1.0, 1.0, 0.0], noise_sigma=0.0)
    s = generate_progression_pair(1, 9, params)
    # far from the joint only the faint sclerosis tail differs between visits
    assert np.abs(s.x0[:12] - s.x12[:12]).max() < 1e-3
    assert measure_gap_width(s.x12) <= measure_gap_width(s.x0)


def test_phantom_params_validation():
    with pytest.raises(ConfigError):
        PhantomParams(progression_prob_by_grade=[0.3, 0.3, 0.3, 0.3, 0.1]).validate()
    with pytest.raises(ConfigError):
        PhantomParams(joint_space_width_by_grade=[[9, 11], [9, 11], [5, 7], [3, 5], [1, 3]]).validate()
    with pytest.raises(ConfigError):
        PhantomParams(osteophyte_count_by_grade=[[1, 1], [0, 1], [1, 2], [2, 3], [3, 4]]).validate()


def test_build_dataset_counts_and_disjoint_splits(tmp_path):
    data = build_dataset(DatasetConfig(), tmp_path, seed=0)
    with open(tmp_path / "manifest.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == MANIFEST_HEADER
    assert len({r[0] for r in rows[1:]}) == 76
    ids = {name: {s.patient_id for s in data.split(name)} for name in ("train", "val", "test")}
    assert len(ids["train"]) == 60 and len(ids["val"]) == 8 and len(ids["test"]) == 8
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    assert all(s.y12 >= s.y0 for s in data.samples)
    assert all(s.y12 - s.y0 <= 1 for s in data.samples)


def test_landmark_fraction_one(tmp_path):
    build_dataset(DatasetConfig(n_train=3, n_val=1, n_test=1, landmark_fraction=1.0), tmp_path)
    with open(tmp_path / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert all(r["lm16_c"] != "" for r in rows)


def test_landmark_fraction_floor_rule(tmp_path):
    # 200 train patients x 5 timepoints = 1000 train images -> floor(16.0) = 16
    cfg = DatasetConfig(n_train=200, n_val=1, n_test=1, landmark_fraction=0.016,
                        phantom=PhantomParams(image_size=16))
    build_dataset(cfg, tmp_path)
    with open(tmp_path / "splits.csv", newline="") as fh:
        train = {r["patient_id"] for r in csv.DictReader(fh) if r["split"] == "train"}
    with open(tmp_path / "manifest.csv", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["patient_id"] in train]
    assert len(rows) == 1000
    assert sum(r["lm1_r"] != "" for r in rows) == 16


def test_manifest_round_trip(tmp_path):
    cfg = DatasetConfig(n_train=4, n_val=2, n_test=2, landmark_fraction=0.5)
    built = build_dataset(cfg, tmp_path, seed=4)
    again = load_manifest(tmp_path / "manifest.csv")
    assert len(built.samples) == len(again.samples) == 8 * 4
    for a, b in zip(built.samples, again.samples):
        assert (a.patient_id, a.y0, a.y12, a.t0_months, a.has_landmarks) == \
               (b.patient_id, b.y0, b.y12, b.t0_months, b.has_landmarks)
        assert np.array_equal(a.x0, b.x0) and np.array_equal(a.x12, b.x12)
        if a.has_landmarks:
            assert np.array_equal(a.landmarks0, b.landmarks0)


def test_build_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        build_dataset(DatasetConfig(n_train=1, n_val=1, n_test=1), blocker / "sub")


def _write_case(tmp_path, records, images):
    (tmp_path / "images").mkdir(exist_ok=True)
    for name, img in images.items():
        write_png16(img, tmp_path / "images" / name)
    write_manifest(records, tmp_path / "manifest.csv")
    return tmp_path / "manifest.csv"


def test_left_knee_flip_on_load(tmp_path):
    img = np.zeros((64, 64))
    img[:, :5] = 1.0
    lm = np.full((16, 2), 30.0)
    lm[:, 1] = 10
    recs = [Record("A", 0, "left", 1, "images/a0.png", lm), Record("A", 12, "left", 1, "images/a1.png", None)]
    data = load_manifest(_write_case(tmp_path, recs, {"a0.png": img, "a1.png": img}))
    s = data.samples[0]
    assert np.all(s.landmarks0[:, 1] == 55)
    assert s.x0[:, -5:].min() == 1.0 and s.x0[:, :5].max() == 0.0


def test_no_pair_across_24_months(tmp_path):
    img = np.zeros((16, 16))
    recs = [Record("A", 0, "right", 1, "images/a.png", None), Record("A", 24, "right", 2, "images/a.png", None),
            Record("A", 36, "right", 2, "images/a.png", None)]
    data = load_manifest(_write_case(tmp_path, recs, {"a.png": img}))
    assert [(s.t0_months, s.y0, s.y12) for s in data.samples] == [(24, 2, 2)]


def test_manifest_validation_errors(tmp_path):
    sq, rect = np.zeros((16, 16)), np.zeros((16, 12))
    bad_lm = np.full((16, 2), 3.0)
    bad_lm[0] = (17, 3)
    cases = [
        ([Record("M", 0, "right", 1, "images/missing.png", None)], MissingImageError),
        ([Record("N", 0, "right", 1, "images/rect.png", None)], NonSquareImageError),
        ([Record("L", 0, "right", 1, "images/sq.png", bad_lm)], LandmarkBoundsError),
    ]
    for recs, err in cases:
        path = _write_case(tmp_path, recs, {"sq.png": sq, "rect.png": rect})
        with pytest.raises(err, match=recs[0].patient_id):
            load_manifest(path)
    path = _write_case(tmp_path, [Record("G", 0, "right", 1, "images/sq.png", None)], {"sq.png": sq})
    path.write_text(path.read_text().replace(",1,images", ",7,images"))
    with pytest.raises(GradeError, match="G"):
        load_manifest(path)


@given(st.integers(0, 2**31 - 1), st.integers(4, 20))
@settings(max_examples=30, deadline=None)
def test_flip_is_involution(seed, size):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(size, size))
    lm = rng.integers(1, size + 1, size=(16, 2)).astype(float)
    back, lm_back = flip_horizontal(*flip_horizontal(img, lm))
    assert np.array_equal(back, img) and np.array_equal(lm_back, lm)


def test_balanced_batches_contract():
    flags = [True] * 5 + [False] * 45
    seen = []
    for batch in balanced_batch_indices(flags, 8, rng_seed=1):
        assert sum(flags[i] for i in batch) == 4
        seen.extend(i for i in batch if flags[i])
    assert len(seen) > len(set(seen))  # minority class reused within the epoch
    a = [b.tolist() for b in balanced_batch_indices(flags, 8, 3, epochs=2)]
    b = [b.tolist() for b in balanced_batch_indices(flags, 8, 3, epochs=2)]
    assert a == b


def test_balanced_batches_errors():
    with pytest.raises(BatchConfigError):
        next(balanced_batch_indices([True, False], 3, 0))
    with pytest.raises(BatchConfigError):
        next(balanced_batch_indices([False] * 4, 2, 0))


def test_balanced_batches_samples():
    img = np.zeros((4, 4))
    samples = [Sample(f"p{i}", img, img, 1, 1 + (i % 3 == 0), None, False, 0) for i in range(12)]
    for batch in balanced_batches(samples, 4, 0):
        assert sum(s.progressed for s in batch) == 2
