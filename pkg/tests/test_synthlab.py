import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from ctbias.cohort import build_catalog
from ctbias.errors import BoundsError, EmptyMaskError, PlacementError, ValidationError
from ctbias.imgio import GE, SIEMENS, SeriesMeta, load_nifti
from ctbias.synthlab import (
    DEFAULT_SIGNATURES,
    BrainMask,
    PhantomSpec,
    SignatureParams,
    SphereSpec,
    TierSpec,
    build_tier_dataset,
    designate_labels,
    feasible_centers,
    gen_phantom,
    inject_sphere,
    phantom_cohort,
    phantom_geometry,
    read_manifest,
    resample_for_segmentation,
    sample_center,
    signature_noise,
    small_sphere_ids,
    strip_skull,
    tier_spec,
    write_tier_dataset,
)
from ctbias.volgrid import Volume


def dice(a, b):
    return 2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum())


def ball_mask(shape, radius_vox, spacing=(1.0, 1.0, 1.0)):
    grids = np.meshgrid(*(np.arange(n) - n // 2 for n in shape), indexing="ij")
    return BrainMask(sum(g.astype(float) ** 2 for g in grids) <= radius_vox ** 2, spacing)


# --- skull stripping

def test_strip_skull_matches_generating_ellipsoid():
    spec = PhantomSpec(signatures={"A": SignatureParams(variance=0.0), "B": DEFAULT_SIGNATURES["B"]})
    vol, _ = gen_phantom(spec)
    mask = strip_skull(vol)
    assert dice(mask.data, phantom_geometry(spec).brain) >= 0.95


def test_strip_skull_noisy_phantom():
    spec = PhantomSpec(signature="B", seed=11)
    vol, _ = gen_phantom(spec)
    assert dice(strip_skull(vol).data, phantom_geometry(spec).brain) >= 0.95


def test_strip_skull_all_air():
    with pytest.raises(EmptyMaskError):
        strip_skull(Volume(np.full((16, 16, 4), -1000.0)))


def test_strip_skull_excludes_bone():
    vol, _ = gen_phantom(PhantomSpec(signature="B", seed=5))
    mask = strip_skull(vol).data
    assert int((mask & (vol.data > 300)).sum()) == 0


def test_strip_skull_stable_under_small_noise():
    spec = PhantomSpec(signatures={"A": SignatureParams(variance=0.0), "B": DEFAULT_SIGNATURES["B"]}, seed=2)
    vol, _ = gen_phantom(spec)
    noisy = vol.with_data(vol.data + np.random.default_rng(0).normal(0, 2.0, vol.shape))
    np.testing.assert_array_equal(strip_skull(vol).data, strip_skull(noisy).data)


# --- sphere placement

def test_center_away_from_boundary():
    mask = BrainMask(np.ones((50, 50, 50), bool))
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = np.array(sample_center(mask, 1.0, (1.0, 1.0, 1.0), rng))
        assert c.min() >= 1 and c.max() <= 48


def test_single_voxel_infeasible():
    data = np.zeros((9, 9, 9), bool)
    data[4, 4, 4] = True
    with pytest.raises(PlacementError) as info:
        sample_center(BrainMask(data), 2.0, (1.0, 1.0, 1.0), np.random.default_rng(0), max_draws=50)
    assert info.value.attempts == 50


def test_center_distribution_uniform_over_feasible_set():
    mask = ball_mask((21, 21, 21), 9.0)
    radius = 3.0
    feasible = feasible_centers(mask, radius)
    # brute-force oracle: check every mask voxel directly
    offs = np.argwhere(ball_mask((7, 7, 7), radius).data) - 3
    brute = [c for c in np.argwhere(mask.data)
             if all(mask.data[tuple(c + o)] for o in offs)]
    assert sorted(map(tuple, feasible)) == sorted(map(tuple, brute))

    rng = np.random.default_rng(123)
    centers = np.array([sample_center(mask, radius, (1.0, 1.0, 1.0), rng) for _ in range(10_000)])
    octant = lambda pts: ((pts[:, 0] > 10) * 4 + (pts[:, 1] > 10) * 2 + (pts[:, 2] > 10)).astype(int)
    observed = np.bincount(octant(centers), minlength=8)
    share = np.bincount(octant(feasible), minlength=8) / len(feasible)
    assert chisquare(observed, share * len(centers)).pvalue > 0.01


def test_anisotropic_spacing_respected():
    mask = BrainMask(np.ones((40, 40, 10), bool), (1.0, 1.0, 5.0))
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = sample_center(mask, 10.0, mask.spacing, rng)
        assert 10 <= c[0] <= 29 and 2 <= c[2] <= 7


# --- sphere injection

@pytest.mark.parametrize("radius_vox,spacing", [(5, (1.0, 1.0, 1.0)), (7, (0.8, 0.8, 2.0)), (10, (1.0, 1.0, 1.0))])
def test_injected_voxel_count(radius_vox, spacing):
    radius = radius_vox * max(spacing)
    vol = Volume(np.zeros((48, 48, 48)), spacing)
    out = inject_sphere(vol, SphereSpec((24, 24, 24), radius, 50.0), np.random.default_rng(0))
    expected = 4 / 3 * math.pi * radius ** 3 / np.prod(spacing)
    assert abs((out.data != 0).sum() - expected) <= 0.05 * expected


def test_inject_zero_sd_exact():
    vol = Volume(np.zeros((20, 20, 20)))
    out = inject_sphere(vol, SphereSpec((10, 10, 10), 4.0, 50.0, 0.0), np.random.default_rng(0))
    touched = out.data != 0
    assert np.all(out.data[touched] == 50.0)


def test_inject_moments():
    vol = Volume(np.full((40, 40, 40), -7.0))
    out = inject_sphere(vol, SphereSpec((20, 20, 20), 8.0, 50.0, 2.0), np.random.default_rng(4))
    offs = np.argwhere(ball_mask((17, 17, 17), 8.0).data) - 8 + 20
    vals = out.data[tuple(offs.T)].astype(np.float64)
    n = len(vals)
    assert n >= 500
    assert abs(vals.mean() - 50.0) <= 3 * 2.0 / math.sqrt(n)
    assert abs(vals.std(ddof=1) - 2.0) <= 0.2 * 2.0


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.integers(3, 12), st.floats(1.0, 4.0), st.integers(0, 2**32))
def test_inject_outside_voxels_bitwise_unchanged(cx, cy, cz, radius, seed):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(16, 16, 16)).astype(np.float32)
    vol = Volume(data.copy())
    out = inject_sphere(vol, SphereSpec((cx, cy, cz), radius, 50.0, 2.0), rng)
    grids = np.meshgrid(*(np.arange(16) for _ in range(3)), indexing="ij")
    d2 = (grids[0] - cx) ** 2 + (grids[1] - cy) ** 2 + (grids[2] - cz) ** 2
    outside = d2 > radius ** 2 + 1e-9
    np.testing.assert_array_equal(out.data[outside], data[outside])
    np.testing.assert_array_equal(vol.data, data)


def test_inject_out_of_bounds():
    with pytest.raises(BoundsError):
        inject_sphere(Volume(np.zeros((10, 10, 10))), SphereSpec((1, 5, 5), 3.0, 50.0), np.random.default_rng(0))


def test_sphere_spec_validation():
    with pytest.raises(ValidationError):
        SphereSpec((0, 0, 0), 0.0, 50.0)
    with pytest.raises(ValidationError):
        SphereSpec((0, 0, 0), 1.0, 50.0, -1.0)


# --- tiers

def tier_fixture(n_per_manufacturer=20):
    metas = [SeriesMeta(f"{m}{i:02d}", m) for m in (GE, SIEMENS) for i in range(n_per_manufacturer)]
    catalog = designate_labels(build_catalog(metas), seed=3)
    spacing = (4.0, 4.0, 4.0)
    mask = ball_mask((32, 32, 32), 12.0, spacing)
    volumes = {sid: Volume(np.zeros((32, 32, 32), np.float32), spacing) for sid in catalog.study_ids}
    masks = {sid: mask for sid in catalog.study_ids}
    return catalog, volumes, masks


@pytest.fixture(scope="module")
def tiers():
    catalog, volumes, masks = tier_fixture()
    easy = build_tier_dataset(catalog, volumes, masks, tier_spec("easy"), seed=9)
    out = {"easy": easy}
    for name in ("medium", "hard"):
        out[name] = build_tier_dataset(catalog, volumes, masks, tier_spec(name), seed=9, placements=easy.placements)
    return catalog, out


def test_designation_balanced(tiers):
    catalog, _ = tiers
    for manu in (GE, SIEMENS):
        labels = [e.meta.label for e in catalog if e.meta.manufacturer == manu]
        assert labels.count("positive") == 10 and labels.count("negative") == 10


def test_easy_tier(tiers):
    _, ds = tiers
    spheres = [it.sphere for it in ds["easy"].items if it.sphere is not None]
    assert len(spheres) == 20
    assert all(21.0 <= s.radius <= 26.0 and s.mean_hu == 50.0 for s in spheres)
    assert not ds["easy"].small_ids


def test_medium_and_hard_counts(tiers):
    _, ds = tiers
    assert len(ds["medium"].small_ids) == 4
    assert len(ds["hard"].small_ids) == 7
    for it in ds["hard"].items:
        if it.study_id in ds["hard"].small_ids:
            assert 13.0 <= it.sphere.radius <= 17.0 and it.sphere.mean_hu == 40.0


def test_small_subsets_balanced_and_nested(tiers):
    catalog, ds = tiers
    med, hard = ds["medium"].small_ids, ds["hard"].small_ids
    assert med <= hard
    per_manu = [sum(catalog[s].meta.manufacturer == m for s in med) for m in (GE, SIEMENS)]
    assert per_manu == [2, 2]


def test_centers_reused_across_tiers(tiers):
    _, ds = tiers
    easy = {it.study_id: it.sphere.center for it in ds["easy"].items if it.sphere}
    for name in ("medium", "hard"):
        other = {it.study_id: it.sphere.center for it in ds[name].items if it.sphere}
        assert other == easy


def test_negatives_untouched(tiers):
    _, ds = tiers
    for it in ds["hard"].items:
        if it.label == "negative":
            assert it.sphere is None and not it.volume.data.any()


def test_unbalanced_positives_rejected():
    metas = [SeriesMeta(f"g{i}", GE, label="positive") for i in range(4)]
    metas += [SeriesMeta(f"s{i}", SIEMENS, label="negative") for i in range(4)]
    with pytest.raises(ValidationError):
        small_sphere_ids(build_catalog(metas), 0.35, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**32))
def test_small_subsets_nest_for_any_seed(n, seed):
    metas = [SeriesMeta(f"{m}{i:03d}", m) for m in (GE, SIEMENS) for i in range(n)]
    cat = designate_labels(build_catalog(metas), seed)
    assert small_sphere_ids(cat, 0.20, seed) <= small_sphere_ids(cat, 0.35, seed)


def test_tier_spec_validation():
    with pytest.raises(ValidationError):
        TierSpec("x", 1.5)
    with pytest.raises(ValidationError):
        tier_spec("extreme")


def test_write_manifest(tmp_path, tiers):
    _, ds = tiers
    small = replace(ds["medium"], items=ds["medium"].items[:4])
    path = write_tier_dataset(small, tmp_path)
    rows = read_manifest(path)
    assert [r["study_id"] for r in rows] == sorted(it.study_id for it in small.items)
    first = small.by_id()[rows[0]["study_id"]]
    np.testing.assert_array_equal(load_nifti(tmp_path / rows[0]["path"]).data, first.volume.data)


# --- segmentation resampling

def test_resample_35_to_32():
    vol = Volume(np.random.default_rng(0).normal(size=(8, 8, 35)))
    mask = BrainMask(np.random.default_rng(1).random((8, 8, 35)) > 0.5)
    v2, m2 = resample_for_segmentation(vol, mask)
    assert v2.shape == m2.shape == (8, 8, 32)
    assert m2.data.dtype == bool


def test_resample_32_identity():
    vol = Volume(np.random.default_rng(0).normal(size=(4, 4, 32)))
    mask = BrainMask(np.ones((4, 4, 32), bool))
    v2, m2 = resample_for_segmentation(vol, mask)
    np.testing.assert_array_equal(v2.data, vol.data)
    np.testing.assert_array_equal(m2.data, mask.data)


def test_resample_constant_mask():
    _, m2 = resample_for_segmentation(Volume(np.zeros((4, 4, 35))), BrainMask(np.ones((4, 4, 35), bool)))
    assert m2.data.all()


def test_resample_shape_mismatch():
    with pytest.raises(ValidationError):
        resample_for_segmentation(Volume(np.zeros((4, 4, 35))), BrainMask(np.ones((4, 4, 34), bool)))


# --- phantoms

def test_phantom_deterministic():
    a, ma = gen_phantom(PhantomSpec(signature="B", seed=42))
    b, mb = gen_phantom(PhantomSpec(signature="B", seed=42))
    np.testing.assert_array_equal(a.data, b.data)
    assert ma == mb


def test_noiseless_center_is_base_hu():
    quiet = {"A": SignatureParams(variance=0.0), "B": SignatureParams(variance=0.0, kernel_width=3, streak_amplitude=3.0)}
    for sig in ("A", "B"):
        spec = PhantomSpec(signature=sig, signatures=quiet, seed=8)
        vol, _ = gen_phantom(spec)
        assert vol.data[phantom_geometry(spec).center] == 30.0


def lag1_autocorr(noise):
    a, b = noise[:-1], noise[1:]
    return float(np.corrcoef(a.ravel(), b.ravel())[0, 1])


def test_signature_noise_variance_and_correlation():
    shape = (64, 64, 16)
    a = signature_noise(shape, DEFAULT_SIGNATURES["A"], np.random.default_rng(0))
    b = signature_noise(shape, DEFAULT_SIGNATURES["B"], np.random.default_rng(1))
    assert abs(a.var() / b.var() - 1.0) < 0.10
    assert abs(a.var() - 25.0) < 2.5
    ra, rb = lag1_autocorr(a), lag1_autocorr(b)
    assert rb - ra >= 0.2
    assert rb == pytest.approx(2 / 3, abs=0.05)  # box width 3: two of three columns shared


def test_phantom_background_noise_signatures():
    # measured in the air corners where the phantom is background plus noise only
    no_streak = dict(DEFAULT_SIGNATURES)
    no_streak["B"] = replace(no_streak["B"], streak_amplitude=0.0)
    out = {}
    for sig in ("A", "B"):
        vol, meta = gen_phantom(PhantomSpec(signature=sig, signatures=no_streak, seed=6))
        corner = vol.data[:12, :12, :].astype(np.float64) + 1000.0
        out[sig] = (corner.var(), lag1_autocorr(corner))
        assert meta.manufacturer == (GE if sig == "A" else SIEMENS)
    assert abs(out["A"][0] / out["B"][0] - 1.0) < 0.10
    assert out["B"][1] - out["A"][1] >= 0.2


def test_phantom_spec_validation():
    with pytest.raises(ValidationError):
        PhantomSpec(signatures={"A": SignatureParams(), "B": SignatureParams()})
    with pytest.raises(ValidationError):
        SignatureParams(variance=-1.0)
    with pytest.raises(ValidationError):
        PhantomSpec(brain_semi_axes_mm=(0.0, 1.0, 1.0))


def test_phantom_cohort_ids_and_count():
    got = list(phantom_cohort(2, seed=1, template=PhantomSpec(shape=(16, 16, 4))))
    assert [m.study_id for _, m in got] == ["A0000", "A0001", "B0000", "B0001"]
    with pytest.raises(ValidationError):
        list(phantom_cohort(0, seed=1))
