import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spongiosa import datapipe as dp
from spongiosa import morphometry as m
from spongiosa.volcore import DensityVolume, write_svol

SMALL = dp.PhantomSpec(shape=(40, 40, 40), n_plates=8, n_rods=30, seed=1)


def test_patch_spec_validation():
    for bad in ({"size": 0}, {"stride": 0}, {"size": 8, "stride": 9}):
        with pytest.raises(ValueError):
            dp.PatchSpec(**bad)


def test_extract_counts():
    patches, pos = dp.extract_patches(np.zeros((64, 64, 64), np.float32))
    assert len(patches) == 125 and patches.shape[1:] == (32, 32, 32)
    axis = [0, 8, 16, 24, 32]
    assert pos == list(itertools.product(axis, axis, axis))
    assert len(dp.extract_patches(np.zeros((32, 32, 32)))[0]) == 1
    with pytest.raises(ValueError):
        dp.extract_patches(np.zeros((31, 64, 64)))


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 20), st.integers(4, 20), st.integers(4, 20), st.integers(1, 4), st.integers(0, 3))
def test_extract_count_formula(nx, ny, nz, size, extra):
    stride = max(1, size - extra)
    n = 1
    for d in (nx, ny, nz):
        n *= (d - size) // stride + 1
    assert len(dp.grid_positions((nx, ny, nz), size, stride)) == n


def test_extract_with_mask():
    vol = np.arange(64 ** 3, dtype=np.float32).reshape(64, 64, 64)
    mask = np.ones(vol.shape, bool)
    mask[:4, :4, :4] = False
    patches, pos = dp.extract_patches(vol, dp.PatchSpec(mask=mask))
    assert 0 < len(patches) < 125
    for (x, y, z) in pos:
        assert mask[x:x + 32, y:y + 32, z:z + 32].all()
    with pytest.raises(ValueError):
        dp.extract_patches(vol, dp.PatchSpec(mask=mask[:10]))


def test_augment16_generic_patch_distinct():
    patch = np.random.default_rng(0).normal(size=(5, 5, 5))
    out = dp.augment16(patch)
    assert out.shape == (16, 5, 5, 5)
    assert len({o.tobytes() for o in out}) == 16
    np.testing.assert_array_equal(out[0], patch)


def test_augment16_constant_patch():
    out = dp.augment16(np.full((3, 3, 3), 2.0))
    assert all(np.array_equal(o, out[0]) for o in out)


def test_augment_non_cubic():
    with pytest.raises(ValueError):
        dp.augment(np.zeros((2, 3, 3)), 1)
    with pytest.raises(ValueError):
        dp.augment(np.zeros((3, 3, 3)), 16)


def test_group_closure_identity_orders():
    table = dp.composition_table()
    assert (table >= 0).all()
    assert (table[0] == np.arange(16)).all() and (table[:, 0] == np.arange(16)).all()
    mats = [dp.transform_matrix(k) for k in range(16)]
    for mtx in mats:
        assert mtx[2, 2] in (1, -1) and mtx[2, 0] == mtx[2, 1] == 0  # z stays vertical
        assert any(np.array_equal(np.linalg.matrix_power(mtx, o), np.eye(3)) for o in (1, 2, 4))


def test_matrices_describe_array_action():
    n = 5
    patch = np.random.default_rng(1).normal(size=(n, n, n))
    c = (n - 1) / 2
    for k in range(16):
        out = dp.augment(patch, k)
        mtx = dp.transform_matrix(k)
        for idx in [(0, 1, 2), (4, 0, 3), (2, 2, 0)]:
            new = (mtx @ (np.array(idx) - c) + c).round().astype(int)
            assert out[tuple(new)] == patch[idx]


def test_composition_matches_arrays():
    patch = np.random.default_rng(2).normal(size=(4, 4, 4))
    table = dp.composition_table()
    for a in range(16):
        for b in range(16):
            np.testing.assert_array_equal(dp.augment(dp.augment(patch, b), a), dp.augment(patch, table[a, b]))


def test_estimators():
    X = np.random.default_rng(3).normal(size=(2, 4, 4, 4))
    out = dp.Augmenter16().fit_transform(X)
    assert out.shape == (32, 4, 4, 4)
    np.testing.assert_array_equal(out[16], X[1])
    ext = dp.PatchExtractor(size=32, stride=16)
    patches = ext.fit_transform([np.zeros((64, 32, 32)), np.zeros((32, 32, 32))])
    assert len(patches) == 4 and ext.positions_[-1] == (1, (0, 0, 0))


def test_downsample_composition():
    x = np.random.default_rng(4).normal(size=(2, 32, 32, 32))
    np.testing.assert_allclose(dp.downsample(dp.downsample(x, 2), 2), dp.downsample(x, 4), atol=1e-12)
    assert dp.downsample(x, 4).shape == (2, 8, 8, 8)
    with pytest.raises(ValueError):
        dp.downsample(x[:, :30], 4)


@pytest.mark.parametrize("h", [2, 3, 5])
def test_phantom_single_plate(h):
    spec = dp.PhantomSpec(shape=(32, 32, 32), n_plates=1, n_rods=0, plate_thickness=(h, h),
                          plate_radius=(np.inf, np.inf), plate_normal=(0, 0, 1), blur_sigma=0, noise_sd=0)
    vol = dp.phantom_volume(spec)
    assert m.bvtv(vol) == h / 32


def test_phantom_empty():
    vol = dp.phantom_volume(dp.PhantomSpec(shape=(16, 16, 16), n_plates=0, n_rods=0))
    assert m.bvtv(vol) == 0.0
    with pytest.raises(m.EmptySegmentationError):
        m.tmd(vol)


def test_phantom_plate_ladder_monotone():
    values = [m.bvtv(dp.phantom_volume(dp.PhantomSpec(shape=(32, 32, 32), n_plates=n, n_rods=10, seed=5)))
              for n in range(0, 12, 2)]
    assert values == sorted(values)


def test_phantom_deterministic_and_finite():
    a, b = dp.phantom_volume(SMALL), dp.phantom_volume(SMALL)
    assert a == b
    p = m.compute_all(a)
    assert all(v is not None and np.isfinite(v) for v in p.as_tuple())


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        dp.PhantomSpec(shape=(0, 4, 4))
    with pytest.raises(ValueError):
        dp.PhantomSpec(n_rods=-1)
    with pytest.raises(ValueError):
        dp.PhantomSpec(bone_density=(300, 2000))
    with pytest.raises(ValueError):
        dp.PhantomSpec.from_dict({"nope": 1})
    assert dp.PhantomSpec.from_dict(SMALL.to_dict()) == SMALL


def test_corpus_size_arithmetic():
    assert dp.corpus_size(7660, True) == 122_560
    assert dp.corpus_size(10, True) == 160
    assert dp.corpus_size(10, False) == 10


def test_build_and_rebuild_corpus(tmp_path):
    vol = dp.phantom_volume(dp.PhantomSpec(shape=(40, 40, 32), n_plates=4, n_rods=10, seed=2))
    write_svol(vol, tmp_path / "v.svol")
    man = dp.build_corpus([tmp_path / "v.svol"], tmp_path / "c", dp.PatchSpec(32, 8))
    assert man["raw_count"] == 4 and man["count"] == 64
    entry = man["patches"][17]
    assert entry["transform"] == 1 and entry["position"] == [0, 8, 0]
    patches = dp.load_corpus(tmp_path / "c")
    assert patches.shape == (64, 32, 32, 32) and np.abs(patches).max() <= 1
    back = dp.rebuild_corpus(tmp_path / "c" / "manifest.json", tmp_path / "c2")
    assert back == json.loads((tmp_path / "c" / "manifest.json").read_text())
    for e in man["patches"]:
        assert (tmp_path / "c" / e["file"]).read_bytes() == (tmp_path / "c2" / e["file"]).read_bytes()
    with pytest.raises(FileExistsError):
        dp.build_corpus([tmp_path / "v.svol"], tmp_path / "c")


def test_build_corpus_in_memory(tmp_path):
    vol = DensityVolume(np.full((32, 32, 32), 2000.0, np.float32))
    man = dp.build_corpus([vol], tmp_path / "c", augment=False)
    assert man["count"] == 1 and man["patches"][0]["clamp_fraction"] == 1.0
    with pytest.raises(ValueError):
        dp.rebuild_corpus(tmp_path / "c" / "manifest.json", tmp_path / "c2")
    with pytest.raises(ValueError):
        dp.build_corpus([], tmp_path / "c3")


def test_phantom_patches_count():
    X = dp.phantom_patches(1, dp.PhantomSpec(shape=(40, 32, 32), n_plates=3, n_rods=5))
    assert X.shape == (32, 32, 32, 32)
