import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acrnet import csi
from acrnet.errors import DataError, FormatError, ShapeError, TruncatedError, VersionError


@pytest.mark.parametrize("n", [1, 8, 32, 1024])
def test_dft_matrix_unitary(n):
    f = csi.dft_matrix(n)
    np.testing.assert_allclose(f @ f.conj().T, np.eye(n), atol=1e-6)


def test_fft_transform_matches_matrix_products(rng):
    h = rng.standard_normal((64, 16)) + 1j * rng.standard_normal((64, 16))
    expect = csi.dft_matrix(64) @ h @ csi.dft_matrix(16).conj().T
    np.testing.assert_allclose(csi.to_angular_delay(h), expect, atol=1e-10)
    np.testing.assert_allclose(csi.from_angular_delay(expect), h, atol=1e-10)


def test_paths_land_in_their_delay_rows(rng):
    h = csi.synthetic_channel(rng, 3, 256, 8, 5, delays=[0, 2, 4], angles=[0.1, -0.3, 0.5],
                              gains=[1, 1j, -0.5])
    hp = csi.to_angular_delay(h)
    energy = np.sum(np.abs(hp) ** 2, axis=1)
    assert set(np.nonzero(energy > 1e-20)[0]) == {0, 2, 4}


def test_truncation_roundtrip(rng):
    hs, ha = csi.generate_raw(4, seed=2, nc=256, nt=16, na=16)
    back = csi.from_angular_delay(csi.zero_fill(ha, 256))
    np.testing.assert_allclose(back, hs, atol=1e-5)
    with pytest.raises(ShapeError):
        csi.truncate(ha, 32)


def test_planes_roundtrip(rng):
    z = rng.standard_normal((3, 4, 5)) + 1j * rng.standard_normal((3, 4, 5))
    assert csi.to_planes(z).shape == (3, 2, 4, 5)
    np.testing.assert_array_equal(csi.from_planes(csi.to_planes(z)), z)


@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_normalization_fit_maps_into_unit_interval(seed, scale):
    raw = np.random.default_rng(seed).standard_normal(50) * scale
    values, rec, rate = csi.normalize(raw)
    assert rate == 0.0
    assert values.min() >= 0 and values.max() <= 1
    np.testing.assert_allclose(rec.invert(values), raw, rtol=1e-5, atol=1e-6 * scale)


def test_normalization_clamps_and_reports():
    rec = csi.Normalization(0.5)
    values, rate = rec.apply(np.array([-2.0, 0.0, 0.5, 3.0]))
    np.testing.assert_array_equal(values, [0, 0.5, 0.75, 1])
    assert rate == 0.5
    with pytest.raises(DataError):
        csi.Normalization.fit(np.zeros(4))


def test_nmse_values():
    a = np.array([[0.0, 1.0], [0.25, 0.75]])
    assert csi.nmse(a, a).db == float("-inf")
    assert csi.nmse(a, np.full_like(a, 0.5)).linear == pytest.approx(1.0)
    hat = a.copy()
    hat[0] = 0.5 + 0.9 * (a[0] - 0.5)
    assert csi.nmse(a, hat).linear == pytest.approx((0.01 + 0) / 2)
    with pytest.raises(ShapeError):
        csi.nmse(a, a[:1])
    with pytest.raises(DataError):
        csi.nmse(np.full((1, 2), 0.5), np.zeros((1, 2)))


@given(seed=st.integers(0, 10**6), gain=st.floats(0.1, 2.0))
def test_nmse_scale_property(seed, gain):
    a = np.random.default_rng(seed).uniform(0, 1, (3, 10))
    hat = 0.5 + gain * (a - 0.5)
    assert csi.nmse(a, hat).linear == pytest.approx((gain - 1) ** 2, rel=1e-9, abs=1e-15)


def test_generate_is_deterministic_and_shaped():
    a = csi.generate_synthetic(6, seed=3, nc=128, nt=8, na=8)
    b = csi.generate_synthetic(6, seed=3, nc=128, nt=8, na=8)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.samples.shape == (6, 2, 8, 8) and a.samples.dtype == np.float32
    assert a.scenario == csi.Scenario.SYNTHETIC
    with pytest.raises(DataError):
        csi.generate_raw(1, 0, paths=0)


def test_validation_split_reuses_record():
    env = csi.Environment.draw(seed=4, max_delay=6)
    train = csi.generate_synthetic(20, seed=0, nc=64, nt=8, na=8, environment=env)
    val = csi.generate_synthetic(10, seed=1, nc=64, nt=8, na=8, environment=env,
                                 record=train.normalization)
    assert val.normalization == train.normalization
    assert train.scenario == csi.Scenario.CLUSTERED
    assert 0 <= val.clamp_rate < 0.05


def test_environment_validation_and_support():
    env = csi.Environment.draw(seed=0, clusters=3, max_delay=10, delay_spread=2)
    assert len(env.delays) == 3 and env.max_delay <= 10
    assert np.mean(env.powers) == pytest.approx(1.0)
    d, a, g = env.paths(np.random.default_rng(0), 50)
    assert d.max() < env.max_delay and d.min() >= 0
    with pytest.raises(DataError):
        csi.Environment.draw(clusters=0)
    with pytest.raises(DataError):
        csi.Environment.draw(max_delay=2, delay_spread=2)


def test_dataset_roundtrip_bit_exact(tmp_path):
    ds = csi.generate_synthetic(5, seed=9, nc=64, nt=8, na=8)
    p = tmp_path / "d.csid"
    csi.dataset_save(ds, p)
    back = csi.dataset_load(p)
    assert back.samples.tobytes() == ds.samples.tobytes()
    assert back.normalization == ds.normalization
    assert back.scenario == ds.scenario
    np.testing.assert_allclose(back.raw(), ds.raw())


@pytest.mark.parametrize("mutate,err", [
    (lambda b: b"XXXX" + b[4:], FormatError),
    (lambda b: b[:4] + b"\x09\x00" + b[6:], VersionError),
    (lambda b: b[:-3], TruncatedError),
    (lambda b: b[:10], TruncatedError),
    (lambda b: b + b"\0" * 4, ShapeError),
    (lambda b: b[:14] + b"\x07" + b[15:], FormatError),
])
def test_dataset_load_errors(tmp_path, mutate, err):
    ds = csi.generate_synthetic(2, seed=0, nc=32, nt=4, na=4)
    p = tmp_path / "d.csid"
    csi.dataset_save(ds, p)
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(err):
        csi.dataset_load(p)


def test_import_raw(tmp_path):
    arr = np.random.default_rng(0).uniform(0, 1, (3, 2, 4, 4)).astype("<f4")
    p = tmp_path / "raw.bin"
    p.write_bytes(arr.tobytes())
    ds = csi.import_raw(p, na=4, nt=4)
    np.testing.assert_array_equal(ds.samples, arr)
    assert ds.scenario == csi.Scenario.IMPORTED
    p.write_bytes(arr.tobytes()[:-4])
    with pytest.raises(ShapeError):
        csi.import_raw(p, na=4, nt=4)
    p.write_bytes((arr * 3).tobytes())
    with pytest.raises(DataError):
        csi.import_raw(p, na=4, nt=4)


def test_full_size_sample_survives_truncation():
    hs, ha = csi.generate_raw(1, seed=5)
    back = csi.from_angular_delay(csi.zero_fill(ha, 1024))
    rel = np.linalg.norm(back - hs) / np.linalg.norm(hs)
    assert rel < 1e-5


def test_inverse_of_untruncated_transform(rng):
    h = rng.standard_normal((1024, 32)) + 1j * rng.standard_normal((1024, 32))
    np.testing.assert_allclose(csi.from_angular_delay(csi.to_angular_delay(h)), h, atol=1e-6)


def test_dataset_file_size_arithmetic(tmp_path):
    ds = csi.Dataset(np.full((2000, 2, 32, 32), 0.5, np.float32), csi.Normalization(1.0))
    path = tmp_path / "big.csid"
    csi.dataset_save(ds, path)
    assert path.stat().st_size == csi.HEADER_SIZE + 2000 * 2 * 32 * 32 * 4


def test_constant_midpoint_predictor_scores_zero_db():
    ds = csi.generate_synthetic(16, seed=3, nc=128, na=32)
    assert csi.nmse(ds.samples, np.full_like(ds.samples, 0.5)).db == pytest.approx(0.0, abs=1e-12)
