import numpy as np
import pytest

from satdown.errors import ValidationError
from satdown.grid import sample_at
from satdown.synthetic import (
    SynthConfig,
    degrade,
    derive_condition,
    generate_field,
    generate_sample,
    sample_stations,
    write_dataset,
)


def small_config(**kw):
    base = dict(seed=3, n_samples=2, hr_size=(32, 32), scale_factor=4,
                n_channels_target=2, n_channels_condition=2, station_count=16,
                condition_scale=1, condition_noise_std=0.0)
    base.update(kw)
    return SynthConfig(**base)


def radial_log_slope(power, kmin=2.0, kmax=8.0):
    """Independent least-squares slope of the radially binned spectrum."""
    h, w = power.shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    k = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    bins = np.arange(1, int(min(h, w) / 2))
    centers, means = [], []
    for b in bins:
        sel = (k >= b - 0.5) & (k < b + 0.5)
        if sel.any():
            centers.append(b)
            means.append(power[sel].mean())
    centers = np.array(centers, dtype=float)
    means = np.array(means)
    use = (centers >= kmin) & (centers <= kmax)
    return np.polyfit(np.log(centers[use]), np.log(means[use]), 1)[0]


class TestGenerateField:
    def test_deterministic(self):
        cfg = small_config()
        a = generate_field(cfg, 5)
        b = generate_field(cfg, 5)
        np.testing.assert_array_equal(a.values, b.values)

    def test_different_indices_differ(self):
        cfg = small_config()
        a = generate_field(cfg, 0)
        b = generate_field(cfg, 1)
        assert np.abs(a.values - b.values).max() > 0.1

    def test_large_exponent_concentrates_variance_at_k1(self):
        cfg = small_config(spectral_exponent=12.0)
        f = generate_field(cfg, 0)
        spec = np.abs(np.fft.fft2(f.values[0])) ** 2
        h, w = spec.shape
        ky = np.fft.fftfreq(h) * h
        kx = np.fft.fftfreq(w) * w
        k = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
        low = spec[(k > 0) & (k <= 1.5)].sum()
        assert low / spec[k > 0].sum() > 0.95

    def test_radial_spectrum_slope_matches_exponent(self):
        # Monte-Carlo estimate over 200 samples; slope within 10 percent
        exponent = 3.0
        cfg = small_config(hr_size=(64, 64), spectral_exponent=exponent,
                           n_channels_target=1)
        acc = np.zeros((64, 64))
        for i in range(200):
            f = generate_field(cfg, i)
            acc += np.abs(np.fft.fft2(f.values[0])) ** 2
        slope = radial_log_slope(acc / 200.0, kmin=2.0, kmax=16.0)
        assert abs(slope + exponent) < 0.1 * exponent

    def test_coordinates_canonical(self):
        f = generate_field(small_config(), 0)
        assert f.lats[0] > f.lats[-1]
        assert np.all(np.diff(f.lons) > 0)
        assert f.periodic_lon


class TestDeriveCondition:
    def test_identity_configuration_reproduces_target(self):
        eye = tuple(tuple(float(i == j) for j in range(2)) for i in range(2))
        cfg = small_config(condition_tanh=False, condition_mixing=eye)
        hr = generate_field(cfg, 0)
        cond = derive_condition(hr, cfg, 0)
        np.testing.assert_allclose(cond.values, hr.values, atol=1e-6)

    def test_pure_noise_mixing_uncorrelated(self):
        zero = tuple(tuple(0.0 for _ in range(2)) for _ in range(2))
        cfg = small_config(condition_mixing=zero, condition_noise_std=1.0)
        cors = []
        for i in range(100):
            hr = generate_field(cfg, i)
            cond = derive_condition(hr, cfg, i)
            cors.append(np.corrcoef(hr.values[0].ravel(), cond.values[0].ravel())[0, 1])
        assert abs(np.mean(cors)) < 0.05

    def test_deterministic(self):
        cfg = small_config(condition_noise_std=0.3)
        hr = generate_field(cfg, 2)
        a = derive_condition(hr, cfg, 2)
        b = derive_condition(hr, cfg, 2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_condition_scale_doubles_grid(self):
        cfg = small_config(condition_scale=2)
        hr = generate_field(cfg, 0)
        cond = derive_condition(hr, cfg, 0)
        assert cond.shape == (2, 64, 64)


class TestDegrade:
    def test_constant(self):
        cfg = small_config()
        hr = generate_field(cfg, 0).with_values(np.full((2, 32, 32), 4.5, dtype=np.float32))
        lr = degrade(hr, 4)
        np.testing.assert_allclose(lr.values, 4.5, atol=1e-6)
        assert lr.shape == (2, 8, 8)

    def test_hand_average_2x2(self):
        cfg = small_config(hr_size=(2, 2), scale_factor=2)
        hr = generate_field(cfg, 0).with_values(
            np.array([[[1.0, 2.0], [3.0, 4.0]]] * 2, dtype=np.float32)
        )
        lr = degrade(hr, 2)
        assert lr.values[0, 0, 0] == pytest.approx(2.5)

    def test_degrade_of_nearest_upsample_is_identity(self):
        cfg = small_config()
        lr0 = degrade(generate_field(cfg, 1), 4)
        up = np.repeat(np.repeat(lr0.values, 4, axis=1), 4, axis=2)
        hr = generate_field(cfg, 1).with_values(up)
        lr1 = degrade(hr, 4)
        np.testing.assert_allclose(lr1.values, lr0.values, atol=1e-6)

    def test_commutes_with_affine(self):
        cfg = small_config()
        hr = generate_field(cfg, 0)
        a, b = 2.5, -1.25
        lhs = degrade(hr.with_values(a * hr.values + b), 4).values
        rhs = a * degrade(hr, 4).values + b
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_divisibility_enforced(self):
        cfg = small_config()
        hr = generate_field(cfg, 0)
        with pytest.raises(ValidationError):
            degrade(hr, 5)

    def test_lr_coordinates_are_block_means(self):
        cfg = small_config()
        hr = generate_field(cfg, 0)
        lr = degrade(hr, 4)
        np.testing.assert_allclose(lr.lats, hr.lats.reshape(8, 4).mean(axis=1))


class TestSampleStations:
    def test_zero_noise_equals_bilinear_samples(self):
        cfg = small_config(obs_noise_std=0.0)
        hr = generate_field(cfg, 0)
        ss = sample_stations(hr, cfg, 0)
        for s in ss:
            for name, obs in s.observations.items():
                assert obs == pytest.approx(sample_at(hr, s.lat, s.lon, name), abs=1e-9)

    def test_two_seeds_differ(self):
        hr = generate_field(small_config(), 0)
        a = sample_stations(hr, small_config(seed=1), 0)
        b = sample_stations(hr, small_config(seed=2), 0)
        assert any(x.lat != y.lat for x, y in zip(a, b))

    def test_noise_mean_clt(self):
        # mean(obs - true) over 1e4 stations within 3*std/100
        cfg = small_config(station_count=10_000, obs_noise_std=0.5)
        hr = generate_field(cfg, 0)
        ss = sample_stations(hr, cfg, 0)
        diffs = [
            s.observations["var0"] - sample_at(hr, s.lat, s.lon, "var0") for s in ss
        ]
        assert abs(np.mean(diffs)) < 3 * 0.5 / 100.0


class TestEndToEnd:
    def test_triple_deterministic(self):
        cfg = small_config(condition_noise_std=0.1, obs_noise_std=0.2)
        a = generate_sample(cfg, 3)
        b = generate_sample(cfg, 3)
        np.testing.assert_array_equal(a.hr.values, b.hr.values)
        np.testing.assert_array_equal(a.condition.values, b.condition.values)
        np.testing.assert_array_equal(a.lr.values, b.lr.values)
        assert [s.observations for s in a.stations] == [s.observations for s in b.stations]

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SynthConfig(hr_size=(30, 32), scale_factor=4)
        with pytest.raises(ValidationError):
            SynthConfig(spectral_exponent=0.0)
        with pytest.raises(ValidationError):
            SynthConfig(obs_noise_std=-1.0)

    def test_write_dataset(self, tmp_path):
        cfg = small_config(n_samples=2)
        index = write_dataset(cfg, tmp_path / "ds")
        assert len(index) == 2
        for entry in index:
            for key in ("hr", "condition", "lr", "stations"):
                assert (tmp_path / "ds" / entry[key]).exists()
