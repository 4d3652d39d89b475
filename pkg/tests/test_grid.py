import numpy as np
import pytest
from datetime import datetime, timezone

from satdown.errors import FormatError, MaskedValueError, OutOfDomainError, ValidationError
from satdown.grid import (
    GridField,
    NormStats,
    Station,
    StationSet,
    compute_norm_stats,
    denormalize,
    load_grid,
    load_stations,
    normalize,
    resize,
    sample_at,
    save_grid,
    save_stations,
)

TS = datetime(2020, 1, 1, tzinfo=timezone.utc)


def make_field(values, periodic=True, mask=None):
    values = np.asarray(values, dtype=np.float32)
    c, h, w = values.shape
    lats = 90.0 - (np.arange(h) + 0.5) * (180.0 / h)
    lons = np.arange(w) * (360.0 / w)
    channels = tuple((f"var{i}", "1") for i in range(c))
    return GridField(values, lats, lons, channels, TS, mask=mask, periodic_lon=periodic)


def random_field(c=2, h=8, w=16, seed=0, periodic=True):
    rng = np.random.default_rng(seed)
    return make_field(rng.standard_normal((c, h, w)), periodic=periodic)


class TestGridField:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            GridField(np.zeros((2, 4, 4)), np.arange(4), np.arange(5),
                      (("a", "1"), ("b", "1")), TS)

    def test_constant_lats_rejected(self):
        with pytest.raises(ValidationError):
            GridField(np.zeros((1, 4, 4)), np.ones(4), np.arange(4), (("a", "1"),), TS)

    def test_nonfinite_unmasked_rejected(self):
        vals = np.zeros((1, 4, 4), dtype=np.float32)
        vals[0, 1, 1] = np.nan
        with pytest.raises(ValidationError):
            make_field(vals)

    def test_masked_nonfinite_allowed(self):
        vals = np.zeros((1, 4, 4), dtype=np.float32)
        vals[0, 1, 1] = np.nan
        mask = np.ones((4, 4), dtype=bool)
        mask[1, 1] = False
        f = make_field(vals, mask=mask)
        assert f.mask is not None

    def test_values_immutable(self):
        f = random_field()
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 5.0


class TestContainerIO:
    def test_roundtrip_paper_era5_shape(self, tmp_path):
        # 4 channels at 720x1440
        f = make_field(np.zeros((4, 720, 1440), dtype=np.float32))
        save_grid(f, tmp_path / "era5.npz")
        g = load_grid(tmp_path / "era5.npz")
        assert g.shape == (4, 720, 1440)
        assert g.channel_names == f.channel_names

    def test_roundtrip_paper_gridsat_shape(self, tmp_path):
        # 3 channels at 2000x5143
        f = make_field(np.zeros((3, 2000, 5143), dtype=np.float32))
        save_grid(f, tmp_path / "sat.npz")
        g = load_grid(tmp_path / "sat.npz")
        assert g.shape == (3, 2000, 5143)

    def test_roundtrip_preserves_values_and_meta(self, tmp_path):
        f = random_field(seed=3)
        save_grid(f, tmp_path / "f.npz")
        g = load_grid(tmp_path / "f.npz")
        np.testing.assert_array_equal(g.values, f.values)
        np.testing.assert_allclose(g.lats, f.lats)
        assert g.channels == f.channels
        assert g.timestamp == f.timestamp
        assert g.periodic_lon == f.periodic_lon

    def test_loader_reorders_to_canon(self, tmp_path):
        # ascending lats on disk come back descending with values flipped
        f = random_field(seed=4)
        save_grid(f, tmp_path / "f.npz")
        import json
        arrays = dict(np.load(tmp_path / "f.npz"))
        arrays["lats"] = arrays["lats"][::-1]
        arrays["values"] = arrays["values"][:, ::-1, :]
        from satdown.containers import save_container
        meta = json.loads((tmp_path / "f.npz.json").read_text())
        save_container(tmp_path / "g.npz", arrays, meta)
        g = load_grid(tmp_path / "g.npz")
        np.testing.assert_array_equal(g.values, f.values)
        assert g.lats[0] > g.lats[-1]

    def test_constant_lats_on_disk_rejected(self, tmp_path):
        import json
        f = random_field()
        save_grid(f, tmp_path / "f.npz")
        arrays = dict(np.load(tmp_path / "f.npz"))
        arrays["lats"] = np.zeros_like(arrays["lats"])
        from satdown.containers import save_container
        meta = json.loads((tmp_path / "f.npz.json").read_text())
        save_container(tmp_path / "bad.npz", arrays, meta)
        with pytest.raises(ValidationError):
            load_grid(tmp_path / "bad.npz")

    def test_malformed_container(self, tmp_path):
        p = tmp_path / "junk.npz"
        p.write_bytes(b"this is not a zip file")
        with pytest.raises(FormatError):
            load_grid(p)

    def test_missing_sidecar(self, tmp_path):
        f = random_field()
        save_grid(f, tmp_path / "f.npz")
        (tmp_path / "f.npz.json").unlink()
        with pytest.raises(FormatError):
            load_grid(tmp_path / "f.npz")

    def test_save_is_byte_deterministic(self, tmp_path):
        f = random_field(seed=9)
        save_grid(f, tmp_path / "a.npz")
        save_grid(f, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


class TestNormalize:
    def test_constant_field_maps_to_zero(self):
        f = make_field(np.full((2, 4, 4), 7.0))
        stats = NormStats(f.channel_names, np.array([7.0, 7.0]), np.array([2.0, 3.0]))
        g = normalize(f, stats)
        np.testing.assert_allclose(g.values, 0.0)

    def test_round_trip(self):
        f = random_field(seed=1)
        stats = compute_norm_stats([f])
        g = denormalize(normalize(f, stats), stats)
        np.testing.assert_allclose(g.values, f.values, rtol=1e-6, atol=1e-6)

    def test_identity_stats_leave_field_unchanged(self):
        f = random_field(seed=2)
        stats = NormStats(f.channel_names, np.zeros(2), np.ones(2))
        g = normalize(f, stats)
        np.testing.assert_array_equal(g.values, f.values)

    def test_channel_mismatch(self):
        f = random_field()
        stats = NormStats(("other",), np.zeros(1), np.ones(1))
        with pytest.raises(ValidationError):
            normalize(f, stats)

    def test_std_positive_required(self):
        with pytest.raises(ValidationError):
            NormStats(("a",), np.zeros(1), np.zeros(1))


class TestSampleAt:
    def test_exact_node(self):
        f = random_field(seed=5)
        for i, j in [(0, 0), (3, 7), (7, 15)]:
            got = sample_at(f, float(f.lats[i]), float(f.lons[j]), "var0")
            assert got == pytest.approx(float(f.values[0, i, j]), abs=1e-6)

    def test_center_of_four_cells(self):
        # hand bilinear: mean of the four corners at the cell center
        vals = np.zeros((1, 2, 2), dtype=np.float32)
        vals[0] = [[1.0, 2.0], [3.0, 4.0]]
        lats = np.array([10.0, 0.0])
        lons = np.array([0.0, 10.0])
        f = GridField(vals, lats, lons, (("v", "1"),), TS, periodic_lon=False)
        assert sample_at(f, 5.0, 5.0, "v") == pytest.approx(2.5, abs=1e-9)

    def test_constant_field_anywhere(self):
        f = make_field(np.full((1, 6, 12), 3.25))
        rng = np.random.default_rng(0)
        for _ in range(20):
            lat = rng.uniform(f.lats.min(), f.lats.max())
            lon = rng.uniform(0, 360)
            assert sample_at(f, lat, lon, "var0") == pytest.approx(3.25, abs=1e-6)

    def test_linearity(self):
        # sample_at(aF + bG) == a sample_at(F) + b sample_at(G) within 1e-9.
        # Integer values and binary-fraction coefficients keep the combined
        # field exactly representable in float32, so only the operation's own
        # arithmetic is under test.
        rng = np.random.default_rng(11)
        F = make_field(rng.integers(-8, 8, size=(2, 8, 16)).astype(np.float32))
        G = make_field(rng.integers(-8, 8, size=(2, 8, 16)).astype(np.float32))
        a, b = 1.5, -0.5
        H = F.with_values(a * F.values + b * G.values)
        for _ in range(50):
            lat = rng.uniform(F.lats.min(), F.lats.max())
            lon = rng.uniform(0, 360)
            ch = "var0"
            lhs = sample_at(H, lat, lon, ch)
            rhs = a * sample_at(F, lat, lon, ch) + b * sample_at(G, lat, lon, ch)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_longitude_wrap(self):
        f = random_field(seed=6)
        rng = np.random.default_rng(1)
        for _ in range(25):
            lat = rng.uniform(f.lats.min(), f.lats.max())
            lon = rng.uniform(0, 360)
            a = sample_at(f, lat, lon, "var1")
            b = sample_at(f, lat, lon + 360.0, "var1")
            assert a == pytest.approx(b, abs=1e-9)

    def test_wrap_segment_interpolates_last_to_first(self):
        f = random_field(seed=7)
        # halfway between the last column and the first (wrapped)
        lon = float(f.lons[-1]) + (360.0 - float(f.lons[-1])) / 2.0
        lat = float(f.lats[3])
        expected = 0.5 * (f.values[0, 3, -1] + f.values[0, 3, 0])
        assert sample_at(f, lat, lon, "var0") == pytest.approx(float(expected), abs=1e-6)

    def test_out_of_domain_lat(self):
        f = random_field()
        with pytest.raises(OutOfDomainError):
            sample_at(f, 89.99, 10.0, "var0")

    def test_out_of_domain_lon_nonperiodic(self):
        f = random_field(periodic=False)
        with pytest.raises(OutOfDomainError):
            sample_at(f, 0.0, 359.9, "var0")

    def test_masked_neighborhood(self):
        vals = np.zeros((1, 4, 8), dtype=np.float32)
        mask = np.ones((4, 8), dtype=bool)
        mask[1, 2] = False
        f = make_field(vals, mask=mask)
        lat = float(f.lats[1]) - 1.0
        lon = float(f.lons[2]) + 1.0
        with pytest.raises(MaskedValueError):
            sample_at(f, lat, lon, "var0")

    def test_unknown_channel(self):
        f = random_field()
        with pytest.raises(ValidationError):
            sample_at(f, 0.0, 0.0, "nope")


class TestResize:
    def test_constant_maps_to_constant(self):
        f = make_field(np.full((2, 4, 4), 1.5))
        for method in ("bilinear", "bicubic"):
            g = resize(f, 7, 9, method)
            np.testing.assert_allclose(g.values, 1.5, atol=1e-6)
            assert g.shape == (2, 7, 9)

    def test_bilinear_2x2_to_2x3_middle_column(self):
        vals = np.array([[[0.0, 1.0], [0.0, 1.0]]], dtype=np.float32)
        f = GridField(vals, np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                      (("v", "1"),), TS, periodic_lon=False)
        g = resize(f, 2, 3, "bilinear")
        np.testing.assert_allclose(g.values[0, :, 1], 0.5, atol=1e-7)

    def test_bilinear_preserves_constant_mean_exactly(self):
        f = make_field(np.full((1, 5, 5), 2.0))
        g = resize(f, 11, 13, "bilinear")
        assert float(g.values.mean()) == pytest.approx(2.0, abs=0)

    def test_round_trip_band_limited(self):
        # band-limited (k <= 2) field survives upscale 2x then downscale
        h, w = 16, 16
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        vals = (np.sin(2 * np.pi * yy / h) * np.cos(2 * np.pi * 2 * xx / w))[None].astype(np.float32)
        f = make_field(vals)
        up = resize(f, 2 * h, 2 * w, "bicubic")
        back = resize(up, h, w, "bicubic")
        assert float(np.abs(back.values - f.values).max()) < 0.02

    def test_dims_too_small(self):
        f = random_field()
        with pytest.raises(ValidationError):
            resize(f, 1, 8)

    def test_unknown_method(self):
        f = random_field()
        with pytest.raises(ValidationError):
            resize(f, 4, 4, "lanczos")


class TestStations:
    def test_load_three_rows(self, tmp_path):
        p = tmp_path / "st.csv"
        p.write_text("station_id,lat,lon,t2m,u10\ns1,10.0,20.0,280.1,3.5\n"
                     "s2,-5.0,355.0,290.0,\ns3,0.0,180.0,,1.0\n")
        ss = load_stations(p)
        assert len(ss) == 3
        assert ss.stations[0].observations == {"t2m": 280.1, "u10": 3.5}
        assert ss.stations[1].observations == {"t2m": 290.0}
        assert ss.stations[2].observations == {"u10": 1.0}

    def test_negative_lon_normalized(self, tmp_path):
        p = tmp_path / "st.csv"
        p.write_text("station_id,lat,lon,t2m\ns1,0.0,-10.0,280.0\n")
        ss = load_stations(p)
        assert ss.stations[0].lon == pytest.approx(350.0)

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "st.csv"
        p.write_text("station_id,lat,lon,t2m\ns1,0,0,1\ns1,1,1,2\n")
        with pytest.raises(ValidationError):
            load_stations(p)

    def test_missing_column_rejected(self, tmp_path):
        p = tmp_path / "st.csv"
        p.write_text("station,lat,lon\ns1,0,0\n")
        with pytest.raises(FormatError):
            load_stations(p)

    def test_lat_range_enforced(self):
        with pytest.raises(ValidationError):
            StationSet((Station("x", 95.0, 0.0, {}),))

    def test_roundtrip(self, tmp_path):
        ss = StationSet((
            Station("a", 10.0, 350.0, {"t": 1.5}),
            Station("b", -10.0, 20.0, {"t": 2.5, "u": 0.25}),
        ))
        save_stations(ss, tmp_path / "out.csv", ["t", "u"])
        back = load_stations(tmp_path / "out.csv")
        assert back.stations[0].observations["t"] == 1.5
        assert back.stations[1].observations == {"t": 2.5, "u": 0.25}

    def test_split_disjoint_and_deterministic(self):
        ss = StationSet(tuple(Station(f"s{i}", 0.0, float(i), {"t": 1.0}) for i in range(30)))
        a1, b1 = ss.split(0.5, seed=3)
        a2, b2 = ss.split(0.5, seed=3)
        assert [s.station_id for s in a1] == [s.station_id for s in a2]
        assert {s.station_id for s in a1}.isdisjoint({s.station_id for s in b1})
        assert len(a1) + len(b1) == 30
