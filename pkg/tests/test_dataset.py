import math

import numpy as np
import pytest

from cvmix.dataset import (
    ArrayFeatureSource,
    FeatureMap,
    FileFeatureSource,
    Manifest,
    PairRecord,
    check_city_disjoint,
    load_manifest,
    read_feature_file,
    save_manifest,
    synthetic_encoder,
    write_feature_file,
    write_synthetic_dataset,
)
from cvmix.errors import DataError
from cvmix.sampling import GeoPoint, haversine


def make_record(i, city="zurich", lat=47.37, lon=8.54, covering=None):
    return PairRecord(
        id=i,
        city=city,
        point=GeoPoint.wgs84(lat, lon),
        ground_ref=f"features/g{i}.cvfm",
        sat_ref=f"features/s{i}.cvfm",
        ground_date="2021-05-01" if i % 2 == 0 else None,
        sat_date=None,
        covering_ids=covering,
    )


class TestManifest:
    def test_empty_manifest_valid(self, tmp_path):
        m = Manifest(coordinate_mode="WGS84", split="train", records=[])
        p = tmp_path / "empty.tsv"
        save_manifest(p, m)
        back = load_manifest(p)
        assert back.records == []
        assert back.coordinate_mode == "WGS84"

    def test_round_trip_field_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        records = []
        for i in range(1000):
            records.append(PairRecord(
                id=i,
                city=f"city{i % 7}",
                point=GeoPoint.wgs84(float(rng.uniform(-89, 89)),
                                     float(rng.uniform(-179, 179))),
                ground_ref=f"g/{i}.cvfm",
                sat_ref=f"s/{i}.cvfm",
                ground_date="2020-01-02" if i % 3 == 0 else None,
                sat_date="2024-12-31" if i % 5 == 0 else None,
                covering_ids=(i, (i + 1) % 1000) if i % 4 == 0 else None,
            ))
        m = Manifest(coordinate_mode="WGS84", split="test", records=records)
        p = tmp_path / "big.tsv"
        save_manifest(p, m)
        back = load_manifest(p)
        assert back.split == "test"
        assert back.records == records

    def test_lat_range_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text(
            "# coordinate_mode=WGS84 split=train\n"
            "0\tcity\t91.0\t0.0\tg.cvfm\ts.cvfm\t-\t-\t-\n"
        )
        with pytest.raises(DataError, match=":2"):
            load_manifest(p)

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "dup.tsv"
        p.write_text(
            "# coordinate_mode=WGS84 split=train\n"
            "0\tcity\t1.0\t0.0\tg.cvfm\ts.cvfm\t-\t-\t-\n"
            "0\tcity\t2.0\t0.0\tg2.cvfm\ts2.cvfm\t-\t-\t-\n"
        )
        with pytest.raises(DataError, match="duplicate"):
            load_manifest(p)

    def test_missing_header_rejected(self, tmp_path):
        p = tmp_path / "nohdr.tsv"
        p.write_text("0\tcity\t1.0\t0.0\tg.cvfm\ts.cvfm\t-\t-\t-\n")
        with pytest.raises(DataError, match="header"):
            load_manifest(p)

    def test_field_count_error_has_line(self, tmp_path):
        p = tmp_path / "short.tsv"
        p.write_text(
            "# coordinate_mode=WGS84 split=train\n"
            "0\tcity\t1.0\n"
        )
        with pytest.raises(DataError, match=":2.*9 fields"):
            load_manifest(p)

    def test_utm_mode(self, tmp_path):
        rec = PairRecord(id=1, city="canberra",
                         point=GeoPoint.utm(694000.0, 6090000.0),
                         ground_ref="g.cvfm", sat_ref="s.cvfm")
        m = Manifest(coordinate_mode="UTM", split="train", records=[rec])
        p = tmp_path / "utm.tsv"
        save_manifest(p, m)
        back = load_manifest(p)
        assert back.records[0].point.easting == 694000.0

    def test_city_disjointness(self):
        train = Manifest("WGS84", "train", [make_record(0, city="a")])
        test = Manifest("WGS84", "test", [make_record(1, city="a")])
        with pytest.raises(DataError, match="share cities"):
            check_city_disjoint(train, test)
        test_ok = Manifest("WGS84", "test", [make_record(1, city="b")])
        check_city_disjoint(train, test_ok)

    def test_bad_date_rejected(self):
        with pytest.raises(ValueError, match="ISO-8601"):
            PairRecord(id=0, city="x", point=GeoPoint.wgs84(0, 0),
                       ground_ref="g", sat_ref="s", ground_date="01/02/2020")


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tokens = rng.normal(size=(256, 768)).astype(np.float32)
        fmap = FeatureMap(h=16, w=16, tokens=tokens)
        p = tmp_path / "f.cvfm"
        write_feature_file(p, fmap)
        back = read_feature_file(p)
        assert (back.h, back.w, back.depth) == (16, 16, 768)
        assert np.array_equal(back.tokens.astype(np.float32), tokens)
        # byte-stable across a write->read->write cycle
        p2 = tmp_path / "f2.cvfm"
        write_feature_file(p2, back)
        assert p.read_bytes() == p2.read_bytes()

    def test_minimal_payload(self, tmp_path):
        p = tmp_path / "one.cvfm"
        write_feature_file(p, FeatureMap(h=1, w=1, tokens=np.array([[2.5]])))
        assert p.stat().st_size == 4 + 16 + 4
        back = read_feature_file(p)
        assert back.tokens[0, 0] == 2.5

    def test_corrupted_magic(self, tmp_path):
        p = tmp_path / "bad.cvfm"
        write_feature_file(p, FeatureMap(h=1, w=1, tokens=np.array([[1.0]])))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"JUNK"
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_feature_file(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.cvfm"
        write_feature_file(p, FeatureMap(h=2, w=2, tokens=np.ones((4, 3))))
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(DataError, match="truncated"):
            read_feature_file(p)

    def test_dim_overflow_guard(self, tmp_path):
        import struct
        p = tmp_path / "huge.cvfm"
        p.write_bytes(b"CVFM" + struct.pack("<IIII", 1, 1 << 14, 1 << 14, 1 << 10))
        with pytest.raises(DataError, match="implausible"):
            read_feature_file(p)


class TestSyntheticEncoder:
    def test_determinism(self):
        a = synthetic_encoder(seed=7, pair_count=16, h=4, w=4, depth=8)
        b = synthetic_encoder(seed=7, pair_count=16, h=4, w=4, depth=8)
        assert np.array_equal(a.ground, b.ground)
        assert np.array_equal(a.satellite, b.satellite)
        assert a.manifest.records == b.manifest.records
        c = synthetic_encoder(seed=8, pair_count=16, h=4, w=4, depth=8)
        assert not np.array_equal(a.ground, c.ground)

    def test_sigma_zero_views_are_deterministic_functions_of_latent(self):
        a = synthetic_encoder(seed=3, pair_count=8, h=4, w=4, depth=8,
                              noise_sigma=0.0)
        b = synthetic_encoder(seed=3, pair_count=8, h=4, w=4, depth=8,
                              noise_sigma=0.0)
        assert np.array_equal(a.ground, b.ground)
        assert np.array_equal(a.satellite, b.satellite)

    def test_latent_similarity_margin(self):
        # matched ground/satellite pairs share a latent: its self dot product
        # dominates every cross-pair latent dot product
        data = synthetic_encoder(seed=11, pair_count=64, h=8, w=8, depth=32,
                                 noise_sigma=0.0)
        g = data.ground.reshape(64, -1).astype(np.float64)
        # with sigma=0 the ground view IS the latent
        sims = g @ g.T
        diag = np.diag(sims)
        off = sims - np.diag(diag)
        assert diag.min() > off.max() * 1.5

    def test_coordinates_spaced_about_100m(self):
        data = synthetic_encoder(seed=5, pair_count=64, h=4, w=4, depth=8)
        pts = [rec.point for rec in data.manifest.records]
        nn_dists = []
        for i, p in enumerate(pts):
            best = min(haversine(p, q) for j, q in enumerate(pts) if j != i)
            nn_dists.append(best)
        assert min(nn_dists) > 60.0
        assert max(nn_dists) < 140.0

    def test_pair_count_guard(self):
        with pytest.raises(ValueError):
            synthetic_encoder(seed=0, pair_count=1)

    def test_write_synthetic_dataset(self, tmp_path):
        data = synthetic_encoder(seed=9, pair_count=4, h=4, w=4, depth=8)
        manifest_path = write_synthetic_dataset(tmp_path, data)
        m = load_manifest(manifest_path)
        assert len(m.records) == 4
        fmap = read_feature_file(tmp_path / m.records[0].ground_ref)
        assert np.array_equal(fmap.tokens.astype(np.float32), data.ground[0])


class TestFeatureSources:
    def test_array_source(self):
        data = synthetic_encoder(seed=2, pair_count=4, h=4, w=4, depth=8)
        src = ArrayFeatureSource.from_synthetic(data)
        rec = data.manifest.records[2]
        assert np.allclose(src.tokens(rec, "ground"),
                           data.ground[2].astype(np.float64))
        assert np.allclose(src.tokens(rec, "satellite"),
                           data.satellite[2].astype(np.float64))

    def test_file_source_and_variants(self, tmp_path):
        data = synthetic_encoder(seed=4, pair_count=3, h=4, w=4, depth=8)
        write_synthetic_dataset(tmp_path, data)
        src = FileFeatureSource(tmp_path)
        rec = data.manifest.records[1]
        base = src.tokens(rec, "ground")
        assert np.array_equal(base.astype(np.float32), data.ground[1])
        assert src.variant_count(rec, "ground") == 1
        # drop an augmented variant next to the base file
        aug = FeatureMap(h=4, w=4, tokens=data.ground[1] + 1.0)
        write_feature_file(tmp_path / "features/g000001.aug1.cvfm", aug)
        assert src.variant_count(rec, "ground") == 2
        got = src.tokens(rec, "ground", variant=1)
        assert np.allclose(got, data.ground[1].astype(np.float64) + 1.0, atol=1e-6)

    def test_missing_file_names_record(self, tmp_path):
        rec = make_record(5)
        src = FileFeatureSource(tmp_path)
        with pytest.raises(DataError, match="record id 5"):
            src.tokens(rec, "ground")
