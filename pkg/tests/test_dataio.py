import json

import numpy as np
import pytest

from neuvec.dataio import (ObservationRecord, build_application_plan, build_dataset, ingest_csv, normalize,
                           plan_groups, subsample_per_float)
from neuvec.errors import EmptyDataset, InsufficientNeighbors, MissingColumn, ParseError
from neuvec.linalg import Rng

HEADER = "platform,yr,lon,lat,pres,doy,temp\n"
CMAP = {"float_id": "platform", "year": "yr", "depth": "pres", "day_of_year": "doy", "response": "temp"}


def write(tmp_path, body, header=HEADER):
    p = tmp_path / "obs.csv"
    p.write_text(header + body)
    return p


def synthetic_records(n_floats=6, per_float=10, years=(2010, 2011), seed=0):
    r = Rng(seed)
    recs = []
    for year in years:
        for f in range(n_floats):
            base = r.uniform(2) * 40.0
            for _ in range(per_float):
                lon, lat = base + r.uniform(2)
                recs.append(ObservationRecord(f"F{f}", year, float(lon), float(lat),
                                              float(r.uniform() * 2000.0), float(1 + r.uniform() * 58.0),
                                              float(r.normal())))
    return recs


# -- ingestion --------------------------------------------------------------------

def test_ingest_fixture(tmp_path):
    path = write(tmp_path, "A1,2015,-30.5,10.25,5.0,33,24.5\n"
                           "A1,2015,-30.4,10.30,105.5,33,18.0\n"
                           "B7,2016,150.0,-20.0,1500,50,3.75\n")
    out = ingest_csv(path, CMAP)
    assert out.skipped == 0
    assert out.records == [
        ObservationRecord("A1", 2015, -30.5, 10.25, 5.0, 33.0, 24.5),
        ObservationRecord("A1", 2015, -30.4, 10.30, 105.5, 33.0, 18.0),
        ObservationRecord("B7", 2016, 150.0, -20.0, 1500.0, 50.0, 3.75),
    ]


def test_ingest_empty_data_section(tmp_path):
    out = ingest_csv(write(tmp_path, ""), CMAP)
    assert out.records == [] and out.skipped == 0


def test_ingest_skips_non_numeric(tmp_path):
    path = write(tmp_path, "A1,2015,1,2,deep,3,4\nA1,2015,1,2,3,3,4\n")
    out = ingest_csv(path, CMAP)
    assert out.skipped == 1 and out.skipped_rows == [2] and len(out.records) == 1


def test_ingest_skips_missing_and_nonfinite(tmp_path):
    path = write(tmp_path, ",2015,1,2,3,3,4\nA1,2015,1,2,3,3,nan\nA1,2015,1,2,3,3,\n")
    assert ingest_csv(path, CMAP).skipped == 3


def test_ingest_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        ingest_csv(write(tmp_path, "", header="platform,yr,lon,lat,doy,temp\n"), CMAP)


def test_ingest_parse_error_row(tmp_path):
    with pytest.raises(ParseError) as info:
        ingest_csv(write(tmp_path, "A1,2015,1,2,3,3,4\nA1,2015,1,2\n"), CMAP)
    assert info.value.row == 3


# -- subsampling ----------------------------------------------------------------------

def make_float(fid, n, year=2020):
    return [ObservationRecord(fid, year, float(i), 0.0, 0.0, 1.0, 0.0) for i in range(n)]


def test_subsample_caps():
    recs = make_float("small", 150) + make_float("big", 500)
    out = subsample_per_float(recs, 200, Rng(1))
    assert sum(r.float_id == "small" for r in out) == 150
    big = [r for r in out if r.float_id == "big"]
    assert len(big) == 200 and len(set(big)) == 200
    assert out == subsample_per_float(recs, 200, Rng(1))
    assert out != subsample_per_float(recs, 200, Rng(2))


# -- dataset ---------------------------------------------------------------------------

def test_build_dataset_single_record():
    ds = build_dataset(make_float("a", 1), rng=Rng(0))
    np.testing.assert_array_equal(ds.X, 0.5)


def test_build_dataset_split_sizes():
    ds = build_dataset(make_float("a", 10) + make_float("b", 10, year=2021), rng=Rng(0))
    for tr, te in ds.splits.values():
        assert len(tr) == 8 and len(te) == 2
        assert not set(tr) & set(te)
    np.testing.assert_array_equal(np.sort(np.concatenate([ds.train_idx, ds.test_idx])), np.arange(20))


def test_build_dataset_bounds_and_reproducibility():
    recs = synthetic_records()
    ds = build_dataset(recs, rng=Rng(4))
    assert ds.X.min(axis=0).tolist() == [0.0] * 4 and ds.X.max(axis=0).tolist() == [1.0] * 4
    np.testing.assert_array_equal(ds.y, [r.response for r in recs])
    again = build_dataset(recs, rng=Rng(4))
    for year in ds.splits:
        np.testing.assert_array_equal(ds.splits[year][0], again.splits[year][0])


def test_normalization_idempotent():
    ds = build_dataset(synthetic_records(), rng=Rng(5))
    raw = np.array([r.inputs for r in ds.records])
    np.testing.assert_array_equal(ds.normalize(raw), ds.X)
    renorm = normalize(ds.X, ds.X.min(axis=0), ds.X.max(axis=0))
    np.testing.assert_array_equal(renorm, ds.X)


def test_build_dataset_empty():
    with pytest.raises(EmptyDataset):
        build_dataset([], rng=Rng(0))


def test_manifest(tmp_path):
    ds = build_dataset(make_float("a", 10), rng=Rng(0), skipped=3)
    path = tmp_path / "manifest.json"
    ds.write_manifest(path)
    data = json.loads(path.read_text())
    assert data["skipped"] == 3 and len(data["splits"]["2020"]["train"]) == 8


# -- application plans -------------------------------------------------------------------

def assert_plan_rules(ds, plans):
    fids, years = ds.float_ids, ds.years
    for year, yp in plans.items():
        for k, c in enumerate(yp.plan.neighbors):
            target = yp.indices[yp.plan.order[k]]
            obs = yp.indices[yp.plan.order[c]]
            assert np.all(years[obs] == year) and years[target] == year
            assert not np.any(fids[obs] == fids[target])
            assert np.all(yp.plan.order[c] < yp.n_train)


def test_plan_excludes_same_float_and_years():
    ds = build_dataset(synthetic_records(), rng=Rng(6))
    plans = build_application_plan(ds, m=5)
    assert sorted(plans) == [2010, 2011]
    assert_plan_rules(ds, plans)


def test_plan_same_float_only_neighbors_flagged():
    recs = make_float("solo", 5) + [ObservationRecord("other", 2020, 100.0, 5.0, 0.0, 1.0, 0.0)]
    ds = build_dataset(recs, split_fraction=1.0, rng=Rng(0))
    plans = build_application_plan(ds, m=3)
    yp = plans[2020]
    # the nearby "solo" points are excluded; only the distant float is usable
    for k in range(1, 6):
        target = yp.indices[yp.plan.order[k]]
        nb = yp.indices[yp.plan.order[yp.plan.neighbors[k]]]
        if ds.float_ids[target] == "solo":
            assert set(ds.float_ids[nb]) <= {"other"}
    assert yp.plan.flagged
    with pytest.raises(InsufficientNeighbors):
        build_application_plan(ds, m=3, strict=True)


def test_plan_huge_lengthscale_ignores_dimension():
    ds = build_dataset(synthetic_records(seed=7), rng=Rng(8))
    ls = np.array([0.1, 0.2, 1e6, 0.3])
    plans = build_application_plan(ds, m=4, lengthscales=ls)
    Z = np.delete(ds.X / ls, 2, axis=1)
    fids = ds.float_ids
    for year, yp in plans.items():
        train = ds.splits[year][0]
        for k in yp.targets():
            target = yp.indices[yp.plan.order[k]]
            cands = train[fids[train] != fids[target]]
            nearest = cands[np.argsort(np.sum((Z[cands] - Z[target]) ** 2, axis=1))[:4]]
            got = yp.indices[yp.plan.order[yp.plan.neighbors[k]]]
            assert sorted(got.tolist()) == sorted(nearest.tolist())


def test_plan_matches_bruteforce_oracle():
    recs = synthetic_records(n_floats=5, per_float=10, years=(2012,), seed=9)
    ds = build_dataset(recs, rng=Rng(10))
    ls = np.array([0.3, 0.5, 0.2, 0.8])
    yp = build_application_plan(ds, m=6, lengthscales=ls)[2012]
    Z = ds.X / ls
    fids = ds.float_ids
    train = set(ds.splits[2012][0].tolist())
    obs_order = yp.indices[yp.plan.order]
    for k, target in enumerate(obs_order):
        # test targets sit after every training point, so this pool is all of train for them
        pool = [o for o in obs_order[:k] if o in train]
        cands = [o for o in pool if fids[o] != fids[target]]
        d = [float(np.sum((Z[o] - Z[target]) ** 2)) for o in cands]
        expected = sorted(o for _, _, o in sorted((dd, i, o) for i, (dd, o) in enumerate(zip(d, cands)))[:6])
        got = sorted(obs_order[yp.plan.neighbors[k]].tolist())
        assert got == expected


def test_plan_groups_shapes():
    ds = build_dataset(synthetic_records(n_floats=8, per_float=12), rng=Rng(11))
    plans = build_application_plan(ds, m=5)
    train = plan_groups(ds, plans, 5)
    test = plan_groups(ds, plans, 5, test=True)
    assert train.locs.shape[1:] == (6, 4) and test.locs.shape[1:] == (6, 4)
    assert len(test) == len(ds.test_idx)
