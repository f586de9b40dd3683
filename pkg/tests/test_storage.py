import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flyt import storage
from flyt.data import SyntheticPoolSpec, generate_downstream, generate_pool
from flyt.exceptions import FormatError, VersionError
from flyt.mixing import ScoreTable, aggregate_sum
from flyt.model import ReferenceParams, ScoringParams
from flyt.sampling import SampleManifest


def _bits(a):
    return np.asarray(a, dtype=np.float64).tobytes()


@settings(max_examples=25, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=0, max_size=20))
def test_score_table_round_trip_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("t") / "s.csv"
    t = ScoreTable([f"u{i}" for i in range(len(values))], {"a": values, "b": [-v for v in values]})
    storage.write_score_table(t, path)
    assert storage.read_score_table(path) == t


def test_aggregate_sum_csv_reloads_identically(tmp_path, rng):
    t = ScoreTable([f"u{i}" for i in range(30)], {"a": rng.standard_normal(30), "b": rng.standard_normal(30)})
    out = aggregate_sum(t, standardized=True)
    storage.write_score_table(out, tmp_path / "x.csv")
    again = storage.read_score_table(tmp_path / "x.csv")
    assert _bits(again.column("std_sum")) == _bits(out.column("std_sum"))


def test_score_table_rejects_bad_files(tmp_path):
    (tmp_path / "dup.csv").write_text("uid,s\na,1\na,2\n")
    with pytest.raises(FormatError, match="duplicate uid"):
        storage.read_score_table(tmp_path / "dup.csv")
    (tmp_path / "bad.csv").write_text("uid,s\na,xyz\n")
    with pytest.raises(FormatError, match=":2:"):
        storage.read_score_table(tmp_path / "bad.csv")
    (tmp_path / "hdr.csv").write_text("id,s\na,1\n")
    with pytest.raises(FormatError):
        storage.read_score_table(tmp_path / "hdr.csv")


def test_pool_round_trip_and_version(tmp_path):
    pool, corrupt = generate_pool(SyntheticPoolSpec(25, d_in=3, seed=2))
    storage.write_pool(pool, tmp_path / "p.bin")
    again = storage.read_pool(tmp_path / "p.bin")
    assert again.uids == pool.uids and _bits(again.image) == _bits(pool.image) and _bits(again.text) == _bits(pool.text)
    raw = bytearray((tmp_path / "p.bin").read_bytes())
    raw[8] = 9
    (tmp_path / "v.bin").write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        storage.read_pool(tmp_path / "v.bin")
    (tmp_path / "t.bin").write_bytes(bytes(raw[:40]).replace(bytes([9]), bytes([1]), 1))
    with pytest.raises(FormatError):
        storage.read_pool(tmp_path / "t.bin")
    storage.write_ground_truth(pool.uids, corrupt, tmp_path / "g.csv")
    uids, flags = storage.read_ground_truth(tmp_path / "g.csv")
    assert tuple(uids) == pool.uids and np.array_equal(flags, corrupt)


def test_downstream_round_trip(tmp_path):
    ds = generate_downstream(SyntheticPoolSpec(5, d_in=3, n_classes=4), 12, 2)
    storage.write_downstream(ds, tmp_path / "d.npz")
    again = storage.read_downstream(tmp_path / "d.npz")
    assert _bits(again.image) == _bits(ds.image) and np.array_equal(again.labels, ds.labels)
    assert all(_bits(a) == _bits(b) for a, b in zip(again.templates, ds.templates))


def test_manifest_round_trip(tmp_path):
    m = SampleManifest(("a", "b", "a", "c"))
    storage.write_manifest(m, tmp_path / "m.txt")
    assert storage.read_manifest(tmp_path / "m.txt") == m
    storage.write_manifest(SampleManifest(()), tmp_path / "e.txt")
    assert storage.read_manifest(tmp_path / "e.txt") == SampleManifest(())


def test_params_round_trip(tmp_path, rng):
    for p in (ScoringParams.gated_mlp(["a", "b"], means=[1.0, 2.0], stds=[0.5, 3.0], seed=1),
              ScoringParams.linear(["a"], weights=[np.pi], bias=-1 / 3)):
        p = p.with_vector(rng.standard_normal(p.size))
        storage.save_scoring(p, tmp_path / "s.json", meta={"x": 1})
        q = storage.load_scoring(tmp_path / "s.json")
        assert q.kind == p.kind and q.input_names == p.input_names
        assert _bits(q.to_vector()) == _bits(p.to_vector())
        assert _bits(q.input_means) == _bits(p.input_means) and _bits(q.input_stds) == _bits(p.input_stds)
    theta = ReferenceParams.init(3, 2, seed=4)
    theta = theta.with_vector(rng.standard_normal(theta.size))
    storage.save_reference(theta, tmp_path / "r.json")
    assert _bits(storage.load_reference(tmp_path / "r.json").to_vector()) == _bits(theta.to_vector())


def test_params_format_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError):
        storage.load_scoring(tmp_path / "bad.json")
    d = storage.scoring_to_dict(ScoringParams.linear(["a"]))
    d["format_version"] = 99
    with pytest.raises(VersionError):
        storage.scoring_from_dict(d)
    d["format_version"] = 1
    del d["weights"]
    with pytest.raises(FormatError):
        storage.scoring_from_dict(d)


def test_log_round_trip(tmp_path):
    recs = [{"step": 0, "L_up": 0.1 + 0.2}, {"step": 1, "L_up": 1e-300}]
    storage.write_log(recs, tmp_path / "l.jsonl")
    assert storage.read_log(tmp_path / "l.jsonl") == recs
