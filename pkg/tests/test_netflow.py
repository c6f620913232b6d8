import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import flow, make_dataset
from feddice.errors import EmptyWindow, InsufficientData, IoError, MissingFamily, SchemaError
from feddice.netflow import (
    FEATURE_NAMES, REFERENCE_TOTALS, Dataset, Family, FlowRecord, Label, Protocol, Scenario,
    Split, WindowConfig, _split_counts, aggregate_window, build_dataset, feature_index,
    flows_to_csv, ingest_csv, label_of, log_scale, parse_family, partition, scenario_test_set,
    windows_from_flows,
)
from feddice.synth import synthesize


def feat(fv, name):
    return fv.values[feature_index(name)]


# ------------------------------------------------------------- aggregation

def test_single_flow_window_reflects_the_record():
    fv = aggregate_window([flow(3.0, packets=10, load=1000.0)])
    assert feat(fv, "tcp_count") == 1
    assert feat(fv, "tcp_packet_sum") == 10
    assert feat(fv, "tcp_load_sum") == 1000
    assert feat(fv, "tcp_bytes_per_packet") == 100
    assert feat(fv, "udp_count") == 0
    assert fv.label == Label.CLEAN
    assert fv.window_end == 10.0
    assert fv.values.shape == (520,)


def test_two_flows_sum_and_mean():
    fv = aggregate_window([flow(1.0, packets=10), flow(2.0, packets=30)])
    assert feat(fv, "tcp_packet_sum") == 40
    assert feat(fv, "tcp_packet_mean") == 20
    # population variance of (10, 30)
    assert feat(fv, "tcp_packet_var") == 100
    assert feat(fv, "tcp_last_packets") == 30


def test_per_protocol_blocks_and_distinct_counts():
    recs = [flow(1.0, proto=Protocol.UDP, dst="a"), flow(2.0, proto=Protocol.UDP, dst="b"),
            flow(3.0, proto=Protocol.UDP, dst="a"), flow(4.0, proto=Protocol.ARP)]
    fv = aggregate_window(recs)
    assert feat(fv, "udp_count") == 3
    assert feat(fv, "udp_distinct_dst") == 2
    assert feat(fv, "udp_distinct_src") == 1
    assert feat(fv, "arp_count") == 1
    assert feat(fv, "tcp_count") == 0


def test_empty_window_raises():
    with pytest.raises(EmptyWindow):
        aggregate_window([])


def test_record_outside_window_rejected():
    with pytest.raises(ValueError):
        aggregate_window([flow(1.0), flow(15.0)], window_end=10.0)


def test_window_label_majority_and_tie_rule():
    wc = Family.RW_WC
    fv = aggregate_window([flow(1.0, family=wc), flow(2.0), flow(3.0)])
    assert fv.family == Family.CLEAN
    fv = aggregate_window([flow(1.0, family=wc), flow(2.0)])
    assert fv.family == wc and fv.label == Label.RANSOMWARE
    fv = aggregate_window([flow(1.0, family=Family.RW_PG), flow(2.0, family=Family.RW_PY)])
    assert fv.family == Family.RW_PY


def test_feature_dim_truncates_and_pads():
    recs = [flow(1.0)]
    short = aggregate_window(recs, WindowConfig(feature_dim=10))
    long = aggregate_window(recs, WindowConfig(feature_dim=600))
    assert short.values.shape == (10,)
    np.testing.assert_array_equal(long.values[:10], short.values)
    assert np.all(long.values[len(FEATURE_NAMES):] == 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 10.0), st.integers(0, 500), st.floats(0, 1e5),
                          st.sampled_from(list(Protocol)), st.sampled_from(list(Family))),
                min_size=1, max_size=25))
def test_aggregation_is_pure_and_label_consistent(rows):
    recs = [FlowRecord(t, "s", "d", p, n, load, 0.1, f) for t, n, load, p, f in rows]
    a = aggregate_window(recs)
    b = aggregate_window(list(recs))
    np.testing.assert_array_equal(a.values, b.values)
    assert (a.label == Label.RANSOMWARE) == (a.family != Family.CLEAN)
    assert sum(feat(a, f"{p.name.lower()}_count") for p in Protocol) == len(recs)


def test_windows_from_flows_matches_aggregate_window():
    recs = [flow(1.0), flow(9.0, packets=3), flow(12.0, family=Family.RW_WC), flow(35.0)]
    X, fam, end = windows_from_flows(recs)
    np.testing.assert_array_equal(end, [10.0, 20.0, 40.0])
    assert list(fam) == [Family.CLEAN, Family.RW_WC, Family.CLEAN]
    np.testing.assert_array_equal(X[0], aggregate_window(recs[:2]).values)


def test_log_scale_is_signed_log1p():
    np.testing.assert_allclose(log_scale([-np.e + 1, 0.0, np.e - 1]), [-1.0, 0.0, 1.0])


def test_family_parsing_and_labels():
    assert parse_family("RW-WC") == Family.RW_WC
    assert parse_family("petya") == Family.RW_PY
    assert label_of(Family.CLEAN) == Label.CLEAN
    assert label_of(Family.RW_BR) == Label.RANSOMWARE
    with pytest.raises(ValueError):
        parse_family("mystery")


# ------------------------------------------------------------------ splits

def test_reference_split_sizes():
    expected = {
        Family.CLEAN: (80000, 10000, 10000), Family.RW_WC: (20000, 2500, 2500),
        Family.RW_PY: (784, 98, 99), Family.RW_BR: (311, 38, 40),
        Family.RW_PG: (19336, 2417, 2417),
    }
    got = {f: _split_counts(n, (0.8, 0.1, 0.1)) for f, n in REFERENCE_TOTALS.items()}
    assert got == expected
    assert sum(sum(v) for v in got.values()) == 150540
    assert [sum(v[i] for v in got.values()) for i in range(3)] == [120431, 15053, 15056]


def _single_family_flows(n, family=Family.CLEAN):
    return [flow(10.0 * k + 5.0, family=family) for k in range(n)]


def test_ten_windows_split_eight_one_one():
    tr, va, te = build_dataset(_single_family_flows(10))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    assert tr.split == Split.TRAIN and te.split == Split.TEST


def test_splits_disjoint_and_cover_input():
    flows = synthesize(3, {Family.CLEAN: 40, Family.RW_WC: 30, Family.RW_PG: 30})
    parts = build_dataset(flows, seed=5)
    ids = [set(p.ids.tolist()) for p in parts]
    assert sum(len(s) for s in ids) == 100
    assert ids[0] | ids[1] | ids[2] == set(range(100))
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_too_few_windows_for_a_family():
    flows = _single_family_flows(10) + [flow(205.0, family=Family.RW_BR)]
    with pytest.raises(InsufficientData):
        build_dataset(flows)


def test_bad_split_ratios():
    with pytest.raises(ValueError):
        build_dataset(_single_family_flows(10), split_ratios=(0.5, 0.5, 0.5))


# --------------------------------------------------------------- partition

def _reference_train():
    counts = [_split_counts(n, (0.8, 0.1, 0.1))[0] for n in REFERENCE_TOTALS.values()]
    fam = np.concatenate([np.full(c, int(f)) for f, c in zip(REFERENCE_TOTALS, counts)])
    return make_dataset(fam, dim=1)


def test_noniid4_client_sizes_at_reference_scale():
    sizes = [len(c) for c in partition(_reference_train(), Scenario.NONIID_4)]
    # the client table lists 20,310 for Client3 while the split table gives
    # 311 RW-BR training windows; clean share plus all RW-BR is 20,311
    assert sizes == [40000, 20784, 20311, 39336]


def test_noniid3_roles():
    clients = partition(_reference_train(), Scenario.NONIID_3)
    assert [len(c) for c in clients] == [26667 + 20000, 26667 + 784 + 311, 26666 + 19336]
    assert set(np.unique(clients[1].family)) == {Family.CLEAN, Family.RW_PY, Family.RW_BR}


def test_iid4_balanced_shares():
    fam = np.repeat(np.arange(5), 800)
    clients = partition(make_dataset(fam), Scenario.IID_4, seed=1)
    assert [len(c) for c in clients] == [1000] * 4
    for c in clients:
        counts = c.family_counts()
        assert all(abs(counts[f] - 200) <= 1 for f in Family)
    ids = np.concatenate([c.ids for c in clients])
    assert sorted(ids.tolist()) == list(range(4000))


def test_noniid3_without_pg_raises():
    fam = np.repeat([0, 1, 2, 3], 10)
    with pytest.raises(MissingFamily):
        partition(make_dataset(fam), Scenario.NONIID_3)


def test_iid_needs_every_family():
    with pytest.raises(MissingFamily):
        partition(make_dataset(np.repeat([0, 1], 10)), Scenario.IID_3)


def test_scenario_test_set_composition():
    val = make_dataset([0, 1], split=Split.VAL)
    test = make_dataset([0, 2, 4], seed=1, split=Split.TEST)
    assert scenario_test_set(val, test, Scenario.IID_4) is test
    assert len(scenario_test_set(val, test, Scenario.NONIID_4)) == 5


# --------------------------------------------------------------- dataset IO

def test_jsonl_round_trip(tmp_path, splits_small):
    tr = splits_small[0]
    tr.to_jsonl(tmp_path / "train.jsonl")
    back = Dataset.from_jsonl(tmp_path / "train.jsonl")
    np.testing.assert_array_equal(back.X, tr.X)
    np.testing.assert_array_equal(back.family, tr.family)
    np.testing.assert_array_equal(back.ids, tr.ids)
    assert back.split == tr.split


def _write_csv(path, lines):
    header = "start_time,src_ip,dst_ip,protocol,total_packets,total_load,src_iat,family"
    path.write_text("\n".join([header] + lines) + "\n", encoding="utf-8")


def test_ingest_valid_rows(tmp_path):
    p = tmp_path / "f.csv"
    _write_csv(p, ["3.0,a,b,TCP,10,1000,0.1,clean", "1.0,a,c,UDP,2,100,0.2,RW-WC",
                   "2.0,a,d,ARP,1,42,0,petya"])
    res = ingest_csv(p)
    assert (len(res.records), res.rows, res.skipped) == (3, 3, 0)
    assert [r.start_time for r in res.records] == [1.0, 2.0, 3.0]
    assert res.records[1].protocol == Protocol.ARP


def test_ingest_skips_negative_packets(tmp_path):
    p = tmp_path / "f.csv"
    _write_csv(p, ["1.0,a,b,TCP,10,1000,0.1,clean", "2.0,a,b,TCP,-4,1000,0.1,clean",
                   "3.0,a,b,TCP,1,10,0.1,clean"])
    res = ingest_csv(p)
    assert (len(res.records), res.skipped) == (2, 1)


def test_ingest_garbage_and_missing(tmp_path):
    p = tmp_path / "f.csv"
    _write_csv(p, ["x,y,z,TCP,nope,?,?,clean", "also,bad,row,,,,,"])
    with pytest.raises(SchemaError):
        ingest_csv(p)
    (tmp_path / "h.csv").write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        ingest_csv(tmp_path / "h.csv")
    with pytest.raises(IoError):
        ingest_csv(tmp_path / "missing.csv")


def test_csv_round_trip(tmp_path):
    flows = synthesize(1, [3, 3, 0, 0, 0])
    flows_to_csv(flows, tmp_path / "f.csv")
    back = ingest_csv(tmp_path / "f.csv").records
    assert back == flows
