"""Index tests: exact ranking vs brute-force oracles, serialization, queries."""

import numpy as np
import pytest

from sketchsearch.index import Hit, Index, IndexedItem, build, load


def emb(rng=None, **kw):
    v = rng.uniform(-1, 1, 64) if rng is not None else np.zeros(64)
    for key, val in kw.items():
        v[int(key[1:])] = val
    return v.astype(np.float32)


def brute_force_full(items, q):
    scored = [
        (it.item_id, float(np.linalg.norm(it.full.astype(np.float64) - q.astype(np.float64))))
        for it in items
    ]
    return sorted(scored, key=lambda p: (p[1], p[0]))


class TestQueryFull:
    def test_exact_match_first(self):
        rng = np.random.default_rng(0)
        items = [IndexedItem(f"i{i}", emb(rng)) for i in range(5)]
        store = build(items)
        target = items[3].full
        hits = store.query_full(target, k=3)
        assert hits[0] == Hit("i3", 0.0)

    def test_two_items_ordered(self):
        store = build([IndexedItem("far", emb(i0=2.0)), IndexedItem("near", emb(i0=1.0))])
        hits = store.query_full(emb(), k=2)
        assert [h.item_id for h in hits] == ["near", "far"]
        assert hits[0].distance == pytest.approx(1.0)

    def test_matches_bruteforce_on_100_random(self):
        rng = np.random.default_rng(1)
        items = [IndexedItem(f"item{i:03d}", emb(rng)) for i in range(100)]
        store = build(items)
        for _ in range(20):
            q = emb(rng)
            hits = store.query_full(q, k=100)
            oracle = brute_force_full(items, q)
            assert [h.item_id for h in hits] == [i for i, _ in oracle]  # bit-exact order
            np.testing.assert_allclose([h.distance for h in hits], [d for _, d in oracle], rtol=1e-12)

    def test_k_larger_than_corpus(self):
        store = build([IndexedItem("a", emb()), IndexedItem("b", emb(i0=1.0))])
        assert len(store.query_full(emb(), k=50)) == 2

    def test_empty_index_errors(self):
        store = build([])
        with pytest.raises(ValueError, match="empty"):
            store.query_full(emb(), k=1)

    def test_tie_break_by_id(self):
        e = emb(i0=1.0)
        store = build([IndexedItem("zz", e.copy()), IndexedItem("aa", e.copy())])
        hits = store.query_full(emb(), k=2)
        assert [h.item_id for h in hits] == ["aa", "zz"]


def part_grid(rng, rows=2, cols=2, **cells):
    grid = rng.uniform(-1, 1, (rows, cols, 64)).astype(np.float32)
    for key, vec in cells.items():
        r, c = int(key[1]), int(key[2])
        grid[r, c] = vec
    return grid


class TestQuerySegments:
    def test_single_cell_exact_match_regardless_of_rest(self):
        rng = np.random.default_rng(2)
        shared = emb(rng)
        items = [
            IndexedItem("x", emb(rng), parts=part_grid(rng, c00=shared)),
            IndexedItem("y", emb(rng), parts=part_grid(rng)),
            IndexedItem("z", emb(rng), parts=part_grid(rng)),
        ]
        store = build(items)
        hits = store.query_segments([(0, 0, shared)], k=3)
        assert hits[0] == Hit("x", 0.0)

    def test_two_cells_concatenation_algebra(self):
        rng = np.random.default_rng(3)
        items = [IndexedItem("a", emb(rng), parts=part_grid(rng))]
        store = build(items)
        q1, q2 = emb(rng), emb(rng)
        hit = store.query_segments([(0, 0, q1), (1, 1, q2)], k=1)[0]
        d1 = np.linalg.norm(items[0].parts[0, 0].astype(np.float64) - q1)
        d2 = np.linalg.norm(items[0].parts[1, 1].astype(np.float64) - q2)
        assert hit.distance == pytest.approx(np.sqrt(d1**2 + d2**2), rel=1e-12)

    def test_agnostic_to_inactive_cells(self):
        # X matches cell (0,0) exactly but is far everywhere else;
        # Y is near the query in all cells but not exact anywhere.
        rng = np.random.default_rng(4)
        query_cells = rng.uniform(-1, 1, (2, 2, 64)).astype(np.float32)
        x_parts = (query_cells + 5.0).astype(np.float32)
        x_parts[0, 0] = query_cells[0, 0]
        y_parts = (query_cells + 0.5).astype(np.float32)
        z_parts = (query_cells + 8.0).astype(np.float32)
        store = build(
            [
                IndexedItem("x", emb(rng), parts=x_parts),
                IndexedItem("y", emb(rng), parts=y_parts),
                IndexedItem("z", emb(rng), parts=z_parts),
            ]
        )
        only_00 = store.query_segments([(0, 0, query_cells[0, 0])], k=3)
        assert only_00[0].item_id == "x"
        all_cells = store.query_segments(
            [(r, c, query_cells[r, c]) for r in range(2) for c in range(2)], k=3
        )
        assert all_cells[0].item_id == "y"

    def test_requires_parts(self):
        store = build([IndexedItem("a", emb())])
        with pytest.raises(ValueError, match="part"):
            store.query_segments([(0, 0, emb())], k=1)

    def test_cell_bounds_checked(self):
        rng = np.random.default_rng(5)
        store = build([IndexedItem("a", emb(rng), parts=part_grid(rng))])
        with pytest.raises(ValueError, match="grid"):
            store.query_segments([(5, 0, emb())], k=1)

    def test_bridge_1x1_all_active_equals_full(self):
        rng = np.random.default_rng(6)
        items = []
        for i in range(30):
            full = emb(rng)
            items.append(IndexedItem(f"i{i:02d}", full, parts=full.reshape(1, 1, 64).copy()))
        store = build(items)
        q = emb(rng)
        full_hits = store.query_full(q, k=30)
        seg_hits = store.query_segments([(0, 0, q)], k=30)
        assert [(h.item_id, pytest.approx(h.distance, rel=1e-12)) for h in full_hits] == [
            (h.item_id, h.distance) for h in seg_hits
        ]


def flow_corpus(rng, n_traces=5, length=6):
    items = []
    for t in range(n_traces):
        for p in range(length):
            items.append(
                IndexedItem(f"t{t}p{p}", emb(rng), trace_id=f"trace{t}", trace_position=p)
            )
    return items


def brute_force_flow(items, seq):
    traces = {}
    for it in items:
        if it.trace_id is not None:
            traces.setdefault(it.trace_id, []).append(it)
    out = []
    for tid in sorted(traces):
        members = sorted(traces[tid], key=lambda it: it.trace_position)
        for off in range(len(members) - len(seq) + 1):
            d2 = 0.0
            for t, q in enumerate(seq):
                diff = members[off + t].full.astype(np.float64) - q.astype(np.float64)
                d2 += float(diff @ diff)
            out.append((f"{tid}@{off}", float(np.sqrt(d2))))
    return sorted(out, key=lambda p: (p[1], p[0]))


class TestQueryFlow:
    def test_exact_window_match(self):
        rng = np.random.default_rng(7)
        items = flow_corpus(rng)
        store = build(items)
        trace2 = [it for it in items if it.trace_id == "trace2"]
        seq = [trace2[3].full, trace2[4].full]
        hits = store.query_flow(seq, k=1)
        assert hits[0].item_id == "trace2@3"
        assert hits[0].distance == pytest.approx(0.0, abs=1e-6)

    def test_window_distance_algebra(self):
        rng = np.random.default_rng(8)
        items = flow_corpus(rng, n_traces=1, length=2)
        store = build(items)
        q0, q1 = emb(rng), emb(rng)
        hit = store.query_flow([q0, q1], k=1)[0]
        d0 = np.linalg.norm(items[0].full.astype(np.float64) - q0)
        d1 = np.linalg.norm(items[1].full.astype(np.float64) - q1)
        assert hit.distance == pytest.approx(np.sqrt(d0**2 + d1**2), rel=1e-12)

    def test_matches_bruteforce_enumeration(self):
        rng = np.random.default_rng(9)
        items = flow_corpus(rng, n_traces=5, length=7)
        store = build(items)
        for seq_len in (2, 3, 4):
            seq = [emb(rng) for _ in range(seq_len)]
            hits = store.query_flow(seq, k=1000)
            oracle = brute_force_flow(items, seq)
            assert [(h.item_id, h.distance) for h in hits] == [
                (i, pytest.approx(d, rel=1e-12)) for i, d in oracle
            ]

    def test_order_matters(self):
        rng = np.random.default_rng(10)
        items = flow_corpus(rng, n_traces=1, length=4)
        store = build(items)
        seq_fwd = [items[1].full, items[2].full]
        hits_fwd = store.query_flow(seq_fwd, k=1)
        hits_rev = store.query_flow(list(reversed(seq_fwd)), k=3)
        assert hits_fwd[0].item_id == "trace0@1"
        assert hits_fwd[0].distance == pytest.approx(0.0, abs=1e-6)
        assert hits_rev[0].distance > 0.1

    def test_no_long_enough_trace(self):
        rng = np.random.default_rng(11)
        store = build(flow_corpus(rng, n_traces=2, length=3))
        with pytest.raises(ValueError, match="window"):
            store.query_flow([emb(rng) for _ in range(5)], k=1)

    def test_window_items_resolution(self):
        rng = np.random.default_rng(12)
        store = build(flow_corpus(rng, n_traces=2, length=4))
        assert store.trace_window_items("trace1@1", 2) == ["t1p1", "t1p2"]


class TestBuildAndSerialization:
    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build([IndexedItem("a", emb()), IndexedItem("a", emb(i0=1.0))])

    def test_add_returns_new_snapshot(self):
        store = build([IndexedItem("a", emb())])
        bigger = store.add(IndexedItem("b", emb(i0=1.0)))
        assert len(store) == 1 and len(bigger) == 2
        with pytest.raises(ValueError, match="duplicate"):
            bigger.add(IndexedItem("a", emb()))

    def test_empty_build_save_ok_queries_error(self, tmp_path):
        store = build([])
        store.save(tmp_path / "empty.swidx")
        back = load(tmp_path / "empty.swidx")
        assert len(back) == 0
        with pytest.raises(ValueError):
            back.query_full(emb(), k=1)

    def test_roundtrip_identical_queries(self, tmp_path):
        rng = np.random.default_rng(13)
        items = [
            IndexedItem(f"i{i}", emb(rng), parts=part_grid(rng, 3, 3), trace_id="t0", trace_position=i)
            for i in range(8)
        ]
        store = build(items)
        store.save(tmp_path / "idx.swidx")
        back = load(tmp_path / "idx.swidx")
        q = emb(rng)
        assert store.query_full(q, 8) == back.query_full(q, 8)
        cells = [(1, 2, emb(rng))]
        assert store.query_segments(cells, 8) == back.query_segments(cells, 8)
        seq = [emb(rng), emb(rng)]
        assert store.query_flow(seq, 8) == back.query_flow(seq, 8)
        assert store.fingerprint() == back.fingerprint()

    def test_insertion_order_invariance(self):
        rng = np.random.default_rng(14)
        items = [IndexedItem(f"i{i}", emb(rng)) for i in range(10)]
        a = build(items)
        b = build(list(reversed(items)))
        q = emb(rng)
        assert a.query_full(q, 10) == b.query_full(q, 10)
        assert a.fingerprint() == b.fingerprint()

    def test_corrupt_file_detected(self, tmp_path):
        store = build([IndexedItem("a", emb())])
        path = tmp_path / "idx.swidx"
        store.save(path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 0xFF
        (tmp_path / "bad.swidx").write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="checksum"):
            load(tmp_path / "bad.swidx")

    def test_mixed_parts_rejected(self):
        rng = np.random.default_rng(15)
        with pytest.raises(ValueError, match="part"):
            build([IndexedItem("a", emb(rng), parts=part_grid(rng)), IndexedItem("b", emb(rng))])

    def test_grid_uniformity_enforced(self):
        rng = np.random.default_rng(16)
        with pytest.raises(ValueError, match="grid|differs"):
            build(
                [
                    IndexedItem("a", emb(rng), parts=part_grid(rng, 2, 2)),
                    IndexedItem("b", emb(rng), parts=part_grid(rng, 3, 3)),
                ]
            )


class TestMetricProperties:
    def test_distance_symmetry_and_triangle(self):
        rng = np.random.default_rng(17)
        vecs = [emb(rng) for _ in range(3)]
        store_a = build([IndexedItem("b", vecs[1])])
        d_ab = store_a.query_full(vecs[0], 1)[0].distance
        store_b = build([IndexedItem("a", vecs[0])])
        d_ba = store_b.query_full(vecs[1], 1)[0].distance
        assert d_ab == pytest.approx(d_ba, rel=1e-12)
        d_ac = np.linalg.norm(vecs[0].astype(np.float64) - vecs[2].astype(np.float64))
        d_cb = np.linalg.norm(vecs[2].astype(np.float64) - vecs[1].astype(np.float64))
        assert d_ab <= d_ac + d_cb + 1e-12
