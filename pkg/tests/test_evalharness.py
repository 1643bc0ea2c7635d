import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from priqa.errors import EmptySupportError
from priqa.evalharness import (
    aggregate,
    evaluate,
    fpr_at_top,
    fuse_maps,
    plcc,
    records_csv,
    reference_sweep,
    regular_subset,
    srcc,
    summary_markdown,
    sweep_csv,
)
from priqa.types import QualityMap

SRCC_HAND = 3 / math.sqrt(10)  # ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): 4.5 / sqrt(4.5 * 5)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vectors = st.integers(3, 30).flatmap(lambda n: st.tuples(*(st.lists(finite, min_size=n, max_size=n),) * 2))


def _textbook_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / (n - 1)
    sx = math.sqrt(sum((a - mx) ** 2 for a in x) / (n - 1))
    sy = math.sqrt(sum((b - my) ** 2 for b in y) / (n - 1))
    return cov / (sx * sy)


def _fpr_enumerated(pred, target, overlap, x):
    cells = [(p, t) for p, t, o in zip(pred.ravel(), target.ravel(), overlap.ravel()) if not o]
    n = len(cells)
    k = max(1, math.ceil(x * n))
    ts = sorted(t for _, t in cells)
    med = ts[n // 2] if n % 2 else 0.5 * (ts[n // 2 - 1] + ts[n // 2])
    selected = [t for p, t in cells if sum(1 for q, _ in cells if q > p) < k]
    return sum(1 for t in selected if t < med) / len(selected)


def _dense(v):
    return QualityMap.dense(np.asarray(v, dtype=float))


class TestCorrelation:
    def test_affine_and_inverse(self, rng):
        x = rng.uniform(size=50)
        assert plcc(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
        assert plcc(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_textbook_formula(self, rng):
        x, y = rng.normal(size=100), rng.normal(size=100)
        assert abs(plcc(x, y) - _textbook_pearson(list(x), list(y))) < 1e-12

    def test_degenerate_is_zero(self):
        assert plcc(np.full(5, 0.3), np.arange(5.0)) == 0.0
        assert srcc(np.ones(4), np.arange(4.0)) == 0.0

    def test_srcc_examples(self, rng):
        x = rng.normal(size=40)
        assert srcc(x, np.exp(x)) == pytest.approx(1.0, abs=1e-12)
        assert srcc(x, -x) == pytest.approx(-1.0, abs=1e-12)
        assert srcc([1, 2, 2, 3], [1, 2, 3, 4]) == pytest.approx(SRCC_HAND, abs=1e-12)

    @pytest.mark.parametrize("fn", [plcc, srcc])
    def test_argument_errors(self, fn):
        with pytest.raises(ValueError):
            fn([1, 2, 3], [1, 2])
        with pytest.raises(ValueError):
            fn([1], [1])

    @settings(max_examples=80, deadline=None)
    @given(vectors)
    def test_range_and_invariances(self, xy):
        x, y = map(np.asarray, xy)
        r, s = plcc(x, y), srcc(x, y)
        assert -1 <= r <= 1 and -1 <= s <= 1
        # arctan can merge neighbouring floats into a tie; only then may ranks change
        if np.unique(np.arctan(x)).size == np.unique(x).size:
            assert srcc(np.arctan(x), y) == pytest.approx(s, abs=1e-9)
        if np.var(x) > 1e-6 and np.var(y) > 1e-6:
            assert plcc(3 * x + 1, y) == pytest.approx(r, abs=1e-9)


    def test_float_merged_tie_changes_rank(self):
        x = [0.0, 1000.0, 999.9999999999999]
        assert np.arctan(x[1]) == np.arctan(x[2])
        assert srcc(np.arctan(x), [0, 0, 1]) != srcc(x, [0, 0, 1])


class TestFuse:
    def test_definitional(self):
        a, b = _dense([[0.2]]), _dense([[0.8]])
        got = {m: fuse_maps([a, b], m).values[0, 0] for m in ("max", "min", "mean", "median")}
        assert got == pytest.approx({"max": 0.8, "min": 0.2, "mean": 0.5, "median": 0.5})

    @pytest.mark.parametrize("mode", ["max", "min", "mean", "median"])
    def test_single_identity(self, rng, mode):
        q = QualityMap(rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5)) > 0.5)
        f = fuse_maps([q], mode)
        np.testing.assert_array_equal(f.values, q.values)
        np.testing.assert_array_equal(f.valid, q.valid)

    def test_only_valid_inputs_count(self):
        a = QualityMap(np.array([[0.9, 0.1]]), np.array([[False, True]]))
        b = QualityMap(np.array([[0.3, 0.7]]), np.array([[True, True]]))
        c = QualityMap(np.array([[0.5, 0.5]]), np.array([[False, False]]))
        f = fuse_maps([a, b, c], "mean")
        np.testing.assert_allclose(f.values, [[0.3, 0.4]])
        assert f.valid.all()
        assert not fuse_maps([c], "max").valid.any()

    def test_errors(self):
        with pytest.raises(ValueError):
            fuse_maps([], "max")
        with pytest.raises(ValueError):
            fuse_maps([_dense([[0.1]])], "sum")

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (3, 4, 4), elements=st.floats(0, 1)),
        arrays(np.bool_, (3, 4, 4)),
    )
    def test_ordering_and_union(self, values, valid):
        maps = [QualityMap(v, m) for v, m in zip(values, valid)]
        f = {m: fuse_maps(maps, m) for m in ("max", "min", "mean", "median")}
        union = valid.any(0)
        for q in f.values():
            np.testing.assert_array_equal(q.valid, union)
        # brute force over the valid inputs at each pixel
        for i in range(4):
            for j in range(4):
                vals = [values[k, i, j] for k in range(3) if valid[k, i, j]]
                if not vals:
                    continue
                assert f["min"].values[i, j] == min(vals) and f["max"].values[i, j] == max(vals)
                assert min(vals) - 1e-12 <= f["mean"].values[i, j] <= max(vals) + 1e-12
                assert min(vals) <= f["median"].values[i, j] <= max(vals)
        again = fuse_maps([f["max"], f["max"]], "max")
        np.testing.assert_array_equal(again.values, f["max"].values)


class TestFpr:
    def test_pred_equals_target(self, rng):
        t = rng.permutation(64).reshape(8, 8) / 63
        overlap = np.zeros((8, 8), bool)
        overlap[:2] = True
        assert fpr_at_top(_dense(t), _dense(t), overlap, 0.5) == 0.0

    def test_inverted(self, rng):
        t = rng.permutation(64).reshape(8, 8) / 63
        assert fpr_at_top(_dense(1 - t), _dense(t), np.zeros((8, 8), bool), 0.5) == 1.0

    @pytest.mark.parametrize("seed,x", [(0, 0.1), (1, 0.25), (2, 0.5), (3, 1.0)])
    def test_matches_enumeration(self, seed, x):
        r = np.random.default_rng(seed)
        pred = np.round(r.uniform(size=(32, 32)), 2)  # quantized, so ties occur
        target = r.uniform(size=(32, 32))
        overlap = r.uniform(size=(32, 32)) < 0.6
        got = fpr_at_top(_dense(pred), _dense(target), overlap, x)
        assert got == pytest.approx(_fpr_enumerated(pred, target, overlap, x), abs=1e-15)

    def test_no_region(self):
        with pytest.raises(EmptySupportError):
            fpr_at_top(_dense([[0.5]]), _dense([[0.5]]), np.ones((1, 1), bool), 0.5)

    @pytest.mark.parametrize("x", [0.0, 1.5])
    def test_bad_fraction(self, x):
        with pytest.raises(ValueError):
            fpr_at_top(_dense([[0.5]]), _dense([[0.5]]), np.zeros((1, 1), bool), x)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), arrays(np.float64, (6, 6), elements=st.floats(0, 1)),
           st.floats(0.01, 1))
    def test_in_unit_interval(self, p, t, x):
        assert 0 <= fpr_at_top(_dense(p), _dense(t), np.zeros((6, 6), bool), x) <= 1


class TestEvaluate:
    def _maps(self, rng, n=3):
        return {("s", f"{i}"): _dense(rng.uniform(size=(6, 6))) for i in range(n)}

    def test_identity(self, rng):
        t = self._maps(rng)
        records, rows = evaluate(t, t)
        assert all(r.plcc == pytest.approx(1.0) and r.srcc == pytest.approx(1.0) for r in records)
        assert rows[-1].scene_id == "*" and rows[-1].n_frames == 3

    def test_constant_method_recorded(self, rng):
        t = self._maps(rng)
        const = {k: _dense(np.full((6, 6), 0.5)) for k in t}
        records, _ = evaluate(const, t)
        assert len(records) == 3 and all(r.plcc == 0.0 for r in records)

    def test_aggregate_recomputed(self, rng):
        t = {**self._maps(rng), ("u", "0"): _dense(rng.uniform(size=(6, 6)))}
        p = {k: _dense(np.clip(v.values + rng.normal(scale=0.2, size=(6, 6)), 0, 1)) for k, v in t.items()}
        records, rows = evaluate(p, t)
        s_rows = {a.scene_id: a for a in rows}
        for sid in ("s", "u"):
            rs = [r for r in records if r.scene_id == sid]
            assert abs(s_rows[sid].plcc - sum(r.plcc for r in rs) / len(rs)) < 1e-12
        assert abs(s_rows["*"].srcc - sum(r.srcc for r in records) / len(records)) < 1e-12
        assert aggregate(records) == rows

    def test_valid_only_support(self, rng):
        t = self._maps(rng, 1)
        key = ("s", "0")
        valid = np.zeros((6, 6), bool)
        valid[:3] = True
        p = {key: QualityMap(t[key].values, valid)}
        dense, _ = evaluate(p, t)
        masked, _ = evaluate(p, t, valid_only=True)
        assert dense[0].support == 36 and masked[0].support == 18
        assert masked[0].plcc == pytest.approx(1.0)

    def test_empty_support_skipped(self, rng, caplog):
        t = self._maps(rng, 2)
        p = dict(t)
        p[("s", "1")] = QualityMap(np.zeros((6, 6)), np.zeros((6, 6), bool))
        records, _ = evaluate(p, t, valid_only=True)
        assert [r.frame_id for r in records] == ["0"]
        assert "skipped" in caplog.text

    def test_mismatched_frames(self, rng):
        t = self._maps(rng)
        with pytest.raises(ValueError):
            evaluate(dict(list(t.items())[:2]), t)

    def test_reports(self, rng):
        t = self._maps(rng)
        records, rows = evaluate(t, t, method="m", target_metric="ssim")
        csv_text = records_csv(records)
        assert csv_text.splitlines()[0] == "scene_id,frame_id,method,target_metric,plcc,srcc,support"
        assert len(csv_text.splitlines()) == 4
        md = summary_markdown(rows)
        assert "| all | m | ssim | 1.0000 | 1.0000 | 3 |" in md


class TestSweep:
    def test_regular_subset(self):
        assert regular_subset(10, 1) == [0]
        assert regular_subset(10, 2) == [0, 9]
        assert regular_subset(10, 3) == [0, 4, 9]
        for n in range(1, 10):
            assert set(regular_subset(10, n)) <= set(regular_subset(10, n + 1))
        with pytest.raises(ValueError):
            regular_subset(3, 4)

    def _setup(self, rng, n_refs=5):
        frames = ["a", "b"]
        refs = [f"r{i}" for i in range(n_refs)]
        table = {}
        for f in frames:
            for i, r in enumerate(refs):
                valid = np.zeros((8, 8), bool)
                valid[:, i : i + 3] = True
                table[(f, r)] = QualityMap(rng.uniform(size=(8, 8)), valid)
        targets = {f: _dense(rng.uniform(size=(8, 8))) for f in frames}
        return frames, refs, table, targets

    def test_single_reference_matches_evaluate(self, rng):
        frames, refs, table, targets = self._setup(rng)
        curve = reference_sweep(frames, refs, lambda f, r: table[(f, r)], targets, [1], valid_only=True)
        _, rows = evaluate(
            {("scene", f): table[(f, refs[0])] for f in frames}, {("scene", f): targets[f] for f in frames},
            valid_only=True,
        )
        assert curve[0].plcc == rows[-1].plcc and curve[0].srcc == rows[-1].srcc

    def test_support_grows(self, rng):
        frames, refs, table, targets = self._setup(rng)
        curve = reference_sweep(frames, refs, lambda f, r: table[(f, r)], targets, range(1, 6))
        support = [p.mean_support for p in curve]
        assert support == sorted(support)
        assert len(curve) == 5

    def test_duplicate_reference_is_idempotent(self, rng):
        frames, refs, table, targets = self._setup(rng)
        maps = [table[("a", r)] for r in refs[:3]]
        a = fuse_maps(maps, "max")
        b = fuse_maps(maps + [maps[1]], "max")
        np.testing.assert_array_equal(a.values, b.values)

    def test_predict_called_once_per_pair(self, rng):
        frames, refs, table, targets = self._setup(rng)
        calls = []

        def fn(f, r):
            calls.append((f, r))
            return table[(f, r)]

        reference_sweep(frames, refs, fn, targets, range(1, 6))
        assert len(calls) == len(set(calls)) == 10

    def test_per_frame_references(self, rng):
        frames, refs, table, targets = self._setup(rng)
        per = {"a": refs[:3], "b": refs[2:]}
        curve = reference_sweep(frames, per, lambda f, r: table[(f, r)], targets, [1, 2, 3])
        assert [p.n_ref for p in curve] == [1, 2, 3]
        with pytest.raises(ValueError):
            reference_sweep(frames, per, lambda f, r: table[(f, r)], targets, [4])

    def test_sweep_csv(self, rng):
        frames, refs, table, targets = self._setup(rng)
        curve = reference_sweep(frames, refs, lambda f, r: table[(f, r)], targets, [1, 2])
        lines = sweep_csv(curve).splitlines()
        assert lines[0] == "n_ref,plcc,srcc,mean_support" and len(lines) == 3
