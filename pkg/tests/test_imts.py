import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from undercali.imts import (DataError, GridConfigError, GridSpec, ImtsSample, MaskedBatch, dump_jsonl,
                            iter_batches, load_jsonl, masked_mae, masked_mse, masked_sq_norm,
                            per_sample_sq_norm, split_sample, split_stream, to_grid)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_null_cells_become_mask_zero(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", ['{"t":[0.0,1.0],"v":[[1.0,null],[null,2.0]],"split":0.5}'])
    (s,) = list(load_jsonl(p))
    np.testing.assert_array_equal(s.mask, [[1, 0], [0, 1]])
    np.testing.assert_array_equal(s.values, [[1, 0], [0, 2]])


def test_decreasing_timestamps_rejected(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", ['{"t":[1.0,0.5],"v":[[1.0],[2.0]],"split":0.7}'])
    with pytest.raises(DataError, match="timestamps not increasing"):
        list(load_jsonl(p))


def test_file_order_preserved(tmp_path):
    lines = [json.dumps({"t": [0.0, 1.0], "v": [[float(i)], [1.0]], "split": 0.5}) for i in range(3)]
    got = list(load_jsonl(write_lines(tmp_path / "a.jsonl", lines)))
    assert [s.values[0, 0] for s in got] == [0.0, 1.0, 2.0]


def test_malformed_line_names_line_number(tmp_path):
    p = write_lines(tmp_path / "a.jsonl", ['{"t":[0.0],"v":[[1.0]],"split":0.0}', "{not json"])
    with pytest.raises(DataError, match="2"):
        list(load_jsonl(p))


def test_shape_mismatch_is_structural_error():
    with pytest.raises(DataError, match="shape mismatch"):
        ImtsSample.from_record({"t": [0.0, 1.0], "v": [[1.0]], "split": 0.5})


def test_record_round_trip(tmp_path):
    s = ImtsSample(np.array([0.0, 0.25, 1.5]), np.array([[1.5, 0.0], [0.0, -2.0], [3.0, 4.0]]),
                   np.array([[1, 0], [0, 1], [1, 1]]), 1.0)
    dump_jsonl([s, s], tmp_path / "r.jsonl")
    back = list(load_jsonl(tmp_path / "r.jsonl"))
    assert len(back) == 2
    for b in back:
        np.testing.assert_array_equal(b.values, s.values)
        np.testing.assert_array_equal(b.mask, s.mask)
        assert b.split_time == s.split_time


def test_slot_mean_example():
    # lookback [0, 1) with two slots of width 0.5; forecast horizon after the split
    grid = GridSpec(l_in=2, l_out=1, n_vars=1, lookback=1.0, horizon=1.0)
    s = ImtsSample(np.array([0.1, 0.5, 0.9, 1.5]), np.array([[1.0], [3.0], [5.0], [7.0]]),
                   np.ones((4, 1)), 1.0)
    look, query, target = to_grid(s, grid)
    np.testing.assert_array_equal(look.values[:, 0], [1.0, 4.0])
    np.testing.assert_array_equal(look.mask[:, 0], [1.0, 1.0])
    np.testing.assert_array_equal(target.values, [[7.0]])
    np.testing.assert_array_equal(query.mask, target.mask)


def test_empty_slot_zero_filled_and_singletons_pass_through():
    grid = GridSpec(l_in=4, l_out=1, n_vars=1, lookback=4.0, horizon=1.0)
    s = ImtsSample(np.array([0.5, 2.5, 3.5, 4.5]), np.array([[1.0], [2.0], [3.0], [9.0]]), np.ones((4, 1)), 4.0)
    look, _, _ = to_grid(s, grid)
    np.testing.assert_array_equal(look.values[:, 0], [1.0, 0.0, 2.0, 3.0])
    np.testing.assert_array_equal(look.mask[:, 0], [1.0, 0.0, 1.0, 1.0])


def test_observation_outside_window_rejected():
    grid = GridSpec(l_in=2, l_out=1, n_vars=1, lookback=1.0, horizon=1.0)
    s = ImtsSample(np.array([0.5, 1.5, 5.0]), np.array([[1.0], [2.0], [3.0]]), np.ones((3, 1)), 1.5)
    with pytest.raises(GridConfigError):
        to_grid(s, grid)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grid_is_total_and_averages_observed_cells(seed):
    rng = np.random.Generator(np.random.Philox(seed))
    grid = GridSpec(l_in=5, l_out=3, n_vars=2, lookback=5.0, horizon=3.0)
    n = int(rng.integers(2, 30))
    t = np.sort(rng.uniform(0.0, 8.0, size=n))
    t = t[np.concatenate([[True], np.diff(t) > 1e-9])]
    m = (rng.uniform(size=(len(t), 2)) < 0.6).astype(float)
    m[:, 0] = np.maximum(m[:, 0], m[:, 1] == 0)
    v = rng.standard_normal(m.shape) * m
    split = float(np.clip(5.0, t[0], t[-1]))
    if t[-1] < 5.0 or t[0] > 5.0:
        return
    s = ImtsSample(t, v, m, split)
    look, query, target = to_grid(s, grid)
    assert look.values.shape == (5, 2) and target.values.shape == (3, 2)
    np.testing.assert_array_equal(query.mask, target.mask)
    # observed-count conservation and unobserved cells zero
    past = t <= split
    assert look.mask.sum() <= m[past].sum()
    assert np.all(look.values[look.mask == 0] == 0)
    assert np.all(target.values[target.mask == 0] == 0)
    # every slot mean lies within the observed range of the cell
    lo, hi = v[m == 1].min(initial=0), v[m == 1].max(initial=0)
    assert np.all(look.values[look.mask == 1] >= lo - 1e-12)
    assert np.all(look.values[look.mask == 1] <= hi + 1e-12)


def test_split_sample_partitions_at_split():
    s = ImtsSample(np.array([0.0, 1.0, 2.0]), np.array([[1.0], [2.0], [3.0]]), np.ones((3, 1)), 1.0)
    w = split_sample(s)
    np.testing.assert_array_equal(w.lookback.timestamps, [0.0, 1.0])
    np.testing.assert_array_equal(w.query_times, [2.0])
    np.testing.assert_array_equal(w.targets, [[3.0]])


def test_masked_mse_example():
    assert masked_mse(np.array([1.0, 2.0]), np.array([0.0, 2.0]), np.array([1.0, 1.0])) == 0.5


def test_masked_mae_example():
    assert masked_mae(np.array([1.0, 3.0]), np.array([0.0, 2.0]), np.array([1.0, 1.0])) == 1.0


def test_masked_metrics_reject_empty_target():
    for fn in (masked_mse, masked_mae):
        with pytest.raises(ValueError, match="empty target"):
            fn(np.array([1.0, 2.0]), np.array([0.0, 2.0]), np.array([0.0, 0.0]))


def test_sq_norm_examples():
    assert masked_sq_norm(np.array([1.0, 2.0]), np.array([0.0, 2.0]), np.array([1.0, 1.0])) == 1.0
    assert masked_sq_norm(np.array([1.0, 2.0]), np.array([0.0, 2.0]), np.zeros(2)) == 0.0
    x = np.array([3.0, -1.0])
    assert masked_sq_norm(x, x, np.ones(2)) == 0.0
    assert masked_mse(x, x, np.ones(2)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_ignore_masked_cells(seed):
    rng = np.random.Generator(np.random.Philox(seed))
    p, y = rng.standard_normal((2, 3, 4))
    m = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    m[0, 0] = 1
    junk = rng.standard_normal((3, 4)) * 100 * (1 - m)
    assert masked_mse(p + junk, y, m) == masked_mse(p, y, m)
    assert masked_sq_norm(p, y - junk, m) == masked_sq_norm(p, y, m)


def test_per_sample_sq_norm_matches_loop():
    rng = np.random.Generator(np.random.Philox(3))
    p, y = rng.standard_normal((2, 5, 3, 2))
    m = (rng.uniform(size=(5, 3, 2)) < 0.5).astype(float)
    got = per_sample_sq_norm(p, y, m)
    want = [masked_sq_norm(p[i], y[i], m[i]) for i in range(5)]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_split_stream_keeps_online_order():
    tr, va, on = split_stream(100, 0.2, 0.05, seed=1)
    assert len(tr) == 20 and len(va) == 5
    np.testing.assert_array_equal(on, np.arange(25, 100))
    assert set(tr) | set(va) == set(range(25)) and not set(tr) & set(va)


def test_iter_batches_cover_stream_in_order():
    rng = np.random.Generator(np.random.Philox(0))
    data = MaskedBatch(rng.standard_normal((10, 2, 1)), np.ones((10, 2, 1)), np.ones((10, 1, 1)),
                       np.zeros((10, 1, 1)))
    got = [b.index.tolist() for b in iter_batches(data, 4)]
    assert got == [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
