"""Stagger decomposition, grids, and sequence bookkeeping."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagsolve.fields import (
    DIRICHLET_LID,
    Field,
    FieldSequence,
    GridSpec,
    StaggerFactors,
    coarse_grid,
    decompose,
    decompose_temporal,
    decompose_values,
    interleave_temporal,
    reconstruct,
    reconstruct_values,
)


def grid(h=4, w=4, dx=0.25, boundary="periodic"):
    return GridSpec(height=h, width=w, dx=dx, boundary=boundary)


def seq_of(grid_, arrays, dt=0.5, t0=0.0):
    frames = tuple(Field(grid_, a, t0 + k * dt) for k, a in enumerate(arrays))
    return FieldSequence(frames=frames, dt=dt)


class TestGridAndField:
    def test_grid_validation(self):
        with pytest.raises(ValueError):
            GridSpec(height=1, width=4, dx=0.1)
        with pytest.raises(ValueError):
            GridSpec(height=4, width=4, dx=0.0)
        with pytest.raises(ValueError):
            GridSpec(height=4, width=4, dx=0.1, boundary="open")

    def test_field_rejects_bad_shape_and_nonfinite(self):
        g = grid()
        with pytest.raises(ValueError):
            Field(g, np.zeros((3, 4)))
        bad = np.zeros((4, 4))
        bad[1, 2] = np.nan
        with pytest.raises(ValueError):
            Field(g, bad)

    def test_field_values_are_immutable(self):
        f = Field(grid(), np.zeros((4, 4)))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0

    def test_sequence_time_arithmetic_enforced(self):
        g = grid()
        frames = (Field(g, np.zeros((4, 4)), 0.0), Field(g, np.zeros((4, 4)), 0.7))
        with pytest.raises(ValueError):
            FieldSequence(frames=frames, dt=0.5)

    def test_factors_validation(self):
        with pytest.raises(ValueError):
            StaggerFactors(s_h=0)
        assert StaggerFactors(2, 3, 4).subtask_count == 24


class TestSpatialDecomposition:
    def test_hand_enumerated_4x4(self):
        # values 0..15 row-major; subgrid (0,0) collects even rows/cols
        f = Field(grid(), np.arange(16.0).reshape(4, 4))
        sub = decompose(f, StaggerFactors(s_h=2, s_w=2))
        np.testing.assert_array_equal(sub[(0, 0)].values, [[0.0, 2.0], [8.0, 10.0]])
        np.testing.assert_array_equal(sub[(0, 1)].values, [[1.0, 3.0], [9.0, 11.0]])
        np.testing.assert_array_equal(sub[(1, 0)].values, [[4.0, 6.0], [12.0, 14.0]])
        np.testing.assert_array_equal(sub[(1, 1)].values, [[5.0, 7.0], [13.0, 15.0]])

    def test_coarse_grid_metadata(self):
        g = GridSpec(height=6, width=4, dx=0.1)
        cg = coarse_grid(g, StaggerFactors(s_h=3, s_w=2))
        assert cg.shape == (2, 2)
        assert cg.dx == pytest.approx(0.2)
        assert cg.row_spacing == pytest.approx(0.3)

    def test_indivisible_factors_error(self):
        f = Field(grid(4, 4), np.zeros((4, 4)))
        with pytest.raises(ValueError):
            decompose(f, StaggerFactors(s_h=3, s_w=1))

    @settings(max_examples=60, deadline=None)
    @given(
        s_h=st.integers(1, 3),
        s_w=st.integers(1, 3),
        mult_h=st.integers(1, 3),
        mult_w=st.integers(1, 3),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_is_exact(self, s_h, s_w, mult_h, mult_w, seed):
        h, w = max(2, s_h * mult_h * 2), max(2, s_w * mult_w * 2)
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((h, w))
        f = Field(GridSpec(height=h, width=w, dx=0.5), values, time=1.25)
        back = reconstruct(decompose(f, StaggerFactors(s_h=s_h, s_w=s_w)))
        assert np.array_equal(back.values, f.values)  # bitwise
        assert back.time == f.time

    def test_index_bijection(self):
        h, w, s_h, s_w = 6, 6, 2, 3
        f = Field(GridSpec(height=h, width=w, dx=1.0), np.arange(36.0).reshape(6, 6))
        sub = decompose(f, StaggerFactors(s_h=s_h, s_w=s_w))
        for r in range(h):
            for c in range(w):
                coarse = sub[(r % s_h, c % s_w)].values
                assert coarse[r // s_h, c // s_w] == f.values[r, c]

    def test_multiset_preserved(self):
        rng = np.random.default_rng(7)
        f = Field(grid(4, 4), rng.standard_normal((4, 4)))
        sub = decompose(f, StaggerFactors(s_h=2, s_w=2))
        got = np.sort(np.concatenate([sub[ij].values.ravel() for ij in [(0, 0), (0, 1), (1, 0), (1, 1)]]))
        assert np.array_equal(got, np.sort(f.values.ravel()))

    def test_raw_value_helpers_match(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((4, 6))
        parts = decompose_values(v, 2, 3)
        assert np.array_equal(reconstruct_values(parts, 2, 3), v)

    def test_identity_factors(self):
        f = Field(grid(), np.arange(16.0).reshape(4, 4))
        sub = decompose(f, StaggerFactors())
        assert np.array_equal(sub[(0, 0)].values, f.values)


class TestTemporalDecomposition:
    def test_offsets_and_round_trip(self):
        g = grid()
        rng = np.random.default_rng(11)
        arrays = [rng.standard_normal((4, 4)) for _ in range(3)]
        seq = seq_of(g, arrays, dt=0.1, t0=2.0)
        parts = decompose_temporal(seq, 3)
        assert [k for k, _ in parts] == [0, 1, 2]
        for k, frame in parts:
            assert np.array_equal(frame.values, arrays[k])
            assert frame.time == pytest.approx(2.0 + 0.1 * k)
        # a solver would advance each offset by s_t steps; content unchanged here
        advanced = [frame.at_time(frame.time + 3 * 0.1) for _, frame in parts]
        out = interleave_temporal(advanced, dt=0.1)
        for k in range(3):
            assert np.array_equal(out[k].values, arrays[k])
            assert out[k].time == pytest.approx(2.0 + 0.1 * (3 + k))

    def test_wrong_window_length_errors(self):
        seq = seq_of(grid(), [np.zeros((4, 4))] * 4, dt=0.1)
        with pytest.raises(ValueError):
            decompose_temporal(seq, 2)

    def test_interleave_rejects_uneven_times(self):
        g = grid()
        frames = [Field(g, np.zeros((4, 4)), 0.0), Field(g, np.zeros((4, 4)), 0.35)]
        with pytest.raises(ValueError):
            interleave_temporal(frames, dt=0.1)


def test_wall_boundary_round_trip():
    g = GridSpec(height=4, width=4, dx=0.25, boundary=DIRICHLET_LID)
    rng = np.random.default_rng(5)
    f = Field(g, rng.standard_normal((4, 4)))
    back = reconstruct(decompose(f, StaggerFactors(s_h=2, s_w=2)))
    assert np.array_equal(back.values, f.values)
    assert back.grid.boundary == DIRICHLET_LID
