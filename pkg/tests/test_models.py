"""Tests for the shared-parameter coarse solver and its input features."""

import numpy as np
import pytest

from stagsolve import autodiff as ad
from stagsolve import models
from stagsolve.fields import DIRICHLET_LID, PERIODIC, Field, GridSpec, StaggerFactors
from stagsolve.models import (
    AUX_NONE,
    AUX_NORMALIZED_COORDS,
    AUX_SINUSOIDAL_PE,
    AUX_VORTICITY,
    AuxChannelSpec,
    ModelParams,
    ModelSpec,
    discrete_curl,
    ensemble_forward,
    forward,
    init_params,
    load_params,
    make_model_fn,
    positional_channels,
    save_params,
    stream_velocity,
    subgrid_coordinates,
)
from stagsolve.residuals import SubtaskContext


def _randomized_params(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """init_params with the output layer filled in so forwards are nontrivial."""
    params = init_params(spec, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    final = params.tensors[f"conv{spec.depth}.weight"]
    final.data[...] = rng.normal(scale=0.3, size=final.shape)
    return params


def _ctx(grid: GridSpec, factors: StaggerFactors, i: int = 0, j: int = 0, k: int = 0):
    return SubtaskContext(i=i, j=j, k=k, factors=factors, grid=grid, time=0.0)


class TestModelSpec:
    def test_layer_shapes_default(self):
        spec = ModelSpec()
        shapes = dict(spec.layer_shapes())
        assert shapes["conv0.weight"] == (32, 1, 3, 3)
        assert shapes["conv3.weight"] == (32, 32, 3, 3)
        assert shapes["conv4.weight"] == (1, 32, 3, 3)
        assert shapes["conv4.bias"] == (1,)
        assert len(shapes) == 10

    def test_validation(self):
        with pytest.raises(ValueError, match="odd"):
            ModelSpec(kernel_size=4)
        with pytest.raises(ValueError, match="depth"):
            ModelSpec(depth=0)
        with pytest.raises(ValueError, match="padding_mode"):
            ModelSpec(padding_mode="reflect")

    def test_params_shape_mismatch(self):
        spec = ModelSpec(hidden_channels=4, depth=1)
        tensors = {
            name: ad.tensor(np.zeros(shape), requires_grad=True)
            for name, shape in spec.layer_shapes()
        }
        tensors["conv0.weight"] = ad.tensor(np.zeros((4, 1, 5, 5)), requires_grad=True)
        with pytest.raises(ValueError, match="conv0.weight"):
            ModelParams(spec, tensors)

    def test_params_name_mismatch(self):
        spec = ModelSpec(hidden_channels=4, depth=1)
        with pytest.raises(ValueError, match="names"):
            ModelParams(spec, {"weights": ad.tensor(np.zeros((4, 1, 3, 3)))})


class TestInit:
    def test_identity_at_init(self):
        spec = ModelSpec(hidden_channels=8, depth=2)
        params = init_params(spec, seed=3)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6, 6))
        y = forward(params, ad.constant(x))
        assert np.array_equal(y.data, x)

    def test_kaiming_bounds_and_zero_output_layer(self):
        spec = ModelSpec(hidden_channels=8, depth=2, kernel_size=3)
        params = init_params(spec, seed=7)
        w0 = params.tensors["conv0.weight"].data
        assert np.all(np.abs(w0) <= np.sqrt(6.0 / (1 * 9)))
        w1 = params.tensors["conv1.weight"].data
        assert np.all(np.abs(w1) <= np.sqrt(6.0 / (8 * 9)))
        assert np.any(w0 != 0.0) and np.any(w1 != 0.0)
        assert np.all(params.tensors["conv2.weight"].data == 0.0)
        for layer in range(3):
            assert np.all(params.tensors[f"conv{layer}.bias"].data == 0.0)

    def test_init_deterministic(self):
        spec = ModelSpec(hidden_channels=8, depth=2)
        a = init_params(spec, seed=11).values_snapshot()
        b = init_params(spec, seed=11).values_snapshot()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        c = init_params(spec, seed=12).values_snapshot()
        assert any(not np.array_equal(a[k], c[k]) for k in a)


class TestForward:
    def test_deterministic(self):
        spec = ModelSpec(hidden_channels=6, depth=2)
        params = _randomized_params(spec)
        x = np.random.default_rng(1).normal(size=(1, 8, 8))
        y1 = forward(params, ad.constant(x))
        y2 = forward(params, ad.constant(x))
        assert np.array_equal(y1.data, y2.data)

    def test_channel_mismatch(self):
        params = _randomized_params(ModelSpec(in_channels=3, hidden_channels=4, depth=1))
        with pytest.raises(ValueError, match="channels"):
            forward(params, ad.constant(np.zeros((1, 4, 4))))

    def test_periodic_shift_equivariance_exact(self):
        spec = ModelSpec(hidden_channels=6, depth=2, padding_mode="periodic")
        params = _randomized_params(spec, seed=4)
        x = np.random.default_rng(5).normal(size=(1, 8, 8))
        y = forward(params, ad.constant(x)).data
        for dr, dc in [(1, 0), (0, 3), (2, 5)]:
            xs = np.roll(x, (dr, dc), axis=(1, 2))
            ys = forward(params, ad.constant(xs)).data
            assert np.array_equal(ys, np.roll(y, (dr, dc), axis=(1, 2)))

    def test_gradient_through_network(self):
        spec = ModelSpec(hidden_channels=4, depth=1)
        params = _randomized_params(spec, seed=8)
        x0 = np.random.default_rng(9).normal(size=(1, 5, 5))

        def f(x):
            return ad.reduce_sum(ad.square(forward(params, x)))

        assert ad.gradient_check(f, x0) < 1e-4

    def test_zero_mean_delta_pins_the_constant_mode(self):
        spec = ModelSpec(hidden_channels=6, depth=2, zero_mean_delta=True)
        params = _randomized_params(spec, seed=13)
        x = np.random.default_rng(14).normal(size=(1, 8, 8))
        y = forward(params, ad.constant(x))
        # predict_delta adds the input back, so the output mean equals the
        # input mean exactly; the network contributes nothing at k=0.
        assert abs((y.data - x).mean()) < 1e-15

    def test_zero_mean_delta_keeps_identity_at_init(self):
        spec = ModelSpec(hidden_channels=6, depth=2, zero_mean_delta=True)
        params = init_params(spec, seed=3)
        x = np.random.default_rng(15).normal(size=(1, 6, 6))
        y = forward(params, ad.constant(x))
        assert np.array_equal(y.data, x)

    def test_zero_mean_delta_keeps_shift_equivariance(self):
        spec = ModelSpec(hidden_channels=6, depth=2, zero_mean_delta=True)
        params = _randomized_params(spec, seed=16)
        x = np.random.default_rng(17).normal(size=(1, 8, 8))
        y = forward(params, ad.constant(x)).data
        xs = np.roll(x, (2, 3), axis=(1, 2))
        ys = forward(params, ad.constant(xs)).data
        assert np.array_equal(ys, np.roll(y, (2, 3), axis=(1, 2)))

    def test_zero_mean_delta_gradients(self):
        spec = ModelSpec(hidden_channels=4, depth=1, zero_mean_delta=True)
        params = _randomized_params(spec, seed=18)
        x0 = np.random.default_rng(19).normal(size=(1, 5, 5))

        def f(x):
            return ad.reduce_sum(ad.square(forward(params, x)))

        assert ad.gradient_check(f, x0) < 1e-4


class TestPositionalChannels:
    def test_identity_factors_meshgrid(self):
        grid = GridSpec(4, 4, dx=0.25)
        rn, cn = subgrid_coordinates(grid, 0, 0, StaggerFactors(1, 1, 1))
        expect_r, expect_c = np.meshgrid([0, 0.25, 0.5, 0.75], [0, 0.25, 0.5, 0.75], indexing="ij")
        assert np.array_equal(rn, expect_r)
        assert np.array_equal(cn, expect_c)

    def test_subgrid_row_offset(self):
        grid = GridSpec(8, 8, dx=0.125)
        factors = StaggerFactors(2, 2, 1)
        rn0, _ = subgrid_coordinates(grid, 0, 0, factors)
        rn1, _ = subgrid_coordinates(grid, 1, 0, factors)
        assert np.array_equal(rn1, rn0 + 1.0 / 8)

    def test_normalized_coords_channels(self):
        grid = GridSpec(8, 8, dx=0.125)
        chans = positional_channels(
            grid, 0, 1, StaggerFactors(2, 2, 1), AuxChannelSpec(AUX_NORMALIZED_COORDS)
        )
        assert len(chans) == 2
        rn, cn = subgrid_coordinates(grid, 0, 1, StaggerFactors(2, 2, 1))
        assert np.array_equal(chans[0], rn)
        assert np.array_equal(chans[1], cn)

    def test_sinusoidal_pe_matches_direct(self):
        grid = GridSpec(8, 8, dx=0.125)
        factors = StaggerFactors(1, 1, 1)
        aux = AuxChannelSpec(AUX_SINUSOIDAL_PE, pe_frequencies=3)
        chans = positional_channels(grid, 0, 0, factors, aux)
        assert len(chans) == 12 == aux.channel_count
        rn, cn = subgrid_coordinates(grid, 0, 0, factors)
        assert np.array_equal(chans[0], np.sin(2 * np.pi * rn))
        assert np.array_equal(chans[1], np.cos(2 * np.pi * rn))
        assert np.array_equal(chans[2], np.sin(2 * np.pi * cn))
        assert np.array_equal(chans[4], np.sin(4 * np.pi * rn))
        assert np.array_equal(chans[8], np.sin(8 * np.pi * rn))

    def test_aux_spec_validation(self):
        with pytest.raises(ValueError, match="mode"):
            AuxChannelSpec("coords")
        with pytest.raises(ValueError, match="pe_frequencies"):
            AuxChannelSpec(AUX_SINUSOIDAL_PE, pe_frequencies=0)
        assert AuxChannelSpec(AUX_NONE).channel_count == 0
        assert AuxChannelSpec(AUX_NORMALIZED_COORDS).channel_count == 2
        assert AuxChannelSpec(AUX_VORTICITY).channel_count == 1


class TestDiscreteCurl:
    def test_rigid_rotation_wall_grid(self):
        # vx = -y, vy = x has curl 2; all stencils are exact on linear fields
        grid = GridSpec(8, 8, dx=0.1, boundary=DIRICHLET_LID)
        y = np.arange(8)[:, None] * 0.1 * np.ones((1, 8))
        x = np.ones((8, 1)) * np.arange(8)[None, :] * 0.1
        w = discrete_curl(Field(grid, -y), Field(grid, x))
        assert isinstance(w, Field)
        assert np.allclose(w.values, 2.0, atol=1e-12)

    def test_constant_velocity(self):
        grid = GridSpec(6, 6, dx=0.2, boundary=DIRICHLET_LID)
        w = discrete_curl(Field(grid, np.full((6, 6), 1.5)), Field(grid, np.full((6, 6), -0.5)))
        assert np.all(w.values == 0.0)

    def test_periodic_sum_zero(self):
        rng = np.random.default_rng(12)
        grid = GridSpec(16, 16, dx=1 / 16)
        w = discrete_curl(Field(grid, rng.normal(size=(16, 16))), Field(grid, rng.normal(size=(16, 16))))
        assert abs(np.sum(w.values)) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            discrete_curl(np.zeros((4, 4)), np.zeros((4, 5)), dx=0.1)

    def test_grid_mismatch(self):
        a = Field(GridSpec(4, 4, dx=0.1), np.zeros((4, 4)))
        b = Field(GridSpec(4, 4, dx=0.2), np.zeros((4, 4)))
        with pytest.raises(ValueError, match="grids"):
            discrete_curl(a, b)

    def test_array_input_needs_dx(self):
        with pytest.raises(ValueError, match="dx"):
            discrete_curl(np.zeros((4, 4)), np.zeros((4, 4)))

    def test_stream_velocity_eigenmode(self):
        n = 16
        xs = np.arange(n) / n
        psi = np.sin(2 * np.pi * xs)[None, :] * np.ones((n, 1))
        vx, vy = stream_velocity(psi, dx=1 / n)
        assert np.all(vx == 0.0)
        expect_vy = -(np.roll(psi, -1, axis=1) - np.roll(psi, 1, axis=1)) * (n / 2)
        assert np.array_equal(vy, expect_vy)


class TestSubtaskAdapter:
    def test_vorticity_channel_matches_manual_assembly(self):
        grid = GridSpec(16, 16, dx=1 / 16)
        factors = StaggerFactors(2, 2, 1)
        spec = ModelSpec(in_channels=2, hidden_channels=4, depth=1)
        params = _randomized_params(spec, seed=2)
        model_fn = make_model_fn(params, AuxChannelSpec(AUX_VORTICITY))
        rng = np.random.default_rng(3)
        sub = rng.normal(size=(8, 8))
        got = model_fn(ad.constant(sub), _ctx(grid, factors, i=1, j=0))

        dx, dy = grid.dx * 2, grid.dx * 2
        vx, vy = stream_velocity(sub, dx=dx, dy=dy)
        aux = discrete_curl(vx, vy, dx=dx, dy=dy)
        x = np.stack([sub, aux])
        expect = forward(params, ad.constant(x)).data.reshape(8, 8)
        assert np.array_equal(got.data, expect)

    def test_vorticity_needs_periodic(self):
        grid = GridSpec(8, 8, dx=1 / 7, boundary=DIRICHLET_LID)
        params = _randomized_params(ModelSpec(in_channels=2, hidden_channels=4, depth=1))
        model_fn = make_model_fn(params, AuxChannelSpec(AUX_VORTICITY))
        with pytest.raises(ValueError, match="periodic"):
            model_fn(ad.constant(np.zeros((4, 4))), _ctx(grid, StaggerFactors(2, 2, 1)))

    def test_positional_channels_enter_input(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        factors = StaggerFactors(2, 2, 1)
        spec = ModelSpec(in_channels=3, hidden_channels=4, depth=1)
        params = _randomized_params(spec, seed=6)
        model_fn = make_model_fn(params, AuxChannelSpec(AUX_NORMALIZED_COORDS))
        sub = np.random.default_rng(7).normal(size=(4, 4))
        got = model_fn(ad.constant(sub), _ctx(grid, factors, i=0, j=1))
        rn, cn = subgrid_coordinates(grid, 0, 1, factors)
        expect = forward(params, ad.constant(np.stack([sub, rn, cn]))).data.reshape(4, 4)
        assert np.array_equal(got.data, expect)

    def test_wall_mask_zeroes_wall_points(self):
        grid = GridSpec(8, 8, dx=1 / 7, boundary=DIRICHLET_LID)
        factors = StaggerFactors(2, 2, 1)
        params = _randomized_params(ModelSpec(hidden_channels=4, depth=1), seed=5)
        model_fn = make_model_fn(params)
        rng = np.random.default_rng(8)
        out00 = model_fn(ad.constant(rng.normal(size=(4, 4))), _ctx(grid, factors, 0, 0)).data
        out11 = model_fn(ad.constant(rng.normal(size=(4, 4))), _ctx(grid, factors, 1, 1)).data
        # subgrid (0,0) holds fine rows/cols {0,2,4,6}: wall at fine 0 only
        assert np.all(out00[0, :] == 0.0) and np.all(out00[:, 0] == 0.0)
        assert np.all(out00[1:, 1:] != 0.0)
        # subgrid (1,1) holds fine rows/cols {1,3,5,7}: wall at fine 7 only
        assert np.all(out11[-1, :] == 0.0) and np.all(out11[:, -1] == 0.0)
        assert np.all(out11[:-1, :-1] != 0.0)

    def test_periodic_grid_not_masked(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        params = _randomized_params(ModelSpec(hidden_channels=4, depth=1), seed=5)
        model_fn = make_model_fn(params)
        out = model_fn(
            ad.constant(np.random.default_rng(9).normal(size=(4, 4))),
            _ctx(grid, StaggerFactors(2, 2, 1)),
        ).data
        assert np.all(out != 0.0)


class TestEnsemble:
    def _tasks(self, grid, factors, seed=10):
        rng = np.random.default_rng(seed)
        h = grid.height // factors.s_h
        w = grid.width // factors.s_w
        return [
            (
                SubtaskContext(i=i, j=j, k=k, factors=factors, grid=grid, time=0.0),
                ad.constant(rng.normal(size=(h, w))),
            )
            for (i, j, k) in factors.subtasks()
        ]

    def test_single_task_single_forward(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        factors = StaggerFactors(1, 1, 1)
        params = _randomized_params(ModelSpec(hidden_channels=4, depth=1))
        model_fn = make_model_fn(params)
        tasks = self._tasks(grid, factors)
        out = ensemble_forward(model_fn, tasks, factors=factors)
        assert len(out) == 1
        direct = model_fn(tasks[0][1], tasks[0][0])
        assert np.array_equal(out[0].data, direct.data)

    def test_serial_equals_parallel_bitwise(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        factors = StaggerFactors(2, 2, 2)
        params = _randomized_params(ModelSpec(hidden_channels=6, depth=2))
        model_fn = make_model_fn(params)
        tasks = self._tasks(grid, factors)
        serial = ensemble_forward(model_fn, tasks, factors=factors, workers=1)
        parallel = ensemble_forward(model_fn, tasks, factors=factors, workers=4)
        assert len(serial) == len(parallel) == 8
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.data, b.data)

    def test_missing_subtask_is_layout_error(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        factors = StaggerFactors(2, 2, 1)
        params = _randomized_params(ModelSpec(hidden_channels=4, depth=1))
        tasks = self._tasks(grid, factors)[:-1]
        with pytest.raises(ValueError, match="missing"):
            ensemble_forward(make_model_fn(params), tasks, factors=factors)

    def test_parameter_sharing_single_source(self):
        grid = GridSpec(8, 8, dx=1 / 8)
        factors = StaggerFactors(2, 2, 1)
        spec = ModelSpec(hidden_channels=4, depth=1)
        params = _randomized_params(spec, seed=13)
        model_fn = make_model_fn(params)
        tasks = self._tasks(grid, factors, seed=14)
        before = [t.data.copy() for t in ensemble_forward(model_fn, tasks, factors=factors)]

        params.tensors["conv1.weight"].data[...] *= 2.0
        after = ensemble_forward(model_fn, tasks, factors=factors)
        for b, a in zip(before, after):
            assert not np.array_equal(b, a.data)
        # every subtask sees exactly the updated tensors, nothing cached
        fresh = ModelParams(
            spec,
            {n: ad.tensor(v, requires_grad=True) for n, v in params.values_snapshot().items()},
        )
        fresh_fn = make_model_fn(fresh)
        for a, (ctx, x) in zip(after, tasks):
            assert np.array_equal(a.data, fresh_fn(x, ctx).data)


class TestCheckpoints:
    def test_roundtrip_bit_identical(self, tmp_path):
        spec = ModelSpec(in_channels=1, hidden_channels=5, depth=3, kernel_size=5, predict_delta=False)
        params = _randomized_params(spec, seed=21)
        save_params(params, tmp_path / "ckpt")
        loaded = load_params(tmp_path / "ckpt")
        assert loaded.spec == spec
        for name, t in params.items():
            assert np.array_equal(t.data, loaded.tensors[name].data)
        x = np.random.default_rng(22).normal(size=(1, 7, 7))
        assert np.array_equal(
            forward(params, ad.constant(x)).data, forward(loaded, ad.constant(x)).data
        )

    def test_loaded_params_require_grad(self, tmp_path):
        params = init_params(ModelSpec(hidden_channels=4, depth=1), seed=1)
        save_params(params, tmp_path / "c")
        loaded = load_params(tmp_path / "c")
        assert all(t.requires_grad for t in loaded.tensors.values())

    def test_zero_mean_delta_survives_roundtrip(self, tmp_path):
        spec = ModelSpec(hidden_channels=4, depth=1, zero_mean_delta=True)
        params = init_params(spec, seed=2)
        save_params(params, tmp_path / "c")
        assert load_params(tmp_path / "c").spec == spec

    def test_load_values_roundtrip(self):
        spec = ModelSpec(hidden_channels=4, depth=1)
        params = _randomized_params(spec, seed=31)
        snap = params.values_snapshot()
        params.tensors["conv0.weight"].data[...] += 1.0
        params.load_values(snap)
        for name, t in params.items():
            assert np.array_equal(t.data, snap[name])
