import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_entries, finite_difference, py_vertex_index, rel_err, scalar_encode
from hybridsdm import tensor as T
from hybridsdm.errors import DimensionError, DomainError, ParameterError
from hybridsdm.hashgrid import GridLevelSpec, HashGridEncoder, make_levels, resolution_schedule, vertex_index


class TestSchedule:
    def test_endpoints_exact(self):
        for r_min, r_max, L in [(16, 512, 8), (3, 1000, 5), (2.5, 7.3, 11), (16, 16, 4)]:
            sched = resolution_schedule(r_min, r_max, L)
            assert sched[0] == r_min and sched[-1] == r_max
            assert len(sched) == L

    def test_interior_value(self):
        assert abs(resolution_schedule(16, 512, 8)[1] - 16 * 32 ** (1 / 7)) < 1e-9
        assert abs(resolution_schedule(16, 512, 8)[1] - 26.25) < 0.01

    def test_geometric(self):
        sched = np.array(resolution_schedule(4, 4096, 11))
        np.testing.assert_allclose(sched[1:] / sched[:-1], 2.0, rtol=1e-12)
        assert np.all(np.diff(sched) >= 0)

    def test_single_level(self):
        assert resolution_schedule(16, 512, 1) == [16.0]

    @pytest.mark.parametrize("args", [(16, 8, 4), (16, 512, 0), (0.5, 4, 3)])
    def test_errors(self, args):
        with pytest.raises(ParameterError):
            resolution_schedule(*args)


class TestVertexIndex:
    def test_origin_is_zero(self):
        for lv in make_levels(4, 600, 6):
            assert vertex_index(0, 0, lv) == 0

    def test_dense_row_major(self):
        lv = GridLevelSpec(0, 4.0, 4, 25, True)
        assert vertex_index(1, 2, lv) == 7

    def test_hashed_against_reimplementation(self):
        lv = GridLevelSpec(0, 500.0, 500, 2 ** 14, False)
        expected = (3 ^ ((5 * 2654435761) % 2 ** 64)) % 16384
        assert vertex_index(3, 5, lv) == expected == py_vertex_index(3, 5, 500, 2 ** 14)

    def test_hashed_vectorized_matches_scalar(self, rng):
        lv = make_levels(16, 512, 4)[-1]
        assert not lv.dense
        i = rng.integers(0, lv.cells + 1, 200)
        j = rng.integers(0, lv.cells + 1, 200)
        got = vertex_index(i, j, lv)
        assert got.tolist() == [py_vertex_index(a, b, lv.cells, lv.table_size) for a, b in zip(i, j)]

    def test_out_of_bounds(self):
        lv = GridLevelSpec(0, 4.0, 4, 25, True)
        with pytest.raises(DomainError):
            vertex_index(5, 0, lv)

    def test_dense_flag(self):
        levels = make_levels(16, 512, 8, table_size=2 ** 14)
        for lv in levels:
            assert lv.dense == ((lv.cells + 1) ** 2 <= 2 ** 14)
            assert lv.table_size == ((lv.cells + 1) ** 2 if lv.dense else 2 ** 14)


CONFIGS = [
    dict(n_levels=4, n_features=2, r_min=4, r_max=32),
    dict(n_levels=8, n_features=4, r_min=16, r_max=512),
    dict(n_levels=3, n_features=8, r_min=2.5, r_max=1000, table_size=2 ** 10),
]


def random_encoder(rng, **kw):
    enc = HashGridEncoder(rng=rng, **kw)
    for t in enc.tables:
        t.values = rng.uniform(-1, 1, size=t.values.shape)
    return enc


class TestEncode:
    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_matches_scalar_oracle(self, cfg, rng):
        enc = random_encoder(rng, **cfg)
        pts = rng.uniform(-1, 1, size=(300, 2))
        pts[:4] = [[-1, -1], [1, 1], [1, -1], [-1, 1]]
        got = enc.encode(pts).values
        want = np.array([scalar_encode(enc, a, b) for a, b in pts])
        assert np.abs(got - want).max() < 1e-12

    def test_vertex_point_returns_vertex_row(self, rng):
        enc = random_encoder(rng, n_levels=1, n_features=3, r_min=8, r_max=8)
        lv = enc.levels[0]
        for i, j in [(0, 0), (3, 5), (8, 8), (8, 0)]:
            pt = np.array([[-1 + 2 * i / 8, -1 + 2 * j / 8]])
            np.testing.assert_array_equal(enc.encode(pt).values[0], enc.tables[0].values[vertex_index(i, j, lv)])

    def test_cell_center_is_corner_mean(self, rng):
        enc = random_encoder(rng, n_levels=1, n_features=3, r_min=8, r_max=8)
        lv, tv = enc.levels[0], enc.tables[0].values
        i, j = 2, 5
        pt = np.array([[-1 + 2 * (i + 0.5) / 8, -1 + 2 * (j + 0.5) / 8]])
        corners = [vertex_index(i + a, j + b, lv) for a in (0, 1) for b in (0, 1)]
        np.testing.assert_allclose(enc.encode(pt).values[0], tv[corners].mean(axis=0), atol=1e-15)

    def test_output_dimension(self, rng):
        for L, M in [(1, 1), (3, 2), (16, 16), (5, 8)]:
            enc = HashGridEncoder(L, M, 4, 64, rng=rng)
            assert enc.output_dim == L * M
            assert enc.encode(rng.uniform(-1, 1, (7, 2))).shape == (7, L * M)

    def test_out_of_range(self, rng):
        enc = HashGridEncoder(2, 2, 4, 8, rng=rng)
        with pytest.raises(DomainError, match="row 1"):
            enc.encode(np.array([[0.0, 0.0], [1.5, 0.0]]))

    def test_piecewise_bilinear_within_cell(self, rng):
        enc = random_encoder(rng, n_levels=1, n_features=4, r_min=10, r_max=10)
        i, j = 3, 7
        h = 2 / 10
        lo = np.array([-1 + i * h, -1 + j * h])
        corners = np.array([lo, lo + [h, 0], lo + [0, h], lo + [h, h]])
        cv = enc.encode(corners).values
        for fu, fv in rng.uniform(0.01, 0.99, size=(20, 2)):
            p = lo + [fu * h, fv * h]
            want = ((1 - fu) * (1 - fv) * cv[0] + fu * (1 - fv) * cv[1]
                    + (1 - fu) * fv * cv[2] + fu * fv * cv[3])
            np.testing.assert_allclose(enc.encode(p[None]).values[0], want, atol=1e-12)

    def test_continuous_across_cell_boundaries(self, rng):
        enc = random_encoder(rng, n_levels=4, n_features=2, r_min=4, r_max=64)
        for lv in enc.levels:
            for k in range(1, lv.cells):
                edge = -1 + 2 * k / lv.cells
                other = rng.uniform(-0.9, 0.9)
                for axis in (0, 1):
                    a, b = np.array([other, other]), np.array([other, other])
                    a[axis], b[axis] = edge - 1e-9, edge + 1e-9
                    diff = np.ptp(enc.encode(np.stack([a, b])).values, axis=0).max()
                    assert diff < 1e-6

    def test_wrap_lon_closes_seam(self, rng):
        enc = random_encoder(rng, n_levels=3, n_features=2, r_min=4, r_max=16, wrap_lon=True)
        lat = rng.uniform(-1, 1, 10)
        west = enc.encode(np.stack([lat, -np.ones(10)], 1)).values
        east = enc.encode(np.stack([lat, np.ones(10)], 1)).values
        np.testing.assert_allclose(west, east, atol=1e-15)

    def test_no_wrap_by_default(self, rng):
        enc = random_encoder(rng, n_levels=1, n_features=2, r_min=4, r_max=4)
        west = enc.encode(np.array([[0.3, -1.0]])).values
        east = enc.encode(np.array([[0.3, 1.0]])).values
        assert not np.allclose(west, east)


class TestBackward:
    def test_vertex_point_gradient(self, rng):
        enc = random_encoder(rng, n_levels=1, n_features=3, r_min=8, r_max=8)
        row = vertex_index(3, 5, enc.levels[0])
        enc.encode_backward(np.array([[-1 + 6 / 8, -1 + 10 / 8]]), np.ones((1, 3)))
        g = enc.tables[0].grad
        np.testing.assert_array_equal(g[row], np.ones(3))
        assert np.count_nonzero(g) == 3

    def test_duplicate_points_double(self, rng):
        enc = random_encoder(rng, n_levels=3, n_features=2, r_min=4, r_max=64)
        p = rng.uniform(-1, 1, (1, 2))
        up = rng.normal(size=(1, 6))
        enc.encode_backward(p, up)
        single = [t.grad.copy() for t in enc.tables]
        for t in enc.tables:
            t.zero_grad()
        enc.encode_backward(np.vstack([p, p]), np.vstack([up, up]))
        for s, t in zip(single, enc.tables):
            np.testing.assert_allclose(t.grad, 2 * s, rtol=1e-15)

    def test_upstream_shape_checked(self, rng):
        enc = HashGridEncoder(2, 2, 4, 8, rng=rng)
        with pytest.raises(DimensionError):
            enc.encode_backward(np.zeros((3, 2)), np.zeros((3, 5)))

    def test_autograd_matches_encode_backward(self, rng):
        enc = random_encoder(rng, n_levels=5, n_features=2, r_min=4, r_max=300)
        pts = rng.uniform(-1, 1, (50, 2))
        up = rng.normal(size=(50, 10))
        out = enc.encode(pts)
        T.backward(T.sum_all(T.from_op(out.values * up, (out,), lambda g: (g * up,))))
        auto = [t.grad.copy() for t in enc.tables]
        for t in enc.tables:
            t.zero_grad()
        enc.encode_backward(pts, up)
        for a, t in zip(auto, enc.tables):
            np.testing.assert_array_equal(a, t.grad)

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_finite_differences(self, cfg, rng):
        enc = random_encoder(rng, **cfg)
        pts = rng.uniform(-1, 1, (20, 2))
        T.backward(T.mean_all(enc.encode(pts)))

        def f():
            return float(enc.encode(pts).values.mean())

        for t in enc.tables:
            entries = check_entries(t, rng)
            assert rel_err(t.grad.ravel()[entries], finite_difference(f, t, entries)) < 1e-6

    @pytest.mark.parametrize("cfg", CONFIGS)
    def test_adjoint_dot_product(self, cfg, rng):
        enc = random_encoder(rng, **cfg)
        pts = rng.uniform(-1, 1, (500, 2))
        U = rng.normal(size=(500, enc.output_dim))
        V = [rng.normal(size=t.values.shape) for t in enc.tables]
        # encode is linear in the tables: <U, encode_V(x)> == sum_l <grad_l, V_l>
        for t, v in zip(enc.tables, V):
            t.values = v
        lhs = float(np.sum(U * enc.encode(pts).values))
        enc.encode_backward(pts, U)
        rhs = float(sum(np.sum(t.grad * v) for t, v in zip(enc.tables, V)))
        assert abs(lhs - rhs) / abs(lhs) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.sampled_from([1, 2, 4, 8]), st.floats(1, 50), st.floats(1, 20))
def test_output_dim_property(L, M, r_min, ratio):
    enc = HashGridEncoder(L, M, r_min, r_min * ratio, rng=np.random.default_rng(0))
    out = enc.encode(np.random.default_rng(1).uniform(-1, 1, (5, 2)))
    assert out.shape == (5, L * M)
    assert np.all(np.isfinite(out.values))
