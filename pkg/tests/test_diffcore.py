import numpy as np
import pytest

from pointocc import diffcore as dc
from pointocc.diffcore import Tensor
from pointocc.errors import ConfigError, ContractError, NumericError, ShapeError

from conftest import rng_for


def test_linear_identity_weights():
    x = Tensor([[1.0, 2.0]])
    w = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([0.0, 0.0])
    assert np.array_equal(dc.linear(x, w, b).data, [[1.0, 2.0]])


def test_linear_zero_input_passes_bias():
    x = Tensor([[0.0, 0.0]])
    w = Tensor(np.random.default_rng(0).standard_normal((2, 2)))
    b = Tensor([3.0, 4.0])
    assert np.array_equal(dc.linear(x, w, b).data, [[3.0, 4.0]])


def test_linear_matches_triple_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    got = dc.linear(Tensor(x), Tensor(w), Tensor(b)).data
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            want[i, j] = acc
    assert np.allclose(got, want, atol=1e-12)


def test_linear_shape_error_names_both_dims():
    with pytest.raises(ShapeError, match="3.*does not match.*4|4.*3"):
        dc.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_softmax_uniform_and_saturation():
    assert np.allclose(dc.softmax(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)
    sat = dc.softmax(Tensor([[1000.0, 0.0, 0.0]])).data
    assert np.allclose(sat, [[1.0, 0.0, 0.0]], atol=1e-12)


def test_softmax_matches_direct_formula():
    x = np.array([[1.0, 2.0, 3.0]])
    want = np.exp(x) / np.exp(x).sum()
    assert np.allclose(dc.softmax(Tensor(x)).data, want, atol=1e-12)


def test_softmax_rows_sum_to_one_many_inputs():
    for trial in range(30):
        rng = rng_for(trial)
        x = rng.standard_normal((5, 7)) * rng.uniform(0.1, 50)
        s = dc.softmax(Tensor(x)).data
        assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        dc.softmax(Tensor([[np.inf, 0.0]]))


def test_bilinear_lattice_point_exact():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((4, 5, 3))
    for i in range(4):
        for j in range(5):
            out = dc.bilinear_sample(Tensor(f), Tensor([float(i), float(j)]))
            assert np.array_equal(out.data, f[i, j])


def test_bilinear_midpoint():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((4, 5, 2))
    out = dc.bilinear_sample(Tensor(f), Tensor([1.0, 2.5]))
    assert np.allclose(out.data, 0.5 * (f[1, 2] + f[1, 3]), atol=1e-12)


def test_bilinear_outside_is_zero():
    f = np.ones((4, 5, 2))
    for p in ([-2.0, 2.0], [10.0, 2.0], [1.0, -3.0], [1.0, 99.0]):
        assert np.array_equal(dc.bilinear_sample(Tensor(f), Tensor(p)).data, [0.0, 0.0])


def test_bilinear_linear_along_axis():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((4, 5, 1))
    a = dc.bilinear_sample(Tensor(f), Tensor([1.0, 2.0])).data
    b = dc.bilinear_sample(Tensor(f), Tensor([2.0, 2.0])).data
    for alpha in (0.25, 0.5, 0.9):
        mid = dc.bilinear_sample(Tensor(f), Tensor([1.0 + alpha, 2.0])).data
        assert np.allclose(mid, (1 - alpha) * a + alpha * b, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    x.zero_grad()
    dc.backward(dc.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_sum_of_squares_gives_x():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    x.zero_grad()
    dc.backward(dc.tsum(dc.mul(x, x)) * 0.5)
    assert np.allclose(x.grad, x.data, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        dc.backward(x + x)


def test_backward_unused_parameter_grad_stays_zero():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    x.zero_grad()
    unused.zero_grad()
    dc.backward(dc.tsum(x))
    assert np.array_equal(unused.grad, np.zeros(3))


def test_composite_gradients_match_finite_differences():
    for trial in range(25):
        rng = rng_for(trial, salt=1)
        x = Tensor(rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((4, 4)))
        b = Tensor(rng.standard_normal(4))

        def fn(x_, w_, b_):
            h = dc.relu(dc.linear(x_, w_, b_))
            s = dc.softmax(dc.sine(h) + dc.cosine(h))
            return dc.tsum(dc.mul(s, s))

        worst = dc.finite_difference_check(fn, [x, w, b], rng=rng)
        assert worst < 1e-4, f"trial {trial}: rel err {worst}"


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((6, 8))
    w = rng.standard_normal((8, 8))

    def run():
        t = dc.relu(dc.matmul(Tensor(x), Tensor(w)))
        return dc.softmax(t).data.tobytes()

    assert run() == run()


def test_adamw_zero_grad_no_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.zero_grad()
    state = dc.AdamWState()
    dc.adamw_step({"p": p}, state, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adamw_pure_decay_scales_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.zero_grad()
    dc.adamw_step({"p": p}, dc.AdamWState(), lr=0.1, weight_decay=0.01)
    assert np.allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.001), atol=1e-15)


def test_adamw_single_step_matches_hand_recurrence():
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    state = dc.AdamWState()
    lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
    dc.adamw_step({"p": p}, state, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
    # by hand: m=0.1*1, v=0.001*1, mhat=1, vhat=1
    want = 0.5 * (1 - lr * wd) - lr * 1.0 / (np.sqrt(1.0) + eps)
    assert np.allclose(p.data, [want], atol=1e-15)


def test_adamw_rejects_non_positive_lr():
    p = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ConfigError):
        dc.adamw_step({"p": p}, dc.AdamWState(), lr=0.0)


def test_deformable_pool_matches_unfused_composition():
    for trial in range(10):
        rng = rng_for(trial, salt=2)
        nm, hh, ww, cc = 3, 5, 6, 4
        p, h, lv, ns = 7, 2, 2, 3
        maps = [Tensor(rng.standard_normal((nm, hh // (1 + l), ww // (1 + l), cc))) for l in range(lv)]
        map_idx = rng.integers(0, nm, size=(p, h))
        coords = [Tensor(rng.uniform(-1, 6, size=(p, h, ns, 2))) for _ in range(lv)]
        weights = Tensor(rng.uniform(0, 1, size=(p, h, lv * ns)))
        fused = dc.deformable_pool(maps, map_idx, coords, weights).data

        want = np.zeros((p, h, cc))
        for l in range(lv):
            midx = (np.repeat(map_idx[:, :, None], ns, axis=2)).reshape(-1)
            flat_coords = coords[l].data.reshape(-1, 2)
            sampled = dc.bilinear_sample_maps(maps[l], midx, Tensor(flat_coords)).data
            sampled = sampled.reshape(p, h, ns, cc)
            w_l = weights.data[:, :, l * ns : (l + 1) * ns]
            want += (sampled * w_l[..., None]).sum(axis=2)
        assert np.allclose(fused, want, atol=1e-9)


def test_deformable_pool_gradients():
    for trial in range(5):
        rng = rng_for(trial, salt=3)
        maps = [Tensor(rng.standard_normal((2, 4, 5, 3))), Tensor(rng.standard_normal((2, 2, 2, 3)))]
        map_idx = rng.integers(0, 2, size=(3, 2))
        coords = [Tensor(rng.uniform(0, 3, size=(3, 2, 2, 2))) for _ in range(2)]
        weights = Tensor(rng.uniform(0.1, 1, size=(3, 2, 4)))
        probe = rng.standard_normal((3, 2, 3))

        def fn(m0, m1, c0, c1, w):
            out = dc.deformable_pool([m0, m1], map_idx, [c0, c1], w)
            return dc.tsum(dc.mul(out, Tensor(probe)))

        worst = dc.finite_difference_check(fn, [maps[0], maps[1], coords[0], coords[1], weights], rng=rng)
        assert worst < 1e-4


def test_conv2d_stride_and_shape():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((6, 8, 2)))
    w = Tensor(rng.standard_normal((3, 3, 2, 4)))
    b = Tensor(np.zeros(4))
    assert dc.conv2d(x, w, b, stride=1).data.shape == (6, 8, 4)
    assert dc.conv2d(x, w, b, stride=2).data.shape == (3, 4, 4)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    got = dc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    want = np.zeros_like(got)
    for oi in range(got.shape[0]):
        for oj in range(got.shape[1]):
            patch = pad[2 * oi : 2 * oi + 3, 2 * oj : 2 * oj + 3]
            for co in range(3):
                want[oi, oj, co] = (patch * w[:, :, :, co]).sum() + b[co]
    assert np.allclose(got, want, atol=1e-12)


def test_avg_pool2_even_and_odd():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((4, 6, 2))
    got = dc.avg_pool2(Tensor(x)).data
    want = x.reshape(2, 2, 3, 2, 2).mean(axis=(1, 3))
    assert np.allclose(got, want, atol=1e-12)
    x2 = rng.standard_normal((3, 5, 1))
    got2 = dc.avg_pool2(Tensor(x2)).data
    assert got2.shape == (2, 3, 1)
    assert np.allclose(got2[1, 2, 0], x2[2, 4, 0], atol=1e-12)  # lone corner cell
    assert np.allclose(got2[0, 2, 0], 0.5 * (x2[0, 4, 0] + x2[1, 4, 0]), atol=1e-12)


def test_scatter_take_roundtrip():
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((5, 3)))
    idx = np.array([0, 2, 2, 4])
    taken = dc.take(x, idx, axis=0)
    assert np.array_equal(taken.data, x.data[idx])
    back = dc.scatter_add_rows(taken, idx, 5)
    assert np.allclose(back.data[2], 2 * x.data[2], atol=1e-12)
    assert np.allclose(back.data[1], 0.0, atol=1e-12)


def test_layer_norm_normalizes_rows():
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((4, 8)) * 3 + 1)
    out = dc.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.std(axis=-1), 1.0, atol=1e-3)


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with dc.no_grad():
        y = dc.relu(x)
    assert not y.requires_grad and y._bw is None
