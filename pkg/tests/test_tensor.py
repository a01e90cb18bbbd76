import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvsdepth.errors import ContractError, DegenerateInputError, IngestionError, NumericalError, ConfigurationError
from nvsdepth.tensor import (
    AdamState,
    Tape,
    Tensor,
    adam_step,
    add,
    backward,
    check_finite,
    concat_channels,
    conv2d,
    l1_mean,
    leaky_relu,
    load_checkpoint,
    relu,
    save_checkpoint,
    scale_shift,
    sigmoid,
    slice_channels,
    upsample_nearest2x,
    weighted_sum,
)


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def grads_of(fn, *arrays):
    """Analytic gradients of the scalar ``fn(*tensors)``."""
    ts = [leaf(a) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    backward(tape, out)
    return out.item(), [t.grad for t in ts]


def numeric_grad(fn, arrays, which, h=1e-4):
    base = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[which])
    for idx in np.ndindex(g.shape):
        vals = []
        for s in (h, -h):
            args = [b.copy() for b in base]
            args[which][idx] += s
            vals.append(fn(*[Tensor(a) for a in args]).item())
        g[idx] = (vals[0] - vals[1]) / (2 * h)
    return g


def assert_grad_close(fn, *arrays, rtol=1e-3):
    _, analytic = grads_of(fn, *arrays)
    for i in range(len(arrays)):
        num = numeric_grad(fn, arrays, i)
        scale = np.maximum(np.abs(analytic[i]), np.abs(num))
        bad = np.abs(analytic[i] - num) > rtol * scale + 1e-10
        assert not bad.any(), (i, analytic[i][bad], num[bad])


def away_from_kinks(a, margin=1e-3):
    # keep inputs further than any FD step from the activation kink at 0
    return np.where(np.abs(a) < margin, margin * np.sign(a + 1e-300) * 10, a)


def sum_to_scalar(t):
    # a linear readout with distinct weights, so every entry's gradient differs
    w = np.linspace(0.5, 1.5, t.size).reshape(t.shape)
    return l1_mean(t, -w * 1e3)


class TestConv:
    def test_ones_kernel(self):
        x = Tensor(np.ones((1, 1, 4, 4)))
        out = conv2d(x, Tensor(np.ones((1, 1, 3, 3))), None, stride=1, padding=1).data[0, 0]
        assert out[1, 1] == 9 and out[0, 0] == 4 and out[0, 1] == 6

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        assert np.array_equal(conv2d(Tensor(x), Tensor(w)).data, x)

    def test_stride_two_shape(self):
        out = conv2d(Tensor(np.zeros((1, 1, 256, 256), np.float32)), Tensor(np.zeros((4, 1, 3, 3), np.float32)),
                     stride=2)
        assert out.shape == (1, 4, 128, 128)

    @pytest.mark.parametrize("h,w,s", [(7, 5, 1), (7, 5, 2), (8, 8, 2)])
    def test_output_size_formula(self, h, w, s):
        out = conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, 3, 3))), stride=s, padding=1)
        assert out.shape[2:] == ((h + 2 - 3) // s + 1, (w + 2 - 3) // s + 1)

    def test_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
                        assert abs(out[n, o, i, j] - ref) < 1e-12

    def test_shape_errors(self):
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ConfigurationError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=3)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, rng, stride):
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        assert_grad_close(lambda x, w, b: sum_to_scalar(conv2d(x, w, b, stride=stride)), x, w, b)


class TestElementwise:
    def test_upsample(self):
        out = upsample_nearest2x(Tensor(np.full((1, 1, 1, 1), 7.0)))
        assert out.data.tolist() == [[[[7.0, 7.0], [7.0, 7.0]]]]
        assert upsample_nearest2x(Tensor(np.zeros((1, 3, 2, 5)))).shape == (1, 3, 4, 10)
        x = leaf(np.zeros((1, 2, 2, 3)))
        with Tape() as tape:
            y = upsample_nearest2x(x)
            loss = l1_mean(y, -np.ones(y.shape))
        backward(tape, loss)
        assert np.allclose(x.grad * y.size, 4.0)

    def test_concat_and_slice(self, rng):
        a, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 4, 4))
        c = concat_channels(Tensor(a), Tensor(b))
        assert c.shape == (1, 5, 4, 4) and np.array_equal(c.data[:, :2], a)
        with pytest.raises(ConfigurationError):
            concat_channels(Tensor(a), Tensor(np.zeros((1, 3, 4, 5))))
        x = leaf(a)
        with Tape() as tape:
            s = slice_channels(concat_channels(x, Tensor(np.zeros((1, 3, 4, 4)))), 0, 2)
            loss = sum_to_scalar(s)
        backward(tape, loss)
        assert np.array_equal(x.grad, s.grad)

    def test_activation_values(self):
        assert leaky_relu(Tensor(np.array(-1.0)), 0.2).item() == pytest.approx(-0.2)
        assert relu(Tensor(np.array(-3.0))).item() == 0.0
        assert sigmoid(Tensor(np.array(0.0))).item() == 0.5
        _, (g,) = grads_of(lambda x: sigmoid(x), np.array(0.0))
        assert g == 0.25

    def test_sigmoid_extremes_finite(self):
        s = sigmoid(Tensor(np.array([-800.0, 800.0]))).data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    @given(st.integers(0, 2**32 - 1))
    def test_universal_gradient_check(self, seed):
        rng = np.random.default_rng(seed)
        x = away_from_kinks(rng.normal(size=(1, 2, 3, 2)))
        y = rng.normal(size=(1, 2, 3, 2))
        assert_grad_close(lambda t: sum_to_scalar(leaky_relu(t, 0.2)), x)
        assert_grad_close(lambda t: sum_to_scalar(relu(t)), x)
        assert_grad_close(lambda t: sum_to_scalar(sigmoid(t)), x)
        assert_grad_close(lambda t: sum_to_scalar(scale_shift(t, -1.7, 0.3)), x)
        assert_grad_close(lambda a, b: sum_to_scalar(add(a, b)), x, y)
        assert_grad_close(lambda a, b: sum_to_scalar(concat_channels(a, b)), x, y)
        assert_grad_close(lambda t: sum_to_scalar(slice_channels(t, 1, 2)), x)
        assert_grad_close(lambda t: sum_to_scalar(upsample_nearest2x(t)), x)

    def test_add_broadcasts_gradient(self, rng):
        a, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(1, 3, 1, 1))
        assert_grad_close(lambda a, b: sum_to_scalar(add(a, b)), a, b)


class TestL1:
    def test_values(self):
        p = Tensor(np.array([1.0, 3.0]))
        assert l1_mean(p, np.array([1.0, 3.0])).item() == 0
        assert l1_mean(p, np.array([2.0, 1.0])).item() == 1.5
        assert l1_mean(p, np.array([2.0, 1.0]), np.array([True, False])).item() == 1.0

    def test_empty_mask(self):
        with pytest.raises(DegenerateInputError):
            l1_mean(Tensor(np.ones(3)), np.zeros(3), np.zeros(3, bool))

    def test_gradient_is_masked_sign_over_count(self):
        _, (g,) = grads_of(lambda p: l1_mean(p, np.array([0.0, 5.0, 1.0, 1.0]),
                                                np.array([True, True, False, True])),
                           np.array([1.0, 3.0, 9.0, 0.5]))
        assert g.tolist() == [1 / 3, -1 / 3, 0.0, -1 / 3]

    def test_target_tensor_gets_negated_gradient(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        assert_grad_close(lambda p, t: l1_mean(p, t), a, b)

    def test_chain_conv_relu_l1(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(2, 2, 3, 3))
        target = rng.normal(size=(1, 2, 5, 5))
        with Tape() as tape:
            pre = conv2d(Tensor(x), leaf(w))
        # keep pre-activations clear of the kink for a clean FD comparison
        assert np.min(np.abs(pre.data)) > 1e-6
        assert_grad_close(lambda w: l1_mean(relu(conv2d(Tensor(x), w)), target), w)


class TestBackward:
    def test_scale(self):
        _, (g,) = grads_of(lambda x: scale_shift(x, 3.0, 0.0), np.array(2.0))
        assert g == 3.0

    def test_two_consumers_sum(self):
        _, (g,) = grads_of(lambda x: add(scale_shift(x, 2.0, 0.0), scale_shift(x, 5.0, 1.0)), np.array(1.0))
        assert g == 7.0

    def test_non_scalar_root(self):
        x = leaf(np.ones(3))
        with Tape() as tape:
            y = scale_shift(x, 2.0, 0.0)
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_unreachable_gets_zero(self):
        x, z = leaf(np.ones(2)), leaf(np.ones(2))
        with Tape() as tape:
            side = scale_shift(z, 2.0, 0.0)
            loss = l1_mean(scale_shift(x, 2.0, 0.0), np.zeros(2))
        backward(tape, loss)
        assert np.array_equal(z.grad, np.zeros(2)) and np.array_equal(side.grad, np.zeros(2))

    def test_leaf_gradients_accumulate(self):
        x = leaf(np.array([1.0]))
        for _ in range(2):
            with Tape() as tape:
                loss = l1_mean(scale_shift(x, 3.0, 0.0), np.zeros(1))
            backward(tape, loss)
        assert x.grad.tolist() == [6.0]

    def test_tape_is_topological(self, rng):
        x = leaf(rng.normal(size=(1, 1, 4, 4)))
        with Tape() as tape:
            y = sigmoid(upsample_nearest2x(leaky_relu(x)))
            l1_mean(y, np.zeros(y.shape))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(t) in seen for t in node.inputs if isinstance(t, Tensor))
            seen.add(id(node.output))

    def test_no_recording_without_grad(self):
        with Tape() as tape:
            sigmoid(Tensor(np.ones(3)))
        assert tape.nodes == []

    def test_forward_is_deterministic_and_pure(self, rng):
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = leaf(rng.normal(size=(4, 3, 3, 3)), np.float32)
        before = w.data.copy()
        a = conv2d(Tensor(x), w).data
        b = conv2d(Tensor(x), w).data
        assert np.array_equal(a, b) and np.array_equal(w.data, before)

    def test_signature_tracks_relu_masks(self):
        def sig(v):
            with Tape() as tape:
                relu(leaf(np.array([v, 1.0])))
            return tape.signature()
        assert sig(0.5) == sig(0.7) != sig(-0.5)

    def test_check_finite_names_first_bad_tensor(self):
        x = leaf(np.array([1.0, 0.0]))
        with Tape() as tape:
            with np.errstate(all="ignore"):
                y = scale_shift(x, np.inf, 0.0)
                loss = l1_mean(y, np.zeros(2))
        with pytest.raises(NumericalError, match="scale_shift"):
            check_finite(tape, loss)


class TestAdam:
    def test_first_step_closed_form(self):
        p = {"x": leaf(np.array([1.0]))}
        adam_step(p, {"x": np.array([1.0])}, AdamState(), lr=0.1)
        assert p["x"].data[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_grad_keeps_param(self):
        p = {"x": leaf(np.array([2.0]))}
        st_ = AdamState()
        adam_step(p, {"x": np.array([0.0])}, st_, lr=0.1)
        assert p["x"].data[0] == 2.0 and st_.m["x"][0] == 0.0

    def test_moments_decay_without_gradient(self):
        p = {"x": leaf(np.array([0.0]))}
        st_ = AdamState()
        adam_step(p, {"x": np.array([1.0])}, st_, lr=0.1)
        m1 = st_.m["x"][0]
        adam_step(p, None, st_, lr=0.1)  # .grad is None -> zero gradient
        assert st_.m["x"][0] == pytest.approx(0.9 * m1)

    def test_monotone_under_constant_gradient(self):
        p = {"x": leaf(np.array([0.0]))}
        st_ = AdamState()
        xs = []
        for _ in range(3):
            adam_step(p, {"x": np.array([-2.0])}, st_, lr=0.01)
            xs.append(p["x"].data[0])
        assert 0 < xs[0] < xs[1] < xs[2]

    def test_zero_lr_is_bit_exact_noop(self, rng):
        p = {"x": leaf(rng.normal(size=(3, 3)), np.float32)}
        before = p["x"].data.copy()
        st_ = AdamState()
        for _ in range(5):
            adam_step(p, {"x": rng.normal(size=(3, 3)).astype(np.float32)}, st_, lr=0.0)
        assert np.array_equal(before, p["x"].data)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a.weight": rng.normal(size=(2, 3)).astype(np.float32), "b": rng.normal(size=4)}
        adam = AdamState(7, {"a.weight": np.ones((2, 3), np.float32)}, {"a.weight": np.full((2, 3), 2, np.float32)})
        save_checkpoint(tmp_path / "c.nvsd", params, {"kind": "test", "x": "1 2"}, adam)
        header, loaded, st_ = load_checkpoint(tmp_path / "c.nvsd")
        assert header == {"kind": "test", "x": "1 2"}
        for k in params:
            assert loaded[k].dtype == params[k].dtype and np.array_equal(loaded[k], params[k])
        assert st_.step == 7 and np.array_equal(st_.v["a.weight"], adam.v["a.weight"])

    def test_layout_starts_with_magic_and_version(self, tmp_path):
        save_checkpoint(tmp_path / "c.nvsd", {"w": np.zeros(1, np.float32)})
        raw = (tmp_path / "c.nvsd").read_bytes()
        assert raw[:4] == b"NVSD" and struct.unpack("<I", raw[4:8])[0] == 1

    def test_without_adam(self, tmp_path):
        save_checkpoint(tmp_path / "c.nvsd", {"w": np.zeros(2)})
        assert load_checkpoint(tmp_path / "c.nvsd")[2] is None

    @pytest.mark.parametrize("cut", [3, 10, 30])
    def test_truncated(self, tmp_path, cut):
        save_checkpoint(tmp_path / "c.nvsd", {"w": np.zeros(4)}, {"k": "v"})
        data = (tmp_path / "c.nvsd").read_bytes()
        (tmp_path / "t.nvsd").write_bytes(data[:cut])
        with pytest.raises(IngestionError):
            load_checkpoint(tmp_path / "t.nvsd")

    def test_bad_magic_and_missing(self, tmp_path):
        (tmp_path / "x").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(IngestionError, match="magic"):
            load_checkpoint(tmp_path / "x")
        with pytest.raises(IngestionError):
            load_checkpoint(tmp_path / "missing")


def test_weighted_sum_linear():
    a, b = leaf(np.array(0.2)), leaf(np.array(0.4))
    with Tape() as tape:
        out = weighted_sum([(1.0, a), (0.5, b)])
    backward(tape, out)
    assert out.item() == pytest.approx(0.4) and a.grad == 1.0 and b.grad == 0.5
