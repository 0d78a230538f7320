import numpy as np
import pytest

from rgbde.errors import EmptyDataset, FormatError, NonFiniteLoss, OddSpatialDims, ShapeMismatch, ZeroStd
from rgbde.nn import reference
from rgbde.nn.layers import Conv2d, Dropout, Fire, Flatten, Linear, MaxPool2, ReLU, TemporalConv
from rgbde.nn.network import (Network, build_event_net, build_frame_net, decode_label, decode_pose, encode_label,
                              encode_pose, event_net_spec, frame_net_spec)
from rgbde.nn.train import (AdamState, FrameStats, compute_frame_stats, denormalize_frame_input, load_checkpoint,
                            lr_schedule, mirror_augment, mse_loss, normalize_frame_input, save_checkpoint, train)
from rgbde.geom import matrix_to_euler_xyz, rotvec_to_matrix

from gradcheck import grad_check, max_relative_error


def test_temporal_kernel_cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 9, 6, 7))
    tk = TemporalConv(5)
    tk.params["weight"][:] = [0, 0, 1, 0, 0]
    np.testing.assert_array_equal(tk.forward(x), x)
    tk.params["weight"][:] = 0.2
    const = np.full((1, 9, 4, 4), 3.0)
    np.testing.assert_allclose(tk.forward(const)[0, 2:7], 3.0, atol=1e-12)
    w = rng.normal(size=5)
    tk.params["weight"][:] = w
    tk.params["bias"][:] = 0.3
    np.testing.assert_allclose(tk.forward(x)[0], reference.temporal_conv(x[0], w, 0.3), atol=1e-12)
    with pytest.raises(ShapeMismatch):
        TemporalConv(4)


def test_conv_pool_linear_match_loop_oracles():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    for k in (1, 3):
        conv = Conv2d(3, 4, k, rng)
        conv.params["bias"][:] = rng.normal(size=4)
        out = conv.forward(x)
        for n in range(2):
            np.testing.assert_allclose(out[n], reference.conv2d(x[n], conv.params["weight"], conv.params["bias"]),
                                       atol=1e-12)
    pool = MaxPool2()
    y = rng.normal(size=(2, 3, 6, 8))
    np.testing.assert_array_equal(pool.forward(y)[1], reference.maxpool2(y[1]))
    lin = Linear(7, 3, rng)
    v = rng.normal(size=(4, 7))
    np.testing.assert_allclose(lin.forward(v)[2], reference.linear(v[2], lin.params["weight"], lin.params["bias"]),
                               atol=1e-12)


def test_conv_identity_kernel():
    conv = Conv2d(4, 4, 3)
    conv.params["weight"][:] = 0
    for c in range(4):
        conv.params["weight"][c, c, 1, 1] = 1.0
    x = np.random.default_rng(2).normal(size=(2, 4, 5, 5))
    np.testing.assert_array_equal(conv.forward(x), x)


@pytest.mark.parametrize("make, shape", [
    (lambda r: TemporalConv(5), (2, 9, 3, 4)),
    (lambda r: Conv2d(3, 4, 3, r), (2, 3, 5, 4)),
    (lambda r: Conv2d(3, 2, 1, r), (2, 3, 4, 4)),
    (lambda r: MaxPool2(), (2, 3, 4, 6)),
    (lambda r: ReLU(), (3, 7)),
    (lambda r: Flatten(), (2, 3, 2, 2)),
    (lambda r: Linear(6, 4, r), (3, 6)),
    (lambda r: Fire(4, 3, 6, rng=r), (2, 4, 4, 4)),
    (lambda r: Fire(6, 3, 6, rng=r), (2, 6, 4, 4)),
    (lambda r: Fire(4, 2, 8, pool=False, rng=r), (1, 4, 5, 5)),
])
def test_layer_gradients_match_finite_differences(make, shape):
    rng = np.random.default_rng(3)
    layer = make(rng)
    for _, lyr, key in layer.named_params():
        lyr.params[key][...] = rng.normal(scale=0.5, size=lyr.params[key].shape)
    # keep inputs away from the ReLU kink and from pooling ties
    x = rng.normal(size=shape)
    x += 0.01 * np.sign(x)
    assert grad_check(layer, x, rng) < 1e-4


def test_fire_shapes_and_zero_weights():
    fire = Fire(64, 32, 64)
    assert fire.output_shape((64, 150, 150)) == (64, 75, 75)
    rng = np.random.default_rng(4)
    f = Fire(3, 2, 4, rng=rng)
    for lyr in (f.sq, f.e1, f.e3):
        lyr.params["weight"][:] = 0
        lyr.params["bias"][:] = 0
    x = rng.normal(size=(1, 3, 4, 4))
    skip = np.maximum(f.skip.forward(x), 0)
    np.testing.assert_allclose(f.forward(x), MaxPool2().forward(skip), atol=1e-12)
    with pytest.raises(OddSpatialDims):
        Fire(3, 2, 4, strict=True).output_shape((3, 5, 4))
    with pytest.raises(ShapeMismatch):
        f.forward(rng.normal(size=(1, 5, 4, 4)))


def event_param_formula(size=150):
    """Parameter count of the full event network, layer by layer."""

    def fire(cin, s, e):
        return (cin * s + s) + (s * e // 2 + e // 2) + (9 * s * e // 2 + e // 2) + (cin * e + e if cin != e else 0)

    spatial = size
    for _ in range(4):
        spatial //= 2
    return (5 + 1) + (64 * 9 * 9 + 64) + fire(64, 32, 64) + fire(64, 64, 128) + fire(128, 128, 256) \
        + fire(256, 128, 512) + (512 * spatial * spatial * 500 + 500) + (500 * 6 + 6)


def test_event_net_structure():
    spec = event_net_spec()
    kinds = [layer[0] for layer in spec.trunk]
    assert kinds[:4] == ["temporal", "relu", "conv", "relu"]
    assert [layer[1:3] for layer in spec.trunk if layer[0] == "fire"] == [(32, 64), (64, 128), (128, 256), (128, 512)]
    assert [layer[1] for layer in spec.trunk if layer[0] == "fc"] == [500, 6]
    assert [layer[1] for layer in spec.trunk if layer[0] == "dropout"] == [0.3] * 5
    assert spec.input_shapes == ((9, 150, 150),)
    assert spec.param_count() == event_param_formula() == 21_517_016


def test_full_event_net_forward_on_zeros():
    net = build_event_net(rng=np.random.default_rng(5), dtype=np.float32)
    assert net.num_params() == 21_517_016
    out = net.forward(np.zeros((2, 9, 150, 150), np.float32))
    assert out.shape == (2, 6) and np.all(np.isfinite(out))


def test_toy_event_net_batch_256():
    net = build_event_net("toy", np.random.default_rng(6), dtype=np.float32)
    out = net.predict(np.random.default_rng(7).normal(size=(256, 9, 32, 32)).astype(np.float32), batch_size=64)
    assert out.shape == (256, 6)


def test_frame_net_structure_and_symmetry():
    spec = frame_net_spec()
    assert spec.input_shapes == ((4, 184, 184), (4, 184, 184))
    assert spec.output_shape() == (6,)
    assert [layer[1:3] for layer in spec.trunk if layer[0] == "fire"] == [(64, 256), (128, 512), (256, 1024)]
    net = build_frame_net("toy", np.random.default_rng(8))
    b0, b1 = net.root.branches
    for (_, l0, k0), (_, l1, k1) in zip(b0.named_params(), b1.named_params()):
        l1.params[k1][...] = l0.params[k0]
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 1, 4, 32, 32))
    net.forward([a, b])
    ab = [o.copy() for o in net.root.branch_outputs]
    net.forward([b, a])
    ba = net.root.branch_outputs
    np.testing.assert_array_equal(ab[0], ba[1])
    np.testing.assert_array_equal(ab[1], ba[0])


def test_frame_net_gradient():
    rng = np.random.default_rng(10)
    net = build_frame_net("toy", rng, dropout=0.0, size=16)
    xs = [rng.normal(size=(2, 4, 16, 16)) for _ in range(2)]
    R = rng.normal(size=(2, 6))
    net.forward(xs)
    net.backward(R)
    grads = dict(net.grad_arrays())
    params = net.param_arrays()[:6] + net.param_arrays()[-4:]
    targets = [(arr, grads[name]) for name, arr in params]
    assert max_relative_error(lambda: float(np.sum(net.forward(xs) * R)), targets, rng, n_probe=5) < 1e-4


def test_dropout_modes():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 10))
    assert np.array_equal(Dropout(0.0).forward(x, train=True, rng=rng), x)
    d = Dropout(0.3)
    assert np.array_equal(d.forward(x), x)
    y = d.forward(x, train=True, rng=rng)
    kept = y != 0
    np.testing.assert_allclose(y[kept], x[kept] / 0.7)
    net = build_event_net("toy", np.random.default_rng(12), dropout=0.0)
    inp = rng.normal(size=(3, 9, 32, 32))
    np.testing.assert_array_equal(net.forward(inp, train=True, rng=rng), net.forward(inp))
    np.testing.assert_array_equal(net.predict(inp), net.predict(inp))


def test_lr_schedule():
    assert lr_schedule(0) == 0.001
    assert lr_schedule(7) == 0.001
    assert lr_schedule(8) == 0.0003
    assert lr_schedule(16) == 9e-5
    assert lr_schedule(39) == pytest.approx(0.001 * 0.3 ** 4, rel=1e-15)


def test_adam_first_step_moves_by_lr():
    net = build_event_net("toy", np.random.default_rng(13))
    before = net.get_flat()
    for _, layer, key in net.parameters():
        layer.grads[key] = np.where(np.arange(layer.params[key].size).reshape(layer.params[key].shape) % 2, 3.0, -0.02)
    adam = AdamState(lr=0.001)
    adam.update(net)
    step = net.get_flat() - before
    grads = np.concatenate([layer.grads[key].ravel() for _, layer, key in net.parameters()])
    np.testing.assert_allclose(step, -0.001 * np.sign(grads), rtol=1e-5)


def test_mse_loss_permutation_invariant():
    rng = np.random.default_rng(14)
    p, t = rng.normal(size=(64, 6)), rng.normal(size=(64, 6))
    perm = rng.permutation(64)
    assert mse_loss(p, t)[0] == mse_loss(p[perm], t[perm])[0]
    assert mse_loss(p, t)[0] == pytest.approx(np.mean((p - t) ** 2), rel=1e-14)


def test_overfit_eight_samples():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(8, 9, 32, 32)).astype(np.float32)
    y = rng.uniform(-1, 1, (8, 6)).astype(np.float32)
    net = build_event_net("toy", np.random.default_rng(16), dtype=np.float32, dropout=0.0)
    # one step per epoch here, so the schedule must not decay every 8 steps
    result = train(net, x, y, np.random.default_rng(17), epochs=500, batch_size=8, max_steps=500,
                   base_lr=3e-4, lr_step_epochs=1000)
    assert result.steps <= 500
    assert min(result.losses) < 1e-4


def test_training_determinism_and_errors():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(12, 9, 16, 16))
    y = rng.uniform(-1, 1, (12, 6))

    def run():
        net = build_event_net("toy", np.random.default_rng(19), size=16)
        return net, train(net, x, y, np.random.default_rng(20), epochs=2, batch_size=4)

    a, ra = run()
    b, rb = run()
    assert ra.losses == rb.losses
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())
    with pytest.raises(EmptyDataset):
        train(a, x[:0], y[:0], rng)
    with pytest.raises(NonFiniteLoss, match="epoch 0"):
        train(a, x, np.full_like(y, np.nan), rng, epochs=1)


def test_pose_encoding_roundtrip():
    R = rotvec_to_matrix([0.1, -0.2, 0.3])
    v = encode_pose([0.04, -0.02, 0.0], R)
    np.testing.assert_allclose(v[:3], [1.0, -0.5, 0.0])
    t, R2 = decode_pose(v)
    np.testing.assert_allclose(R2, R, atol=1e-12)
    lab = np.array([0.01, 0.02, -0.03, 0.1, 0.2, -0.3])
    np.testing.assert_allclose(decode_label(encode_label(lab)), lab, atol=1e-15)


def test_frame_input_normalization():
    stats = FrameStats((1.0, 2.0, 3.0, 4.0), (2.0, 2.0, 1.0, 0.5))
    mean_frame = np.broadcast_to(np.array([1.0, 2.0, 3.0, 4.0])[:, None, None], (4, 5, 5))
    np.testing.assert_array_equal(normalize_frame_input(mean_frame, stats), 0.0)
    x = np.random.default_rng(21).normal(size=(4, 5, 5))
    ident = FrameStats((0.0,) * 4, (1.0,) * 4)
    np.testing.assert_array_equal(normalize_frame_input(x, ident), x)
    np.testing.assert_allclose(denormalize_frame_input(normalize_frame_input(x, stats), stats), x, atol=1e-14)
    with pytest.raises(ZeroStd):
        normalize_frame_input(x, FrameStats((0.0,) * 4, (1.0, 0.0, 1.0, 1.0)))
    s = compute_frame_stats(np.random.default_rng(22).normal(3.0, 2.0, (50, 4, 8, 8)))
    np.testing.assert_allclose(s.mean, 3.0, atol=0.1)
    np.testing.assert_allclose(s.std, 2.0, atol=0.1)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(23)
    net = build_event_net("toy", rng, size=16)
    x, y = rng.normal(size=(4, 9, 16, 16)), rng.uniform(-1, 1, (4, 6))
    res = train(net, x, y, rng, epochs=1, batch_size=2)
    stats = FrameStats((0.1,) * 4, (1.0,) * 4)
    save_checkpoint(tmp_path / "ck", net, normalizer=12.5, frame_stats=stats, adam=res.adam, epoch=1,
                    extra={"note": 1})
    ck = load_checkpoint(tmp_path / "ck")
    assert isinstance(ck.net, Network)
    assert ck.net.spec == net.spec
    np.testing.assert_array_equal(ck.net.get_flat(), net.get_flat().astype(np.float32))
    assert (ck.normalizer, ck.frame_stats, ck.epoch, ck.extra) == (12.5, stats, 1, {"note": 1})
    assert ck.adam.step == res.adam.step == 2
    raw = (tmp_path / "ck").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-100])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "junk").write_bytes(b"hello")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk")


def test_mirror_augment_matches_reflected_motion():
    rng = np.random.default_rng(40)
    x = rng.normal(size=(5, 3, 4, 6))
    R = [rotvec_to_matrix(rng.normal(scale=0.3, size=3)) for _ in range(5)]
    t = rng.normal(scale=0.02, size=(5, 3))
    y = encode_label(np.concatenate([t, [matrix_to_euler_xyz(r) for r in R]], axis=1))
    xa, ya = mirror_augment(x, y)
    assert xa.shape == (20, 3, 4, 6) and ya.shape == (20, 6)
    np.testing.assert_array_equal(xa[5:10], x[..., ::-1])
    np.testing.assert_array_equal(xa[10:15, :, 0], x[:, :, -1])
    # a mirrored image shows the motion conjugated by the reflection S
    for k, S in ((1, np.diag([-1.0, 1, 1])), (2, np.diag([1.0, -1, 1])), (3, np.diag([-1.0, -1, 1]))):
        for i in range(5):
            want = encode_label(np.concatenate([S @ t[i], matrix_to_euler_xyz(S @ R[i] @ S)]))
            np.testing.assert_allclose(ya[5 * k + i], want, atol=1e-12)
