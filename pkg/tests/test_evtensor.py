import numpy as np
import pytest

from rgbde.errors import EmptyDataset, FormatError, ZeroNormalizer
from rgbde.evsim.events import EventStream
from rgbde.evtensor import (CropBox, SpikeTensor, build_spike_tensor, compute_normalizer, normalize, read_tensor,
                            resize_volume, spike_counts, write_tensor)

BOX = CropBox(50.0, 40.0, 30.0)  # x in [35, 65), y in [25, 55)


def stream(t, x, y, p):
    return EventStream.from_arrays(np.asarray(t), np.asarray(x), np.asarray(y), np.asarray(p), 346, 260)


def random_stream(rng, n, box=BOX, t_max=33000):
    return stream(rng.integers(0, t_max, n), rng.integers(box.x0, box.x0 + box.side, n),
                  rng.integers(box.y0, box.y0 + box.side, n), rng.choice([-1, 1], n))


def test_empty_window_gives_zero_tensor():
    t = build_spike_tensor(EventStream.empty(346, 260), BOX)
    assert t.shape == (9, 150, 150)
    assert not t.data.any()


def test_bin_arithmetic():
    vol = spike_counts(stream([16500], [40], [30], [1]), BOX, 0)
    assert vol[4, 30 - BOX.y0, 40 - BOX.x0] == 1
    assert vol.sum() == 1
    # the window is half-open
    vol = spike_counts(stream([0, 32999, 33000], [40] * 3, [30] * 3, [1] * 3), BOX, 0)
    assert vol[0].sum() == 1 and vol[8].sum() == 1 and vol.sum() == 2
    vol = spike_counts(stream([5000], [40], [30], [1]), BOX, 10000)
    assert vol.sum() == 0


def test_polarity_subtraction_and_crop():
    vol = spike_counts(stream([100, 200, 300, 400], [40, 40, 40, 5], [30, 30, 30, 5], [1, 1, -1, 1]), BOX, 0)
    assert vol[0, 30 - BOX.y0, 40 - BOX.x0] == 1
    assert vol.sum() == 1  # the event at (5, 5) lies outside the crop
    assert vol.dtype.kind == "i"


def test_time_sum_equals_polarity_balance():
    rng = np.random.default_rng(0)
    ev = random_stream(rng, 3000)
    vol = spike_counts(ev, BOX, 0)
    pos, neg = ev.counts()
    balance = (pos - neg)[BOX.y0:BOX.y0 + BOX.side, BOX.x0:BOX.x0 + BOX.side]
    np.testing.assert_array_equal(vol.sum(axis=0), balance)


def test_resize_preserves_mass_for_integer_multiple():
    rng = np.random.default_rng(1)
    box = CropBox(173.0, 130.0, 300.0)
    vol = spike_counts(random_stream(rng, 20000, box), box, 0)
    out = resize_volume(vol, 150)
    for b in range(9):
        assert abs(out[b].sum() - vol[b].sum()) <= 0.01 * max(abs(vol[b]).sum(), 1)
    # a constant field stays constant up to the area ratio
    flat = resize_volume(np.ones((1, 300, 300)), 150)
    np.testing.assert_allclose(flat, 4.0, atol=1e-12)


def test_binning_is_translation_covariant_in_time():
    rng = np.random.default_rng(2)
    width = 33000 / 9
    # keep events away from bin edges so the shift cannot push them across one
    centers = rng.integers(0, 8, 500)
    t = (centers * width + rng.uniform(0.2, 0.8, 500) * width).astype(np.int64)
    ev = stream(np.sort(t), rng.integers(35, 65, 500), rng.integers(25, 55, 500), rng.choice([-1, 1], 500))
    a = spike_counts(ev, BOX, 0)
    b = spike_counts(ev.shifted(round(width)), BOX, 0)
    np.testing.assert_array_equal(b[1:], a[:-1])


def test_normalize_cases():
    data = np.arange(-6, 6, dtype=float).reshape(1, 3, 4)
    t = SpikeTensor(data)
    np.testing.assert_array_equal(normalize(t, 1.0).data, data)
    assert normalize(SpikeTensor(np.array([3.0])), 12.0).data[0] == 0.25
    with pytest.raises(ZeroNormalizer):
        normalize(t, 0.0)


def test_compute_normalizer_cases():
    one = SpikeTensor(np.zeros((9, 4, 4)))
    one.data[3, 1, 2] = -7
    assert compute_normalizer([one]) == 7
    with pytest.raises(EmptyDataset):
        compute_normalizer([])
    zeros = compute_normalizer([np.zeros((9, 4, 4))])
    with pytest.raises(ZeroNormalizer):
        normalize(one, zeros)
    rng = np.random.default_rng(3)
    tensors = [build_spike_tensor(random_stream(rng, 500), BOX) for _ in range(5)]
    brute = 0.0
    for t in tensors:
        for v in t.data.ravel():
            brute = max(brute, abs(v))
    n = compute_normalizer(tensors)
    assert n == brute
    peak = max(tensors, key=lambda t: np.abs(t.data).max())
    assert np.abs(normalize(peak, n).data).max() == 1.0
    for t in tensors:
        assert np.all(np.abs(normalize(t, n).data) <= 1.0)


def test_tensor_snapshot_roundtrip(tmp_path):
    a = np.random.default_rng(4).normal(size=(9, 5, 7)).astype(np.float32)
    write_tensor(tmp_path / "a.tns", a)
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.tns"), a)
    raw = (tmp_path / "a.tns").read_bytes()
    (tmp_path / "short.tns").write_bytes(raw[:-4])
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "short.tns")
