import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rodenet.data import (ChannelNormalizer, DataError, Dataset, make_synthetic, read_cifar_bytes,
                          write_cifar_bytes)
from rodenet.tensor import ShapeError, as_batch, check_chw, concat_time_channel


class TestTimeChannel:
    def test_shape_and_value(self):
        z = np.random.default_rng(0).normal(size=(16, 32, 32))
        y = concat_time_channel(z, 0.5)
        assert y.shape == (17, 32, 32)
        assert np.all(y[-1] == 0.5)

    def test_zero_time(self):
        assert np.all(concat_time_channel(np.ones((2, 3, 3)), 0.0)[-1] == 0)

    def test_batched(self):
        y = concat_time_channel(np.ones((4, 2, 3, 3)), 0.25)
        assert y.shape == (4, 3, 3, 3) and np.all(y[:, -1] == 0.25)

    @given(arrays(np.float64, (3, 4, 4), elements=st.floats(-1e6, 1e6)), st.floats(-10, 10))
    def test_identity_on_old_channels(self, z, t):
        assert np.array_equal(concat_time_channel(z, t)[:3], z)

    def test_q20_keeps_dtype(self):
        y = concat_time_channel(np.zeros((1, 2, 2), dtype=np.int64), 1 << 19)
        assert y.dtype == np.int64 and np.all(y[-1] == 1 << 19)

    def test_conv_over_time_channel_param_count(self):
        # a 16 -> 16 conv over the concatenated input
        assert 3 * 3 * 17 * 16 == 2448
        assert 2 * 2448 + 2 * 2 * 16 == 4960


def test_check_chw_rejects():
    with pytest.raises(ShapeError):
        check_chw(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        check_chw(np.zeros((0, 3, 3)))
    x, single = as_batch(np.zeros((2, 3, 3)))
    assert single and x.shape == (1, 2, 3, 3)


class TestCifar:
    def _records(self, variant):
        rng = np.random.default_rng(0)
        n = 3
        pix = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        if variant == "cifar100":
            head = np.array([[1, 7], [2, 42], [3, 99]], dtype=np.uint8)
        else:
            head = np.array([[4], [0], [9]], dtype=np.uint8)
        return np.concatenate([head, pix], axis=1).tobytes(), pix, head

    def test_cifar100_layout(self):
        buf, pix, head = self._records("cifar100")
        ds = read_cifar_bytes(buf)
        assert ds.labels.tolist() == [7, 42, 99] and ds.num_classes == 100
        # R plane first, row-major
        assert ds.images[1, 0, 0, 1] == pix[1, 1] / 255.0
        assert ds.images[1, 2, 31, 31] == pix[1, 3071] / 255.0
        assert ds.images[2, 1, 1, 0] == pix[2, 1024 + 32] / 255.0
        assert read_cifar_bytes(buf, label="coarse").labels.tolist() == [1, 2, 3]

    def test_cifar10(self):
        buf, _, _ = self._records("cifar10")
        assert read_cifar_bytes(buf, "cifar10").labels.tolist() == [4, 0, 9]

    def test_bad_length(self):
        with pytest.raises(DataError):
            read_cifar_bytes(b"\x00" * 3075)
        with pytest.raises(DataError):
            read_cifar_bytes(b"", "cifar10")

    def test_round_trip(self):
        ds = make_synthetic(5, 4, 32, seed=1)
        ds = Dataset(np.clip(ds.images, 0, 1), ds.labels, 100)
        back = read_cifar_bytes(write_cifar_bytes(ds))
        assert np.array_equal(back.labels, ds.labels)
        assert np.abs(back.images - ds.images).max() <= 0.5 / 255 + 1e-12


class TestSynthetic:
    def test_deterministic(self):
        a, b = make_synthetic(20, seed=3), make_synthetic(20, seed=3)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, make_synthetic(20, seed=4).images)

    def test_balanced(self):
        ds = make_synthetic(64, 4)
        assert np.bincount(ds.labels).tolist() == [16] * 4
        assert ds.images.shape == (64, 3, 8, 8)

    def test_label_range_checked(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((1, 3, 4, 4)), [5], 4)


def test_channel_normalizer():
    x = make_synthetic(50, seed=0).images * 3 + 2
    norm = ChannelNormalizer().fit(x)
    y = norm.transform(x)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(y.std(axis=(0, 2, 3)), 1, atol=1e-6)
    assert norm.get_params() == {"eps": 1e-8}
