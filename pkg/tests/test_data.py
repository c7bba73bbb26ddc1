import numpy as np
import pytest

from nptn.data import (
    AugmentPolicy,
    Dataset,
    augment_batch,
    load_cifar10_bin,
    load_dataset,
    load_mnist_idx,
    rotate_image,
    rotate_images,
    transform_dataset,
    translate_image,
    write_cifar10_bin,
    write_mnist_idx,
)
from nptn.errors import ContractError, FormatError
from nptn.tensor import make_rng


@pytest.fixture
def mnist_files(tmp_path):
    rng = make_rng(0)
    images = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([0, 3, 9, 1, 7], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    write_mnist_idx(ip, lp, images, labels)
    return ip, lp, images, labels


class TestMnist:
    def test_magic_bytes(self, mnist_files):
        ip, *_ = mnist_files
        assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03"

    def test_roundtrip(self, mnist_files, tmp_path):
        ip, lp, images, labels = mnist_files
        ds = load_mnist_idx(ip, lp)
        assert ds.images.shape == (5, 1, 28, 28) and ds.images.dtype == np.float32
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.labels.tolist() == labels.tolist()
        ip2, lp2 = tmp_path / "img2", tmp_path / "lbl2"
        write_mnist_idx(ip2, lp2, np.rint(ds.images[:, 0] * 255), ds.labels)
        again = load_mnist_idx(ip2, lp2)
        assert again.images.tobytes() == ds.images.tobytes()
        assert ip2.read_bytes() == ip.read_bytes()

    def test_label_file_with_image_magic(self, mnist_files):
        ip, lp, *_ = mnist_files
        with pytest.raises(FormatError):
            load_mnist_idx(ip, ip)

    def test_truncated(self, mnist_files, tmp_path):
        ip, lp, *_ = mnist_files
        short = tmp_path / "short"
        short.write_bytes(ip.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_mnist_idx(short, lp)
        short.write_bytes(ip.read_bytes()[:6])
        with pytest.raises(FormatError):
            load_mnist_idx(short, lp)


class TestCifar:
    def test_layout_and_roundtrip(self, tmp_path):
        rng = make_rng(1)
        images = rng.integers(0, 256, size=(4, 3, 32, 32), dtype=np.uint8)
        labels = np.array([9, 0, 5, 2])
        path = tmp_path / "batch.bin"
        write_cifar10_bin(path, images, labels)
        raw = path.read_bytes()
        assert len(raw) == 4 * 3073
        ds = load_cifar10_bin([path])
        assert ds.labels.tolist() == [9, 0, 5, 2]
        # first 1024 payload bytes are the red plane
        red = np.frombuffer(raw[1:1025], dtype=np.uint8).reshape(32, 32)
        np.testing.assert_array_equal(np.rint(ds.images[0, 0] * 255), red)
        write_cifar10_bin(tmp_path / "again.bin", np.rint(ds.images * 255), ds.labels)
        assert (tmp_path / "again.bin").read_bytes() == raw

    def test_bad_length(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 3074)
        with pytest.raises(FormatError):
            load_cifar10_bin([path])

    def test_batch_count(self, tmp_path):
        path = tmp_path / "b.bin"
        write_cifar10_bin(path, np.zeros((10000, 3072), np.uint8), np.arange(10000) % 10)
        assert len(load_cifar10_bin([path])) == 10000


class TestRotate:
    def test_zero_is_bitwise_identity(self):
        img = make_rng(0).random((1, 7, 7)).astype(np.float32)
        assert rotate_image(img, 0).tobytes() == img.tobytes()

    def test_90_on_2x2(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        np.testing.assert_array_equal(rotate_image(img, 90)[0], [[2, 4], [1, 3]])

    @pytest.mark.parametrize("theta,k", [(0, 0), (90, 1), (180, 2), (270, 3), (-90, 3)])
    def test_quarter_turns_are_permutations(self, theta, k):
        img = make_rng(1).random((2, 9, 9)).astype(np.float32)
        np.testing.assert_array_equal(rotate_image(img, theta), np.rot90(img, k, axes=(1, 2)))

    def test_even_size_quarter_turn(self):
        img = make_rng(2).random((1, 28, 28)).astype(np.float32)
        np.testing.assert_array_equal(rotate_image(img, 90), np.rot90(img, 1, axes=(1, 2)))

    def test_180_twice(self):
        img = make_rng(3).random((1, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(rotate_image(rotate_image(img, 180), 180), img, atol=1e-5)

    def test_bilinear_midpoint(self):
        # a 45 degree turn of a constant image keeps the center pixel value
        img = np.ones((1, 5, 5))
        out = rotate_image(img, 45)
        assert out[0, 2, 2] == pytest.approx(1.0)
        # the corner's source lies 2*sqrt(2)-2 px outside column 0; zero fill beyond
        assert out[0, 0, 0] == pytest.approx(3 - 2 * np.sqrt(2))

    def test_batch_matches_single(self):
        imgs = make_rng(4).random((3, 1, 6, 6)).astype(np.float32)
        batch = rotate_images(imgs, [10.0, -33.0, 0.0])
        for i, a in enumerate([10.0, -33.0, 0.0]):
            np.testing.assert_array_equal(batch[i], rotate_image(imgs[i], a))


class TestTranslate:
    def test_identity(self):
        img = make_rng(0).random((1, 4, 4))
        np.testing.assert_array_equal(translate_image(img, 0, 0), img)

    def test_shift_right(self):
        np.testing.assert_array_equal(translate_image(np.array([[1.0, 2.0]]), 1, 0), [[0, 1]])

    def test_full_width_rejected(self):
        with pytest.raises(ContractError):
            translate_image(np.ones((1, 2, 2)), 2, 0)

    def test_preserves_values_in_frame(self):
        img = np.zeros((1, 8, 8))
        img[0, 2:5, 3:5] = make_rng(1).random((3, 2)) + 0.1
        out = translate_image(img, -2, 3)
        assert sorted(out[out != 0]) == sorted(img[img != 0])


class TestAugment:
    def _batch(self):
        return make_rng(9).random((6, 1, 12, 12)).astype(np.float32)

    def test_zero_policy(self):
        b = self._batch()
        assert augment_batch(b, AugmentPolicy(), make_rng(0)) is b

    def test_deterministic(self):
        b = self._batch()
        pol = AugmentPolicy(rotation_range=60, translate_range=3, train_jitter=2, pad_crop=2, hflip=True)
        x1 = augment_batch(b, pol, make_rng(5))
        x2 = augment_batch(b, pol, make_rng(5))
        assert x1.tobytes() == x2.tobytes()
        assert x1.tobytes() != augment_batch(b, pol, make_rng(6)).tobytes()

    def test_rotation_changes_every_sample(self):
        b = self._batch()
        rng = make_rng(7)
        out = augment_batch(b, AugmentPolicy(rotation_range=90), rng)
        angles = make_rng(7).uniform(-90, 90, size=len(b))
        for i in range(len(b)):
            if abs(angles[i]) > 1e-3:
                assert not np.array_equal(out[i], b[i])

    def test_test_time(self):
        b = self._batch()
        assert augment_batch(b, AugmentPolicy(rotation_range=30), make_rng(0), training=False) is b
        pol = AugmentPolicy(translate_range=2, train_jitter=2, apply_at_test=True)
        # jitter is train-only: at test time only the translation draws
        out = augment_batch(b, pol, make_rng(1), training=False)
        rng = make_rng(1)
        expect = [translate_image(b[i], *(int(v) for v in rng.integers(-2, 3, size=2))) for i in range(len(b))]
        np.testing.assert_array_equal(out, np.stack(expect))

    def test_negative_range_rejected(self):
        with pytest.raises(ContractError):
            AugmentPolicy(rotation_range=-1)

    def test_transform_dataset_fixed(self):
        ds = Dataset(self._batch(), np.arange(6))
        pol = AugmentPolicy(rotation_range=90, apply_at_test=True)
        a = transform_dataset(ds, pol, seed=3, batch=4)
        b = transform_dataset(ds, pol, seed=3)
        assert a.images.tobytes() == b.images.tobytes()


def test_real_mnist_if_present(data_dir):
    try:
        train, test = load_dataset("mnist", data_dir, 100, 50)
    except FileNotFoundError:
        pytest.skip("MNIST not available")
    assert train.images.shape == (100, 1, 28, 28) and len(test) == 50
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    assert set(train.labels.tolist()) <= set(range(10))
