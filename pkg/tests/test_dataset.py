import os

import numpy as np
import pytest

from nanofusion.augment import AugmentationRecipe
from nanofusion.dataset import Dataset, FormatError, atomic_write, expand, generate_raw


@pytest.fixture(scope="module")
def raw():
    return generate_raw(5, 12)


class TestNFD1:
    def test_round_trip(self, raw, tmp_path):
        path = tmp_path / "d.nfd"
        raw.save(path)
        back = Dataset.load(path)
        for f in ("images", "depths", "labels", "seeds"):
            assert np.array_equal(getattr(back, f), getattr(raw, f), equal_nan=True)

    def test_layout(self, raw):
        data = raw.to_bytes()
        assert data[:4] == b"NFD1"
        assert int.from_bytes(data[4:8], "little") == 12
        # per sample: image, 64 depth floats, 4 label floats, u32 seed
        assert len(data) == 8 + 12 * (15360 + 64 * 4 + 4 * 4 + 4)
        first_depth = np.frombuffer(data, "<f4", 64, offset=8 + 15360)
        assert np.array_equal(first_depth, raw.depths[0].ravel(), equal_nan=True)

    def test_nan_marks_invalid(self, raw):
        assert np.isnan(raw.depths).any()
        v = raw.depths[np.isfinite(raw.depths)]
        assert v.min() >= 0.02 and v.max() <= 4.0

    def test_bad_magic_and_size(self, raw, tmp_path):
        path = tmp_path / "d.nfd"
        path.write_bytes(b"NFQ1" + raw.to_bytes()[4:])
        with pytest.raises(FormatError):
            Dataset.load(path)
        path.write_bytes(raw.to_bytes()[:-1])
        with pytest.raises(FormatError):
            Dataset.load(path)

    def test_empty(self, tmp_path):
        d = Dataset.from_samples([])
        d.save(tmp_path / "e.nfd")
        assert len(Dataset.load(tmp_path / "e.nfd")) == 0


class TestGeneration:
    def test_index_determinism(self, raw):
        """Sample i depends only on (seed, start + i), not on the batch it was made in."""
        tail = generate_raw(5, 4, start=8)
        assert np.array_equal(tail.images, raw.images[8:])
        assert np.array_equal(tail.labels, raw.labels[8:])

    def test_disjoint_seeds(self):
        a, b = generate_raw(5, 5), generate_raw(5, 5, start=5)
        assert not set(a.seeds.tolist()) & set(b.seeds.tolist())

    def test_expand_counts_and_labels(self, raw):
        out = expand(raw, 3, 0, flip_p=0.0)
        assert len(out) == 36
        assert np.array_equal(out.labels[::3], raw.labels)
        assert np.array_equal(out.seeds[1::3], raw.seeds)

    def test_expand_flips_labels(self, raw):
        out = expand(raw, 4, 0, AugmentationRecipe.identity(), flip_p=0.5)
        src = np.repeat(raw.labels, 4, axis=0)
        flipped = out.labels[:, 1] != src[:, 1]
        assert 0 < flipped.sum() < len(out)
        np.testing.assert_allclose(out.labels[flipped, 1], -src[flipped, 1])
        assert np.array_equal(out.images[flipped][0], raw.images[np.argmax(flipped) // 4][:, ::-1])

    def test_expand_deterministic(self, raw):
        assert expand(raw, 2, 7).to_bytes() == expand(raw, 2, 7).to_bytes()

    def test_mismatched_lengths(self, raw):
        with pytest.raises(ValueError):
            Dataset(raw.images, raw.depths[:3], raw.labels, raw.seeds)


class TestAtomicWrite:
    def test_writes_and_replaces(self, tmp_path):
        path = tmp_path / "sub" / "f.bin"
        atomic_write(path, b"one")
        atomic_write(path, b"two")
        assert path.read_bytes() == b"two"
        assert os.listdir(path.parent) == ["f.bin"]

    def test_respects_umask(self, tmp_path):
        old = os.umask(0o022)
        try:
            atomic_write(tmp_path / "f.bin", b"x")
        finally:
            os.umask(old)
        assert (tmp_path / "f.bin").stat().st_mode & 0o777 == 0o644
