import struct

import numpy as np
import pytest

from hflsim import data


def write_idx_fixture(tmp_path, pixels, labels):
    """Hand-packed idx-ubyte pair: pixels is (n, rows, cols) uint8."""
    n, rows, cols = pixels.shape
    img_path = tmp_path / "images.idx"
    lbl_path = tmp_path / "labels.idx"
    img_path.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + pixels.tobytes())
    lbl_path.write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    return img_path, lbl_path


class TestIdxLoader:
    def test_hand_crafted_pair(self, tmp_path):
        pixels = np.arange(16, dtype=np.uint8).reshape(4, 2, 2) * 17
        img, lbl = write_idx_fixture(tmp_path, pixels, [0, 1, 0, 1])
        ds = data.load_dataset({"images": img, "labels": lbl}, "idx-ubyte")
        assert ds.size == 4
        assert ds.examples.shape == (4, 4)
        assert np.array_equal(ds.labels, [0, 1, 0, 1])
        assert np.allclose(ds.examples[:, 1], pixels[1].ravel() / 255.0)
        assert ds.examples.min() >= 0.0 and ds.examples.max() <= 1.0

    def test_bad_magic_reports_offset(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(struct.pack(">IIII", 0x9999, 1, 2, 2) + bytes(4))
        with pytest.raises(data.DataFormatError, match="offset 0"):
            data.load_idx_images(p)

    def test_truncated_reports_offset(self, tmp_path):
        p = tmp_path / "short.idx"
        p.write_bytes(struct.pack(">IIII", 0x803, 4, 2, 2) + bytes(7))
        with pytest.raises(data.DataFormatError, match="offset 16"):
            data.load_idx_images(p)

    def test_count_mismatch(self, tmp_path):
        pixels = np.zeros((4, 2, 2), dtype=np.uint8)
        img, lbl = write_idx_fixture(tmp_path, pixels, [0, 1, 0, 1])
        bad_lbl = tmp_path / "short_labels.idx"
        bad_lbl.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 0]))
        with pytest.raises(data.DataFormatError, match="image count 4 != label count 3"):
            data.load_idx_pair(img, bad_lbl)


class TestCsvLoader:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "toy.csv"
        p.write_text("x1,x2,label\n0.5,1.5,0\n2.0,3.0,1\n-1.0,0.25,1\n")
        ds = data.load_dataset(p, "csv")
        assert ds.examples.shape == (2, 3)
        assert np.allclose(ds.examples[:, 0], [0.5, 1.5])
        assert np.array_equal(ds.labels, [0, 1, 1])
        assert ds.num_classes == 2

    def test_malformed_number_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("x1,label\n1.0,0\noops,1\n")
        with pytest.raises(data.DataFormatError, match="bad.csv:3"):
            data.load_csv(p)


class TestSynthetic:
    def test_deterministic(self):
        spec = {"classes": 4, "points": 400, "dim": 6, "cluster_std": 1.0, "seed": 7}
        a = data.load_dataset(spec, "synthetic-spec")
        b = data.load_dataset(spec, "synthetic-spec")
        assert a.examples.tobytes() == b.examples.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert a.num_classes == 4

    def test_balanced_labels(self):
        ds = data.make_synthetic(classes=4, points=400, dim=3, cluster_std=0.5, seed=1)
        assert np.array_equal(np.bincount(ds.labels), [100, 100, 100, 100])


def synthetic_10class(points=2000, seed=3):
    return data.make_synthetic(classes=10, points=points, dim=8, cluster_std=1.0, seed=seed)


class TestPartitionNoniid:
    def test_support_bounded_by_classes_per_client(self):
        ds = synthetic_10class()
        shards = data.partition_noniid(ds, num_clients=100, classes_per_client=2, seed=0)
        assert len(shards) == 100
        for shard in shards:
            assert np.count_nonzero(shard.label_dist) <= 2

    def test_single_client_gets_whole_dataset(self):
        ds = synthetic_10class(points=500)
        shards = data.partition_noniid(ds, num_clients=1, classes_per_client=10, seed=0)
        assert shards[0].size == ds.size

    def test_deterministic(self):
        ds = synthetic_10class()
        a = data.partition_noniid(ds, 20, 2, seed=5)
        b = data.partition_noniid(ds, 20, 2, seed=5)
        assert data.partition_hash(a) == data.partition_hash(b)
        c = data.partition_noniid(ds, 20, 2, seed=6)
        assert data.partition_hash(a) != data.partition_hash(c)

    def test_shards_disjoint_and_cover(self):
        ds = synthetic_10class()
        shards = data.partition_noniid(ds, 50, 2, seed=1)
        all_idx = np.concatenate([s.indices for s in shards])
        assert len(all_idx) == len(set(all_idx.tolist()))
        assert len(all_idx) >= 0.95 * ds.size

    def test_weighted_distributions_recover_global(self):
        ds = synthetic_10class()
        shards = data.partition_noniid(ds, 40, 2, seed=2)
        total = sum(s.size for s in shards)
        mix = sum(s.size / total * s.label_dist for s in shards)
        retained = np.concatenate([s.indices for s in shards])
        global_dist = data.label_distribution(ds.labels[retained], ds.num_classes)
        assert np.max(np.abs(mix - global_dist)) < 1e-9

    def test_infeasible_raises(self):
        ds = data.make_synthetic(classes=10, points=100, dim=3, cluster_std=1.0, seed=0)
        # One client with two classes would drop 80% of the data.
        with pytest.raises(ValueError, match="infeasible"):
            data.partition_noniid(ds, num_clients=1, classes_per_client=2, seed=0)

    def test_too_many_classes_requested(self):
        ds = synthetic_10class()
        with pytest.raises(ValueError):
            data.partition_noniid(ds, 10, classes_per_client=11, seed=0)


class TestPartitionDirichlet:
    def test_covers_most_examples(self):
        ds = synthetic_10class()
        shards = data.partition_dirichlet(ds, 10, alpha=0.5, seed=0)
        assert sum(s.size for s in shards) > 0.9 * ds.size
        all_idx = np.concatenate([s.indices for s in shards])
        assert len(all_idx) == len(set(all_idx.tolist()))


class TestSampleMinibatch:
    def test_s_one_returns_whole_shard(self):
        ds = synthetic_10class(points=300)
        shard = data.partition_noniid(ds, 10, 2, seed=0)[0]
        batch = data.sample_minibatch(ds, shard, 1.0, np.random.default_rng(0))
        assert batch.n_c == shard.size
        assert sorted(batch.labels.tolist()) == sorted(ds.labels[shard.indices].tolist())

    def test_batch_size_rule(self):
        ds = synthetic_10class(points=4000)
        shard = data.partition_noniid(ds, 10, 2, seed=0)[0]
        assert shard.size == 400
        batch = data.sample_minibatch(ds, shard, 0.05, np.random.default_rng(0))
        assert batch.n_c == 20

    def test_seeded_determinism(self):
        ds = synthetic_10class()
        shard = data.partition_noniid(ds, 10, 2, seed=0)[3]
        b1 = data.sample_minibatch(ds, shard, 0.3, np.random.default_rng(42))
        b2 = data.sample_minibatch(ds, shard, 0.3, np.random.default_rng(42))
        assert np.array_equal(b1.labels, b2.labels)
        assert b1.examples.tobytes() == b2.examples.tobytes()

    def test_invalid_probability(self):
        ds = synthetic_10class()
        shard = data.partition_noniid(ds, 10, 2, seed=0)[0]
        with pytest.raises(ValueError):
            data.sample_minibatch(ds, shard, 0.0, np.random.default_rng(0))


class TestLabelDistribution:
    def test_half_half(self):
        assert np.allclose(data.label_distribution(np.array([0, 0, 1, 1]), 2), [0.5, 0.5])

    def test_one_hot(self):
        dist = data.label_distribution(np.full(7, 3), 10)
        expect = np.zeros(10)
        expect[3] = 1.0
        assert np.allclose(dist, expect)

    def test_three_quarters(self):
        assert np.allclose(data.label_distribution(np.array([0, 0, 0, 1]), 2), [0.75, 0.25])
