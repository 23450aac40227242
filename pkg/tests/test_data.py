"""Data pipeline: tensor files, patch grids, augmentation, statistics,
and the synthetic generator's guarantees."""
import json

import numpy as np
import pytest

from hallucinet.data import (
    PatchSampler,
    PatchSpec,
    TensorFileError,
    augment,
    class_frequencies,
    extract_patch_grid,
    load_manifest,
    load_scene,
    read_tensor_file,
    write_tensor_file,
)
from hallucinet.synthetic import SyntheticConfig, generate_synthetic


class TestTensorFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        for _ in range(20):
            rank = rng.integers(1, 5)
            shape = tuple(int(s) for s in rng.integers(1, 6, size=rank))
            if rng.random() < 0.5:
                arr = rng.normal(size=shape).astype(np.float32)
            else:
                arr = rng.integers(0, 256, size=shape).astype(np.uint8)
            path = tmp_path / "t.mtns"
            write_tensor_file(path, arr)
            back = read_tensor_file(path)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)

    def test_payload_length(self, tmp_path):
        arr = np.ones((2, 3), dtype=np.float32)
        path = tmp_path / "t.mtns"
        write_tensor_file(path, arr)
        blob = path.read_bytes()
        # magic+version+dtype+rank = 7, extents 2*4, payload 6*4 = 24
        assert len(blob) == 7 + 8 + 24

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.mtns"
        write_tensor_file(path, np.ones(3, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFileError):
            read_tensor_file(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.mtns"
        write_tensor_file(path, np.ones((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(TensorFileError):
            read_tensor_file(path)

    def test_unsupported_version_rejected(self, tmp_path):
        path = tmp_path / "t.mtns"
        write_tensor_file(path, np.ones(2, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFileError):
            read_tensor_file(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        with pytest.raises(TensorFileError):
            write_tensor_file(tmp_path / "t.mtns", np.ones(3, dtype=np.int32))


class TestPatchGrid:
    def test_half_overlap_512(self):
        spec = PatchSpec(size=256, overlap=0.5)
        origins = extract_patch_grid(512, 512, spec)
        assert sorted(set(r for r, _ in origins)) == [0, 128, 256]
        assert len(origins) == 9

    def test_exact_fit_single_patch(self):
        assert extract_patch_grid(256, 256, PatchSpec()) == [(0, 0)]

    def test_border_clamp(self):
        origins = extract_patch_grid(300, 256, PatchSpec())
        assert origins == [(0, 0), (44, 0)]

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            extract_patch_grid(128, 512, PatchSpec(size=256))

    def test_full_coverage(self, rng):
        spec = PatchSpec(size=64, overlap=0.25)
        for _ in range(10):
            h = int(rng.integers(64, 200))
            w = int(rng.integers(64, 200))
            covered = np.zeros((h, w), dtype=bool)
            for r, c in extract_patch_grid(h, w, spec):
                covered[r:r + 64, c:c + 64] = True
            assert covered.all()

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PatchSpec(size=100)
        with pytest.raises(ValueError):
            PatchSpec(overlap=1.0)


class TestAugment:
    def test_identity(self, rng):
        arr = rng.normal(size=(3, 8, 8))
        out, = augment([arr], 0)
        assert np.array_equal(out, arr)

    def test_four_rotations_identity(self, rng):
        arr = rng.normal(size=(8, 8))
        out = arr
        for _ in range(4):
            out, = augment([out], 1)
        assert np.allclose(out, arr)

    def test_rotation_index_mapping(self):
        # (r, c) lands on (c, H-1-r) under one 90-degree rotation
        grid = np.arange(9.0).reshape(3, 3)
        rot, = augment([grid], 1)
        for r in range(3):
            for c in range(3):
                assert rot[c, 3 - 1 - r] == grid[r, c]

    def test_non_square_rotation_rejected(self, rng):
        with pytest.raises(ValueError):
            augment([rng.normal(size=(4, 6))], 1)
        out, = augment([rng.normal(size=(4, 6))], 0)  # id 0 fine

    def test_class_frequencies_preserved(self, rng):
        labels = rng.integers(0, 4, size=(8, 8))
        for tid in range(8):
            out, = augment([labels], tid)
            assert np.array_equal(np.bincount(out.ravel(), minlength=4),
                                  np.bincount(labels.ravel(), minlength=4))

    def test_modality_label_correspondence(self):
        # embed coordinates as values; all stacked arrays must move together
        h = w = 6
        coords = np.arange(h * w, dtype=np.float32).reshape(h, w)
        modality = np.stack([coords, coords * 2.0])
        label = coords.copy()
        for tid in range(8):
            m_out, l_out = augment([modality, label], tid)
            assert np.array_equal(m_out[0], l_out)
            assert np.array_equal(m_out[1], l_out * 2.0)

    def test_all_eight_distinct(self, rng):
        arr = rng.normal(size=(4, 4))
        outs = [augment([arr], tid)[0].tobytes() for tid in range(8)]
        assert len(set(outs)) == 8


class TestClassFrequencies:
    def _write_dataset(self, tmp_path, labels_by_scene):
        scenes_dir = tmp_path / "scenes"
        records = []
        for i, labels in enumerate(labels_by_scene):
            sid = f"s{i}"
            d = scenes_dir / sid
            d.mkdir(parents=True)
            color = np.zeros((3, *labels.shape), dtype=np.float32)
            write_tensor_file(d / "color.mtns", color)
            write_tensor_file(d / "labels.mtns", labels.astype(np.uint8))
            records.append({"id": sid, "availability": {}})
        doc = {"class_count": 3, "class_names": ["a", "b", "c"],
               "modalities": [{"name": "color", "channels": 3}],
               "splits": {"train": records}}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        return load_manifest(tmp_path / "manifest.json")

    def test_half_and_half(self, tmp_path):
        labels = np.zeros((10, 10), dtype=np.uint8)
        labels[5:] = 1
        manifest = self._write_dataset(tmp_path, [labels])
        f = class_frequencies(manifest, "train")
        assert np.allclose(f, [0.5, 0.5, 0.0])

    def test_ignore_excluded_and_normalized(self, tmp_path):
        labels = np.zeros((10, 10), dtype=np.uint8)
        labels[:5, :5] = 255
        labels[5:] = 1
        manifest = self._write_dataset(tmp_path, [labels])
        f = class_frequencies(manifest, "train")
        assert f.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(f, [25 / 75, 50 / 75, 0.0])

    def test_small_block(self, tmp_path):
        labels = np.zeros((100, 100), dtype=np.uint8)
        labels[10:20, 10:20] = 2
        manifest = self._write_dataset(tmp_path, [labels])
        f = class_frequencies(manifest, "train")
        assert f[2] == pytest.approx(0.01, abs=1e-12)

    def test_empty_split_rejected(self, tmp_path):
        manifest = self._write_dataset(tmp_path, [np.zeros((8, 8), dtype=np.uint8)])
        with pytest.raises(ValueError):
            class_frequencies(manifest, "val")


class TestSynthetic:
    def test_same_seed_bit_identical(self, tmp_path):
        cfg = SyntheticConfig(scene_count=4, size=96, train_scenes=2, val_scenes=1)
        m1 = generate_synthetic(3, cfg, tmp_path / "a")
        m2 = generate_synthetic(3, cfg, tmp_path / "b")
        for rec in m1.splits["train"]:
            for mod in ("color", "height"):
                a = read_tensor_file(tmp_path / "a" / "scenes" / rec.scene_id / f"{mod}.mtns")
                b = read_tensor_file(tmp_path / "b" / "scenes" / rec.scene_id / f"{mod}.mtns")
                assert np.array_equal(a, b)

    def test_rare_fraction_on_target(self, tiny_dataset):
        freqs = class_frequencies(tiny_dataset, "train")
        assert abs(freqs[3] - 0.015) < 0.005

    def test_pair_marginals_match_in_color(self, tiny_dataset):
        from scipy.stats import ks_2samp

        stats = []
        for rec in tiny_dataset.splits["train"][:3]:
            rasters, labels = load_scene(tiny_dataset, rec.scene_id)
            color = rasters["color"]
            road = color[:, labels == 1].ravel()
            building = color[:, labels == 2].ravel()
            stats.append(ks_2samp(road, building).statistic)
        assert float(np.median(stats)) < 0.05

    def test_pair_disjoint_in_height(self, tiny_dataset):
        for rec in tiny_dataset.splits["train"]:
            rasters, labels = load_scene(tiny_dataset, rec.scene_id)
            height = rasters["height"][0]
            assert height[labels == 1].max() < height[labels == 2].min()

    def test_rasters_normalized(self, tiny_dataset):
        rec = tiny_dataset.splits["train"][0]
        rasters, labels = load_scene(tiny_dataset, rec.scene_id)
        for arr in rasters.values():
            assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_infeasible_rare_fraction(self, tmp_path):
        cfg = SyntheticConfig(scene_count=4, size=96, rare_fraction=0.0001,
                              train_scenes=2, val_scenes=1)
        with pytest.raises(ValueError):
            generate_synthetic(1, cfg, tmp_path / "x")

    def test_availability_schedule(self, tmp_path):
        cfg = SyntheticConfig(scene_count=8, size=96, train_scenes=3, val_scenes=1,
                              availability={"height": 0.5})
        manifest = generate_synthetic(2, cfg, tmp_path / "s")
        flags = [rec.availability["height"] for rec in manifest.splits["test"]]
        assert sum(flags) == 2 and len(flags) == 4


class TestPatchSampler:
    def test_deterministic_batches(self, tiny_dataset):
        spec = PatchSpec(size=64, overlap=0.5)
        s1 = PatchSampler(tiny_dataset, "train", spec, 4, seed=9)
        s2 = PatchSampler(tiny_dataset, "train", spec, 4, seed=9)
        for (b1, l1), (b2, l2) in zip(s1.epoch(0), s2.epoch(0)):
            assert np.array_equal(l1, l2)
            for k in b1:
                assert np.array_equal(b1[k], b2[k])

    def test_epochs_differ(self, tiny_dataset):
        spec = PatchSpec(size=64, overlap=0.5)
        s = PatchSampler(tiny_dataset, "train", spec, 4, seed=9)
        l0 = next(iter(s.epoch(0)))[1]
        l1 = next(iter(s.epoch(1)))[1]
        assert not np.array_equal(l0, l1)

    def test_batches_counts_steps(self, tiny_dataset):
        spec = PatchSpec(size=64, overlap=0.5)
        s = PatchSampler(tiny_dataset, "train", spec, 4, seed=9)
        n = sum(1 for _ in s.batches(2 * s.patches_per_epoch // 4 + 3))
        assert n == 2 * s.patches_per_epoch // 4 + 3
