from dataclasses import replace
import hashlib
import itertools
import os
from pathlib import Path
import struct
import tempfile
import unittest
import zlib

import numpy as np
import pandas as pd

from vitkd.module.data.attn_export import attn_export, read_pgm
from vitkd.module.data.checkpoint import (Checkpoint, checkpoint_load, checkpoint_save,
                                          config_sidecar, decode, encode)
from vitkd.module.data.dataset import DataConfig, load_splits, synth_generate
from vitkd.module.data.idx_loader import idx_load
from vitkd.util.errors import (ChecksumError, ConfigError, CountError, DataIOError,
                               FormatError, ShapeError, TruncatedError,
                               UnsupportedVersionError)
from vitkd.util.export_utils import read_metrics, write_jsonl
from vitkd.util.pipeline import PipelineCache


def _idx_images(pixels: np.ndarray, magic: int = 0x803) -> bytes:
    header = struct.pack(">I", magic) + struct.pack(">3I", *pixels.shape)
    return header + pixels.astype(np.uint8).tobytes()


def _idx_labels(labels: np.ndarray, magic: int = 0x801) -> bytes:
    return struct.pack(">II", magic, len(labels)) + labels.astype(np.uint8).tobytes()


class SyntheticDataTest(unittest.TestCase):
    def test_deterministic(self):
        first, second = synth_generate(7, 5), synth_generate(7, 5)
        self.assertTrue(np.array_equal(first.images, second.images))
        self.assertTrue(np.array_equal(first.labels, second.labels))

    def test_counts(self):
        data = synth_generate(0, 500, classes=10)
        self.assertEqual(5000, len(data))
        self.assertEqual([500] * 10, np.bincount(data.labels).tolist())
        self.assertEqual((5000, 3, 32, 32), data.images.shape)
        self.assertTrue(data.images.min() >= 0.0 and data.images.max() <= 1.0)

    def test_classes_distinguishable(self):
        data = synth_generate(3, 400, classes=10)
        halves, means = [], []
        for label in range(10):
            images = data.images[data.labels == label].astype(np.float64)
            first, second = images[::2].mean(axis=0), images[1::2].mean(axis=0)
            halves.append(np.linalg.norm(first - second))
            means.append(images.mean(axis=0))
        inter = np.mean([np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2)])
        self.assertGreater(inter, 5.0 * np.mean(halves))

    def test_splits_disjoint(self):
        train, test = synth_generate(1, 50), synth_generate(2, 20)
        train_hashes = {hashlib.md5(image.tobytes()).hexdigest() for image in train.images}
        test_hashes = {hashlib.md5(image.tobytes()).hexdigest() for image in test.images}
        self.assertEqual(500, len(train_hashes))
        self.assertFalse(train_hashes & test_hashes)

    def test_too_many_classes(self):
        with self.assertRaises(ConfigError):
            synth_generate(0, 1, classes=11)


class LoadSplitsTest(unittest.TestCase):
    def setUp(self):
        PipelineCache.memory.clear(warn=False)

    def test_synthetic(self):
        cfg = DataConfig(train_per_class=3, test_per_class=2, image_size=16)
        train, test = load_splits(cfg)
        self.assertEqual((30, 20), (len(train), len(test)))
        self.assertEqual(("train", "test"), (train.split, test.split))
        again, _ = load_splits(cfg)
        self.assertTrue(np.array_equal(train.images, again.images))

    def test_same_seeds(self):
        with self.assertRaises(ConfigError):
            load_splits(DataConfig(train_seed=4, test_seed=4))

    def test_idx_needs_paths(self):
        with self.assertRaises(ConfigError):
            load_splits(DataConfig(source="idx"))

    def test_idx_rewritten_file_is_reloaded(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = {name: os.path.join(tmp, F"{name}.idx") for name in
                     ("train_images", "train_labels", "test_images", "test_labels")}
            pixels = np.random.default_rng(4).integers(0, 256, (4, 28, 28))
            for split in ("train", "test"):
                Path(paths[F"{split}_images"]).write_bytes(_idx_images(pixels))
                Path(paths[F"{split}_labels"]).write_bytes(_idx_labels(np.arange(4)))
            cfg = DataConfig(source="idx", **paths)
            first, _ = load_splits(cfg)
            Path(paths["train_labels"]).write_bytes(_idx_labels(np.full(4, 9)))
            second, _ = load_splits(cfg)
        self.assertEqual([0, 1, 2, 3], first.labels.tolist())
        self.assertEqual([9, 9, 9, 9], second.labels.tolist())


class IdxLoaderTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.pixels = np.random.default_rng(0).integers(0, 256, (5, 28, 28))
        self.labels = np.array([0, 3, 9, 1, 1])

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, images: bytes, labels: bytes):
        images_path, labels_path = self.dir / "images.idx", self.dir / "labels.idx"
        images_path.write_bytes(images)
        labels_path.write_bytes(labels)
        return str(images_path), str(labels_path)

    def test_pad(self):
        data = idx_load(*self._write(_idx_images(self.pixels), _idx_labels(self.labels)))
        self.assertEqual((5, 3, 32, 32), data.images.shape)
        np.testing.assert_allclose(self.pixels / 255.0, data.images[:, 1, 2:30, 2:30], atol=1e-6)
        self.assertEqual(0.0, float(data.images[:, :, :2].max()))
        self.assertEqual(0.0, float(data.images[:, :, :, 30:].max()))
        np.testing.assert_array_equal(data.images[:, 0], data.images[:, 2])
        self.assertEqual(self.labels.tolist(), data.labels.tolist())

    def test_crop(self):
        pixels = np.random.default_rng(1).integers(0, 256, (2, 36, 36))
        data = idx_load(*self._write(_idx_images(pixels), _idx_labels(self.labels[:2])))
        np.testing.assert_allclose(pixels[:, 2:34, 2:34] / 255.0, data.images[:, 0], atol=1e-6)

    def test_bad_magic(self):
        paths = self._write(_idx_images(self.pixels, magic=0x801), _idx_labels(self.labels))
        with self.assertRaises(FormatError) as context:
            idx_load(*paths)
        self.assertIn("0x00000801", str(context.exception))

    def test_count_mismatch(self):
        with self.assertRaises(CountError):
            idx_load(*self._write(_idx_images(self.pixels), _idx_labels(self.labels[:4])))

    def test_truncated(self):
        with self.assertRaises(TruncatedError):
            idx_load(*self._write(_idx_images(self.pixels)[:-10], _idx_labels(self.labels)))

    def test_label_range(self):
        with self.assertRaises(FormatError):
            idx_load(*self._write(_idx_images(self.pixels), _idx_labels(self.labels)),
                     num_classes=5)

    def test_missing_file(self):
        with self.assertRaises(DataIOError):
            idx_load(str(self.dir / "nope.idx"), str(self.dir / "nope_labels.idx"))


class CheckpointTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "model.vkd1")
        rng = np.random.default_rng(0)
        self.ckpt = Checkpoint(tensors={"layers.0.weight": rng.standard_normal((3, 4)),
                                        "bias": rng.standard_normal(4),
                                        "scalar": np.array(2.5),
                                        "pos_embed": rng.standard_normal((1, 5, 4))},
                               config={"model": {"depth": 1}})

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        checkpoint_save(self.ckpt, self.path)
        loaded = checkpoint_load(self.path)
        self.assertEqual(list(self.ckpt.tensors), list(loaded.tensors))
        for name, value in self.ckpt.tensors.items():
            self.assertTrue(np.array_equal(value.astype(np.float32), loaded.tensors[name]))
            self.assertEqual(np.float32, loaded.tensors[name].dtype)
        self.assertEqual({"model": {"depth": 1}}, loaded.config)
        self.assertTrue(config_sidecar(self.path).name == "model.config.json")
        checkpoint_save(loaded, self.path)
        self.assertEqual(encode(self.ckpt), Path(self.path).read_bytes())

    def test_flipped_byte(self):
        raw = bytearray(encode(self.ckpt))
        raw[40] ^= 0x01
        with self.assertRaises(ChecksumError):
            decode(bytes(raw))

    def test_empty_table(self):
        raw = encode(Checkpoint())
        self.assertEqual(12, len(raw))
        self.assertEqual(b"VKD1", raw[:4])
        self.assertEqual({}, decode(raw))

    def test_versions(self):
        raw = encode(self.ckpt)
        with self.assertRaises(UnsupportedVersionError):
            decode(b"VKD2" + raw[4:])
        with self.assertRaises(FormatError):
            decode(b"NOPE" + raw[4:])

    def test_truncated(self):
        with self.assertRaises(TruncatedError):
            decode(b"VKD1\x00")

    def test_name_not_utf8(self):
        name = b"\xff\xfe"
        body = (b"VKD1" + struct.pack("<I", 1) + struct.pack("<H", len(name)) + name
                + struct.pack("<BI", 1, 1) + struct.pack("<f", 1.0))
        with self.assertRaises(FormatError) as context:
            decode(body + struct.pack("<I", zlib.crc32(body)))
        self.assertIn("not UTF-8", str(context.exception))

    def test_missing(self):
        with self.assertRaises(DataIOError):
            checkpoint_load(os.path.join(self.tmp.name, "absent.vkd1"))

    def test_without_sidecar(self):
        checkpoint_save(replace(self.ckpt, config={}), self.path)
        self.assertFalse(config_sidecar(self.path).exists())
        self.assertEqual({}, checkpoint_load(self.path).config)


class AttnExportTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.prefix = os.path.join(self.tmp.name, "attn", "layer0")

    def tearDown(self):
        self.tmp.cleanup()

    def test_uniform(self):
        _, pgm = attn_export(np.full((5, 5), 0.2), self.prefix)
        np.testing.assert_array_equal(np.full((5, 5), 255, dtype=np.uint8), read_pgm(pgm))

    def test_diagonal(self):
        matrix = np.eye(4) * 0.9 + 0.025
        _, pgm = attn_export(matrix, self.prefix)
        pixels = read_pgm(pgm)
        np.testing.assert_array_equal(np.full(4, 255), np.diagonal(pixels))
        self.assertEqual(7, int(pixels[0, 1]))

    def test_zero(self):
        _, pgm = attn_export(np.zeros((3, 3)), self.prefix)
        self.assertEqual(0, int(read_pgm(pgm).max()))

    def test_csv_round_trip(self):
        rng = np.random.default_rng(0)
        matrix = rng.random((6, 6))
        matrix /= matrix.sum(axis=1, keepdims=True)
        csv, _ = attn_export(matrix, self.prefix)
        parsed = pd.read_csv(csv, header=None).to_numpy()
        np.testing.assert_allclose(matrix, parsed, atol=1e-6)

    def test_not_square(self):
        with self.assertRaises(ShapeError):
            attn_export(np.zeros((2, 3)), self.prefix)


class MetricsFileTest(unittest.TestCase):
    def test_round_trip(self):
        rows = [{"step": 1, "epoch": 0, "l_ori": 2.302585, "total": 2.4, "top1": None},
                {"step": 2, "epoch": 0, "l_ori": 2.1, "total": 2.2, "top1": 0.15}]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.jsonl")
            write_jsonl(rows, path)
            table = read_metrics(path)
        self.assertEqual(["step", "epoch", "l_ori", "total", "top1"], list(table.columns))
        self.assertEqual([1, 2], table["step"].tolist())
        self.assertAlmostEqual(2.302585, table["l_ori"][0], delta=1e-12)
        self.assertTrue(np.isnan(table["top1"][0]))
        self.assertAlmostEqual(0.15, table["top1"][1])


if __name__ == '__main__':
    unittest.main()
