import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from pydantic import ValidationError

from common.error_handlers import DatasetIntegrityError, DatasetParseError, EmptyDatasetError
from services import synth_service as synth


def small_spec(**overrides):
    fields = dict(identities=4, samples_per_identity=3, queries_per_identity=1, image_height=32, image_width=16)
    fields.update(overrides)
    return synth.default_spec(**fields)


class TestGeneration(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = synth.default_spec()
        cls.dataset = synth.generate_dataset(cls.spec, seed=0)

    def test_default_split_sizes(self):
        data = self.dataset
        self.assertEqual(len(data.train) + len(data.gallery) + len(data.query), 200)
        self.assertEqual({s.identity for s in data.train}, set(range(10)))
        test_ids = {s.identity for s in data.query}
        self.assertEqual(test_ids, set(range(10, 20)))
        self.assertEqual({s.identity for s in data.gallery}, test_ids)
        self.assertEqual(len(data.query), 20)
        self.assertEqual(data.train[0].image.shape, (3, 96, 48))

    def test_pixels_on_quantization_grid(self):
        image = self.dataset.train[0].image
        self.assertTrue(np.all(image >= 0.0) and np.all(image < 1.0))
        np.testing.assert_array_equal(image * 65536, np.round(image * 65536))

    def test_attributes_constant_per_identity(self):
        by_identity = {}
        for sample in self.dataset.train + self.dataset.gallery + self.dataset.query:
            self.assertEqual(by_identity.setdefault(sample.identity, sample.attributes), sample.attributes)

    def test_hat_region_is_discriminative(self):
        hat_index = self.dataset.schema.names.index("hat")
        (r0, r1), (c0, c1) = synth.region_cells(synth.template_region("hat"), 96, 48)
        redness = {0: [], 1: []}
        for sample in self.dataset.train:
            patch = sample.image[:, r0:r1, c0:c1]
            redness[sample.attributes[hat_index]].append(float(np.mean(patch[0] - patch[1])))
        self.assertTrue(redness[0] and redness[1])
        self.assertGreater(np.mean(redness[1]) - np.mean(redness[0]), 0.3)

    def test_deterministic_for_seed_and_workers(self):
        spec = small_spec()
        a = synth.generate_dataset(spec, seed=5)
        b = synth.generate_dataset(spec, seed=5, workers=3)
        for left, right in zip(a.train + a.gallery + a.query, b.train + b.gallery + b.query):
            self.assertEqual(left.filename, right.filename)
            np.testing.assert_array_equal(left.image, right.image)
        c = synth.generate_dataset(spec, seed=6)
        self.assertFalse(np.array_equal(a.train[0].image, c.train[0].image))

    def test_invalid_spec(self):
        with self.assertRaises(ValidationError):
            small_spec(queries_per_identity=3)
        with self.assertRaises(ValidationError):
            small_spec(regions={"wings": (0.0, 0.1, 0.0, 0.1)})


class TestAugmentation(unittest.TestCase):
    def setUp(self):
        self.image = synth.generate_dataset(small_spec(), seed=1).train[0].image

    def test_flip_is_involution(self):
        flipped = synth.flip_horizontal(self.image)
        self.assertFalse(np.array_equal(flipped, self.image))
        np.testing.assert_array_equal(synth.flip_horizontal(flipped), self.image)

    def test_erase_rectangle_area(self):
        image = np.zeros((3, 20, 10))
        fill = np.ones((3, 20, 10))
        out, (h, w) = synth.erase_rectangle(image, fraction=0.2, aspect=1.0, top=2, left=1, fill=fill)
        self.assertEqual((h, w), (6, 6))
        self.assertEqual(int(out[0].sum()), h * w)
        self.assertEqual(int(out[:, 2:8, 1:7].sum()), 3 * 36)
        self.assertEqual(image.sum(), 0.0)

    def test_augment_is_deterministic(self):
        a = synth.augment(self.image, 42, flip_probability=0.5, erase_probability=1.0)
        b = synth.augment(self.image, 42, flip_probability=0.5, erase_probability=1.0)
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.shape, self.image.shape)

    def test_augment_probabilities(self):
        unchanged = synth.augment(self.image, 0, flip_probability=0.0, erase_probability=0.0)
        np.testing.assert_array_equal(unchanged, self.image)
        self.assertIsNot(unchanged, self.image)
        flipped = synth.augment(self.image, 0, flip_probability=1.0, erase_probability=0.0)
        np.testing.assert_array_equal(flipped, synth.flip_horizontal(self.image))
        erased = synth.augment(self.image, 0, flip_probability=0.0, erase_probability=1.0)
        self.assertFalse(np.array_equal(erased, self.image))


class TestDisk(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dataset = synth.generate_dataset(small_spec(), seed=2)
        self.paths = synth.save_dataset(self.dataset, self.tmp.name)

    def test_round_trip(self):
        loaded = synth.load_dataset(self.paths["train"])
        self.assertEqual(loaded.schema, self.dataset.schema)
        self.assertEqual(len(loaded.samples), len(self.dataset.train))
        for original, restored in zip(self.dataset.train, loaded.samples):
            self.assertEqual(original.filename, restored.filename)
            self.assertEqual(original.identity, restored.identity)
            self.assertEqual(original.camera, restored.camera)
            self.assertEqual(original.attributes, restored.attributes)
            np.testing.assert_allclose(restored.image, original.image, atol=1e-12, rtol=0)

    def test_empty_directory(self):
        empty = os.path.join(self.tmp.name, "vacio")
        os.makedirs(empty)
        with self.assertRaises(EmptyDatasetError):
            synth.load_dataset(empty)

    def test_malformed_row_reports_line(self):
        labels = os.path.join(self.paths["query"], "labels.tsv")
        with open(labels, "a", encoding="utf-8") as f:
            f.write("roto.pgm\t1\tx\n")
        with self.assertRaises(DatasetParseError) as ctx:
            synth.load_dataset(self.paths["query"])
        self.assertEqual(ctx.exception.line_number, 1 + len(self.dataset.query) + 1)

    def test_missing_image(self):
        name = self.dataset.gallery[0].filename
        os.remove(os.path.join(self.paths["gallery"], "images", name))
        with self.assertRaises(DatasetIntegrityError):
            synth.load_dataset(self.paths["gallery"])

    def test_inconsistent_identity_attributes(self):
        labels = os.path.join(self.paths["train"], "labels.tsv")
        with open(labels, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        fields = lines[2].split("\t")
        hat = 3 + self.dataset.schema.names.index("hat")
        fields[hat] = str(1 - int(fields[hat]))
        lines[2] = "\t".join(fields)
        with open(labels, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        with self.assertRaises(DatasetIntegrityError):
            synth.load_dataset(self.paths["train"])

    def test_identity_remap(self):
        remap = synth.identity_remap(self.dataset.query)
        self.assertEqual(remap, {2: 0, 3: 1})


if __name__ == '__main__':
    unittest.main()
