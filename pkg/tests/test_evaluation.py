import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from common.error_handlers import ConfigurationError, DimensionError, ModeError, ProtocolError
from common.io_utils import read_graymap
from models import AttributeVariant, Descriptor
from services import evaluation_service as ev
from services.model_service import CA3Net
from fixtures import TINY_HEIGHT, TINY_WIDTH, tiny_model_config, tiny_samples
from oracles import brute_force_eval


def random_instance(rng, num_q=20, num_g=50, identities=5):
    gallery_ids = np.concatenate([np.arange(identities), rng.integers(0, identities, size=num_g - identities)])
    rng.shuffle(gallery_ids)
    query_ids = rng.integers(0, identities, size=num_q)
    return rng.uniform(0.0, 4.0, size=(num_q, num_g)), query_ids, gallery_ids


class TestMatching(unittest.TestCase):
    def test_matching_score_examples(self):
        a = Descriptor(vector=np.array([1.0, 2.0, 3.0]), identity=0)
        self.assertEqual(ev.matching_score(a, a), 0.0)
        b = Descriptor(vector=np.array([2.0, 3.0, 3.0]), identity=1)
        self.assertEqual(ev.matching_score(a, b), 2.0)

    def test_matching_score_length_mismatch(self):
        with self.assertRaises(DimensionError):
            ev.matching_score(Descriptor(vector=np.zeros(3), identity=0), Descriptor(vector=np.zeros(4), identity=0))

    def test_distance_matrix_matches_pairwise_scores(self):
        rng = np.random.default_rng(0)
        q, g = rng.normal(size=(4, 6)), rng.normal(size=(7, 6))
        distances = ev.distance_matrix(q, g)
        for i in range(4):
            for j in range(7):
                expected = ev.matching_score(Descriptor(vector=q[i], identity=0), Descriptor(vector=g[j], identity=0))
                self.assertAlmostEqual(distances[i, j], expected, delta=1e-12)


class TestProtocol(unittest.TestCase):
    def test_best_first(self):
        report = ev.evaluate_distances(np.array([[0.2, 0.5, 0.9]]), [7], [7, 1, 2])
        self.assertEqual(report.cmc[1], 1.0)
        self.assertEqual(report.mean_ap, 1.0)
        self.assertEqual(report.first_hit_ranks, [1])

    def test_hits_at_second_and_fourth(self):
        report = ev.evaluate_distances(np.array([[0.1, 0.2, 0.3, 0.4]]), [1], [0, 1, 2, 1], ranks=[1, 2])
        self.assertEqual(report.average_precision, [0.5])
        self.assertEqual(report.cmc, {1: 0.0, 2: 1.0})

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            distances, query_ids, gallery_ids = random_instance(rng)
            report = ev.evaluate_distances(distances, query_ids, gallery_ids, ranks=(1, 5, 10))
            cmc, mean_ap = brute_force_eval(distances, query_ids, gallery_ids, (1, 5, 10))
            self.assertEqual([report.cmc[k] for k in (1, 5, 10)], cmc)
            self.assertEqual(report.mean_ap, mean_ap)

    def test_ties_break_by_gallery_index(self):
        report = ev.evaluate_distances(np.zeros((1, 3)), [1], [0, 1, 1])
        self.assertEqual(report.first_hit_ranks, [2])
        cmc, mean_ap = brute_force_eval(np.zeros((1, 3)), [1], [0, 1, 1], (1,))
        self.assertEqual(report.mean_ap, mean_ap)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        distances, query_ids, gallery_ids = random_instance(rng)
        plain = ev.evaluate_distances(distances, query_ids, gallery_ids)
        squared = ev.evaluate_distances(distances ** 2, query_ids, gallery_ids)
        self.assertEqual(plain.cmc, squared.cmc)
        self.assertEqual(plain.mean_ap, squared.mean_ap)

    def test_cmc_properties(self):
        rng = np.random.default_rng(3)
        distances, query_ids, gallery_ids = random_instance(rng, num_g=30)
        report = ev.evaluate_distances(distances, query_ids, gallery_ids, ranks=(1, 5, 10, 30, 100))
        values = [report.cmc[k] for k in report.ranks]
        self.assertEqual(values, sorted(values))
        self.assertEqual(report.cmc[30], 1.0)
        self.assertEqual(report.cmc[100], 1.0)
        self.assertTrue(0.0 <= report.mean_ap <= 1.0)

    def test_missing_identity_is_protocol_error(self):
        with self.assertRaises(ProtocolError) as ctx:
            ev.evaluate_distances(np.ones((2, 3)), [0, 9], [0, 1, 2])
        self.assertIn("9", str(ctx.exception))

    def test_invalid_ranks(self):
        with self.assertRaises(ConfigurationError):
            ev.evaluate_distances(np.ones((1, 2)), [0], [0, 1], ranks=[0])

    def test_same_camera_filter(self):
        distances = np.array([[0.1, 0.2, 0.3]])
        report = ev.evaluate_distances(distances, [1], [1, 0, 1], query_cams=[0], gallery_cams=[0, 1, 1],
                                       same_camera_filter=True, ranks=[1, 2])
        self.assertEqual(report.first_hit_ranks, [2])

    def test_report_is_deterministic(self):
        rng = np.random.default_rng(4)
        distances, query_ids, gallery_ids = random_instance(rng)
        first = ev.format_report(ev.evaluate_distances(distances, query_ids, gallery_ids))
        second = ev.format_report(ev.evaluate_distances(distances.copy(), query_ids, gallery_ids))
        self.assertEqual(first, second)
        self.assertTrue(first.startswith("metric\tvalue\nrank-1\t"))
        with tempfile.TemporaryDirectory() as tmp:
            paths = ev.write_report(ev.evaluate_distances(distances, query_ids, gallery_ids), tmp)
            with open(paths["report"], encoding="utf-8") as f:
                self.assertEqual(f.read(), first)


class TestModelEvaluation(unittest.TestCase):
    def setUp(self):
        self.model = CA3Net(tiny_model_config())
        self.samples = tiny_samples()

    def test_extraction_requires_eval_mode(self):
        with self.assertRaises(ModeError):
            ev.extract_descriptors(self.model.train(), self.samples)

    def test_descriptors_and_evaluate(self):
        model = self.model.eval()
        descriptors = ev.extract_descriptors(model, self.samples)
        self.assertEqual(descriptors[0].length, model.config.descriptor_length)
        self.assertEqual([d.identity for d in descriptors], [s.identity for s in self.samples])
        single = ev.extract_descriptor(model, self.samples[0].image)
        np.testing.assert_allclose(single.vector, descriptors[0].vector, atol=1e-12)
        queries, gallery = descriptors[0::2], descriptors[1::2]
        report = ev.evaluate(queries, gallery)
        self.assertEqual(report.num_queries, 4)
        self.assertEqual(report.num_gallery, 4)

    def test_l2_normalized_blocks(self):
        model = self.model.eval()
        vectors = ev.descriptor_matrix(model, np.stack([s.image for s in self.samples]), l2_normalize=True)
        split = model.config.appearance_feature_length
        np.testing.assert_allclose(np.linalg.norm(vectors[:, split:], axis=1), 1.0, atol=1e-12)
        app_norms = np.linalg.norm(vectors[:, :split], axis=1)
        self.assertTrue(np.all((np.abs(app_norms - 1.0) < 1e-12) | (app_norms == 0.0)))

    def test_fresh_attention_maps_are_near_uniform(self):
        maps = ev.attention_maps(self.model.eval(), self.samples[0].image)
        self.assertEqual(list(maps), self.model.schema.names)
        for name, Z in maps.items():
            self.assertAlmostEqual(Z.sum(), 1.0, delta=1e-12)
            self.assertLess(Z.max() / Z.min(), 1.5, name)

    def test_export_one_graymap_per_attribute(self):
        model = self.model.eval()
        with tempfile.TemporaryDirectory() as tmp:
            paths = ev.export_attention(model, self.samples[0].image, tmp)
            self.assertEqual(len(paths), model.schema.size)
            self.assertEqual(sorted(os.path.basename(p) for p in paths), ["a0.pgm", "a1.pgm", "a2.pgm"])
            pixels = read_graymap(paths[0])
            self.assertEqual(pixels.shape, (TINY_HEIGHT, TINY_WIDTH))
            self.assertEqual(int(pixels.max()), 255)
            grid = ev.export_attention(model, self.samples[0].image, os.path.join(tmp, "grid"), upscale=False)
            self.assertEqual(read_graymap(grid[0]).shape, model.config.feature_shape[1:])

    def test_attention_pixels(self):
        np.testing.assert_array_equal(ev.attention_pixels(np.array([[0.5, 0.25], [0.0, 0.125]])),
                                      np.array([[255, 128], [0, 64]], dtype=np.uint8))

    def test_attention_localization_counts_present_attributes(self):
        model = self.model.eval()
        top_half = {"a0": (0.0, 0.5, 0.0, 1.0), "a1": (0.0, 0.5, 0.0, 1.0)}
        strict = ev.attention_localization(model, self.samples, regions=top_half, attributes=["a0", "a1"])
        self.assertEqual(strict.pairs, 8)
        self.assertEqual(strict.passed, 0)
        lenient = ev.attention_localization(model, self.samples, regions=top_half, attributes=["a0", "a1"],
                                            factor=0.5)
        self.assertEqual(lenient.fraction, 1.0)
        self.assertEqual(lenient.per_attribute, {"a0": 1.0, "a1": 1.0})

    def test_models_without_attention(self):
        model = CA3Net(tiny_model_config(attribute_variant=AttributeVariant.LSTM)).eval()
        with self.assertRaises(ConfigurationError):
            ev.attention_maps(model, self.samples[0].image)


if __name__ == '__main__':
    unittest.main()
