import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from pydantic import ValidationError

import config
from common.error_handlers import ArtifactIOError, ConfigurationError, ModeError
from core import ops
from core.gradcheck import check_gradients
from core.params import GROUP_STEM
from core.tensor import Tensor
from models import Mode, StageObjective
from services.model_service import CA3Net
from services.stem_service import stem_forward
from services.synth_service import default_schema
from fixtures import TINY_HEIGHT, TINY_WIDTH, tiny_model_config


def preset_model(preset, **overrides):
    flat = config.resolve_config(preset, overrides=overrides)
    return config.build_model_config(flat, default_schema(), num_identities=10)


class TestPresetShapes(unittest.TestCase):
    def test_desk_feature_map(self):
        model_config = preset_model("desk")
        self.assertEqual(model_config.feature_shape, (128, 24, 12))
        model = CA3Net(model_config).eval()
        image = np.random.default_rng(0).uniform(size=(3, 96, 48))
        self.assertEqual(stem_forward(image, model.params, model_config.stem).shape, (128, 24, 12))

    def test_paper_faithful_feature_map(self):
        self.assertEqual(preset_model("paper-faithful").feature_shape, (2048, 24, 12))

    def test_descriptor_lengths(self):
        desk = preset_model("desk")
        self.assertEqual(desk.appearance_feature_length, 640)
        self.assertEqual(desk.attribute_feature_length, 768)
        self.assertEqual(desk.descriptor_length, 1408)
        self.assertEqual(preset_model("paper-faithful").descriptor_length, 5632)

    def test_forward_descriptor_matches_config(self):
        model_config = tiny_model_config()
        model = CA3Net(model_config).eval()
        images = np.random.default_rng(1).uniform(size=(2, 3, TINY_HEIGHT, TINY_WIDTH))
        out = model.forward(images)
        self.assertEqual(out.features.shape, (2,) + model_config.feature_shape)
        self.assertEqual(out.descriptor.shape, (2, model_config.descriptor_length))
        self.assertIsNone(out.merged_logits)


class TestStemGradients(unittest.TestCase):
    def test_stem_forward_gradients(self):
        model_config = tiny_model_config()
        params = CA3Net(model_config).params
        rng = np.random.default_rng(21)
        images = Tensor(rng.uniform(size=(4, 3, TINY_HEIGHT, TINY_WIDTH)), requires_grad=True)
        readout = Tensor(rng.normal(size=(4,) + model_config.feature_shape))

        def loss():
            T = stem_forward(images, params, model_config.stem, Mode.TRAIN)
            return ops.reduce_sum(ops.mul(T, readout))

        tensors = {"images": images}
        for name in params.names([GROUP_STEM]):
            tensors[name] = params[name]
        errors = check_gradients(loss, tensors, max_elements=10)
        self.assertIn("stem.conv1.weight", errors)
        for name, error in errors.items():
            self.assertLess(error, 1e-4, f"{name}: {error:.2e}")


class TestInitialization(unittest.TestCase):
    def test_same_seed_same_parameters(self):
        a = CA3Net(tiny_model_config(seed=3)).snapshot()
        b = CA3Net(tiny_model_config(seed=3)).snapshot()
        self.assertEqual(sorted(a), sorted(b))
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seeds_differ(self):
        a = CA3Net(tiny_model_config(seed=0)).snapshot()
        b = CA3Net(tiny_model_config(seed=1)).snapshot()
        self.assertFalse(np.array_equal(a["stem.conv0.weight"], b["stem.conv0.weight"]))

    def test_stem_independent_of_enabled_branches(self):
        full = CA3Net(tiny_model_config())
        appearance_only = CA3Net(tiny_model_config(use_attribute=False))
        for name in full.params.names([GROUP_STEM]):
            np.testing.assert_array_equal(full.params[name].data, appearance_only.params[name].data)
        self.assertFalse(appearance_only.params.names(["attribute"]))

    def test_merged_head_parameters(self):
        model = CA3Net(tiny_model_config(merged_head=True))
        self.assertEqual(model.params["merged.head.weight"].shape, (4, model.config.descriptor_length))
        names = model.stage_param_names(StageObjective.MERGED_IDENTITY, 2.0)
        self.assertIn("merged.head.weight", names)
        self.assertFalse([n for n in names if n.startswith("attr.head.")])

    def test_stage_groups_respect_lambda(self):
        model = CA3Net(tiny_model_config())
        self.assertEqual(model.stage_groups(StageObjective.APPEARANCE, 2.0), ["stem", "appearance"])
        self.assertEqual(model.stage_groups(StageObjective.JOINT, 2.0), ["stem", "appearance", "attribute"])
        self.assertEqual(model.stage_groups(StageObjective.JOINT, 0.0), ["stem", "appearance"])

    def test_require_mode(self):
        model = CA3Net(tiny_model_config()).train()
        with self.assertRaises(ModeError):
            model.require_mode(Mode.EVAL)
        model.eval().require_mode(Mode.EVAL)

    def test_needs_a_branch(self):
        with self.assertRaises(ValidationError):
            tiny_model_config(use_attribute=False, use_appearance=False)


class TestConfigResolution(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _write(self, name, text):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_resolution_order(self):
        path = self._write("train.env", "lambda=1.5\nbatch_size=8\nlearning_rate=0.05\n")
        flat = config.resolve_config("desk", config_file=path, overrides={"batch_size": "4", "lambda": "3"},
                                     seed=7, lambda_=0.5)
        self.assertEqual(flat["learning_rate"], 0.05)
        self.assertEqual(flat["batch_size"], 4)
        self.assertEqual(flat["lambda"], 0.5)
        self.assertEqual(flat["seed"], 7)
        self.assertEqual(flat["h_stripes"], 6)

    def test_unknown_key(self):
        with self.assertRaises(ConfigurationError):
            config.resolve_config("desk", overrides={"learning_rat": "0.1"})
        path = self._write("bad.env", "no_such_key=1\n")
        with self.assertRaises(ConfigurationError):
            config.resolve_config("desk", config_file=path)

    def test_bad_value_and_preset(self):
        with self.assertRaises(ConfigurationError):
            config.resolve_config("desk", overrides={"batch_size": "muchos"})
        with self.assertRaises(ConfigurationError):
            config.resolve_config("gigante")

    def test_missing_config_file(self):
        with self.assertRaises(ArtifactIOError):
            config.resolve_config("desk", config_file=os.path.join(self.tmp.name, "nada.env"))

    def test_zero_lambda_drops_attribute_branch(self):
        flat = config.resolve_config("desk", lambda_=0.0)
        model_config = config.build_model_config(flat, default_schema(), num_identities=10)
        self.assertFalse(model_config.use_attribute)
        self.assertEqual(model_config.descriptor_length, 640)

    def test_zero_lambda_keeps_attribute_branch_for_merged_head(self):
        flat = config.resolve_config("desk", overrides={"stage3_objective": "merged_identity"}, lambda_=0.0)
        model_config = config.build_model_config(flat, default_schema(), num_identities=10)
        self.assertTrue(model_config.use_attribute)
        self.assertTrue(model_config.merged_head)

    def test_train_config_ranges(self):
        flat = config.resolve_config("desk", overrides={"momentum": "1.0"})
        with self.assertRaises(ValidationError):
            config.build_train_config(flat)
        train = config.build_train_config(config.resolve_config("desk", lambda_=1.25))
        self.assertEqual(train.lambda_, 1.25)

    def test_learning_rate_schedule(self):
        train = config.build_train_config(config.resolve_config("desk", overrides={"stage2_epochs": "8"}))
        self.assertEqual(train.learning_rate_at(2, 0), 0.01)
        self.assertEqual(train.learning_rate_at(2, 5), 0.01)
        self.assertAlmostEqual(train.learning_rate_at(2, 6), 0.001, delta=1e-15)

    def test_short_stages_start_at_base_rate(self):
        train = config.build_train_config(config.resolve_config(
            "desk", overrides={"stage1_epochs": "1", "stage2_epochs": "2", "stage3_epochs": "3"}))
        self.assertEqual(train.learning_rate_at(1, 0), 0.01)
        self.assertEqual(train.learning_rate_at(2, 0), 0.01)
        self.assertAlmostEqual(train.learning_rate_at(2, 1), 0.001, delta=1e-15)
        self.assertEqual([train.learning_rate_at(3, e) for e in range(2)], [0.01, 0.01])
        self.assertAlmostEqual(train.learning_rate_at(3, 2), 0.001, delta=1e-15)

    def test_ablation_variants_build(self):
        import verify_ablation
        for name, overrides in verify_ablation.BRANCH_VARIANTS.items():
            with self.subTest(name=name):
                model_config = preset_model("desk", **overrides)
                expected = overrides["appearance_branches"].split(",")
                self.assertEqual([b.value for b in model_config.partition.branches], expected)
                self.assertLess(model_config.appearance_feature_length, 640)
        for name, overrides in verify_ablation.ATTRIBUTE_VARIANTS.items():
            with self.subTest(name=name):
                model_config = preset_model("desk", **overrides)
                self.assertEqual(model_config.attribute_variant.value, overrides["attribute_variant"])
                self.assertTrue(model_config.use_attribute)

    def test_synth_spec_file(self):
        path = self._write("synth.env", "identities=6\nsamples_per_identity=4\nregion_hat=0,0.2,0.1,0.9\n")
        fields = config.read_synth_spec(path)
        self.assertEqual(fields["identities"], 6)
        self.assertEqual(fields["regions"], {"hat": (0.0, 0.2, 0.1, 0.9)})
        with self.assertRaises(ConfigurationError):
            config.parse_synth_items({"colour": "red"})
        with self.assertRaises(ArtifactIOError):
            config.read_synth_spec(os.path.join(self.tmp.name, "missing.env"))


if __name__ == '__main__':
    unittest.main()
