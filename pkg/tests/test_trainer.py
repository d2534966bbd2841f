import math
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from common.error_handlers import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigurationError,
    DivergenceError,
    IncompatibleCheckpointError,
)
from core.gradcheck import check_gradients
from core.tensor import Tensor
from models import Sample, StageObjective
from schemas import PartitionConfig, StemConfig
from services.appearance_service import appearance_loss
from services.attribute_service import attribute_loss
from services.checkpoint_service import check_data_compatibility, load_checkpoint, read_checkpoint, save_checkpoint
from services.model_service import CA3Net
from services.trainer_service import LAST_GOOD_NAME, Trainer, total_loss
from fixtures import tiny_model_config, tiny_samples, tiny_schema, tiny_train_config


def make_trainer(checkpoint_dir=None, model_overrides=None, **train_overrides):
    model = CA3Net(tiny_model_config(**(model_overrides or {})))
    return Trainer(model, tiny_train_config(**train_overrides), tiny_samples(), checkpoint_dir=checkpoint_dir)


class TestLossAlgebra(unittest.TestCase):
    def test_total_loss_scalars(self):
        self.assertEqual(total_loss(1.0, 0.5, 2.0), 2.0)
        self.assertEqual(total_loss(1.7, 3.0, 0.0), 1.7)

    def test_total_loss_tensors(self):
        loss = total_loss(Tensor(1.0), Tensor(0.25), 2.0)
        self.assertEqual(loss.item(), 1.5)

    def test_uniform_network_closed_form(self):
        stem = StemConfig(image_height=96, image_width=48, stem_channels=[4, 4, 4], feature_channels=8,
                          stem_strides=[1, 2, 2, 1])
        model = CA3Net(tiny_model_config(num_identities=4, stem=stem, schema=tiny_schema((2,) * 12),
                                         partition=PartitionConfig(h_stripes=6, v_stripes=3, reduced_dim=4)))
        for name in model.params.names():
            if ".head." in name and name.endswith(".weight"):
                model.params[name].data[...] = 0.0
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, size=(4, 12))
        samples = [Sample(image=rng.uniform(size=(3, 96, 48)), identity=i % 4, camera=0,
                          attributes=[int(b) for b in labels[i % 4]])
                   for i in range(8)]
        trainer = Trainer(model, tiny_train_config(), samples)
        record = trainer.step(trainer.stage_spec(2), np.arange(4), augment_images=False)
        self.assertAlmostEqual(record.loss_app, 10 * math.log(4), delta=1e-12)
        self.assertAlmostEqual(record.loss_att, 12 * math.log(2), delta=1e-12)
        self.assertAlmostEqual(record.loss_total, 10 * math.log(4) + 2 * 12 * math.log(2), delta=1e-10)
        self.assertAlmostEqual(record.loss_total, 30.499, delta=1e-3)

    def test_total_loss_gradients_over_all_parameters(self):
        model = CA3Net(tiny_model_config()).train()
        model.params["attr.W_h"].data = model.params["attr.W_h"].data * 50.0
        samples = tiny_samples()[0::2]
        images = np.stack([s.image for s in samples])
        identities = np.array([s.identity for s in samples])
        labels = model.sweep_labels(np.array([s.attributes for s in samples]))

        def loss():
            out = model.forward(images)
            return total_loss(appearance_loss(out.appearance.logits, identities),
                              attribute_loss(out.attribute.logits, labels), 2.0)

        tensors = {name: model.params[name] for name in model.params.names()}
        errors = check_gradients(loss, tensors, max_elements=4)
        self.assertEqual(set(errors), set(model.params.names()))
        for name, error in errors.items():
            self.assertLess(error, 1e-4, f"{name}: {error:.2e}")

    def test_log_records_satisfy_weighted_sum(self):
        trainer = make_trainer()
        log = trainer.run(stages=(2,))
        self.assertTrue(len(log) > 0)
        for record in log:
            self.assertAlmostEqual(record.loss_total, record.loss_app + 2.0 * record.loss_att, delta=1e-10)
            self.assertGreater(record.loss_att, 0.0)


class TestStages(unittest.TestCase):
    def test_stage_one_leaves_attribute_branch_untouched(self):
        trainer = make_trainer()
        params = trainer.model.params
        attribute_before = params.snapshot(["attribute"])
        buffers_before = {k: (m.copy(), v.copy()) for k, (m, v) in params.buffer_arrays().items()
                          if k.startswith("attr.")}
        stem_before = params.snapshot(["stem"])
        log = trainer.run(stages=(1,))
        self.assertTrue(all(r.loss_att == 0.0 for r in log))
        for name, value in attribute_before.items():
            np.testing.assert_array_equal(params[name].data, value)
        for name, (mean, var) in buffers_before.items():
            np.testing.assert_array_equal(params.buffers[name].mean, mean)
            np.testing.assert_array_equal(params.buffers[name].var, var)
        self.assertFalse(np.array_equal(params["stem.conv0.weight"].data, stem_before["stem.conv0.weight"]))

    def test_stage_specs(self):
        trainer = make_trainer(stage3_objective="merged_identity")
        self.assertEqual(trainer.stage_spec(1).trainable_groups, ["stem", "appearance"])
        self.assertEqual(trainer.stage_spec(2).objective, StageObjective.JOINT)
        self.assertEqual(trainer.stage_spec(3).objective, StageObjective.MERGED_IDENTITY)

    def test_merged_identity_stage(self):
        trainer = make_trainer(model_overrides={"merged_head": True}, stage3_objective="merged_identity")
        heads_before = trainer.model.params.snapshot(["attribute"])
        log = trainer.run(stages=(3,))
        self.assertTrue(all(r.loss_merged > 0.0 for r in log))
        for name, value in heads_before.items():
            if name.startswith("attr.head."):
                np.testing.assert_array_equal(trainer.model.params[name].data, value)

    def test_deterministic_replay(self):
        a, b = make_trainer(), make_trainer()
        log_a, log_b = a.run(), b.run()
        self.assertEqual(log_a.to_tsv(), log_b.to_tsv())
        for name, value in a.model.snapshot().items():
            np.testing.assert_array_equal(b.model.params[name].data, value)

    def test_memorizes_small_set(self):
        trainer = make_trainer(learning_rate=0.05, flip_probability=0.0, erase_probability=0.0)
        spec = trainer.stage_spec(1)
        everything = np.arange(len(trainer.samples))
        losses = [trainer.step(spec, everything, augment_images=False).loss_total for _ in range(50)]
        self.assertLessEqual(losses[-1], 0.8 * losses[0])

    def test_identity_count_mismatch(self):
        with self.assertRaises(ConfigurationError):
            Trainer(CA3Net(tiny_model_config(num_identities=5)), tiny_train_config(), tiny_samples())

    def test_epoch_batches_cover_samples(self):
        trainer = make_trainer()
        batches = trainer.epoch_batches(1, 0)
        self.assertEqual(sorted(np.concatenate(batches).tolist()), list(range(8)))
        np.testing.assert_array_equal(np.concatenate(batches), np.concatenate(trainer.epoch_batches(1, 0)))


class TestDivergence(unittest.TestCase):
    def test_nan_loss_raises_and_keeps_last_good(self):
        with tempfile.TemporaryDirectory() as tmp:
            trainer = make_trainer(checkpoint_dir=tmp)
            trainer.model.params["app.head.h0.bias"].data[0] = np.nan
            before = trainer.model.snapshot()
            with self.assertRaises(DivergenceError) as ctx:
                trainer.run()
            self.assertEqual(ctx.exception.last_good_checkpoint, os.path.join(tmp, LAST_GOOD_NAME))
            self.assertTrue(os.path.isfile(ctx.exception.last_good_checkpoint))
            for name, value in before.items():
                np.testing.assert_array_equal(trainer.model.params[name].data, value)


class TestCheckpoints(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "checkpoint.npz")

    def _images(self):
        return np.stack([s.image for s in tiny_samples()[:3]])

    def test_round_trip_forward_is_bit_exact(self):
        trainer = make_trainer()
        trainer.run(stages=(1,))
        model = trainer.model.eval()
        save_checkpoint(model, trainer.optimizer, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.model.config, model.config)
        np.testing.assert_array_equal(loaded.model.forward(self._images()).descriptor.data,
                                      model.forward(self._images()).descriptor.data)
        for name, velocity in trainer.optimizer.velocities.items():
            np.testing.assert_array_equal(loaded.optimizer.velocities[name], velocity)

    def test_mismatched_config_lists_parameters(self):
        save_checkpoint(CA3Net(tiny_model_config()), None, self.path)
        with self.assertRaises(IncompatibleCheckpointError) as ctx:
            load_checkpoint(self.path, expected_config=tiny_model_config(hidden_size=7))
        offending = " ".join(ctx.exception.offending)
        self.assertIn("attr.W_g", offending)
        self.assertIn("attr.lstm.M", offending)
        self.assertNotIn("stem.conv0.weight", offending)

    def test_truncated_file(self):
        save_checkpoint(CA3Net(tiny_model_config()), None, self.path)
        with open(self.path, "rb") as f:
            content = f.read()
        with open(self.path, "wb") as f:
            f.write(content[:len(content) // 2])
        with self.assertRaises(CheckpointIntegrityError):
            read_checkpoint(self.path)

    def test_unsupported_version(self):
        save_checkpoint(CA3Net(tiny_model_config()), None, self.path)
        with np.load(self.path) as archive:
            arrays = {key: archive[key] for key in archive.files}
        meta = arrays["__meta__"].tobytes().decode("utf-8").replace('"version": 1', '"version": 99')
        arrays["__meta__"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
        np.savez(self.path, **arrays)
        with self.assertRaises(CheckpointVersionError):
            read_checkpoint(self.path)

    def test_tampered_array(self):
        save_checkpoint(CA3Net(tiny_model_config()), None, self.path)
        with np.load(self.path) as archive:
            arrays = {key: archive[key] for key in archive.files}
        arrays["param/stem.conv0.weight"] = arrays["param/stem.conv0.weight"] + 1e-9
        np.savez(self.path, **arrays)
        with self.assertRaises(CheckpointIntegrityError):
            read_checkpoint(self.path)

    def test_data_compatibility_lists_differences(self):
        model_config = tiny_model_config()
        check_data_compatibility(model_config, tiny_schema(), (3, 8, 6))
        with self.assertRaises(IncompatibleCheckpointError) as ctx:
            check_data_compatibility(model_config, tiny_schema((2, 3, 5)), (4, 3, 16, 6))
        offending = " ".join(ctx.exception.offending)
        self.assertEqual(len(ctx.exception.offending), 2)
        self.assertIn("image_height (esperado 8, encontrado 16)", offending)
        self.assertIn("a2.class_count (esperado 2, encontrado 5)", offending)
        appearance_only = tiny_model_config(use_attribute=False)
        check_data_compatibility(appearance_only, tiny_schema((2, 3, 5)), (3, 8, 6))

    def _assert_resume_matches(self, max_steps, interrupted_stage):
        reference = make_trainer()
        reference.run(stages=(1, 2))

        first = make_trainer()
        first.run(stages=(1, 2), max_steps=max_steps)
        self.assertTrue(first.interrupted)
        self.assertEqual(first.log.records[-1].stage, interrupted_stage)
        save_checkpoint(first.model, first.optimizer, self.path, first.state_dict())

        loaded = load_checkpoint(self.path)
        resumed = Trainer(loaded.model, tiny_train_config(), tiny_samples())
        resumed.restore(loaded.optimizer, loaded.trainer_state)
        resumed.run(stages=(1, 2))
        self.assertFalse(resumed.interrupted)

        self.assertEqual(len(resumed.log), len(reference.log))
        for ours, theirs in zip(resumed.log, reference.log):
            self.assertEqual((ours.stage, ours.epoch, ours.step), (theirs.stage, theirs.epoch, theirs.step))
            self.assertAlmostEqual(ours.loss_total, theirs.loss_total, delta=1e-12)
        for name, value in reference.model.snapshot().items():
            np.testing.assert_allclose(resumed.model.params[name].data, value, atol=1e-12, rtol=0)

    def test_resume_inside_stage_one(self):
        self._assert_resume_matches(max_steps=3, interrupted_stage=1)

    def test_resume_inside_stage_two(self):
        # la etapa 1 son 2 épocas de 2 batches; el paso 5 cae en la etapa 2
        self._assert_resume_matches(max_steps=5, interrupted_stage=2)


if __name__ == '__main__':
    unittest.main()
