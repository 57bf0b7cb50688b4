import os
import tempfile
import unittest

from vitkd.module.distill.distill_losses import GenBlockKind, MimicMethod
from vitkd.util.errors import ConfigError, TokenGridError
from vitkd.util.export_utils import create_and_write, read_json
from vitkd.util.run_config import (RUN_CONFIG_FILE, RunConfig, apply_overrides, echo_run_config,
                                   from_dict, load_run_config, to_dict)


class RunConfigTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_defaults(self):
        cfg = load_run_config()
        self.assertEqual(RunConfig(), cfg)
        self.assertEqual(os.path.join("results", "teacher.vkd1"), cfg.teacher_path())
        self.assertEqual(3e-5, cfg.distill.alpha)
        self.assertEqual((0, 1), cfg.distill.shallow_layers)

    def test_overrides(self):
        cfg = apply_overrides(RunConfig(), ["distill.alpha=5e-5",
                                            "distill.gen_block=CROSS_ATTN",
                                            "distill.mimic_method=\"CORRELATION\"",
                                            "distill.shallow_layers=[0, 2]",
                                            "distill.kd.enabled=true",
                                            "distill.alpha=6e-5"])
        self.assertEqual(6e-5, cfg.distill.alpha)
        self.assertEqual(GenBlockKind.CROSS_ATTN, cfg.distill.gen_block)
        self.assertEqual(MimicMethod.CORRELATION, cfg.distill.mimic_method)
        self.assertEqual((0, 2), cfg.distill.shallow_layers)
        self.assertTrue(cfg.distill.kd.enabled)

    def test_bad_overrides(self):
        with self.assertRaises(ConfigError) as context:
            apply_overrides(RunConfig(), ["distill.nope=1"])
        self.assertIn("distill.nope", str(context.exception))
        with self.assertRaises(ConfigError):
            apply_overrides(RunConfig(), ["train.epochs=\"many\""])
        with self.assertRaises(ConfigError):
            apply_overrides(RunConfig(), ["distill.gen_block=MLP"])
        with self.assertRaises(ConfigError):
            apply_overrides(RunConfig(), ["no-equals-sign"])

    def test_unknown_file_key(self):
        with self.assertRaises(ConfigError) as context:
            from_dict({"student": {"depht": 3}})
        self.assertIn("student.depht", str(context.exception))

    def test_precedence(self):
        path = os.path.join(self.tmp.name, "run.json")
        create_and_write({"train": {"seed": 1, "epochs": 3}, "out_dir": "a"}, path)
        cfg = load_run_config(path, ["train.seed=2"], seed=7, out_dir="b")
        self.assertEqual((7, 3, "b"), (cfg.train.seed, cfg.train.epochs, cfg.out_dir))

    def test_echo_reloads(self):
        cfg = apply_overrides(RunConfig(), [F"out_dir=\"{self.tmp.name}\"",
                                            "distill.gen_block=SELF_ATTN",
                                            "distill.teacher_deep_layer=4"])
        path = echo_run_config(cfg)
        self.assertEqual(os.path.join(self.tmp.name, RUN_CONFIG_FILE), path)
        self.assertEqual(list(to_dict(cfg)), list(read_json(path)))
        self.assertEqual(cfg, load_run_config(path))

    def test_missing_file(self):
        path = os.path.join(self.tmp.name, "absent.json")
        with self.assertRaises(ConfigError) as context:
            load_run_config(path)
        self.assertIn(F"config file not found: {path}", str(context.exception))

    def test_consistency(self):
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["data.image_size=16"])
        with self.assertRaises(TokenGridError):
            load_run_config(overrides=["student.patch_size=8"])
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["distill.shallow_layers=[0, 3]"])
        with self.assertRaises(ConfigError):
            load_run_config(overrides=["distill.gen_block=SELF_ATTN", "distill.gen_heads=3"])


if __name__ == '__main__':
    unittest.main()
