from dataclasses import replace
import os
import tempfile
import unittest

import pandas as pd

from vitkd.module.data.dataset import channel_stats, synth_generate
from vitkd.module.experiment.ablation import (AblationReport, expand_grid, loss_ordering,
                                              parse_axis, plan_ablation, preset_axes,
                                              run_ablation, summarize)
from vitkd.module.train.trainer import model_checkpoint, train_supervised
from vitkd.module.vit.vision_transformer import VisionTransformer
from vitkd.util.errors import ConfigError
from vitkd.util.run_config import from_dict

# Seconds-scale setup: 8x8 images, 4 tokens, one short epoch per run
TINY = {
    "teacher": {"image_size": 8, "patch_size": 4, "depth": 2, "dim": 8, "heads": 2},
    "student": {"image_size": 8, "patch_size": 4, "depth": 3, "dim": 8, "heads": 2},
    "distill": {"gen_heads": 2},
    "train": {"epochs": 1, "batch_size": 8, "hflip": False},
    "data": {"train_per_class": 2, "test_per_class": 1, "image_size": 8},
    "out_dir": "results/ablation_test",
}


class GridTest(unittest.TestCase):
    def setUp(self):
        self.base = from_dict(TINY)

    def test_expand(self):
        cells = expand_grid({"a": [1, 2], "b": ["x", "y", "z"]})
        self.assertEqual(6, len(cells))
        self.assertEqual({"a": 1, "b": "x"}, cells[0])
        self.assertEqual({"a": 2, "b": "z"}, cells[-1])
        self.assertEqual([{}], expand_grid({}))

    def test_parse_axis(self):
        self.assertEqual({"distill.alpha": [0.0, 1e-5]}, parse_axis("distill.alpha=[0.0, 1e-5]"))
        with self.assertRaises(ConfigError):
            parse_axis("distill.alpha=3")
        with self.assertRaises(ConfigError):
            parse_axis("distill.alpha")

    def test_presets(self):
        self.assertEqual(4, len(expand_grid(preset_axes("losses", self.base))))
        self.assertEqual([[0], [0, 1], [1]],
                         preset_axes("layers", self.base)["distill.shallow_layers"])
        self.assertEqual(5, len(preset_axes("alpha", self.base)["distill.alpha"]))
        with self.assertRaises(ConfigError):
            preset_axes("nope", self.base)

    def test_plan(self):
        runs = plan_ablation(self.base, preset_axes("losses", self.base), [0, 1, 2])
        self.assertEqual(12, len(runs))
        self.assertEqual(12, len({run.slug for run in runs}))
        first = runs[0]
        self.assertEqual({"distill.alpha": 0.0, "distill.beta": 0.0}, first.cell)
        self.assertEqual(0.0, first.config.distill.alpha)
        self.assertEqual((0, 0), (first.config.train.seed, first.config.student.seed))
        self.assertEqual(2, runs[2].config.student.seed)
        self.assertTrue(first.config.out_dir.startswith(
            os.path.join("results", "ablation_test", "ablation")))

    def test_plan_rejects_bad_cells(self):
        with self.assertRaises(ConfigError):
            plan_ablation(self.base, {"distill.shallow_layers": [[0, 2]]}, [0])
        with self.assertRaises(ConfigError):
            plan_ablation(self.base, {"distill.nope": [1]}, [0])
        with self.assertRaises(ConfigError):
            plan_ablation(self.base, {}, [])


class LossOrderingTest(unittest.TestCase):
    def setUp(self):
        self.cells = expand_grid({"distill.alpha": [0.0, 3e-5], "distill.beta": [0.0, 3e-6]})
        self.labels = ["alpha=0.0, beta=0.0", "alpha=0.0, beta=3e-06",
                       "alpha=3e-05, beta=0.0", "alpha=3e-05, beta=3e-06"]

    def _runs(self, top1):
        return pd.DataFrame({"cell": self.labels, "seed": [0] * 4, "top1": top1,
                             "top5": [1.0] * 4})

    def test_holds(self):
        self.assertTrue(loss_ordering(self._runs([0.50, 0.52, 0.53, 0.55]), self.cells))
        self.assertTrue(loss_ordering(self._runs([0.552, 0.52, 0.53, 0.55]), self.cells))

    def test_fails(self):
        self.assertFalse(loss_ordering(self._runs([0.50, 0.56, 0.53, 0.55]), self.cells))
        self.assertFalse(loss_ordering(self._runs([0.60, 0.52, 0.53, 0.55]), self.cells))

    def test_not_applicable(self):
        self.assertIsNone(loss_ordering(self._runs([0.5] * 4),
                                        expand_grid({"distill.alpha": [0.0, 3e-5]})))

    def test_summary(self):
        means = summarize(self._runs([0.5, 0.6, 0.7, 0.8]))
        self.assertEqual(self.labels, means["cell"].tolist())
        self.assertEqual([1] * 4, means["runs"].tolist())


class RunAblationTest(unittest.TestCase):
    def setUp(self):
        self.base = from_dict(TINY)
        self.train = synth_generate(1, 2, size=8)
        self.test = synth_generate(2, 1, size=8)
        teacher = VisionTransformer(self.base.teacher)
        self.teacher = model_checkpoint(teacher, channel_stats(self.train.images), {})

    def test_loss_grid(self):
        seeds = [0, 1, 2]
        report = run_ablation(self.base, preset_axes("losses", self.base), seeds, self.teacher,
                              self.train, self.test, workers=1)
        self.assertEqual(12, len(report.runs))
        self.assertEqual(4, len(report.means))
        self.assertEqual([3] * 4, report.means["runs"].tolist())
        self.assertIn(report.ordering_ok, (True, False))

        baseline = [train_supervised(replace(self.base.student, seed=seed), self.train, self.test,
                                     replace(self.base.train, seed=seed)).report.top1
                    for seed in seeds]
        self.assertAlmostEqual(sum(baseline) / 3, report.means["top1_mean"][0], places=12)

        with tempfile.TemporaryDirectory() as tmp:
            report.write(tmp)
            for name in ("ablation_runs.csv", "ablation_means.csv", "ablation.txt"):
                self.assertTrue(os.path.isfile(os.path.join(tmp, name)))
            self.assertEqual(12, len(pd.read_csv(os.path.join(tmp, "ablation_runs.csv"))))
        self.assertIn("loss ordering", report.to_text())

    def test_report_text(self):
        runs = pd.DataFrame({"cell": ["a", "b"], "seed": [0, 0], "top1": [0.5, 0.6],
                             "top5": [1.0, 1.0]})
        text = AblationReport(runs=runs, means=summarize(runs)).to_text()
        self.assertIn("top1 spread across cells: 0.1000", text)
        self.assertNotIn("loss ordering", text)


if __name__ == '__main__':
    unittest.main()
