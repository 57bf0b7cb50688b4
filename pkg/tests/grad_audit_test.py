import unittest

import numpy as np

from vitkd.module.experiment.grad_audit import AUDIT_TARGETS, run_grad_audit
from vitkd.module.tensor.tensor import precision
from vitkd.util.errors import ConfigError


class GradAuditTest(unittest.TestCase):
    def test_every_target_passes(self):
        reports = run_grad_audit()
        self.assertEqual(list(AUDIT_TARGETS), [report.name for report in reports])
        self.assertGreaterEqual(len(reports), 6)
        for report in reports:
            self.assertTrue(report.passed, F"{report.name}: {report.max_rel_error:.3e}")

    def test_subset(self):
        reports = run_grad_audit(["loss_generation", "cross_attn_generator"], seed=5)
        self.assertEqual(["loss_generation", "cross_attn_generator"],
                         [report.name for report in reports])
        self.assertTrue(all(report.passed for report in reports))

    def test_tolerance_is_applied(self):
        report, = run_grad_audit(["encoder_layer"], tol=0.0)
        self.assertFalse(report.passed)

    def test_inputs_in_unit_range(self):
        rng = np.random.default_rng(0)
        for name in ("matmul", "softmax", "conv3x3", "loss_generation", "loss_kd_logit"):
            with precision(np.float64):
                _, inputs = AUDIT_TARGETS[name](rng)
            for tensor in inputs.values():
                self.assertLessEqual(float(np.abs(tensor.data).max()), 1.0, name)

    def test_unknown_target(self):
        with self.assertRaises(ConfigError):
            run_grad_audit(["matmul", "nope"])


if __name__ == '__main__':
    unittest.main()
