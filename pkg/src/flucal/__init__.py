"""Calibrated fine-tuning of mixture-of-LoRA-experts models.

A numpy reverse-mode autodiff core, a small residual transformer whose
sublayers mix frozen base weights with top-k-routed low-rank adapters, a
router-mass uncertainty score with calibration and load-balance losses,
independent numerical oracles for the underlying theory, a deterministic
synthetic task generator, and a training/evaluation CLI.
"""

__version__ = "0.1.0"

from . import autodiff, data, model, oracles, train, uncertainty  # noqa: F401
