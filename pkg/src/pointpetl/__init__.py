"""Desk-scale laboratory for parameter-efficient transfer learning on
point-cloud transformers: a numpy autodiff core, procedural shape data,
a small pre-norm transformer, PETL strategies, and a deterministic trainer."""

__version__ = "0.1.0"
