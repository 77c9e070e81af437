"""Slice-wise self-distillation for multi-contrast brain MRI volumes:
NIfTI-subset ingestion, slice stacking, multi-crop augmentation, a
from-scratch autodiff core and ViT backbone, teacher-student
pretraining, downstream heads, and a leakage-safe evaluation harness."""

__version__ = "0.1.0"
