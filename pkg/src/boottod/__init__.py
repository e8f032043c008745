"""
BootTOD - Self-Bootstrapping Dialogue Pre-training

Desk-scale pre-training of task-oriented dialogue encoders by aligning context
and context+response representations, plus the downstream evaluation harness.
"""

__version__ = "0.3.0"
