"""Multi-scale cross-attention pose regression with semantic-field supervision.

The package splits into a small autodiff core (:mod:`poseforge.autodiff`,
:mod:`poseforge.nn`), the model itself (:mod:`poseforge.backbone`,
:mod:`poseforge.poseformer`, :mod:`poseforge.semantic_field`,
:mod:`poseforge.losses`), and the surrounding pipeline (data, training stages,
evaluation, checkpointing, CLI).  ``poseforge.cli:main`` is the console entry
point.
"""

__version__ = "0.1.0"
