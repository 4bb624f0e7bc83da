"""Brain-lesion VQA toolkit.

Turns 3D segmentation masks into clinically templated question-answer
datasets (volume, region, shape, spread), and ships a desk-scale, numerically
verified reference of the prompt-conditioned mixture-of-experts fusion block,
multi-task heads, and evaluation metrics.
"""

__version__ = "0.1.0"

from .nifti import LabelMask, Volume3D, VolumeHeader  # noqa: F401
