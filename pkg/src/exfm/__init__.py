"""Teacher-student distillation for streaming recommendation.

One large teacher (FM) trained on every traffic supervises several compact
students (VMs) through auxiliary heads and a Student Adapter; a simulated
Data Augmentation Service moves teacher snapshots and pseudo-labels between
them.
"""

from .distill import AHConfig, DistillMode
from .errors import ExfmError

__version__ = "0.1.0"

__all__ = ["AHConfig", "DistillMode", "ExfmError", "__version__"]
