"""Semi-supervised segmentation with multi-teacher feature distillation and fusion."""
from .errors import (ConfigurationError, DataError, MtdsegError, NumericFaultError,
                     WeightsError)

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DataError", "MtdsegError", "NumericFaultError",
           "WeightsError", "__version__"]
