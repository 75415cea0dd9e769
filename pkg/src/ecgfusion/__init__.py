"""ecgfusion: multi-label cardiac abnormality classification from 12-lead
ECG waveforms and clinical-note embeddings.

The package is self-contained on numpy: a small reverse-mode autodiff
engine (``autodiff``), wavelet-based waveform cleanup (``sigproc``),
dataset curation and synthesis (``data``), the multimodal transformer
(``model``), the training loop (``training``), attention analysis and
exports (``analysis``), and a command-line front end (``cli``).
"""

from ecgfusion.autodiff import Tape, Tensor, backward, finite_diff_check
from ecgfusion.errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "ConfigError",
    "DataError",
    "NumericalError",
    "__version__",
]
