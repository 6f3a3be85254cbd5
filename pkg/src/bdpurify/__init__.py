"""Backdoor purification toolkit for malware-style tabular classifiers.

Train / poison an MLP-with-BatchNorm classifier, generate a backdoor-neuron
mask from BN-statistics alignment, purify via Gaussian perturbation plus
alternating sign-flipped masked fine-tuning, and evaluate against standard
fine-tuning baselines with C-Acc / ASR / DER metrics.
"""

from .errors import (
    BdpurifyError,
    ConfigurationError,
    DataFormatError,
    InfeasibleError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "BdpurifyError",
    "ConfigurationError",
    "DataFormatError",
    "InfeasibleError",
    "UsageError",
    "__version__",
]
