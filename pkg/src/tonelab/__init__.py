"""Screentone analysis and rescreening workbench.

Learns a per-pixel tone representation with separate intensity and
pattern-type channels, segments pages by pattern type, and re-synthesizes
regions after latent-space edits.
"""

__version__ = "0.1.0"

from tonelab.core import ContractError, LatentMap, PaddingRequiredError

__all__ = ["ContractError", "PaddingRequiredError", "LatentMap", "__version__"]
