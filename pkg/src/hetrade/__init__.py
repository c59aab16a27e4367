"""Trading a machine-learning model through homomorphically encrypted test queries."""

from .ckks import CkksParams
from .inference import LinearModel

__all__ = ["CkksParams", "LinearModel"]
