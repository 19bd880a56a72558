"""numpy <-> torch bridging for the immutable core types."""

from __future__ import annotations

import numpy as np
import torch


def as_tensor(a) -> torch.Tensor:
    """Wrap a numpy array as a torch tensor, keeping its dtype.

    The core data types freeze their arrays; ``torch.from_numpy`` warns on
    read-only input, so frozen arrays are copied first.
    """
    a = np.asarray(a)
    if not a.flags.writeable:
        a = a.copy()
    return torch.from_numpy(a)
