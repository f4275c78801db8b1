"""Per-(layer, head) attention output cache across denoising steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np


class CacheMiss(KeyError):
    """A head was marked Cached before it ever computed an output."""


@dataclass
class CacheEntry:
    output: np.ndarray
    produced_at: int


class HeadCache:
    """One slot per (layer, head); no eviction, last writer wins.

    Only heads that actually compute store into the cache, so reading a
    cached head never refreshes its timestamp.
    """

    def __init__(self):
        self.entries: Dict[Tuple[int, int], CacheEntry] = {}

    def store(self, layer: int, head: int, output: np.ndarray, t: int) -> None:
        if output.ndim != 2:
            raise ValueError(f"cache entries are [N x d], got shape {output.shape}")
        # private copy so later in-place edits by the caller cannot leak in
        self.entries[(layer, head)] = CacheEntry(output.copy(), t)

    def fetch(self, layer: int, head: int) -> np.ndarray:
        try:
            return self.entries[(layer, head)].output
        except KeyError:
            raise CacheMiss(f"no cached output for layer {layer}, head {head}") from None

    def has(self, layer: int, head: int) -> bool:
        return (layer, head) in self.entries

    def staleness(self, layer: int, head: int, t: int) -> int:
        try:
            return t - self.entries[(layer, head)].produced_at
        except KeyError:
            raise CacheMiss(f"no cached output for layer {layer}, head {head}") from None

    def copy(self) -> "HeadCache":
        other = HeadCache()
        other.entries = {
            key: CacheEntry(e.output.copy(), e.produced_at) for key, e in self.entries.items()
        }
        return other

    def __len__(self):
        return len(self.entries)
