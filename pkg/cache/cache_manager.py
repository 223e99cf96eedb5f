import logging
import threading
from typing import Any, Callable, Dict, Hashable

logger = logging.getLogger(__name__)


class CacheManager:
    """
    Small keyed memo for heat kernel ingredients: diagonal values per base
    point, image sets and spectral coefficients per (manifold, s, tol), and
    sphere proposal constants.

    Reads and writes are guarded by one lock, so the cache may be shared by
    threads; worker processes each hold their own copy.
    """

    def __init__(self, name: str):
        self.name = name
        self._store: Dict[Hashable, Any] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get_or_compute(self, key: Hashable, compute: Callable[[], Any]) -> Any:
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
        # computed outside the lock; a concurrent duplicate computes the same value
        value = compute()
        with self._lock:
            if key not in self._store:
                self._store[key] = value
                self.misses += 1
                logger.debug(f"[{self.name}] cached {key!r}")
            return self._store[key]

    def clear(self) -> None:
        with self._lock:
            self._store.clear()
            self.hits = 0
            self.misses = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


# Process-wide caches
diagonal_kernel_cache = CacheManager("heat_kernel_diagonal")
proposal_constant_cache = CacheManager("sphere_proposal_constant")
image_set_cache = CacheManager("torus_image_sets")
spectral_coefficient_cache = CacheManager("sphere_spectral_coefficients")
