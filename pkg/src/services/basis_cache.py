import logging
import threading
from typing import Callable, Dict, Optional, Tuple

from src.models import LayerStack

logger = logging.getLogger(__name__)

CacheKey = Tuple[str, str, int, str]


class BasisCache:
    """Process-wide cache of vertical eigen-decompositions

    Keyed by (stack hash, kappa, Kmax, weighting); entries never expire because
    a VerticalBasis is immutable once built.
    """

    def __init__(self):
        self._cache: Dict[CacheKey, object] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        logger.info("BasisCache initialized")

    @staticmethod
    def key(stack: LayerStack, kappa: float, kmax: int, weighting: str = 'plain') -> CacheKey:
        return stack.stack_hash(), repr(float(kappa)), int(kmax), weighting

    def get(self, key: CacheKey) -> Optional[object]:
        """
        Get a cached basis

        Args:
            key: Cache key from BasisCache.key()

        Returns:
            The basis, or None on a miss
        """
        with self._lock:
            basis = self._cache.get(key)
            if basis is None:
                self.misses += 1
                logger.debug(f"Basis cache miss for key: {key}")
            else:
                self.hits += 1
                logger.debug(f"Basis cache hit for key: {key}")
            return basis

    def set(self, key: CacheKey, basis: object) -> None:
        with self._lock:
            self._cache[key] = basis
        logger.debug(f"Cached basis for key: {key}")

    def get_or_build(self, key: CacheKey, builder: Callable[[], object]) -> object:
        """Return the cached basis or build, store and return it"""
        basis = self.get(key)
        if basis is None:
            basis = builder()
            self.set(key, basis)
        return basis

    def __len__(self) -> int:
        return len(self._cache)


# Global cache instance
basis_cache = BasisCache()
