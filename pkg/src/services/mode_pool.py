import concurrent.futures
import logging
from typing import Callable, List, Optional, Sequence, TypeVar

from src.config import Config

logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


class ModePool:
    """Thread pool for independent per-wavenumber work

    Results always come back in submission order, so the output does not
    depend on the number of workers.
    """

    def __init__(self, workers: Optional[int] = None):
        """
        Initialize the pool

        Args:
            workers: Worker threads (defaults to LAYERCON_THREADS, 0 meaning one per CPU)
        """
        self.workers = workers if workers and workers > 0 else Config.resolved_threads()
        self._executor = None
        if self.workers > 1:
            self._executor = concurrent.futures.ThreadPoolExecutor(max_workers=self.workers)
        logger.info(f"ModePool initialized with {self.workers} worker(s)")

    def map_ordered(self, func: Callable[[T], R], items: Sequence[T], label: str = 'task') -> List[R]:
        """Apply func to every item; the first failure is logged and re-raised"""
        if self._executor is None or len(items) <= 1:
            return [func(item) for item in items]

        future_to_index = {}
        for index, item in enumerate(items):
            future = self._executor.submit(func, item)
            future_to_index[future] = index

        results: List[Optional[R]] = [None] * len(items)
        failure = None
        for future in concurrent.futures.as_completed(future_to_index):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"{label} {index} failed: {str(e)}")
                if failure is None or index < failure[0]:
                    failure = (index, e)
        if failure is not None:
            raise failure[1]
        return results

    def shutdown(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
            logger.debug("ModePool shut down")
