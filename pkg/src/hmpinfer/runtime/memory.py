"""Per-worker memory accounting against an emulated budget."""
from __future__ import annotations

import threading
from contextlib import contextmanager

from ..errors import BudgetExceeded


class MemoryAccountant:
    """Tracks resident weight bytes and live activation bytes.

    ``reserve`` is for long-lived allocations (weight shards), ``transient``
    for activations that live for one phase. Going over ``budget`` raises
    :class:`BudgetExceeded` naming the allocation site.
    """

    def __init__(self, budget: int | None = None, rank: int | None = None):
        self.budget = budget
        self.rank = rank
        self.resident = 0
        self.live = 0
        self.peak = 0
        self._sites: dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def in_use(self) -> int:
        return self.resident + self.live

    def _check(self, site: str, nbytes: int) -> None:
        if self.budget is not None and self.in_use + nbytes > self.budget:
            raise BudgetExceeded(site, nbytes, self.in_use, self.budget, self.rank)

    def reserve(self, site: str, nbytes: int) -> None:
        with self._lock:
            self._check(site, nbytes)
            self.resident += nbytes
            self._sites[site] = self._sites.get(site, 0) + nbytes
            self.peak = max(self.peak, self.in_use)

    def release(self, site: str) -> None:
        with self._lock:
            self.resident -= self._sites.pop(site, 0)

    def release_all(self) -> None:
        with self._lock:
            self._sites.clear()
            self.resident = 0
            self.live = 0

    @contextmanager
    def transient(self, site: str, nbytes: int):
        with self._lock:
            self._check(site, nbytes)
            self.live += nbytes
            self.peak = max(self.peak, self.in_use)
        try:
            yield
        finally:
            with self._lock:
                self.live -= nbytes

    def sites(self) -> dict[str, int]:
        return dict(self._sites)
