"""Exception hierarchy shared by the runtime, collectives and engine."""
from __future__ import annotations


class HMPError(RuntimeError):
    pass


class ConnectivityError(HMPError):
    """A peer could not be reached or went away. ``rank`` names the peer."""

    def __init__(self, msg: str, rank: int | None = None):
        super().__init__(msg)
        self.rank = rank


class PeerTimeout(ConnectivityError):
    pass


class PeerDisconnected(ConnectivityError):
    pass


class ProtocolError(HMPError):
    pass


class BudgetExceeded(HMPError):
    def __init__(self, site: str, requested: int, in_use: int, budget: int, rank: int | None = None):
        self.site = site
        self.requested = requested
        self.in_use = in_use
        self.budget = budget
        self.rank = rank
        who = f"rank {rank}: " if rank is not None else ""
        super().__init__(
            f"{who}memory budget exceeded at {site}: {requested} bytes requested, "
            f"{in_use} in use, budget {budget}"
        )


class CollectiveError(HMPError):
    """A collective aborted. Carries the local rank, the failing peer and the engine phase."""

    def __init__(self, msg: str, rank: int, peer: int | None = None, phase: str | None = None):
        self.rank = rank
        self.peer = peer
        self.phase = phase
        super().__init__(msg)

    def with_phase(self, phase: str) -> "CollectiveError":
        err = CollectiveError(f"[phase {phase}] {self}", self.rank, self.peer, phase)
        err.__cause__ = self.__cause__
        return err


class WorkerError(HMPError):
    """Errors reported by one or more workers, keyed by rank."""

    def __init__(self, errors: dict[int, dict]):
        self.errors = errors
        lines = [f"rank {r}: {e.get('type')}: {e.get('message')}" for r, e in sorted(errors.items())]
        super().__init__("; ".join(lines))

    def types(self) -> set[str]:
        return {e.get("type") for e in self.errors.values()}
