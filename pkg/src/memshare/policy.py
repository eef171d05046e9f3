"""Waiter-selection policies.

Pure functions: given the WAITING entries for one device (in enqueue order)
and the free byte budget, decide which clients to grant this round. One
round runs per post-free event; whatever is not granted simply stays queued.

  fifo   grant the longest prefix that fits; the first entry that does not
         fit blocks everything behind it, even if later entries would fit.
  mmu    first-fit greedy: walk the queue in order and grant everything that
         fits in the remaining budget, skipping what does not. Deliberately
         not knapsack-optimal; O(n) and order-respecting.
  pfifo  restrict to the highest priority present, then fifo within it.
  pmmu   restrict to the highest priority present, then mmu within it.

Priorities: larger integer = more urgent; ties break by arrival order.
"""

from __future__ import annotations

import enum


class PolicyKind(enum.Enum):
    FIFO = "fifo"
    MMU = "mmu"
    PRIORITY_FIFO = "pfifo"
    PRIORITY_MMU = "pmmu"

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown policy {name!r} (expected fifo|mmu|pfifo|pmmu)"
            ) from None

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "PolicyKind":
        return _FROM_CODE[code]


_CODES = {PolicyKind.FIFO: 0, PolicyKind.MMU: 1,
          PolicyKind.PRIORITY_FIFO: 2, PolicyKind.PRIORITY_MMU: 3}
_FROM_CODE = {v: k for k, v in _CODES.items()}


def select_grants(queue, free: int, kind: PolicyKind) -> list:
    """Return the clients to grant, in queue order, with Σ bytes <= free.

    ``queue`` holds WAITING entries for a single device, already in enqueue
    order. Entries only need .client, .nbytes and .priority attributes.
    """
    if kind in (PolicyKind.PRIORITY_FIFO, PolicyKind.PRIORITY_MMU):
        if not queue:
            return []
        top = max(e.priority for e in queue)
        queue = [e for e in queue if e.priority == top]
        kind = PolicyKind.FIFO if kind is PolicyKind.PRIORITY_FIFO else PolicyKind.MMU

    grants = []
    budget = free
    for e in queue:
        if e.nbytes <= budget:
            grants.append(e.client)
            budget -= e.nbytes
        elif kind is PolicyKind.FIFO:
            break
        # mmu: skip and keep scanning
    return grants
