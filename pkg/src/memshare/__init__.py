"""memshare: node-local, memory-safe co-scheduling of a capacity-limited
device across independent processes.

Public surface: the three-function lifecycle (sched_init / pre_alloc /
post_free plus shutdown), the policy kinds, and the workload harness.
"""

from .client import (
    AllocOutcome,
    ClientSession,
    ManagedDevice,
    Mode,
    post_free,
    pre_alloc,
    sched_init,
    shutdown,
)
from .config import Settings
from .device import DeviceSpec, SimDevice, StaticProvider, load_device_spec
from .errors import MemshareError
from .ledger import ClientId, Ledger, audit
from .policy import PolicyKind, select_grants

__all__ = [
    "AllocOutcome", "ClientSession", "ClientId", "DeviceSpec", "Ledger",
    "ManagedDevice", "MemshareError", "Mode", "PolicyKind", "Settings",
    "SimDevice", "StaticProvider", "audit", "load_device_spec", "post_free",
    "pre_alloc", "sched_init", "select_grants", "shutdown",
]

__version__ = "0.1.0"
