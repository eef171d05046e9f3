"""Exception types used across the package."""


class MemshareError(Exception):
    """Base class for all memshare errors."""


class SegmentPermissionError(MemshareError):
    """The shared segment could not be created or mapped."""


class ProviderEmptyError(MemshareError):
    """The device provider enumerated no devices."""


class SegmentCorruptError(MemshareError):
    """The shared segment failed its integrity check."""


class BackupInvalidError(MemshareError):
    """A backup file could not be parsed or failed its checksum."""


class InsufficientError(MemshareError):
    """record_alloc called without enough free bytes (caller bug)."""


class LockTimeoutError(MemshareError):
    """The coordination lock could not be acquired before the deadline."""


class HandlerConflictError(MemshareError):
    """The wake signal is already claimed by the host application."""


class DeadTargetError(MemshareError):
    """notify() targeted a client whose process is no longer alive."""


class PolicyMismatchError(MemshareError):
    """Client policy differs from the policy the segment was created with."""


class DeviceOOMError(MemshareError):
    """The simulated device has insufficient capacity for an allocation."""


class BadHandleError(MemshareError):
    """sim_free called with an unknown allocation handle."""


class ParseError(MemshareError):
    """A config or workload file is not valid JSON."""


class SchemaError(MemshareError):
    """A config or workload file is valid JSON but violates the schema."""


class BindError(MemshareError):
    """The server could not bind its socket."""


class SpawnError(MemshareError):
    """The harness failed to spawn a workload instance."""
