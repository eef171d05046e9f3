"""Configuration surface shared by the library and the CLI.

Everything is overridable by environment variable so a fleet of unmodified
processes can be pointed at the same segment:

  MEMSHARE_DEVICE_CONFIG  device config JSON (default ./devices.json)
  MEMSHARE_POLICY         fifo | mmu | pfifo | pmmu (default fifo)
  MEMSHARE_PRIORITY       default priority for this client's requests
  MEMSHARE_TIMEOUT_MS     default blocking timeout (implicit mode), 600000
  MEMSHARE_BACKEND        shm | server (default shm)
  MEMSHARE_SIGNAL         wake signal number (default SIGUSR1)
  MEMSHARE_LOCK           coordination lock file
  MEMSHARE_BACKUP         ledger backup file
  MEMSHARE_SOCKET         server backend socket path
  MEMSHARE_RUNTIME_DIR    base dir for all runtime files
"""

from __future__ import annotations

import os
import signal
from dataclasses import dataclass, field

from .device import DeviceSpec, StaticProvider, config_hash, load_device_spec, parse_device_config
from .policy import PolicyKind

DEFAULT_TIMEOUT_MS = 600_000
DEFAULT_SANITY_INTERVAL_MS = 500


def runtime_dir() -> str:
    for candidate in (os.environ.get("MEMSHARE_RUNTIME_DIR"),
                      os.environ.get("XDG_RUNTIME_DIR"),
                      "/dev/shm" if os.path.isdir("/dev/shm") else None,
                      "/tmp"):
        if candidate:
            return candidate
    return "/tmp"


@dataclass
class Settings:
    devices: list[DeviceSpec]
    policy: PolicyKind = PolicyKind.FIFO
    priority: int = 0
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    backend: str = "shm"  # shm | server
    lock_backend: str = "filelock"  # filelock | mutex
    signum: int = signal.SIGUSR1
    base_dir: str = field(default_factory=runtime_dir)
    lock_path: str | None = None
    backup_path: str | None = None
    socket_path: str | None = None
    segment_path: str | None = None
    sim_path: str | None = None
    sanity_interval_ms: int = DEFAULT_SANITY_INTERVAL_MS

    def __post_init__(self):
        tag = config_hash(self.devices)
        if self.segment_path is None:
            self.segment_path = os.path.join(self.base_dir, f"memshare-sched.{tag}")
        if self.lock_path is None:
            self.lock_path = os.environ.get(
                "MEMSHARE_LOCK", os.path.join(self.base_dir, f"memshare-sched.{tag}.lock"))
        if self.backup_path is None:
            self.backup_path = os.environ.get(
                "MEMSHARE_BACKUP", os.path.join(self.base_dir, f"memshare-sched.{tag}.bak"))
        if self.socket_path is None:
            self.socket_path = os.environ.get(
                "MEMSHARE_SOCKET", os.path.join(self.base_dir, f"memshare-sched.{tag}.sock"))
        if self.sim_path is None:
            self.sim_path = os.path.join(self.base_dir, f"memshare-simdev.{tag}")

    def provider(self) -> StaticProvider:
        return StaticProvider(self.devices)

    @classmethod
    def from_env(cls, devices: list[DeviceSpec] | None = None, **overrides) -> "Settings":
        env = os.environ
        if devices is None:
            path = env.get("MEMSHARE_DEVICE_CONFIG", "./devices.json")
            devices = load_device_spec(path)
        kw = dict(
            devices=devices,
            policy=PolicyKind.parse(env.get("MEMSHARE_POLICY", "fifo")),
            priority=int(env.get("MEMSHARE_PRIORITY", "0")),
            timeout_ms=int(env.get("MEMSHARE_TIMEOUT_MS", str(DEFAULT_TIMEOUT_MS))),
            backend=env.get("MEMSHARE_BACKEND", "shm"),
            signum=int(env.get("MEMSHARE_SIGNAL", str(int(signal.SIGUSR1)))),
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def for_devices(cls, doc_or_specs, **overrides) -> "Settings":
        """Settings from an inline device config dict or spec list."""
        if isinstance(doc_or_specs, dict):
            specs = parse_device_config(doc_or_specs)
        else:
            specs = list(doc_or_specs)
        return cls(devices=specs, **overrides)
