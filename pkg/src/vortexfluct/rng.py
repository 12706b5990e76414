"""Counter-based random streams keyed by (seed, role, ensemble, particle, step).

Every block of random numbers comes from its own Philox key, derived by hashing
the StreamKey, so the values never depend on evaluation order or worker count.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

ROLES = ("common_noise", "idiosyncratic", "mfield_noise", "eta0", "aux")


@dataclass(frozen=True)
class StreamKey:
    master_seed: int
    role: str
    ensemble_id: int = 0
    particle_id: int = 0
    step_index: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown stream role {self.role!r}")

    def at_step(self, step_index: int) -> "StreamKey":
        return replace(self, step_index=step_index)

    def philox_key(self) -> np.ndarray:
        payload = struct.pack(
            "<Q16sqqq",
            self.master_seed & 0xFFFFFFFFFFFFFFFF,
            self.role.encode(),
            self.ensemble_id,
            self.particle_id,
            self.step_index,
        )
        digest = hashlib.blake2b(payload, digest_size=16).digest()
        return np.frombuffer(digest, dtype="<u8").astype(np.uint64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.philox_key()))


def normals(key: StreamKey, shape) -> np.ndarray:
    return key.generator().standard_normal(shape)


def uniforms(key: StreamKey, shape) -> np.ndarray:
    return key.generator().random(shape)
