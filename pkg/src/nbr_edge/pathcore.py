"""Bitfield path identifiers and the per-forwarder forwarding decision.

A path is a 256-bit field where bit *i* stands for transport link *i*.
Serialized form is 32 bytes; bit position 0 is the most significant bit
of the first byte (the first byte of the IPv6 source field in the SDN
realization), position 255 the least significant bit of the last byte.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

PATH_BITS = 256
PATH_BYTES = PATH_BITS // 8
_MASK = (1 << PATH_BITS) - 1


class PathError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class PathId:
    """Immutable 256-bit link set.

    ``bits`` is a plain int where link position *i* maps to ``1 << i``.
    This integer view is internal; :meth:`to_bytes` gives the wire order.
    """

    bits: int = 0

    def __post_init__(self):
        if self.bits < 0 or self.bits > _MASK:
            raise PathError("PathId value outside 256-bit range")

    def __or__(self, other: PathId) -> PathId:
        return PathId(self.bits | other.bits)

    def __contains__(self, position: int) -> bool:
        return 0 <= position < PATH_BITS and bool(self.bits >> position & 1)

    def __bool__(self) -> bool:
        return self.bits != 0

    @property
    def is_zero(self) -> bool:
        return self.bits == 0

    def popcount(self) -> int:
        return self.bits.bit_count()

    def positions(self) -> list[int]:
        out = []
        b = self.bits
        while b:
            low = b & -b
            out.append(low.bit_length() - 1)
            b ^= low
        return out

    def to_bytes(self) -> bytes:
        # reverse the bit order so position 0 lands on the MSB of byte 0
        wire = int(f"{self.bits:0{PATH_BITS}b}"[::-1], 2)
        return wire.to_bytes(PATH_BYTES, "big")

    @classmethod
    def from_bytes(cls, data: bytes) -> PathId:
        if len(data) != PATH_BYTES:
            raise PathError(f"PathId needs {PATH_BYTES} bytes, got {len(data)}")
        wire = int.from_bytes(data, "big")
        return cls(int(f"{wire:0{PATH_BITS}b}"[::-1], 2))

    def __repr__(self) -> str:
        return f"PathId({self.positions()})"


ZERO_PATH = PathId(0)


def encode_path(link_positions: Iterable[int]) -> PathId:
    bits = 0
    for pos in link_positions:
        if not 0 <= pos < PATH_BITS:
            raise PathError(f"bit position {pos} out of range 0..{PATH_BITS - 1}")
        bits |= 1 << pos
    return PathId(bits)


def combine(paths: Iterable[PathId]) -> PathId:
    """OR a non-empty collection of paths into one delivery tree."""
    paths = list(paths)
    if not paths:
        raise PathError("combine() needs at least one PathId")
    bits = 0
    for p in paths:
        bits |= p.bits
    return PathId(bits)


def forward_decision(
    path: PathId, port_bits: Mapping[Hashable, int], arrival_port: Hashable | None = None
) -> set:
    """Output ports whose link bit is set in ``path``, never the arrival port.

    An empty result means the packet is dropped at this forwarder.
    """
    bits = path.bits
    return {
        port
        for port, pos in port_bits.items()
        if port != arrival_port and bits >> pos & 1
    }


def checksum(path: PathId) -> int:
    """CRC-32 over the 32-byte wire form."""
    return zlib.crc32(path.to_bytes()) & 0xFFFFFFFF


def verify(path: PathId, value: int) -> bool:
    return checksum(path) == value


def checksum_bytes(value: int) -> bytes:
    return value.to_bytes(4, "big")
