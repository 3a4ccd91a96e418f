"""Writer-side shuffle proxy: batches small packets per (target agent, partition)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import DataBlock

DEFAULT_FLUSH_BYTES = 1_000_000
DEFAULT_FLUSH_INTERVAL_S = 0.1


@dataclass(frozen=True)
class Transfer:
    target: str
    partition_id: int
    blocks: tuple[DataBlock, ...]

    @property
    def size_bytes(self) -> int:
        return sum(b.size_bytes for b in self.blocks)

    def retarget(self, agent_id: str) -> "Transfer":
        return replace(self, target=agent_id)


@dataclass
class _Slot:
    blocks: list[DataBlock] = field(default_factory=list)
    pending: int = 0
    opened_at: float = 0.0


class ShuffleProxy:
    def __init__(
        self,
        node_id: str,
        flush_bytes: int = DEFAULT_FLUSH_BYTES,
        flush_interval_s: float = DEFAULT_FLUSH_INTERVAL_S,
        enabled: bool = True,
    ):
        self.node_id = node_id
        self.flush_bytes = flush_bytes
        self.flush_interval_s = flush_interval_s
        self.enabled = enabled
        self.slots: dict[tuple[str, int], _Slot] = {}
        self.submitted = 0
        self.forwarded = 0
        self.transfers = 0
        self.dropped = 0

    @property
    def pending(self) -> int:
        return sum(s.pending for s in self.slots.values())

    def submit(self, target: str, block: DataBlock, now: float = 0.0) -> list[Transfer]:
        self.submitted += block.size_bytes
        if not self.enabled:
            return [self._emit(Transfer(target, block.partition_id, (block,)))]
        key = (target, block.partition_id)
        slot = self.slots.get(key)
        if slot is None:
            slot = self.slots[key] = _Slot(opened_at=now)
        slot.blocks.append(block)
        slot.pending += block.size_bytes
        if slot.pending >= self.flush_bytes:
            return [self._flush_key(key)]
        return []

    def flush(self, target: str, partition_id: int) -> Transfer:
        key = (target, partition_id)
        if key not in self.slots:
            raise KeyError(f"empty slot {key}")
        return self._flush_key(key)

    def flush_due(self, now: float) -> list[Transfer]:
        """Timer flush of slots older than the flush interval."""
        due = [k for k, s in self.slots.items() if now - s.opened_at >= self.flush_interval_s]
        return [self._flush_key(k) for k in due]

    def flush_all(self, blocks_of: str | None = None) -> list[Transfer]:
        """Flush every slot, or only slots holding blocks of one writer attempt.

        Slots are per (target, partition) and may mix writers; flushing for a
        writer flushes the whole slot it appears in.
        """
        keys = [
            k
            for k, s in self.slots.items()
            if blocks_of is None or any(b.key.access_point == blocks_of for b in s.blocks)
        ]
        return [self._flush_key(k) for k in keys]

    def next_deadline(self) -> float | None:
        if not self.slots:
            return None
        return min(s.opened_at for s in self.slots.values()) + self.flush_interval_s

    def _flush_key(self, key: tuple[str, int]) -> Transfer:
        slot = self.slots.pop(key)
        return self._emit(Transfer(key[0], key[1], tuple(slot.blocks)))

    def _emit(self, transfer: Transfer) -> Transfer:
        self.forwarded += transfer.size_bytes
        self.transfers += 1
        return transfer

    def drop_writer(self, access_point: str) -> int:
        """Forget pending packets of a killed writer attempt."""
        dropped = 0
        for key in list(self.slots):
            slot = self.slots[key]
            keep = [b for b in slot.blocks if b.key.access_point != access_point]
            gone = sum(b.size_bytes for b in slot.blocks) - sum(b.size_bytes for b in keep)
            dropped += gone
            if keep:
                slot.blocks = keep
                slot.pending -= gone
            else:
                del self.slots[key]
        self.dropped += dropped
        return dropped
