"""Reservoir memory and ER-style batch composition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class ReplayBuffer:
    capacity: int
    items: list[tuple[int, int]] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 0:
            raise ValueError("capacity must be >= 0")

    def __len__(self) -> int:
        return len(self.items)

    def dump(self, path: str | Path) -> Path:
        """Write the contents as manifest-style records (task index unknown, -1)."""
        path = Path(path)
        lines = [json.dumps({"type": "header", "capacity": self.capacity, "seen": self.seen,
                             "num_entries": len(self.items)}, separators=(",", ":"))]
        lines += [json.dumps({"sample_id": s, "class_id": c, "task_index": -1}, separators=(",", ":"))
                  for s, c in self.items]
        path.write_text("\n".join(lines) + "\n")
        return path


def reservoir_update(buffer: ReplayBuffer, item: tuple[int, int], rng: np.random.Generator) -> ReplayBuffer:
    """Classic reservoir step, in place; returns the same buffer."""
    if buffer.capacity > 0:
        if len(buffer.items) < buffer.capacity:
            buffer.items.append(item)
        else:
            # slot < capacity happens with probability capacity / (seen + 1)
            slot = int(rng.integers(0, buffer.seen + 1))
            if slot < buffer.capacity:
                buffer.items[slot] = item
    buffer.seen += 1
    return buffer


def compose_batch(
    stream_batch: Sequence[tuple[int, int]],
    buffer: ReplayBuffer,
    rng: np.random.Generator,
) -> list[tuple[int, int]]:
    """Stream items followed by up to ``len(stream_batch)`` distinct memory items."""
    batch = list(stream_batch)
    n = min(len(batch), len(buffer.items))
    if n == 0:
        return batch
    picked = rng.choice(len(buffer.items), size=n, replace=False)
    return batch + [buffer.items[i] for i in picked]
