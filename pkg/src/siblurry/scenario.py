"""Si-Blurry stream construction.

A stream is built in four seeded stages: split the classes into disjoint and
blurry groups, give every class a random home task, pull a fraction of each
blurry class's samples out and scatter them over the tasks, then shuffle
inside each task.  Every stage draws from its own generator so that changing
one stage leaves the others untouched.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_STAGES = {"partition": 0, "assignment": 1, "leakage": 2, "shuffle": 3}


class ConfigurationError(ValueError):
    """Raised for invalid scenario settings."""


def round_half_up(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up, exact for decimal ratios."""
    x = Fraction(str(ratio)) * n
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class ScenarioConfig:
    num_tasks: int = 5
    disjoint_class_ratio: float = 0.5
    blurry_sample_ratio: float = 0.1
    seed: int = 0
    batch_size: int = 32
    # i-Blurry style: equal class counts per task instead of independent draws
    balanced_assignment: bool = False
    # whether a pooled blurry sample may be redistributed back to its home task
    leak_to_home: bool = True

    def __post_init__(self) -> None:
        if self.num_tasks < 1:
            raise ConfigurationError(f"num_tasks must be >= 1, got {self.num_tasks}")
        for name in ("disjoint_class_ratio", "blurry_sample_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")

    def stage_rng(self, stage: str) -> np.random.Generator:
        """Independent generator for one construction stage."""
        seq = np.random.SeedSequence([self.seed % 2**64, _STAGES[stage]])
        return np.random.default_rng(seq)


@dataclass(frozen=True)
class ClassPartition:
    disjoint_classes: frozenset[int]
    blurry_classes: frozenset[int]

    @property
    def all_classes(self) -> frozenset[int]:
        return self.disjoint_classes | self.blurry_classes


@dataclass(frozen=True)
class TaskAssignment:
    class_to_task: dict[int, int]
    num_tasks: int

    @property
    def per_task_classes(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_tasks)]
        for c in sorted(self.class_to_task):
            out[self.class_to_task[c]].append(c)
        return out


class StreamEntry(NamedTuple):
    sample_id: int
    class_id: int
    task_index: int


@dataclass
class StreamManifest:
    entries: list[StreamEntry]
    task_boundaries: list[int]
    config: ScenarioConfig
    partition: ClassPartition
    assignment: TaskAssignment
    # blurry class -> number of samples pulled out of its home task
    pooled_counts: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def header(self) -> dict:
        return {
            "type": "header",
            "config": asdict(self.config),
            "partition": {
                "disjoint_classes": sorted(self.partition.disjoint_classes),
                "blurry_classes": sorted(self.partition.blurry_classes),
            },
            "class_to_task": [[c, t] for c, t in sorted(self.assignment.class_to_task.items())],
            "pooled_counts": [[c, n] for c, n in sorted(self.pooled_counts.items())],
            "task_boundaries": list(self.task_boundaries),
            "num_entries": len(self.entries),
        }

    def to_bytes(self) -> bytes:
        lines = [json.dumps(self.header(), separators=(",", ":"))]
        for e in self.entries:
            lines.append(
                json.dumps(
                    {"sample_id": e.sample_id, "class_id": e.class_id, "task_index": e.task_index},
                    separators=(",", ":"),
                )
            )
        return ("\n".join(lines) + "\n").encode("utf-8")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamManifest":
        lines = data.decode("utf-8").splitlines()
        if not lines:
            raise ValueError("empty manifest")
        head = json.loads(lines[0])
        if head.get("type") != "header":
            raise ValueError("manifest is missing its header record")
        entries = []
        for line in lines[1:]:
            rec = json.loads(line)
            entries.append(StreamEntry(rec["sample_id"], rec["class_id"], rec["task_index"]))
        if len(entries) != head["num_entries"]:
            raise ValueError(
                f"manifest truncated: header says {head['num_entries']} entries, found {len(entries)}"
            )
        config = ScenarioConfig(**head["config"])
        return cls(
            entries=entries,
            task_boundaries=list(head["task_boundaries"]),
            config=config,
            partition=ClassPartition(
                frozenset(head["partition"]["disjoint_classes"]),
                frozenset(head["partition"]["blurry_classes"]),
            ),
            assignment=TaskAssignment({c: t for c, t in head["class_to_task"]}, config.num_tasks),
            pooled_counts={c: n for c, n in head["pooled_counts"]},
        )

    @classmethod
    def load(cls, path: str | Path) -> "StreamManifest":
        return cls.from_bytes(Path(path).read_bytes())

    def task_stats(self) -> list[dict]:
        """Per-task class and sample counts."""
        rows = []
        bounds = list(self.task_boundaries) + [len(self.entries)]
        for t in range(self.config.num_tasks):
            chunk = self.entries[bounds[t] : bounds[t + 1]]
            classes = {e.class_id for e in chunk}
            rows.append(
                {
                    "task": t,
                    "num_samples": len(chunk),
                    "num_classes": len(classes),
                    "home_disjoint": sum(
                        1 for c in self.assignment.per_task_classes[t] if c in self.partition.disjoint_classes
                    ),
                    "home_blurry": sum(
                        1 for c in self.assignment.per_task_classes[t] if c in self.partition.blurry_classes
                    ),
                }
            )
        return rows


def format_stats(rows: Sequence[Mapping]) -> str:
    cols = ["task", "num_samples", "num_classes", "home_disjoint", "home_blurry"]
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols]
    out = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    for r in rows:
        out.append("  ".join(str(r[c]).rjust(w) for c, w in zip(cols, widths)))
    return "\n".join(out)


def partition_classes(class_ids, ratio: float, rng: np.random.Generator) -> ClassPartition:
    ids = sorted(set(class_ids))
    if not ids:
        raise ConfigurationError("cannot partition an empty class set")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"disjoint class ratio must lie in [0, 1], got {ratio}")
    k = round_half_up(ratio, len(ids))
    picked = rng.choice(len(ids), size=k, replace=False)
    disjoint = frozenset(ids[i] for i in picked)
    return ClassPartition(disjoint, frozenset(ids) - disjoint)


def assign_classes_to_tasks(
    partition: ClassPartition,
    num_tasks: int,
    rng: np.random.Generator,
    balanced: bool = False,
) -> TaskAssignment:
    """Draw a home task for every class.

    By default each class picks its task independently and uniformly, so the
    number of classes per task varies between seeds.  ``balanced=True``
    reproduces the fixed-count i-Blurry layout (round-robin after a shuffle,
    done separately for disjoint and blurry classes).
    """
    if num_tasks < 1:
        raise ConfigurationError(f"num_tasks must be >= 1, got {num_tasks}")
    mapping: dict[int, int] = {}
    if balanced:
        for group in (partition.disjoint_classes, partition.blurry_classes):
            order = rng.permutation(sorted(group))
            for i, c in enumerate(order):
                mapping[int(c)] = i % num_tasks
    else:
        classes = sorted(partition.all_classes)
        tasks = rng.integers(0, num_tasks, size=len(classes))
        mapping = {c: int(t) for c, t in zip(classes, tasks)}
    return TaskAssignment(mapping, num_tasks)


def _train_map(dataset_index) -> Mapping[int, Sequence[int]]:
    return dataset_index.train if hasattr(dataset_index, "train") else dataset_index


def distribute_blurry_samples(
    dataset_index,
    partition: ClassPartition,
    assignment: TaskAssignment,
    blurry_ratio: float,
    rng: np.random.Generator,
    shuffle_rng: np.random.Generator | None = None,
    leak_to_home: bool = True,
    config: ScenarioConfig | None = None,
) -> StreamManifest:
    """Place every training sample in a task and order the stream.

    ``dataset_index`` is a DatasetIndex or a plain ``{class_id: [sample_id]}``
    map.  Pooled samples of blurry classes land on a uniformly drawn task;
    with ``leak_to_home=False`` the home task is excluded from that draw.
    """
    train = _train_map(dataset_index)
    T = assignment.num_tasks
    missing = partition.all_classes - set(assignment.class_to_task)
    if missing:
        raise ConfigurationError(f"classes without a home task: {sorted(missing)[:10]}")
    if shuffle_rng is None:
        shuffle_rng = rng
    if config is None:
        config = ScenarioConfig(num_tasks=T, blurry_sample_ratio=blurry_ratio, leak_to_home=leak_to_home)

    buckets: list[list[StreamEntry]] = [[] for _ in range(T)]
    pooled_counts: dict[int, int] = {}
    for c in sorted(train):
        samples = list(train[c])
        home = assignment.class_to_task[c]
        if c in partition.disjoint_classes:
            buckets[home].extend(StreamEntry(int(s), c, home) for s in samples)
            continue
        if not samples:
            logger.warning("blurry class %d has no samples; skipped", c)
            pooled_counts[c] = 0
            continue
        k = round_half_up(blurry_ratio, len(samples))
        pooled = set(rng.choice(len(samples), size=k, replace=False).tolist())
        pooled_counts[c] = k
        for i, s in enumerate(samples):
            if i not in pooled:
                buckets[home].append(StreamEntry(int(s), c, home))
                continue
            if leak_to_home or T == 1:
                dest = int(rng.integers(0, T))
            else:
                dest = int(rng.integers(0, T - 1))
                dest += dest >= home
            buckets[dest].append(StreamEntry(int(s), c, dest))

    entries: list[StreamEntry] = []
    boundaries = []
    for bucket in buckets:
        boundaries.append(len(entries))
        order = shuffle_rng.permutation(len(bucket))
        entries.extend(bucket[i] for i in order)
    return StreamManifest(entries, boundaries, config, partition, assignment, pooled_counts)


def build_stream(dataset_index, config: ScenarioConfig) -> StreamManifest:
    """Run all four stages with the config's seeded sub-generators."""
    train = _train_map(dataset_index)
    partition = partition_classes(train.keys(), config.disjoint_class_ratio, config.stage_rng("partition"))
    assignment = assign_classes_to_tasks(
        partition, config.num_tasks, config.stage_rng("assignment"), balanced=config.balanced_assignment
    )
    return distribute_blurry_samples(
        train,
        partition,
        assignment,
        config.blurry_sample_ratio,
        config.stage_rng("leakage"),
        shuffle_rng=config.stage_rng("shuffle"),
        leak_to_home=config.leak_to_home,
        config=config,
    )


def iterate_stream(manifest: StreamManifest, batch_size: int) -> Iterator[list[StreamEntry]]:
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    entries = manifest.entries
    for start in range(0, len(entries), batch_size):
        yield entries[start : start + batch_size]
