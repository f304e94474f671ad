"""Snapshot ensemble over the last M iterates of one training run.

The buffer keeps deep copies of the parameters after each optimiser step,
dropping the oldest once it holds M of them. The ensemble predicts with
the sum of member logits, so its argmax matches that of the averaged
logits. Attacks against the ensemble differentiate the cross-entropy of
the summed logits, i.e. a full white-box attack through every member.
"""

from __future__ import annotations

import csv
import os
import shutil
from collections import deque
from pathlib import Path
from typing import Iterator

import numpy as np

from . import models, ops
from .models import ParameterSet

MANIFEST = "manifest.csv"
CACHED_MEMBERS = 12


class EmptyEnsembleError(ValueError):
    """Raised when predicting with an empty snapshot buffer."""


class SnapshotBuffer:
    """Bounded FIFO of ``(iteration, ParameterSet)`` pairs.

    With ``spill_dir`` set, members are written to disk in the SNAP format
    instead of being kept in memory.
    """

    def __init__(self, capacity: int, spill_dir: str | os.PathLike | None = None):
        if capacity < 1:
            raise ValueError(f"snapshot capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        if self.spill_dir is not None:
            self.spill_dir.mkdir(parents=True, exist_ok=True)
        self._entries: deque[tuple[int, ParameterSet | Path]] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def iterations(self) -> list[int]:
        return [t for t, _ in self._entries]

    def record(self, t: int, params: ParameterSet) -> None:
        if self._entries and t <= self._entries[-1][0]:
            raise ValueError(f"iteration {t} is not after the last recorded iteration {self._entries[-1][0]}")
        if self.spill_dir is not None:
            item: ParameterSet | Path = self.spill_dir / f"snap_{t:09d}.bin"
            models.save_parameters(params, item)
        else:
            item = params.copy()
        self._entries.append((t, item))
        while len(self._entries) > self.capacity:
            _, old = self._entries.popleft()
            if isinstance(old, Path):
                old.unlink(missing_ok=True)

    def members(self, last: int | None = None) -> Iterator[ParameterSet]:
        """Stored parameter sets, oldest first; ``last`` keeps only the newest few."""
        entries = list(self._entries)
        if last is not None:
            entries = entries[-last:] if last > 0 else []
        for _, item in entries:
            yield models.load_parameters(item) if isinstance(item, Path) else item

    def dump(self, directory: str | os.PathLike) -> None:
        """Write one SNAP file per member plus a manifest of (iteration, file)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = []
        for (t, item), params in zip(self._entries, self.members()):
            name = f"snap_{t:09d}.bin"
            if isinstance(item, Path):
                if item.resolve() != (directory / name).resolve():
                    shutil.copyfile(item, directory / name)
            else:
                models.save_parameters(params, directory / name)
            rows.append((t, name))
        with open(directory / MANIFEST, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "file"])
            writer.writerows(rows)

    @classmethod
    def restore(cls, directory: str | os.PathLike, capacity: int | None = None) -> "SnapshotBuffer":
        directory = Path(directory)
        with open(directory / MANIFEST, newline="") as fh:
            rows = list(csv.DictReader(fh))
        buf = cls(capacity if capacity is not None else max(len(rows), 1))
        for row in rows:
            buf.record(int(row["iteration"]), models.load_parameters(directory / row["file"]))
        return buf


class EnsemblePredictor:
    """Sums member logits over a read-only view of a :class:`SnapshotBuffer`.

    ``last`` restricts the ensemble to the newest few members, which lets a
    single large buffer serve several ensemble sizes.
    """

    def __init__(self, buffer: SnapshotBuffer, last: int | None = None):
        self.buffer = buffer
        self.last = last

    def _members(self) -> list[ParameterSet]:
        members = list(self.buffer.members(self.last))
        if not members:
            raise EmptyEnsembleError("snapshot ensemble has no members")
        return members

    def logits(self, x: np.ndarray) -> np.ndarray:
        members = self._members()
        total = models.forward(members[0], x)
        for params in members[1:]:
            total += models.forward(params, x)
        return total

    def input_gradient(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        members = self._members()
        # activations of every member for a large batch do not fit in memory;
        # past this many members the forward pass is recomputed instead
        keep = len(members) <= CACHED_MEMBERS
        caches = []
        total = None
        for params in members:
            logits, cache = models.forward_with_cache(params, x)
            if keep:
                caches.append(cache)
            total = logits if total is None else total + logits
        _, dlogits = ops.softmax_cross_entropy(total, y)
        grad = None
        for i, params in enumerate(members):
            cache = caches[i] if keep else models.forward_with_cache(params, x)[1]
            g = models.backward_from_logits(params, cache, dlogits, need_params=False)[1]
            grad = g if grad is None else grad + g
        return grad


def ensemble_logits(predictor: EnsemblePredictor, batch: np.ndarray) -> np.ndarray:
    return predictor.logits(batch)


def ensemble_input_gradient(predictor: EnsemblePredictor, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return predictor.input_gradient(batch, labels)
