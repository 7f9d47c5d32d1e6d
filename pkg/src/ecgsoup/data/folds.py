"""Seeded k-fold partition of record ids with train/validation/test designation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import FoldLeakError, InputError


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple  # tuple of tuples of record ids
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def designate(self, test_fold: int):
        """Return ``(train_ids, val_ids, test_ids)``; validation is the next fold."""
        if not 0 <= test_fold < self.k:
            raise InputError(f"fold index {test_fold} outside 0..{self.k - 1}")
        if self.k < 3:
            raise InputError("designation needs at least 3 folds")
        val_fold = (test_fold + 1) % self.k
        train = [i for f, ids in enumerate(self.folds) if f not in (test_fold, val_fold) for i in ids]
        return train, list(self.folds[val_fold]), list(self.folds[test_fold])

    def to_dict(self):
        return {"seed": self.seed, "folds": [list(f) for f in self.folds]}


def kfold_split(ids, k: int = 10, seed: int = 0) -> FoldSplit:
    """Shuffle ``ids`` with ``seed`` and deal them round-robin into ``k`` folds.

    ``ids`` may also be a manifest (anything with an ``ids`` attribute).
    """
    ids = list(getattr(ids, "ids", ids))
    if k < 2:
        raise InputError(f"k must be at least 2, got {k}")
    if len(ids) < k:
        raise InputError(f"need at least {k} records for {k} folds, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise InputError("record ids are not unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = tuple(tuple(ids[j] for j in order[f::k]) for f in range(k))
    return FoldSplit(folds, seed)


def check_disjoint(**groups):
    """Raise :class:`FoldLeakError` if any record id appears in two named groups."""
    seen = {}
    for name, ids in groups.items():
        for rid in ids:
            if rid in seen and seen[rid] != name:
                raise FoldLeakError(f"record {rid!r} appears in both {seen[rid]} and {name}")
            seen[rid] = name
