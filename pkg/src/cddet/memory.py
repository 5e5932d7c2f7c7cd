"""Budgeted exemplar storage with herding selection and quota rebalancing.

Each class keeps its exemplars in herding order; trimming always drops the
tail, so every stored list stays a prefix of the original selection. Payloads
are either raw input vectors or latent activations captured at the
extractor's replay layer, uniformly per memory instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Array
from .errors import ConfigError, ContractError, EngineError

RAW = "raw"
LATENT = "latent"
PAYLOAD_KINDS = (RAW, LATENT)


@dataclass
class Exemplar:
    payload: Array
    class_idx: int
    task_id: int


def herd_select(features: Array, m: int) -> list[int]:
    """Greedy herding order: step k picks the index keeping the running mean
    of the chosen features closest to the class mean. Ties go to the lowest
    index."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= m <= n:
        raise ContractError(f"m={m} outside [1, {n}]")
    mu = features.mean(axis=0)
    chosen: list[int] = []
    total = np.zeros_like(mu)
    remaining = list(range(n))
    for k in range(1, m + 1):
        candidates = np.asarray(remaining)
        dists = np.linalg.norm(mu - (total + features[candidates]) / k, axis=1)
        best = candidates[int(np.argmin(dists))]  # argmin keeps the first minimum
        chosen.append(int(best))
        total += features[best]
        remaining.remove(int(best))
    return chosen


def quotas(budget: int, num_classes: int) -> list[int]:
    """Per-class quotas: floor share plus one extra for the lowest indices."""
    if num_classes < 1:
        raise ContractError("num_classes must be at least 1")
    base, rem = divmod(budget, num_classes)
    return [base + (1 if i < rem else 0) for i in range(num_classes)]


def capture(extractor, x: Array, mode: str) -> Array:
    """Payload rows for storage: the inputs themselves, or their activations
    at the extractor's capture layer."""
    if mode not in PAYLOAD_KINDS:
        raise ConfigError(f"unknown payload kind {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if mode == RAW:
        return x.copy()
    _, latent = extractor.forward_with_capture(x)
    return latent


class ExemplarMemory:
    """Per-class herding-ordered stores under one shared budget."""

    def __init__(self, budget: int, payload_kind: str = RAW):
        if budget < 1:
            raise ConfigError("memory budget must be a positive integer")
        if payload_kind not in PAYLOAD_KINDS:
            raise ConfigError(f"unknown payload kind {payload_kind!r}")
        self.budget = budget
        self.payload_kind = payload_kind
        self.classes: dict[int, list[Exemplar]] = {}

    def add_class(self, class_idx: int, payloads: Array, task_id: int) -> None:
        """Store a herding-ordered payload stack for a newly introduced class."""
        if class_idx in self.classes:
            raise ContractError(f"class {class_idx} already stored")
        self.classes[class_idx] = [
            Exemplar(np.asarray(row, dtype=np.float64), class_idx, task_id) for row in payloads
        ]

    def rebalance(self, num_classes: int) -> None:
        """Trim every class list to its quota, dropping the herding tail.

        Quotas go to stored classes in ascending class-index order, so the
        floor-division remainder lands on the oldest classes.
        """
        per_class = quotas(self.budget, num_classes)
        for rank, class_idx in enumerate(sorted(self.classes)):
            quota = per_class[rank] if rank < num_classes else 0
            del self.classes[class_idx][quota:]
        self.assert_within_budget()

    def total(self) -> int:
        return sum(len(v) for v in self.classes.values())

    def assert_within_budget(self) -> None:
        if self.total() > self.budget:
            raise EngineError(
                f"memory invariant violated: {self.total()} exemplars > budget {self.budget}"
            )

    def all_exemplars(self) -> list[Exemplar]:
        out: list[Exemplar] = []
        for class_idx in sorted(self.classes):
            out.extend(self.classes[class_idx])
        return out

    def __len__(self) -> int:
        return self.total()

    # -- persistence ---------------------------------------------------

    def to_payload(self) -> dict:
        return {
            "kind": self.payload_kind,
            "budget": self.budget,
            "classes": {
                str(class_idx): {
                    "task_id": exemplars[0].task_id if exemplars else -1,
                    "rows": [e.payload.tolist() for e in exemplars],
                }
                for class_idx, exemplars in self.classes.items()
            },
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ExemplarMemory":
        memory = cls(payload["budget"], payload["kind"])
        for key, entry in payload["classes"].items():
            class_idx = int(key)
            memory.classes[class_idx] = [
                Exemplar(np.asarray(row, dtype=np.float64), class_idx, entry["task_id"])
                for row in entry["rows"]
            ]
        return memory
