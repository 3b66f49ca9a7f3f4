"""Reference-list duplication policies.

When fewer decoded frames exist than the model's reference count, the
list is padded by repeating either the newest decoded frame (NEAR) or
the oldest one (FURTHER). The same padding rule is used by the codec's
decoded-buffer logic and by the analytic error-accumulation model, so
the two stay consistent by construction.
"""

from __future__ import annotations

import enum
from typing import Sequence, TypeVar

from .errors import UsageError

T = TypeVar("T")


class DuplicationPolicy(enum.Enum):
    NEAR = "near"
    FURTHER = "further"

    @classmethod
    def parse(cls, name: str) -> "DuplicationPolicy":
        try:
            return cls(name.lower())
        except ValueError:
            raise UsageError(f"unknown duplication policy {name!r}; expected 'near' or 'further'") from None

    @property
    def wire_value(self) -> int:
        return 0 if self is DuplicationPolicy.NEAR else 1

    @classmethod
    def from_wire(cls, value: int) -> "DuplicationPolicy":
        if value == 0:
            return cls.NEAR
        if value == 1:
            return cls.FURTHER
        raise UsageError(f"invalid duplication policy byte {value}")


def pad_references(items: Sequence[T], n: int, policy: DuplicationPolicy) -> list[T]:
    """Pad or trim an oldest-to-newest reference list to exactly n entries.

    With m >= n entries the newest n are kept (no duplication). With
    m < n, NEAR repeats the newest entry and FURTHER repeats the oldest;
    the result stays ordered oldest to newest.
    """
    if n < 1:
        raise UsageError(f"reference count must be >= 1, got {n}")
    if not items:
        raise UsageError("reference list is empty")
    items = list(items)
    if len(items) >= n:
        return items[-n:]
    pad = n - len(items)
    if policy is DuplicationPolicy.NEAR:
        return items + [items[-1]] * pad
    return [items[0]] * pad + items
