"""Assignment matrices: kernel->partition matrix A and the tensor matrices derived from it.

B marks tensors kept inside a partition, D marks the two endpoint partitions of
a cross-partition tensor, L marks every partition a cross-partition tensor is
alive in, and H marks the partition of each tensor's producer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class PrecedenceError(ValueError):
    """A tensor flows from a later partition to an earlier one."""


class AssignmentError(ValueError):
    """A is not a valid one-hot kernel-to-partition assignment."""


def _endpoints(tensors) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([t.src if hasattr(t, "src") else t[0] for t in tensors], dtype=int)
    dst = np.array([t.dst if hasattr(t, "dst") else t[1] for t in tensors], dtype=int)
    return src, dst


def upper_triangular(p: int, strict: bool) -> np.ndarray:
    i, k = np.indices((p, p))
    return (i < k) if strict else (i <= k)


def check_assignment(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=bool)
    if A.ndim != 2:
        raise AssignmentError("A must be a 2-D matrix")
    bad = np.flatnonzero(A.sum(axis=1) != 1)
    if bad.size:
        raise AssignmentError(f"kernels {bad.tolist()} are not assigned to exactly one partition")
    return A


def derive_B(A, tensors) -> np.ndarray:
    A = np.asarray(A, dtype=bool)
    src, dst = _endpoints(tensors)
    return (A[src] & A[dst]).reshape(len(src), A.shape[1])


def derive_D(A, tensors) -> np.ndarray:
    A = np.asarray(A, dtype=bool)
    src, dst = _endpoints(tensors)
    return (A[src] ^ A[dst]).reshape(len(src), A.shape[1])


def derive_L(A, tensors) -> np.ndarray:
    A = np.asarray(A, dtype=bool)
    src, dst = _endpoints(tensors)
    p = A.shape[1]
    if len(src):
        ps, pd = A[src].argmax(axis=1), A[dst].argmax(axis=1)
        back = np.flatnonzero(pd < ps)
        if back.size:
            j = int(back[0])
            raise PrecedenceError(
                f"tensor {j}: consumer partition {pd[j]} precedes producer partition {ps[j]}"
            )
    a_s = A[src].astype(int) @ upper_triangular(p, strict=False).astype(int)
    a_t = A[dst].astype(int) @ upper_triangular(p, strict=True).astype(int)
    L = (a_s.astype(bool) ^ a_t.astype(bool)) ^ (A[src] & A[dst])
    return L.reshape(len(src), p)


def derive_H(A, tensors) -> np.ndarray:
    A = np.asarray(A, dtype=bool)
    src, _ = _endpoints(tensors)
    return A[src].reshape(len(src), A.shape[1]).copy()


@dataclass(frozen=True)
class AssignmentMatrices:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    L: np.ndarray
    H: np.ndarray

    @property
    def p_max(self) -> int:
        return self.A.shape[1]

    @classmethod
    def from_assignment(cls, A, tensors) -> "AssignmentMatrices":
        A = check_assignment(A)
        return cls(A, derive_B(A, tensors), derive_D(A, tensors), derive_L(A, tensors), derive_H(A, tensors))

    @classmethod
    def from_partitions(cls, part_of: Sequence[int], p_max: int, tensors) -> "AssignmentMatrices":
        return cls.from_assignment(one_hot(part_of, p_max), tensors)

    def partition_of(self) -> list[int]:
        return self.A.argmax(axis=1).tolist()


def one_hot(part_of: Sequence[int], p_max: int) -> np.ndarray:
    part_of = np.asarray(part_of, dtype=int)
    if part_of.size and (part_of.min() < 0 or part_of.max() >= p_max):
        raise AssignmentError(f"partition index out of range [0, {p_max})")
    A = np.zeros((len(part_of), p_max), dtype=bool)
    A[np.arange(len(part_of)), part_of] = True
    return A


def partitions_to_list(part_of: Sequence[int], p_max: int) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(p_max)]
    for k, p in enumerate(part_of):
        out[p].append(k)
    return out


def list_to_partitions(partitions: Sequence[Sequence[int]], n: int) -> list[int]:
    part_of = [-1] * n
    for p, ks in enumerate(partitions):
        for k in ks:
            if not 0 <= k < n:
                raise AssignmentError(f"kernel id {k} out of range")
            if part_of[k] != -1:
                raise AssignmentError(f"kernel {k} assigned to more than one partition")
            part_of[k] = p
    missing = [k for k, p in enumerate(part_of) if p < 0]
    if missing:
        raise AssignmentError(f"kernels {missing} are not assigned to any partition")
    return part_of


def check_precedence(part_of: Sequence[int], tensors) -> None:
    for j, t in enumerate(tensors):
        if part_of[t.dst] < part_of[t.src]:
            raise PrecedenceError(
                f"tensor {j}: consumer partition {part_of[t.dst]} precedes producer partition {part_of[t.src]}"
            )


def compact_partitions(part_of: Sequence[int]) -> list[int]:
    """Drop empty partitions, keeping the order of the used ones."""
    used = sorted(set(int(p) for p in part_of))
    remap = {p: i for i, p in enumerate(used)}
    return [remap[int(p)] for p in part_of]
