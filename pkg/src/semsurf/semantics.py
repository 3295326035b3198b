"""Semantic-equivalent SDF transforms.

Given the holistic signed distance f and a per-point label distribution p,
the transform for a single label s is

    f_s = max(f, max_{r != s} p_r - p_s)

and for a non-empty label set P

    f_P = max(f, max_{s not in P} p_s - max_{s in P} p_s)

with the max over an empty excluded set defined as 0, so the full-set
transform preserves the sign of f everywhere (probabilities are
non-negative, making 0 the infimum of attainable maxima).

Three facts make these the right carving tool, and the test suite pins all
of them down:
  * positive f stays positive (the original surface is a hard constraint),
  * inside the solid the result crosses zero exactly where the dominant
    label transits,
  * the single-label transform is the singleton-set special case, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldGrid, InvalidInputError

Array = np.ndarray

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class SemanticSet:
    """Non-empty set of label ids to preserve, e.g. {cloth} or the full registry."""

    members: frozenset[int]
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", frozenset(int(m) for m in self.members))
        if not self.members:
            raise InvalidInputError("semantic set must be non-empty")
        if any(m < 0 for m in self.members):
            raise InvalidInputError(f"label ids must be non-negative: {sorted(self.members)}")

    def validate_registry(self, num_labels: int) -> None:
        if max(self.members) >= num_labels:
            raise InvalidInputError(
                f"set {sorted(self.members)} outside label registry 0..{num_labels - 1}"
            )


def _check_simplex(p: Array) -> Array:
    """Validate rows of p against the simplex within SIMPLEX_TOL, then renormalize."""
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("probabilities must be finite")
    if np.any(p < -SIMPLEX_TOL):
        raise InvalidInputError(f"negative probability beyond tolerance: min={p.min()}")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_TOL):
        bad = np.abs(sums - 1.0).max()
        raise InvalidInputError(f"probabilities must sum to 1 within {SIMPLEX_TOL}; off by {bad}")
    p = np.maximum(p, 0.0)
    return p / p.sum(axis=-1, keepdims=True)


def equivalent_sdf_array(f: Array, p: Array, s: int) -> Array:
    """Vectorized single-label transform over f (n,) and p (n, K)."""
    p = _check_simplex(np.asarray(p, dtype=np.float64))
    f = np.asarray(f, dtype=np.float64)
    if not 0 <= s < p.shape[-1]:
        raise InvalidInputError(f"label {s} outside registry 0..{p.shape[-1] - 1}")
    others = np.delete(p, s, axis=-1)
    m_other = others.max(axis=-1) if others.shape[-1] else np.zeros_like(f)
    return np.maximum(f, m_other - p[..., s])


def equivalent_sdf(f: float, p, s: int) -> float:
    """Single-label equivalent SDF at one point."""
    out = equivalent_sdf_array(np.asarray([f], dtype=np.float64), np.atleast_2d(p), s)
    return float(out[0])


def equivalent_sdf_set_array(f: Array, p: Array, members) -> Array:
    """Vectorized set transform; ``members`` is an iterable of label ids."""
    p = _check_simplex(np.asarray(p, dtype=np.float64))
    f = np.asarray(f, dtype=np.float64)
    k = p.shape[-1]
    inside = sorted({int(m) for m in members})
    if not inside:
        raise InvalidInputError("semantic set must be non-empty")
    if inside[0] < 0 or inside[-1] >= k:
        raise InvalidInputError(f"set {inside} outside label registry 0..{k - 1}")
    outside = [i for i in range(k) if i not in inside]
    m_in = p[..., inside].max(axis=-1)
    # Empty excluded set: probabilities are non-negative, so 0 is the natural floor.
    m_out = p[..., outside].max(axis=-1) if outside else np.zeros_like(m_in)
    return np.maximum(f, m_out - m_in)


def equivalent_sdf_set(f: float, p, members) -> float:
    """Set equivalent SDF at one point."""
    if isinstance(members, SemanticSet):
        members = members.members
    out = equivalent_sdf_set_array(np.asarray([f], dtype=np.float64), np.atleast_2d(p), members)
    return float(out[0])


def _selector_members(selector, num_labels: int) -> list[int]:
    """Normalize a selector (label id | SemanticSet | iterable of ids) to sorted ids."""
    if isinstance(selector, SemanticSet):
        selector.validate_registry(num_labels)
        return sorted(selector.members)
    if isinstance(selector, (int, np.integer)):
        if not 0 <= selector < num_labels:
            raise InvalidInputError(f"label {selector} outside registry 0..{num_labels - 1}")
        return [int(selector)]
    members = sorted({int(m) for m in selector})
    if not members:
        raise InvalidInputError("semantic set must be non-empty")
    if members[0] < 0 or members[-1] >= num_labels:
        raise InvalidInputError(f"set {members} outside label registry 0..{num_labels - 1}")
    return members


def transform_values(sdf: Array, sem_probs: Array, selector, num_labels: int) -> Array:
    """Apply the matching transform to parallel sdf/sem arrays.

    Single-label selectors use the single-label formula, everything else the
    set formula; for singletons the two agree exactly, which the tests check
    on random inputs.
    """
    members = _selector_members(selector, num_labels)
    if isinstance(selector, (int, np.integer)):
        return equivalent_sdf_array(sdf, sem_probs, members[0])
    return equivalent_sdf_set_array(sdf, sem_probs, members)


def equivalent_sdf_grid(grid: FieldGrid, selector) -> Array:
    """Element-wise transform of a sampled field grid; same lattice, same ordering."""
    k = grid.sem_probs.shape[-1]
    return transform_values(grid.sdf, grid.sem_probs, selector, k)
