"""Cone blocks, Euclidean projections and projection Jacobians.

Only the zero cone, the nonnegative orthant and the second-order cone are
supported. Second-order cone blocks use the layout ``(t, x)`` with
``||x|| <= t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class ConeKind(str, Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"


@dataclass(frozen=True)
class ConeBlock:
    kind: ConeKind
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "kind", ConeKind(self.kind))
        if self.dim < 1:
            raise ValueError(f"cone dimension must be >= 1, got {self.dim}")
        if self.kind is ConeKind.SOC and self.dim < 2:
            raise ValueError("second-order cone needs dim >= 2")


@dataclass(frozen=True)
class ConeSpec:
    blocks: tuple[ConeBlock, ...]

    def __init__(self, blocks: Iterable[ConeBlock | tuple]):
        parsed = []
        for b in blocks:
            parsed.append(b if isinstance(b, ConeBlock) else ConeBlock(*b))
        object.__setattr__(self, "blocks", tuple(parsed))

    @property
    def total_dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    def slices(self) -> list[tuple[ConeBlock, slice]]:
        out, start = [], 0
        for b in self.blocks:
            out.append((b, slice(start, start + b.dim)))
            start += b.dim
        return out

    def to_json(self) -> list[dict]:
        return [{"kind": b.kind.value, "dim": b.dim} for b in self.blocks]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "ConeSpec":
        return cls(ConeBlock(ConeKind(it["kind"]), int(it["dim"])) for it in items)


def zero(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.ZERO, dim)


def nonneg(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.NONNEG, dim)


def soc(dim: int) -> ConeBlock:
    return ConeBlock(ConeKind.SOC, dim)


def _check(spec: ConeSpec, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != spec.total_dim:
        raise ValueError(
            f"vector of length {v.shape} does not match cone dimension {spec.total_dim}")
    return v


def _proj_soc(v: np.ndarray) -> np.ndarray:
    t, x = v[0], v[1:]
    nx = math.sqrt(float(x @ x))
    if nx <= t:
        return v.copy()
    if nx <= -t:
        return np.zeros_like(v)
    scale = 0.5 * (t + nx)
    out = np.empty_like(v)
    out[0] = scale
    out[1:] = (scale / nx) * x
    return out


def _proj_block(block: ConeBlock, v: np.ndarray, dual: bool) -> np.ndarray:
    if block.kind is ConeKind.ZERO:
        return v.copy() if dual else np.zeros_like(v)
    if block.kind is ConeKind.NONNEG:
        return np.maximum(v, 0.0)
    return _proj_soc(v)


def project_primal(spec: ConeSpec, v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the product cone K."""
    v = _check(spec, v)
    out = np.empty_like(v)
    for block, sl in spec.slices():
        out[sl] = _proj_block(block, v[sl], dual=False)
    return out


def project_dual(spec: ConeSpec, v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the dual cone K*."""
    v = _check(spec, v)
    out = np.empty_like(v)
    for block, sl in spec.slices():
        out[sl] = _proj_block(block, v[sl], dual=True)
    return out


def _jac_soc(v: np.ndarray) -> np.ndarray:
    n = v.shape[0]
    t, x = v[0], v[1:]
    nx = math.sqrt(float(x @ x))
    if nx == 0.0 and t == 0.0:
        return 0.5 * np.eye(n)
    # boundary ties resolved towards the interior-side limit
    if nx <= t:
        return np.eye(n)
    if nx <= -t:
        return np.zeros((n, n))
    xb = x / nx
    J = np.empty((n, n))
    J[0, 0] = 0.5
    J[0, 1:] = 0.5 * xb
    J[1:, 0] = 0.5 * xb
    J[1:, 1:] = 0.5 * ((1.0 + t / nx) * np.eye(n - 1) - (t / nx) * np.outer(xb, xb))
    return J


def projection_jacobian_dual(spec: ConeSpec, v) -> np.ndarray:
    """One element of the conservative Jacobian of :func:`project_dual` at ``v``.

    Block diagonal. Ties (``v_i = 0`` in the orthant, ``||x|| = t`` for the
    second-order cone) take the identity branch; the apex of the
    second-order cone gets ``I/2``.
    """
    v = _check(spec, v)
    m = v.shape[0]
    J = np.zeros((m, m))
    for block, sl in spec.slices():
        if block.kind is ConeKind.ZERO:
            J[sl, sl] = np.eye(block.dim)
        elif block.kind is ConeKind.NONNEG:
            J[sl, sl] = np.diag((v[sl] >= 0.0).astype(float))
        else:
            J[sl, sl] = _jac_soc(v[sl])
    return J


def in_cone(spec: ConeSpec, v, tol: float = 1e-10, dual: bool = False) -> bool:
    """Membership test by the defining inequalities of each block."""
    v = _check(spec, v)
    for block, sl in spec.slices():
        vb = v[sl]
        if block.kind is ConeKind.ZERO:
            if not dual and np.max(np.abs(vb)) > tol:
                return False
        elif block.kind is ConeKind.NONNEG:
            if np.min(vb) < -tol:
                return False
        elif np.linalg.norm(vb[1:]) - vb[0] > tol:
            return False
    return True
