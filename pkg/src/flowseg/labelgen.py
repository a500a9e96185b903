"""Ground-truth supervision from instance masks: distance field, unit flow, boundary."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .datamodel import InstanceMask, TargetField
from .errors import ContractError

PLATEAU_EPS = 1e-6


def distance_field(mask: InstanceMask) -> np.ndarray:
    """Exact Euclidean distance from each cell pixel to the nearest pixel of any
    other label (background included); zero on background.

    Computed per instance with an exact EDT, which equals the brute-force
    nearest-foreign-pixel scan: the straight segment to the nearest foreign
    pixel cannot leave the instance earlier than it ends.
    """
    labels = mask.labels
    out = np.zeros(labels.shape, dtype=np.float64)
    for lab in range(1, mask.n_instances + 1):
        inside = labels == lab
        if inside.all():
            raise ContractError(f"instance {lab} has no foreign pixels; distance undefined")
        d = ndimage.distance_transform_edt(inside)
        out[inside] = d[inside]
    return out.astype(np.float32)


def flow_field(d: np.ndarray, mask: InstanceMask):
    """Unit-norm up-slope gradient of d, differenced only across same-instance
    neighbors (one-sided at instance borders, zero on plateaus and background).
    """
    if d.shape != mask.labels.shape:
        raise ContractError(f"distance grid {d.shape} does not match mask {mask.labels.shape}")
    lab = mask.labels
    d64 = d.astype(np.float64)
    h, w = lab.shape

    def same(axis, delta):
        s = np.zeros(lab.shape, dtype=bool)
        if axis == 0 and delta == -1:
            s[1:, :] = lab[1:, :] == lab[:-1, :]
        elif axis == 0 and delta == 1:
            s[:-1, :] = lab[:-1, :] == lab[1:, :]
        elif axis == 1 and delta == -1:
            s[:, 1:] = lab[:, 1:] == lab[:, :-1]
        else:
            s[:, :-1] = lab[:, :-1] == lab[:, 1:]
        return s

    def neighbor_d(axis, delta):
        n = np.zeros_like(d64)
        if axis == 0 and delta == -1:
            n[1:, :] = d64[:-1, :]
        elif axis == 0 and delta == 1:
            n[:-1, :] = d64[1:, :]
        elif axis == 1 and delta == -1:
            n[:, 1:] = d64[:, :-1]
        else:
            n[:, :-1] = d64[:, 1:]
        return n

    def component(axis):
        lo_same, hi_same = same(axis, -1), same(axis, 1)
        lo_d, hi_d = neighbor_d(axis, -1), neighbor_d(axis, 1)
        g = np.zeros_like(d64)
        both = lo_same & hi_same
        g[both] = (hi_d[both] - lo_d[both]) / 2.0
        only_hi = hi_same & ~lo_same
        g[only_hi] = hi_d[only_hi] - d64[only_hi]
        only_lo = lo_same & ~hi_same
        g[only_lo] = d64[only_lo] - lo_d[only_lo]
        return g

    gy = component(0)
    gx = component(1)
    cell = lab > 0
    norm = np.hypot(gx, gy)
    keep = cell & (norm > PLATEAU_EPS)
    gx = np.where(keep, gx / np.where(keep, norm, 1.0), 0.0)
    gy = np.where(keep, gy / np.where(keep, norm, 1.0), 0.0)
    return gx.astype(np.float32), gy.astype(np.float32)


def boundary_mask(mask: InstanceMask) -> np.ndarray:
    """b=1 on cell pixels with a different-label 4-neighbor (grid edge counts as different)."""
    lab = mask.labels.astype(np.int64)
    padded = np.pad(lab, 1, mode="constant", constant_values=-1)
    center = padded[1:-1, 1:-1]
    differs = (
        (padded[:-2, 1:-1] != center)
        | (padded[2:, 1:-1] != center)
        | (padded[1:-1, :-2] != center)
        | (padded[1:-1, 2:] != center)
    )
    return ((center > 0) & differs).astype(np.uint8)


def make_targets(mask: InstanceMask) -> TargetField:
    d = distance_field(mask)
    gx, gy = flow_field(d, mask)
    return TargetField(d=d, gx=gx, gy=gy, b=boundary_mask(mask))


# ---------------------------------------------------------------------------
# Orientation transforms.  Rotating/flipping a mask and recomputing its targets
# gives bit-identical results to transforming the target grids directly; the
# direct transform is what training uses (no EDT recompute per step).


def orient_grid(a: np.ndarray, k_rot: int, flip_h: bool, flip_v: bool) -> np.ndarray:
    out = np.rot90(a, k_rot % 4)
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def orient_targets(t: TargetField, k_rot: int, flip_h: bool, flip_v: bool) -> TargetField:
    d, gx, gy, b = t.d, t.gx, t.gy, t.b
    for _ in range(k_rot % 4):
        # 90deg CCW sends a rightward vector up and a downward vector right
        d, b = np.rot90(d), np.rot90(b)
        gx, gy = np.rot90(gy), -np.rot90(gx)
    if flip_h:
        d, b = d[:, ::-1], b[:, ::-1]
        gx, gy = -gx[:, ::-1], gy[:, ::-1]
    if flip_v:
        d, b = d[::-1, :], b[::-1, :]
        gx, gy = gx[::-1, :], -gy[::-1, :]
    return TargetField(d=d, gx=gx, gy=gy, b=b)
