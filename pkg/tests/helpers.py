"""Shared test oracles, independent of the implementation paths they check."""

import numpy as np

from flowseg.datamodel import FeatureMap, InstanceMask
from flowseg.synthgen import SynthConfig, gen_dataset


def brute_force_distance(labels: np.ndarray) -> np.ndarray:
    """O(n^2) nearest-foreign-pixel scan: for every cell pixel, the minimum
    Euclidean distance to any pixel carrying a different label."""
    h, w = labels.shape
    out = np.zeros((h, w), dtype=np.float64)
    rr, cc = np.mgrid[0:h, 0:w]
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
    flat = labels.ravel()
    for i in np.flatnonzero(flat > 0):
        foreign = flat != flat[i]
        d2 = ((coords[foreign] - coords[i]) ** 2).sum(axis=1)
        out.ravel()[i] = np.sqrt(d2.min())
    return out.astype(np.float32)


def max_matching_tp(iou: np.ndarray, thr: float) -> int:
    """Maximum one-to-one matching size over pairs with IoU >= thr (exhaustive)."""
    ng, np_ = iou.shape
    edges = [[p for p in range(np_) if iou[g, p] >= thr] for g in range(ng)]

    def best(g, used):
        if g == ng:
            return 0
        top = best(g + 1, used)
        for p in edges[g]:
            if not (used >> p) & 1:
                top = max(top, 1 + best(g + 1, used | (1 << p)))
        return top

    return best(0, 0)


def gt_featuremap(t, logit=10.0) -> FeatureMap:
    """Assemble a feature map from ground-truth fields (phi<-d, u<-flow, z<-+-logit)."""
    z = np.where(t.b > 0, logit, -logit)
    return FeatureMap(np.stack([t.d, t.gx, t.gy, z], axis=-1).astype(np.float32))


def tube_masks(n_masks, seed=0, h=32, w=32, margin=False, **kw):
    """Random tube-cell masks; with margin=True instances keep off the border."""
    cfg = dict(cells_per_image=(1, 3), radius=(2.0, 3.0), skeleton_length=(5, 12),
               curvature=0.25, branch_prob=0.2, domain="phase")
    cfg.update(kw)
    masks = []
    base = SynthConfig(seed=seed, n_images=n_masks, h=h, w=w, **cfg)
    for _, msk in gen_dataset(base).items:
        if margin:
            trimmed = msk.labels.copy()
            trimmed[0, :] = trimmed[-1, :] = 0
            trimmed[:, 0] = trimmed[:, -1] = 0
            msk = InstanceMask.from_raw(trimmed)
        masks.append(msk)
    return masks


def fd_check(loss_of, params, grads, rng, names=None, per_tensor=2, floor=1e-2):
    """Central finite differences on sampled parameter coordinates vs analytic
    grads; returns the max relative error (floored denominator guards the
    near-zero-gradient coordinates where FD noise dominates)."""
    errs = []
    for name in names or list(params):
        flat = params[name].ravel()
        count = min(per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            h = 1e-6 * max(1.0, abs(flat[idx]))
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_of(params)
            flat[idx] = orig - h
            lm = loss_of(params)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].ravel()[idx]
            errs.append(abs(an - fd) / max(abs(an), abs(fd), floor))
    return max(errs)
