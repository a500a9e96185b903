"""Instance-level average precision at a fixed IoU threshold."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import net, segmenter
from ._perf import single_thread_blas
from .datamodel import Dataset, InstanceMask
from .errors import ContractError


def iou_matrix(gt: InstanceMask, pred: InstanceMask) -> np.ndarray:
    """Pairwise IoU over pixel sets, background excluded; shape (n_gt, n_pred)."""
    if (gt.h, gt.w) != (pred.h, pred.w):
        raise ContractError(f"mask shapes differ: {(gt.h, gt.w)} vs {(pred.h, pred.w)}")
    ng, np_ = gt.n_instances, pred.n_instances
    if ng == 0 or np_ == 0:
        return np.zeros((ng, np_), dtype=np.float64)
    joint = gt.labels.astype(np.int64).ravel() * (np_ + 1) + pred.labels.astype(np.int64).ravel()
    inter = np.bincount(joint, minlength=(ng + 1) * (np_ + 1)).reshape(ng + 1, np_ + 1)
    area_g = np.bincount(gt.labels.ravel(), minlength=ng + 1)
    area_p = np.bincount(pred.labels.ravel(), minlength=np_ + 1)
    i = inter[1:, 1:].astype(np.float64)
    union = area_g[1:, None] + area_p[None, 1:] - i
    return np.where(union > 0, i / np.maximum(union, 1), 0.0)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    ap: float


def match_and_score(gt: InstanceMask, pred: InstanceMask, thr: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching over IoU entries in descending order (ties by
    ascending (gt_id, pred_id)); AP = TP / (TP + FP + FN)."""
    iou = iou_matrix(gt, pred)
    ng, np_ = iou.shape
    gi, pi = np.nonzero(iou >= thr)
    order = sorted(range(gi.size), key=lambda k: (-iou[gi[k], pi[k]], gi[k], pi[k]))
    g_used = np.zeros(ng, dtype=bool)
    p_used = np.zeros(np_, dtype=bool)
    tp = 0
    for k in order:
        g, p = gi[k], pi[k]
        if not g_used[g] and not p_used[p]:
            g_used[g] = p_used[p] = True
            tp += 1
    fp = np_ - tp
    fn = ng - tp
    if ng == 0 and np_ == 0:
        ap = 1.0
    elif ng == 0 or np_ == 0:
        ap = 0.0
    else:
        ap = tp / (tp + fp + fn)
    return MatchResult(tp=tp, fp=fp, fn=fn, ap=ap)


@dataclass
class EvalRow:
    image_id: int
    n_gt: int
    n_pred: int
    tp: int
    fp: int
    fn: int
    ap: float


@dataclass
class EvalReport:
    rows: list
    mean_ap: float
    pooled_ap: float

    def csv_lines(self):
        out = ["image_id,n_gt,n_pred,tp,fp,fn,ap"]
        for r in self.rows:
            out.append(f"{r.image_id},{r.n_gt},{r.n_pred},{r.tp},{r.fp},{r.fn},{r.ap:.6f}")
        return out


def score_masks(pairs, thr: float = 0.5) -> EvalReport:
    """Aggregate matching over (gt, pred) mask pairs: per-image AP rows, their
    mean (headline), and the pooled TP/(TP+FP+FN)."""
    rows = []
    tp = fp = fn = 0
    for i, (gt, pred) in enumerate(pairs):
        m = match_and_score(gt, pred, thr)
        rows.append(EvalRow(i, gt.n_instances, pred.n_instances, m.tp, m.fp, m.fn, m.ap))
        tp += m.tp
        fp += m.fp
        fn += m.fn
    mean_ap = float(np.mean([r.ap for r in rows]))
    pooled = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
    return EvalReport(rows=rows, mean_ap=mean_ap, pooled_ap=pooled)


def evaluate_dataset(params: dict, mcfg, ds: Dataset, head_cfg: segmenter.HeadConfig,
                     thr: float = 0.5, threads: int = 1) -> EvalReport:
    """Segment every image with the model and score against ground truth."""
    if not ds.items:
        raise ContractError("cannot evaluate an empty dataset")

    def predict(item):
        img, _ = item
        Z, _ = net.forward(params, img.data, mcfg, with_tape=False)
        return segmenter.segment(Z, head_cfg)

    with single_thread_blas():
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(pool.map(predict, ds.items))
        else:
            preds = [predict(it) for it in ds.items]
    return score_masks([(msk, pred) for (_, msk), pred in zip(ds.items, preds)], thr)
