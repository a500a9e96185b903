"""Experiment choreography: pretraining, shot extraction, target rescaling,
source-target pairing, the two-phase adaptation schedule, and baseline runners."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import labelgen, losses, net
from ._perf import single_thread_blas, tune_allocator
from .datamodel import Checkpoint, Dataset, FeatureMap, Image, InstanceMask, config_digest, relabel
from .errors import ConfigError, ContractError, DataError, MiningError, NumericError
from .evaluator import EvalReport, evaluate_dataset
from .losses import AdaptConfig, LossConfig
from .segmenter import HeadConfig, bilinear_sample

PHASE1_LR = 0.003  # adaptation lr: one decade below pretraining
PHASE2_LR = 1e-7
PHASE_EPOCHS = 5


@dataclass
class TrainConfig:
    lr: float = 0.03
    epochs: int = 30
    batch: int = 4
    wd: float = 1e-5
    patch: int = 64
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ContractError("need lr > 0, epochs >= 0, batch >= 1")

    def to_dict(self):
        return {
            "lr": self.lr, "epochs": self.epochs, "batch": self.batch, "wd": self.wd,
            "patch": self.patch, "seed": self.seed, "augment": self.augment,
        }


@dataclass
class ShotSet:
    k: int
    patches: list  # (Image, InstanceMask) pairs of shot size
    source_diameter: float
    target_diameter: float

    def __post_init__(self):
        if self.k < 1 or len(self.patches) != self.k:
            raise ContractError(f"shot set must hold exactly K={self.k} patches")
        for _, msk in self.patches:
            if msk.n_instances < 1:
                raise ContractError("every shot patch must contain at least one instance")


def mean_diameter(ds: Dataset) -> float:
    """Mean over all instances of the equivalent-circle diameter 2*sqrt(area/pi)."""
    diams = []
    for _, msk in ds.items:
        areas = np.bincount(msk.labels.ravel())[1:]
        diams.extend(2.0 * np.sqrt(areas[areas > 0] / np.pi))
    if not diams:
        raise ContractError("dataset contains no instances")
    return float(np.mean(diams))


def _resize_image(data: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = data.shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gy.ravel(), gx.ravel()], axis=1)
    vals = bilinear_sample(data[..., None].astype(np.float64), pts)[:, 0]
    return np.clip(vals.reshape(oh, ow), 0.0, 1.0).astype(np.float32)


def _resize_mask(labels: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.clip(np.round((np.arange(oh) + 0.5) * h / oh - 0.5).astype(np.int64), 0, h - 1)
    xs = np.clip(np.round((np.arange(ow) + 0.5) * w / ow - 0.5).astype(np.int64), 0, w - 1)
    return relabel(labels[ys[:, None], xs[None, :]])


def rescale_dataset(ds: Dataset, ratio: float) -> Dataset:
    """Bilinear resize of images, nearest-neighbor resize of masks, relabeled."""
    if ratio <= 0:
        raise ContractError("rescale ratio must be positive")
    items = []
    for img, msk in ds.items:
        oh, ow = int(round(img.h * ratio)), int(round(img.w * ratio))
        if oh < 8 or ow < 8:
            raise ConfigError(f"rescale ratio {ratio} shrinks {img.h}x{img.w} below 8 px")
        if ratio == 1.0:
            items.append((img, msk))
            continue
        items.append((Image(_resize_image(img.data, oh, ow)), InstanceMask(_resize_mask(msk.labels, oh, ow))))
    return Dataset(items=items, name=ds.name, split=ds.split)


def extract_shots(target_train: Dataset, k: int, seed: int, source_diameter: float) -> ShotSet:
    """K square patches centered on uniformly sampled distinct instances;
    side = ceil(2 * target mean diameter), min 16 px, clamped to image bounds."""
    instances = []
    for i, (_, msk) in enumerate(target_train.items):
        for lab in range(1, msk.n_instances + 1):
            rr, cc = np.nonzero(msk.labels == lab)
            instances.append((i, lab, float(rr.mean()), float(cc.mean())))
    if len(instances) < k:
        raise DataError(f"need {k} instances, dataset has {len(instances)}")
    target_diameter = mean_diameter(target_train)
    side = max(16, int(np.ceil(2.0 * target_diameter)))
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(instances), size=k, replace=False)
    patches = []
    for p in picks:
        img_i, _, cr, cc_ = instances[p]
        img, msk = target_train.items[img_i]
        s = min(side, img.h, img.w)
        r0 = int(np.clip(round(cr) - s // 2, 0, img.h - s))
        c0 = int(np.clip(round(cc_) - s // 2, 0, img.w - s))
        sub_img = Image(img.data[r0 : r0 + s, c0 : c0 + s])
        sub_msk = InstanceMask(relabel(msk.labels[r0 : r0 + s, c0 : c0 + s]))
        patches.append((sub_img, sub_msk))
    return ShotSet(k=k, patches=patches, source_diameter=source_diameter, target_diameter=target_diameter)


def pair_schedule(n_steps: int, k: int, rng) -> np.ndarray:
    """Shot index per step: draws without replacement from a K-pool that is
    reshuffled whenever exhausted."""
    out = np.empty(n_steps, dtype=np.int64)
    filled = 0
    while filled < n_steps:
        pool = rng.permutation(k)
        take = min(k, n_steps - filled)
        out[filled : filled + take] = pool[:take]
        filled += take
    return out


# ---------------------------------------------------------------------------
# Training loops.


def _augment_draw(rng):
    return (
        int(rng.integers(0, 4)),
        bool(rng.random() < 0.5),
        bool(rng.random() < 0.5),
        float(rng.uniform(0.8, 1.2)),
        float(rng.uniform(-0.1, 0.1)),
    )


def _apply_augment(img: np.ndarray, tgt: labelgen.TargetField, draw, intensity=True):
    k, fh, fv, scale, offset = draw
    out_img = labelgen.orient_grid(img, k, fh, fv)
    if intensity:
        out_img = np.clip(out_img * scale + offset, 0.0, 1.0)
    return out_img, labelgen.orient_targets(tgt, k, fh, fv)


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    mining_failures: int = 0
    steps: int = 0


def _prep_items(ds: Dataset):
    """Cache (image array, mask, targets) per item; targets reused when crops are identity."""
    return [(img.data, msk, labelgen.make_targets(msk)) for img, msk in ds.items]


def _crop_sample(img, msk, tgt, patch, rng):
    h, w = img.shape
    size = min(patch, h, w)
    r0 = int(rng.integers(0, h - size + 1))
    c0 = int(rng.integers(0, w - size + 1))
    if size == h and size == w:
        return img, tgt
    sub_mask = InstanceMask(relabel(msk.labels[r0 : r0 + size, c0 : c0 + size]))
    return img[r0 : r0 + size, c0 : c0 + size], labelgen.make_targets(sub_mask)


def pretrain(init: Checkpoint, source: Dataset, cfg: TrainConfig,
             lcfg: LossConfig = None, log=None) -> tuple[Checkpoint, TrainReport]:
    """Epochs of batched L_IS over random (optionally augmented) patch crops."""
    lcfg = lcfg or LossConfig()
    mcfg = net.model_config_from_checkpoint(init)
    params = {k: v.copy() for k, v in init.params.items()}
    state = net.OptimState.init(params, lr=cfg.lr, weight_decay=cfg.wd)
    rng = np.random.default_rng(cfg.seed)
    items = _prep_items(source)
    report = TrainReport()
    tune_allocator()
    with single_thread_blas():
        _pretrain_epochs(params, state, items, cfg, mcfg, lcfg, rng, report, log)
    digest = config_digest({"train": cfg.to_dict(), "model": mcfg.to_dict()})
    ckpt = Checkpoint(params=params, opt=state.to_tensors(), config_digest=digest,
                      epoch=cfg.epochs, meta=dict(init.meta))
    return ckpt, report


def _pretrain_epochs(params, state, items, cfg, mcfg, lcfg, rng, report, log):
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch):
            chunk = order[start : start + cfg.batch]
            samples = []
            for idx in chunk:
                img, msk, tgt = items[idx]
                img_c, tgt_c = _crop_sample(img, msk, tgt, cfg.patch, rng)
                if cfg.augment:
                    img_c, tgt_c = _apply_augment(img_c, tgt_c, _augment_draw(rng))
                samples.append((img_c, tgt_c))
            batch_loss = 0.0
            if len({s[0].shape for s in samples}) == 1:
                out, tape = net.forward_batch(params, np.stack([s[0] for s in samples]), mcfg)
                dZb = np.empty_like(out)
                for j, (_, tgt_c) in enumerate(samples):
                    l, dZb[j] = losses.loss_is(FeatureMap(out[j]), tgt_c, lcfg)
                    batch_loss += l
                grads = net.backward_batch(params, tape, dZb)
            else:  # mixed patch sizes fall back to per-sample passes
                grads = None
                for img_c, tgt_c in samples:
                    Z, tape = net.forward(params, img_c, mcfg)
                    l, dZ = losses.loss_is(Z, tgt_c, lcfg)
                    g = net.backward(params, tape, dZ)
                    batch_loss += l
                    if grads is None:
                        grads = g
                    else:
                        for name in grads:
                            grads[name] += g[name]
            if not np.isfinite(batch_loss):
                raise NumericError(f"training diverged at epoch {epoch}, step {start // cfg.batch}")
            for name in grads:
                grads[name] /= len(chunk)
            net.radam_step(params, grads, state)
            epoch_loss += batch_loss / len(chunk)
            report.steps += 1
        report.epoch_losses.append(epoch_loss / max(1, int(np.ceil(len(order) / cfg.batch))))
        if log:
            log(epoch, report.epoch_losses[-1])


def adapt(pretrained: Checkpoint, source: Dataset, shots: ShotSet, acfg: AdaptConfig,
          seed: int, lcfg: LossConfig = None, wd: float = 1e-5,
          phase1_epochs: int = PHASE_EPOCHS, phase2_epochs: int = PHASE_EPOCHS,
          phase1_lr: float = PHASE1_LR, phase2_lr: float = PHASE2_LR,
          log=None) -> tuple[Checkpoint, TrainReport]:
    """Two-phase K-shot adaptation.

    Phase 1: epochs over the source set in shuffled order, each source image
    paired with a shot drawn without replacement from a reshuffled pool,
    minimizing L_IS(shot) + gamma1 L_CB + gamma2 L_CD.  Phase 2: epochs of
    L_IS on the shots alone at a very low learning rate.  Shots receive
    geometric augmentation only; mining failures skip the step.
    """
    lcfg = lcfg or LossConfig()
    mcfg = net.model_config_from_checkpoint(pretrained)
    params = {k: v.copy() for k, v in pretrained.params.items()}
    rng = np.random.default_rng(seed)
    report = TrainReport()
    shot_items = [(img.data, msk, labelgen.make_targets(msk)) for img, msk in shots.patches]
    src_items = _prep_items(source)
    tune_allocator()

    state = net.OptimState.init(params, lr=phase1_lr, weight_decay=wd)
    n_src = len(src_items)
    shot_seq = pair_schedule(phase1_epochs * n_src, shots.k, rng)
    step_i = 0
    with single_thread_blas():
        for epoch in range(phase1_epochs):
            order = rng.permutation(n_src)
            failures = 0
            epoch_loss, counted = 0.0, 0
            for si in order:
                shot_img, _, shot_tgt = shot_items[shot_seq[step_i]]
                step_i += 1
                draw = _augment_draw(rng)
                aug_img, aug_tgt = _apply_augment(shot_img, shot_tgt, draw, intensity=False)
                src_img, _, src_tgt = src_items[si]
                try:
                    l, grads, _, _ = losses.loss_adapt(
                        params, mcfg, aug_img, aug_tgt, src_img, src_tgt, lcfg, acfg, rng=rng
                    )
                except MiningError:
                    failures += 1
                    report.mining_failures += 1
                    continue
                net.radam_step(params, grads, state)
                epoch_loss += l
                counted += 1
                report.steps += 1
            report.epoch_losses.append(epoch_loss / max(counted, 1))
            if failures > 0.5 * n_src:
                report.warnings.append(
                    f"phase1 epoch {epoch}: mining failed on {failures}/{n_src} steps"
                )
            if log:
                log(epoch, report.epoch_losses[-1])
        state = net.OptimState.init(params, lr=phase2_lr, weight_decay=wd)
        for epoch in range(phase2_epochs):
            for j in rng.permutation(shots.k):
                shot_img, _, shot_tgt = shot_items[j]
                aug_img, aug_tgt = _apply_augment(shot_img, shot_tgt, _augment_draw(rng), intensity=False)
                Z, tape = net.forward(params, aug_img, mcfg)
                l, dZ = losses.loss_is(Z, aug_tgt, lcfg)
                grads = net.backward(params, tape, dZ)
                net.radam_step(params, grads, state)
                report.steps += 1
            if log:
                log(phase1_epochs + epoch, l)
    digest = config_digest({
        "adapt": {"seed": seed, "k": shots.k, "gamma1": acfg.gamma1, "gamma2": acfg.gamma2},
        "base": pretrained.config_digest.hex(),
    })
    ckpt = Checkpoint(params=params, opt=state.to_tensors(), config_digest=digest,
                      epoch=pretrained.epoch + phase1_epochs + phase2_epochs, meta=dict(pretrained.meta))
    return ckpt, report


# ---------------------------------------------------------------------------
# Baseline grid (lower bound / fine-tune / adapted / upper bound, plus ablations).


@dataclass
class ResultRow:
    variant: str
    k: int
    seed: int
    mean_ap: float
    pooled_ap: float
    wall_seconds: float


VARIANT_ADAPT = "ADAPT"
VARIANT_FT = "FT"
VARIANT_LB = "LB"
VARIANT_UB = "UB"
ABLATIONS = ("ADAPT_NOCB", "ADAPT_NOCD", "ADAPT_NOBOTH")


def _ablation_cfg(acfg: AdaptConfig, variant: str) -> AdaptConfig:
    if variant == "ADAPT_NOCB" :
        return replace(acfg, gamma1=0.0)
    if variant == "ADAPT_NOCD":
        return replace(acfg, gamma2=0.0)
    if variant in ("ADAPT_NOBOTH", VARIANT_FT):
        return replace(acfg, gamma1=0.0, gamma2=0.0)
    return acfg


def run_baselines(source_train: Dataset, target_train: Dataset, target_test: Dataset,
                  k_grid, seeds, mcfg: net.ModelConfig, tcfg: TrainConfig,
                  acfg: AdaptConfig, head: HeadConfig, lcfg: LossConfig = None,
                  ablation_k_grid=(), threads: int = 1, progress=None):
    """Full experiment table.  Per seed: pretrain once on source (shared by LB,
    FT and ADAPT), train UB on the target train split, then per K extract
    shots and run FT/ADAPT; ablations run at the K values in ablation_k_grid.
    Target data is rescaled once by the mean-diameter ratio before anything else.

    Returns (rows, checkpoints) where checkpoints maps (variant, k, seed) to the
    trained Checkpoint (LB/UB use k=0).
    """
    lcfg = lcfg or LossConfig()
    src_diam = mean_diameter(source_train)
    tgt_diam = mean_diameter(target_train)
    ratio = src_diam / tgt_diam
    target_train_r = rescale_dataset(target_train, ratio)
    target_test_r = rescale_dataset(target_test, ratio)

    rows: list[ResultRow] = []
    checkpoints: dict = {}

    def note(msg):
        if progress:
            progress(msg)

    def timed_eval(ckpt) -> EvalReport:
        return evaluate_dataset(ckpt.params, mcfg, target_test_r, head, threads=threads)

    for seed in seeds:
        t0 = time.perf_counter()
        init = net.init_params(mcfg, seed=seed)
        pre, _ = pretrain(init, source_train, replace(tcfg, seed=seed), lcfg=lcfg)
        pre_secs = time.perf_counter() - t0
        note(f"seed {seed}: pretrained in {pre_secs:.1f}s")

        rep = timed_eval(pre)
        checkpoints[(VARIANT_LB, 0, seed)] = pre
        for k in k_grid:
            rows.append(ResultRow(VARIANT_LB, k, seed, rep.mean_ap, rep.pooled_ap, pre_secs))

        t0 = time.perf_counter()
        ub, _ = pretrain(net.init_params(mcfg, seed=seed + 10_000), target_train_r,
                         replace(tcfg, seed=seed + 10_000), lcfg=lcfg)
        ub_secs = time.perf_counter() - t0
        rep = timed_eval(ub)
        checkpoints[(VARIANT_UB, 0, seed)] = ub
        for k in k_grid:
            rows.append(ResultRow(VARIANT_UB, k, seed, rep.mean_ap, rep.pooled_ap, ub_secs))
        note(f"seed {seed}: UB trained in {ub_secs:.1f}s (AP {rep.mean_ap:.3f})")

        variants_per_k = {k: [VARIANT_FT, VARIANT_ADAPT] for k in k_grid}
        for k in ablation_k_grid:
            variants_per_k.setdefault(k, [])
            variants_per_k[k] = variants_per_k[k] + list(ABLATIONS)
        for k in sorted(variants_per_k):
            shots = extract_shots(target_train_r, k, seed + 20_000 + 100 * k, src_diam)
            for variant in variants_per_k[k]:
                cfg_v = _ablation_cfg(acfg, variant)
                t0 = time.perf_counter()
                ck, _ = adapt(pre, source_train, shots, cfg_v, seed=seed + 30_000 + 100 * k, lcfg=lcfg)
                secs = time.perf_counter() - t0
                rep = timed_eval(ck)
                rows.append(ResultRow(variant, k, seed, rep.mean_ap, rep.pooled_ap, secs))
                checkpoints[(variant, k, seed)] = ck
                note(f"seed {seed} K={k} {variant}: AP {rep.mean_ap:.3f} in {secs:.1f}s")
    return rows, checkpoints
