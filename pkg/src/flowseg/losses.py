"""Objective functions: per-pixel instance segmentation with a flow-consistency
(IVP) term, contrastive distance loss with positive/hard-negative mining,
contrastive boundary loss, and the combined K-shot adaptation objective.

Every loss returns its scalar value together with exact gradients w.r.t. the
feature map(s); mining and pair sampling are split into "plan" steps so the
piecewise-constant index choices can be frozen during finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net
from .datamodel import FeatureMap, TargetField
from .errors import ContractError, MiningError, NumericError

GRAD_EPS = 1e-6  # plateau threshold for the predicted-flow normalization
COS_GUARD = 1e-8


@dataclass
class LossConfig:
    nu: float = 0.5
    mu: float = 1.0
    ivp_weight: float = 1.0

    def __post_init__(self):
        if min(self.nu, self.mu, self.ivp_weight) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class AdaptConfig:
    tau: float = 0.1
    margin: float = 10.0
    n_negatives: int = 20
    gamma1: float = 0.05
    gamma2: float = 0.05
    sigma_rbf: float = 2.0
    delta: float = 0.5
    lam: float = 1.0
    pixels_per_pair: int = 256
    pairs_per_class: int = 512
    detach_source: bool = False
    mine_on_labels: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.margin <= 0 or self.sigma_rbf <= 0:
            raise ContractError("tau, margin and sigma_rbf must be positive")
        if self.n_negatives < 1:
            raise ContractError("need at least one negative slot")
        if not 0 < self.delta < 1:
            raise ContractError("delta must lie in (0, 1)")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# Instance segmentation loss (per-pixel squared errors + boundary BCE + IVP).


def _grad_central(phi):
    """Central differences (one-sided at edges, zero on size-1 axes) -> (h, w, 2) as (gx, gy)."""
    h, w = phi.shape
    gx = np.zeros_like(phi)
    gy = np.zeros_like(phi)
    if w >= 2:
        gx[:, 1:-1] = (phi[:, 2:] - phi[:, :-2]) / 2.0
        gx[:, 0] = phi[:, 1] - phi[:, 0]
        gx[:, -1] = phi[:, -1] - phi[:, -2]
    if h >= 2:
        gy[1:-1, :] = (phi[2:, :] - phi[:-2, :]) / 2.0
        gy[0, :] = phi[1, :] - phi[0, :]
        gy[-1, :] = phi[-1, :] - phi[-2, :]
    return np.stack([gx, gy], axis=-1)


def _grad_central_T(dg):
    """Adjoint of _grad_central: scatter cotangents back onto the phi grid."""
    h, w = dg.shape[:2]
    dgx, dgy = dg[..., 0], dg[..., 1]
    dphi = np.zeros((h, w), dtype=dg.dtype)
    if w >= 2:
        dphi[:, 2:] += dgx[:, 1:-1] / 2.0
        dphi[:, :-2] -= dgx[:, 1:-1] / 2.0
        dphi[:, 1] += dgx[:, 0]
        dphi[:, 0] -= dgx[:, 0]
        dphi[:, -1] += dgx[:, -1]
        dphi[:, -2] -= dgx[:, -1]
    if h >= 2:
        dphi[2:, :] += dgy[1:-1, :] / 2.0
        dphi[:-2, :] -= dgy[1:-1, :] / 2.0
        dphi[1, :] += dgy[0, :]
        dphi[0, :] -= dgy[0, :]
        dphi[-1, :] += dgy[-1, :]
        dphi[-2, :] -= dgy[-1, :]
    return dphi


def loss_ivp(Z: FeatureMap, t: TargetField):
    """Mean over GT cell pixels of ||u - grad(phi)/max(||grad phi||, eps)||^2.

    Ties the predicted flow to the normalized gradient of the predicted
    distance field (their defining relation); zero when no cell pixels exist.
    """
    dt = Z.arr.dtype
    cell = t.d > 0
    m = int(cell.sum())
    dZ = np.zeros_like(Z.arr)
    if m == 0:
        return 0.0, dZ
    g = _grad_central(Z.phi)
    r = np.sqrt((g**2).sum(axis=-1))
    denom = np.maximum(r, GRAD_EPS)
    n = g / denom[..., None]
    diff = (Z.u - n) * cell[..., None].astype(dt)
    loss = float((diff**2).sum()) / m
    dZ[..., 1:3] = 2.0 * diff / m
    dn = -2.0 * diff / m
    # pull back through the normalization: two regimes of max(r, eps)
    big = r > GRAD_EPS
    dn_dot_n = (dn * n).sum(axis=-1)
    dg = np.where(
        big[..., None],
        (dn - dn_dot_n[..., None] * n) / denom[..., None],
        dn / GRAD_EPS,
    )
    dZ[..., 0] = _grad_central_T(dg)
    return loss, dZ


def loss_is(Z: FeatureMap, t: TargetField, cfg: LossConfig):
    """Per-pixel loss (phi - d)^2 + nu ||u - g||^2 + mu H(b, sigmoid(z)) averaged
    over pixels, plus ivp_weight * loss_ivp.  Returns (scalar, dLoss/dZ).

    Averaging (rather than the raw sum) keeps the gradient scale independent of
    patch size, which is what makes the published lr/weight-decay/gamma values
    usable; per-pixel examples are unaffected.
    """
    if Z.arr.shape[:2] != t.shape:
        raise ContractError(f"feature map {Z.arr.shape[:2]} vs targets {t.shape}")
    dt = Z.arr.dtype
    d = t.d.astype(dt)
    g = t.flow().astype(dt)
    b = t.b.astype(dt)
    n_px = d.size
    e_phi = Z.phi - d
    e_u = Z.u - g
    # exact logit BCE: b*softplus(-z) + (1-b)*softplus(z); stable for any z
    bce = b * _softplus(-Z.z) + (1.0 - b) * _softplus(Z.z)
    loss = float((e_phi**2).sum() + cfg.nu * (e_u**2).sum() + cfg.mu * bce.sum()) / n_px
    dZ = np.zeros_like(Z.arr)
    dZ[..., 0] = 2.0 * e_phi / n_px
    dZ[..., 1:3] = 2.0 * cfg.nu * e_u / n_px
    dZ[..., 3] = cfg.mu * (_sigmoid(Z.z) - b) / n_px
    if cfg.ivp_weight > 0:
        ivp, divp = loss_ivp(Z, t)
        loss += cfg.ivp_weight * ivp
        dZ += cfg.ivp_weight * divp
    if not np.isfinite(loss):
        raise NumericError("instance segmentation loss is non-finite")
    return loss, dZ


# ---------------------------------------------------------------------------
# Similarity kernel and mining.


def _sim_matrix(phi_a, u_a, phi_b, u_b, sigma):
    """Pairwise similarity: RBF over distance values times cosine over flows."""
    rbf = np.exp(-((phi_a[:, None] - phi_b[None, :]) ** 2) / (2.0 * sigma))
    na = np.linalg.norm(u_a, axis=1)
    nb = np.linalg.norm(u_b, axis=1)
    cos = (u_a @ u_b.T) / np.maximum(na[:, None] * nb[None, :], COS_GUARD)
    return rbf * cos


def similarity(a, b, sigma_rbf: float) -> float:
    """s((phi,u),(psi,v)) = exp(-(phi-psi)^2 / (2 sigma)) * cos(u, v); in [-1, 1]."""
    phi_a, u_a = a
    phi_b, u_b = b
    out = _sim_matrix(
        np.atleast_1d(np.float64(phi_a)), np.asarray(u_a, np.float64)[None, :],
        np.atleast_1d(np.float64(phi_b)), np.asarray(u_b, np.float64)[None, :],
        sigma_rbf,
    )
    return float(out[0, 0])


def _interior(t: TargetField) -> np.ndarray:
    """Flat indices of cell-interior pixels (d > 0, b = 0)."""
    return np.flatnonzero((t.d > 0) & (t.b == 0))


def _source_mining_feats(Zs: FeatureMap, ts: TargetField, cand, mine_on_labels):
    if mine_on_labels:
        return ts.d.ravel()[cand].astype(np.float64), ts.flow().reshape(-1, 2)[cand].astype(np.float64)
    return Zs.phi.ravel()[cand].astype(np.float64), Zs.u.reshape(-1, 2)[cand].astype(np.float64)


def mine_positive(target_label, source_Z: FeatureMap, source_interior: np.ndarray,
                  sigma_rbf: float, mine_on_labels: bool = False, source_targets: TargetField = None) -> int:
    """Flat index of the source interior pixel whose (predicted) features best
    match the target label (d, gx, gy); ties break to the smallest index."""
    cand = np.flatnonzero(np.asarray(source_interior).ravel())
    if cand.size == 0:
        raise MiningError("no cell-interior source pixels to mine from")
    d, gx, gy = target_label
    phi_c, u_c = _source_mining_feats(source_Z, source_targets, cand, mine_on_labels)
    sims = _sim_matrix(np.array([float(d)]), np.array([[float(gx), float(gy)]]), phi_c, u_c, sigma_rbf)[0]
    return int(cand[int(np.argmax(sims))])


def mine_negatives(positive_feat, source_Z: FeatureMap, source_interior: np.ndarray,
                   delta: float, n: int, sigma_rbf: float) -> np.ndarray:
    """Up to n hardest negatives: interior pixels with s(positive, cand) < delta,
    ranked by descending similarity (closest to the threshold first)."""
    cand = np.flatnonzero(np.asarray(source_interior).ravel())
    if cand.size == 0:
        return np.empty(0, dtype=np.int64)
    phi_p, u_p = positive_feat
    phi_c = source_Z.phi.ravel()[cand].astype(np.float64)
    u_c = source_Z.u.reshape(-1, 2)[cand].astype(np.float64)
    sims = _sim_matrix(np.array([float(phi_p)]), np.asarray(u_p, np.float64)[None, :], phi_c, u_c, sigma_rbf)[0]
    order = np.argsort(-sims, kind="stable")
    picked = [cand[i] for i in order if sims[i] < delta][:n]
    return np.asarray(picked, dtype=np.int64)


# ---------------------------------------------------------------------------
# Contrastive distance loss (softmax over positive vs mined hard negatives).


@dataclass
class CDPlan:
    t_pix: np.ndarray  # (B,) flat target pixel indices
    pos_pix: np.ndarray  # (B,) flat source pixel indices
    neg_pix: np.ndarray  # (B, n) flat source pixel indices, -1 padded
    neg_count: np.ndarray  # (B,)

    @classmethod
    def empty(cls, n_negatives: int) -> "CDPlan":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), np.empty((0, n_negatives), dtype=np.int64), z.copy())


def plan_cd(tt: TargetField, Zs: FeatureMap, ts: TargetField, acfg: AdaptConfig, rng) -> CDPlan:
    """Sample target interior pixels and mine a positive plus hard negatives for each."""
    b_all = _interior(tt)
    if b_all.size > acfg.pixels_per_pair:
        b_all = rng.choice(b_all, size=acfg.pixels_per_pair, replace=False)
    cand = _interior(ts)
    if cand.size == 0:
        raise MiningError("source image has no cell-interior pixels")
    if b_all.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return CDPlan(empty, empty, empty.reshape(0, acfg.n_negatives), empty)
    phi_c, u_c = _source_mining_feats(Zs, ts, cand, acfg.mine_on_labels)
    d_t = tt.d.ravel()[b_all].astype(np.float64)
    g_t = tt.flow().reshape(-1, 2)[b_all].astype(np.float64)
    sims = _sim_matrix(d_t, g_t, phi_c, u_c, acfg.sigma_rbf)
    pos_local = np.argmax(sims, axis=1)  # first max = smallest index on ties
    # negatives depend only on the positive; compute once per distinct positive
    phi_mine = Zs.phi.ravel()[cand].astype(np.float64)
    u_mine = Zs.u.reshape(-1, 2)[cand].astype(np.float64)
    neg = np.full((b_all.size, acfg.n_negatives), -1, dtype=np.int64)
    counts = np.zeros(b_all.size, dtype=np.int64)
    for loc in np.unique(pos_local):
        row = _sim_matrix(phi_mine[loc : loc + 1], u_mine[loc : loc + 1], phi_mine, u_mine, acfg.sigma_rbf)[0]
        order = np.argsort(-row, kind="stable")
        sel = cand[[i for i in order if row[i] < acfg.delta][: acfg.n_negatives]]
        rows = np.flatnonzero(pos_local == loc)
        neg[rows, : sel.size] = sel
        counts[rows] = sel.size
    return CDPlan(b_all.astype(np.int64), cand[pos_local].astype(np.int64), neg, counts)


def _sim_pair(phi_a, u_a, phi_b, u_b, sigma):
    """Elementwise similarity over paired feature arrays, plus its gradients."""
    dphi = phi_a - phi_b
    rbf = np.exp(-(dphi**2) / (2.0 * sigma))
    na = np.linalg.norm(u_a, axis=-1)
    nb = np.linalg.norm(u_b, axis=-1)
    prod = na * nb
    guarded = prod <= COS_GUARD
    p = np.where(guarded, COS_GUARD, prod)
    dot = (u_a * u_b).sum(axis=-1)
    cos = dot / p
    s = rbf * cos
    ds_dphi_a = rbf * cos * (-dphi / sigma)
    na_safe = np.where(na > 0, na, 1.0)
    nb_safe = np.where(nb > 0, nb, 1.0)
    # when the guard clamps, p is constant and only the dot term differentiates
    dcos_dua = np.where(
        guarded[..., None], u_b / COS_GUARD, u_b / p[..., None] - cos[..., None] * u_a / (na_safe**2)[..., None]
    )
    dcos_dub = np.where(
        guarded[..., None], u_a / COS_GUARD, u_a / p[..., None] - cos[..., None] * u_b / (nb_safe**2)[..., None]
    )
    return s, ds_dphi_a, rbf[..., None] * dcos_dua, -ds_dphi_a, rbf[..., None] * dcos_dub


def loss_cd(Zt: FeatureMap, Zs: FeatureMap, plan: CDPlan, acfg: AdaptConfig):
    """Eq.-2-style InfoNCE over (phi, u) features; gradients flow into both maps."""
    nB = plan.t_pix.size
    dZt = np.zeros_like(Zt.arr)
    dZs = np.zeros_like(Zs.arr)
    if nB == 0:
        return 0.0, dZt, dZs
    dt = Zt.arr.dtype
    phi_t = Zt.phi.ravel()[plan.t_pix].astype(np.float64)
    u_t = Zt.u.reshape(-1, 2)[plan.t_pix].astype(np.float64)
    phi_s_all = Zs.phi.ravel().astype(np.float64)
    u_s_all = Zs.u.reshape(-1, 2).astype(np.float64)

    s_p, dsp_phit, dsp_ut, dsp_phis, dsp_us = _sim_pair(
        phi_t, u_t, phi_s_all[plan.pos_pix], u_s_all[plan.pos_pix], acfg.sigma_rbf
    )
    valid = plan.neg_pix >= 0
    neg_safe = np.where(valid, plan.neg_pix, 0)
    s_n, dsn_phit, dsn_ut, dsn_phis, dsn_us = _sim_pair(
        phi_t[:, None], u_t[:, None, :], phi_s_all[neg_safe], u_s_all[neg_safe], acfg.sigma_rbf
    )
    x = np.where(valid, (s_n - s_p[:, None]) / acfg.tau, -np.inf)
    ex = np.exp(x)
    denom = 1.0 + ex.sum(axis=1)
    loss = float(np.log(denom).mean())
    pi_n = ex / denom[:, None]  # dl/ds_n * tau
    dl_dsn = pi_n / (acfg.tau * nB)
    dl_dsp = -pi_n.sum(axis=1) / (acfg.tau * nB)

    flat_t = dZt.reshape(-1, 4)
    flat_s = dZs.reshape(-1, 4)
    np.add.at(flat_t[:, 0], plan.t_pix, (dl_dsp * dsp_phit).astype(dt))
    np.add.at(flat_t[:, 1:3], plan.t_pix, (dl_dsp[:, None] * dsp_ut).astype(dt))
    np.add.at(flat_s[:, 0], plan.pos_pix, (dl_dsp * dsp_phis).astype(dt))
    np.add.at(flat_s[:, 1:3], plan.pos_pix, (dl_dsp[:, None] * dsp_us).astype(dt))
    vt, vn = np.nonzero(valid)
    np.add.at(flat_t[:, 0], plan.t_pix[vt], (dl_dsn * dsn_phit)[vt, vn].astype(dt))
    np.add.at(flat_t[:, 1:3], plan.t_pix[vt], (dl_dsn[..., None] * dsn_ut)[vt, vn].astype(dt))
    np.add.at(flat_s[:, 0], plan.neg_pix[vt, vn], (dl_dsn * dsn_phis)[vt, vn].astype(dt))
    np.add.at(flat_s[:, 1:3], plan.neg_pix[vt, vn], (dl_dsn[..., None] * dsn_us)[vt, vn].astype(dt))
    return loss, dZt, dZs


# ---------------------------------------------------------------------------
# Contrastive boundary loss over sampled (target, source) logit pairs.


@dataclass
class CBPlan:
    pos_t: np.ndarray
    pos_s: np.ndarray
    neg_t: np.ndarray
    neg_s: np.ndarray

    @classmethod
    def empty(cls) -> "CBPlan":
        z = np.empty(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())


def _stratified(rng, n_total, primary_pool, secondary_pool, frac=0.25):
    """Counts (n_primary, n_secondary): primary gets >= frac when both pools exist."""
    have_p = primary_pool[0].size > 0 and primary_pool[1].size > 0
    have_s = secondary_pool[0].size > 0 and secondary_pool[1].size > 0
    if have_p and have_s:
        n_p = int(np.ceil(frac * n_total))
        return n_p, n_total - n_p
    if have_p:
        return n_total, 0
    if have_s:
        return 0, n_total
    return 0, 0


def plan_cb(tb: np.ndarray, sb: np.ndarray, acfg: AdaptConfig, rng) -> CBPlan:
    """Sample positive (same boundary label) and negative (different label) pairs,
    stratified so boundary-pixel anchors get >= 25% of each class when available."""
    tbf, sbf = tb.ravel(), sb.ravel()
    t1, t0 = np.flatnonzero(tbf == 1), np.flatnonzero(tbf == 0)
    s1, s0 = np.flatnonzero(sbf == 1), np.flatnonzero(sbf == 0)
    npc = acfg.pairs_per_class

    def draw(pool, n):
        return rng.choice(pool, size=n, replace=True) if n else np.empty(0, dtype=np.int64)

    n_bd, n_non = _stratified(rng, npc, (t1, s1), (t0, s0))
    pos_t = np.concatenate([draw(t1, n_bd), draw(t0, n_non)])
    pos_s = np.concatenate([draw(s1, n_bd), draw(s0, n_non)])
    n_bd, n_non = _stratified(rng, npc, (t1, s0), (t0, s1))
    neg_t = np.concatenate([draw(t1, n_bd), draw(t0, n_non)])
    neg_s = np.concatenate([draw(s0, n_bd), draw(s1, n_non)])
    return CBPlan(pos_t.astype(np.int64), pos_s.astype(np.int64), neg_t.astype(np.int64), neg_s.astype(np.int64))


def loss_cb(Zt: FeatureMap, Zs: FeatureMap, plan: CBPlan, margin: float, lam: float):
    """(1/|P|) sum 1/2 (zt - zs)^2 + lam (1/|N|) sum 1/2 max(0, m - |zt - zs|)^2."""
    dZt = np.zeros_like(Zt.arr)
    dZs = np.zeros_like(Zs.arr)
    zt = Zt.z.ravel().astype(np.float64)
    zs = Zs.z.ravel().astype(np.float64)
    dt = Zt.arr.dtype
    loss = 0.0
    ft = dZt.reshape(-1, 4)
    fs = dZs.reshape(-1, 4)
    if plan.pos_t.size:
        diff = zt[plan.pos_t] - zs[plan.pos_s]
        loss += 0.5 * float((diff**2).mean())
        coef = diff / plan.pos_t.size
        np.add.at(ft[:, 3], plan.pos_t, coef.astype(dt))
        np.add.at(fs[:, 3], plan.pos_s, (-coef).astype(dt))
    if plan.neg_t.size:
        diff = zt[plan.neg_t] - zs[plan.neg_s]
        hinge = np.maximum(margin - np.abs(diff), 0.0)
        loss += 0.5 * lam * float((hinge**2).mean())
        coef = lam * (-hinge * np.sign(diff)) / plan.neg_t.size
        np.add.at(ft[:, 3], plan.neg_t, coef.astype(dt))
        np.add.at(fs[:, 3], plan.neg_s, (-coef).astype(dt))
    return loss, dZt, dZs


# ---------------------------------------------------------------------------
# Combined adaptation objective for one (target shot, source image) pair.


@dataclass
class AdaptPlan:
    cd: CDPlan
    cb: CBPlan


def loss_adapt(params: dict, mcfg, shot_image, shot_targets: TargetField,
               src_image, src_targets: TargetField, lcfg: LossConfig, acfg: AdaptConfig,
               rng=None, plans: AdaptPlan = None):
    """L_IS(shot) + gamma1 * L_CB(pair) + gamma2 * L_CD(pair) with parameter
    gradients through both forward passes.  Returns (loss, grads, plans, parts).

    Raises MiningError when the source image offers no interior pixels; the
    caller skips the pair.
    """
    Zt, tape_t = net.forward(params, shot_image, mcfg)
    is_loss, dZt = loss_is(Zt, shot_targets, lcfg)
    parts = {"is": is_loss, "cb": 0.0, "cd": 0.0}
    total = is_loss
    need_source = acfg.gamma1 > 0 or acfg.gamma2 > 0
    dZs = None
    Zs = tape_s = None
    if need_source:
        Zs, tape_s = net.forward(params, src_image, mcfg)
        dZs = np.zeros_like(Zs.arr)
        if plans is None:
            if rng is None:
                raise ContractError("loss_adapt needs an rng when no plans are given")
            cd_plan = (
                plan_cd(shot_targets, Zs, src_targets, acfg, rng)
                if acfg.gamma2 > 0
                else CDPlan.empty(acfg.n_negatives)
            )
            cb_plan = plan_cb(shot_targets.b, src_targets.b, acfg, rng) if acfg.gamma1 > 0 else CBPlan.empty()
            plans = AdaptPlan(cd=cd_plan, cb=cb_plan)
        if acfg.gamma1 > 0:
            cb, dzt, dzs = loss_cb(Zt, Zs, plans.cb, acfg.margin, acfg.lam)
            total += acfg.gamma1 * cb
            parts["cb"] = cb
            dZt += acfg.gamma1 * dzt
            dZs += acfg.gamma1 * dzs
        if acfg.gamma2 > 0:
            cd, dzt, dzs = loss_cd(Zt, Zs, plans.cd, acfg)
            total += acfg.gamma2 * cd
            parts["cd"] = cd
            dZt += acfg.gamma2 * dzt
            dZs += acfg.gamma2 * dzs
    grads = net.backward(params, tape_t, dZt)
    if need_source and not acfg.detach_source:
        for name, g in net.backward(params, tape_s, dZs).items():
            grads[name] += g
    return total, grads, plans, parts
