"""Segmentation objectives for partially labeled clients.

The supervised objective combines, per labeled organ, a binary cross-entropy
and Dice term on that organ's probability channel. Probability mass of
unlabeled organ channels is merged into the background channel, which is then
pulled toward the merged background ground truth (marginal term) and pushed
away from the labeled foreground (exclusion term, clamped to stay bounded).
The auxiliary term supervises the binary decoder heads attached to the
encoder levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ConfigurationError,
    DimensionError,
    GradTape,
    Tensor,
    accumulate,
    add,
    clamp,
    concat_channels,
    merge_channels,
    scale_add,
    select_channels,
)


class LabelError(DimensionError):
    """Label data violates its contract."""


@dataclass(frozen=True)
class LossConfig:
    lambda_excl: float = 0.1
    lambda_aux: float = 1.0
    clamp_eps: float = 1e-6
    dice_smooth: float = 1e-5


@dataclass
class LabelMap:
    """Per-pixel class ids in {0..M} with the set of organs actually labeled.

    Unlabeled organs are recorded as 0 (background).
    """

    classes: np.ndarray            # [B,H,W] integer class ids
    labeled_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        self.labeled_set = frozenset(int(m) for m in self.labeled_set)
        if self.classes.ndim != 3:
            raise LabelError(f"LabelMap classes must be [B,H,W], got {self.classes.shape}")
        present = set(int(v) for v in np.unique(self.classes))
        bad = present - ({0} | self.labeled_set)
        if bad:
            raise LabelError(f"label ids {sorted(bad)} present but not in labeled set")

    def organ_mask(self, m: int) -> np.ndarray:
        return (self.classes == m).astype(np.float64)

    def foreground_mask(self) -> np.ndarray:
        return (self.classes > 0).astype(np.float64)


@dataclass
class LossReport:
    total: float
    sup_term: float
    marginal_term: float
    exclusion_term: float
    aux_term: float
    lambda_excl: float
    lambda_aux: float


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def cross_entropy_loss(probs: Tensor, onehot, clamp_eps: float = 1e-6,
                       tape: GradTape | None = None) -> Tensor:
    """Mean over pixels of -sum_c y_c * ln(max(p_c, clamp_eps))."""
    if not 0.0 < clamp_eps <= 1e-3:
        raise ConfigurationError("cross_entropy_loss: clamp_eps must be in (0, 1e-3]")
    y = _as_array(onehot)
    p = probs.data
    if p.shape != y.shape:
        raise DimensionError(f"cross_entropy_loss: shape mismatch {p.shape} vs {y.shape}")
    b, _, h, w = p.shape
    n_pix = b * h * w
    pc = np.maximum(p, clamp_eps)
    out = Tensor(-(y * np.log(pc)).sum() / n_pix)

    if tape is not None:
        live = p > clamp_eps

        def backward():
            accumulate(probs, float(out.grad) * (-(y * live / pc) / n_pix))

        tape.record(out, backward)
    return out


def dice_loss(probs: Tensor, onehot, smooth: float = 1e-5,
              tape: GradTape | None = None) -> Tensor:
    """1 - (2*sum(p*y)+smooth)/(sum(p)+sum(y)+smooth), averaged over the
    batch and the channels passed in (callers pass foreground channels)."""
    if smooth <= 0:
        raise ConfigurationError("dice_loss: smooth must be positive")
    y = _as_array(onehot)
    p = probs.data
    if p.shape != y.shape:
        raise DimensionError(f"dice_loss: shape mismatch {p.shape} vs {y.shape}")
    b, c, _, _ = p.shape
    inter = (p * y).sum(axis=(2, 3))
    psum = p.sum(axis=(2, 3))
    ysum = y.sum(axis=(2, 3))
    num = 2.0 * inter + smooth
    den = psum + ysum + smooth
    out = Tensor(1.0 - (num / den).mean())

    if tape is not None:
        def backward():
            ddice = (2.0 * y * den[:, :, None, None] - num[:, :, None, None]) \
                / (den ** 2)[:, :, None, None]
            accumulate(probs, float(out.grad) * (-ddice / (b * c)))

        tape.record(out, backward)
    return out


def _binary_ce_dice(p: Tensor, mask: np.ndarray, cfg: LossConfig,
                    tape: GradTape | None) -> Tensor:
    """CE + Dice of a single-channel probability [B,1,H,W] against a binary
    mask [B,H,W], treating the channel as the foreground of a 2-class pixel."""
    y = mask[:, None]
    pair = concat_channels([p, scale_add(p, -1.0, 1.0, tape)], tape)
    ypair = np.concatenate([y, 1.0 - y], axis=1)
    ce = cross_entropy_loss(pair, ypair, cfg.clamp_eps, tape)
    dc = dice_loss(p, y, cfg.dice_smooth, tape)
    return add(ce, dc, tape)


def supervised_partial_loss(probs: Tensor, labels: LabelMap, cfg: LossConfig,
                            tape: GradTape | None = None):
    """Partial-label objective: per-organ supervision on labeled channels plus
    marginal and (weighted) exclusion terms on the merged background.

    Returns (scalar Tensor, dict of component floats). The scalar equals
    sup + marginal + lambda_excl * exclusion in that composition order.
    """
    b, channels, h, w = probs.shape
    m_total = channels - 1
    if labels.classes.shape != (b, h, w):
        raise LabelError(f"labels shape {labels.classes.shape} does not match probs")
    labeled = sorted(labels.labeled_set)
    if not labeled:
        raise LabelError("labeled set must be non-empty")
    if any(m < 1 or m > m_total for m in labeled):
        raise LabelError(f"labeled organs {labeled} outside 1..{m_total}")

    # per-organ supervised terms, averaged over the labeled organs
    sup = None
    for m in labeled:
        p_m = select_channels(probs, [m], tape)
        term = _binary_ce_dice(p_m, labels.organ_mask(m), cfg, tape)
        sup = term if sup is None else add(sup, term, tape)
    sup = scale_add(sup, 1.0 / len(labeled), 0.0, tape)

    # merged background channel: true background plus all unlabeled organs
    unlabeled = [m for m in range(1, m_total + 1) if m not in labels.labeled_set]
    p_bg = merge_channels(probs, [0] + unlabeled, tape)
    fg = labels.foreground_mask()

    marginal = _binary_ce_dice(p_bg, 1.0 - fg, cfg, tape)

    # exclusion: repel the merged background from labeled foreground; the
    # negated CE is unbounded without the clamp
    p_bg_c = clamp(p_bg, cfg.clamp_eps, 1.0 - cfg.clamp_eps, tape)
    excl = scale_add(_binary_ce_dice(p_bg_c, fg, cfg, tape), -1.0, 0.0, tape)

    total = add(add(sup, marginal, tape),
                scale_add(excl, cfg.lambda_excl, 0.0, tape), tape)
    components = {
        "sup": sup.item(),
        "marginal": marginal.item(),
        "exclusion": excl.item(),
    }
    return total, components


def auxiliary_loss(agd_probs: dict, labels: LabelMap, cfg: LossConfig,
                   tape: GradTape | None = None) -> Tensor:
    """Mean over (organ, level) entries of CE + Dice between the binary head
    output [B,2,H,W] (channel 1 = organ) and the organ's binary mask.

    Entries may exist only for labeled organs.
    """
    if not agd_probs:
        return Tensor(0.0)
    keys = sorted(agd_probs.keys())
    for m, _level in keys:
        if m not in labels.labeled_set:
            raise LabelError(f"auxiliary entry for unlabeled organ {m}")
    total = None
    for key in keys:
        m, _level = key
        p_fg = select_channels(agd_probs[key], [1], tape)
        term = _binary_ce_dice(p_fg, labels.organ_mask(m), cfg, tape)
        total = term if total is None else add(total, term, tape)
    return scale_add(total, 1.0 / len(keys), 0.0, tape)


def training_loss(probs: Tensor, labels: LabelMap, agd_probs: dict | None,
                  cfg: LossConfig, tape: GradTape | None = None):
    """Full objective: supervised partial loss plus weighted auxiliary loss.

    Returns (scalar Tensor, LossReport).
    """
    sup_total, comps = supervised_partial_loss(probs, labels, cfg, tape)
    if agd_probs:
        aux = auxiliary_loss(agd_probs, labels, cfg, tape)
        total = add(sup_total, scale_add(aux, cfg.lambda_aux, 0.0, tape), tape)
        aux_val = aux.item()
    else:
        total = sup_total
        aux_val = 0.0
    report = LossReport(
        total=total.item(),
        sup_term=comps["sup"],
        marginal_term=comps["marginal"],
        exclusion_term=comps["exclusion"],
        aux_term=aux_val,
        lambda_excl=cfg.lambda_excl,
        lambda_aux=cfg.lambda_aux,
    )
    return total, report
