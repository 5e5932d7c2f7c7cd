"""Training objectives: classification, distillation, margin ranking and the
multi-task binary aggregation, plus label smoothing and mixup.

All losses return scalar tensors and are differentiable through the live
model only; snapshot outputs enter as plain arrays and never receive
gradients. Probabilities are clamped to [1e-12, 1 - 1e-12] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import PROB_FLOOR, Array, Tensor
from .errors import ConfigError, ContractError, ProtocolError
from .model import BC, FAKE, MC, MT, Model

SUMLOG = "sumlog"
SUMLOGIT = "sumlogit"
SUMFEAT = "sumfeat"
MAX = "max"
AGG_RULES = (SUMLOG, SUMLOGIT, SUMFEAT, MAX)


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights for the composite session objective."""

    gamma_d: float = 0.0
    gamma_m: float = 0.0
    lam: float = 0.3
    T: float = 1.0
    tau: float = 0.2
    J: int = 2

    def __post_init__(self):
        if self.gamma_d < 0 or self.gamma_m < 0:
            raise ConfigError("gamma weights must be non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.T <= 0:
            raise ConfigError("temperature must be positive")
        if self.tau < 0 or self.J < 0:
            raise ConfigError("tau and J must be non-negative")


@dataclass
class Batch:
    """Aligned sample rows: raw inputs first, then latent payload rows."""

    x: Array | None = None
    latents: Array | None = None
    classes: Array | None = None
    polarity: Array | None = None
    target_rows: Array | None = None

    def __len__(self) -> int:
        n = 0 if self.x is None else self.x.shape[0]
        m = 0 if self.latents is None else self.latents.shape[0]
        return n + m


def _clamped_log(p: Tensor) -> Tensor:
    return dc.log(dc.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def _np_clamped_log(p: Array) -> Array:
    return np.log(np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def _mask_matrix(mask: Array, n: int) -> Tensor:
    return dc.constant(np.broadcast_to(mask.astype(np.float64), (n, mask.size)).copy())


def multiclass_ce(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of the target class.

    ``targets`` may be integer class indices or soft label rows.
    """
    n, k = logits.shape
    logp = _clamped_log(dc.softmax(logits, axis=1))
    targets = np.asarray(targets)
    if targets.ndim == 2:
        if targets.shape != (n, k):
            raise ContractError(f"soft targets shape {targets.shape} != {(n, k)}")
        picked = dc.tsum(dc.mul(dc.constant(targets.astype(np.float64)), logp), axis=1)
    else:
        targets = targets.astype(np.intp)
        if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
            raise ContractError("target class out of range")
        picked = dc.gather_pairs(logp, np.arange(n), targets)
    return dc.scale(dc.tmean(picked), -1.0)


def binary_ce(logit: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid outputs against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("binary targets must be 0 or 1")
    z = dc.take_cols(logit, np.array([0])) if logit.data.ndim == 2 else logit
    z = dc.tsum(z, axis=1) if z.data.ndim == 2 else z
    if z.shape != y.shape:
        raise ContractError(f"logit shape {z.shape} does not match targets {y.shape}")
    s = dc.clamp(dc.sigmoid(z), PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = dc.mul(dc.constant(y), dc.log(s))
    neg = dc.mul(dc.constant(1.0 - y), dc.log(dc.sub(dc.constant(np.ones_like(y)), s)))
    return dc.scale(dc.tmean(dc.add(pos, neg)), -1.0)


def kd_kl(old_logits: Array, new_logits: Tensor, T: float, class_mask) -> Tensor:
    """Temperature-scaled KL from the frozen old outputs to the live ones.

    The old distribution is the target and receives no gradient. A
    single-column mask compares the sigmoid output as a 2-point distribution.
    """
    mask = np.asarray(class_mask)
    cols = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.intp)
    if cols.size == 0:
        raise ContractError("distillation mask selects no classes")
    old = np.atleast_2d(np.asarray(old_logits, dtype=np.float64))[:, cols]
    t = float(T)

    if cols.size == 1:
        p1 = np.clip(dc.np_sigmoid(old[:, 0] / t), PROB_FLOOR, 1.0 - PROB_FLOOR)
        p0 = 1.0 - p1
        z = dc.scale(dc.tsum(dc.take_cols(new_logits, cols), axis=1), 1.0 / t)
        q1 = dc.clamp(dc.sigmoid(z), PROB_FLOOR, 1.0 - PROB_FLOOR)
        q0 = dc.sub(dc.constant(np.ones_like(p1)), q1)
        rows = dc.add(
            dc.mul(dc.constant(p1), dc.sub(dc.constant(np.log(p1)), dc.log(q1))),
            dc.mul(dc.constant(p0), dc.sub(dc.constant(np.log(p0)), dc.log(q0))),
        )
        return dc.scale(dc.tmean(rows), t * t)

    p = np.clip(dc.np_softmax(old / t, axis=1), PROB_FLOOR, 1.0 - PROB_FLOOR)
    logq = _clamped_log(dc.softmax(dc.scale(dc.take_cols(new_logits, cols), 1.0 / t), axis=1))
    rows = dc.tsum(dc.mul(dc.constant(p), dc.sub(dc.constant(np.log(p)), logq)), axis=1)
    return dc.scale(dc.tmean(rows), t * t)


def kd_feature(old_feats: Array, new_feats: Tensor) -> Tensor:
    """Mean cosine distance between frozen and live feature rows; range [0, 2]."""
    old = dc.constant(np.asarray(old_feats, dtype=np.float64))
    cos = dc.cosine_pairs(old, new_feats)
    return dc.tmean(dc.add_scalar(dc.neg(cos), 1.0))


def margin_ranking(features: Tensor, embeddings: Tensor, targets, tau: float, J: int) -> Tensor:
    """Hinge on the gap between the target-class cosine and the J closest rivals."""
    k = embeddings.shape[0]
    if J > k - 1:
        raise ContractError(f"J={J} exceeds the {k - 1} available rival classes")
    n = features.shape[0]
    if J == 0 or n == 0:
        return dc.constant(0.0)
    targets = np.asarray(targets, dtype=np.intp)
    sims = dc.cosine_matrix(features, embeddings)

    sel_rows = np.repeat(np.arange(n), J)
    sel_cols = np.empty(n * J, dtype=np.intp)
    for i in range(n):
        order = np.argsort(-sims.data[i], kind="stable")
        rivals = order[order != targets[i]][:J]
        sel_cols[i * J : (i + 1) * J] = rivals

    rival_sims = dc.gather_pairs(sims, sel_rows, sel_cols)
    target_sims = dc.gather_pairs(sims, sel_rows, np.repeat(targets, J))
    hinge = dc.relu(dc.add_scalar(dc.sub(rival_sims, target_sims), float(tau)))
    return dc.scale(dc.tsum(hinge), 1.0 / n)


def _fake_mask_of(registry) -> Array:
    if hasattr(registry, "fake_mask"):
        return registry.fake_mask()
    return np.asarray(registry) == FAKE


def aggregate_batch(logits: Tensor, activations: Tensor, fake_mask: Array, rule: str):
    """Per-row fake and real log scores (d_F, d_R) under the chosen rule."""
    if rule not in AGG_RULES:
        raise ConfigError(f"unknown aggregation rule {rule!r}")
    mask = np.asarray(fake_mask, dtype=bool)
    if not mask.any() or mask.all():
        raise ContractError("aggregation needs at least one fake and one real class")
    n = logits.shape[0]
    fm = _mask_matrix(mask, n)
    rm = _mask_matrix(~mask, n)

    if rule == SUMLOG:
        logg = _clamped_log(activations)
        return dc.tsum(dc.mul(logg, fm), axis=1), dc.tsum(dc.mul(logg, rm), axis=1)
    if rule == SUMLOGIT:
        d_f = _clamped_log(dc.tsum(dc.mul(activations, fm), axis=1))
        d_r = _clamped_log(dc.tsum(dc.mul(activations, rm), axis=1))
        return d_f, d_r
    if rule == MAX:
        d_f = _clamped_log(dc.tmax(dc.mul(activations, fm), axis=1))
        d_r = _clamped_log(dc.tmax(dc.mul(activations, rm), axis=1))
        return d_f, d_r
    # SUMFEAT: polarity-summed logits through a two-way softmax, log taken
    s_f = dc.tsum(dc.mul(logits, fm), axis=1)
    s_r = dc.tsum(dc.mul(logits, rm), axis=1)
    d_f = dc.neg(dc.softplus(dc.sub(s_r, s_f)))
    d_r = dc.neg(dc.softplus(dc.sub(s_f, s_r)))
    return d_f, d_r


def aggregate(logits_row, activations_row, registry, rule: str) -> tuple[float, float]:
    """Single-row aggregation returning plain (d_F, d_R) values."""
    logits = dc.constant(np.atleast_2d(np.asarray(logits_row, dtype=np.float64)))
    acts = dc.constant(np.atleast_2d(np.asarray(activations_row, dtype=np.float64)))
    d_f, d_r = aggregate_batch(logits, acts, _fake_mask_of(registry), rule)
    return float(d_f.data[0]), float(d_r.data[0])


def mt_class_loss(logits: Tensor, activations: Tensor, targets, registry, lam: float, rule: str) -> Tensor:
    """Convex mix of the multi-class loss and the aggregated binary one.

    At lam = 0 this returns the multi-class cross-entropy itself, so the
    optimisation path is identical to the plain multi-class system.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if lam == 0.0:
        return multiclass_ce(logits, targets)

    mask = _fake_mask_of(registry)
    targets_arr = np.asarray(targets)
    if targets_arr.ndim == 2:
        w_fake = targets_arr[:, mask].sum(axis=1)
    else:
        w_fake = mask[targets_arr.astype(np.intp)].astype(np.float64)
    d_f, d_r = aggregate_batch(logits, activations, mask, rule)
    picked = dc.add(
        dc.mul(d_f, dc.constant(w_fake)),
        dc.mul(d_r, dc.constant(1.0 - w_fake)),
    )
    binary_term = dc.scale(dc.tmean(picked), -1.0)
    if lam == 1.0:
        return binary_term
    ce = multiclass_ce(logits, targets)
    return dc.add(dc.scale(ce, 1.0 - lam), dc.scale(binary_term, lam))


def label_smooth(targets, k: int, eps: float) -> Array:
    """One-hot rows pulled toward uniform: (1 - eps) * onehot + eps / k."""
    if not 0.0 <= eps < 1.0:
        raise ContractError("smoothing epsilon must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.intp)
    rows = np.full((targets.size, k), eps / k, dtype=np.float64)
    rows[np.arange(targets.size), targets] += 1.0 - eps
    return rows


def mix_pairs(x_a: Array, y_a: Array, x_b: Array, y_b: Array, lam_mix: float):
    """Convex combination of two aligned batches, inputs and label rows alike."""
    if x_a.shape != x_b.shape or y_a.shape != y_b.shape:
        raise ContractError("mixup requires equal batch shapes")
    x = lam_mix * x_a + (1.0 - lam_mix) * x_b
    y = lam_mix * y_a + (1.0 - lam_mix) * y_b
    return x, y


def mixup(batch_a, batch_b, alpha: float, rng: np.random.Generator):
    """Mix two (inputs, label rows) batches; the coefficient is Beta(alpha, alpha)."""
    x_a, y_a = batch_a
    x_b, y_b = batch_b
    lam_mix = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    x, y = mix_pairs(np.asarray(x_a, float), np.asarray(y_a, float), np.asarray(x_b, float), np.asarray(y_b, float), lam_mix)
    return (x, y), lam_mix


# ---------------------------------------------------------------------------
# composite session objective


def _forward_joint(model: Model, raw: Array | None, latents: Array | None):
    parts = []
    if raw is not None and raw.shape[0]:
        parts.append(model.extractor.forward(raw))
    if latents is not None and latents.shape[0]:
        parts.append(model.extractor.forward_from_latent(latents))
    if not parts:
        raise ContractError("no rows to train on")
    features = parts[0] if len(parts) == 1 else dc.concat_rows(parts[0], parts[1])
    return features, model.head.logits(features)


def _np_forward_joint(snapshot: Model, raw: Array | None, latents: Array | None):
    parts_f, parts_z = [], []
    if raw is not None and raw.shape[0]:
        f, z = snapshot.forward(raw)
        parts_f.append(f.data)
        parts_z.append(z.data)
    if latents is not None and latents.shape[0]:
        f, z = snapshot.forward_from_latent(latents)
        parts_f.append(f.data)
        parts_z.append(z.data)
    return np.concatenate(parts_f, axis=0), np.concatenate(parts_z, axis=0)


def _stack(*arrays):
    arrays = [a for a in arrays if a is not None and len(a)]
    if not arrays:
        return None
    return np.concatenate(arrays, axis=0)


def total_loss(
    system: str,
    batch_new: Batch,
    batch_exemplar: Batch | None,
    model: Model,
    snapshot: Model | None,
    weights: LossWeights,
    rule: str | None = None,
    distill_form: str = "logit",
) -> Tensor:
    """Classification over new plus replayed rows, distillation and margin
    ranking over the replayed rows, weighted by gamma_d and gamma_m."""
    if (weights.gamma_d > 0 or weights.gamma_m > 0) and snapshot is None:
        raise ProtocolError("distillation or margin terms need a model snapshot")

    ex = batch_exemplar if batch_exemplar is not None and len(batch_exemplar) else None
    raw = _stack(batch_new.x, ex.x if ex else None)
    latents = ex.latents if ex else None
    features, logits = _forward_joint(model, raw, latents)

    n_new = 0 if batch_new.x is None else batch_new.x.shape[0]
    n_total = logits.shape[0]
    ex_slice = np.arange(n_new, n_total)

    polarity = _stack(batch_new.polarity, ex.polarity if ex else None)
    classes = _stack(batch_new.classes, ex.classes if ex else None)

    if system == BC:
        class_loss = binary_ce(logits, polarity)
    else:
        targets = _combined_targets(batch_new, ex, logits.shape[1], classes)
        if system == MC:
            class_loss = multiclass_ce(logits, targets)
        elif system == MT:
            if rule is None:
                raise ConfigError("multi-task loss needs an aggregation rule")
            activations = dc.softmax(logits, axis=1)
            class_loss = mt_class_loss(
                logits, activations, targets, model.head.registry, weights.lam, rule
            )
        else:
            raise ConfigError(f"unknown learning system {system!r}")

    total = class_loss
    if ex is not None and weights.gamma_d > 0:
        old_feats, old_logits = _np_forward_joint(snapshot, ex.x, ex.latents)
        ex_logits = dc.take_rows(logits, ex_slice)
        ex_feats = dc.take_rows(features, ex_slice)
        distill_terms = []
        if distill_form in ("logit", "logit+feature"):
            mask = np.arange(logits.shape[1]) < old_logits.shape[1]
            distill_terms.append(kd_kl(old_logits, ex_logits, weights.T, mask))
        if distill_form in ("feature", "logit+feature"):
            distill_terms.append(kd_feature(old_feats, ex_feats))
        if not distill_terms:
            raise ConfigError(f"unknown distillation form {distill_form!r}")
        distill = distill_terms[0]
        for term in distill_terms[1:]:
            distill = dc.add(distill, term)
        total = dc.add(total, dc.scale(distill, weights.gamma_d))

    if ex is not None and weights.gamma_m > 0 and system != BC:
        ex_feats = dc.take_rows(features, ex_slice)
        ex_classes = classes[n_new:]
        supp = margin_ranking(ex_feats, model.head.theta, ex_classes, weights.tau, weights.J)
        total = dc.add(total, dc.scale(supp, weights.gamma_m))

    return total


def _combined_targets(batch_new: Batch, ex: Batch | None, k: int, classes: Array):
    """Integer classes unless either batch carries soft rows, then dense rows."""
    new_rows = batch_new.target_rows
    ex_rows = ex.target_rows if ex else None
    if new_rows is None and ex_rows is None:
        return classes
    parts = []
    if batch_new.x is not None and batch_new.x.shape[0]:
        parts.append(new_rows if new_rows is not None else _one_hot(batch_new.classes, k))
    if ex is not None and len(ex):
        parts.append(ex_rows if ex_rows is not None else _one_hot(ex.classes, k))
    rows = np.concatenate(parts, axis=0)
    if rows.shape[1] != k:
        padded = np.zeros((rows.shape[0], k))
        padded[:, : rows.shape[1]] = rows
        rows = padded
    return rows


def _one_hot(targets: Array, k: int) -> Array:
    targets = np.asarray(targets, dtype=np.intp)
    rows = np.zeros((targets.size, k), dtype=np.float64)
    rows[np.arange(targets.size), targets] = 1.0
    return rows
