"""Training objectives and token-level signals.

Every trajectory-level loss returns its value together with per-token weights
``w_t = d(loss)/d(log pi(y_t|s_t))`` expressed in masked-average space, so the
parameter gradient is ``backward_weighted_logprob(params, traj, X, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numkit import log_softmax, sigmoid_array

HIST_BINS = 41
HIST_RANGE = (-5.0, 5.0)
METHODS = ("GRPO", "OPSD", "SkillGRPO", "GRPO_plus_OPSD", "SkillSD", "RLSD", "SDAR")
DIVERGENCES = ("reverse_kl", "forward_kl", "jsd")


class EmptyMask(ValueError):
    pass


class GroupTooSmall(ValueError):
    pass


class MissingBranch(ValueError):
    pass


class MissingOldLogprobs(MissingBranch):
    pass


class MissingRefLogprobs(MissingBranch):
    pass


class MissingTeacher(MissingBranch):
    pass


# --------------------------------------------------------------------------- #
# aggregation and gates


def agg(z, mask) -> float:
    """Masked token average."""
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n <= 0:
        raise EmptyMask("no valid tokens under the response mask")
    return float((m * np.asarray(z, dtype=np.float64)).sum() / n)


def _agg_scale(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n <= 0:
        raise EmptyMask("no valid tokens under the response mask")
    return m / n


@dataclass(frozen=True)
class GateSpec:
    strategy: str = "gap"
    beta: float = 5.0
    normalize_entropy: bool = False

    def __post_init__(self):
        if self.strategy not in ("entropy", "gap", "soft_or", "none"):
            raise ValueError(f"unknown gate strategy {self.strategy!r}")
        if self.beta < 0:
            raise ValueError("gate sharpness beta must be >= 0")


def gap(teacher_lp, student_lp):
    """Detached teacher-minus-student log-prob gap (plain arrays carry no gradient)."""
    return np.asarray(teacher_lp, dtype=np.float64) - np.asarray(student_lp, dtype=np.float64)


def gate(spec: GateSpec, delta, h, vocab_size: int = 64):
    delta = np.asarray(delta, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if spec.strategy == "none":
        return np.ones(np.broadcast(delta, h).shape) if (delta.ndim or h.ndim) else 1.0
    if spec.normalize_entropy:
        h = h / math.log(vocab_size)
    if spec.strategy == "entropy":
        z = spec.beta * h + 0.0 * delta
    elif spec.strategy == "gap":
        z = spec.beta * delta + 0.0 * h
    else:
        z = spec.beta * (1.0 - (1.0 - h) * (1.0 - delta))
    g = sigmoid_array(np.atleast_1d(z))
    return g if z.ndim else float(g[0])


@dataclass
class TokenSignals:
    delta: np.ndarray
    entropy: np.ndarray
    gate: np.ndarray
    ell: np.ndarray


def sdar_loss(student_lp, teacher_lp, entropy, mask, spec: GateSpec, vocab_size: int = 64, gates=None):
    """Gated self-distillation loss Agg(g_t * (teacher_lp - student_lp)).

    ``gates`` overrides the detached gate values (diagnostic hook).
    Returns ``(loss, weights, signals)`` with weights ``-g_t``.
    """
    student_lp = np.asarray(student_lp, dtype=np.float64)
    if teacher_lp is None:
        raise MissingTeacher("sdar_loss needs teacher log-probs")
    scale = _agg_scale(mask)
    delta = gap(teacher_lp, student_lp)
    g = np.asarray(gate(spec, delta, entropy, vocab_size) if gates is None else gates, dtype=np.float64)
    g = np.broadcast_to(g, delta.shape).astype(np.float64)
    ell = g * delta
    loss = float((scale * ell).sum())
    return loss, -g, TokenSignals(delta, np.asarray(entropy, dtype=np.float64), g, ell)


# --------------------------------------------------------------------------- #
# GRPO family


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"group of size {r.size}; need at least 2")
    mu = r.mean()
    sigma = r.std()
    if sigma < 1e-8:
        return np.zeros_like(r)
    return (r - mu) / sigma


def grpo_token_terms(student_lp, old_lp, adv, eps_lo=0.2, eps_hi=0.2, c_dual=3.0):
    """Per-token clipped surrogate losses and their d/d(student_lp) weights."""
    if old_lp is None:
        raise MissingOldLogprobs("grpo needs old-policy log-probs")
    student_lp = np.asarray(student_lp, dtype=np.float64)
    adv = np.broadcast_to(np.asarray(adv, dtype=np.float64), student_lp.shape)
    r = np.exp(student_lp - np.asarray(old_lp, dtype=np.float64))
    L1 = -adv * r
    L2 = -adv * np.clip(r, 1.0 - eps_lo, 1.0 + eps_hi)
    surrogate = np.maximum(L1, L2)
    active = L1 >= L2
    cap = -adv * c_dual
    dual = (adv < 0) & (cap < surrogate)
    loss = np.where(dual, cap, surrogate)
    weight = np.where(active & ~dual, -adv * r, 0.0)
    return loss, weight


def grpo_loss(trajs, advantages, eps_lo=0.2, eps_hi=0.2, c_dual=3.0, student_lps=None):
    """Mean over trajectories of Agg(clipped token loss).

    ``advantages`` holds one scalar or one per-token array per trajectory.
    Returns ``(loss, weights, report)``; weights are per trajectory in Agg space.
    """
    losses, weights, clipped = [], [], 0
    n_tok = 0
    for i, tr in enumerate(trajs):
        lp = tr.student_lp if student_lps is None else student_lps[i]
        tok_loss, w = grpo_token_terms(lp, tr.old_lp, advantages[i], eps_lo, eps_hi, c_dual)
        losses.append(agg(tok_loss, tr.mask))
        weights.append(w)
        clipped += int(((w == 0) & (np.asarray(advantages[i]) != 0) & (tr.mask > 0)).sum())
        n_tok += int(tr.mask.sum())
    return float(np.mean(losses)), weights, {"clip_fraction": clipped / max(n_tok, 1)}


def kl_ref(student_lp, ref_lp, mask, estimator: str = "k3"):
    if ref_lp is None:
        raise MissingRefLogprobs("kl_ref needs reference log-probs")
    d = np.asarray(student_lp, dtype=np.float64) - np.asarray(ref_lp, dtype=np.float64)
    if estimator == "raw_diff":
        return agg(d, mask), np.ones_like(d)
    if estimator == "k3":
        em1 = np.expm1(-d)
        return agg(em1 + d, mask), -em1
    raise ValueError(f"unknown KL estimator {estimator!r}")


def k3(d):
    d = np.asarray(d, dtype=np.float64)
    # expm1 keeps the estimate non-negative when |d| is tiny
    return np.expm1(-d) + d


def skill_sd_loss(student_lp, teacher_lp, old_lp, mask):
    """Importance-weighted K3 distillation Agg(rho_t * k_t)."""
    if teacher_lp is None:
        raise MissingTeacher("skill_sd_loss needs teacher log-probs")
    if old_lp is None:
        raise MissingOldLogprobs("skill_sd_loss needs old-policy log-probs")
    s = np.asarray(student_lp, dtype=np.float64)
    d = s - np.asarray(teacher_lp, dtype=np.float64)
    rho = np.exp(s - np.asarray(old_lp, dtype=np.float64))
    em1 = np.expm1(-d)
    k = em1 + d
    # d(rho*k)/ds = rho*k + rho*(1 - e^-d)
    return agg(rho * k, mask), rho * k - rho * em1


def rlsd_reweight(adv: float, delta, eps_w: float = 0.2, lam: float = 0.5):
    """Token advantages A * [(1 - lam) + lam * clip(exp(sign(A) * delta), 1 - eps_w, 1 + eps_w)]."""
    delta = np.asarray(delta, dtype=np.float64)
    w = np.clip(np.exp(np.sign(adv) * delta), 1.0 - eps_w, 1.0 + eps_w)
    return adv * ((1.0 - lam) + lam * w)


# --------------------------------------------------------------------------- #
# full-vocabulary divergences (teacher constant)


def full_dist_divergence(student_logits, teacher_logits, kind: str = "reverse_kl"):
    """Divergence between softmax(student) and softmax(teacher) along the last axis.

    Returns ``(value, grad)`` with grad taken w.r.t. the student logits only.
    """
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zs.shape != zt.shape:
        raise ValueError(f"shape mismatch {zs.shape} vs {zt.shape}")
    ls, lt = log_softmax(zs), log_softmax(zt)
    ps, pt = np.exp(ls), np.exp(lt)
    if kind == "reverse_kl":
        a = ls - lt
        val = (ps * a).sum(axis=-1)
        grad = ps * (a - val[..., None])
    elif kind == "forward_kl":
        val = (pt * (lt - ls)).sum(axis=-1)
        grad = ps - pt
    elif kind == "jsd":
        lm = np.logaddexp(ls, lt) - math.log(2.0)
        val = 0.5 * (ps * (ls - lm)).sum(axis=-1) + 0.5 * (pt * (lt - lm)).sum(axis=-1)
        a = 0.5 * (ls - lm)
        grad = ps * (a - (ps * a).sum(axis=-1, keepdims=True))
    else:
        raise ValueError(f"unknown divergence kind {kind!r}")
    val = np.maximum(val, 0.0)
    return (float(val) if val.ndim == 0 else val), grad


# --------------------------------------------------------------------------- #
# composition


@dataclass(frozen=True)
class MethodSpec:
    method: str = "SDAR"
    lam: float = 0.01
    alpha_kl: float = 0.01
    eps_lo: float = 0.2
    eps_hi: float = 0.2
    c_dual: float = 3.0
    eps_w: float = 0.2
    gate: GateSpec = field(default_factory=GateSpec)
    kl_estimator: str = "k3"
    retrieval: str = "km"
    distill: str = "gap"  # gap (sampled-token surrogate) | reverse_kl | forward_kl | jsd

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.distill not in ("gap",) + DIVERGENCES:
            raise ValueError(f"unknown distillation objective {self.distill!r}")
        if self.kl_estimator not in ("k3", "raw_diff"):
            raise ValueError(f"unknown KL estimator {self.kl_estimator!r}")
        if self.retrieval not in ("ucb", "km", "full", "random", "none"):
            raise ValueError(f"unknown retrieval strategy {self.retrieval!r}")

    @classmethod
    def default(cls, method: str, **overrides) -> "MethodSpec":
        base = {
            "GRPO": dict(lam=0.0, retrieval="none", gate=GateSpec("none", 0.0)),
            "SkillGRPO": dict(lam=0.0, retrieval="km", gate=GateSpec("none", 0.0)),
            "OPSD": dict(lam=0.0, retrieval="none", gate=GateSpec("none", 0.0)),
            "GRPO_plus_OPSD": dict(lam=0.01, retrieval="none", gate=GateSpec("none", 0.0)),
            "SkillSD": dict(lam=0.001, retrieval="km", gate=GateSpec("none", 0.0)),
            "RLSD": dict(lam=0.5, retrieval="km", gate=GateSpec("none", 0.0)),
            "SDAR": dict(lam=0.01, retrieval="km", gate=GateSpec("gap", 5.0)),
        }[method]
        base.update(overrides)
        return cls(method=method, **base)

    @property
    def needs_teacher(self) -> bool:
        return self.method in ("SkillSD", "RLSD", "SDAR")

    @property
    def needs_reference(self) -> bool:
        return self.alpha_kl > 0 or self.method in ("OPSD", "GRPO_plus_OPSD")

    @property
    def uses_grpo(self) -> bool:
        return self.method != "OPSD"

    @property
    def skill_in_student(self) -> bool:
        return self.method == "SkillGRPO"

    @property
    def needs_retrieval(self) -> bool:
        return self.needs_teacher or self.skill_in_student

    def replace(self, **kw) -> "MethodSpec":
        return replace(self, **kw)


@dataclass
class LossReport:
    total: float
    grpo: float = 0.0
    kl_ref: float = 0.0
    distill: float = 0.0
    gap_mean: float | None = None
    gate_mean: float | None = None
    gate_active_ratio: float | None = None
    gap_per_turn: list | None = None
    gap_hist: dict | None = None
    clip_fraction: float = 0.0
    num_tokens: int = 0


@dataclass
class WeightSet:
    """Per-trajectory gradient recipe: Agg-space token weights and optional logit grads."""

    weights: np.ndarray
    dlogits: np.ndarray | None = None


def gap_histogram(delta: np.ndarray) -> dict:
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)
    inner, _ = np.histogram(np.clip(delta, edges[0], edges[-1]), bins=edges)
    # values exactly on the clip boundary belong to the overflow bins
    under = int((delta < edges[0]).sum())
    over = int((delta > edges[-1]).sum())
    inner[0] -= under
    inner[-1] -= over
    return {"edges": edges.tolist(), "counts": [under] + inner.tolist() + [over]}


_BRANCH_ERRORS = {"teacher_lp": MissingTeacher, "old_lp": MissingOldLogprobs, "ref_lp": MissingRefLogprobs}


def _branch(traj, name: str):
    val = getattr(traj, name)
    if val is None:
        raise _BRANCH_ERRORS.get(name, MissingBranch)(f"trajectory {traj.task_id} lacks {name}")
    return val


def compose(method: MethodSpec, batch, student_lps=None, student_logps=None, vocab_size: int = 64):
    """Total loss, per-trajectory weight sets and a LossReport for one batch.

    ``batch`` is a list of rollout groups (``.trajs``, ``.advantages``).
    ``student_lps``/``student_logps`` optionally replace the live student
    log-probs (flat list over trajectories) while every detached quantity
    (advantages, gates, reweighting) stays at its value from the batch.
    """
    trajs = [tr for grp in batch for tr in grp.trajs]
    if not trajs:
        raise EmptyMask("empty batch")
    advs = [a for grp in batch for a in grp.advantages]
    N = len(trajs)
    live = [tr.student_lp if student_lps is None else student_lps[i] for i, tr in enumerate(trajs)]

    weights = [np.zeros(len(tr)) for tr in trajs]
    dlogits: list = [None] * N
    grpo_val = kl_val = distill_val = 0.0
    clip_frac = 0.0

    if method.uses_grpo:
        tok_adv = advs
        if method.method == "RLSD":
            tok_adv = []
            for tr, a in zip(trajs, advs):
                delta = gap(_branch(tr, "teacher_lp"), _branch(tr, "old_lp"))
                tok_adv.append(rlsd_reweight(a, delta, method.eps_w, method.lam))
        for tr in trajs:
            _branch(tr, "old_lp")
        grpo_val, gw, info = grpo_loss(trajs, tok_adv, method.eps_lo, method.eps_hi, method.c_dual, live)
        clip_frac = info["clip_fraction"]
        for i in range(N):
            weights[i] += gw[i]

    kl_coef = method.alpha_kl
    if kl_coef > 0 or method.method == "OPSD":
        vals = []
        for i, tr in enumerate(trajs):
            v, w = kl_ref(live[i], _branch(tr, "ref_lp"), tr.mask, method.kl_estimator)
            vals.append(v)
            weights[i] += kl_coef * w
        kl_val = float(np.mean(vals))

    deltas, gates, turns = [], [], []
    if method.method == "GRPO_plus_OPSD":
        vals = []
        for i, tr in enumerate(trajs):
            v, w = kl_ref(live[i], _branch(tr, "ref_lp"), tr.mask, "raw_diff")
            vals.append(v)
            weights[i] += method.lam * w
        distill_val = float(np.mean(vals))
    elif method.method == "SkillSD":
        vals = []
        for i, tr in enumerate(trajs):
            v, w = skill_sd_loss(live[i], _branch(tr, "teacher_lp"), _branch(tr, "old_lp"), tr.mask)
            vals.append(v)
            weights[i] += method.lam * w
            deltas.append(gap(tr.teacher_lp, tr.student_lp)[tr.mask > 0])
        distill_val = float(np.mean(vals))
    elif method.method == "SDAR":
        vals = []
        for i, tr in enumerate(trajs):
            teacher = _branch(tr, "teacher_lp")
            delta = gap(teacher, tr.student_lp)
            g = np.broadcast_to(gate(method.gate, delta, tr.entropy, vocab_size), delta.shape)
            if method.distill == "gap":
                v, w, _ = sdar_loss(live[i], teacher, tr.entropy, tr.mask, method.gate, vocab_size, gates=g)
                weights[i] += method.lam * w
            else:
                if tr.teacher_logp is None:
                    raise MissingBranch(f"trajectory {tr.task_id} lacks teacher_logp")
                s_full = tr.student_logp if student_logps is None else student_logps[i]
                if s_full is None:
                    raise MissingBranch(f"trajectory {tr.task_id} lacks student_logp")
                dv, dg = full_dist_divergence(s_full, tr.teacher_logp, method.distill)
                scale = _agg_scale(tr.mask)
                v = float((scale * g * dv).sum())
                dlogits[i] = method.lam * (scale * g)[:, None] * dg
            vals.append(v)
            m = tr.mask > 0
            deltas.append(delta[m])
            gates.append(np.asarray(g)[m])
            turns.append(tr.turn[m])
        distill_val = float(np.mean(vals))
    elif method.method == "RLSD":
        for tr in trajs:
            deltas.append(gap(tr.teacher_lp, tr.student_lp)[tr.mask > 0])

    if method.method == "OPSD":
        total = kl_coef * kl_val
    else:
        total = grpo_val + kl_coef * kl_val + method.lam * distill_val
    # the distillation coefficient is folded into the weights; scale to batch mean
    sets = [WeightSet(weights[i] / N, None if dlogits[i] is None else dlogits[i] / N) for i in range(N)]

    report = LossReport(
        total=float(total),
        grpo=grpo_val,
        kl_ref=kl_val,
        distill=distill_val,
        clip_fraction=clip_frac,
        num_tokens=int(sum(tr.mask.sum() for tr in trajs)),
    )
    if deltas:
        d_all = np.concatenate(deltas)
        report.gap_mean = float(d_all.mean()) if d_all.size else 0.0
        report.gap_hist = gap_histogram(d_all)
    if gates:
        g_all = np.concatenate(gates)
        report.gate_mean = float(g_all.mean())
        report.gate_active_ratio = float((g_all > 0.5).mean())
        t_all = np.concatenate(turns)
        report.gap_per_turn = [
            float(d_all[t_all == k].mean()) if (t_all == k).any() else None for k in range(int(t_all.max()) + 1)
        ]
    return report.total, sets, report


def nondetached_gap_surrogate(student_lp, teacher_lp, beta: float):
    """Per-token sigma(beta*D)*D with D = teacher - student, gradient through both factors.

    Returns ``(values, dvalue/dstudent_lp)``; the derivative equals
    ``-(g + beta*D*g*(1-g))``.
    """
    D = gap(teacher_lp, student_lp)
    g = sigmoid_array(beta * D)
    return g * D, -(g + beta * D * g * (1.0 - g))
