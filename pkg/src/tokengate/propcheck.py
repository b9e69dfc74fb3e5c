"""Executable checks of the gate propositions and of every composed loss gradient."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import Catalog, Environment, default_catalog
from .losses import (
    DIVERGENCES,
    METHODS,
    GateSpec,
    MethodSpec,
    WeightSet,
    agg,
    compose,
    gate,
    group_advantages,
    nondetached_gap_surrogate,
    sdar_loss,
)
from .numkit import RngStream, central_diff_directional, log_softmax, random_unit, sigmoid_array
from .policy import PolicyParams, init_params, per_token_grad_norms, rollout, rows_logprobs, teacher_features
from .trainer import RolloutGroup, batch_gradient

FD_STEP = 1e-5
REL_FLOOR = 1e-7  # denominators below this are treated as absolute error


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    samples: int
    seed: int
    seconds: float = 0.0
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _result(name, err, tol, samples, seed, t0, **details) -> CheckResult:
    err = float(err)
    return CheckResult(name, err, tol, bool(err <= tol), samples, seed, time.perf_counter() - t0, details)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


# --------------------------------------------------------------------------- #
# random batches


def _short_catalog(horizon: int) -> Catalog:
    tasks = [dataclasses.replace(t, horizon=min(t.horizon, horizon)) for t in default_catalog()]
    return Catalog(tasks)


_CATALOGS: dict[int, Catalog] = {}


def random_batch(
    seed: int,
    method: MethodSpec | None = None,
    n_tasks: int = 2,
    group_size: int = 4,
    horizon: int = 3,
    H: int = 16,
):
    """A seeded (params, batch) pair from short random-policy rollouts on TreasureRooms.

    Rewards are redrawn at random so advantages are non-degenerate, and the old
    and reference branches come from perturbed copies so ratios differ from 1.
    """
    method = method or MethodSpec.default("SDAR")
    if horizon not in _CATALOGS:
        _CATALOGS[horizon] = _short_catalog(horizon)
    catalog = _CATALOGS[horizon]
    env = Environment(catalog)
    rng = RngStream(seed, 0xC4EC)
    params = init_params(64, H, seed, skill_gain=2.0, obs_gain=1.0)
    params.b1 = 0.1 * rng.derive(1).normal(params.H)
    params.b2 = 0.3 * rng.derive(2).normal(params.V)

    def perturbed(k):
        return params.with_flat(params.flat() + 0.05 * rng.derive(k).normal(params.size))

    old, ref = perturbed(3), perturbed(4)
    tasks = catalog.for_env("treasure_rooms")
    picks = rng.derive(5).integers(0, len(tasks), size=n_tasks)
    full = method.distill != "gap"
    batch = []
    for j, k in enumerate(picks):
        task = tasks[int(k)]
        trajs = [rollout(params, env, task, None, rng.derive(6, j, i)) for i in range(group_size)]
        rewards = rng.derive(7, j).integers(0, 2, size=group_size).astype(float)
        for tr, r in zip(trajs, rewards):
            tr.reward = float(r)
            idx = np.arange(len(tr))
            tr.old_lp = rows_logprobs(old, tr.features)[0][idx, tr.tokens]
            tr.ref_lp = rows_logprobs(ref, tr.features)[0][idx, tr.tokens]
            tr.teacher_features = teacher_features(tr, task.skill, params.V)
            tlp, _ = rows_logprobs(params, tr.teacher_features)
            tr.teacher_lp = tlp[idx, tr.tokens]
            if full:
                tr.teacher_logp = tlp
                tr.student_logp = rows_logprobs(params, tr.features)[0]
        batch.append(RolloutGroup(task.task_id, trajs, group_advantages(rewards), None, task.skill))
    return params, batch


def _live(params: PolicyParams, batch):
    """Student log-prob rows under ``params`` via plain numpy (independent of the kernels)."""
    lps, full = [], []
    for grp in batch:
        for tr in grp.trajs:
            hid = np.tanh(tr.features @ params.W1.T + params.b1)
            logp = log_softmax(hid @ params.W2.T + params.b2)
            full.append(logp)
            lps.append(logp[np.arange(len(tr)), tr.tokens])
    return lps, full


def composed_loss_fn(params: PolicyParams, batch, method: MethodSpec) -> Callable[[np.ndarray], float]:
    def f(flat):
        p = params.with_flat(flat)
        lps, full = _live(p, batch)
        total, _, _ = compose(method, batch, lps, full, params.V)
        return total

    return f


def _fd_errors(f, flat, grad_flat, rng: RngStream, n_dirs: int) -> list[float]:
    h = FD_STEP * (1.0 + float(np.abs(flat).max()))
    errs = []
    for k in range(n_dirs):
        d = random_unit(rng.derive(k), flat.size)
        fd = central_diff_directional(f, flat, d, h)
        errs.append(rel_err(float(grad_flat @ d), fd))
    return errs


# --------------------------------------------------------------------------- #
# SDAR-only pieces


def _trajs(batch):
    return [tr for grp in batch for tr in grp.trajs]


def sdar_batch_value(student_lps, batch, spec: GateSpec, gates):
    vals = [sdar_loss(lp, tr.teacher_lp, tr.entropy, tr.mask, spec, gates=g)[0]
            for lp, tr, g in zip(student_lps, _trajs(batch), gates)]
    return float(np.mean(vals))


def _detached_gates(batch, spec: GateSpec):
    return [np.broadcast_to(gate(spec, tr.teacher_lp - tr.student_lp, tr.entropy), tr.tokens.shape)
            for tr in _trajs(batch)]


def _token_grad(params: PolicyParams, x: np.ndarray, y: int) -> np.ndarray:
    """Flat gradient of log pi(y|x) for one position, written out layer by layer."""
    pre = params.W1 @ x + params.b1
    hid = np.tanh(pre)
    logits = params.W2 @ hid + params.b2
    p = np.exp(logits - logits.max())
    p /= p.sum()
    dz = -p
    dz[y] += 1.0
    gW2 = np.outer(dz, hid)
    dpre = (params.W2.T @ dz) * (1.0 - hid**2)
    gW1 = np.outer(dpre, x)
    return np.concatenate([gW1.ravel(), dpre, gW2.ravel(), dz])


def _sdar_sets(batch, gates):
    n = len(_trajs(batch))
    return [WeightSet(-g / n) for g in gates]


def check_prop1(n_batches: int = 100, spec: GateSpec = GateSpec("gap", 5.0), seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for b in range(n_batches):
        _, batch = random_batch(seed + b)
        for tr in _trajs(batch):
            loss, _, sig = sdar_loss(tr.student_lp, tr.teacher_lp, tr.entropy, tr.mask, spec)
            C = agg(sig.gate * tr.teacher_lp, tr.mask)
            rhs = C - agg(sig.gate * tr.student_lp, tr.mask)
            worst = max(worst, abs(loss - rhs))
    return _result("prop1_identity", worst, 1e-12, n_batches, seed, t0)


def check_prop2(n_batches: int = 100, n_dirs: int = 50, spec: GateSpec = GateSpec("gap", 5.0),
                seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst_formula, worst_fd = 0.0, 0.0
    for b in range(n_batches):
        params, batch = random_batch(seed + b)
        trajs = _trajs(batch)
        gates = _detached_gates(batch, spec)
        grad = batch_gradient(params, batch, _sdar_sets(batch, gates)).flat()
        # independent assembly: -mean_i Agg_i(g_t * grad log pi) one token at a time
        ref = np.zeros(params.size)
        for tr, g in zip(trajs, gates):
            M = tr.mask.sum()
            for t in range(len(tr)):
                if tr.mask[t] > 0:
                    ref -= g[t] / M * _token_grad(params, tr.features[t], int(tr.tokens[t]))
        ref /= len(trajs)
        worst_formula = max(worst_formula, float(np.abs(grad - ref).max()))

        def f(flat, params=params, batch=batch, gates=gates):
            lps, _ = _live(params.with_flat(flat), batch)
            return sdar_batch_value(lps, batch, spec, gates)

        errs = _fd_errors(f, params.flat(), grad, RngStream(seed + b, 0xF2), n_dirs)
        worst_fd = max(worst_fd, max(errs))
    passed_formula = worst_formula <= 1e-10
    err = worst_fd if passed_formula else math.inf
    return _result("prop2_gradient_form", err, 1e-6, n_batches, seed, t0,
                   formula_max_abs=worst_formula, fd_max_rel=worst_fd)


def check_prop3(betas: Sequence[float] = (0.5, 1.0, 5.0, 10.0), n_points: int = 10001,
                seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    grid = np.linspace(-10.0, 10.0, n_points)
    step = grid[1] - grid[0]
    h = 1e-6
    worst = 0.0
    per_beta = {}
    for beta in betas:
        # differentiate the smaller of g and 1-g so tails keep relative precision
        lo = sigmoid_array(beta * (grid + h))
        lo_m = sigmoid_array(beta * (grid - h))
        hi = sigmoid_array(-beta * (grid + h))
        hi_m = sigmoid_array(-beta * (grid - h))
        deriv = np.where(grid <= 0, (lo - lo_m) / (2 * h), -(hi - hi_m) / (2 * h))
        k = int(np.argmax(deriv))
        err = abs(deriv[k] - beta / 4.0)
        if not (deriv > 0).all() or abs(grid[k]) > step:
            err = math.inf
        per_beta[str(beta)] = {"max_derivative": float(deriv[k]), "argmax": float(grid[k]),
                               "min_derivative": float(deriv.min())}
        worst = max(worst, err)
    # degenerate boundary: beta = 0 gives a flat gate at 0.5
    flat = sigmoid_array(0.0 * grid)
    if not np.all(flat == 0.5):
        worst = math.inf
    return _result("prop3_gate_slope", worst, 1e-6, len(betas) * n_points, seed, t0, per_beta=per_beta)


def check_prop4(n_batches: int = 100, spec: GateSpec = GateSpec("gap", 5.0), seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst, min_slack = 0.0, math.inf
    for b in range(n_batches):
        params, batch = random_batch(seed + b)
        trajs = _trajs(batch)
        gates = _detached_gates(batch, spec)
        lhs = float(np.linalg.norm(batch_gradient(params, batch, _sdar_sets(batch, gates)).flat()))
        rhs = float(np.mean([agg(per_token_grad_norms(params, tr.features, tr.tokens), tr.mask) for tr in trajs]))
        slack = rhs - lhs
        min_slack = min(min_slack, slack)
        worst = max(worst, -slack)
    return _result("prop4_norm_bound", max(worst, 0.0), 1e-10, n_batches, seed, t0, min_slack=min_slack)


def check_prop5(n_batches: int = 100, beta: float = 5.0, n_dirs: int = 10, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst_tok, worst_fd = 0.0, 0.0
    couplings = []
    for b in range(n_batches):
        params, batch = random_batch(seed + b)
        trajs = _trajs(batch)
        for tr in trajs:
            _, dval = nondetached_gap_surrogate(tr.student_lp, tr.teacher_lp, beta)
            D = tr.teacher_lp - tr.student_lp
            g = 1.0 / (1.0 + np.exp(-beta * D))
            closed = -(g + beta * D * g * (1.0 - g))
            worst_tok = max(worst_tok, float(np.abs(dval - closed).max()))
            # scalar central differences of s -> g(beta(T - s)) (T - s)
            hs = 1e-6
            vp, _ = nondetached_gap_surrogate(tr.student_lp + hs, tr.teacher_lp, beta)
            vm, _ = nondetached_gap_surrogate(tr.student_lp - hs, tr.teacher_lp, beta)
            fd_tok = (vp - vm) / (2 * hs)
            worst_fd = max(worst_fd, float((np.abs(fd_tok - closed) / np.maximum(np.abs(closed), 1.0)).max()))
            couplings.append(np.abs(beta * D * g * (1.0 - g))[tr.mask > 0])
        # parameter-space: the closed-form coefficients as Agg weights vs finite differences
        n = len(trajs)
        sets = []
        for tr in trajs:
            _, dval = nondetached_gap_surrogate(tr.student_lp, tr.teacher_lp, beta)
            sets.append(WeightSet(dval / n))
        grad = batch_gradient(params, batch, sets).flat()

        def f(flat, params=params, batch=batch):
            lps, _ = _live(params.with_flat(flat), batch)
            vals = [agg(nondetached_gap_surrogate(lp, tr.teacher_lp, beta)[0], tr.mask)
                    for lp, tr in zip(lps, _trajs(batch))]
            return float(np.mean(vals))

        worst_fd = max(worst_fd, max(_fd_errors(f, params.flat(), grad, RngStream(seed + b, 0xF5), n_dirs)))
    c = np.concatenate(couplings)
    err = worst_tok if worst_fd <= 1e-6 else math.inf
    return _result("prop5_coupling", err, 1e-8, n_batches, seed, t0, fd_max_rel=worst_fd,
                   coupling_quantiles={q: float(np.quantile(c, float(q))) for q in ("0.5", "0.9", "0.99", "1.0")})


def loss_variants() -> list[MethodSpec]:
    out = []
    for m in METHODS:
        spec = MethodSpec.default(m)
        if m in ("SkillSD", "SDAR", "RLSD", "GRPO_plus_OPSD", "OPSD"):
            spec = spec.replace(lam=max(spec.lam, 0.1))
        out.append(spec)
    for kind in DIVERGENCES:
        out.append(MethodSpec.default("SDAR", distill=kind, lam=0.1))
    return out


def check_all_losses_grad(n_points: int = 20, n_dirs: int = 50, seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    per = {}
    for spec in loss_variants():
        name = spec.method if spec.distill == "gap" else f"SDAR_{spec.distill}"
        e_m = 0.0
        for k in range(n_points):
            params, batch = random_batch(seed + 1000 + k, spec)
            _, sets, _ = compose(spec, batch, vocab_size=params.V)
            grad = batch_gradient(params, batch, sets).flat()
            f = composed_loss_fn(params, batch, spec)
            e_m = max(e_m, max(_fd_errors(f, params.flat(), grad, RngStream(seed + k, 0xA11), n_dirs)))
        per[name] = e_m
        worst = max(worst, e_m)
    return _result("all_losses_gradient", worst, 1e-6, n_points * len(per), seed, t0, per_variant=per)


CHECKS = {
    "prop1": check_prop1,
    "prop2": check_prop2,
    "prop3": check_prop3,
    "prop4": check_prop4,
    "prop5": check_prop5,
    "all_losses": check_all_losses_grad,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed=seed) for fn in CHECKS.values()]


def format_table(results: Sequence[CheckResult]) -> str:
    rows = [f"{'check':<22} {'max_error':>12} {'tolerance':>10} {'samples':>8} {'sec':>7}  status"]
    for r in results:
        rows.append(f"{r.name:<22} {r.max_error:>12.3e} {r.tolerance:>10.0e} {r.samples:>8d} "
                    f"{r.seconds:>7.1f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(rows)
