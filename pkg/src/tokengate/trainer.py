"""Group rollouts, loss composition, Adam updates, evaluation and metric files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .env import Catalog, Environment, SkillText, Task, default_catalog, distractor_skill
from .losses import GateSpec, LossReport, MethodSpec, compose, gap, gap_histogram, group_advantages
from .numkit import RngStream
from .policy import (
    PolicyParams,
    Trajectory,
    grad_token_sum,
    backward_logits,
    init_params,
    rollout,
    rows_logprobs,
    teacher_features,
)
from .skillbank import SkillBank

METRIC_KEYS = (
    "step", "reward_mean", "success_rate", "loss_total", "loss_grpo", "loss_kl_ref", "loss_distill",
    "gap_mean", "gate_mean", "gate_active_ratio", "grad_norm", "ms",
)
PROFILE_EVERY = 10


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NonFiniteLoss(FloatingPointError):
    pass


# --------------------------------------------------------------------------- #
# configuration


@dataclass
class TrainConfig:
    method: MethodSpec = field(default_factory=lambda: MethodSpec.default("SDAR"))
    env: str = "treasure_rooms"
    catalog: str | None = None
    seed: int = 0
    steps: int = 300
    tasks_per_batch: int = 4
    group_size: int = 8
    lr: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    hidden: int = 64
    skill_gain: float = 3.0
    obs_gain: float = 2.0
    skill_quality: str = "informative"
    c_ucb: float = 1.0
    eval_every: int = 50
    eval_tasks: list[str] | None = None
    eval_with_skills: bool = False
    log_timing: bool = False
    out_dir: str | None = None

    def validate(self) -> None:
        problems = []
        if self.group_size < 2:
            problems.append(f"group_size must be >= 2 (got {self.group_size})")
        if self.steps < 0:
            problems.append(f"steps must be >= 0 (got {self.steps})")
        if self.tasks_per_batch < 1:
            problems.append(f"tasks_per_batch must be >= 1 (got {self.tasks_per_batch})")
        if not self.lr > 0:
            problems.append(f"lr must be positive (got {self.lr})")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            problems.append("adam betas must lie in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            problems.append(f"grad_clip must be positive or null (got {self.grad_clip})")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1 (got {self.eval_every})")
        if self.env not in ("treasure_rooms", "lookup_qa"):
            problems.append(f"env: unknown environment {self.env!r}")
        if self.skill_quality not in ("informative", "distractor"):
            problems.append(f"skill_quality: unknown value {self.skill_quality!r}")
        if self.method.needs_retrieval and self.method.retrieval == "none":
            problems.append(f"method.retrieval: {self.method.method} needs a retrieval strategy")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        problems = []
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        for k in doc:
            if k not in known:
                problems.append(f"unknown config key {k!r}")
        mdoc = dict(doc.pop("method", {}) or {})
        name = mdoc.pop("method", "SDAR")
        gdoc = mdoc.pop("gate", None)
        mknown = {f.name for f in dataclasses.fields(MethodSpec)}
        for k in mdoc:
            if k not in mknown:
                problems.append(f"unknown config key 'method.{k}'")
        if gdoc is not None:
            gknown = {f.name for f in dataclasses.fields(GateSpec)}
            for k in gdoc:
                if k not in gknown:
                    problems.append(f"unknown config key 'method.gate.{k}'")
        if problems:
            raise ConfigError(problems)
        try:
            kw = {k: v for k, v in mdoc.items()}
            if gdoc is not None:
                base_gate = MethodSpec.default(name).gate
                kw["gate"] = dataclasses.replace(base_gate, **gdoc)
            method = MethodSpec.default(name, **kw)
            cfg = cls(method=method, **{k: v for k, v in doc.items() if k in known})
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from None
        cfg.validate()
        return cfg


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply dotted ``key=value`` overrides; values parse as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError([f"override {key!r}: {p!r} is not a section"])
            node = nxt
        node[parts[-1]] = _coerce(value)
    return doc


def config_to_json(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    return d


# --------------------------------------------------------------------------- #
# rollout groups


@dataclass
class RolloutGroup:
    task_id: str
    trajs: list[Trajectory]
    advantages: np.ndarray
    skill_id: int | None = None
    skill: SkillText | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajs])


def _fill_branches(params, ref_params, trajs, method: MethodSpec, skill):
    full = method.method == "SDAR" and method.distill != "gap"
    for tr in trajs:
        tr.old_lp = tr.student_lp.copy()
        if method.needs_reference:
            lp, _ = rows_logprobs(ref_params, tr.features)
            tr.ref_lp = lp[np.arange(len(tr)), tr.tokens]
        if method.needs_teacher:
            if skill is None:
                # no privileged context retrieved: the teacher sees the student context
                tr.teacher_features = tr.features
            else:
                tr.teacher_features = teacher_features(tr, skill, params.V)
            lp, _ = rows_logprobs(params, tr.teacher_features)
            tr.teacher_lp = lp[np.arange(len(tr)), tr.tokens]
            if full:
                tr.teacher_logp = lp
                tr.student_logp, _ = rows_logprobs(params, tr.features)


def collect_group(
    params: PolicyParams,
    task: Task,
    method: MethodSpec,
    bank: SkillBank | None,
    rng: RngStream,
    group_size: int = 8,
    env: Environment | None = None,
    ref_params: PolicyParams | None = None,
) -> RolloutGroup:
    env = env if env is not None else Environment()
    skill, skill_id = None, None
    if method.needs_retrieval:
        if bank is None:
            raise ValueError(f"{method.method} needs a skill bank")
        skill, skill_id = bank.select(method.retrieval, task, rng.derive(0xB4))
    student_skill = skill if method.skill_in_student else None
    trajs = []
    for i in range(group_size):
        tr = rollout(params, env, task, student_skill, rng.derive(i))
        tr.skill_id = skill_id
        trajs.append(tr)
    _fill_branches(params, ref_params if ref_params is not None else params, trajs, method, skill)
    rewards = [t.reward for t in trajs]
    if bank is not None and skill_id is not None and method.retrieval == "ucb":
        for r in rewards:
            bank.update_reward(skill_id, r)
    return RolloutGroup(task.task_id, trajs, group_advantages(rewards), skill_id, skill)


# --------------------------------------------------------------------------- #
# optimization


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_update(flat: np.ndarray, grad: np.ndarray, st: OptimState, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    st.t += 1
    st.m = b1 * st.m + (1.0 - b1) * grad
    st.v = b2 * st.v + (1.0 - b2) * grad * grad
    m_hat = st.m / (1.0 - b1**st.t)
    v_hat = st.v / (1.0 - b2**st.t)
    return flat - lr * m_hat / (np.sqrt(v_hat) + eps)


def batch_gradient(params: PolicyParams, batch: Sequence[RolloutGroup], sets) -> PolicyParams:
    """Assemble the parameter gradient from per-trajectory weight sets."""
    trajs = [tr for grp in batch for tr in grp.trajs]
    Xs, toks, coefs = [], [], []
    grad = params.zeros_like()
    for tr, ws in zip(trajs, sets):
        m = tr.mask
        coef = np.where(m > 0, ws.weights, 0.0) / m.sum()
        Xs.append(tr.features)
        toks.append(tr.tokens)
        coefs.append(coef)
        if ws.dlogits is not None:
            g = backward_logits(params, tr.features, ws.dlogits)
            grad.W1 += g.W1; grad.b1 += g.b1; grad.W2 += g.W2; grad.b2 += g.b2
    g = grad_token_sum(params, np.concatenate(Xs), np.concatenate(toks), np.concatenate(coefs))
    grad.W1 += g.W1; grad.b1 += g.b1; grad.W2 += g.W2; grad.b2 += g.b2
    return grad


def train_step(params: PolicyParams, optim: OptimState, batch: Sequence[RolloutGroup], method: MethodSpec,
               lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, grad_clip: float | None = None):
    if not batch:
        raise ValueError("empty batch")
    total, sets, report = compose(method, batch, vocab_size=params.V)
    if not math.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss {total} (grpo={report.grpo}, kl={report.kl_ref}, "
                            f"distill={report.distill})")
    grad = batch_gradient(params, batch, sets)
    gflat = grad.flat()
    gnorm = float(np.linalg.norm(gflat))
    if not math.isfinite(gnorm):
        raise NonFiniteLoss(f"non-finite gradient norm at loss {total}")
    if grad_clip is not None and gnorm > grad_clip:
        gflat = gflat * (grad_clip / gnorm)
    new_flat = adam_update(params.flat(), gflat, optim, lr, betas[0], betas[1], eps)
    new = params.with_flat(new_flat)
    new.step = params.step + 1
    rewards = np.concatenate([grp.rewards for grp in batch])
    record = {
        "step": new.step,
        "reward_mean": float(rewards.mean()),
        "loss_total": report.total,
        "loss_grpo": report.grpo,
        "loss_kl_ref": report.kl_ref,
        "loss_distill": report.distill,
        "gap_mean": report.gap_mean,
        "gate_mean": report.gate_mean,
        "gate_active_ratio": report.gate_active_ratio,
        "grad_norm": gnorm,
    }
    return new, optim, record, report


# --------------------------------------------------------------------------- #
# evaluation and diagnostics


def evaluate(params: PolicyParams, tasks: Sequence[Task], with_skills: bool = False,
             bank: SkillBank | None = None, env: Environment | None = None):
    """Greedy success rate; ``with_skills`` puts the KM-retrieved skill in the student prompt."""
    env = env if env is not None else Environment()
    outcomes = {}
    for task in tasks:
        skill = None
        if with_skills:
            if bank is None:
                bank = SkillBank.from_catalog(env.catalog)
            e = bank.km_select(task.description)
            skill = e.skill if e is not None else None
        tr = rollout(params, env, task, skill, None, temperature=0)
        outcomes[task.task_id] = tr.reward
    rate = float(np.mean(list(outcomes.values()))) if outcomes else 0.0
    return rate, outcomes


def gap_profiles(batch: Sequence[RolloutGroup]):
    """Mean gap per turn, per within-turn quartile, and the gap histogram.

    Buckets without tokens are reported as None.
    """
    deltas, turns, quart = [], [], []
    for grp in batch:
        for tr in grp.trajs:
            if tr.teacher_lp is None:
                from .losses import MissingTeacher

                raise MissingTeacher(f"trajectory {tr.task_id} has no teacher branch")
            m = tr.mask > 0
            d = gap(tr.teacher_lp, tr.student_lp)
            turn_len = np.bincount(tr.turn, minlength=int(tr.turn.max()) + 1 if len(tr) else 0)
            rel = tr.pos / np.maximum(turn_len[tr.turn], 1)
            deltas.append(d[m]); turns.append(tr.turn[m]); quart.append(np.minimum((rel[m] * 4).astype(int), 3))
    d = np.concatenate(deltas) if deltas else np.zeros(0)
    t = np.concatenate(turns) if turns else np.zeros(0, dtype=int)
    q = np.concatenate(quart) if quart else np.zeros(0, dtype=int)
    n_turns = int(t.max()) + 1 if t.size else 0
    per_turn = [float(d[t == k].mean()) if (t == k).any() else None for k in range(n_turns)]
    per_pos = [float(d[q == k].mean()) if (q == k).any() else None for k in range(4)]
    return per_turn, per_pos, gap_histogram(d)


# --------------------------------------------------------------------------- #
# experiment driver


def _fmt(v):
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def build_bank(cfg: TrainConfig, catalog: Catalog) -> SkillBank:
    tasks = catalog.for_env(cfg.env)
    if cfg.skill_quality == "distractor":
        skills = [distractor_skill(t) for t in tasks]
        # keywords stay task-specific so keyword matching still fires
        skills = [SkillText(s.tokens, t.skill.keywords, "distractor") for s, t in zip(skills, tasks)]
    else:
        skills = [t.skill for t in tasks]
    return SkillBank.from_skills(skills, cfg.c_ucb, [t.task_id for t in tasks])


@dataclass
class RunResult:
    params: PolicyParams
    metrics_path: Path | None
    summary_path: Path | None
    records: list[dict]
    final_success: float | None
    bank: SkillBank | None = None


def run(cfg: TrainConfig, out_dir: str | Path | None = None, progress=None) -> RunResult:
    cfg.validate()
    out = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    catalog = Catalog.load(cfg.catalog) if cfg.catalog else default_catalog()
    tasks = catalog.for_env(cfg.env)
    if not tasks:
        raise ConfigError([f"catalog has no tasks for env {cfg.env!r}"])
    eval_tasks = [catalog[t] for t in cfg.eval_tasks] if cfg.eval_tasks else tasks
    env = Environment(catalog)
    bank = build_bank(cfg, catalog) if cfg.method.needs_retrieval else None

    params = init_params(64, cfg.hidden, cfg.seed, cfg.skill_gain, cfg.obs_gain)
    ref_params = params.copy()
    optim = OptimState.zeros(params.size)
    root = RngStream(cfg.seed, 0x5D4)

    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        with open(out / "config.resolved.json", "w", encoding="utf-8") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        params.save(out / "checkpoints" / "params_step0.bin")
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")

    records: list[dict] = []
    final_success = None
    try:
        for step in range(1, cfg.steps + 1):
            t0 = time.perf_counter()
            srng = root.derive(step)
            picks = srng.derive(0x7A5).integers(0, len(tasks), size=cfg.tasks_per_batch)
            batch = [
                collect_group(params, tasks[int(k)], cfg.method, bank, srng.derive(1, j), cfg.group_size, env,
                              ref_params)
                for j, k in enumerate(picks)
            ]
            params, optim, rec, report = train_step(
                params, optim, batch, cfg.method, cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps,
                cfg.grad_clip,
            )
            if step % cfg.eval_every == 0 or step == cfg.steps:
                final_success, _ = evaluate(params, eval_tasks, cfg.eval_with_skills, bank, env)
                rec["success_rate"] = final_success
                if out is not None:
                    params.save(out / "checkpoints" / f"params_step{step}.bin")
            if cfg.method.needs_teacher and step % PROFILE_EVERY == 0:
                rec["gap_per_turn"], rec["gap_per_position"], _ = gap_profiles(batch)
            if cfg.log_timing:
                rec["ms"] = (time.perf_counter() - t0) * 1e3
            ordered = {k: rec[k] for k in METRIC_KEYS if k in rec}
            ordered.update({k: v for k, v in rec.items() if k not in ordered})
            records.append(ordered)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(ordered) + "\n")
                metrics_fh.flush()
                if bank is not None:
                    bank.save_stats(out / "bank_stats.json")
            if progress is not None:
                progress(ordered)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    summary = None
    metrics = None
    if out is not None:
        metrics = out / "metrics.jsonl"
        summary = out / "summary.csv"
        cols = [k for k in METRIC_KEYS if k != "ms" or cfg.log_timing]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            w.writerow([_fmt(r.get(k)) for k in cols])
        summary.write_text(buf.getvalue(), encoding="utf-8")
    return RunResult(params, metrics, summary, records, final_success, bank)
