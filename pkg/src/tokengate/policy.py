"""Bag-of-tokens tanh policy with exact analytic gradients.

Feature layout (F = 5V + 3)::

    [task bag | observation bag | skill bag | turn-response bag | last token one-hot
     | turn index / horizon | position / (L_RESP + 1) | 1.0]

The skill slice is the only difference between the student context and the
privileged teacher context.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .env import END, L_RESP, Environment, SkillText, Task
from .numkit import RngStream, log_softmax

BAG_CLIP = 3.0


class TokenOutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class MissingSkill(ValueError):
    pass


def feature_dim(V: int) -> int:
    return 5 * V + 3


def slices(V: int) -> dict[str, slice]:
    return {
        "task": slice(0, V),
        "obs": slice(V, 2 * V),
        "skill": slice(2 * V, 3 * V),
        "response": slice(3 * V, 4 * V),
        "last": slice(4 * V, 5 * V),
        "turn": slice(5 * V, 5 * V + 1),
        "pos": slice(5 * V + 1, 5 * V + 2),
        "bias": slice(5 * V + 2, 5 * V + 3),
    }


@dataclass
class PolicyParams:
    W1: np.ndarray  # H x F
    b1: np.ndarray  # H
    W2: np.ndarray  # V x H
    b2: np.ndarray  # V
    seed: int = 0
    step: int = 0

    @property
    def V(self) -> int:
        return self.W2.shape[0]

    @property
    def H(self) -> int:
        return self.W1.shape[0]

    @property
    def F(self) -> int:
        return self.W1.shape[1]

    @property
    def size(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def check(self) -> None:
        H, F = self.W1.shape
        V = self.W2.shape[0]
        if F != feature_dim(V) or self.b1.shape != (H,) or self.W2.shape != (V, H) or self.b2.shape != (V,):
            raise ShapeMismatch(
                f"inconsistent shapes W1{self.W1.shape} b1{self.b1.shape} W2{self.W2.shape} b2{self.b2.shape}"
            )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeMismatch(f"flat vector has {flat.size} entries, expected {self.size}")
        H, F, V = self.H, self.F, self.V
        o = 0
        W1 = flat[o : o + H * F].reshape(H, F); o += H * F
        b1 = flat[o : o + H]; o += H
        W2 = flat[o : o + V * H].reshape(V, H); o += V * H
        b2 = flat[o : o + V]
        return PolicyParams(W1.copy(), b1.copy(), W2.copy(), b2.copy(), self.seed, self.step)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.seed, self.step)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            np.zeros_like(self.W1), np.zeros_like(self.b1), np.zeros_like(self.W2), np.zeros_like(self.b2),
            self.seed, self.step,
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.W1, self.b1, self.W2, self.b2

    def snapshot(self, role: str) -> "PolicySnapshot":
        return PolicySnapshot(self.copy(), role)

    # ---- serialization: u32 header length | JSON header | little-endian f64 ---- #

    def save(self, path: str | Path) -> None:
        header = json.dumps({"V": self.V, "H": self.H, "F": self.F, "seed": self.seed, "step": self.step},
                            sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(n))
            flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        V, H, F = header["V"], header["H"], header["F"]
        proto = zeros(V, H)
        if F != proto.F:
            raise ShapeMismatch(f"header F={F} inconsistent with V={V}")
        p = proto.with_flat(flat)
        p.seed, p.step = header["seed"], header["step"]
        return p


@dataclass(frozen=True)
class PolicySnapshot:
    params: PolicyParams
    role: str

    def __post_init__(self):
        if self.role not in ("old", "reference"):
            raise ValueError(f"unknown snapshot role {self.role!r}")
        for a in self.params.arrays():
            a.setflags(write=False)


def zeros(V: int = 64, H: int = 64) -> PolicyParams:
    F = feature_dim(V)
    return PolicyParams(np.zeros((H, F)), np.zeros(H), np.zeros((V, H)), np.zeros(V))


def init_params(
    V: int = 64, H: int = 64, seed: int = 0, skill_gain: float = 0.0, obs_gain: float = 0.0
) -> PolicyParams:
    """Glorot-uniform weights, zero biases.

    Nonzero gains add ``gain * W2.T`` to the skill-bag (resp. observation-bag)
    columns of W1, so a token present in that context raises the logit of the
    same token: a tied-embedding copy prior standing in for a pretrained
    model's habit of echoing its prompt.
    """
    F = feature_dim(V)
    rng = RngStream(seed, 0x9A7A)
    a1 = math.sqrt(6.0 / (F + H))
    a2 = math.sqrt(6.0 / (H + V))
    W1 = rng.uniform_range(-a1, a1, size=(H, F))
    W2 = rng.uniform_range(-a2, a2, size=(V, H))
    if skill_gain:
        W1[:, slices(V)["skill"]] += skill_gain * W2.T
    if obs_gain:
        W1[:, slices(V)["obs"]] += obs_gain * W2.T
    return PolicyParams(W1, np.zeros(H), W2, np.zeros(V), seed=seed)


# --------------------------------------------------------------------------- #
# featurization


def _bag(tokens: Sequence[int], V: int) -> np.ndarray:
    b = np.zeros(V)
    for t in tokens:
        if not 0 <= t < V:
            raise TokenOutOfRange(f"token id {t} outside [0, {V})")
        b[t] += 1.0
    return np.minimum(b, BAG_CLIP)


def featurize(
    task_tokens: Sequence[int],
    obs_tokens: Sequence[int],
    skill: SkillText | Sequence[int] | None,
    emitted: Sequence[int],
    turn_index: int,
    within_pos: int,
    horizon: int = 1,
    V: int = 64,
) -> np.ndarray:
    """Feature vector for one decoding position; skill slice is zero iff skill is None."""
    sl = slices(V)
    x = np.zeros(feature_dim(V))
    x[sl["task"]] = _bag(task_tokens, V)
    x[sl["obs"]] = _bag(obs_tokens, V)
    if skill is not None:
        x[sl["skill"]] = skill_bag(skill, V)
    x[sl["response"]] = _bag(emitted, V)
    if emitted:
        x[sl["last"]][emitted[-1]] = 1.0
    x[sl["turn"]] = turn_index / max(horizon, 1)
    x[sl["pos"]] = within_pos / (L_RESP + 1)
    x[sl["bias"]] = 1.0
    return x


def skill_bag(skill: SkillText | Sequence[int], V: int = 64) -> np.ndarray:
    tokens = skill.tokens if isinstance(skill, SkillText) else skill
    return _bag(tokens, V)


def forward(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.F:
        raise ShapeMismatch(f"feature length {features.shape[-1]} != F={params.F}")
    hid = np.tanh(features @ params.W1.T + params.b1)
    return hid @ params.W2.T + params.b2


def token_logprob_and_entropy(params: PolicyParams, features: np.ndarray, token: int) -> tuple[float, float]:
    if not 0 <= token < params.V:
        raise TokenOutOfRange(f"token id {token} outside [0, {params.V})")
    if len(features) != params.F:
        raise ShapeMismatch(f"feature length {len(features)} != F={params.F}")
    lp, h = kernels.token_logprobs(*params.arrays(), np.ascontiguousarray(features, dtype=np.float64))
    return float(lp[token]), float(h)


# --------------------------------------------------------------------------- #
# trajectories


@dataclass
class Trajectory:
    task_id: str
    tokens: np.ndarray  # int, length T
    turn: np.ndarray  # int
    pos: np.ndarray  # int, within-turn position
    features: np.ndarray  # T x F, student branch
    student_lp: np.ndarray
    entropy: np.ndarray
    reward: float = 0.0
    mask: np.ndarray | None = None
    old_lp: np.ndarray | None = None
    teacher_lp: np.ndarray | None = None
    ref_lp: np.ndarray | None = None
    teacher_features: np.ndarray | None = field(default=None, repr=False)
    student_logp: np.ndarray | None = field(default=None, repr=False)  # T x V, full-vocab objectives only
    teacher_logp: np.ndarray | None = field(default=None, repr=False)
    skill_id: int | None = None
    num_turns: int = 0

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)


def rollout(
    params: PolicyParams,
    env: Environment,
    task: Task | str,
    skill_for_student: SkillText | None = None,
    rng: RngStream | None = None,
    temperature: float = 1.0,
) -> Trajectory:
    """Sample one episode; ``temperature=0`` decodes greedily."""
    if rng is None and temperature != 0:
        raise ValueError("sampling rollouts need an rng stream")
    obs = env.reset(task, rng)
    task = env.task
    V = params.V
    W1, b1, W2, b2 = params.arrays()
    step_fn = kernels.token_logprobs
    toks, turns, poss, feats, lps, ents = [], [], [], [], [], []
    reward, done, turn = 0.0, False, 0
    sl = slices(V)
    resp, last, pos_slot = sl["response"].start, sl["last"].start, sl["pos"].start
    while not done:
        base = featurize(task.description, obs.tokens, skill_for_student, (), turn, 0, task.horizon, V)
        emitted: list[int] = []
        for pos in range(L_RESP + 1):
            x = base.copy()
            if emitted:
                for t in emitted:
                    x[resp + t] = min(x[resp + t] + 1.0, BAG_CLIP)
                x[last + emitted[-1]] = 1.0
                x[pos_slot] = pos / (L_RESP + 1)
            lp, h = step_fn(W1, b1, W2, b2, x)
            if temperature == 0:
                tok = int(np.argmax(lp))
            elif temperature == 1:
                tok = rng.sample_categorical(lp)
            else:
                tok = rng.sample_categorical(log_softmax(lp / temperature))
            toks.append(tok); turns.append(turn); poss.append(pos)
            feats.append(x); lps.append(lp[tok]); ents.append(h)
            emitted.append(tok)
            if tok == END:
                break
        obs, r, done = env.step(emitted)
        reward += r
        turn += 1
    return Trajectory(
        task_id=task.task_id,
        tokens=np.array(toks, dtype=np.int64),
        turn=np.array(turns, dtype=np.int64),
        pos=np.array(poss, dtype=np.int64),
        features=np.array(feats),
        student_lp=np.array(lps),
        entropy=np.array(ents),
        reward=reward,
        num_turns=turn,
    )


def teacher_features(traj: Trajectory, skill: SkillText | Sequence[int], V: int = 64) -> np.ndarray:
    X = traj.features.copy()
    X[:, slices(V)["skill"]] = skill_bag(skill, V)
    return X


def rows_logprobs(params: PolicyParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full (T x V) log-prob matrix and entropies via the selected kernel."""
    if X.shape[1] != params.F:
        raise ShapeMismatch(f"feature width {X.shape[1]} != F={params.F}")
    return kernels.rows_logprobs(*params.arrays(), np.ascontiguousarray(X, dtype=np.float64))


def rescore(
    params: PolicyParams | PolicySnapshot,
    traj: Trajectory,
    mode: str = "student",
    skill: SkillText | Sequence[int] | None = None,
) -> np.ndarray:
    """Per-token log-probs of the trajectory's tokens under the requested branch.

    ``mode`` is one of student, teacher (needs ``skill``), reference, old; the
    latter two only differ from student in which parameters are passed.
    """
    if isinstance(params, PolicySnapshot):
        params = params.params
    if mode == "teacher":
        if skill is None:
            raise MissingSkill("teacher rescoring needs a skill")
        X = teacher_features(traj, skill, params.V)
    elif mode in ("student", "reference", "old"):
        X = traj.features
    else:
        raise ValueError(f"unknown rescore mode {mode!r}")
    lp, _ = rows_logprobs(params, X)
    return lp[np.arange(len(traj)), traj.tokens]


# --------------------------------------------------------------------------- #
# gradients


def _hidden(params: PolicyParams, X: np.ndarray):
    hid = np.tanh(X @ params.W1.T + params.b1)
    logits = hid @ params.W2.T + params.b2
    return hid, logits


def backward_logits(params: PolicyParams, X: np.ndarray, dlogits: np.ndarray) -> PolicyParams:
    """Gradient of sum_t <dlogits_t, logits_t> with respect to the parameters."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.F or dlogits.shape != (X.shape[0], params.V):
        raise ShapeMismatch(f"features {X.shape} / dlogits {dlogits.shape} vs params F={params.F}, V={params.V}")
    hid = np.tanh(X @ params.W1.T + params.b1)
    gW2 = dlogits.T @ hid
    gb2 = dlogits.sum(axis=0)
    dpre = (dlogits @ params.W2) * (1.0 - hid * hid)
    gW1 = dpre.T @ X
    gb1 = dpre.sum(axis=0)
    return PolicyParams(gW1, gb1, gW2, gb2, params.seed, params.step)


def logprob_dlogits(params: PolicyParams, X: np.ndarray, tokens: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """d/dlogits of sum_t coef_t * log pi(tokens_t | X_t)."""
    _, logits = _hidden(params, X)
    p = np.exp(log_softmax(logits))
    d = -p * coef[:, None]
    d[np.arange(len(tokens)), tokens] += coef
    return d


def grad_token_sum(params: PolicyParams, X: np.ndarray, tokens: np.ndarray, coef: np.ndarray) -> PolicyParams:
    """Gradient of sum_t coef_t * log pi(tokens_t | X_t)."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (len(tokens),):
        raise ShapeMismatch(f"{coef.shape[0] if coef.ndim else 0} weights for {len(tokens)} tokens")
    return backward_logits(params, X, logprob_dlogits(params, X, tokens, coef))


def backward_weighted_logprob(
    params: PolicyParams, traj: Trajectory, features: np.ndarray | None, weights: np.ndarray
) -> PolicyParams:
    """Exact gradient of Agg(w_t * log pi(y_t | x_t)) with w detached; masked tokens ignored."""
    X = traj.features if features is None else features
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(traj),):
        raise ShapeMismatch(f"{w.size} weights for {len(traj)} tokens")
    m = traj.mask
    n = m.sum()
    coef = np.where(m > 0, w, 0.0) / n if n > 0 else np.zeros_like(w)
    return grad_token_sum(params, X, traj.tokens, coef)


def per_token_grad_norms(params: PolicyParams, X: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """||grad log pi(y_t | x_t)||_2 for each row, one backward per token."""
    out = np.empty(len(tokens))
    for t in range(len(tokens)):
        g = grad_token_sum(params, X[t : t + 1], tokens[t : t + 1], np.ones(1))
        out[t] = np.linalg.norm(g.flat())
    return out


def add_scaled(acc: PolicyParams, g: PolicyParams, scale: float = 1.0) -> None:
    acc.W1 += scale * g.W1
    acc.b1 += scale * g.b1
    acc.W2 += scale * g.W2
    acc.b2 += scale * g.b2
