"""Measurement harness: complexity, rollouts, comparisons, latency.

Symbolic complexity counts atoms in the canonical serialization
(convention "v1": every printable token except structural punctuation;
IF/THEN/ELSE keywords are structure, the default branch's TRUE guard is
a constant). Rollout comparisons pair teacher and student on identical
seeds; the ablation grid swaps out one pipeline stage per cell.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .conceptizer import Conceptizer
from .dsr import ExpressionTree, compile_tree, evaluate, print_prefix
from .env import EnvConfig, make_env
from .errors import ConfigError
from .kpm import TASK_SLICING, KpmState
from .logic import DecisionTable
from .nets import AdamState, FeedForwardNet
from .teacher import NeuralTeacher, ScriptedTeacher, continuous_head, head_action

OMEGA_CONVENTION = "v1"

_OPERATOR_TOKENS = {"+", "-", "*", "/", "log", "exp", "log1p"}


@dataclass
class OmegaReport:
    variables: int = 0
    constants: int = 0
    operators: int = 0
    comparators: int = 0
    connectives: int = 0
    action_labels: int = 0
    convention: str = OMEGA_CONVENTION

    @property
    def total(self) -> int:
        return (self.variables + self.constants + self.operators
                + self.comparators + self.connectives + self.action_labels)

    def to_dict(self) -> dict:
        return {
            "total": self.total, "variables": self.variables,
            "constants": self.constants, "operators": self.operators,
            "comparators": self.comparators, "connectives": self.connectives,
            "action_labels": self.action_labels, "convention": self.convention,
        }


def omega(policy) -> OmegaReport:
    """Atom count of a symbolic policy's canonical serialization."""
    if isinstance(policy, ExpressionTree):
        return _omega_expression(policy)
    if isinstance(policy, DecisionTable):
        return _omega_table(policy)
    if isinstance(policy, (list, tuple)) and all(
        isinstance(p, ExpressionTree) for p in policy
    ):
        reports = [_omega_expression(p) for p in policy]
        out = OmegaReport()
        for r in reports:
            out.variables += r.variables
            out.constants += r.constants
            out.operators += r.operators
        return out
    raise ConfigError(f"cannot count atoms of {type(policy).__name__}")


def _omega_expression(tree: ExpressionTree) -> OmegaReport:
    text = print_prefix(tree)
    report = OmegaReport()
    for token in text.replace("(", " ").replace(")", " ").split():
        if token in _OPERATOR_TOKENS:
            report.operators += 1
        elif re.fullmatch(r"c\d+", token):
            report.variables += 1
        else:
            float(token)  # raises on unknown node kinds
            report.constants += 1
    return report


def omega_rule(branch) -> OmegaReport:
    """Atom count of a single IF-THEN rule (no else branch)."""
    report = OmegaReport()
    for op, _k, k2, _thr in branch.tests:
        report.variables += 1 if k2 is None else 2
        if op == "diff_gt":
            report.operators += 1  # the explicit minus in "ck - ck2"
        report.comparators += 1
        report.constants += 1
    report.connectives += len(branch.tests) - 1  # ANDs
    report.action_labels += 1
    return report


def _omega_table(table: DecisionTable) -> OmegaReport:
    report = OmegaReport()
    for branch in table.branches:
        r = omega_rule(branch)
        report.variables += r.variables
        report.constants += r.constants
        report.operators += r.operators
        report.comparators += r.comparators
        report.connectives += r.connectives
        report.action_labels += r.action_labels
    # the else branch serializes as a TRUE guard plus its action
    report.constants += 1
    report.action_labels += 1
    return report


# -- policy adapters -----------------------------------------------------------


class ScriptedPolicy:
    """Oracle policy; needs the env's true-concept diagnostic channel."""

    def __init__(self, teacher: ScriptedTeacher):
        self.teacher = teacher
        self.task = teacher.task

    def reset(self) -> None:
        self.teacher.reset_noise()

    def act(self, state: KpmState, true_concepts: np.ndarray | None):
        if true_concepts is None:
            raise ConfigError("scripted policy needs expose_true_concepts=True")
        _, a = self.teacher.act(true_concepts)
        return a


class NeuralPolicy:
    def __init__(self, teacher: NeuralTeacher):
        self.teacher = teacher
        self.task = teacher.task

    def reset(self) -> None:
        pass

    def act(self, state: KpmState, true_concepts=None):
        _, a = self.teacher.act(state)
        return a


class ExpressionPolicy:
    """Concept layer followed by one expression tree per action dimension."""

    def __init__(self, conceptizer: Conceptizer, trees: list[ExpressionTree]):
        self.conceptizer = conceptizer
        self.trees = trees
        self.task = conceptizer.template.task

    def reset(self) -> None:
        pass

    def act_with_concepts(self, state: KpmState):
        c = self.conceptizer.conceptize(state)
        z = np.array([evaluate(t, c[None, :])[0] for t in self.trees])
        return continuous_head(z), c

    def act(self, state: KpmState, true_concepts=None):
        return self.act_with_concepts(state)[0]


class TablePolicy:
    """Concept layer followed by a compiled decision table."""

    def __init__(self, conceptizer: Conceptizer, table: DecisionTable):
        self.conceptizer = conceptizer
        self.table = table
        self.task = conceptizer.template.task

    def reset(self) -> None:
        pass

    def act_with_concepts(self, state: KpmState):
        c = self.conceptizer.conceptize(state)
        return self.table.evaluate(c), c

    def act(self, state: KpmState, true_concepts=None):
        return self.act_with_concepts(state)[0]


class HeadPolicy:
    """Ablation students: linear or dense head on the concept vector."""

    def __init__(self, conceptizer: Conceptizer, net: FeedForwardNet, task: str):
        self.conceptizer = conceptizer
        self.net = net
        self.task = task

    def reset(self) -> None:
        pass

    def act_with_concepts(self, state: KpmState):
        c = self.conceptizer.conceptize(state)
        return head_action(self.task, self.net.forward(c)), c

    def act(self, state: KpmState, true_concepts=None):
        return self.act_with_concepts(state)[0]


class UniformSlicingPolicy:
    task = TASK_SLICING

    def reset(self) -> None:
        pass

    def act(self, state: KpmState, true_concepts=None):
        return np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])


class ShieldedPolicy:
    """Wraps any policy with the two-stage shield."""

    def __init__(self, base, shield, conceptizer: Conceptizer | None = None):
        self.base = base
        self.shield = shield
        self.conceptizer = conceptizer
        self.task = base.task

    def reset(self) -> None:
        self.base.reset()
        self.shield.log.clear()

    def act(self, state: KpmState, true_concepts=None):
        if hasattr(self.base, "act_with_concepts"):
            action, c = self.base.act_with_concepts(state)
        else:
            action = self.base.act(state, true_concepts)
            if self.conceptizer is None:
                raise ConfigError("shielding a non-concept policy needs a conceptizer")
            c = self.conceptizer.conceptize(state)
        return self.shield.apply(action, c, state).action


# -- rollouts --------------------------------------------------------------------


@dataclass
class EpisodeSummary:
    rewards: np.ndarray
    v_thp: np.ndarray
    v_dly: np.ndarray
    seed: int
    shield_triggers: int = 0
    empty: bool = False

    @property
    def mean_reward(self) -> float:
        return 0.0 if self.empty else float(np.mean(self.rewards))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "mean_reward": self.mean_reward,
            "mean_v_thp": 0.0 if self.empty else float(np.mean(self.v_thp)),
            "mean_v_dly": 0.0 if self.empty else float(np.mean(self.v_dly)),
            "shield_triggers": self.shield_triggers, "steps": len(self.rewards),
        }


def run_episode(env_cfg: EnvConfig, policy, steps: int, seed: int | None = None,
                shield=None) -> EpisodeSummary:
    """Seeded rollout; optionally wraps the policy with a shield."""
    cfg = replace(env_cfg, seed=env_cfg.seed if seed is None else seed)
    if shield is not None:
        policy = ShieldedPolicy(policy, shield)
    if policy.task != cfg.task:
        raise ConfigError(
            f"policy task {policy.task!r} does not match env task {cfg.task!r}"
        )
    env = make_env(cfg)
    env.reset()
    policy.reset()
    rewards, v_thp, v_dly = [], [], []
    for _ in range(steps):
        tc = env.true_concepts if cfg.expose_true_concepts else None
        action = policy.act(env.state, tc)
        outcome = env.step(action)
        rewards.append(outcome.reward)
        v_thp.append(float(np.mean(outcome.thp_violation)))
        v_dly.append(float(np.mean(outcome.dly_violation)))
    triggers = policy.shield.trigger_count if isinstance(policy, ShieldedPolicy) else 0
    return EpisodeSummary(
        rewards=np.array(rewards), v_thp=np.array(v_thp), v_dly=np.array(v_dly),
        seed=cfg.seed, shield_triggers=triggers, empty=(steps == 0),
    )


def cdf_points(samples: np.ndarray, grid: int = 64) -> list[tuple[float, float]]:
    """Monotone CDF sample points (value, fraction <= value)."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        return []
    idx = np.unique(np.linspace(0, x.size - 1, num=min(grid, x.size)).astype(int))
    return [(float(x[i]), float((i + 1) / x.size)) for i in idx]


@dataclass
class ComparisonReport:
    teacher_mean_reward: float
    student_mean_reward: float
    recovery_ratio: float
    teacher_v_thp: float
    student_v_thp: float
    teacher_v_dly: float
    student_v_dly: float
    seeds: list[int]
    steps: int
    reward_cdf_teacher: list = field(default_factory=list)
    reward_cdf_student: list = field(default_factory=list)
    shield_triggers: int = 0
    omega_student: dict | None = None
    latency_ratio: float | None = None
    action_agreement: float | None = None

    def to_dict(self) -> dict:
        return {
            "teacher_mean_reward": self.teacher_mean_reward,
            "student_mean_reward": self.student_mean_reward,
            "recovery_ratio": self.recovery_ratio,
            "teacher_v_thp": self.teacher_v_thp,
            "student_v_thp": self.student_v_thp,
            "teacher_v_dly": self.teacher_v_dly,
            "student_v_dly": self.student_v_dly,
            "seeds": self.seeds, "steps": self.steps,
            "reward_cdf_teacher": self.reward_cdf_teacher,
            "reward_cdf_student": self.reward_cdf_student,
            "shield_triggers": self.shield_triggers,
            "omega_student": self.omega_student,
            "latency_ratio": self.latency_ratio,
            "action_agreement": self.action_agreement,
        }


def compare_policies(env_cfg: EnvConfig, teacher_policy, student_policy,
                     seeds: list[int], steps: int,
                     student_shield=None) -> ComparisonReport:
    """Paired rollouts on identical seeds; CDFs pool per-step values."""
    if len(seeds) < 3:
        raise ConfigError("comparisons need at least three seeds")
    t_rewards, s_rewards = [], []
    t_thp, s_thp, t_dly, s_dly = [], [], [], []
    triggers = 0
    for seed in sorted(seeds):
        te = run_episode(env_cfg, teacher_policy, steps, seed=seed)
        st = run_episode(env_cfg, student_policy, steps, seed=seed,
                         shield=student_shield)
        t_rewards.append(te.rewards)
        s_rewards.append(st.rewards)
        t_thp.append(te.v_thp)
        s_thp.append(st.v_thp)
        t_dly.append(te.v_dly)
        s_dly.append(st.v_dly)
        triggers += st.shield_triggers
    t_all = np.concatenate(t_rewards)
    s_all = np.concatenate(s_rewards)
    t_mean = float(np.mean(t_all))
    ratio = float(np.mean(s_all) / t_mean) if abs(t_mean) > 1e-12 else float("nan")
    return ComparisonReport(
        teacher_mean_reward=t_mean,
        student_mean_reward=float(np.mean(s_all)),
        recovery_ratio=ratio,
        teacher_v_thp=float(np.mean(np.concatenate(t_thp))),
        student_v_thp=float(np.mean(np.concatenate(s_thp))),
        teacher_v_dly=float(np.mean(np.concatenate(t_dly))),
        student_v_dly=float(np.mean(np.concatenate(s_dly))),
        seeds=sorted(seeds), steps=steps,
        reward_cdf_teacher=cdf_points(t_all),
        reward_cdf_student=cdf_points(s_all),
        shield_triggers=triggers,
    )


# -- latency ---------------------------------------------------------------------


@dataclass
class LatencyReport:
    per_decision_us: dict
    ratios_vs: dict
    repetitions: int
    low_confidence: bool

    def to_dict(self) -> dict:
        return {"per_decision_us": self.per_decision_us, "ratios_vs": self.ratios_vs,
                "repetitions": self.repetitions, "low_confidence": self.low_confidence}


def latency_bench(callables: dict, corpora: dict, repetitions: int = 5,
                  reference: str = "teacher") -> LatencyReport:
    """Median-of-repetitions wall time per decision for each callable.

    `corpora[name]` is the list of inputs fed one at a time (per-decision
    latency, not batch throughput). Ratios are reference/student.
    """
    if any(len(c) == 0 for c in corpora.values()):
        raise ValueError("latency corpus must be nonempty")
    times = {}
    for name, fn in callables.items():
        corpus = corpora[name]
        for x in corpus[: min(len(corpus), 256)]:
            fn(x)  # warm-up
        reps = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for x in corpus:
                fn(x)
            reps.append((time.perf_counter() - t0) / len(corpus))
        times[name] = float(np.median(reps) * 1e6)
    ratios = {
        name: times[reference] / times[name]
        for name in times
        if name != reference and reference in times
    }
    return LatencyReport(times, ratios, repetitions, low_confidence=repetitions < 2)


def expression_callable(trees: list[ExpressionTree]):
    """Compiled per-decision closure for the expression student."""
    fns = [compile_tree(t) for t in trees]

    def run(c):
        return [f(c) for f in fns]

    return run


def neural_callable(teacher: NeuralTeacher):
    net = teacher.net

    def run(flat):
        return net.forward(flat)

    return run


# -- ablation heads ----------------------------------------------------------------


def fit_linear_head(concepts: np.ndarray, z: np.ndarray) -> FeedForwardNet:
    """Least-squares linear map from concepts to teacher outputs."""
    c1 = np.hstack([concepts, np.ones((len(concepts), 1))])
    coef, *_ = np.linalg.lstsq(c1, z, rcond=None)
    net = FeedForwardNet.create(
        [concepts.shape[1], z.shape[1]], ["identity"], np.random.default_rng(0)
    )
    net.layers[0].weight = coef[:-1].T.copy()
    net.layers[0].bias = coef[-1].copy()
    return net


def fit_mlp_head(concepts: np.ndarray, z: np.ndarray, hidden: int = 64,
                 steps: int = 4000, lr: float = 3e-3,
                 seed: int = 0) -> FeedForwardNet:
    rng = np.random.default_rng(seed)
    net = FeedForwardNet.create(
        [concepts.shape[1], hidden, hidden, z.shape[1]],
        ["tanh", "tanh", "identity"], rng,
    )
    opt = AdamState.for_size(net.param_count, lr=lr)
    n = len(concepts)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(256, n))
        pred, cache = net.forward_cached(concepts[idx])
        resid = pred - z[idx]
        grads, _ = net.backward(cache, 2.0 * resid / resid.size)
        net.set_params(opt.apply(net.get_params(), net.flatten_grads(grads)))
    return net
