"""Discrete-action distiller: differentiable rules compiled to IF-THEN.

Predicates are sigmoid tests over concepts (per-concept low/high
thresholds plus comparison predicates for flagged pairs), masked so each
depends only on its defining concepts. Rules conjoin 1-3 predicates via
the product t-norm; per-action attention pools rule activations into
student logits, trained against tempered teacher logits with a KL
objective. Compilation keeps each action's dominant rules, crispifies
every predicate at the sigmoid midpoint, and emits a first-match table.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError
from .nets import AdamState, log_softmax, sigmoid

GAIN_INIT = 8.0
DEFAULT_KAPPA = 2.0
DEFAULT_PRUNE_THRESHOLD = 0.1


@dataclass
class Predicate:
    """Soft test over concepts; gain kept positive by exp-reparameterization."""

    kind: str  # "high" | "low" | "cmp"
    k: int
    k2: int | None = None
    log_gain: float = math.log(GAIN_INIT)
    bias: float = 0.0

    def __post_init__(self):
        if self.kind not in ("high", "low", "cmp"):
            raise ConfigError(f"unknown predicate kind: {self.kind!r}")
        if self.kind == "cmp" and self.k2 is None:
            raise ConfigError("comparison predicates need a second concept")

    @property
    def gain(self) -> float:
        return math.exp(self.log_gain)

    def support(self) -> set[int]:
        return {self.k} if self.kind != "cmp" else {self.k, self.k2}

    def signal(self, c: np.ndarray) -> np.ndarray:
        """The masked linear form the sigmoid is applied to, minus bias."""
        if self.kind == "high":
            return c[..., self.k]
        if self.kind == "low":
            return -c[..., self.k]
        return c[..., self.k] - c[..., self.k2]

    def crisp_test(self) -> tuple:
        """Hard form at the sigmoid midpoint: sigma(g*x + b) >= 0.5 <=> x >= -b/g."""
        thr = -self.bias / self.gain
        if self.kind == "high":
            return ("gt", self.k, None, thr)
        if self.kind == "low":
            return ("lt", self.k, None, -thr)
        return ("diff_gt", self.k, self.k2, thr)

    def describe(self) -> str:
        op, k, k2, thr = self.crisp_test()
        if op == "gt":
            return f"c{k} > {thr:.4g}"
        if op == "lt":
            return f"c{k} < {thr:.4g}"
        return f"c{k} - c{k2} > {thr:.4g}"


@dataclass
class Rule:
    predicates: tuple[int, ...]  # 1..3 predicate indices
    head: int
    w: float = 0.0  # attention logit

    def __post_init__(self):
        if not (1 <= len(self.predicates) <= 3):
            raise ConfigError("rules conjoin one to three predicates")


class RuleSet:
    """Vocabulary, partitioned rules, and the soft scoring machinery."""

    def __init__(self, predicates: list[Predicate], rules: list[Rule],
                 n_concepts: int, n_actions: int,
                 kappa: float = DEFAULT_KAPPA,
                 prune_threshold: float = DEFAULT_PRUNE_THRESHOLD):
        if kappa <= 0:
            raise ConfigError("temperature must be positive")
        self.predicates = predicates
        self.rules = rules
        self.n_concepts = n_concepts
        self.n_actions = n_actions
        self.kappa = kappa
        self.prune_threshold = prune_threshold
        self.partitions: list[list[int]] = [[] for _ in range(n_actions)]
        for i, rule in enumerate(rules):
            if not (0 <= rule.head < n_actions):
                raise ConfigError(f"rule head {rule.head} out of range")
            self.partitions[rule.head].append(i)
        for n, part in enumerate(self.partitions):
            if not part:
                raise ConfigError(f"action {n} has no proposing rules")

    # -- parameters ----------------------------------------------------------

    def get_params(self) -> np.ndarray:
        return np.concatenate([
            [p.log_gain for p in self.predicates],
            [p.bias for p in self.predicates],
            [r.w for r in self.rules],
        ])

    def set_params(self, flat: np.ndarray) -> None:
        p = len(self.predicates)
        for i, pred in enumerate(self.predicates):
            pred.log_gain = float(flat[i])
            pred.bias = float(flat[p + i])
        for j, rule in enumerate(self.rules):
            rule.w = float(flat[2 * p + j])

    @property
    def param_count(self) -> int:
        return 2 * len(self.predicates) + len(self.rules)

    # -- soft evaluation -------------------------------------------------------

    def _signals(self, c: np.ndarray) -> np.ndarray:
        return np.stack([p.signal(c) for p in self.predicates], axis=-1)

    def membership_matrix(self) -> np.ndarray:
        """(rules x predicates) 0/1 membership, used by the vectorized
        training path."""
        m = np.zeros((len(self.rules), len(self.predicates)))
        for j, rule in enumerate(self.rules):
            for p in rule.predicates:
                m[j, p] = 1.0
        return m

    def valuate(self, c: np.ndarray) -> np.ndarray:
        """Predicate confidences in [0,1]^P; batched over leading axis."""
        x = self._signals(np.asarray(c, dtype=np.float64))
        gains = np.array([p.gain for p in self.predicates])
        biases = np.array([p.bias for p in self.predicates])
        return sigmoid(gains * x + biases)

    def rule_activations(self, v: np.ndarray) -> np.ndarray:
        """Product t-norm over each rule's member confidences."""
        v = np.atleast_2d(v)
        acts = np.ones((v.shape[0], len(self.rules)))
        for j, rule in enumerate(self.rules):
            for p in rule.predicates:
                acts[:, j] *= v[:, p]
        return acts

    def attention(self) -> np.ndarray:
        """Per-rule attention, softmax-normalized within each partition."""
        alpha = np.zeros(len(self.rules))
        w = np.array([r.w for r in self.rules])
        for part in self.partitions:
            idx = np.array(part)
            alpha[idx] = np.exp(w[idx] - np.max(w[idx]))
            alpha[idx] /= alpha[idx].sum()
        return alpha

    def logits_from_valuation(self, v: np.ndarray) -> np.ndarray:
        """Student logits: attention-weighted activation sums per action."""
        v2 = np.atleast_2d(v)
        acts = self.rule_activations(v2)
        alpha = self.attention()
        z = np.zeros((v2.shape[0], self.n_actions))
        for n, part in enumerate(self.partitions):
            idx = np.array(part)
            z[:, n] = acts[:, idx] @ alpha[idx]
        return z if np.asarray(v).ndim > 1 else z[0]

    def logits(self, c: np.ndarray) -> np.ndarray:
        v = self.valuate(np.atleast_2d(c))
        z = self.logits_from_valuation(v)
        return z if np.asarray(c).ndim > 1 else z[0]

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "symran-ruleset",
            "version": 1,
            "n_concepts": self.n_concepts,
            "n_actions": self.n_actions,
            "kappa": self.kappa,
            "prune_threshold": self.prune_threshold,
            "predicates": [
                {"kind": p.kind, "k": p.k, "k2": p.k2,
                 "log_gain": p.log_gain, "bias": p.bias}
                for p in self.predicates
            ],
            "rules": [
                {"predicates": list(r.predicates), "head": r.head, "w": r.w}
                for r in self.rules
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "RuleSet":
        preds = [
            Predicate(x["kind"], x["k"], x["k2"], x["log_gain"], x["bias"])
            for x in d["predicates"]
        ]
        rules = [Rule(tuple(x["predicates"]), x["head"], x["w"]) for x in d["rules"]]
        return RuleSet(preds, rules, d["n_concepts"], d["n_actions"],
                       d["kappa"], d["prune_threshold"])


def valuate_predicates(ruleset: RuleSet, c: np.ndarray) -> np.ndarray:
    return ruleset.valuate(c)


def rule_activation(rule: Rule, v: np.ndarray) -> float:
    out = 1.0
    for p in rule.predicates:
        out *= float(v[p])
    return out


def student_logits(ruleset: RuleSet, v: np.ndarray) -> np.ndarray:
    """Logits from a predicate-confidence vector (or batch of them)."""
    return ruleset.logits_from_valuation(v)


# -- vocabulary and rule pool --------------------------------------------------


def build_vocabulary(n_concepts: int, concept_quantiles: np.ndarray | None = None,
                     comparison_pairs: tuple[tuple[int, int], ...] = (),
                     gain_init: float = GAIN_INIT) -> list[Predicate]:
    """One low + one high threshold per concept, plus flagged comparisons.

    Thresholds start at the 40th/60th percentile of each concept's
    training distribution (or 0.4/0.6 without one); all learnable.
    """
    import math as _math

    lg = _math.log(gain_init)
    preds = []
    for k in range(n_concepts):
        q40 = 0.4 if concept_quantiles is None else float(concept_quantiles[0, k])
        q60 = 0.6 if concept_quantiles is None else float(concept_quantiles[1, k])
        preds.append(Predicate("low", k, log_gain=lg, bias=gain_init * q40))
        preds.append(Predicate("high", k, log_gain=lg, bias=-gain_init * q60))
    for k, k2 in comparison_pairs:
        preds.append(Predicate("cmp", k, k2, log_gain=lg, bias=-gain_init * 0.05))
    return preds


def build_rule_pool(predicates: list[Predicate], concepts: np.ndarray,
                    teacher_argmax: np.ndarray, n_concepts: int, n_actions: int,
                    top_triples_per_head: int = 50,
                    kappa: float = DEFAULT_KAPPA,
                    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD) -> RuleSet:
    """All size-1/2 conjunctions for every head; size-3 conjunctions ranked
    by pointwise mutual information with the teacher's argmax."""
    if len(concepts) == 0:
        raise ValueError("rule pool construction needs a nonempty buffer")
    p_count = len(predicates)
    rules = []
    for head in range(n_actions):
        for i in range(p_count):
            rules.append(Rule((i,), head))
        for i, j in combinations(range(p_count), 2):
            rules.append(Rule((i, j), head))

    probe = RuleSet(predicates, [Rule((0,), n) for n in range(n_actions)],
                    n_concepts, n_actions)
    crisp = probe.valuate(concepts) >= 0.5  # (N, P) at the initial thresholds
    n = len(concepts)
    eps = 1.0
    head_freq = np.array([(teacher_argmax == a).sum() for a in range(n_actions)])
    for head in range(n_actions):
        scored = []
        mask_head = teacher_argmax == head
        for triple in combinations(range(p_count), 3):
            fire = crisp[:, triple[0]] & crisp[:, triple[1]] & crisp[:, triple[2]]
            joint = float(np.sum(fire & mask_head))
            pmi = math.log(
                (joint + eps) * n / ((fire.sum() + eps) * (head_freq[head] + eps))
            )
            scored.append((pmi, triple))
        scored.sort(key=lambda t: (-t[0], t[1]))
        for _, triple in scored[:top_triples_per_head]:
            rules.append(Rule(triple, head))
    return RuleSet(predicates, rules, n_concepts, n_actions, kappa, prune_threshold)


# -- training --------------------------------------------------------------


def _center(z: np.ndarray) -> np.ndarray:
    """Zero-mean teacher logits per record (softmax-shift-invariant; kept so
    serialized targets are scale-comparable across tasks)."""
    return z - z.mean(axis=-1, keepdims=True)


def kl_loss_and_grad(ruleset: RuleSet, concepts: np.ndarray, teacher_z: np.ndarray,
                     want_grad: bool = True, membership: np.ndarray | None = None):
    """Mean tempered KL(teacher || student) and its analytic gradient over
    [log gains, biases, attention logits].

    Rule activations run in log space (one GEMM against the membership
    matrix) so large pools stay affordable.
    """
    c = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    z = np.atleast_2d(np.asarray(teacher_z, dtype=np.float64))
    if len(c) != len(z):
        raise ValueError("concept and logit batches differ in length")
    n = len(c)
    kappa = ruleset.kappa
    p_teacher = np.exp(log_softmax(_center(z) / kappa))
    if membership is None:
        membership = ruleset.membership_matrix()

    x = ruleset._signals(c)  # (N, P)
    gains = np.array([p.gain for p in ruleset.predicates])
    biases = np.array([p.bias for p in ruleset.predicates])
    v = sigmoid(gains * x + biases)
    v_safe = np.maximum(v, 1e-300)
    acts = np.exp(np.log(v_safe) @ membership.T)  # (N, U) product t-norm
    alpha = ruleset.attention()
    zs = np.zeros((n, ruleset.n_actions))
    for head, part in enumerate(ruleset.partitions):
        idx = np.array(part)
        zs[:, head] = acts[:, idx] @ alpha[idx]

    log_q = log_softmax(zs / kappa)
    log_p = np.log(np.maximum(p_teacher, 1e-300))
    loss = float(np.sum(p_teacher * (log_p - log_q), axis=1).mean())
    if not want_grad:
        return loss, None

    q = np.exp(log_q)
    dzs = (q - p_teacher) / (kappa * n)  # (N, A)

    d_alpha = np.zeros(len(ruleset.rules))
    d_acts = np.empty_like(acts)
    for head, part in enumerate(ruleset.partitions):
        idx = np.array(part)
        d_acts[:, idx] = dzs[:, head][:, None] * alpha[idx][None, :]
        d_alpha[idx] = dzs[:, head] @ acts[:, idx]
    # softmax jacobian within each partition
    d_w = np.zeros(len(ruleset.rules))
    for part in ruleset.partitions:
        idx = np.array(part)
        inner = float(alpha[idx] @ d_alpha[idx])
        d_w[idx] = alpha[idx] * (d_alpha[idx] - inner)

    # d act_u / d v_p = act_u / v_p for member predicates
    d_v = ((d_acts * acts) @ membership) / np.maximum(v, 1e-12)

    d_s = d_v * v * (1.0 - v)
    d_bias = d_s.sum(axis=0)
    d_log_gain = (d_s * x).sum(axis=0) * gains
    return loss, np.concatenate([d_log_gain, d_bias, d_w])


@dataclass
class LogicTraining:
    steps: int = 1500
    lr: float = 0.05
    seed: int = 0
    minibatch: int | None = None  # None = full batch


def distill_discrete(concepts: np.ndarray, teacher_z: np.ndarray, ruleset: RuleSet,
                     params: LogicTraining | None = None) -> list[float]:
    """Fit gains, thresholds and attention by tempered-KL descent.

    Returns the per-step KL history (full-batch loss when minibatching).
    """
    p = params or LogicTraining()
    c = np.asarray(concepts, dtype=np.float64)
    z = np.asarray(teacher_z, dtype=np.float64)
    if len(c) == 0:
        raise ValueError("cannot distill from an empty buffer")
    if z.shape[1] != ruleset.n_actions:
        raise ValueError(
            f"teacher logits have {z.shape[1]} entries, ruleset expects "
            f"{ruleset.n_actions}"
        )
    rng = np.random.default_rng(p.seed)
    opt = AdamState.for_size(ruleset.param_count, lr=p.lr)
    membership = ruleset.membership_matrix()
    history = []
    for step in range(p.steps):
        if p.minibatch is not None and p.minibatch < len(c):
            idx = rng.integers(0, len(c), size=p.minibatch)
            cb, zb = c[idx], z[idx]
        else:
            cb, zb = c, z
        opt.lr = p.lr * (1.0 + math.cos(math.pi * step / p.steps)) / 2.0
        loss, grad = kl_loss_and_grad(ruleset, cb, zb, membership=membership)
        if not math.isfinite(loss):
            raise ArithmeticError("non-finite distillation loss")
        ruleset.set_params(opt.apply(ruleset.get_params(), grad))
        history.append(loss)
    return history


# -- compilation ---------------------------------------------------------------


@dataclass
class Branch:
    tests: tuple[tuple, ...]  # crisp tests, all must hold
    action: int
    rule_id: int
    attention: float

    def holds(self, c: np.ndarray) -> bool:
        for op, k, k2, thr in self.tests:
            if op == "gt":
                if not c[k] > thr:
                    return False
            elif op == "lt":
                if not c[k] < thr:
                    return False
            else:
                if not c[k] - c[k2] > thr:
                    return False
        return True


@dataclass
class DecisionTable:
    """Deterministic first-match IF-THEN form of a trained rule set."""

    branches: tuple[Branch, ...]
    default_action: int
    n_actions: int
    n_concepts: int
    action_names: tuple[str, ...] = ()

    def evaluate(self, c: np.ndarray) -> int:
        for branch in self.branches:
            if branch.holds(c):
                return branch.action
        return self.default_action

    def compile(self):
        """Closure specialization for per-decision latency measurements."""
        branches = [(b.tests, b.action) for b in self.branches]
        default = self.default_action

        def run(c) -> int:
            for tests, action in branches:
                ok = True
                for op, k, k2, thr in tests:
                    if op == "gt":
                        if not c[k] > thr:
                            ok = False
                            break
                    elif op == "lt":
                        if not c[k] < thr:
                            ok = False
                            break
                    elif not c[k] - c[k2] > thr:
                        ok = False
                        break
                if ok:
                    return action
            return default

        return run

    def describe(self) -> str:
        names = self.action_names or tuple(str(a) for a in range(self.n_actions))
        lines = []
        for i, b in enumerate(self.branches):
            parts = []
            for op, k, k2, thr in b.tests:
                if op == "gt":
                    parts.append(f"c{k} > {thr:.2f}")
                elif op == "lt":
                    parts.append(f"c{k} < {thr:.2f}")
                else:
                    parts.append(f"c{k} - c{k2} > {thr:.2f}")
            head = "if" if i == 0 else "else if"
            lines.append(f"{head} {' and '.join(parts)} then {names[b.action]}")
        lines.append(f"else {names[self.default_action]}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "format": "symran-decision-table",
            "version": 1,
            "default_action": self.default_action,
            "n_actions": self.n_actions,
            "n_concepts": self.n_concepts,
            "action_names": list(self.action_names),
            "branches": [
                {
                    "tests": [list(t) for t in b.tests],
                    "action": b.action,
                    "rule_id": b.rule_id,
                    "attention": b.attention,
                }
                for b in self.branches
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "DecisionTable":
        branches = tuple(
            Branch(
                tests=tuple(tuple(t) for t in b["tests"]),
                action=b["action"],
                rule_id=b["rule_id"],
                attention=b["attention"],
            )
            for b in d["branches"]
        )
        return DecisionTable(branches, d["default_action"], d["n_actions"],
                             d["n_concepts"], tuple(d.get("action_names", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def compile_rules(ruleset: RuleSet, action_names: tuple[str, ...] = (),
                  default_action: int | None = None) -> DecisionTable:
    """Keep each action's dominant rule plus every rule with attention at or
    above the pruning threshold; crispify and order by descending attention.

    The else-action defaults to the action with the fewest kept rules
    (ties to the lowest index)."""
    alpha = ruleset.attention()
    if not np.all(np.isfinite(alpha)):
        raise ArithmeticError("attention weights are not finite; training degenerate")
    kept: list[list[int]] = []
    for part in ruleset.partitions:
        idx = np.array(part)
        best = int(idx[np.argmax(alpha[idx])])
        keep = {best} | {int(i) for i in idx if alpha[i] >= ruleset.prune_threshold}
        kept.append(sorted(keep, key=lambda i: (-alpha[i], i)))
    if default_action is None:
        counts = [len(k) for k in kept]
        default_action = int(np.argmin(counts))
    branches = []
    for head, rule_ids in enumerate(kept):
        if head == default_action:
            continue
        for rid in rule_ids:
            rule = ruleset.rules[rid]
            tests = tuple(ruleset.predicates[p].crisp_test() for p in rule.predicates)
            branches.append(Branch(tests, head, rid, float(alpha[rid])))
    branches.sort(key=lambda b: (-b.attention, b.rule_id))
    return DecisionTable(tuple(branches), default_action, ruleset.n_actions,
                         ruleset.n_concepts, action_names)


def eval_table(table: DecisionTable, c: np.ndarray) -> int:
    return table.evaluate(np.asarray(c, dtype=np.float64))


def table_argmax_agreement(table: DecisionTable, ruleset: RuleSet,
                           concepts: np.ndarray) -> float:
    """Fraction of states where the compiled table matches the soft argmax."""
    soft = np.argmax(ruleset.logits(concepts), axis=1)
    hard = np.array([table.evaluate(c) for c in concepts])
    return float(np.mean(soft == hard))
