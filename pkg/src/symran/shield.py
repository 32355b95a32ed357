"""Two-stage symbolic action shield.

Stage one applies closed-form correction rules in priority order (capped
simplex for slicing, switch-dwell admissibility for handover). Stage two
scores the corrected action with a small risk net; when the score
exceeds the calibrated trigger threshold, the nearest known-safe action
from the concept-indexed bank is replayed instead (and re-projected, so
no emitted action can violate a closed-form constraint).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kpm import TASK_HANDOVER, TASK_SLICING, KpmState
from .nets import AdamState, FeedForwardNet, sigmoid

BUDGET_TOL = 1e-9


@dataclass
class CorrectionRule:
    """A violation test paired with its projection, applied by priority."""

    rule_id: str
    priority: int
    nu: object  # (action, state) -> float, positive iff violated
    pi: object  # (action, state) -> corrected action


def apply_correction_rules(rules: list[CorrectionRule], action, state) -> object:
    """Apply every violated rule's projection, re-scanning until no rule
    fires (each pass pins at least one coordinate, so this terminates)."""
    ordered = sorted(rules, key=lambda r: r.priority)
    current = action
    for _ in range(8):
        fired = False
        for rule in ordered:
            if rule.nu(current, state) > 0.0:
                current = rule.pi(current, state)
                fired = True
        if not fired:
            return current
    raise ArithmeticError("correction rules did not reach a fixpoint")


# -- slicing: capped simplex -----------------------------------------------------


def _clamp_entries(a: np.ndarray, a_min: float, a_max: float) -> np.ndarray:
    return np.clip(a, a_min, a_max)


def _renormalize_free(a: np.ndarray, a_min: float, a_max: float) -> np.ndarray:
    """Scale the non-pinned entries so the total hits 1; entries sitting at
    the bound that blocks the needed direction stay put."""
    a = a.copy()
    s = a.sum()
    if abs(s - 1.0) <= BUDGET_TOL:
        return a
    if s > 1.0:
        free = a > a_min + 1e-15
    else:
        free = a < a_max - 1e-15
    target = 1.0 - a[~free].sum()
    free_sum = a[free].sum()
    if not np.any(free):
        raise ArithmeticError("capped simplex infeasible: all entries pinned")
    if free_sum <= 0.0:
        a[free] = target / free.sum()
    else:
        a[free] *= target / free_sum
    return a


def slicing_correction_rules(a_min: float = 0.05, a_max: float = 0.8,
                             n_slices: int = 3) -> list[CorrectionRule]:
    if n_slices * a_min > 1.0 + BUDGET_TOL or n_slices * a_max < 1.0 - BUDGET_TOL:
        raise ConfigError(
            f"infeasible per-entry bounds [{a_min}, {a_max}] for {n_slices} slices"
        )

    def nu_bounds(a, _s):
        a = np.asarray(a, dtype=np.float64)
        return float(max(np.max(a_min - a), np.max(a - a_max)))

    def pi_bounds(a, _s):
        return _clamp_entries(np.asarray(a, dtype=np.float64), a_min, a_max)

    def nu_budget(a, _s):
        return float(abs(np.sum(a) - 1.0) - BUDGET_TOL)

    def pi_budget(a, _s):
        return _renormalize_free(np.asarray(a, dtype=np.float64), a_min, a_max)

    return [
        CorrectionRule("entry_bounds", 0, nu_bounds, pi_bounds),
        CorrectionRule("prb_budget", 1, nu_budget, pi_budget),
    ]


# -- handover: anti-ping-pong dwell ----------------------------------------------


def handover_correction_rules(min_dwell: int = 2) -> list[CorrectionRule]:
    """A switch within `min_dwell` steps of the previous one is inadmissible
    and corrected to stay."""

    def nu_dwell(a, state: KpmState):
        if a == 1 and state.t - state.last_switch_t < min_dwell:
            return 1.0
        return -1.0

    def pi_dwell(_a, _state):
        return 0

    return [CorrectionRule("switch_dwell", 0, nu_dwell, pi_dwell)]


def correction_rules_for(task: str, a_min: float = 0.05, a_max: float = 0.8,
                         min_dwell: int = 2) -> list[CorrectionRule]:
    if task == TASK_SLICING:
        return slicing_correction_rules(a_min, a_max)
    if task == TASK_HANDOVER:
        return handover_correction_rules(min_dwell)
    raise ConfigError(f"unknown task: {task!r}")


# -- safe-decision bank ----------------------------------------------------------


@dataclass(frozen=True)
class BankEntry:
    concepts: tuple[float, ...]
    action: object  # tuple (slicing) or int (handover)
    verified_at: int
    window: int


class SafeBank:
    """Known-safe (concept, action) pairs; FIFO-evicted at capacity."""

    def __init__(self, capacity: int = 5000):
        if capacity <= 0:
            raise ConfigError("bank capacity must be positive")
        self.capacity = capacity
        self._entries: list[BankEntry] = []
        self._matrix: np.ndarray | None = None

    def add(self, entry: BankEntry) -> None:
        self._entries.append(entry)
        if len(self._entries) > self.capacity:
            del self._entries[0 : len(self._entries) - self.capacity]
        self._matrix = None

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i) -> BankEntry:
        return self._entries[i]

    def concept_matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.array([e.concepts for e in self._entries])
        return self._matrix

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"c": list(e.concepts),
                 "a": list(e.action) if isinstance(e.action, tuple) else e.action,
                 "verified_at": e.verified_at, "window": e.window},
                separators=(",", ":"),
            )
            for e in self._entries
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @staticmethod
    def from_jsonl(text: str, capacity: int = 5000) -> "SafeBank":
        bank = SafeBank(capacity)
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            a = tuple(d["a"]) if isinstance(d["a"], list) else d["a"]
            bank.add(BankEntry(tuple(d["c"]), a, d["verified_at"], d["window"]))
        return bank


def admit_entries(records, concept_fn, t_prime: int = 10,
                  capacity: int = 5000) -> SafeBank:
    """Replay the admission check over a trace: an entry is banked only when
    every violation indicator in the subsequent t_prime steps is zero."""
    bank = SafeBank(capacity)
    records = list(records)
    for i in range(len(records) - t_prime):
        window = records[i + 1 : i + 1 + t_prime]
        if all(r.v_thp == 0.0 and r.v_dly == 0.0 for r in window):
            rec = records[i]
            c = concept_fn(rec.state)
            a = tuple(np.asarray(rec.a).tolist()) if rec.state.task == TASK_SLICING \
                else int(rec.a)
            bank.add(BankEntry(tuple(c.tolist()), a, rec.t, t_prime))
    return bank


def retrieve_safe(bank: SafeBank, c: np.ndarray):
    """Exact nearest-neighbor scan in concept space; ties break to the
    lowest entry index."""
    if len(bank) == 0:
        raise ValueError("cannot retrieve from an empty bank")
    d = bank.concept_matrix() - np.asarray(c, dtype=np.float64)
    idx = int(np.argmin(np.einsum("ij,ij->i", d, d)))
    return bank[idx].action


# -- risk estimator ----------------------------------------------------------------


def _action_features(task: str, action) -> np.ndarray:
    if task == TASK_SLICING:
        return np.asarray(action, dtype=np.float64)
    onehot = np.zeros(2)
    onehot[int(action)] = 1.0
    return onehot


class RiskEstimator:
    """q(c, a) in [0, 1]: probability the QoS window after acting breaks.

    The net body ends on an identity layer; score() applies the sigmoid,
    keeping the cross-entropy gradient stable at saturation.
    """

    def __init__(self, task: str, net: FeedForwardNet, t_prime: int = 10,
                 delta: float | None = None):
        self.task = task
        self.net = net
        self.t_prime = t_prime
        self.delta = delta

    def features(self, c: np.ndarray, action) -> np.ndarray:
        return np.concatenate([np.asarray(c, dtype=np.float64),
                               _action_features(self.task, action)])

    def score(self, c: np.ndarray, action) -> float:
        logit = self.net.forward(self.features(c, action))
        return float(sigmoid(logit)[0])

    def score_batch(self, feats: np.ndarray) -> np.ndarray:
        return sigmoid(self.net.forward(feats))[:, 0]

    def to_dict(self) -> dict:
        return {"task": self.task, "net": self.net.to_dict(),
                "t_prime": self.t_prime, "delta": self.delta}

    @staticmethod
    def from_dict(d: dict) -> "RiskEstimator":
        return RiskEstimator(d["task"], FeedForwardNet.from_dict(d["net"]),
                             d["t_prime"], d["delta"])


def bce_loss_and_grad(net: FeedForwardNet, x: np.ndarray, y: np.ndarray):
    """Binary cross-entropy through the sigmoid of the net's output."""
    logits, cache = net.forward_cached(x)
    z = logits[:, 0]
    # log(1 + e^-|z|) form avoids overflow
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    q = sigmoid(z)
    grads, _ = net.backward(cache, ((q - y) / len(y))[:, None])
    return loss, net.flatten_grads(grads)


def train_risk_estimator(task: str, concepts: np.ndarray, actions: list,
                         labels: np.ndarray, t_prime: int = 10,
                         hidden: tuple[int, int] = (16, 16), steps: int = 2000,
                         batch: int = 256, lr: float = 3e-3,
                         seed: int = 0) -> RiskEstimator:
    """Fit the risk net on logged (concepts, action, broke-QoS) triples.

    The trigger threshold is left unset; calibrate_threshold fixes it.
    """
    y = np.asarray(labels, dtype=np.float64)
    if len(y) < 2:
        raise ValueError("risk training needs at least two labeled examples")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("risk labels must be binary")
    if len(np.unique(y)) == 1:
        warnings.warn("risk labels are single-class; the estimator will fit "
                      "the class prior", stacklevel=2)
    feats = np.stack([
        np.concatenate([concepts[i], _action_features(task, actions[i])])
        for i in range(len(y))
    ])
    rng = np.random.default_rng(seed)
    net = FeedForwardNet.create(
        [feats.shape[1], hidden[0], hidden[1], 1],
        ["relu", "relu", "identity"], rng,
    )
    opt = AdamState.for_size(net.param_count, lr=lr)
    n = len(y)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        _, grad = bce_loss_and_grad(net, feats[idx], y[idx])
        net.set_params(opt.apply(net.get_params(), grad))
    return RiskEstimator(task, net, t_prime=t_prime)


def calibrate_threshold(estimator: RiskEstimator, bank: SafeBank,
                        percentile: float = 95.0) -> float:
    """Nearest-rank percentile of the estimator's scores on the bank."""
    if len(bank) == 0:
        raise ValueError("cannot calibrate on an empty bank")
    feats = np.stack([
        estimator.features(np.array(e.concepts), e.action) for e in bank
    ])
    scores = np.sort(estimator.score_batch(feats))
    rank = int(np.ceil(percentile / 100.0 * len(scores)))
    rank = min(max(rank, 1), len(scores))
    delta = float(scores[rank - 1])
    estimator.delta = delta
    return delta


# -- the two-stage shield -----------------------------------------------------------


@dataclass
class ShieldDecision:
    t: int
    action: object
    q: float
    triggered: bool
    source: str  # "passthrough" | "retrieval"

    def to_json(self) -> str:
        return json.dumps({"t": self.t, "q": self.q, "triggered": self.triggered,
                           "source": self.source}, separators=(",", ":"))


@dataclass
class Shield:
    rules: list[CorrectionRule]
    estimator: RiskEstimator
    bank: SafeBank
    log: list[ShieldDecision] = field(default_factory=list)

    def apply(self, action, concepts: np.ndarray, state: KpmState) -> ShieldDecision:
        decision = shield_action(self.rules, self.estimator, self.bank,
                                 action, concepts, state)
        self.log.append(decision)
        return decision

    @property
    def trigger_count(self) -> int:
        return sum(1 for d in self.log if d.triggered)


def shield_action(rules: list[CorrectionRule], estimator: RiskEstimator,
                  bank: SafeBank, action, concepts: np.ndarray,
                  state: KpmState) -> ShieldDecision:
    """Correct, risk-gate, and (when triggered) replay the nearest
    known-safe action, re-corrected before emission."""
    if estimator.delta is None:
        raise ConfigError("risk estimator is uncalibrated (no trigger threshold)")
    corrected = apply_correction_rules(rules, action, state)
    q = estimator.score(concepts, corrected)
    if q > estimator.delta:
        if len(bank) == 0:
            warnings.warn("risk gate open but the safe bank is empty; "
                          "passing the corrected action through", stacklevel=2)
            return ShieldDecision(state.t, corrected, q, False, "passthrough")
        replayed = retrieve_safe(bank, concepts)
        if isinstance(replayed, tuple):
            replayed = np.array(replayed)
        final = apply_correction_rules(rules, replayed, state)
        return ShieldDecision(state.t, final, q, True, "retrieval")
    return ShieldDecision(state.t, corrected, q, False, "passthrough")
