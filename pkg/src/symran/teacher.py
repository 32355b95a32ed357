"""Black-box teacher policies and the rolling trace buffer.

Two teachers share one record format: a scripted symbolic oracle acting
on the environment's hidden true concepts (exact recovery target for
distillation tests), and a neural teacher behavior-cloned from scripted
traces (a genuinely opaque policy whose underlying logic is still
known). Both emit (t, s_t, z_t, a_t) records; a fixed component-wise
head maps z to the executed action: softmax onto the PRB simplex for
slicing, argmax for handover.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsr import ExpressionTree, evaluate, parse_expression
from .env import HandoverEnv, SlicingEnv, StepOutcome
from .errors import ConfigError
from .kpm import (
    TASK_HANDOVER,
    TASK_SLICING,
    KpmState,
    flat_dim,
    flat_spans,
    flatten_state,
    task_blocks,
    task_metric_ids,
)
from .nets import AdamState, FeedForwardNet, softmax

SLICING_CONCEPT_COUNT = 4
HANDOVER_CONCEPT_COUNT = 5

# reference slicing policy: one closed-form logit per slice over the four
# true concepts (demand, stress, load, channel quality)
SCRIPTED_SLICING_EXPRESSIONS = (
    "(- (- (+ (+ (log1p c0) (* 1.32 c3)) (* 0.62 (* c0 c3))) (* 1.86 c2)) (* 0.45 c1))",
    "(- (+ (+ (* 1.74 c1) (* 1.26 (* c1 c1))) (* 0.62 (* c1 c2))) (* 0.74 c3))",
    "(+ (- (/ 1 (+ (+ 1.42 c0) c1)) (* 0.36 (log1p c2))) (* 0.23 c3))",
)

# reference handover policy: switch iff any branch over
# (srv_q, tgt_q, srv_load, tgt_load, qos_deg) fires
SCRIPTED_HANDOVER_BRANCHES = (
    ((("diff", 1, 0, ">", 0.12), ("idx", 3, "<", 0.47)), 1),
    ((("idx", 0, "<", 0.32), ("idx", 1, ">", 0.58)), 1),
    ((("idx", 4, ">", 0.50), ("idx", 1, ">", 0.63), ("idx", 3, "<", 0.42)), 1),
)
HANDOVER_FIRE_LOGIT = 2.0


def continuous_head(z: np.ndarray) -> np.ndarray:
    """Map unconstrained slicing means onto the PRB-ratio simplex."""
    return softmax(np.asarray(z, dtype=np.float64))


def discrete_head(z: np.ndarray) -> int:
    return int(np.argmax(z))


def head_action(task: str, z: np.ndarray):
    return continuous_head(z) if task == TASK_SLICING else discrete_head(z)


def _test_holds(test: tuple, c: np.ndarray) -> bool:
    if test[0] == "diff":
        _, i, j, op, thr = test
        lhs = c[i] - c[j]
    else:
        _, i, op, thr = test
        lhs = c[i]
    return lhs > thr if op == ">" else lhs < thr


class ScriptedTeacher:
    """Deterministic symbolic oracle over the true concept vector.

    Optional Gaussian output noise (sigma_z) makes the distillers face
    noisy labels; with sigma_z = 0 the teacher is an exact function.
    """

    def __init__(self, task: str, sigma_z: float = 0.02, noise_seed: int = 0,
                 expressions: tuple[str, ...] | None = None,
                 branches: tuple | None = None):
        self.task = task
        self.sigma_z = float(sigma_z)
        self.noise_seed = noise_seed
        self.rng = np.random.default_rng(noise_seed)
        if task == TASK_SLICING:
            texts = expressions or SCRIPTED_SLICING_EXPRESSIONS
            self.expressions: tuple[ExpressionTree, ...] = tuple(
                parse_expression(t, SLICING_CONCEPT_COUNT) for t in texts
            )
            self.concept_count = SLICING_CONCEPT_COUNT
            self.d_z = len(self.expressions)
        elif task == TASK_HANDOVER:
            self.branches = branches or SCRIPTED_HANDOVER_BRANCHES
            self.concept_count = HANDOVER_CONCEPT_COUNT
            self.d_z = 2
        else:
            raise ConfigError(f"unknown task: {task!r}")

    def reset_noise(self) -> None:
        self.rng = np.random.default_rng(self.noise_seed)

    def logits(self, true_concepts: np.ndarray) -> np.ndarray:
        c = np.asarray(true_concepts, dtype=np.float64)
        if c.shape != (self.concept_count,):
            raise ValueError(
                f"expected {self.concept_count} concepts, got shape {c.shape}"
            )
        if self.task == TASK_SLICING:
            z = np.array([evaluate(e, c[None, :])[0] for e in self.expressions])
        else:
            fired = any(
                all(_test_holds(t, c) for t in tests) for tests, _ in self.branches
            )
            z = np.array([0.0, HANDOVER_FIRE_LOGIT if fired else -HANDOVER_FIRE_LOGIT])
        if self.sigma_z > 0.0:
            z = z + self.rng.normal(0.0, self.sigma_z, size=z.shape)
        return z

    def act(self, true_concepts: np.ndarray):
        z = self.logits(true_concepts)
        return z, head_action(self.task, z)


def scripted_act(teacher: ScriptedTeacher, true_concepts: np.ndarray):
    return teacher.act(true_concepts)


class NeuralTeacher:
    """Behavior-cloned net from the flattened, padded telemetry to z."""

    def __init__(self, task: str, net: FeedForwardNet, input_mean: np.ndarray,
                 input_std: np.ndarray):
        self.task = task
        self.net = net
        self.input_mean = np.asarray(input_mean, dtype=np.float64)
        self.input_std = np.asarray(input_std, dtype=np.float64)
        expected = 3 if task == TASK_SLICING else 2
        if net.output_dim != expected:
            raise ConfigError(f"teacher net must emit {expected} outputs for {task}")

    def normalize(self, flat: np.ndarray) -> np.ndarray:
        # clip so slot patterns unseen during cloning cannot blow up the input
        return np.clip((flat - self.input_mean) / self.input_std, -10.0, 10.0)

    def logits(self, state: KpmState) -> np.ndarray:
        if state.task != self.task:
            raise ValueError(f"state task {state.task!r} != teacher task {self.task!r}")
        return self.net.forward(self.normalize(flatten_state(state)))

    def act(self, state: KpmState):
        z = self.logits(state)
        return z, head_action(self.task, z)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "net": self.net.to_dict(),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "NeuralTeacher":
        return NeuralTeacher(
            d["task"],
            FeedForwardNet.from_dict(d["net"]),
            np.array(d["input_mean"]),
            np.array(d["input_std"]),
        )


def neural_act(teacher: NeuralTeacher, state: KpmState):
    return teacher.act(state)


@dataclass
class TraceRecord:
    """One teacher decision step.

    Equality and serialization cover the wire fields only; roster tags are
    implied by the fixed slot layout and runtime-only state metadata is
    dropped.
    """

    t: int
    state: KpmState
    z: np.ndarray
    a: object  # simplex 3-vector (slicing) or int (handover)
    r: float
    v_thp: float
    v_dly: float

    def validate(self) -> None:
        if not np.all(np.isfinite(self.z)):
            raise ValueError("trace record carries non-finite z")
        expected = head_action(self.state.task, self.z)
        if self.state.task == TASK_SLICING:
            if not np.allclose(expected, np.asarray(self.a), atol=1e-9):
                raise ValueError("action inconsistent with head(z)")
        elif expected != self.a:
            raise ValueError("action inconsistent with head(z)")

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        if self.state.task == TASK_SLICING:
            same_a = np.array_equal(np.asarray(self.a), np.asarray(other.a))
        else:
            same_a = self.a == other.a
        return (
            self.t == other.t
            and self.state.task == other.state.task
            and np.array_equal(self.state.values, other.state.values)
            and self.state.entity_tags == other.state.entity_tags
            and np.array_equal(self.z, other.z)
            and same_a
            and self.r == other.r
            and self.v_thp == other.v_thp
            and self.v_dly == other.v_dly
        )


class TraceBuffer:
    """Append-only rolling window of trace records (oldest evicted)."""

    def __init__(self, capacity: int = 50_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._records: list[TraceRecord] = []

    def append(self, record: TraceRecord) -> None:
        if self._records and record.t <= self._records[-1].t:
            raise ValueError("records must be time-ordered")
        self._records.append(record)
        if len(self._records) > self.capacity:
            del self._records[0 : len(self._records) - self.capacity]

    def snapshot(self) -> tuple[TraceRecord, ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]


def collect_traces(env, teacher, steps: int, buffer: TraceBuffer) -> TraceBuffer:
    """Run the teacher in the environment, appending one record per step."""
    if teacher.task != env.task:
        raise ConfigError(
            f"teacher task {teacher.task!r} does not match env task {env.task!r}"
        )
    scripted = isinstance(teacher, ScriptedTeacher)
    if scripted and not env.cfg.expose_true_concepts:
        raise ConfigError("scripted teacher needs expose_true_concepts=True")
    if env.state is None:
        env.reset()
    for _ in range(steps):
        state = env.state
        if scripted:
            z, a = teacher.act(env.true_concepts)
        else:
            z, a = teacher.act(state)
        outcome: StepOutcome = env.step(a)
        v_thp = float(np.mean(outcome.thp_violation))
        v_dly = float(np.mean(outcome.dly_violation))
        rec = TraceRecord(
            t=state.t, state=state, z=z, a=a, r=outcome.reward,
            v_thp=v_thp, v_dly=v_dly,
        )
        rec.validate()
        buffer.append(rec)
    return buffer


# -- persistence ---------------------------------------------------------------


def record_to_json(rec: TraceRecord) -> str:
    """Wire format: rows in fixed slot order, absent slots all-zero.

    A real UE row can never be all-zero (CQI >= 1), so the padding is
    unambiguous on parse.
    """
    state = rec.state
    blocks = task_blocks(state.task)
    m = len(state.metric_ids)
    total = sum(c for _, c in blocks)
    padded = np.zeros((total, m))
    offset = 0
    for tag, cap in blocks:
        rows = [i for i, e in enumerate(state.entity_tags) if e == tag]
        for slot, row in enumerate(rows):
            padded[offset + slot] = state.values[row]
        offset += cap
    a = np.asarray(rec.a).tolist() if state.task == TASK_SLICING else int(rec.a)
    payload = {
        "t": rec.t,
        "s": padded.tolist(),
        "z": np.asarray(rec.z).tolist(),
        "a": a,
        "r": rec.r,
        "v_thp": rec.v_thp,
        "v_dly": rec.v_dly,
    }
    return json.dumps(payload, separators=(",", ":"))


def record_from_json(line: str, task: str) -> TraceRecord:
    d = json.loads(line)
    for key in ("t", "s", "z", "a", "r", "v_thp", "v_dly"):
        if key not in d:
            raise ValueError(f"missing {key!r} field")
    padded = np.array(d["s"], dtype=np.float64)
    blocks = task_blocks(task)
    m = len(task_metric_ids(task))
    total = sum(c for _, c in blocks)
    if padded.shape != (total, m):
        raise ValueError(f"state shape {padded.shape} != slot layout ({total}, {m})")
    rows, tags = [], []
    offset = 0
    for tag, cap in blocks:
        for slot in range(cap):
            row = padded[offset + slot]
            if task == TASK_HANDOVER or np.any(row != 0.0):
                rows.append(row)
                tags.append(tag)
        offset += cap
    state = KpmState(task=task, values=np.array(rows), entity_tags=tuple(tags),
                     t=int(d["t"]))
    a = np.array(d["a"], dtype=np.float64) if task == TASK_SLICING else int(d["a"])
    return TraceRecord(
        t=int(d["t"]), state=state, z=np.array(d["z"], dtype=np.float64), a=a,
        r=float(d["r"]), v_thp=float(d["v_thp"]), v_dly=float(d["v_dly"]),
    )


# -- behavior cloning ----------------------------------------------------------


@dataclass
class BcReport:
    train_mse: float
    holdout_mse: float
    train_mean_abs: float
    holdout_mean_abs: float
    loss_history: list[float] = field(default_factory=list)


def train_bc_teacher(buffer: TraceBuffer, hidden: tuple[int, ...] = (128, 128),
                     train_steps: int = 10_000, batch: int = 256, lr: float = 1e-3,
                     seed: int = 0, holdout_frac: float = 0.1,
                     min_records: int = 5_000) -> tuple[NeuralTeacher, BcReport]:
    """Behavior-clone a neural teacher from scripted traces.

    The normalizer is fitted on the training split only; the holdout is
    the time-ordered tail of the buffer.
    """
    records = buffer.snapshot()
    if len(records) < min_records:
        raise ValueError(f"need at least {min_records} records, got {len(records)}")
    task = records[0].state.task
    x = np.stack([flatten_state(r.state) for r in records])
    y = np.stack([np.asarray(r.z, dtype=np.float64) for r in records])
    n_hold = max(1, int(len(records) * holdout_frac))
    x_tr, y_tr = x[:-n_hold], y[:-n_hold]
    x_ho, y_ho = x[-n_hold:], y[-n_hold:]

    mean = x_tr.mean(axis=0)
    # floor each dim's std at 5% of its schema span so dims constant in the
    # training split stay bounded when they vary at deployment
    std = np.maximum(x_tr.std(axis=0), 0.05 * flat_spans(task))
    xn_tr = np.clip((x_tr - mean) / std, -10.0, 10.0)
    xn_ho = np.clip((x_ho - mean) / std, -10.0, 10.0)

    rng = np.random.default_rng(seed)
    dims = [flat_dim(task), *hidden, y.shape[1]]
    acts = ["relu"] * len(hidden) + ["identity"]
    net = FeedForwardNet.create(dims, acts, rng)
    opt = AdamState.for_size(net.param_count, lr=lr)
    history = []
    n = len(xn_tr)
    for step in range(train_steps):
        idx = rng.integers(0, n, size=min(batch, n))
        xb, yb = xn_tr[idx], y_tr[idx]
        pred, cache = net.forward_cached(xb)
        resid = pred - yb
        loss = float(np.mean(resid**2))
        grads, _ = net.backward(cache, 2.0 * resid / resid.size)
        net.set_params(opt.apply(net.get_params(), net.flatten_grads(grads)))
        if step % 100 == 0:
            history.append(loss)

    teacher = NeuralTeacher(task, net, mean, std)
    pred_tr = net.forward(xn_tr)
    pred_ho = net.forward(xn_ho)
    report = BcReport(
        train_mse=float(np.mean((pred_tr - y_tr) ** 2)),
        holdout_mse=float(np.mean((pred_ho - y_ho) ** 2)),
        train_mean_abs=float(np.mean(np.abs(pred_tr - y_tr))),
        holdout_mean_abs=float(np.mean(np.abs(pred_ho - y_ho))),
        loss_history=history,
    )
    return teacher, report
