"""Concept layer: per-concept masked encoders with indirect supervision.

Each concept k is committed once as (name, entity selector, KPM id set)
and computed as c_k = rho_k(sum_{g in scope} h_k(scoped row of g)). The
encoders' input width equals the scoped KPM count, so no other telemetry
can reach a concept: off-support attributions are zero by construction,
not by regularization. Supervision is indirect: an auxiliary linear head
maps the concept vector back to the teacher's pre-activation outputs and
is discarded after training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kpm import TASK_HANDOVER, TASK_SLICING, KpmState, task_metric_ids
from .nets import AdamState, FeedForwardNet
from .teacher import TraceBuffer

DEFAULT_D_H = 8
DEFAULT_HIDDEN = 16


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    entity_selector: str
    kpm_ids: tuple[int, ...]


@dataclass(frozen=True)
class ConceptTemplate:
    """Expert-committed, time-invariant concept contract."""

    task: str
    concepts: tuple[ConceptSpec, ...]

    def __post_init__(self):
        if len(self.concepts) < 1:
            raise ConfigError("template needs at least one concept")
        valid = set(task_metric_ids(self.task))
        for spec in self.concepts:
            if not spec.kpm_ids:
                raise ConfigError(f"concept {spec.name!r} has an empty KPM scope")
            bad = set(spec.kpm_ids) - valid
            if bad:
                raise ConfigError(
                    f"concept {spec.name!r} scopes metric ids {sorted(bad)} "
                    f"outside the {self.task} schema"
                )

    @property
    def k(self) -> int:
        return len(self.concepts)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "concepts": [
                {"name": s.name, "entity_selector": s.entity_selector,
                 "kpm_indices": list(s.kpm_ids)}
                for s in self.concepts
            ],
        }

    @staticmethod
    def from_dict(d: dict) -> "ConceptTemplate":
        return ConceptTemplate(
            task=d["task"],
            concepts=tuple(
                ConceptSpec(c["name"], c["entity_selector"], tuple(c["kpm_indices"]))
                for c in d["concepts"]
            ),
        )


def slicing_default_template() -> ConceptTemplate:
    return ConceptTemplate(
        task=TASK_SLICING,
        concepts=(
            ConceptSpec("embb_demand", "slice:eMBB", (4, 8)),
            ConceptSpec("urllc_stress", "slice:URLLC", (0, 6)),
            ConceptSpec("slice_load", "all", (9, 10, 11)),
            ConceptSpec("channel_quality", "all", (0,)),
        ),
    )


def handover_default_template() -> ConceptTemplate:
    return ConceptTemplate(
        task=TASK_HANDOVER,
        concepts=(
            ConceptSpec("srv_signal_quality", "cell:serv", (13, 14, 15, 23)),
            ConceptSpec("tgt_signal_quality", "cell:tgt", (16, 17, 18)),
            ConceptSpec("srv_cell_load", "cell:serv", (27, 28)),
            ConceptSpec("tgt_cell_load", "cell:tgt", (29, 30)),
            ConceptSpec("qos_degradation", "cell:serv", (19, 21, 22, 25)),
        ),
    )


def unmasked_template(task: str, k: int) -> ConceptTemplate:
    """Ablation variant: every concept sees every entity and metric."""
    ids = task_metric_ids(task)
    return ConceptTemplate(
        task=task,
        concepts=tuple(
            ConceptSpec(f"unmasked_{i}", "all", ids) for i in range(k)
        ),
    )


@dataclass
class AuxiliaryHead:
    """Linear map from concepts back to teacher outputs; training-time only."""

    a: np.ndarray  # (d_z, K)
    b: np.ndarray  # (d_z,)


class Conceptizer:
    """Maps a telemetry snapshot to the concept vector in [0, 1]^K."""

    def __init__(self, template: ConceptTemplate, d_h: int = DEFAULT_D_H,
                 hidden: int = DEFAULT_HIDDEN, seed: int = 0):
        self.template = template
        self.d_h = d_h
        rng = np.random.default_rng(seed)
        self.encoders: list[FeedForwardNet] = []
        self.heads: list[FeedForwardNet] = []
        for spec in template.concepts:
            width = len(spec.kpm_ids)
            self.encoders.append(
                FeedForwardNet.create([width, hidden, d_h], ["tanh", "identity"], rng)
            )
            self.heads.append(FeedForwardNet.create([d_h, 1], ["sigmoid"], rng))
        ids = task_metric_ids(template.task)
        self.norm_lo = np.array([float(i) for i in range(len(ids))]) * 0.0
        self.norm_hi = self.norm_lo + 1.0
        self.baseline = np.full(len(ids), 0.5)  # normalized units
        self.frozen = False
        self._columns = [
            np.array([ids.index(m) for m in spec.kpm_ids])
            for spec in template.concepts
        ]

    # -- normalization -------------------------------------------------------

    def fit_normalizer(self, buffer) -> None:
        ids = task_metric_ids(self.template.task)
        lo = np.full(len(ids), np.inf)
        hi = np.full(len(ids), -np.inf)
        total = np.zeros(len(ids))
        count = 0
        for rec in buffer:
            v = rec.state.values
            lo = np.minimum(lo, v.min(axis=0))
            hi = np.maximum(hi, v.max(axis=0))
            total += v.sum(axis=0)
            count += v.shape[0]
        if count == 0:
            raise ValueError("cannot fit normalizer on an empty buffer")
        span = np.maximum(hi - lo, 1e-9)
        self.norm_lo = lo
        self.norm_hi = lo + span
        mean = total / count
        self.baseline = np.clip((mean - lo) / span, 0.0, 1.0)

    def normalize(self, state: KpmState) -> np.ndarray:
        span = self.norm_hi - self.norm_lo
        return np.clip((state.values - self.norm_lo) / span, 0.0, 1.0)

    # -- inference -----------------------------------------------------------

    def conceptize_full(self, state: KpmState) -> tuple[np.ndarray, np.ndarray]:
        """Concept vector plus a staleness mask (1.0 where the entity scope
        matched nothing this step and the concept was pinned to 0)."""
        if state.task != self.template.task:
            raise ValueError(
                f"state task {state.task!r} != template task {self.template.task!r}"
            )
        xn = self.normalize(state)
        c = np.zeros(self.template.k)
        stale = np.zeros(self.template.k)
        for k, spec in enumerate(self.template.concepts):
            rows = state.rows_for(spec.entity_selector)
            if rows.size == 0:
                stale[k] = 1.0
                continue
            sub = xn[np.ix_(rows, self._columns[k])]
            pooled = self.encoders[k].forward(sub).sum(axis=0)
            c[k] = float(self.heads[k].forward(pooled)[0])
        return c, stale

    def conceptize(self, state: KpmState) -> np.ndarray:
        return self.conceptize_full(state)[0]

    # -- parameter plumbing ----------------------------------------------------

    def get_params(self) -> np.ndarray:
        parts = [n.get_params() for n in self.encoders]
        parts += [n.get_params() for n in self.heads]
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray) -> None:
        if self.frozen:
            raise RuntimeError("conceptizer parameters are frozen")
        i = 0
        for net in list(self.encoders) + list(self.heads):
            n = net.param_count
            net.set_params(flat[i : i + n])
            i += n

    @property
    def param_count(self) -> int:
        return sum(n.param_count for n in self.encoders) + sum(
            n.param_count for n in self.heads
        )

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "symran-conceptizer",
            "version": 1,
            "template": self.template.to_dict(),
            "d_h": self.d_h,
            "encoders": [n.to_dict() for n in self.encoders],
            "heads": [n.to_dict() for n in self.heads],
            "norm_lo": self.norm_lo.tolist(),
            "norm_hi": self.norm_hi.tolist(),
            "baseline": self.baseline.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Conceptizer":
        template = ConceptTemplate.from_dict(d["template"])
        model = Conceptizer(template, d_h=d["d_h"])
        model.encoders = [FeedForwardNet.from_dict(x) for x in d["encoders"]]
        model.heads = [FeedForwardNet.from_dict(x) for x in d["heads"]]
        model.norm_lo = np.array(d["norm_lo"])
        model.norm_hi = np.array(d["norm_hi"])
        model.baseline = np.array(d["baseline"])
        model.frozen = True
        return model

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def conceptize(model: Conceptizer, state: KpmState) -> np.ndarray:
    return model.conceptize(state)


# -- training --------------------------------------------------------------


def _prepare_inputs(model: Conceptizer, records) -> list[list[np.ndarray | None]]:
    """Per record, per concept: the normalized scoped input rows."""
    out = []
    for rec in records:
        xn = model.normalize(rec.state)
        per_k = []
        for k, spec in enumerate(model.template.concepts):
            rows = rec.state.rows_for(spec.entity_selector)
            per_k.append(xn[np.ix_(rows, model._columns[k])] if rows.size else None)
        out.append(per_k)
    return out


def _batch_loss_and_grads(model: Conceptizer, aux: AuxiliaryHead,
                          inputs: list, z: np.ndarray, want_grads: bool = True):
    """Fidelity loss mean_t ||A c_t + b - z_t||^2 and analytic gradients."""
    bsz = len(inputs)
    k_total = model.template.k
    c = np.zeros((bsz, k_total))
    seg_ids, concat, rho_caches, enc_caches, pooled_all = [], [], [], [], []
    for k in range(k_total):
        xs = [inputs[t][k] for t in range(bsz)]
        seg = np.concatenate(
            [np.full(len(x), t) for t, x in enumerate(xs) if x is not None]
        ) if any(x is not None for x in xs) else np.zeros(0, dtype=int)
        big = (
            np.concatenate([x for x in xs if x is not None])
            if seg.size
            else np.zeros((0, len(model.template.concepts[k].kpm_ids)))
        )
        emb, enc_cache = model.encoders[k].forward_cached(big) if len(big) else (
            np.zeros((0, model.d_h)), None)
        pooled = np.zeros((bsz, model.d_h))
        if seg.size:
            np.add.at(pooled, seg, emb)
        ck, rho_cache = model.heads[k].forward_cached(pooled)
        c[:, k] = ck[:, 0]
        for t in range(bsz):
            if inputs[t][k] is None:
                c[t, k] = 0.0  # empty scope pins the concept
        seg_ids.append(seg)
        concat.append(big)
        rho_caches.append(rho_cache)
        enc_caches.append(enc_cache)
        pooled_all.append(pooled)

    resid = c @ aux.a.T + aux.b - z
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    if not want_grads:
        return loss, c, None, None, None

    dresid = 2.0 * resid / bsz
    d_a = dresid.T @ c
    d_b = dresid.sum(axis=0)
    dc = dresid @ aux.a

    enc_grads, head_grads = [], []
    for k in range(k_total):
        dck = dc[:, k].copy()
        for t in range(bsz):
            if inputs[t][k] is None:
                dck[t] = 0.0
        g_rho, d_pooled = model.heads[k].backward(rho_caches[k], dck[:, None])
        head_grads.append(g_rho)
        if seg_ids[k].size:
            d_emb = d_pooled[seg_ids[k]]
            g_enc, _ = model.encoders[k].backward(enc_caches[k], d_emb)
        else:
            g_enc = [(np.zeros_like(l.weight), np.zeros_like(l.bias))
                     for l in model.encoders[k].layers]
        enc_grads.append(g_enc)

    flat = np.concatenate(
        [model.encoders[k].flatten_grads(enc_grads[k]) for k in range(k_total)]
        + [model.heads[k].flatten_grads(head_grads[k]) for k in range(k_total)]
    )
    return loss, c, flat, d_a, d_b


def fidelity_loss_and_grad(model: Conceptizer, aux: AuxiliaryHead,
                           records, z: np.ndarray):
    """Loss and flat gradient over [conceptizer params, A, b] for checking."""
    inputs = _prepare_inputs(model, records)
    loss, _, flat, d_a, d_b = _batch_loss_and_grads(model, aux, inputs, z)
    return loss, np.concatenate([flat, d_a.ravel(), d_b])


@dataclass
class ConceptizerTraining:
    d_h: int = DEFAULT_D_H
    hidden: int = DEFAULT_HIDDEN
    batch: int = 256
    max_epochs: int = 200
    patience: int = 20
    lr: float = 3e-3
    seed: int = 0


def train_conceptizer(template: ConceptTemplate, buffer: TraceBuffer,
                      params: ConceptizerTraining | None = None
                      ) -> tuple[Conceptizer, AuxiliaryHead, list[float]]:
    """Fit the concept layer by reconstructing teacher outputs linearly.

    Returns the frozen conceptizer, the auxiliary head (for auditing; it
    is not part of the deployed artifact), and the per-epoch loss history.
    """
    p = params or ConceptizerTraining()
    records = buffer.snapshot() if isinstance(buffer, TraceBuffer) else tuple(buffer)
    if not records:
        raise ValueError("cannot train a conceptizer on an empty buffer")
    d_z = len(records[0].z)
    for rec in records:
        if len(rec.z) != d_z:
            raise ValueError("inconsistent teacher output width across records")

    model = Conceptizer(template, d_h=p.d_h, hidden=p.hidden, seed=p.seed)
    model.fit_normalizer(records)
    rng = np.random.default_rng(p.seed)
    aux = AuxiliaryHead(
        a=rng.normal(0.0, 0.3, size=(d_z, template.k)),
        b=np.zeros(d_z),
    )
    inputs = _prepare_inputs(model, records)
    z = np.stack([np.asarray(r.z, dtype=np.float64) for r in records])

    opt = AdamState.for_size(model.param_count + aux.a.size + aux.b.size, lr=p.lr)
    history: list[float] = []
    best = np.inf
    since_best = 0
    n = len(records)
    for epoch in range(p.max_epochs):
        # cosine decay settles the tail of the fit
        opt.lr = p.lr * (0.15 + 0.85 * (1.0 + np.cos(np.pi * epoch / p.max_epochs)) / 2.0)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, p.batch):
            idx = order[start : start + p.batch]
            loss, _, flat, d_a, d_b = _batch_loss_and_grads(
                model, aux, [inputs[i] for i in idx], z[idx]
            )
            if not np.isfinite(loss):
                raise ArithmeticError("non-finite fidelity loss")
            grad = np.concatenate([flat, d_a.ravel(), d_b])
            packed = np.concatenate([model.get_params(), aux.a.ravel(), aux.b])
            packed = opt.apply(packed, grad)
            model.set_params(packed[: model.param_count])
            aux.a = packed[model.param_count : model.param_count + aux.a.size].reshape(
                aux.a.shape
            )
            aux.b = packed[model.param_count + aux.a.size :]
            epoch_loss += loss * len(idx)
        epoch_loss /= n
        history.append(epoch_loss)
        if epoch_loss < best - 1e-9:
            best = epoch_loss
            since_best = 0
        else:
            since_best += 1
            if since_best >= p.patience:
                break
    model.frozen = True
    return model, aux, history


# -- integrated-gradients auditing -------------------------------------------


@dataclass
class IgConfig:
    steps: int = 256
    baseline_state: KpmState | None = None

    def __post_init__(self):
        if self.steps < 16:
            raise ConfigError("IG needs at least 16 interpolation steps")


def _concept_input_grad(model: Conceptizer, k: int, sub: np.ndarray) -> np.ndarray:
    """d c_k / d scoped input rows, at one (rows x scope) input."""
    emb, enc_cache = model.encoders[k].forward_cached(sub)
    pooled = emb.sum(axis=0)
    _, rho_cache = model.heads[k].forward_cached(pooled)
    _, d_pooled = model.heads[k].backward(rho_cache, np.ones(1))
    d_emb = np.tile(d_pooled, (sub.shape[0], 1))
    _, d_sub = model.encoders[k].backward(enc_cache, d_emb)
    return d_sub


def ig_attribution(model: Conceptizer, k: int, state: KpmState,
                   cfg: IgConfig | None = None) -> np.ndarray:
    """Attribution matrix over the full state shape for concept k.

    Computed in normalized coordinates along the straight path from the
    baseline; entries outside the concept's (entity, KPM) scope are
    exactly zero because the masked encoder never sees them.
    """
    cfg = cfg or IgConfig()
    x = model.normalize(state)
    if cfg.baseline_state is not None:
        if cfg.baseline_state.values.shape != state.values.shape:
            raise ValueError("baseline state shape must match the probe state")
        xb = model.normalize(cfg.baseline_state)
    else:
        xb = np.tile(model.baseline, (state.n_entities, 1))
    out = np.zeros_like(x)
    rows = state.rows_for(model.template.concepts[k].entity_selector)
    if rows.size == 0:
        return out
    cols = model._columns[k]
    sub_x = x[np.ix_(rows, cols)]
    sub_b = xb[np.ix_(rows, cols)]
    delta = sub_x - sub_b
    grad_sum = np.zeros_like(sub_x)
    # midpoint Riemann sum: quadratic error keeps the completeness identity
    # within tolerance at modest step counts
    for step in range(1, cfg.steps + 1):
        point = sub_b + ((step - 0.5) / cfg.steps) * delta
        grad_sum += _concept_input_grad(model, k, point)
    out[np.ix_(rows, cols)] = delta * grad_sum / cfg.steps
    return out


def ig_completeness_gap(model: Conceptizer, k: int, state: KpmState,
                        cfg: IgConfig | None = None) -> tuple[float, float]:
    """(|sum of attributions - (c_k(s) - c_k(base))|, |delta|)."""
    cfg = cfg or IgConfig()
    attr = ig_attribution(model, k, state, cfg)
    c_s = model.conceptize(state)[k]
    if cfg.baseline_state is not None:
        c_b = model.conceptize(cfg.baseline_state)[k]
    else:
        rows = state.rows_for(model.template.concepts[k].entity_selector)
        cols = model._columns[k]
        sub_b = np.tile(model.baseline[cols], (rows.size, 1))
        pooled = model.encoders[k].forward(sub_b).sum(axis=0)
        c_b = float(model.heads[k].forward(pooled)[0])
    delta = c_s - c_b
    return abs(float(attr.sum()) - delta), abs(delta)


@dataclass
class SupportAuditRow:
    concept: str
    metric_id: int
    max_abs_attribution: float


@dataclass
class SupportAuditReport:
    off_support_max: float
    rows: list[SupportAuditRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "off_support_max": self.off_support_max,
            "rows": [
                {"concept": r.concept, "metric_id": r.metric_id,
                 "max_abs_attribution": r.max_abs_attribution}
                for r in self.rows
            ],
        }


def audit_support_mask(model: Conceptizer, probe_states: list[KpmState],
                       cfg: IgConfig | None = None) -> SupportAuditReport:
    """Verify the off-support-zero property and summarize on-support pull."""
    if not probe_states:
        raise ValueError("need at least one probe state")
    cfg = cfg or IgConfig(steps=64)
    template = model.template
    ids = task_metric_ids(template.task)
    off_max = 0.0
    on_max: dict[tuple[int, int], float] = {}
    for state in probe_states:
        for k, spec in enumerate(template.concepts):
            attr = ig_attribution(model, k, state, cfg)
            mask = np.zeros_like(attr, dtype=bool)
            rows = state.rows_for(spec.entity_selector)
            if rows.size:
                mask[np.ix_(rows, model._columns[k])] = True
            off_max = max(off_max, float(np.max(np.abs(attr[~mask]), initial=0.0)))
            for mid in spec.kpm_ids:
                col = ids.index(mid)
                val = float(np.max(np.abs(attr[:, col]), initial=0.0))
                key = (k, mid)
                on_max[key] = max(on_max.get(key, 0.0), val)
    rows = [
        SupportAuditRow(template.concepts[k].name, mid, v)
        for (k, mid), v in sorted(on_max.items())
    ]
    return SupportAuditReport(off_support_max=off_max, rows=rows)
