"""Seeded simulators for the two control tasks.

Slicing: a variable roster of UEs (9..14, grouped into three slices)
driven by Markov-modulated per-slice demand and per-UE AR(1) channel
walks; the action is a PRB-ratio triple. Handover: one UE on a 1-D
segment between two cells with log-distance path loss, OU shadowing and
OU cell loads; the action is stay/switch, and a switch costs a one-step
service-interruption delay spike.

Both emit the telemetry schema from `kpm` with additive Gaussian noise
(sigma = 2% of each metric's range) and expose a hidden true-concept
vector for diagnostics and scripted policies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .kpm import (
    CELLS,
    SLICES,
    TASK_HANDOVER,
    TASK_SLICING,
    TASKS,
    KpmState,
    metric_range,
    task_blocks,
    task_metric_ids,
)

STEP_SECONDS = 0.5
HANDOVER_INTERRUPTION_MS = 30.0
DELAY_CAP_MS = 250.0
BASE_DELAY_MS = 5.0

# per-PRB rate (Mbit/s) by integer CQI 1..15; monotone by construction
PRB_EFFICIENCY = tuple(round(0.152 * c**1.15, 4) for c in range(1, 16))

# per-UE offered rate (Mbit/s) by demand level (low/med/high)
DEMAND_RATES = {
    "eMBB": (2.0, 5.0, 10.0),
    "URLLC": (0.4, 1.0, 2.0),
    "mMTC": (0.05, 0.15, 0.3),
}

DEFAULT_QOS_TARGETS = {
    "eMBB": (6.0, 100.0),
    "URLLC": (1.5, 40.0),
    "mMTC": (0.3, 300.0),
    "ue": (6.0, 60.0),
}

SLICE_COUNT_RANGES = {"eMBB": (3, 5), "URLLC": (3, 5), "mMTC": (3, 4)}

SLICING_CONCEPT_NAMES = ("embb_demand", "urllc_stress", "slice_load", "channel_quality")
HANDOVER_CONCEPT_NAMES = (
    "srv_signal_quality",
    "tgt_signal_quality",
    "srv_cell_load",
    "tgt_cell_load",
    "qos_degradation",
)


@dataclass
class RewardConfig:
    """QoS targets and penalty weights for the per-step rewards."""

    targets: dict = field(default_factory=lambda: dict(DEFAULT_QOS_TARGETS))
    beta1: float = 1.0  # slicing throughput penalty weight
    beta2: float = 1.0  # slicing delay penalty weight
    beta3: float = 1.0  # handover throughput penalty weight
    beta4: float = 1.0  # handover delay penalty weight
    gamma: float = 0.99
    horizon: int = 200

    def __post_init__(self):
        for tag, (thp, dly) in self.targets.items():
            if thp <= 0 or dly <= 0:
                raise ConfigError(f"QoS targets for {tag!r} must be positive")
        for w in (self.beta1, self.beta2, self.beta3, self.beta4):
            if w < 0:
                raise ConfigError("penalty weights must be nonnegative")
        if not (0.0 <= self.gamma < 1.0):
            raise ConfigError("discount must lie in [0, 1)")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")


@dataclass
class EnvConfig:
    seed: int = 0
    task: str = TASK_SLICING
    ue_count_range: tuple[int, int] = (9, 14)
    n_prb: int = 50
    reward: RewardConfig = field(default_factory=RewardConfig)
    expose_true_concepts: bool = False
    kpm_noise_frac: float = 0.02  # sigma as a fraction of each metric's range
    roster_change_prob: float = 0.06
    # handover geometry / processes
    cell_positions: tuple[float, float] = (0.0, 1.0)
    path_loss_exponent: float = 3.4
    shadowing_sigma_db: float = 1.2
    load_mean: float = 0.40

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task: {self.task!r}")
        lo, hi = self.ue_count_range
        if not (1 <= lo <= hi <= 64):
            raise ConfigError("UE count range must sit within [1, 64]")
        if self.n_prb <= 0:
            raise ConfigError("n_prb must be positive")
        if not (0.0 <= self.kpm_noise_frac <= 0.2):
            raise ConfigError("kpm_noise_frac outside [0, 0.2]")


@dataclass
class StepOutcome:
    state: KpmState
    reward: float
    throughput: np.ndarray  # achieved Mbit/s per QoS entity
    delay: np.ndarray  # achieved ms per QoS entity
    thp_target: np.ndarray
    dly_target: np.ndarray
    thp_violation: np.ndarray  # 1.0 iff throughput below target
    dly_violation: np.ndarray  # 1.0 iff delay above target
    true_concepts: np.ndarray  # diagnostic only


def qos_penalties(thp: float, dly: float, thp_target: float, dly_target: float
                  ) -> tuple[float, float]:
    """Relative shortfall/overshoot penalties, floored at zero."""
    if thp_target <= 0 or dly_target <= 0:
        raise ConfigError("QoS targets must be positive")
    r_p = max((thp_target - thp) / thp_target, 0.0)
    r_d = max((dly - dly_target) / dly_target, 0.0)
    return r_p, r_d


def slicing_reward(prb_counts: np.ndarray, thp: np.ndarray, dly: np.ndarray,
                   thp_target: np.ndarray, dly_target: np.ndarray,
                   cfg: RewardConfig) -> float:
    """Per-step slicing reward: shared resource-efficiency term minus
    per-UE QoS penalties, summed over the roster.

    The efficiency denominator uses the PRB total over all UEs,
    replicated per UE.
    """
    total_prbs = float(np.sum(prb_counts))
    r = 0.0
    for g in range(len(thp)):
        r_p, r_d = qos_penalties(thp[g], dly[g], thp_target[g], dly_target[g])
        r += 1.0 / (1.0 + total_prbs) - (cfg.beta1 * r_p + cfg.beta2 * r_d)
    return r


def handover_reward(thp: float, dly: float, thp_target: float, dly_target: float,
                    cfg: RewardConfig) -> float:
    """Per-step handover reward: pure (nonpositive) QoS penalty."""
    r_p, r_d = qos_penalties(thp, dly, thp_target, dly_target)
    return -(cfg.beta3 * r_p + cfg.beta4 * r_d)


def violation_rates(thp_violation: np.ndarray, dly_violation: np.ndarray
                    ) -> tuple[float, float]:
    """Fractions of entities violating throughput / delay targets."""
    n = len(thp_violation)
    if n == 0:
        raise ValueError("violation rates need a nonempty entity set")
    return float(np.mean(thp_violation)), float(np.mean(dly_violation))


def _noisy(rng: np.random.Generator, value: float, metric_id: int,
           frac: float) -> float:
    lo, hi = metric_range(metric_id)
    return value + rng.normal(0.0, frac * (hi - lo))


class _UE:
    __slots__ = ("cqi", "cqi_mean", "backlog", "thp", "dly", "demand")

    def __init__(self, cqi_mean: float, cqi: float):
        self.cqi_mean = cqi_mean
        self.cqi = cqi
        self.backlog = 0.0
        self.thp = 0.0
        self.dly = BASE_DELAY_MS
        self.demand = 0.0


class SlicingEnv:
    """Continuous-control task: allocate PRB ratios across three slices."""

    task = TASK_SLICING

    def __init__(self, cfg: EnvConfig):
        if cfg.task != TASK_SLICING:
            raise ConfigError("SlicingEnv requires a slicing config")
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.t = 0
        self._ues: dict[str, list[_UE]] = {}
        self._demand_level: dict[str, int] = {}
        self._usage = np.zeros(3)
        self._state: KpmState | None = None
        self._true_concepts = np.zeros(4)

    # -- lifecycle -----------------------------------------------------------

    def reset(self) -> KpmState:
        self.rng = np.random.default_rng(self.cfg.seed)
        self.t = 0
        self._ues = {}
        self._demand_level = {s: 1 for s in SLICES}
        blocks = dict(task_blocks(TASK_SLICING))
        for s in SLICES:
            lo, hi = SLICE_COUNT_RANGES[s]
            hi = min(hi, blocks[s])
            n = int(self.rng.integers(lo, hi + 1))
            self._ues[s] = [self._spawn_ue() for _ in range(n)]
        # bootstrap service under a uniform allocation so the emitted
        # throughput/delay/usage columns are populated at t=0
        self._advance_demand()
        self._serve(np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]))
        self._state = self._emit()
        self._true_concepts = self._compute_true_concepts()
        return self._state

    def _spawn_ue(self) -> _UE:
        mean = float(self.rng.uniform(6.0, 12.0))
        cqi = float(np.clip(mean + self.rng.normal(0.0, 1.5), 1.0, 15.0))
        return _UE(mean, cqi)

    # -- dynamics ------------------------------------------------------------

    def _advance_demand(self) -> None:
        for s in SLICES:
            u = self.rng.random()
            lvl = self._demand_level[s]
            if lvl == 0:
                lvl = 1 if u < 0.1 else 0
            elif lvl == 2:
                lvl = 1 if u < 0.1 else 2
            else:
                lvl = 0 if u < 0.05 else (2 if u > 0.95 else 1)
            self._demand_level[s] = lvl
            rate = DEMAND_RATES[s][lvl]
            for ue in self._ues[s]:
                ue.demand = rate * float(self.rng.uniform(0.8, 1.2))

    def _advance_channel(self) -> None:
        for s in SLICES:
            for ue in self._ues[s]:
                step = 0.15 * (ue.cqi_mean - ue.cqi) + 0.8 * self.rng.normal()
                ue.cqi = float(np.clip(ue.cqi + step, 1.0, 15.0))

    def _advance_roster(self) -> None:
        u = self.rng.random()
        pick = int(self.rng.integers(0, 3))
        lo, hi = SLICE_COUNT_RANGES[SLICES[pick]]
        new_n = int(self.rng.integers(lo, hi + 1))
        if u >= self.cfg.roster_change_prob:
            return
        s = SLICES[pick]
        cur = len(self._ues[s])
        if new_n > cur:
            self._ues[s].extend(self._spawn_ue() for _ in range(new_n - cur))
        elif new_n < cur:
            del self._ues[s][new_n:]

    def _serve(self, ratios: np.ndarray) -> None:
        """Apply one allocation: compute rates, drain queues, record usage."""
        for i, s in enumerate(SLICES):
            ues = self._ues[s]
            if not ues:
                self._usage[i] = 0.0
                continue
            prbs_per_ue = ratios[i] * self.cfg.n_prb / len(ues)
            capacity = 0.0
            demand = 0.0
            for ue in ues:
                eff = PRB_EFFICIENCY[int(np.clip(math.floor(ue.cqi), 1, 15)) - 1]
                mu = prbs_per_ue * eff
                ue.thp = mu
                capacity += mu
                demand += ue.demand
                ue.backlog = max(
                    0.0, ue.backlog + (ue.demand - mu) * STEP_SECONDS
                )
                ue.dly = min(
                    BASE_DELAY_MS + 1000.0 * ue.backlog / (mu + 1e-6),
                    DELAY_CAP_MS,
                )
            self._usage[i] = ratios[i] * min(1.0, demand / (capacity + 1e-9))
        self._prbs_per_ue = {
            s: (ratios[i] * self.cfg.n_prb / len(self._ues[s]) if self._ues[s] else 0.0)
            for i, s in enumerate(SLICES)
        }

    # -- observation ---------------------------------------------------------

    def _emit(self) -> KpmState:
        rows = []
        tags = []
        frac = self.cfg.kpm_noise_frac
        rng = self.rng
        for i, s in enumerate(SLICES):
            for ue in self._ues[s]:
                prb_share = self._prbs_per_ue[s] / self.cfg.n_prb
                row = [
                    np.clip(_noisy(rng, ue.cqi, 0, frac), 1.0, 15.0),
                    np.clip(_noisy(rng, 2.1 * ue.cqi - 4.0, 1, frac), -5.0, 30.0),
                    max(_noisy(rng, prb_share, 2, frac), 0.0),
                    max(_noisy(rng, 0.6 * prb_share, 3, frac), 0.0),
                    max(_noisy(rng, ue.thp, 4, frac), 0.0),
                    max(_noisy(rng, 0.35 * ue.thp, 5, frac), 0.0),
                    max(_noisy(rng, ue.dly, 6, frac), 0.0),
                    max(_noisy(rng, 0.8 * ue.dly, 7, frac), 0.0),
                    max(_noisy(rng, ue.demand * STEP_SECONDS, 8, frac), 0.0),
                    max(_noisy(rng, self._usage[0], 9, frac), 0.0),
                    max(_noisy(rng, self._usage[1], 10, frac), 0.0),
                    max(_noisy(rng, self._usage[2], 11, frac), 0.0),
                ]
                rows.append(row)
                tags.append(s)
        values = np.array(rows)
        cols = [9, 10, 11]
        sums = values[:, cols].sum(axis=1)
        over = np.flatnonzero(sums > 1.0)
        if over.size:
            values[np.ix_(over, cols)] /= sums[over, None]
        return KpmState(
            task=TASK_SLICING, values=values, entity_tags=tuple(tags), t=self.t
        )

    def _compute_true_concepts(self) -> np.ndarray:
        ues_e = self._ues["eMBB"]
        ues_u = self._ues["URLLC"]
        all_ues = [ue for s in SLICES for ue in self._ues[s]]
        _, dly_u = DEFAULT_QOS_TARGETS["URLLC"]
        c0 = np.clip(sum(ue.demand for ue in ues_e) / 50.0, 0.0, 1.0)
        c1 = np.clip(
            sum(
                0.6 * min(ue.dly / dly_u, 2.0) / 2.0 + 0.4 * (15.0 - ue.cqi) / 14.0
                for ue in ues_u
            )
            / 5.0,
            0.0,
            1.0,
        )
        c2 = np.clip(float(self._usage.sum()) * len(all_ues) / 14.0, 0.0, 1.0)
        c3 = np.clip(sum(ue.cqi for ue in all_ues) / (15.0 * 14.0), 0.0, 1.0)
        return np.array([c0, c1, c2, c3])

    @property
    def true_concepts(self) -> np.ndarray:
        return self._true_concepts.copy()

    @property
    def state(self) -> KpmState:
        return self._state

    # -- transition ----------------------------------------------------------

    def step(self, action: np.ndarray) -> StepOutcome:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError("slicing action must be a 3-vector of PRB ratios")
        if np.any(a < -1e-12) or np.any(a > 1.0 + 1e-12):
            raise ValueError("slicing ratios outside [0, 1]; shield must run first")
        if a.sum() > 1.0 + 1e-9:
            raise ValueError("slicing ratios sum above 1; shield must run first")

        self.t += 1
        self._advance_roster()
        self._advance_demand()
        self._advance_channel()
        self._serve(a)

        thp, dly, thp_t, dly_t, prbs = [], [], [], [], []
        for s in SLICES:
            mu_t, om_t = self.cfg.reward.targets[s]
            for ue in self._ues[s]:
                thp.append(ue.thp)
                dly.append(ue.dly)
                thp_t.append(mu_t)
                dly_t.append(om_t)
                prbs.append(self._prbs_per_ue[s])
        thp = np.array(thp)
        dly = np.array(dly)
        thp_t = np.array(thp_t)
        dly_t = np.array(dly_t)
        prbs = np.array(prbs)
        reward = slicing_reward(prbs, thp, dly, thp_t, dly_t, self.cfg.reward)

        self._state = self._emit()
        self._true_concepts = self._compute_true_concepts()
        return StepOutcome(
            state=self._state,
            reward=reward,
            throughput=thp,
            delay=dly,
            thp_target=thp_t,
            dly_target=dly_t,
            thp_violation=(thp < thp_t).astype(np.float64),
            dly_violation=(dly > dly_t).astype(np.float64),
            true_concepts=self._true_concepts.copy(),
        )


class HandoverEnv:
    """Discrete-control task: keep or switch the serving cell of one UE."""

    task = TASK_HANDOVER
    ACTION_STAY = 0
    ACTION_SWITCH = 1

    def __init__(self, cfg: EnvConfig):
        if cfg.task != TASK_HANDOVER:
            raise ConfigError("HandoverEnv requires a handover config")
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.t = 0
        self._state: KpmState | None = None

    def reset(self) -> KpmState:
        self.rng = np.random.default_rng(self.cfg.seed)
        self.t = 0
        self._x = float(self.rng.uniform(0.25, 0.75))
        self._serving = 0
        self._shadow = self.rng.normal(0.0, 1.5, size=2)
        self._load = np.clip(
            self.cfg.load_mean + self.rng.normal(0.0, 0.18, size=2), 0.0, 1.0
        )
        self._burst = float(np.clip(self.rng.normal(0.35, 0.15), 0.0, 1.0))
        self._interrupted = False
        self._last_switch_t = -(10**9)
        self._update_derived()
        self._state = self._emit()
        return self._state

    # -- latent processes ----------------------------------------------------

    def _advance(self) -> None:
        # mean-reverting walk keeps deep-fade corners rare
        self._x = float(self._x + 0.10 * (0.5 - self._x)
                        + self.rng.normal(0.0, 0.045))
        while self._x < 0.0 or self._x > 1.0:
            self._x = -self._x if self._x < 0.0 else 2.0 - self._x
        theta, sig = 0.35, self.cfg.shadowing_sigma_db
        self._shadow = self._shadow + theta * (0.0 - self._shadow) + sig * self.rng.normal(size=2)
        self._load = np.clip(
            self._load
            + 0.10 * (self.cfg.load_mean - self._load)
            + 0.08 * self.rng.normal(size=2),
            0.0,
            1.0,
        )
        self._burst = float(
            np.clip(
                self._burst + 0.2 * (0.35 - self._burst) + 0.13 * self.rng.normal(),
                0.0,
                1.0,
            )
        )

    def _rsrp(self, cell: int) -> float:
        d = abs(self._x - self.cfg.cell_positions[cell])
        pl = -58.0 - 10.0 * self.cfg.path_loss_exponent * math.log10(1.0 + 9.0 * d)
        return float(np.clip(pl + self._shadow[cell], -140.0, -40.0))

    def _signal_quality(self, cell: int) -> float:
        return float(np.clip((self._rsrp(cell) + 100.0) / 55.0, 0.0, 1.0))

    def _update_derived(self) -> None:
        serv, tgt = self._serving, 1 - self._serving
        c4 = self._signal_quality(serv)
        c5 = self._signal_quality(tgt)
        c6 = float(self._load[serv])
        c7 = float(self._load[tgt])
        c8 = float(np.clip(0.45 * c6 + 0.3 * (1.0 - c4) + 0.45 * self._burst - 0.1, 0.0, 1.0))
        self._true = np.array([c4, c5, c6, c7, c8])
        interruption = HANDOVER_INTERRUPTION_MS if self._interrupted else 0.0
        self._dly = min(6.0 + 160.0 * c8**1.3 + interruption, DELAY_CAP_MS)
        self._thp = 14.0 * (1.0 - 0.65 * c8) * (0.25 + 0.75 * c4)

    @property
    def true_concepts(self) -> np.ndarray:
        return self._true.copy()

    @property
    def state(self) -> KpmState:
        return self._state

    # -- observation ---------------------------------------------------------

    def _emit(self) -> KpmState:
        c4, c5, c6, c7, c8 = self._true
        serv, tgt = self._serving, 1 - self._serving
        frac = self.cfg.kpm_noise_frac
        rng = self.rng
        m = len(task_metric_ids(TASK_HANDOVER))
        values = np.zeros((2, m))

        def put(row: int, metric_id: int, value: float, lo: float, hi: float,
                noise: bool = True):
            col = metric_id - 12
            v = _noisy(rng, value, metric_id, frac) if noise else value
            values[row, col] = float(np.clip(v, lo, hi))

        cqi = 1.0 + 14.0 * float(np.clip(c4 - 0.12 * c7, 0.0, 1.0))
        put(0, 12, float(serv), 0.0, 1.0, noise=False)
        put(0, 13, self._rsrp(serv), -140.0, -40.0)
        put(0, 14, -4.0 - 11.0 * c6 - 3.0 * (1.0 - c4), -20.0, -3.0)
        put(0, 15, -8.0 + 30.0 * c4 - 6.0 * c7, -10.0, 30.0)
        put(0, 19, self._thp, 0.0, 50.0)
        put(0, 20, 0.4 * self._thp, 0.0, 50.0)
        put(0, 21, self._dly, 0.0, 500.0)
        put(0, 22, 0.8 * self._dly, 0.0, 500.0)
        put(0, 23, cqi, 1.0, 15.0)
        put(0, 24, -5.0 + 32.0 * c4, -5.0, 30.0)
        put(0, 25, 0.02 + 0.35 * c8, 0.0, 1.0)
        put(0, 26, 0.015 + 0.25 * c8, 0.0, 1.0)
        put(0, 27, c6, 0.0, 1.0)
        put(0, 28, 0.85 * c6, 0.0, 1.0)
        put(1, 16, self._rsrp(tgt), -140.0, -40.0)
        put(1, 17, -4.0 - 11.0 * c7 - 3.0 * (1.0 - c5), -20.0, -3.0)
        put(1, 18, -8.0 + 30.0 * c5 - 6.0 * c6, -10.0, 30.0)
        put(1, 29, c7, 0.0, 1.0)
        put(1, 30, 0.85 * c7, 0.0, 1.0)

        return KpmState(
            task=TASK_HANDOVER,
            values=values,
            entity_tags=CELLS,
            t=self.t,
            last_switch_t=self._last_switch_t,
        )

    # -- transition ----------------------------------------------------------

    def step(self, action: int) -> StepOutcome:
        if self._state is None:
            raise RuntimeError("call reset() before step()")
        if action not in (self.ACTION_STAY, self.ACTION_SWITCH):
            raise ValueError(f"unknown handover action code: {action!r}")

        self.t += 1
        if action == self.ACTION_SWITCH:
            self._serving = 1 - self._serving
            self._interrupted = True
            self._last_switch_t = self.t
        else:
            self._interrupted = False
        self._advance()
        self._update_derived()

        mu_t, om_t = self.cfg.reward.targets["ue"]
        reward = handover_reward(self._thp, self._dly, mu_t, om_t, self.cfg.reward)
        self._state = self._emit()
        thp = np.array([self._thp])
        dly = np.array([self._dly])
        return StepOutcome(
            state=self._state,
            reward=reward,
            throughput=thp,
            delay=dly,
            thp_target=np.array([mu_t]),
            dly_target=np.array([om_t]),
            thp_violation=(thp < mu_t).astype(np.float64),
            dly_violation=(dly > om_t).astype(np.float64),
            true_concepts=self._true.copy(),
        )


def make_env(cfg: EnvConfig):
    return SlicingEnv(cfg) if cfg.task == TASK_SLICING else HandoverEnv(cfg)


def true_concept_names(task: str) -> tuple[str, ...]:
    return SLICING_CONCEPT_NAMES if task == TASK_SLICING else HANDOVER_CONCEPT_NAMES
