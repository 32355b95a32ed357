"""Telemetry schema shared by the simulators, teachers, and concept layer.

Each task exposes a fixed, ordered set of per-entity metrics identified by
global ids. Slicing states are one row per UE over metric ids 0..11;
handover states are exactly two rows (serving / target cell) over ids
12..30. Trace files and the concept template both reference the global
ids, so the column ordering here is load-bearing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASK_SLICING = "slicing"
TASK_HANDOVER = "handover"
TASKS = (TASK_SLICING, TASK_HANDOVER)

SLICES = ("eMBB", "URLLC", "mMTC")
CELLS = ("serv", "tgt")

# metric id -> (short name, (lo, hi) plausible range)
METRICS: dict[int, tuple[str, tuple[float, float]]] = {
    0: ("cqi_dl", (1.0, 15.0)),
    1: ("snr_ul", (-5.0, 30.0)),
    2: ("ue_prb_dl", (0.0, 1.0)),
    3: ("ue_prb_ul", (0.0, 1.0)),
    4: ("thp_dl", (0.0, 50.0)),
    5: ("thp_ul", (0.0, 50.0)),
    6: ("delay_dl", (0.0, 500.0)),
    7: ("delay_ul", (0.0, 500.0)),
    8: ("vol_dl", (0.0, 25.0)),
    9: ("slice_prb_embb", (0.0, 1.0)),
    10: ("slice_prb_urllc", (0.0, 1.0)),
    11: ("slice_prb_mmtc", (0.0, 1.0)),
    12: ("cell_index", (0.0, 1.0)),
    13: ("srv_rsrp", (-140.0, -40.0)),
    14: ("srv_rsrq", (-20.0, -3.0)),
    15: ("srv_sinr", (-10.0, 30.0)),
    16: ("tgt_rsrp", (-140.0, -40.0)),
    17: ("tgt_rsrq", (-20.0, -3.0)),
    18: ("tgt_sinr", (-10.0, 30.0)),
    19: ("thp_dl_ho", (0.0, 50.0)),
    20: ("thp_ul_ho", (0.0, 50.0)),
    21: ("delay_dl_ho", (0.0, 500.0)),
    22: ("delay_ul_ho", (0.0, 500.0)),
    23: ("cqi_ho", (1.0, 15.0)),
    24: ("snr_ho", (-5.0, 30.0)),
    25: ("nack_dl", (0.0, 1.0)),
    26: ("nack_ul", (0.0, 1.0)),
    27: ("srv_prb_dl", (0.0, 1.0)),
    28: ("srv_prb_ul", (0.0, 1.0)),
    29: ("tgt_prb_dl", (0.0, 1.0)),
    30: ("tgt_prb_ul", (0.0, 1.0)),
}

SLICING_METRIC_IDS = tuple(range(0, 12))
HANDOVER_METRIC_IDS = tuple(range(12, 31))

# fixed slot layout used when flattening variable rosters for neural policies
SLICING_BLOCKS = (("eMBB", 5), ("URLLC", 5), ("mMTC", 4))
HANDOVER_BLOCKS = (("serv", 1), ("tgt", 1))

# handover metrics live on exactly one of the two cell rows; the other
# row's entry is structurally zero
HANDOVER_METRIC_ROW = {mid: ("tgt" if mid in (16, 17, 18, 29, 30) else "serv")
                       for mid in range(12, 31)}


def task_metric_ids(task: str) -> tuple[int, ...]:
    if task == TASK_SLICING:
        return SLICING_METRIC_IDS
    if task == TASK_HANDOVER:
        return HANDOVER_METRIC_IDS
    raise ValueError(f"unknown task: {task!r}")


def task_blocks(task: str) -> tuple[tuple[str, int], ...]:
    return SLICING_BLOCKS if task == TASK_SLICING else HANDOVER_BLOCKS


def metric_name(metric_id: int) -> str:
    return METRICS[metric_id][0]


def metric_range(metric_id: int) -> tuple[float, float]:
    return METRICS[metric_id][1]


@dataclass
class KpmState:
    """One telemetry snapshot: entities x metrics, plus roster and step tags.

    `last_switch_t` carries the most recent handover timestamp so dwell
    constraints can be checked without extra plumbing (slicing leaves it
    at the sentinel).
    """

    task: str
    values: np.ndarray  # (G, M) float64
    entity_tags: tuple[str, ...]
    t: int = 0
    last_switch_t: int = -(10**9)
    metric_ids: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task: {self.task!r}")
        if self.metric_ids is None:
            self.metric_ids = task_metric_ids(self.task)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("state values must be a 2-D matrix")
        if self.values.shape != (len(self.entity_tags), len(self.metric_ids)):
            raise ValueError(
                f"shape {self.values.shape} does not match roster "
                f"({len(self.entity_tags)}) x metrics ({len(self.metric_ids)})"
            )

    @property
    def n_entities(self) -> int:
        return self.values.shape[0]

    def column(self, metric_id: int) -> int:
        try:
            return self.metric_ids.index(metric_id)
        except ValueError:
            raise KeyError(f"metric id {metric_id} not in this state's schema")

    def validate(self) -> None:
        """Check the schema invariants; raises ValueError on violation."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValueError("state contains non-finite entries")
        for mid in self.metric_ids:
            col = self.column(mid)
            name = metric_name(mid)
            if self.task == TASK_HANDOVER:
                owner = HANDOVER_METRIC_ROW[mid]
                rows = [i for i, e in enumerate(self.entity_tags) if e == owner]
                x = v[rows, col]
            else:
                x = v[:, col]
            if name in ("cqi_dl", "cqi_ho"):
                if np.any(x < 1.0 - 1e-9) or np.any(x > 15.0 + 1e-9):
                    raise ValueError(f"{name} outside [1, 15]")
            elif "prb" in name:
                if np.any(x < -1e-9):
                    raise ValueError(f"{name} negative")
            elif "rsrp" in name:
                if np.any(x < -140.0 - 1e-9) or np.any(x > -40.0 + 1e-9):
                    raise ValueError(f"{name} outside [-140, -40] dBm")
            elif "delay" in name:
                if np.any(x < -1e-9):
                    raise ValueError(f"{name} negative")
        if self.task == TASK_SLICING:
            cols = [self.column(m) for m in (9, 10, 11)]
            sums = v[:, cols].sum(axis=1)
            if np.any(sums > 1.0 + 1e-9):
                raise ValueError("per-slice PRB usages sum above 1")
            for tag in self.entity_tags:
                if tag not in SLICES:
                    raise ValueError(f"unknown slice tag: {tag!r}")
        else:
            if tuple(self.entity_tags) != CELLS:
                raise ValueError("handover roster must be exactly (serv, tgt)")

    def rows_for(self, selector: str) -> np.ndarray:
        """Resolve an entity selector to row indices.

        Grammar: "all" | "slice:<eMBB|URLLC|mMTC>" | "cell:<serv|tgt>".
        """
        if selector == "all":
            return np.arange(self.n_entities)
        kind, _, tag = selector.partition(":")
        if kind == "slice" and tag in SLICES:
            return np.array(
                [i for i, e in enumerate(self.entity_tags) if e == tag], dtype=int
            )
        if kind == "cell" and tag in CELLS:
            return np.array(
                [i for i, e in enumerate(self.entity_tags) if e == tag], dtype=int
            )
        raise ValueError(f"bad entity selector: {selector!r}")

    def copy(self) -> "KpmState":
        return KpmState(
            task=self.task,
            values=self.values.copy(),
            entity_tags=tuple(self.entity_tags),
            t=self.t,
            last_switch_t=self.last_switch_t,
            metric_ids=tuple(self.metric_ids),
        )


def flat_dim(task: str) -> int:
    caps = sum(c for _, c in task_blocks(task))
    return caps * len(task_metric_ids(task)) + caps


def flat_spans(task: str) -> np.ndarray:
    """Schema range width of every flattened dimension (mask dims span 1)."""
    ids = task_metric_ids(task)
    caps = sum(c for _, c in task_blocks(task))
    spans = [metric_range(m)[1] - metric_range(m)[0] for m in ids] * caps
    return np.array(spans + [1.0] * caps)


def flatten_state(state: KpmState) -> np.ndarray:
    """Zero-pad rows into fixed per-tag slot blocks and append a presence mask.

    Gives neural policies a constant-width view of a variable roster; slot
    position encodes the entity tag.
    """
    blocks = task_blocks(state.task)
    m = len(state.metric_ids)
    caps = [c for _, c in blocks]
    total = sum(caps)
    out = np.zeros(total * m + total)
    mask = np.zeros(total)
    offset = 0
    for tag, cap in blocks:
        rows = [i for i, e in enumerate(state.entity_tags) if e == tag]
        if len(rows) > cap:
            raise ValueError(f"{len(rows)} entities tagged {tag!r} exceed slot block {cap}")
        for slot, row in enumerate(rows):
            out[(offset + slot) * m : (offset + slot + 1) * m] = state.values[row]
            mask[offset + slot] = 1.0
        offset += cap
    out[total * m :] = mask
    return out
