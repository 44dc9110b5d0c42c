"""Airport surface layout and the binary state coding.

The movement area is discretized into spatial samples ("cells") of length
L_s, each holding at most one aircraft.  Every ramp contributes one control
point (the departure spot) feeding a fixed entry cell; all cells drain
through successor links into the runway queue, a counter capped at B.

A surface state is the bit string

    [control points, one bit per ramp][taxiway, one bit per cell][queue count]

read most-significant-first in declared order, with the queue written in
ceil(log2(B+1)) bits.  The integer value of that string is the state index.
Under alternation fairness a turn field (which ramp is served next) is
appended as a trailing factor: index = bits * R + turn.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

from .errors import ConfigError, EncodingError, StateRangeError

FAIRNESS_MODES = ("none", "alternation", "statistical")
MERGE_TIEBREAKS = ("main_priority", "coin_flip")
MOTION_DRAWS = ("synchronized", "independent")


@dataclass(frozen=True)
class ModelParams:
    """Stochastic surface parameters.

    L_s   sample length in meters
    T_s   sampling time in seconds
    m     per-step forward-move probability of a taxiing aircraft
    c1    per-step take-off probability of the faster runway slot
    c2    per-step take-off probability of the slower runway slot
    B     runway queue capacity
    """

    L_s: float
    T_s: float
    m: float
    c1: float
    c2: float
    B: int

    def __post_init__(self):
        if not (self.L_s > 0 and self.T_s > 0):
            raise ConfigError("L_s and T_s must be positive")
        for name in ("m", "c1", "c2"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if not (isinstance(self.B, int) and self.B >= 1):
            raise ConfigError(f"queue capacity B={self.B} must be an integer >= 1")
        if self.c2 > self.c1:
            raise ConfigError("take-off probabilities must satisfy c1 >= c2")


@dataclass(frozen=True)
class StateVector:
    """Decoded surface state.

    Bit r of control_points is ramp r's spot; bit i of taxiway is cell i in
    declared order.  turn is meaningful only under alternation fairness.
    """

    control_points: int
    taxiway: int
    buffer_count: int
    turn: int = 0


@dataclass(frozen=True)
class ObservationScheme:
    """What a partial-information agent gets to see.

    zones       disjoint groups of cell indices, each reported as a count
    spot_cells  cell indices reported as individual occupancy bits
    The remainder (cells in no zone or spot list, plus the runway queue) is
    reported as one aggregate count.  Control points are always visible to
    the releasing agent, as is the turn under alternation.
    """

    name: str
    zones: tuple[tuple[int, ...], ...]
    spot_cells: tuple[int, ...]


@dataclass(frozen=True)
class AirportTopology:
    """Immutable surface graph plus the derived bit layout."""

    name: str
    params: ModelParams
    cell_ids: tuple[str, ...]
    successor: tuple[int, ...]          # per cell; -1 means the runway queue
    ramp_names: tuple[str, ...]
    entry_cell: tuple[int, ...]         # per ramp
    fairness_mode: str
    merge_tiebreak: str = "main_priority"
    motion_draws: str = "synchronized"
    observation_schemes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_ramps < 1:
            raise ConfigError("at least one ramp is required")
        if self.fairness_mode not in FAIRNESS_MODES:
            raise ConfigError(f"unknown fairness_mode {self.fairness_mode!r}")
        if self.merge_tiebreak not in MERGE_TIEBREAKS:
            raise ConfigError(f"unknown merge_tiebreak {self.merge_tiebreak!r}")
        if self.motion_draws not in MOTION_DRAWS:
            raise ConfigError(f"unknown motion_draws {self.motion_draws!r}")
        n = self.n_cells
        for c, s in enumerate(self.successor):
            if s != -1 and not (0 <= s < n):
                raise ConfigError(f"cell {self.cell_ids[c]} has invalid successor")
            if s == c:
                raise ConfigError(f"cell {self.cell_ids[c]} is its own successor")
        for r, e in enumerate(self.entry_cell):
            if not (0 <= e < n):
                raise ConfigError(f"ramp {self.ramp_names[r]} has invalid entry cell")
        # every cell must drain into the queue; detects cycles as well
        for c in range(n):
            seen, cur = set(), c
            while cur != -1:
                if cur in seen:
                    raise ConfigError(f"cycle in taxiway graph at cell {self.cell_ids[c]}")
                seen.add(cur)
                cur = self.successor[cur]

    # --- derived layout -------------------------------------------------

    @property
    def n_ramps(self) -> int:
        return len(self.ramp_names)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def B(self) -> int:
        return self.params.B

    @property
    def buffer_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.B + 1)))

    @property
    def n_bits(self) -> int:
        return self.n_ramps + self.n_cells + self.buffer_bits

    @property
    def turn_factor(self) -> int:
        return self.n_ramps if self.fairness_mode == "alternation" else 1

    @property
    def index_space(self) -> int:
        """Size of the encoding range (includes gap indices when B+1 is not
        a power of two)."""
        return (1 << self.n_bits) * self.turn_factor

    @property
    def n_valid_states(self) -> int:
        return (1 << self.n_ramps) * (1 << self.n_cells) * (self.B + 1) * self.turn_factor

    def distance_to_buffer(self, cell: int) -> int:
        """Number of successful moves an aircraft in `cell` needs to enter
        the runway queue."""
        d, cur = 0, cell
        while cur != -1:
            d += 1
            cur = self.successor[cur]
        return d

    def path_length(self, ramp: int) -> int:
        """Cells on the ramp's path, entry cell included.  Unimpeded transit
        time from entering the first cell to entering the queue averages
        path_length / m steps."""
        return self.distance_to_buffer(self.entry_cell[ramp])

    def processing_order(self) -> tuple[int, ...]:
        """Cells ordered front to back (nearest the queue first)."""
        return tuple(sorted(range(self.n_cells), key=self.distance_to_buffer))

    def merge_points(self) -> tuple[int, ...]:
        """Cells with more than one feeder (cell predecessors plus ramp
        entries)."""
        feeders = {c: 0 for c in range(self.n_cells)}
        for s in self.successor:
            if s != -1:
                feeders[s] += 1
        for e in self.entry_cell:
            feeders[e] += 1
        return tuple(c for c in range(self.n_cells) if feeders[c] > 1)

    def cell_index(self, cell_id: str) -> int:
        try:
            return self.cell_ids.index(cell_id)
        except ValueError:
            raise ConfigError(f"unknown cell id {cell_id!r}") from None


# --- state coding -------------------------------------------------------


def encode_state(s: StateVector, t: AirportTopology) -> int:
    """Pack a state into its integer index (see the module docstring)."""
    R, n, bb = t.n_ramps, t.n_cells, t.buffer_bits
    if s.control_points < 0 or s.control_points >> R:
        raise EncodingError(f"control_points 0x{s.control_points:x} does not fit {R} bits")
    if s.taxiway < 0 or s.taxiway >> n:
        raise EncodingError(f"taxiway 0x{s.taxiway:x} does not fit {n} bits")
    if not (0 <= s.buffer_count <= t.B):
        raise EncodingError(f"buffer_count {s.buffer_count} outside [0, {t.B}]")
    bits = 0
    for r in range(R):
        bits = (bits << 1) | ((s.control_points >> r) & 1)
    for c in range(n):
        bits = (bits << 1) | ((s.taxiway >> c) & 1)
    bits = (bits << bb) | s.buffer_count
    if t.fairness_mode == "alternation":
        if not (0 <= s.turn < R):
            raise EncodingError(f"turn {s.turn} outside [0, {R})")
        return bits * R + s.turn
    if s.turn != 0:
        raise EncodingError("turn field is only meaningful under alternation")
    return bits


def decode_state(i: int, t: AirportTopology) -> StateVector:
    """Inverse of encode_state; rejects indices outside the valid range
    (including buffer-field gaps)."""
    if not (0 <= i < t.index_space):
        raise StateRangeError(f"state index {i} outside [0, {t.index_space})")
    turn = 0
    if t.fairness_mode == "alternation":
        i, turn = divmod(i, t.n_ramps)
    R, n, bb = t.n_ramps, t.n_cells, t.buffer_bits
    buffer_count = i & ((1 << bb) - 1)
    if buffer_count > t.B:
        raise StateRangeError(f"index decodes to buffer_count {buffer_count} > B={t.B}")
    i >>= bb
    taxiway = 0
    for c in reversed(range(n)):
        taxiway |= (i & 1) << c
        i >>= 1
    control_points = 0
    for r in reversed(range(R)):
        control_points |= (i & 1) << r
        i >>= 1
    return StateVector(control_points, taxiway, buffer_count, turn)


def count_taxiing(s: StateVector) -> int:
    """Aircraft on the surface: standing at spots, rolling on the taxiway,
    or queued at the runway."""
    return bin(s.control_points).count("1") + bin(s.taxiway).count("1") + s.buffer_count


def runway_idle_indicator(s: StateVector) -> int:
    """1 when the runway queue is empty (a take-off slot would be wasted)."""
    return 1 if s.buffer_count == 0 else 0


def feasible_decisions(s: StateVector, t: AirportTopology) -> tuple[int, ...]:
    """Release masks allowed in s, the all-zero mask always included.

    A ramp may appear in the mask only if its spot is free at the start of
    the step.  Under alternation only the turn ramp may be released.
    """
    if t.fairness_mode == "alternation":
        out = [0]
        if not (s.control_points >> s.turn) & 1:
            out.append(1 << s.turn)
        return tuple(out)
    free = (~s.control_points) & ((1 << t.n_ramps) - 1)
    # enumerate submasks of the free-spot set, ascending
    return tuple(k for k in range(1 << t.n_ramps) if k & ~free == 0)


# --- config loading -----------------------------------------------------


def load_topology(source) -> AirportTopology:
    """Build a topology from a JSON file path, a JSON string, or a dict.

    Bare names resolve against the configs shipped with the package
    (``laguardia`` / ``seattle``).
    """
    if isinstance(source, dict):
        cfg = source
    else:
        text = None
        if isinstance(source, (str, os.PathLike)):
            p = os.fspath(source)
            if os.path.exists(p):
                with open(p) as f:
                    text = f.read()
            elif p.lstrip().startswith("{"):
                text = p
            else:
                text = _packaged_config(p)
        if text is None:
            raise ConfigError(f"cannot locate airport config {source!r}")
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in airport config: {e}") from None
    return _topology_from_dict(cfg)


def _packaged_config(name: str) -> str:
    from importlib import resources

    base = os.path.basename(name)
    if not base.endswith(".json"):
        base += ".json"
    ref = resources.files("tarmac").joinpath("data", base)
    if not ref.is_file():
        raise ConfigError(f"cannot locate airport config {name!r}")
    return ref.read_text()


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"airport config missing required key {key!r}")
    return cfg[key]


def _topology_from_dict(cfg: dict) -> AirportTopology:
    p = _require(cfg, "params")
    for k in ("L_s", "T_s", "m", "c1", "c2"):
        if k not in p:
            raise ConfigError(f"params missing {k!r}")
    B = _require(cfg, "buffer_capacity")
    if not isinstance(B, int):
        raise ConfigError("buffer_capacity must be an integer")
    params = ModelParams(
        L_s=float(p["L_s"]), T_s=float(p["T_s"]),
        m=float(p["m"]), c1=float(p["c1"]), c2=float(p["c2"]), B=B,
    )

    cells = _require(cfg, "cells")
    if not cells:
        raise ConfigError("at least one taxiway cell is required")
    cell_ids = tuple(str(_require(c, "id")) for c in cells)
    if len(set(cell_ids)) != len(cell_ids):
        raise ConfigError("duplicate cell ids")
    pos = {cid: i for i, cid in enumerate(cell_ids)}
    succ = []
    for c in cells:
        s = _require(c, "successor")
        if s in ("buffer", None):
            succ.append(-1)
        elif s in pos:
            succ.append(pos[s])
        else:
            raise ConfigError(f"cell {c['id']!r} names unknown successor {s!r}")

    ramps = _require(cfg, "ramps")
    if not ramps:
        raise ConfigError("at least one ramp is required")
    ramp_names = tuple(str(_require(r, "name")) for r in ramps)
    if len(set(ramp_names)) != len(ramp_names):
        raise ConfigError("duplicate ramp names")
    entries = []
    for r in ramps:
        e = _require(r, "entry_cell")
        if e not in pos:
            raise ConfigError(f"ramp {r['name']!r} names unknown entry cell {e!r}")
        entries.append(pos[e])

    schemes = {}
    for lvl in cfg.get("observation_levels", []):
        nm = str(_require(lvl, "name"))
        zones = []
        claimed = set()
        for zone in lvl.get("zones", []):
            zi = tuple(pos[c] if c in pos else _bad_zone_cell(c) for c in zone)
            if claimed & set(zi):
                raise ConfigError(f"observation level {nm!r} assigns a cell to two zones")
            claimed |= set(zi)
            zones.append(zi)
        spot_cells = []
        for c in lvl.get("spot_cells", []):
            if c not in pos:
                _bad_zone_cell(c)
            if pos[c] in claimed:
                raise ConfigError(f"observation level {nm!r} lists cell {c!r} twice")
            claimed.add(pos[c])
            spot_cells.append(pos[c])
        schemes[nm] = ObservationScheme(nm, tuple(zones), tuple(spot_cells))

    return AirportTopology(
        name=str(cfg.get("name", "airport")),
        params=params,
        cell_ids=cell_ids,
        successor=tuple(succ),
        ramp_names=ramp_names,
        entry_cell=tuple(entries),
        fairness_mode=str(cfg.get("fairness_mode", "none")),
        merge_tiebreak=str(cfg.get("merge_tiebreak", "main_priority")),
        motion_draws=str(cfg.get("motion_draws", "synchronized")),
        observation_schemes=schemes,
    )


def _bad_zone_cell(c):
    raise ConfigError(f"observation level references unknown cell {c!r}")


def config_hash(source) -> str:
    """Content hash of a config (canonical JSON, key-sorted), 12 hex chars.

    Whitespace and key order in the file do not affect the hash.
    """
    import hashlib

    if isinstance(source, dict):
        cfg = source
    elif isinstance(source, (str, os.PathLike)) and os.path.exists(os.fspath(source)):
        with open(source) as f:
            cfg = json.load(f)
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        cfg = json.loads(source)
    else:
        cfg = json.loads(_packaged_config(os.fspath(source)))
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
