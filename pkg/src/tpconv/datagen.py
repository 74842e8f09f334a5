"""Synthetic episodes, offset samplers, example assembly and CSV interchange.

Two stand-in processes:

* a *field* process -- fixed stations reporting irregularly on a smooth
  field made of drifting Gaussian bumps (weather-like nowcasting);
* an *entity* process -- two teams of units of three types that move with
  piecewise-constant velocities and wear each other down (battle-like).

Both are pure functions of ``(spec, seed)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .geometry import PointCloud, QuerySet

FIELD_ATTRIBUTES = ("humidity", "temperature", "wind_speed", "pressure")
ENTITY_FEATURES = ("team", "unit_type", "health", "shield", "orientation")
ENTITY_TARGETS = ("pos_x", "pos_y", "health", "shield", "orientation", "alive")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class Episode:
    """Sample table of one episode: one row per (entity/station, time) report."""

    episode_id: int
    entity_ids: np.ndarray
    times: np.ndarray
    locations: np.ndarray
    quality_ok: np.ndarray
    features: np.ndarray
    kind: str = "field"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def equals(self, other: "Episode") -> bool:
        return (self.episode_id == other.episode_id
                and np.array_equal(self.entity_ids, other.entity_ids)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.locations, other.locations)
                and np.array_equal(self.quality_ok, other.quality_ok)
                and np.array_equal(self.features, other.features))


# ------------------------------------------------------------------ field process


@dataclass
class FieldProcessSpec:
    n_stations: int = 50
    arena: float = 10.0
    n_sources: int = 4
    speed_range: tuple = (0.1, 0.4)
    width_range: tuple = (1.2, 2.5)
    amplitude_range: tuple = (0.6, 1.4)
    noise: float = 0.02
    report_rate_range: tuple = (0.7, 1.5)
    duration: float = 40.0
    dropout: float = 0.2
    bad_fraction: float = 0.02
    n_attributes: int = 4

    def __post_init__(self):
        if self.n_stations < 1 or self.n_sources < 1:
            raise ValueError("station and source counts must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_attributes != 4:
            raise ValueError("the field process produces exactly 4 attributes")


@dataclass
class FieldState:
    """Closed-form description of the field so it can be evaluated anywhere."""

    start: np.ndarray      # (S, 2) source positions at t=0
    velocity: np.ndarray   # (S, 2)
    width: np.ndarray      # (S,)
    amplitude: np.ndarray  # (S,)
    trend: np.ndarray      # (2,) static background gradient

    def values(self, loc: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Noise-free attributes at points ``loc`` (n, 2) and times ``t`` (n,)."""
        loc = np.atleast_2d(loc)
        t = np.asarray(t, float).reshape(-1)
        centers = self.start[None, :, :] + t[:, None, None] * self.velocity[None, :, :]
        diff = loc[:, None, :] - centers
        r2 = (diff ** 2).sum(-1)
        bump = self.amplitude * np.exp(-r2 / (2 * self.width ** 2))
        phi = bump.sum(1) + loc @ self.trend
        grad = (-(diff / (self.width ** 2)[None, :, None]) * bump[..., None]).sum(1) + self.trend
        gnorm = np.sqrt((grad ** 2).sum(-1))
        # offsets chosen so a 25% fault is about half the p10-p90 spread
        humidity = 60.0 - 20.0 * phi + 6.0 * grad[:, 0]
        temperature = 20.0 + 8.0 * phi
        wind = 4.0 + 6.0 * gnorm
        pressure = 100.0 + 1.5 * phi - 2.0 * grad[:, 1]
        return np.column_stack([humidity, temperature, wind, pressure])


def gen_field_episode(spec: FieldProcessSpec, seed, episode_id: int = 0) -> Episode:
    rng = _rng(seed)
    stations = rng.uniform(0, spec.arena, (spec.n_stations, 2))
    s = spec.n_sources
    heading = rng.uniform(0, 2 * np.pi, s)
    speed = rng.uniform(*spec.speed_range, s)
    state = FieldState(
        start=rng.uniform(0, spec.arena, (s, 2)),
        velocity=np.column_stack([np.cos(heading), np.sin(heading)]) * speed[:, None],
        width=rng.uniform(*spec.width_range, s),
        amplitude=rng.uniform(*spec.amplitude_range, s) * rng.choice([-1.0, 1.0], s),
        trend=rng.normal(0, 0.03, 2),
    )
    rates = rng.uniform(*spec.report_rate_range, spec.n_stations)
    ids, times = [], []
    for sid, rate in enumerate(rates):
        n = rng.poisson(rate * spec.duration)
        ts = np.sort(rng.uniform(0, spec.duration, n))
        ids.append(np.full(n, sid))
        times.append(ts)
    ids = np.concatenate(ids).astype(np.int64)
    times = np.concatenate(times)
    order = np.lexsort((ids, times))
    ids, times = ids[order], times[order]
    locs = stations[ids]
    values = state.values(locs, times) + spec.noise * rng.standard_normal((len(times), 4))
    quality = rng.uniform(size=len(times)) >= spec.bad_fraction
    meta = {"stations": stations, "field": state, "spec": asdict(spec)}
    return Episode(episode_id, ids, times, locs, quality, values, "field", meta)


# ------------------------------------------------------------------ entity process


@dataclass
class EntityProcessSpec:
    team_size_range: tuple = (4, 8)
    n_unit_types: int = 3
    arena: float = 10.0
    n_steps: int = 40
    segment_length: int = 4
    type_speed: tuple = (0.35, 0.25, 0.15)
    type_attack: tuple = (1.0, 1.5, 2.0)
    type_shield: tuple = (0.0, 0.5, 0.3)
    heading_noise: float = 0.4
    damage_radius: float = 1.5
    damage_rate: float = 0.04
    orientation_bins: int = 8
    sampling_interval: int = 1

    def __post_init__(self):
        lo, hi = self.team_size_range
        if lo < 1 or hi < lo:
            raise ValueError("team sizes must be >= 1")
        if len(self.type_speed) != self.n_unit_types:
            raise ValueError("type_speed needs one entry per unit type")


def orientation_bin(vx: float, vy: float, bins: int) -> int:
    angle = math.atan2(vy, vx) % (2 * math.pi)
    return int(round(angle / (2 * math.pi / bins))) % bins


def gen_entity_episode(spec: EntityProcessSpec, seed, episode_id: int = 0,
                       initial: dict | None = None) -> Episode:
    """Simulate a battle. ``initial`` may pin ``positions``, ``teams``,
    ``types`` and ``velocities`` (the latter held fixed for the episode)."""
    rng = _rng(seed)
    if initial and "positions" in initial:
        pos = np.asarray(initial["positions"], float).copy()
        team = np.asarray(initial["teams"], int)
        utype = np.asarray(initial.get("types", np.zeros(len(pos), int)), int)
    else:
        sizes = rng.integers(spec.team_size_range[0], spec.team_size_range[1] + 1, 2)
        team = np.repeat([0, 1], sizes)
        utype = rng.integers(0, spec.n_unit_types, len(team))
        base = np.where(team[:, None] == 0, [0.25, 0.5], [0.75, 0.5]) * spec.arena
        pos = base + rng.normal(0, 0.08 * spec.arena, (len(team), 2))
        pos = np.clip(pos, 0, spec.arena)
    n = len(team)
    fixed_velocity = None if not initial or "velocities" not in initial else np.asarray(initial["velocities"], float)
    type_shield = np.asarray(spec.type_shield)[utype]
    health = np.ones(n)
    shield = type_shield.copy()
    alive = np.ones(n, bool)
    vel = np.zeros((n, 2))
    orient = np.array([0 if t == 0 else spec.orientation_bins // 2 for t in team])
    attack = np.asarray(spec.type_attack)[utype]
    speed = np.asarray(spec.type_speed)[utype]

    rows = []
    for step in range(spec.n_steps):
        if step % spec.sampling_interval == 0:
            for u in np.flatnonzero(alive):
                rows.append((u, float(step), pos[u, 0], pos[u, 1],
                             team[u], utype[u], health[u], shield[u], orient[u]))
        if fixed_velocity is not None:
            vel = fixed_velocity.copy()
        elif step % spec.segment_length == 0:
            for u in np.flatnonzero(alive):
                enemies = np.flatnonzero(alive & (team != team[u]))
                if len(enemies) == 0:
                    vel[u] = 0.0
                    continue
                d = pos[enemies] - pos[u]
                dist = np.sqrt((d ** 2).sum(1))
                j = int(np.argmin(dist))
                if dist[j] < 0.8 * spec.damage_radius:
                    vel[u] = 0.0
                    continue
                ang = math.atan2(d[j, 1], d[j, 0]) + rng.normal(0, spec.heading_noise)
                sp = speed[u] * rng.uniform(0.7, 1.0)
                vel[u] = (sp * math.cos(ang), sp * math.sin(ang))
        for u in np.flatnonzero(alive):
            if vel[u].any():
                orient[u] = orientation_bin(vel[u, 0], vel[u, 1], spec.orientation_bins)
        # damage from the current configuration, then move
        damage = np.zeros(n)
        if spec.damage_rate > 0:
            for u in np.flatnonzero(alive):
                enemies = np.flatnonzero(alive & (team != team[u]))
                if len(enemies):
                    dist = np.sqrt(((pos[enemies] - pos[u]) ** 2).sum(1))
                    damage[u] = spec.damage_rate * attack[enemies][dist <= spec.damage_radius].sum()
        absorbed = np.minimum(shield, damage)
        shield = shield - absorbed
        health = np.maximum(health - (damage - absorbed), 0.0)
        alive = alive & (health > 0)
        pos = np.where(alive[:, None], np.clip(pos + vel, 0, spec.arena), pos)

    arr = np.array(rows, dtype=float).reshape(-1, 9)
    meta = {"spec": asdict(spec), "n_units": n, "teams": team, "types": utype}
    return Episode(episode_id, arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2:4],
                   np.ones(len(arr), bool), arr[:, 4:9], "entity", meta)


# ------------------------------------------------------------------ offsets


@dataclass(frozen=True)
class OffsetDistribution:
    kind: str                   # fixed | uniform | half_normal
    values: tuple = ()
    a: float = -10.0
    b: float = 0.0
    sigma: float = 5.0
    count: int = 5
    integer: bool = True
    mode_at: str = "b"

    def __post_init__(self):
        if self.kind == "fixed":
            if not self.values:
                raise ValueError("fixed offset distribution needs a non-empty list")
        elif self.kind in ("uniform", "half_normal"):
            if not self.a < self.b:
                raise ValueError("offset range needs a < b")
            if self.count < 1:
                raise ValueError("offset count must be >= 1")
        else:
            raise ValueError(f"unknown offset distribution {self.kind!r}")
        object.__setattr__(self, "values", tuple(self.values))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["values"] = list(d["values"])
        return d


def sample_offsets(dist: OffsetDistribution, seed=None) -> list[float]:
    """Draw offsets (sorted ascending). ``fixed`` returns its list verbatim."""
    if dist.kind == "fixed":
        return sorted(float(v) for v in dist.values)
    rng = _rng(seed)
    if dist.kind == "uniform":
        if dist.integer:
            draws = rng.integers(math.ceil(dist.a), math.floor(dist.b) + 1, dist.count).astype(float)
        else:
            draws = rng.uniform(dist.a, dist.b, dist.count)
        return sorted(draws.tolist())
    out = []
    while len(out) < dist.count:
        mag = abs(rng.normal(0.0, dist.sigma))
        if dist.integer:
            # floor, not round: rounding gives 0 a half-width bin and moves the mode off b
            mag = float(math.floor(mag))
        v = dist.b - mag if dist.mode_at == "b" else dist.a + mag
        if dist.a <= v <= dist.b:
            out.append(v)
    return sorted(out)


# ------------------------------------------------------------------ examples


@dataclass
class TrainingExample:
    cloud: PointCloud          # raw features
    queries: QuerySet
    targets: np.ndarray        # (|Q|, T) raw units; NaN marks absent properties
    t_ref: float
    episode_id: int
    task: str
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.queries) != len(self.targets):
            raise ValueError("every query needs exactly one target row")


def _latest_in_bin(ep: Episode, rows: np.ndarray, lo: float, hi: float) -> dict[int, int]:
    """For each entity, the row of its latest sample with lo < t <= hi."""
    sel = rows[(ep.times[rows] > lo) & (ep.times[rows] <= hi)]
    latest: dict[int, int] = {}
    for r in sel:
        e = int(ep.entity_ids[r])
        if e not in latest or ep.times[r] >= ep.times[latest[e]]:
            latest[e] = int(r)
    return latest


def make_example(episode: Episode, t_ref: float, history: OffsetDistribution,
                 query: OffsetDistribution, task: str, seed=None, *,
                 target_fraction: float = 0.1, dropout: float = 0.2,
                 targets: Sequence[int] | None = None,
                 exclude: Sequence[int] = ()) -> TrainingExample:
    """Assemble (P, Q, targets) around a reference time; times are made
    relative to ``t_ref``."""
    rng = _rng(seed)
    h_off = sorted(set(sample_offsets(history, rng)))
    r_off = sorted(set(sample_offsets(query, rng)))
    if task == "weather":
        return _weather_example(episode, t_ref, h_off, r_off, rng, target_fraction, dropout, targets, exclude)
    if task == "entity":
        return _entity_example(episode, t_ref, h_off, r_off)
    raise ValueError(f"unknown task {task!r}")


def _weather_example(ep, t_ref, h_off, r_off, rng, target_fraction, dropout, targets, exclude):
    if t_ref + min(h_off) - 1 < ep.times.min() - 1e-9 or t_ref + max(r_off) > ep.times.max() + 1e-9:
        raise ValueError(f"episode {ep.episode_id} too short for t_ref={t_ref} with these offsets")
    stations = np.unique(ep.entity_ids)
    eligible = np.setdiff1d(stations, np.asarray(exclude, dtype=np.int64))
    if targets is None:
        n_t = max(1, int(round(target_fraction * len(eligible))))
        targets = np.sort(rng.choice(eligible, n_t, replace=False))
    targets = np.asarray(targets, dtype=np.int64)
    all_rows = np.arange(len(ep))
    context = all_rows[~np.isin(ep.entity_ids, np.concatenate([targets, np.asarray(exclude, np.int64)]))
                       & ep.quality_ok]
    picked = []
    for h in h_off:
        picked += sorted(_latest_in_bin(ep, context, t_ref + h - 1, t_ref + h).values())
    picked = np.asarray(picked, dtype=np.intp)
    if dropout > 0 and len(picked):
        picked = picked[rng.uniform(size=len(picked)) >= dropout]
    if len(picked) == 0:
        raise ValueError(f"no usable input samples in episode {ep.episode_id} at t_ref={t_ref}")
    cloud = PointCloud(ep.locations[picked], ep.times[picked] - t_ref, ep.features[picked], ep.entity_ids[picked])

    target_rows = all_rows[np.isin(ep.entity_ids, targets) & ep.quality_ok]
    q_rows = []
    for r in r_off:
        latest = _latest_in_bin(ep, target_rows, t_ref + r - 1, t_ref + r)
        q_rows += [latest[s] for s in sorted(latest)]
    q_rows = np.asarray(q_rows, dtype=np.intp)
    queries = QuerySet(ep.locations[q_rows].reshape(-1, ep.locations.shape[1]),
                       ep.times[q_rows] - t_ref, ep.entity_ids[q_rows])
    return TrainingExample(cloud, queries, ep.features[q_rows].reshape(len(q_rows), -1), t_ref,
                           ep.episode_id, "weather")


def _entity_example(ep, t_ref, h_off, r_off):
    steps = ep.times
    last = steps.max()
    if t_ref + min(h_off) < 0 or t_ref + max(r_off) > last:
        raise ValueError(f"episode {ep.episode_id} too short for t_ref={t_ref} with these offsets")
    rows = np.flatnonzero(np.isin(steps, [t_ref + h for h in h_off]))
    if len(rows) == 0:
        raise ValueError(f"no living units in the history of episode {ep.episode_id} at t_ref={t_ref}")
    cloud = PointCloud(ep.locations[rows], steps[rows] - t_ref, ep.features[rows], ep.entity_ids[rows])

    units = np.unique(ep.entity_ids)
    first_loc = {int(u): ep.locations[np.flatnonzero(ep.entity_ids == u)[0]] for u in units}
    last_seen = {}
    for r in rows:
        last_seen[int(ep.entity_ids[r])] = ep.locations[r]
    lookup = {(int(e), float(t)): i for i, (e, t) in enumerate(zip(ep.entity_ids, steps))}
    q_loc, q_t, q_id, tgt = [], [], [], []
    for r in r_off:
        for u in units:
            u = int(u)
            q_loc.append(last_seen.get(u, first_loc[u]))
            q_t.append(r)
            q_id.append(u)
            i = lookup.get((u, float(t_ref + r)))
            if i is None:
                tgt.append([np.nan, np.nan, np.nan, np.nan, -1.0, 0.0])
            else:
                f = ep.features[i]
                tgt.append([ep.locations[i, 0], ep.locations[i, 1], f[2], f[3], f[4], 1.0])
    queries = QuerySet(np.asarray(q_loc), np.asarray(q_t, float), np.asarray(q_id))
    return TrainingExample(cloud, queries, np.asarray(tgt, float), float(t_ref), ep.episode_id, "entity")


# ------------------------------------------------------------------ CSV


CSV_FIXED = ["episode_id", "entity_id", "t", "loc_x", "loc_y", "quality_flag"]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(episodes: Episode | Sequence[Episode], path: str | Path,
              header_comments: Sequence[str] = ()) -> None:
    episodes = [episodes] if isinstance(episodes, Episode) else list(episodes)
    n_feat = episodes[0].features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(CSV_FIXED + [f"feat_{i}" for i in range(n_feat)])
        for ep in episodes:
            if ep.locations.shape[1] != 2:
                raise ValueError("CSV interchange stores 2-D locations")
            for j in range(len(ep)):
                eid = int(ep.entity_ids[j])
                w.writerow([ep.episode_id, "" if eid < 0 else eid, _fmt(ep.times[j]),
                            _fmt(ep.locations[j, 0]), _fmt(ep.locations[j, 1]),
                            "ok" if ep.quality_ok[j] else "bad"]
                           + [_fmt(v) for v in ep.features[j]])


def _parse_float(text: str, line: int, column: str, required: bool = True) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"line {line}: column {column!r} is not a number: {text!r}") from None
    if required and math.isnan(v):
        raise ValueError(f"line {line}: NaN in required column {column!r}")
    return v


def load_csv(path: str | Path, kind: str = "field") -> list[Episode]:
    """Read episodes written by :func:`write_csv`; rows grouped by episode_id."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i + 1, ln) for i, ln in enumerate(fh.read().splitlines())]
    body = [(i, ln) for i, ln in lines if ln.strip() and not ln.startswith("#")]
    if not body:
        raise ValueError(f"{path}: empty file")
    header = next(csv.reader([body[0][1]]))
    if header[:len(CSV_FIXED)] != CSV_FIXED:
        raise ValueError(f"{path}: line {body[0][0]}: header must start with {CSV_FIXED}")
    feat_cols = header[len(CSV_FIXED):]
    if feat_cols != [f"feat_{i}" for i in range(len(feat_cols))]:
        raise ValueError(f"{path}: feature columns must be feat_0..feat_F-1")
    grouped: dict[int, list] = {}
    for line_no, text in body[1:]:
        row = next(csv.reader([text]))
        if len(row) != len(header):
            raise ValueError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            ep_id = int(row[0])
            eid = -1 if row[1] == "" else int(row[1])
        except ValueError:
            raise ValueError(f"line {line_no}: episode_id/entity_id must be integers") from None
        if row[5] not in ("ok", "bad"):
            raise ValueError(f"line {line_no}: quality_flag must be 'ok' or 'bad', got {row[5]!r}")
        vals = [_parse_float(row[c], line_no, header[c]) for c in (2, 3, 4)]
        feats = [_parse_float(v, line_no, header[6 + i]) for i, v in enumerate(row[6:])]
        grouped.setdefault(ep_id, []).append((eid, *vals, row[5] == "ok", feats))
    if not grouped:
        raise ValueError(f"{path}: no data rows")
    out = []
    for ep_id, rows in grouped.items():
        out.append(Episode(
            ep_id,
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows]),
            np.array([[r[2], r[3]] for r in rows]),
            np.array([r[4] for r in rows], dtype=bool),
            np.array([r[5] for r in rows], dtype=float).reshape(len(rows), len(feat_cols)),
            kind,
        ))
    return out


# ------------------------------------------------------------------ datasets


@dataclass
class DatasetSpec:
    task: str
    n_episodes: int
    examples_per_episode: int
    seed: int = 0
    history: OffsetDistribution | None = None
    query: OffsetDistribution | None = None
    field_spec: FieldProcessSpec = field(default_factory=FieldProcessSpec)
    entity_spec: EntityProcessSpec = field(default_factory=EntityProcessSpec)
    target_fraction: float = 0.1

    def offsets(self) -> tuple[OffsetDistribution, OffsetDistribution]:
        return self.history or default_history(self.task), self.query or default_query(self.task)


def default_history(task: str) -> OffsetDistribution:
    if task == "weather":
        return OffsetDistribution("fixed", (-5, -4, -3, -2, -1, 0))
    return OffsetDistribution("uniform", a=-10, b=-1, count=5)


def default_query(task: str) -> OffsetDistribution:
    if task == "weather":
        return OffsetDistribution("fixed", (0,))
    return OffsetDistribution("fixed", (1, 2, 4, 7))


def generate_episodes(spec: DatasetSpec, first_id: int = 0) -> list[Episode]:
    """Episode ``i`` uses seed ``(spec.seed, first_id + i)``."""
    eps = []
    for i in range(spec.n_episodes):
        eid = first_id + i
        rng = np.random.default_rng([spec.seed, eid])
        if spec.task == "weather":
            eps.append(gen_field_episode(spec.field_spec, rng, eid))
        else:
            eps.append(gen_entity_episode(spec.entity_spec, rng, eid))
    return eps


def reference_range(task: str, history: OffsetDistribution, query: OffsetDistribution,
                    episode: Episode) -> tuple[float, float]:
    lo_h = min(history.values) if history.kind == "fixed" else history.a
    hi_q = max(query.values) if query.kind == "fixed" else query.b
    if task == "weather":
        return float(np.ceil(episode.times.min() - lo_h + 1)), float(np.floor(episode.times.max() - hi_q))
    return float(-lo_h), float(episode.times.max() - hi_q)


def station_radius(episodes: Sequence[Episode], k: int = 8) -> float:
    """Smallest radius at which the average station has at least ``k`` other
    stations within it, averaged over episodes."""
    radii = []
    for ep in episodes:
        _, first = np.unique(ep.entity_ids, return_index=True)
        locs = ep.locations[first]
        n = len(locs)
        if n <= k:
            raise ValueError(f"episode {ep.episode_id} has {n} stations, need more than {k}")
        # mean neighbor count at r = (ordered pairs within r) / n
        pairs = np.sort(np.repeat(pdist(locs), 2))
        radii.append(float(pairs[int(np.ceil(k * n)) - 1]))
    return float(np.mean(radii))


def hold_out_stations(episodes: Sequence[Episode], fraction: float, seed: int) -> dict[int, list[int]]:
    """Pick ``fraction`` of each episode's stations (at least one) as test stations."""
    out = {}
    for ep in episodes:
        rng = np.random.default_rng([seed, ep.episode_id, 3571])
        stations = np.unique(ep.entity_ids)
        n = max(1, int(round(fraction * len(stations))))
        out[ep.episode_id] = sorted(int(s) for s in rng.choice(stations, n, replace=False))
    return out


def examples_from_episodes(episodes: Sequence[Episode], spec: DatasetSpec,
                           history: OffsetDistribution | None = None,
                           query: OffsetDistribution | None = None,
                           seed_salt: int = 0,
                           held_out: dict[int, Sequence[int]] | None = None) -> list[TrainingExample]:
    """``examples_per_episode`` examples per episode at random reference times.

    ``held_out`` maps episode id to weather stations that are always the
    targets and never appear in any input cloud.
    """
    hist_default, query_default = spec.offsets()
    history = history or hist_default
    query = query or query_default
    out = []
    for ep in episodes:
        rng = np.random.default_rng([spec.seed, ep.episode_id, 7919 + seed_salt])
        lo, hi = reference_range(spec.task, history, query, ep)
        made = 0
        attempts = 0
        while made < spec.examples_per_episode:
            attempts += 1
            if attempts > 20 * spec.examples_per_episode:
                raise ValueError(f"could not assemble examples from episode {ep.episode_id}")
            t_ref = float(rng.integers(int(lo), int(hi) + 1)) if spec.task == "entity" else float(rng.uniform(lo, hi))
            held = None if held_out is None else held_out[ep.episode_id]
            try:
                ex = make_example(ep, t_ref, history, query, spec.task, rng,
                                  target_fraction=spec.target_fraction,
                                  dropout=spec.field_spec.dropout if spec.task == "weather" else 0.0,
                                  targets=held, exclude=() if held is None else held)
            except ValueError:
                continue
            if len(ex.queries) == 0:
                continue
            out.append(ex)
            made += 1
    return out
