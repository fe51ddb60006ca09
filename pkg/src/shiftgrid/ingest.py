"""Trajectory/POI ingestion and per-individual sample derivation.

Turns raw trajectory and POI tables into (pre-grid, post-grid, reliance
vector, spatial context) samples: a home anchor is estimated from night-time
pre-event records, a G x G window is cropped around it, movements are
rasterized to binary grids, and reliance/context features are accumulated
from POI category proportions.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import CropTooLarge, MalformedRow, NoPreEventData, OutOfRange

log = logging.getLogger(__name__)

SLOTS_PER_DAY = 48
DEFAULT_NIGHT_SLOTS = tuple(range(0, 16)) + tuple(range(40, 48))


class Phase(Enum):
    PRE = "pre"
    POST = "post"


@dataclass(frozen=True)
class TrajectoryRecord:
    user_id: int
    day: int
    timeslot: int
    x: int
    y: int


@dataclass(frozen=True)
class POIEntry:
    x: int
    y: int
    category: int
    count: int


@dataclass(frozen=True)
class HomeAnchor:
    user_id: int
    center_x: int
    center_y: int


@dataclass
class MovementGrid:
    user_id: int
    phase: Phase
    bitmap: np.ndarray  # G x G uint8, entries 0/1
    crop_offset: tuple[int, int]


@dataclass
class SIRVector:
    user_id: int
    values: np.ndarray  # length K


@dataclass
class SpatialContext:
    user_id: int
    values: np.ndarray  # K x G x G
    crop_offset: tuple[int, int]


@dataclass
class IndividualSample:
    user_id: int
    v_pre: MovementGrid
    v_post: MovementGrid
    sir: SIRVector
    sc: SpatialContext


@dataclass
class IngestConfig:
    world_m: int = 200
    world_n: int = 200
    k: int = 85
    g: int = 100
    pre_days: int = 60
    post_days: int = 15
    night_slots: tuple[int, ...] = DEFAULT_NIGHT_SLOTS

    @classmethod
    def from_json(cls, path) -> "IngestConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        kwargs = {k: raw[k] for k in
                  ("world_m", "world_n", "k", "g", "pre_days", "post_days") if k in raw}
        if "night_slots" in raw:
            kwargs["night_slots"] = tuple(int(s) for s in raw["night_slots"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "world_m": self.world_m, "world_n": self.world_n, "k": self.k,
            "g": self.g, "pre_days": self.pre_days, "post_days": self.post_days,
            "night_slots": list(self.night_slots),
        }


# ---------------------------------------------------------------------------
# loading


def load_trajectories(path, world_dims, d_total) -> list[TrajectoryRecord]:
    """Parse a trajectory CSV with header uid,d,t,x,y.

    Rows with non-integer fields raise MalformedRow; rows outside the declared
    world/day/slot bounds raise OutOfRange.  Records come back in file order.
    """
    m, n = world_dims
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["uid", "d", "t", "x", "y"]:
            raise MalformedRow(1, f"expected header uid,d,t,x,y, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                uid, day, slot, x, y = (int(v) for v in row)
            except (ValueError, TypeError):
                raise MalformedRow(line_no, ",".join(row)) from None
            if uid < 0:
                raise OutOfRange(line_no, f"uid {uid}")
            if not 0 <= day < d_total:
                raise OutOfRange(line_no, f"day {day}")
            if not 0 <= slot < SLOTS_PER_DAY:
                raise OutOfRange(line_no, f"timeslot {slot}")
            if not (0 <= x < m and 0 <= y < n):
                raise OutOfRange(line_no, f"cell ({x},{y})")
            records.append(TrajectoryRecord(uid, day, slot, x, y))
    return records


def load_pois(path, world_dims, k) -> list[POIEntry]:
    """Parse a POI CSV with header x,y,category,count; duplicates are summed."""
    m, n = world_dims
    merged: dict[tuple[int, int, int], int] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["x", "y", "category", "count"]:
            raise MalformedRow(1, f"expected header x,y,category,count, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y, cat, count = (int(v) for v in row)
            except (ValueError, TypeError):
                raise MalformedRow(line_no, ",".join(row)) from None
            if not (0 <= x < m and 0 <= y < n):
                raise OutOfRange(line_no, f"cell ({x},{y})")
            if not 0 <= cat < k:
                raise OutOfRange(line_no, f"category {cat}")
            if count <= 0:
                raise OutOfRange(line_no, f"count {count}")
            merged[(x, y, cat)] = merged.get((x, y, cat), 0) + count
    return [POIEntry(x, y, c, cnt) for (x, y, c), cnt in sorted(merged.items())]


# ---------------------------------------------------------------------------
# per-individual derivation


def compute_home_anchor(records, pre_days, night_slots=DEFAULT_NIGHT_SLOTS) -> HomeAnchor:
    """Modal night-time cell of the pre-event window; daytime fallback.

    Ties break to the lexicographically smallest (x, y).
    """
    pre = [r for r in records if r.day < pre_days]
    if not pre:
        raise NoPreEventData(records[0].user_id if records else -1)
    night_set = set(night_slots)
    pool = [r for r in pre if r.timeslot in night_set] or pre
    counts: dict[tuple[int, int], int] = {}
    for r in pool:
        counts[(r.x, r.y)] = counts.get((r.x, r.y), 0) + 1
    (cx, cy), _ = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return HomeAnchor(pre[0].user_id, cx, cy)


def crop_window(anchor: HomeAnchor, g: int, world_dims) -> tuple[int, int]:
    """Window origin placing the anchor at index g//2, translated inward."""
    m, n = world_dims
    if g > m or g > n:
        raise CropTooLarge(f"crop {g} exceeds world {m}x{n}")
    x0 = min(max(anchor.center_x - g // 2, 0), m - g)
    y0 = min(max(anchor.center_y - g // 2, 0), n - g)
    return x0, y0


def rasterize_movement(records, day_range, crop, user_id=None,
                       phase=Phase.PRE) -> MovementGrid:
    """Binary G x G visitation bitmap over records in [d_lo, d_hi).

    Records falling outside the crop are ignored (count logged).
    """
    d_lo, d_hi = day_range
    x0, y0, g = crop
    bitmap = np.zeros((g, g), dtype=np.uint8)
    ignored = 0
    uid = user_id
    for r in records:
        if uid is None:
            uid = r.user_id
        if not d_lo <= r.day < d_hi:
            continue
        i, j = r.x - x0, r.y - y0
        if 0 <= i < g and 0 <= j < g:
            bitmap[i, j] = 1
        else:
            ignored += 1
    if ignored:
        log.debug("user %s: %d records outside crop ignored", uid, ignored)
    return MovementGrid(uid if uid is not None else -1, phase, bitmap, (x0, y0))


def _cell_proportions(pois, k):
    """Map (x, y) -> L1-normalized K-vector of category proportions."""
    totals: dict[tuple[int, int], np.ndarray] = {}
    for p in pois:
        vec = totals.get((p.x, p.y))
        if vec is None:
            vec = np.zeros(k, dtype=np.float64)
            totals[(p.x, p.y)] = vec
        vec[p.category] += p.count
    return {cell: vec / vec.sum() for cell, vec in totals.items()}


def compute_spatial_context(pois, crop, k, user_id=-1) -> SpatialContext:
    """Per-cell POI category proportions inside the crop; zero where POI-free."""
    x0, y0, g = crop
    values = np.zeros((k, g, g), dtype=np.float64)
    for (x, y), vec in _cell_proportions(pois, k).items():
        i, j = x - x0, y - y0
        if 0 <= i < g and 0 <= j < g:
            values[:, i, j] = vec
    return SpatialContext(user_id, values, (x0, y0))


def compute_sir(records, pois, k, user_id=None) -> SIRVector:
    """Reliance profile: accumulate visited-cell category proportions, L1-normalize.

    World-wide, not crop-limited.  All-zero when no visit lands on a POI cell.
    """
    props = _cell_proportions(pois, k)
    acc = np.zeros(k, dtype=np.float64)
    uid = user_id
    for r in records:
        if uid is None:
            uid = r.user_id
        vec = props.get((r.x, r.y))
        if vec is not None:
            acc += vec
    total = acc.sum()
    if total > 0:
        acc /= total
    return SIRVector(uid if uid is not None else -1, acc)


def build_samples(trajectories, pois, config: IngestConfig) -> list[IndividualSample]:
    """One sample per individual with pre-event data, ordered by user_id.

    Individuals without pre-event records are skipped and logged.
    """
    by_user: dict[int, list[TrajectoryRecord]] = {}
    for r in trajectories:
        by_user.setdefault(r.user_id, []).append(r)

    world = (config.world_m, config.world_n)
    samples = []
    skipped = 0
    for uid in sorted(by_user):
        recs = by_user[uid]
        try:
            anchor = compute_home_anchor(recs, config.pre_days, config.night_slots)
        except NoPreEventData:
            skipped += 1
            log.info("user %d skipped: no pre-event records", uid)
            continue
        x0, y0 = crop_window(anchor, config.g, world)
        crop = (x0, y0, config.g)
        pre_recs = [r for r in recs if r.day < config.pre_days]
        v_pre = rasterize_movement(recs, (0, config.pre_days), crop, uid, Phase.PRE)
        v_post = rasterize_movement(
            recs, (config.pre_days, config.pre_days + config.post_days), crop,
            uid, Phase.POST)
        sir = compute_sir(pre_recs, pois, config.k, uid)
        sc = compute_spatial_context(pois, crop, config.k, uid)
        samples.append(IndividualSample(uid, v_pre, v_post, sir, sc))
    if skipped:
        log.info("build_samples: skipped %d individuals without pre-event data", skipped)
    return samples


# ---------------------------------------------------------------------------
# sample archive


def save_samples(directory, samples, g: int, k: int) -> None:
    """Write an archive: per-user packed bitmaps + float32 features + manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        stem = directory / f"u{s.user_id:08d}"
        pre_bits = np.packbits(s.v_pre.bitmap.reshape(-1))
        post_bits = np.packbits(s.v_post.bitmap.reshape(-1))
        sir = s.sir.values.astype("<f4")
        sc = s.sc.values.astype("<f4")
        with open(stem.with_suffix(".bin"), "wb") as f:
            f.write(pre_bits.tobytes())
            f.write(post_bits.tobytes())
            f.write(sir.tobytes())
            f.write(sc.tobytes())
        manifest = {
            "user_id": s.user_id,
            "crop_offset": list(s.v_pre.crop_offset),
            "g": g,
            "k": k,
        }
        with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, sort_keys=True)
            f.write("\n")


def load_samples(directory) -> list[IndividualSample]:
    """Read a sample archive written by save_samples, ordered by user_id."""
    directory = Path(directory)
    samples = []
    for mpath in sorted(directory.glob("u*.json")):
        with open(mpath, encoding="utf-8") as f:
            manifest = json.load(f)
        uid = manifest["user_id"]
        g, k = manifest["g"], manifest["k"]
        offset = tuple(manifest["crop_offset"])
        nbits = (g * g + 7) // 8
        raw = mpath.with_suffix(".bin").read_bytes()
        pos = 0
        pre = np.unpackbits(np.frombuffer(raw, np.uint8, nbits, pos))[: g * g]
        pos += nbits
        post = np.unpackbits(np.frombuffer(raw, np.uint8, nbits, pos))[: g * g]
        pos += nbits
        sir = np.frombuffer(raw, "<f4", k, pos).astype(np.float64)
        pos += 4 * k
        sc = np.frombuffer(raw, "<f4", k * g * g, pos).astype(np.float64)
        samples.append(IndividualSample(
            uid,
            MovementGrid(uid, Phase.PRE, pre.reshape(g, g).astype(np.uint8), offset),
            MovementGrid(uid, Phase.POST, post.reshape(g, g).astype(np.uint8), offset),
            SIRVector(uid, sir),
            SpatialContext(uid, sc.reshape(k, g, g), offset),
        ))
    return samples
