"""Rule-governed synthetic populations with known disruption ground truth.

POIs cluster around category-dominant centers; each individual gets a home
cell, a latent Dirichlet reliance profile, night-time visits near home, and
daytime trips to nearby POI cells of reliance-sampled categories.  The
disruption redirects a fixed fraction of trips to the disrupted category
toward the strongest remaining category, but only for individuals whose
latent reliance on the disrupted category crosses a threshold.  Latent
variables go to a quarantined truth file used only by tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .ingest import SLOTS_PER_DAY, DEFAULT_NIGHT_SLOTS, POIEntry, TrajectoryRecord

DAY_SLOTS = tuple(s for s in range(SLOTS_PER_DAY) if s not in DEFAULT_NIGHT_SLOTS)
HOME_VISIT_SHARE = 0.4
POI_CANDIDATES = 3  # distance-decay choice over this many nearest cells
REDIRECT_CANDIDATES = 12  # redirected trips spread over this many fresh cells


@dataclass
class SynthConfig:
    world_m: int = 64
    world_n: int = 64
    k: int = 4
    n_poi_clusters: int = 8
    poi_per_cluster: int = 12
    n_individuals: int = 2400
    pre_days: int = 20
    post_days: int = 5
    visits_per_day: int = 10
    home_spread: float = 1.5
    reliance_concentration: float = 0.5
    disrupted_category: int = 0
    reliance_threshold: float = 0.5
    shift_fraction: float = 0.6
    noise_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.shift_fraction <= 1 or not 0 <= self.noise_rate <= 1:
            raise InvalidConfig("shift_fraction and noise_rate must be in [0,1]")
        if not 0 <= self.disrupted_category < self.k:
            raise InvalidConfig("disrupted_category must be < k")

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        return cls(**raw)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def generate_world(config: SynthConfig, rng=None) -> list[POIEntry]:
    """Clustered POI table; entries merged per (cell, category)."""
    rng = rng or np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    m, n = config.world_m, config.world_n
    merged: dict[tuple[int, int, int], int] = {}
    for _ in range(config.n_poi_clusters):
        cx = int(rng.integers(0, m))
        cy = int(rng.integers(0, n))
        dominant = int(rng.integers(0, config.k))
        for _ in range(config.poi_per_cluster):
            x = int(np.clip(round(cx + rng.normal(0, 2.0)), 0, m - 1))
            y = int(np.clip(round(cy + rng.normal(0, 2.0)), 0, n - 1))
            if rng.random() < 0.8 or config.k == 1:
                cat = dominant
            else:
                others = [c for c in range(config.k) if c != dominant]
                cat = int(rng.choice(others))
            merged[(x, y, cat)] = merged.get((x, y, cat), 0) + 1
    return [POIEntry(x, y, c, cnt) for (x, y, c), cnt in sorted(merged.items())]


def _category_cells(world, k):
    cells = [[] for _ in range(k)]
    seen = [set() for _ in range(k)]
    for p in world:
        if (p.x, p.y) not in seen[p.category]:
            seen[p.category].add((p.x, p.y))
            cells[p.category].append((p.x, p.y))
    return [np.array(c, dtype=np.int64).reshape(-1, 2) for c in cells]


def _nearest_cells(cells: np.ndarray, home, limit=POI_CANDIDATES):
    """Up to `limit` nearest cells with distance-decay selection weights."""
    if cells.size == 0:
        return None
    d = np.hypot(cells[:, 0] - home[0], cells[:, 1] - home[1])
    order = np.argsort(d, kind="stable")[:limit]
    picked = cells[order]
    weights = 1.0 / (1.0 + d[order])
    return picked, weights / weights.sum()


class _Individual:
    """Latent state plus the generative visit process."""

    def __init__(self, uid, config: SynthConfig, world, rng):
        self.uid = uid
        self.config = config
        self.home = (int(rng.integers(0, config.world_m)),
                     int(rng.integers(0, config.world_n)))
        self.reliance = rng.dirichlet([config.reliance_concentration] * config.k)
        self.cat_cells = _category_cells(world, config.k)
        self.targets = [_nearest_cells(self.cat_cells[c], self.home)
                        for c in range(config.k)]
        all_cells = np.concatenate([c for c in self.cat_cells if c.size], axis=0) \
            if any(c.size for c in self.cat_cells) else np.empty((0, 2), np.int64)
        self.fallback = _nearest_cells(all_cells, self.home)
        self.shifted = bool(self.reliance[config.disrupted_category]
                            > config.reliance_threshold)
        rem = self.reliance.copy()
        rem[config.disrupted_category] = -1.0
        self.substitute = int(np.argmax(rem))
        # redirect targets: the substitute-category cells nearest home,
        # excluding the individual's habitual substitute targets, so the
        # disruption opens a genuinely new cluster of destinations
        self.redirect_cells = None
        sub_cells = self.cat_cells[self.substitute]
        usual = ({tuple(c) for c in self.targets[self.substitute][0]}
                 if self.targets[self.substitute] is not None else set())
        fresh = np.array([c for c in sub_cells if tuple(c) not in usual],
                         dtype=np.int64).reshape(-1, 2)
        if fresh.size == 0:
            fresh = sub_cells
        if fresh.size:
            d = np.hypot(fresh[:, 0] - self.home[0], fresh[:, 1] - self.home[1])
            order = np.argsort(d, kind="stable")[:REDIRECT_CANDIDATES]
            self.redirect_cells = fresh[order]

    def _home_cell(self, rng):
        cfg = self.config
        x = int(np.clip(round(self.home[0] + rng.normal(0, cfg.home_spread)),
                        0, cfg.world_m - 1))
        y = int(np.clip(round(self.home[1] + rng.normal(0, cfg.home_spread)),
                        0, cfg.world_n - 1))
        return x, y

    def _poi_cell(self, cat, rng):
        target = self.targets[cat] or self.fallback
        if target is None:
            return self._home_cell(rng)
        cells, weights = target
        i = rng.choice(len(cells), p=weights)
        return int(cells[i][0]), int(cells[i][1])

    def day_records(self, day, rng, disrupted=False) -> list[TrajectoryRecord]:
        cfg = self.config
        n_home = round(HOME_VISIT_SHARE * cfg.visits_per_day)
        records = []
        for _ in range(n_home):
            x, y = self._home_cell(rng)
            slot = int(rng.choice(DEFAULT_NIGHT_SLOTS))
            records.append(TrajectoryRecord(self.uid, day, slot, x, y))
        for _ in range(cfg.visits_per_day - n_home):
            cat = int(rng.choice(cfg.k, p=self.reliance))
            if disrupted and self.shifted and cat == cfg.disrupted_category \
                    and self.redirect_cells is not None \
                    and rng.random() < cfg.shift_fraction:
                # redirected trips spread uniformly over the new cluster of
                # substitute-category cells
                i = int(rng.integers(0, len(self.redirect_cells)))
                x, y = int(self.redirect_cells[i][0]), int(self.redirect_cells[i][1])
            else:
                x, y = self._poi_cell(cat, rng)
            slot = int(rng.choice(DAY_SLOTS))
            records.append(TrajectoryRecord(self.uid, day, slot, x, y))
        return records


def generate_individual(config: SynthConfig, world, rng):
    """(home cell, latent reliance, pre-event records) for one individual."""
    ind = _Individual(-1, config, world, rng)
    records = []
    for day in range(config.pre_days):
        records.extend(ind.day_records(day, rng))
    return ind.home, ind.reliance, records


def apply_disruption_rule(config: SynthConfig, world, individual: _Individual,
                          rng) -> list[TrajectoryRecord]:
    """Post-event records: redirected trips for shifted individuals, plus noise."""
    records = []
    for day in range(config.pre_days, config.pre_days + config.post_days):
        records.extend(individual.day_records(day, rng, disrupted=True))
    if config.noise_rate > 0:
        noisy = []
        for r in records:
            if rng.random() < config.noise_rate:
                noisy.append(TrajectoryRecord(
                    r.user_id, r.day, r.timeslot,
                    int(rng.integers(0, config.world_m)),
                    int(rng.integers(0, config.world_n))))
            else:
                noisy.append(r)
        records = noisy
    return records


def split_user_ids(n: int, rng) -> dict[str, list[int]]:
    """Disjoint 20:1:1 split: floor(n/22) each for val/test, remainder to train."""
    order = rng.permutation(n)
    unit = n // 22
    val = sorted(int(u) for u in order[:unit])
    test = sorted(int(u) for u in order[unit : 2 * unit])
    train = sorted(int(u) for u in order[2 * unit :])
    return {"train": train, "val": val, "test": test}


def generate_dataset(config: SynthConfig, out_dir) -> dict:
    """Write trajectory/POI CSVs, split manifest, and the latent-truth file.

    Per-individual RNG streams are derived from (seed, uid), so output is a
    pure function of the config.  Returns summary counts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = generate_world(config)

    traj_lines = ["uid,d,t,x,y"]
    truth_lines = ["uid," + ",".join(f"reliance_{c}" for c in range(config.k)) + ",shifted"]
    n_records = 0
    for uid in range(config.n_individuals):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, uid]))
        ind = _Individual(uid, config, world, rng)
        records = []
        for day in range(config.pre_days):
            records.extend(ind.day_records(day, rng))
        records.extend(apply_disruption_rule(config, world, ind, rng))
        for r in records:
            traj_lines.append(f"{r.user_id},{r.day},{r.timeslot},{r.x},{r.y}")
        n_records += len(records)
        rel = ",".join(f"{v:.9f}" for v in ind.reliance)
        truth_lines.append(f"{uid},{rel},{int(ind.shifted)}")

    poi_lines = ["x,y,category,count"]
    poi_lines += [f"{p.x},{p.y},{p.category},{p.count}" for p in world]

    split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    splits = split_user_ids(config.n_individuals, split_rng)

    (out_dir / "trajectories.csv").write_text("\n".join(traj_lines) + "\n", encoding="utf-8")
    (out_dir / "pois.csv").write_text("\n".join(poi_lines) + "\n", encoding="utf-8")
    with open(out_dir / "splits.json", "w", encoding="utf-8") as f:
        json.dump(splits, f, sort_keys=True)
        f.write("\n")
    (out_dir / "truth.csv").write_text("\n".join(truth_lines) + "\n", encoding="utf-8")
    with open(out_dir / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, sort_keys=True)
        f.write("\n")
    return {"n_individuals": config.n_individuals, "n_records": n_records,
            "n_poi_entries": len(world), "splits": {s: len(u) for s, u in splits.items()}}
