"""Generator contracts: determinism, bounds, disruption rule, learnability."""

import json

import numpy as np
import pytest

from shiftgrid import ingest, synth
from shiftgrid.errors import InvalidConfig
from shiftgrid.synth import (SynthConfig, _Individual, apply_disruption_rule,
                             generate_dataset, generate_individual,
                             generate_world, split_user_ids)

SMALL = dict(n_individuals=44, seed=0)


def _individual(uid, config, world, reliance=None):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, uid]))
    ind = _Individual(uid, config, world, rng)
    if reliance is not None:
        ind.reliance = np.asarray(reliance, np.float64)
        ind.shifted = bool(ind.reliance[config.disrupted_category]
                           > config.reliance_threshold)
    return ind, rng


# ---------------------------------------------------------------------------
# config and world


def test_config_validation():
    with pytest.raises(InvalidConfig):
        SynthConfig(shift_fraction=1.5)
    with pytest.raises(InvalidConfig):
        SynthConfig(noise_rate=-0.1)
    with pytest.raises(InvalidConfig):
        SynthConfig(disrupted_category=4, k=4)


def test_world_poi_budget_and_bounds():
    cfg = SynthConfig()
    world = generate_world(cfg)
    # 8 clusters x 12 placements, merged per (cell, category)
    assert sum(p.count for p in world) == 96
    assert len(world) <= 96
    for p in world:
        assert 0 <= p.x < cfg.world_m and 0 <= p.y < cfg.world_n
        assert 0 <= p.category < cfg.k and p.count > 0


def test_world_deterministic():
    assert generate_world(SynthConfig()) == generate_world(SynthConfig())


# ---------------------------------------------------------------------------
# individual generation


def test_individual_record_count_and_bounds():
    cfg = SynthConfig()
    world = generate_world(cfg)
    rng = np.random.default_rng(0)
    home, reliance, records = generate_individual(cfg, world, rng)
    assert len(records) == cfg.pre_days * cfg.visits_per_day == 200
    assert abs(reliance.sum() - 1.0) < 1e-9
    for r in records:
        assert 0 <= r.x < cfg.world_m and 0 <= r.y < cfg.world_n
        assert 0 <= r.timeslot < 48 and 0 <= r.day < cfg.pre_days


def test_degenerate_reliance_targets_one_category():
    cfg = SynthConfig(noise_rate=0.0)
    world = generate_world(cfg)
    ind, rng = _individual(0, cfg, world, reliance=[1.0, 0.0, 0.0, 0.0])
    cat0 = {(p.x, p.y) for p in world if p.category == 0}
    night = set(ingest.DEFAULT_NIGHT_SLOTS)
    for day in range(5):
        for r in ind.day_records(day, rng):
            if r.timeslot not in night:
                assert (r.x, r.y) in cat0


def test_night_records_cluster_near_home():
    cfg = SynthConfig()
    world = generate_world(cfg)
    ind, rng = _individual(3, cfg, world)
    night = set(ingest.DEFAULT_NIGHT_SLOTS)
    for day in range(10):
        for r in ind.day_records(day, rng):
            if r.timeslot in night:
                assert abs(r.x - ind.home[0]) <= 10 and abs(r.y - ind.home[1]) <= 10


def test_empirical_sir_tracks_latent_reliance():
    """cosine(compute_sir, latent reliance) > 0.8 averaged over 100 individuals."""
    cfg = SynthConfig()
    world = generate_world(cfg)
    pois = [ingest.POIEntry(p.x, p.y, p.category, p.count) for p in world]
    sims = []
    for uid in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, uid]))
        ind = _Individual(uid, cfg, world, rng)
        records = []
        for day in range(cfg.pre_days):
            records.extend(ind.day_records(day, rng))
        sir = ingest.compute_sir(records, pois, cfg.k).values
        if sir.any():
            denom = np.linalg.norm(sir) * np.linalg.norm(ind.reliance)
            sims.append(float(sir @ ind.reliance) / denom)
    assert np.mean(sims) > 0.8


# ---------------------------------------------------------------------------
# disruption rule


def test_shifted_trips_land_on_substitute_category():
    """>= shift_fraction of former disrupted-category trips move to the
    substitute category for a strongly reliant individual (up to noise)."""
    cfg = SynthConfig(noise_rate=0.0)
    world = generate_world(cfg)
    ind, rng = _individual(0, cfg, world, reliance=[0.9, 0.1, 0.0, 0.0])
    assert ind.shifted and ind.substitute == 1
    cat0 = {(p.x, p.y) for p in world if p.category == 0}
    cat1 = {(p.x, p.y) for p in world if p.category == 1}
    night = set(ingest.DEFAULT_NIGHT_SLOTS)
    post = apply_disruption_rule(cfg, world, ind, rng)
    day_trips = [r for r in post if r.timeslot not in night]
    on_cat1 = sum(1 for r in day_trips if (r.x, r.y) in cat1)
    on_cat0 = sum(1 for r in day_trips if (r.x, r.y) in cat0 and (r.x, r.y) not in cat1)
    # latent cat-0 share 0.9, shift fraction 0.6: cat-1 trips should now
    # clearly outnumber remaining cat-0 trips
    assert on_cat1 / len(day_trips) >= cfg.shift_fraction * 0.9 * 0.7
    assert on_cat1 > on_cat0


def test_unshifted_replays_pre_event_process():
    cfg = SynthConfig(noise_rate=0.0)
    world = generate_world(cfg)
    ind, rng = _individual(1, cfg, world, reliance=[0.1, 0.3, 0.3, 0.3])
    assert not ind.shifted
    pre = {(r.x, r.y) for day in range(cfg.pre_days)
           for r in ind.day_records(day, rng)}
    post_recs = apply_disruption_rule(cfg, world, ind, rng)
    post = {(r.x, r.y) for r in post_recs}
    # same generator, new draws: post cells overwhelmingly revisit pre cells
    assert len(post & pre) / len(post) > 0.8


def test_redirect_cells_are_substitute_category_and_novel():
    cfg = SynthConfig()
    world = generate_world(cfg)
    cat_cells = [{(p.x, p.y) for p in world if p.category == c}
                 for c in range(cfg.k)]
    for uid in range(40):
        ind, _ = _individual(uid, cfg, world)
        if ind.redirect_cells is None:
            continue
        usual = ({tuple(c) for c in ind.targets[ind.substitute][0]}
                 if ind.targets[ind.substitute] is not None else set())
        for cell in map(tuple, ind.redirect_cells):
            assert cell in cat_cells[ind.substitute]
            if cat_cells[ind.substitute] - usual:
                assert cell not in usual


def test_separation_property():
    """Shifted individuals change their trip destinations more: mean
    Jaccard(pre, post) over daytime-trip visited sets is lower by >= 0.1 than
    for non-shifted individuals.  Night records are a home-anchor device with
    identical pre/post distributions, so they are excluded: including them
    would measure home-cloud sampling noise, not behavioral change."""
    cfg = SynthConfig()
    world = generate_world(cfg)
    night = set(ingest.DEFAULT_NIGHT_SLOTS)
    jac = {True: [], False: []}
    for uid in range(200):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, uid]))
        ind = _Individual(uid, cfg, world, rng)
        pre = set()
        for day in range(cfg.pre_days):
            pre |= {(r.x, r.y) for r in ind.day_records(day, rng)
                    if r.timeslot not in night}
        post = {(r.x, r.y) for r in apply_disruption_rule(cfg, world, ind, rng)
                if r.timeslot not in night}
        jac[ind.shifted].append(len(pre & post) / len(pre | post))
    assert np.mean(jac[False]) - np.mean(jac[True]) >= 0.1


# ---------------------------------------------------------------------------
# dataset files


def test_split_ratios():
    rng = np.random.default_rng(0)
    splits = split_user_ids(2400, rng)
    assert len(splits["val"]) == len(splits["test"]) == 109
    assert len(splits["train"]) == 2182
    all_ids = splits["train"] + splits["val"] + splits["test"]
    assert sorted(all_ids) == list(range(2400))


def test_generate_dataset_files(tmp_path):
    cfg = SynthConfig(**SMALL)
    summary = generate_dataset(cfg, tmp_path)
    assert summary["n_individuals"] == 44
    assert summary["splits"] == {"train": 40, "val": 2, "test": 2}

    truth = (tmp_path / "truth.csv").read_text().splitlines()
    assert len(truth) == 45  # header + one row per individual
    assert truth[0] == "uid,reliance_0,reliance_1,reliance_2,reliance_3,shifted"

    # generated files pass ingest loading with zero malformed rows
    d_total = cfg.pre_days + cfg.post_days
    records = ingest.load_trajectories(tmp_path / "trajectories.csv",
                                       (cfg.world_m, cfg.world_n), d_total)
    assert len(records) == summary["n_records"]
    pois = ingest.load_pois(tmp_path / "pois.csv", (cfg.world_m, cfg.world_n), cfg.k)
    assert pois
    splits = json.loads((tmp_path / "splits.json").read_text())
    assert set(splits) == {"train", "val", "test"}


def test_generate_dataset_deterministic(tmp_path):
    cfg = SynthConfig(**SMALL)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    for name in ("trajectories.csv", "pois.csv", "splits.json",
                 "truth.csv", "synth_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_json_round_trip(tmp_path):
    cfg = SynthConfig(n_individuals=10, seed=3, shift_fraction=0.4)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert SynthConfig.from_json(p) == cfg
