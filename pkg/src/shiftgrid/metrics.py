"""Accuracy metrics and the ablation / pair / crop-size studies.

The three set metrics are recall ratios over 1-cells: overall recall of the
post-event grid, recall restricted to cells kept from the pre-event grid,
and recall restricted to newly visited cells.  A cellwise-agreement accuracy
(matching cells / G^2) is reported alongside because published magnitudes
for these metrics are more consistent with an agreement reading; the set
reading stays canonical.  Zero-denominator metrics are undefined and are
excluded from aggregation rather than imputed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ingest, trainer
from .cunet import CUNetConfig, VARIANTS, build
from .errors import ShapeMismatch, ZeroVector


@dataclass
class MetricsReport:
    overall: float | None
    visited: float | None
    unvisited: float | None
    cellwise: float
    n_overall: int
    n_visited: int
    n_unvisited: int


@dataclass
class PairStudyResult:
    uid_a: int
    uid_b: int
    pre_cosine: float
    sir_cosine: float
    map_l1_mean: float


def binarize(pred, threshold: float) -> np.ndarray:
    """Threshold a probability map; ties (pred == threshold) round to 1."""
    return (np.asarray(pred) >= threshold).astype(np.uint8)


def accuracy_metrics(pred_bin, v_post, v_pre) -> MetricsReport:
    """Set recalls over 1-cells plus cellwise agreement.

    Denominator counts ride along so aggregation can report coverage.
    """
    p = np.asarray(pred_bin).astype(bool)
    post = np.asarray(v_post).astype(bool)
    pre = np.asarray(v_pre).astype(bool)
    if p.shape != post.shape or p.shape != pre.shape:
        raise ShapeMismatch(f"{p.shape} / {post.shape} / {pre.shape}")

    n_overall = int(post.sum())
    n_visited = int((post & pre).sum())
    n_unvisited = int((post & ~pre).sum())
    overall = float((p & post).sum()) / n_overall if n_overall else None
    visited = float((p & post & pre).sum()) / n_visited if n_visited else None
    unvisited = float((p & post & ~pre).sum()) / n_unvisited if n_unvisited else None
    cellwise = float((p == post).sum()) / p.size
    return MetricsReport(overall, visited, unvisited, cellwise,
                         n_overall, n_visited, n_unvisited)


def aggregate(reports) -> MetricsReport:
    """Mean over individuals with defined values; counts = contributing individuals."""
    reports = list(reports)

    def mean_of(attr):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return (sum(vals) / len(vals) if vals else None), len(vals)

    overall, n_o = mean_of("overall")
    visited, n_v = mean_of("visited")
    unvisited, n_u = mean_of("unvisited")
    cellwise = sum(r.cellwise for r in reports) / len(reports) if reports else 0.0
    return MetricsReport(overall, visited, unvisited, cellwise, n_o, n_v, n_u)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of an all-zero vector")
    return float(a @ b / (na * nb))


def find_similar_pairs(samples, pre_sim_min: float = 0.3,
                       sir_sim_max: float = 0.5) -> list[tuple]:
    """Unordered pairs with similar pre-event grids but dissimilar reliance.

    Returns (uid_a, uid_b, pre_cosine, sir_cosine) sorted by pre similarity
    descending, then reliance similarity ascending.  Individuals with
    all-zero grids or reliance vectors cannot qualify and are skipped.
    """
    usable = [s for s in samples
              if s.v_pre.bitmap.any() and np.asarray(s.sir.values).any()]
    out = []
    for i in range(len(usable)):
        for j in range(i + 1, len(usable)):
            a, b = usable[i], usable[j]
            pre_sim = cosine_similarity(a.v_pre.bitmap, b.v_pre.bitmap)
            sir_sim = cosine_similarity(a.sir.values, b.sir.values)
            if pre_sim > pre_sim_min and sir_sim < sir_sim_max:
                out.append((a.user_id, b.user_id, pre_sim, sir_sim))
    out.sort(key=lambda t: (-t[2], t[3]))
    return out


def pair_divergence(model, sample_a, sample_b) -> PairStudyResult:
    """Frozen-model inference for both individuals of a pair."""
    data = trainer.samples_to_arrays([sample_a, sample_b])
    maps = trainer.predict(model, data)
    pre_cos = cosine_similarity(sample_a.v_pre.bitmap, sample_b.v_pre.bitmap)
    sir_cos = cosine_similarity(sample_a.sir.values, sample_b.sir.values)
    diff = float(np.abs(maps[0] - maps[1]).mean())
    return PairStudyResult(sample_a.user_id, sample_b.user_id, pre_cos, sir_cos, diff)


def evaluate_model(model, samples, threshold: float = 0.5):
    """Per-individual reports plus their aggregate for a sample list."""
    data = trainer.samples_to_arrays(samples)
    probs = trainer.predict(model, data)
    reports = [
        accuracy_metrics(binarize(probs[i, 0], threshold),
                         s.v_post.bitmap, s.v_pre.bitmap)
        for i, s in enumerate(samples)
    ]
    return reports, aggregate(reports)


def ablation_harness(splits: dict, base_config: CUNetConfig,
                     train_config, progress=None):
    """Train all five variants from shared seed/data; rows in ladder order.

    Returns a list of (variant, MetricsReport) plus a dict of best
    checkpoints per variant.
    """
    train_data = trainer.samples_to_arrays(splits["train"])
    val_data = trainer.samples_to_arrays(splits["val"])
    rows, checkpoints = [], {}
    for variant in VARIANTS:
        cfg_dict = base_config.to_dict()
        cfg_dict["variant"] = variant
        model = build(CUNetConfig(**cfg_dict))
        best, _, _ = trainer.fit(model, train_data, val_data, train_config,
                                 progress=progress)
        eval_model = trainer.restore_model(best)
        _, agg = evaluate_model(eval_model, splits["test"],
                                train_config.binarize_threshold)
        rows.append((variant, agg))
        checkpoints[variant] = best
    return rows, checkpoints


def crop_sensitivity_harness(trajectories, pois, ingest_config, sizes,
                             model_config: CUNetConfig, train_config,
                             split_fn, progress=None):
    """Re-run ingest + train + eval per crop size with shared seeds.

    split_fn maps a sample list to {train, val, test} lists so callers
    control the split discipline.  Returns a list of (size, MetricsReport).
    """
    rows = []
    for g in sizes:
        icfg_kwargs = ingest_config.to_dict()
        icfg_kwargs["night_slots"] = tuple(icfg_kwargs["night_slots"])
        icfg_kwargs["g"] = g
        icfg = ingest.IngestConfig(**icfg_kwargs)
        samples = ingest.build_samples(trajectories, pois, icfg)
        splits = split_fn(samples)
        mcfg_dict = model_config.to_dict()
        mcfg_dict["g"] = g
        model = build(CUNetConfig(**mcfg_dict))
        best, _, _ = trainer.fit(model,
                                 trainer.samples_to_arrays(splits["train"]),
                                 trainer.samples_to_arrays(splits["val"]),
                                 train_config, progress=progress)
        eval_model = trainer.restore_model(best)
        _, agg = evaluate_model(eval_model, splits["test"],
                                train_config.binarize_threshold)
        rows.append((g, agg))
    return rows


# ---------------------------------------------------------------------------
# CSV rendering


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def metrics_csv(rows) -> str:
    """rows: iterable of (label, MetricsReport)."""
    lines = ["variant,overall,visited,unvisited,cellwise,n_overall,n_visited,n_unvisited"]
    for label, r in rows:
        lines.append(f"{label},{_fmt(r.overall)},{_fmt(r.visited)},{_fmt(r.unvisited)},"
                     f"{r.cellwise:.6f},{r.n_overall},{r.n_visited},{r.n_unvisited}")
    return "\n".join(lines) + "\n"


def pairs_csv(results) -> str:
    """results: iterable of PairStudyResult."""
    lines = ["uid_a,uid_b,pre_cosine,sir_cosine,map_l1_mean"]
    for r in results:
        lines.append(f"{r.uid_a},{r.uid_b},{r.pre_cosine:.6f},"
                     f"{r.sir_cosine:.6f},{r.map_l1_mean:.6f}")
    return "\n".join(lines) + "\n"
