"""End-to-end orchestration: ingest, graphs, diversity, span, regressions.

Every run writes a report bundle of UTF-8 CSVs plus a plain-text manifest
with the config hash, per-stage row counts, and a content hash for each
output, so identical (inputs, config, seed) produce byte-identical bundles.
"""

from __future__ import annotations

import hashlib
import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import diversity as div
from . import geospan, graphs, ingest, stats
from .config import PipelineConfig
from .errors import InputError, NumericalError, StageError
from .seeding import stage_rng, stage_seed


@dataclass
class IngestResult:
    table: ingest.MessageTable
    stats: ingest.ParseStats
    locations_all: ingest.UserLocationMap
    locations: ingest.UserLocationMap
    areas: ingest.AreaTable


@dataclass
class GraphsResult:
    thresholds: graphs.DimensionThresholds
    full: graphs.CommGraph
    universe: graphs.CommGraph
    by_dim: dict[str, graphs.CommGraph]
    located_messages: int
    labeled_located: dict[str, int]


def _schema(cfg: PipelineConfig) -> ingest.MessageSchema:
    return ingest.MessageSchema(
        dimensions=cfg.dims(),
        message_id=cfg.message_id_col,
        sender=cfg.sender_col,
        receiver=cfg.receiver_col,
        timestamp=cfg.timestamp_col,
        score_template=cfg.score_col_template,
    )


def stage_ingest(cfg: PipelineConfig) -> IngestResult:
    table, pstats = ingest.load_messages(cfg.messages, _schema(cfg), cfg.window())
    if len(table) == 0:
        raise InputError(
            f"no valid message records in {cfg.messages!r} "
            f"({pstats.rows_total} rows, {pstats.rejected} rejected)"
        )
    activity = ingest.read_activity_csv(cfg.activity)
    locations_all = ingest.georeference_users(activity, cfg.n_min, cfg.purity)
    area_table = ingest.read_area_csv(cfg.areas)
    unknown = sorted({a for a in locations_all.values() if a not in area_table})
    if unknown:
        raise InputError(f"located users reference unknown areas: {unknown}")
    counts = ingest.located_user_counts(locations_all)
    filtered = ingest.filter_states_by_penetration(
        area_table, counts, cfg.sd_mult, cfg.min_users
    )
    if cfg.restrict_to_included:
        locations = {
            u: a for u, a in locations_all.items() if filtered[a].included
        }
    else:
        locations = dict(locations_all)
    return IngestResult(table, pstats, locations_all, locations, filtered)


def stage_graphs(cfg: PipelineConfig, ing: IngestResult) -> GraphsResult:
    table = ing.table
    thresholds = graphs.dimension_thresholds(table, cfg.alpha)
    full = graphs.build_graph(table, ing.locations, cfg.min_weight)
    if cfg.bin_universe == "unthresholded" and cfg.min_weight > 1:
        universe = graphs.build_graph(table, ing.locations, 1, tag="universe")
    else:
        universe = full
    by_dim = {
        d: graphs.build_dimension_graph(table, ing.locations, d, thresholds)
        for d in cfg.dims()
    }
    located = graphs._located_mask(table, ing.locations)
    labels = graphs.label_matrix(table, thresholds)
    labeled_located = {
        d: int((located & labels[:, table.dim_index(d)]).sum()) for d in cfg.dims()
    }
    return GraphsResult(
        thresholds=thresholds,
        full=full,
        universe=universe,
        by_dim=by_dim,
        located_messages=int(located.sum()),
        labeled_located=labeled_located,
    )


def diversity_area_count(cfg: PipelineConfig, areas: ingest.AreaTable) -> int:
    if cfg.area_count_mode == "included":
        n = len(areas.included_codes())
        if not cfg.restrict_to_included:
            warnings.warn(
                "area_count_mode=included with restrict_to_included=false can "
                "push spatial diversity above 1",
                stacklevel=2,
            )
    else:
        n = len(areas)
    if n < 2:
        raise NumericalError("need at least 2 areas for spatial diversity")
    return n


def stage_diversity(
    cfg: PipelineConfig, ing: IngestResult, gr: GraphsResult
) -> dict[str, div.DiversityTable]:
    n_areas = diversity_area_count(cfg, ing.areas)
    tables = {}
    for tag, graph in [("full", gr.full)] + sorted(gr.by_dim.items()):
        tables[tag] = div.compute_diversity(
            graph, ing.locations, n_areas, cfg.diversity_direction, cfg.include_k1
        )
    return tables


def stage_geospan(
    cfg: PipelineConfig, ing: IngestResult, gr: GraphsResult
) -> list[geospan.DeltaPReport]:
    bins = geospan.span_bins(gr.universe, ing.locations, ing.areas, cfg.span_n_bins)
    return geospan.delta_p_multi(
        gr.universe,
        {d: gr.by_dim[d] for d in cfg.dims()},
        ing.locations,
        ing.areas,
        runs=cfg.null_runs,
        variants=cfg.variants(),
        seed=stage_seed(cfg.seed, "null_model"),
        bins=bins,
        ci_method=cfg.ci_method,  # type: ignore[arg-type]
        ratio_aggregation=cfg.ratio_aggregation,  # type: ignore[arg-type]
    )


# tag -> {"social": {area: value}, "spatial": {area: value}}
AreaFeatureMaps = dict[str, dict[str, dict[str, float]]]


def area_feature_maps(div_tables: dict[str, div.DiversityTable]) -> AreaFeatureMaps:
    return {
        tag: {"social": t.area_social_map(), "spatial": t.area_spatial_map()}
        for tag, t in div_tables.items()
    }


def _feature_value(
    token: str,
    area: str,
    areas: ingest.AreaTable,
    maps: AreaFeatureMaps,
) -> float | None:
    if token == "density":
        return areas[area].density
    kind, _, rest = token.partition("_")
    if kind not in ("social", "spatial") or not rest:
        raise InputError(f"unknown regression feature: {token!r}")
    tagged = maps.get(rest)
    if tagged is None:
        raise InputError(f"regression feature {token!r}: no graph tagged {rest!r}")
    return tagged[kind].get(area)


def build_feature_matrix(
    tokens: list[str],
    areas: ingest.AreaTable,
    maps: AreaFeatureMaps,
    normalize: bool,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Design matrix, response, and the (alphabetical) area rows used.

    Areas missing any requested feature are dropped; the response is GDP per
    capita. With ``normalize``, features and response are min-max rescaled.
    """
    rows = []
    used = []
    for code in areas.included_codes():
        values = [_feature_value(t, code, areas, maps) for t in tokens]
        if any(v is None for v in values):
            continue
        rows.append(values + [areas[code].gdp_per_capita])
        used.append(code)
    if len(rows) < len(tokens) + 2:
        raise NumericalError(
            f"only {len(rows)} usable areas for features {tokens}; need more rows"
        )
    mat = np.asarray(rows, dtype=np.float64)
    X, y = mat[:, :-1], mat[:, -1]
    if normalize:
        X = np.column_stack([stats.minmax_normalize(X[:, j]) for j in range(X.shape[1])])
        y = stats.minmax_normalize(y)
    return X, y, used


def stage_stats(
    cfg: PipelineConfig,
    ing: IngestResult,
    gr: GraphsResult,
    div_tables: dict[str, div.DiversityTable],
) -> tuple[dict[str, stats.RegressionReport], stats.KSResult | None, stats.CorrelationMatrix]:
    reports = {}
    maps = area_feature_maps(div_tables)
    for name, tokens in cfg.models():
        X, y, _ = build_feature_matrix(tokens, ing.areas, maps, cfg.normalize)
        reports[name] = stats.ols_fit(X, y, tokens)
    if cfg.step_aic:
        tokens = ["density"] + [
            f"{kind}_{d}" for d in cfg.dims() for kind in ("social", "spatial")
        ]
        X, y, _ = build_feature_matrix(tokens, ing.areas, maps, cfg.normalize)
        report, selected = stats.step_aic_backward(X, y, tokens, forced=("density",))
        reports["stepaic:" + "+".join(selected)] = report
    ks = None
    dims = cfg.dims()
    if len(dims) >= 2:
        a = gr.by_dim[dims[0]].weight
        b = gr.by_dim[dims[1]].weight
        if a.size and b.size:
            ks = stats.ks_two_sample(a.astype(np.float64), b.astype(np.float64))
    corr = stats.spearman_matrix(ing.table.scores, list(ing.table.dimensions))
    return reports, ks, corr


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(manifest: dict[str, object], out_dir: str) -> str:
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(manifest):
            fh.write(f"{key}={manifest[key]}\n")
    return path


def run_pipeline(cfg: PipelineConfig) -> dict[str, object]:
    """Execute all stages, write the report bundle, and return the manifest."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    manifest: dict[str, object] = {"config_hash": cfg.hash(), "seed": cfg.seed}

    def run_stage(name, fn, *args):
        try:
            return fn(*args)
        except (InputError, NumericalError, OSError, ValueError) as exc:
            raise StageError(name, exc) from exc

    ing = run_stage("ingest", stage_ingest, cfg)
    manifest.update(
        {
            "stage.ingest.rows_total": ing.stats.rows_total,
            "stage.ingest.parsed": ing.stats.parsed,
            "stage.ingest.rejected": ing.stats.rejected,
            "stage.ingest.self_loops": ing.stats.self_loops,
            "stage.ingest.outside_window": ing.stats.outside_window,
            "stage.ingest.users_located": len(ing.locations_all),
            "stage.ingest.users_in_included_areas": len(ing.locations),
            "stage.ingest.areas_included": len(ing.areas.included_codes()),
        }
    )

    gr = run_stage("graphs", stage_graphs, cfg, ing)
    manifest["stage.graphs.located_messages"] = gr.located_messages
    for tag, g in [("full", gr.full), ("universe", gr.universe)] + sorted(
        gr.by_dim.items()
    ):
        manifest[f"stage.graphs.{tag}.nodes"] = g.num_nodes
        manifest[f"stage.graphs.{tag}.edges"] = g.num_edges
    for d, count in sorted(gr.labeled_located.items()):
        manifest[f"stage.labels.{d}"] = count

    div_tables = run_stage("diversity", stage_diversity, cfg, ing, gr)
    for tag, t in sorted(div_tables.items()):
        manifest[f"stage.diversity.{tag}.users"] = len(t.user_ids)
        manifest[f"stage.diversity.{tag}.areas"] = len(t.area_ids)

    span_reports = run_stage("geospan", stage_geospan, cfg, ing, gr)
    regressions, ks, corr = run_stage("stats", stage_stats, cfg, ing, gr, div_tables)

    out = cfg.out_dir
    ingest.write_locations_csv(ing.locations, os.path.join(out, "locations.csv"))
    ingest.write_area_csv(ing.areas, os.path.join(out, "areas_filtered.csv"))
    graphs.write_thresholds_csv(gr.thresholds, os.path.join(out, "thresholds.csv"))
    graphs.write_graph_csv(gr.full, os.path.join(out, "graph_full.csv"))
    if gr.universe is not gr.full:
        graphs.write_graph_csv(gr.universe, os.path.join(out, "graph_universe.csv"))
    for d, g in sorted(gr.by_dim.items()):
        graphs.write_graph_csv(g, os.path.join(out, f"graph_{d}.csv"))
    _write_graph_stats(cfg, gr, os.path.join(out, "graph_stats.csv"))
    div.write_diversity_csv(
        [div_tables[tag] for tag in sorted(div_tables)],
        os.path.join(out, "diversity.csv"),
    )
    geospan.write_geospan_csv(span_reports, os.path.join(out, "geospan.csv"))
    stats.write_regressions_csv(regressions, os.path.join(out, "regressions.csv"))
    stats.write_regressions_text(regressions, os.path.join(out, "regressions.txt"))
    _write_ks_csv(cfg, ks, os.path.join(out, "ks.csv"))
    stats.write_correlation_csv(corr, os.path.join(out, "spearman.csv"))

    for name in sorted(os.listdir(out)):
        if name == "manifest.txt":
            continue
        path = os.path.join(out, name)
        if os.path.isfile(path):
            manifest[f"output.{name}.sha256"] = _sha256(path)
    write_manifest(manifest, out)
    return manifest


def _write_graph_stats(cfg: PipelineConfig, gr: GraphsResult, path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "nodes", "edges", "total_weight", "node_fraction"])
        rows = [("full", gr.full, None), ("universe", gr.universe, None)] + [
            (d, g, gr.full) for d, g in sorted(gr.by_dim.items())
        ]
        for tag, g, ref in rows:
            summary = graphs.graph_summary(g, ref)
            writer.writerow(
                [tag, summary.nodes, summary.edges, g.total_weight(),
                 "" if summary.node_fraction is None else repr(summary.node_fraction)]
            )


def _write_ks_csv(cfg: PipelineConfig, ks: stats.KSResult | None, path: str) -> None:
    import csv

    dims = cfg.dims()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_a", "sample_b", "statistic", "p_value"])
        if ks is not None and len(dims) >= 2:
            writer.writerow(
                [f"{dims[0]}_edge_weights", f"{dims[1]}_edge_weights",
                 repr(ks.statistic), repr(ks.p_value)]
            )


@dataclass
class SweepRow:
    parameter: str
    value: str
    model: str
    r2_adj: float
    n: int


SWEEPABLE = ("min_weight", "alpha", "n_min", "window")


def sweep(cfg: PipelineConfig, parameter: str, values: list[str]) -> list[SweepRow]:
    """Re-run only the stages a parameter touches and tabulate adjusted R2
    for every configured regression model."""
    cfg.validate()
    if parameter not in SWEEPABLE:
        raise InputError(f"unknown sweep parameter {parameter!r}; pick from {SWEEPABLE}")
    base_window = None if parameter == "window" else cfg.window()
    table, _ = ingest.load_messages(cfg.messages, _schema(cfg), base_window)
    if len(table) == 0:
        raise InputError("no valid message records")
    activity = ingest.read_activity_csv(cfg.activity)
    area_table = ingest.read_area_csv(cfg.areas)

    def finish(local_cfg: PipelineConfig, local_table, locations_all) -> list[tuple[str, float, int]]:
        unknown = sorted({a for a in locations_all.values() if a not in area_table})
        if unknown:
            raise InputError(f"located users reference unknown areas: {unknown}")
        counts = ingest.located_user_counts(locations_all)
        filtered = ingest.filter_states_by_penetration(
            area_table, counts, local_cfg.sd_mult, local_cfg.min_users
        )
        locations = (
            {u: a for u, a in locations_all.items() if filtered[a].included}
            if local_cfg.restrict_to_included
            else dict(locations_all)
        )
        ing = IngestResult(local_table, ingest.ParseStats(), locations_all, locations, filtered)
        gr = stage_graphs(local_cfg, ing)
        div_tables = stage_diversity(local_cfg, ing, gr)
        out = []
        maps = area_feature_maps(div_tables)
        for name, tokens in local_cfg.models():
            # a parameter value can degenerate one model (constant feature,
            # too few usable areas); keep the table complete with a NaN cell
            try:
                X, y, used = build_feature_matrix(tokens, filtered, maps, local_cfg.normalize)
                report = stats.ols_fit(X, y, tokens)
                out.append((name, report.r2_adj, report.n))
            except NumericalError:
                out.append((name, math.nan, 0))
        return out

    locations_base = ingest.georeference_users(activity, cfg.n_min, cfg.purity)
    rows = []
    for raw in values:
        local_cfg = cfg
        local_table = table
        locations_all = locations_base
        if parameter == "min_weight":
            local_cfg = replace(cfg, min_weight=int(raw))
        elif parameter == "alpha":
            local_cfg = replace(cfg, alpha=float(raw))
        elif parameter == "n_min":
            local_cfg = replace(cfg, n_min=int(raw))
            locations_all = ingest.georeference_users(activity, int(raw), cfg.purity)
        elif parameter == "window":
            start_s, _, end_s = raw.partition(":")
            start = float(start_s) if start_s else None
            end = float(end_s) if end_s else None
            local_cfg = replace(cfg, window_start=start, window_end=end)
            local_table = table.filter_window(start, end)
            if len(local_table) == 0:
                raise InputError(f"window {raw!r} leaves no messages")
        local_cfg.validate()
        for name, r2, n in finish(local_cfg, local_table, locations_all):
            rows.append(SweepRow(parameter, str(raw), name, r2, n))
    return rows


def write_sweep_csv(rows: list[SweepRow], path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "model", "r2_adj", "n"])
        for r in rows:
            writer.writerow([r.parameter, r.value, r.model, repr(r.r2_adj), r.n])


@dataclass
class BaselineResult:
    variant: str
    runs: int
    effective_runs: int
    mean_r2_adj: float
    sd_r2_adj: float  # NaN when fewer than 2 effective runs
    note: str = ""


def random_baseline(cfg: PipelineConfig, runs: int | None = None) -> list[BaselineResult]:
    """Regressions on graphs built from a uniform random sample of messages.

    Each run samples ``baseline_fraction`` of the messages, builds an
    unthresholded graph, and fits a univariate model of the outcome on the
    area diversity (population density joins only when configured).
    """
    cfg.validate()
    runs = cfg.baseline_runs if runs is None else runs
    if runs < 1:
        raise InputError("baseline needs at least 1 run")
    ing = stage_ingest(cfg)
    n_areas = diversity_area_count(cfg, ing.areas)
    n = len(ing.table)
    sample_size = max(1, int(round(cfg.baseline_fraction * n)))
    collected: dict[str, list[float]] = {"spatial": [], "social": []}
    skipped = 0
    for r in range(runs):
        rng = stage_rng(cfg.seed, "baseline", r)
        idx = np.sort(rng.choice(n, size=sample_size, replace=False))
        sub = ingest.MessageTable(
            ing.table.users,
            ing.table.sender[idx],
            ing.table.receiver[idx],
            ing.table.timestamp[idx],
            ing.table.dimensions,
            ing.table.scores[idx],
        )
        try:
            g = graphs.build_graph(sub, ing.locations, 1, tag="baseline")
            table = div.compute_diversity(
                g, ing.locations, n_areas, cfg.diversity_direction, cfg.include_k1
            )
            for kind in ("spatial", "social"):
                tokens = ["density"] if cfg.baseline_include_density else []
                tokens = tokens + [f"{kind}_baseline"]
                X, y, _ = build_feature_matrix(
                    tokens, ing.areas, area_feature_maps({"baseline": table}), cfg.normalize
                )
                collected[kind].append(stats.ols_fit(X, y, tokens).r2_adj)
        except (InputError, NumericalError):
            skipped += 1
    out = []
    for kind in ("spatial", "social"):
        vals = np.array(collected[kind])
        eff = vals.size
        mean = float(vals.mean()) if eff else math.nan
        sd = float(vals.std(ddof=1)) if eff >= 2 else math.nan
        note = ""
        if eff < 2:
            note = "sd undefined: fewer than 2 effective runs"
        if skipped:
            note = (note + "; " if note else "") + f"{skipped} run(s) skipped"
        out.append(BaselineResult(kind, runs, eff, mean, sd, note))
    return out


def write_baseline_csv(results: list[BaselineResult], path: str) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "runs", "effective_runs", "mean_r2_adj", "sd_r2_adj", "note"]
        )
        for r in results:
            writer.writerow(
                [r.variant, r.runs, r.effective_runs,
                 "" if math.isnan(r.mean_r2_adj) else repr(r.mean_r2_adj),
                 "" if math.isnan(r.sd_r2_adj) else repr(r.sd_r2_adj), r.note]
            )
