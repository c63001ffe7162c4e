"""Command-line entry point.

Subcommands mirror the pipeline stages (ingest, label, build, diversity,
span, regress), plus run (everything), sweep, baseline, and synth. Every
config key is also a CLI flag of the same name, and a key=value config file
can seed the run. Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import diversity as div
from . import geospan, graphs, ingest, pipeline, stats, synth
from .config import PipelineConfig, load_config
from .errors import InputError, NumericalError, StageError


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file", default=None)
    for f in fields(PipelineConfig):
        flag = "--" + f.name
        if f.type == "bool":
            parser.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif f.type == "int":
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", "float | None"):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, default=None)


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for f in fields(PipelineConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _out(cfg: PipelineConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    manifest = pipeline.run_pipeline(cfg)
    print(f"report bundle written to {cfg.out_dir}")
    for key in ("stage.ingest.parsed", "stage.graphs.full.nodes", "stage.graphs.full.edges"):
        if key in manifest:
            print(f"  {key}={manifest[key]}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    ing = pipeline.stage_ingest(cfg)
    ingest.write_locations_csv(ing.locations, _out(cfg, "locations.csv"))
    ingest.write_area_csv(ing.areas, _out(cfg, "areas_filtered.csv"))
    s = ing.stats
    print(
        f"rows={s.rows_total} parsed={s.parsed} rejected={s.rejected} "
        f"self_loops={s.self_loops} outside_window={s.outside_window}"
    )
    print(
        f"users located={len(ing.locations_all)} in included areas={len(ing.locations)} "
        f"areas included={len(ing.areas.included_codes())}/{len(ing.areas)}"
    )
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    table, _ = ingest.load_messages(cfg.messages, pipeline._schema(cfg), cfg.window())
    if len(table) == 0:
        raise InputError("no valid message records")
    thresholds = graphs.dimension_thresholds(table, cfg.alpha)
    graphs.write_thresholds_csv(thresholds, _out(cfg, "thresholds.csv"))
    labels = graphs.label_matrix(table, thresholds)
    for j, d in enumerate(table.dimensions):
        print(f"{d}: theta={thresholds.theta[d]!r} labeled={int(labels[:, j].sum())}")
    return 0


def cmd_build(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    table, _ = ingest.load_messages(cfg.messages, pipeline._schema(cfg), cfg.window())
    if len(table) == 0:
        raise InputError("no valid message records")
    locations = ingest.read_locations_csv(_out(cfg, "locations.csv"))
    thresholds = graphs.dimension_thresholds(table, cfg.alpha)
    full = graphs.build_graph(table, locations, cfg.min_weight)
    graphs.write_graph_csv(full, _out(cfg, "graph_full.csv"))
    if cfg.bin_universe == "unthresholded" and cfg.min_weight > 1:
        universe = graphs.build_graph(table, locations, 1, tag="universe")
        graphs.write_graph_csv(universe, _out(cfg, "graph_universe.csv"))
    for d in cfg.dims():
        g = graphs.build_dimension_graph(table, locations, d, thresholds)
        graphs.write_graph_csv(g, _out(cfg, f"graph_{d}.csv"))
        print(f"{d}: nodes={g.num_nodes} edges={g.num_edges}")
    print(f"full: nodes={full.num_nodes} edges={full.num_edges}")
    return 0


def _read_graphs(cfg: PipelineConfig) -> tuple[graphs.CommGraph, graphs.CommGraph, dict[str, graphs.CommGraph]]:
    full = graphs.read_graph_csv(_out(cfg, "graph_full.csv"))
    universe_path = _out(cfg, "graph_universe.csv")
    universe = graphs.read_graph_csv(universe_path) if os.path.exists(universe_path) else full
    by_dim = {d: graphs.read_graph_csv(_out(cfg, f"graph_{d}.csv")) for d in cfg.dims()}
    return full, universe, by_dim


def cmd_diversity(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    full, _, by_dim = _read_graphs(cfg)
    locations = ingest.read_locations_csv(_out(cfg, "locations.csv"))
    areas = ingest.read_area_csv(_out(cfg, "areas_filtered.csv"))
    n_areas = pipeline.diversity_area_count(cfg, areas)
    tables = []
    for tag, g in [("full", full)] + sorted(by_dim.items()):
        tables.append(
            div.compute_diversity(g, locations, n_areas, cfg.diversity_direction, cfg.include_k1)
        )
    div.write_diversity_csv(tables, _out(cfg, "diversity.csv"))
    for t in tables:
        print(f"{t.tag}: users={len(t.user_ids)} areas={len(t.area_ids)}")
    return 0


def cmd_span(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _, universe, by_dim = _read_graphs(cfg)
    locations = ingest.read_locations_csv(_out(cfg, "locations.csv"))
    areas = ingest.read_area_csv(_out(cfg, "areas_filtered.csv"))
    bins = geospan.span_bins(universe, locations, areas, cfg.span_n_bins)
    reports = geospan.delta_p_multi(
        universe, {d: by_dim[d] for d in cfg.dims()}, locations, areas,
        runs=cfg.null_runs, variants=cfg.variants(),
        seed=pipeline.stage_seed(cfg.seed, "null_model"), bins=bins,
        ci_method=cfg.ci_method, ratio_aggregation=cfg.ratio_aggregation,
    )
    geospan.write_geospan_csv(reports, _out(cfg, "geospan.csv"))
    print(f"geospan report for {len(reports)} (dimension, variant) pairs")
    return 0


def cmd_regress(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    areas = ingest.read_area_csv(_out(cfg, "areas_filtered.csv"))
    raw = div.read_area_diversity_csv(_out(cfg, "diversity.csv"))
    maps: pipeline.AreaFeatureMaps = {
        tag: {
            "social": {a: v[0] for a, v in per.items()},
            "spatial": {a: v[1] for a, v in per.items()},
        }
        for tag, per in raw.items()
    }
    reports = {}
    for name, tokens in cfg.models():
        X, y, _ = pipeline.build_feature_matrix(tokens, areas, maps, cfg.normalize)
        reports[name] = stats.ols_fit(X, y, tokens)
    if cfg.step_aic:
        tokens = ["density"] + [
            f"{kind}_{d}" for d in cfg.dims() for kind in ("social", "spatial")
        ]
        X, y, _ = pipeline.build_feature_matrix(tokens, areas, maps, cfg.normalize)
        report, selected = stats.step_aic_backward(X, y, tokens, forced=("density",))
        reports["stepaic:" + "+".join(selected)] = report
    stats.write_regressions_csv(reports, _out(cfg, "regressions.csv"))
    stats.write_regressions_text(reports, _out(cfg, "regressions.txt"))
    for name in sorted(reports):
        print(reports[name].to_text(title=name))
        print()
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise InputError("no sweep values given")
    rows = pipeline.sweep(cfg, args.parameter, values)
    pipeline.write_sweep_csv(rows, _out(cfg, "sweep.csv"))
    for r in rows:
        print(f"{r.parameter}={r.value} {r.model}: r2_adj={r.r2_adj:.4f} (n={r.n})")
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    results = pipeline.random_baseline(cfg, args.runs)
    pipeline.write_baseline_csv(results, _out(cfg, "baseline.csv"))
    for r in results:
        sd = "n/a" if math.isnan(r.sd_r2_adj) else f"{r.sd_r2_adj:.4f}"
        print(
            f"{r.variant}: mean r2_adj={r.mean_r2_adj:.4f} sd={sd} "
            f"({r.effective_runs}/{r.runs} runs){' ' + r.note if r.note else ''}"
        )
    return 0


def _parse_kv_floats(raw: str | None, what: str) -> dict[str, float]:
    out: dict[str, float] = {}
    if not raw:
        return out
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, val = part.partition("=")
        if not sep:
            raise InputError(f"{what}: expected dim=value, got {part!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise InputError(f"{what}: cannot parse {val!r}") from None
    return out


def _parse_kv_ranges(raw: str | None, what: str) -> dict[str, tuple[float, float]]:
    out: dict[str, tuple[float, float]] = {}
    if not raw:
        return out
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, val = part.partition("=")
        lo, sep2, hi = val.partition(":")
        if not sep or not sep2:
            raise InputError(f"{what}: expected dim=lo:hi, got {part!r}")
        out[key.strip()] = (float(lo), float(hi))
    return out


def cmd_synth(args: argparse.Namespace) -> int:
    rates: float | dict[str, float]
    kv = _parse_kv_floats(args.label_rates, "label_rates")
    rates = kv if kv else args.label_rate
    cfg = synth.SynthConfig(
        n_areas=args.n_areas,
        users_per_area=args.users_per_area,
        messages_per_user=args.messages_per_user,
        dimensions=tuple(d.strip() for d in args.synth_dimensions.split(",") if d.strip()),
        label_rates=rates,
        coupling=_parse_kv_floats(args.coupling, "coupling"),
        locality=_parse_kv_ranges(args.locality, "locality"),
        base_locality=args.base_locality,
        grid_spacing_km=args.grid_spacing_km,
        outcome_intercept=args.outcome_intercept,
        outcome_betas=_parse_kv_floats(args.outcome_betas, "outcome_betas"),
        outcome_noise_sd=args.outcome_noise_sd,
        seed=args.synth_seed,
    )
    corpus = synth.generate_corpus(cfg)
    paths = synth.write_corpus(corpus, args.synth_out, fmt=args.format)
    truth_path = os.path.join(args.synth_out, "synth_truth.txt")
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write(f"messages={len(corpus.table)}\n")
        fh.write(f"users={len(corpus.table.users)}\n")
        fh.write(f"areas={len(corpus.areas)}\n")
        for d in sorted(corpus.exact_alpha):
            fh.write(f"exact_alpha.{d}={corpus.exact_alpha[d]!r}\n")
            fh.write(f"label_count.{d}={corpus.label_counts[d]}\n")
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    print(f"ground truth: {truth_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netdiv",
        description="Communication-graph diversity analytics pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, handler, extra in [
        ("run", cmd_run, None),
        ("ingest", cmd_ingest, None),
        ("label", cmd_label, None),
        ("build", cmd_build, None),
        ("diversity", cmd_diversity, None),
        ("span", cmd_span, None),
        ("regress", cmd_regress, None),
        ("sweep", cmd_sweep, "sweep"),
        ("baseline", cmd_baseline, "baseline"),
    ]:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if extra == "sweep":
            p.add_argument("--parameter", required=True, choices=pipeline.SWEEPABLE)
            p.add_argument("--values", required=True, help="comma-separated values")
        elif extra == "baseline":
            p.add_argument("--runs", type=int, default=None)
        p.set_defaults(handler=handler)

    p = sub.add_parser("synth")
    p.add_argument("--synth-out", default="synth_data")
    p.add_argument("--n-areas", type=int, default=16)
    p.add_argument("--users-per-area", type=int, default=25)
    p.add_argument("--messages-per-user", type=int, default=20)
    p.add_argument("--synth-dimensions", default="knowledge,support")
    p.add_argument("--label-rate", type=float, default=0.01)
    p.add_argument("--label-rates", default=None, help="dim=rate,...")
    p.add_argument("--coupling", default=None, help="dim=exponent,...")
    p.add_argument("--locality", default=None, help="dim=lo:hi,...")
    p.add_argument("--base-locality", type=float, default=0.0)
    p.add_argument("--grid-spacing-km", type=float, default=400.0)
    p.add_argument("--outcome-intercept", type=float, default=None)
    p.add_argument("--outcome-betas", default=None, help="dim=beta,...")
    p.add_argument("--outcome-noise-sd", type=float, default=0.0)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(handler=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1 if isinstance(exc.cause, (InputError, OSError)) else 2
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
