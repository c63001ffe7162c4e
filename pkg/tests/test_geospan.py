import math

import numpy as np
import pytest

from netdiv.errors import InputError
from netdiv.geospan import (
    EARTH_RADIUS_KM,
    DeltaPReport,
    conditional_probability,
    delta_p,
    haversine_km,
    null_reshuffle,
    span_bins,
    state_distance,
)
from netdiv.graphs import graph_from_edges
from netdiv.ingest import AreaInfo, AreaTable
from netdiv.synth import SynthConfig, generate_corpus, receiver_area_weights
from netdiv.graphs import build_graph

from conftest import square_area_table


def law_of_cosines_km(lat1, lon1, lat2, lon2):
    """Independent great-circle formula for cross-checking haversine."""
    p1, l1, p2, l2 = map(math.radians, (lat1, lon1, lat2, lon2))
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(l2 - l1)
    return EARTH_RADIUS_KM * math.acos(max(-1.0, min(1.0, c)))


def chain_areas(distances_km):
    """Area 'B00' at the origin plus one area per requested distance, laid
    out along the equator so haversine reproduces the distance."""
    areas = {"B00": AreaInfo(1e6, 1.0, 1.0, 0.0, 0.0)}
    for i, d in enumerate(distances_km, start=1):
        lon = math.degrees(d / EARTH_RADIUS_KM)
        areas[f"B{i:02d}"] = AreaInfo(1e6, 1.0, 1.0, 0.0, lon)
    return AreaTable(areas)


class TestStateDistance:
    def test_same_state_zero(self):
        areas = square_area_table(["X", "Y"])
        assert state_distance("X", "X", areas) == 0.0

    def test_antipodal_half_circumference(self):
        areas = AreaTable({
            "P": AreaInfo(1e6, 1, 1, 0.0, 0.0),
            "Q": AreaInfo(1e6, 1, 1, 0.0, 180.0),
        })
        assert state_distance("P", "Q", areas) == pytest.approx(
            math.pi * EARTH_RADIUS_KM, abs=1e-6
        )

    def test_matches_independent_formula(self):
        areas = AreaTable({
            "CA": AreaInfo(4e7, 1, 1, 36.7783, -119.4179),
            "NY": AreaInfo(2e7, 1, 1, 43.0, -75.0),
        })
        want = law_of_cosines_km(36.7783, -119.4179, 43.0, -75.0)
        assert state_distance("CA", "NY", areas) == pytest.approx(want, abs=0.1)

    def test_missing_area(self):
        areas = square_area_table(["X"])
        with pytest.raises(InputError):
            state_distance("X", "Z", areas)


class TestSpanBins:
    def edges_at_distances(self, distances):
        areas = chain_areas(distances)
        edges = {("p00", f"p{i:02d}"): 1 for i in range(1, len(distances) + 1)}
        g = graph_from_edges(edges)
        locations = {"p00": "B00"}
        locations.update({f"p{i:02d}": f"B{i:02d}" for i in range(1, len(distances) + 1)})
        return g, locations, areas

    def test_ten_edges_quintiles(self):
        g, loc, areas = self.edges_at_distances(list(range(1, 11)))
        bins = span_bins(g, loc, areas, n_bins=5)
        np.testing.assert_allclose(bins.boundaries, [2, 4, 6, 8], atol=1e-6)
        np.testing.assert_array_equal(bins.tie_counts, [2, 2, 2, 2, 2])
        assert bins.n_bins == 5

    def test_all_zero_distance_merges_with_warning(self):
        areas = square_area_table(["A"])
        g = graph_from_edges({("a", "b"): 1, ("b", "c"): 1, ("c", "a"): 1})
        loc = {u: "A" for u in "abc"}
        with pytest.warns(UserWarning, match="merged"):
            bins = span_bins(g, loc, areas, n_bins=5)
        assert bins.n_bins < 5
        assert int(bins.tie_counts.sum()) == 3

    def test_zero_heavy_mixture_first_bin(self):
        # 40% of edges at distance 0, the rest spread over distinct distances
        distances = [100.0 * i for i in range(1, 10)]
        areas = chain_areas(distances)
        edges = {}
        loc = {}
        for i in range(6):  # 6 zero-distance edges within B00
            edges[(f"z{i}", f"z{i + 1}")] = 1
            loc[f"z{i}"] = "B00"
        loc["z6"] = "B00"
        for i in range(1, 10):
            edges[("hub", f"p{i:02d}")] = 1
            loc[f"p{i:02d}"] = f"B{i:02d}"
        loc["hub"] = "B00"
        g = graph_from_edges(edges)
        with pytest.warns(UserWarning, match="merged"):
            bins = span_bins(g, loc, areas, n_bins=5)
        assert bins.medians[0] == 0.0
        # every zero-distance edge fell in the first bin
        assert bins.tie_counts[0] >= 6

    def test_counts_sum_to_edge_count(self, rng):
        distances = [float(d) for d in rng.integers(1, 2000, size=12)]
        g, loc, areas = self.edges_at_distances(distances)
        bins = span_bins(g, loc, areas, n_bins=5)
        assert int(bins.tie_counts.sum()) == g.num_edges
        assert int(bins.message_counts.sum()) == g.total_weight()

    def test_boundary_ties_go_low(self):
        g, loc, areas = self.edges_at_distances([1.0, 2.0, 3.0, 4.0, 5.0])
        bins = span_bins(g, loc, areas, n_bins=5)
        idx = bins.assign(np.array(bins.boundaries[0]).reshape(1))
        assert idx[0] == 0


class TestConditionalProbability:
    def setup_graphs(self):
        g, loc, areas = TestSpanBins().edges_at_distances(list(range(1, 11)))
        bins = span_bins(g, loc, areas, n_bins=5)
        return g, loc, areas, bins

    def test_same_graph_is_one(self):
        g, loc, areas, bins = self.setup_graphs()
        p = conditional_probability(g, g, bins, loc, areas)
        np.testing.assert_allclose(p, 1.0)

    def test_empty_dimension_graph(self):
        g, loc, areas, bins = self.setup_graphs()
        p = conditional_probability(graph_from_edges({}), g, bins, loc, areas)
        np.testing.assert_allclose(p, 0.0)


class TestNullReshuffle:
    def test_single_user_identity(self):
        assert null_reshuffle({"u": "CA"}, seed=5) == {"u": "CA"}

    def test_multiset_preserved(self, rng):
        loc = {f"u{i}": f"A{i % 5}" for i in range(100)}
        shuffled = null_reshuffle(loc, seed=42)
        assert sorted(shuffled.values()) == sorted(loc.values())
        assert set(shuffled) == set(loc)

    def test_two_user_swap_frequency(self):
        swaps = 0
        n = 10_000
        for seed in range(n):
            out = null_reshuffle({"a": "CA", "b": "NY"}, seed=seed)
            if out["a"] == "NY":
                assert out["b"] == "CA"
                swaps += 1
        assert abs(swaps / n - 0.5) <= 0.02


def corpus_delta(cfg, dim, variant="tie", runs=24, seed=99, **kwargs):
    corpus = generate_corpus(cfg)
    universe = build_graph(corpus.table, corpus.locations, 1, tag="universe")
    g_d = corpus.dimension_graph(dim)
    report = delta_p(
        universe, g_d, corpus.locations, corpus.areas,
        runs=runs, variant=variant, seed=seed, **kwargs,
    )
    return corpus, universe, g_d, report


class TestDeltaP:
    def test_runs_precondition(self):
        cfg = SynthConfig(n_areas=4, users_per_area=5, messages_per_user=5,
                          label_rates=0.2, seed=0)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        with pytest.raises(InputError):
            delta_p(universe, corpus.dimension_graph("knowledge"),
                    corpus.locations, corpus.areas, runs=1)

    def test_no_coupling_cis_cover_zero(self):
        covered = total = 0
        for seed in range(4):
            cfg = SynthConfig(n_areas=12, users_per_area=12, messages_per_user=25,
                              label_rates=0.1, seed=seed)
            _, _, _, rep = corpus_delta(cfg, "knowledge", runs=24, seed=seed + 1)
            ok = ~rep.undefined
            covered += int(((rep.ci_low[ok] <= 0) & (0 <= rep.ci_high[ok])).sum())
            total += int(ok.sum())
        assert covered >= 0.8 * total

    def test_reshuffle_preserves_counts_and_topology(self):
        cfg = SynthConfig(n_areas=6, users_per_area=8, messages_per_user=10,
                          label_rates=0.2, seed=3)
        corpus = generate_corpus(cfg)
        shuffled = null_reshuffle(corpus.locations, seed=11)
        per_area_before = {}
        for a in corpus.locations.values():
            per_area_before[a] = per_area_before.get(a, 0) + 1
        per_area_after = {}
        for a in shuffled.values():
            per_area_after[a] = per_area_after.get(a, 0) + 1
        assert per_area_before == per_area_after

    def test_tie_equals_message_on_weight_one_graph(self):
        # a universe where every pair communicated exactly once
        cfg = SynthConfig(n_areas=8, users_per_area=30, messages_per_user=2,
                          label_rates=0.3, seed=5)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        if not np.all(universe.weight == 1):
            keep = universe.weight == 1
            universe = graph_from_edges(
                {(universe.users[s], universe.users[d]): 1
                 for s, d in zip(universe.src[keep], universe.dst[keep])},
                tag="universe",
            )
        g_d = corpus.dimension_graph("knowledge")
        keep_ids = set(universe.edge_ids())
        g_d = graph_from_edges(
            {e: 1 for e in g_d.edge_ids() if e in keep_ids} or {("x", "y"): 1},
            tag="knowledge",
        )
        args = (universe, g_d, corpus.locations, corpus.areas)
        r_tie = delta_p(*args, runs=10, variant="tie", seed=7)
        r_msg = delta_p(*args, runs=10, variant="message", seed=7)
        np.testing.assert_allclose(r_tie.p, r_msg.p, equal_nan=True)
        np.testing.assert_allclose(r_tie.delta, r_msg.delta, equal_nan=True)
        np.testing.assert_allclose(r_tie.ci_low, r_msg.ci_low, equal_nan=True)

    def test_relabeling_invariance_order_preserving(self):
        cfg = SynthConfig(n_areas=6, users_per_area=10, messages_per_user=12,
                          label_rates=0.15, seed=2)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        g_d = corpus.dimension_graph("knowledge")
        base = delta_p(universe, g_d, corpus.locations, corpus.areas, runs=8, seed=5)

        def rename(u):
            return "x_" + u  # same prefix for all ids keeps the sort order

        loc2 = {rename(u): a for u, a in corpus.locations.items()}
        uni2 = graph_from_edges(
            {(rename(universe.users[s]), rename(universe.users[d])): int(w)
             for s, d, w in zip(universe.src, universe.dst, universe.weight)},
            tag="universe",
        )
        gd2 = graph_from_edges(
            {(rename(g_d.users[s]), rename(g_d.users[d])): int(w)
             for s, d, w in zip(g_d.src, g_d.dst, g_d.weight)},
            tag="knowledge",
        )
        renamed = delta_p(uni2, gd2, loc2, corpus.areas, runs=8, seed=5)
        np.testing.assert_allclose(base.p, renamed.p, equal_nan=True)
        np.testing.assert_allclose(base.delta, renamed.delta, equal_nan=True)

    def test_planted_coupling_matches_analytic_profile(self):
        cfg = SynthConfig(n_areas=12, users_per_area=15, messages_per_user=40,
                          label_rates=0.1, coupling={"knowledge": 1.5}, seed=17)
        corpus, universe, g_d, rep = corpus_delta(
            cfg, "knowledge", variant="message", runs=30, seed=23
        )
        bins = span_bins(universe, corpus.locations, corpus.areas, 5)
        from netdiv.geospan import area_distance_matrix

        codes = corpus.areas.codes()
        mat = area_distance_matrix(corpus.areas, codes)
        dnorm = mat / mat.max()
        n = len(corpus.table)
        rates = {d: corpus.label_counts[d] / n for d in cfg.dimensions}
        signatures = [(), ("knowledge",), ("support",), ("knowledge", "support")]

        def sig_prob(sig):
            p = 1.0
            for d in cfg.dimensions:
                p *= rates[d] if d in sig else 1.0 - rates[d]
            return p

        n_bins = bins.n_bins
        mass = np.zeros(n_bins)
        labeled_mass = np.zeros(n_bins)
        for a in range(cfg.n_areas):
            for sig in signatures:
                w = receiver_area_weights(cfg, dnorm, a, sig, {})
                q = w / w.sum() * sig_prob(sig) / cfg.n_areas
                idx = bins.assign(mat[a])
                for b in range(cfg.n_areas):
                    mass[idx[b]] += q[b]
                    if "knowledge" in sig:
                        labeled_mass[idx[b]] += q[b]
        analytic_p = labeled_mass / mass
        analytic_delta = analytic_p / rates["knowledge"] - 1.0
        ok = ~rep.undefined
        inside = (analytic_delta[ok] >= rep.ci_low[ok]) & (
            analytic_delta[ok] <= rep.ci_high[ok]
        )
        assert inside.sum() >= ok.sum() - 1
        # the planted positive coupling shows up as a rising profile
        assert analytic_delta[-1] > analytic_delta[0]
        assert rep.delta[-1] > rep.delta[0]

    def test_monotone_profiles_for_opposite_couplings(self):
        cfg = SynthConfig(n_areas=12, users_per_area=25, messages_per_user=150,
                          label_rates=0.1,
                          coupling={"knowledge": 1.0, "support": -1.0}, seed=4)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        bins = span_bins(universe, corpus.locations, corpus.areas, 5)
        up = delta_p(universe, corpus.dimension_graph("knowledge"),
                     corpus.locations, corpus.areas, runs=16, seed=8, bins=bins)
        down = delta_p(universe, corpus.dimension_graph("support"),
                       corpus.locations, corpus.areas, runs=16, seed=8, bins=bins)
        assert np.all(np.diff(up.delta) > 0)
        assert np.all(np.diff(down.delta) < 0)

    def test_mean_first_aggregation_point_estimate(self):
        cfg = SynthConfig(n_areas=8, users_per_area=10, messages_per_user=15,
                          label_rates=0.2, seed=6)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        g_d = corpus.dimension_graph("knowledge")
        args = (universe, g_d, corpus.locations, corpus.areas)
        per_run = delta_p(*args, runs=12, seed=3, ratio_aggregation="per_run")
        mean_first = delta_p(*args, runs=12, seed=3, ratio_aggregation="mean_first")
        ok = ~per_run.undefined
        np.testing.assert_allclose(
            mean_first.delta[ok],
            per_run.p[ok] / per_run.p_null_mean[ok] - 1.0,
            atol=1e-12,
        )
        # same nulls, same p; only the aggregation differs
        np.testing.assert_allclose(mean_first.p, per_run.p, equal_nan=True)

    def test_bootstrap_interval_smoke(self):
        cfg = SynthConfig(n_areas=8, users_per_area=10, messages_per_user=15,
                          label_rates=0.2, seed=9)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        g_d = corpus.dimension_graph("knowledge")
        rep = delta_p(universe, g_d, corpus.locations, corpus.areas,
                      runs=12, seed=3, ci_method="bootstrap")
        ok = ~rep.undefined
        assert np.all(np.isfinite(rep.ci_low[ok]))
        assert np.all(rep.ci_low[ok] <= rep.ci_high[ok])
        assert np.all(rep.delta[ok] >= -1.0)

    def test_interval_brackets_point_estimate(self):
        cfg = SynthConfig(n_areas=8, users_per_area=10, messages_per_user=15,
                          label_rates=0.2, seed=10)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        g_d = corpus.dimension_graph("knowledge")
        for method in ("spread", "sem"):
            rep = delta_p(universe, g_d, corpus.locations, corpus.areas,
                          runs=12, seed=3, ci_method=method)
            ok = ~rep.undefined
            assert np.all(rep.ci_low[ok] <= rep.delta[ok])
            assert np.all(rep.delta[ok] <= rep.ci_high[ok])

    def test_sem_interval_narrower_than_spread(self):
        cfg = SynthConfig(n_areas=8, users_per_area=10, messages_per_user=15,
                          label_rates=0.2, seed=6)
        corpus = generate_corpus(cfg)
        universe = build_graph(corpus.table, corpus.locations, 1)
        g_d = corpus.dimension_graph("knowledge")
        args = (universe, g_d, corpus.locations, corpus.areas)
        spread = delta_p(*args, runs=12, seed=3, ci_method="spread")
        sem = delta_p(*args, runs=12, seed=3, ci_method="sem")
        ok = ~spread.undefined
        assert np.all(
            (sem.ci_high - sem.ci_low)[ok] < (spread.ci_high - spread.ci_low)[ok]
        )
        np.testing.assert_allclose(spread.delta[ok], sem.delta[ok])
