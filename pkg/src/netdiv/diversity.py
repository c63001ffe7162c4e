"""Entropy-based diversity of a user's communication, socially and spatially.

Social diversity is the normalized Shannon entropy of the share of messages a
user sends to each contact; spatial diversity is the normalized entropy of
the shares aggregated by the contacts' home areas. Proportions use out-edges
("messages sent") unless the undirected variant is requested. A user with a
single contact gets diversity 0 by convention since the ln(1) denominator is
degenerate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .errors import InputError
from .graphs import CommGraph
from .ingest import UserLocationMap


def contact_proportions(g: CommGraph, user: str) -> np.ndarray:
    """Share of the user's outgoing messages per out-neighbor (id order)."""
    try:
        _, weights = g.out_edges(user)
    except KeyError:
        raise ValueError(f"user {user!r} not in graph") from None
    if weights.size == 0:
        raise ValueError(f"user {user!r} has no out-edges")
    w = weights.astype(np.float64)
    return w / w.sum()


def _normalized_entropy(p: np.ndarray, denominator_count: int) -> float:
    if denominator_count < 2:
        return 0.0
    h = -float(np.sum(p * np.log(p)))
    return h / math.log(denominator_count)


def social_diversity(g: CommGraph, user: str) -> float:
    """Normalized entropy over individual contacts; 0 for a single contact."""
    p = contact_proportions(g, user)
    return _normalized_entropy(p, p.size)


def area_proportions(
    g: CommGraph, user: str, locations: UserLocationMap
) -> dict[str, float]:
    """Share of the user's outgoing messages per contact area; zero-mass
    areas are omitted."""
    neighbors, weights = g.out_edges(user)
    if not neighbors:
        raise ValueError(f"user {user!r} has no out-edges")
    totals: dict[str, float] = {}
    for n, w in zip(neighbors, weights.tolist()):
        area = locations.get(n)
        if area is None:
            raise ValueError(f"neighbor {n!r} has no location")
        totals[area] = totals.get(area, 0.0) + w
    grand = sum(totals.values())
    return {a: totals[a] / grand for a in sorted(totals)}


def spatial_diversity(
    g: CommGraph, user: str, locations: UserLocationMap, n_areas: int
) -> float:
    """Normalized entropy over contact areas, against ln(n_areas)."""
    if n_areas < 2:
        raise InputError("spatial diversity needs at least 2 areas")
    p = np.array(list(area_proportions(g, user, locations).values()))
    h = -float(np.sum(p * np.log(p)))
    return h / math.log(n_areas)


def area_diversity(
    g: CommGraph,
    locations: UserLocationMap,
    kind: Literal["social", "spatial"],
    n_areas: int | None = None,
    include_k1: bool = True,
) -> dict[str, float]:
    """Unweighted mean of per-user diversity over the users living in each
    area; areas with no scored user are omitted."""
    if kind not in ("social", "spatial"):
        raise InputError(f"unknown diversity kind: {kind}")
    if n_areas is None:
        n_areas = len(set(locations.values()))
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for user in g.users:
        neighbors, _ = g.out_edges(user)
        if not neighbors or (not include_k1 and len(neighbors) == 1):
            continue
        home = locations.get(user)
        if home is None:
            continue
        score = (
            social_diversity(g, user)
            if kind == "social"
            else spatial_diversity(g, user, locations, n_areas)
        )
        sums[home] = sums.get(home, 0.0) + score
        counts[home] = counts.get(home, 0) + 1
    return {a: sums[a] / counts[a] for a in sorted(sums)}


@dataclass
class DiversityTable:
    """Per-user and per-area diversity for one graph."""

    tag: str
    user_ids: list[str]
    k: np.ndarray
    d_social: np.ndarray
    d_spatial: np.ndarray
    area_ids: list[str]
    area_social: np.ndarray
    area_spatial: np.ndarray

    def area_social_map(self) -> dict[str, float]:
        return dict(zip(self.area_ids, self.area_social.tolist()))

    def area_spatial_map(self) -> dict[str, float]:
        return dict(zip(self.area_ids, self.area_spatial.tolist()))


def _segment_entropy(weights: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment (entropy, length) for contiguous weight segments."""
    sums = np.add.reduceat(weights, starts)
    seg_id = np.repeat(np.arange(starts.size), np.diff(np.append(starts, weights.size)))
    p = weights / sums[seg_id]
    plogp = np.add.reduceat(p * np.log(p), starts)
    lengths = np.diff(np.append(starts, weights.size))
    return -plogp, lengths


def compute_diversity(
    g: CommGraph,
    locations: UserLocationMap,
    n_areas: int,
    direction: Literal["out", "all"] = "out",
    include_k1: bool = True,
) -> DiversityTable:
    """Vectorized diversity table for every user with at least one contact.

    ``direction='all'`` folds each edge into both endpoints' proportion
    vectors (weights of reciprocal edges add), for sensitivity analysis only.
    """
    if n_areas < 2:
        raise InputError("spatial diversity needs at least 2 areas")
    if direction not in ("out", "all"):
        raise InputError(f"unknown direction: {direction}")

    if direction == "out":
        src, dst, w = g.src, g.dst, g.weight.astype(np.float64)
    else:
        both_src = np.concatenate([g.src, g.dst])
        both_dst = np.concatenate([g.dst, g.src])
        both_w = np.concatenate([g.weight, g.weight]).astype(np.float64)
        key = both_src * g.num_nodes + both_dst
        order = np.argsort(key, kind="stable")
        key, both_w = key[order], both_w[order]
        uniq, starts = np.unique(key, return_index=True)
        w = np.add.reduceat(both_w, starts)
        src = (uniq // g.num_nodes).astype(np.int64)
        dst = (uniq % g.num_nodes).astype(np.int64)

    if src.size == 0:
        return DiversityTable(g.tag, [], np.empty(0, dtype=np.int64),
                              np.empty(0), np.empty(0), [],
                              np.empty(0), np.empty(0))

    starts = np.flatnonzero(np.r_[True, src[1:] != src[:-1]])
    active = src[starts]
    h_social, k = _segment_entropy(w, starts)
    log_k = np.where(k > 1, np.log(np.maximum(k, 2)), 1.0)
    d_social = np.where(k > 1, h_social / log_k, 0.0)

    area_codes = sorted(set(locations.values()))
    area_pos = {a: i for i, a in enumerate(area_codes)}
    node_area = np.array([area_pos[locations[u]] for u in g.users], dtype=np.int64)

    pair_key = src * len(area_codes) + node_area[dst]
    order = np.argsort(pair_key, kind="stable")
    pk, pw = pair_key[order], w[order]
    uniq_starts = np.flatnonzero(np.r_[True, pk[1:] != pk[:-1]])
    agg_w = np.add.reduceat(pw, uniq_starts)
    agg_src = pk[uniq_starts] // len(area_codes)
    seg2 = np.flatnonzero(np.r_[True, agg_src[1:] != agg_src[:-1]])
    h_spatial, _ = _segment_entropy(agg_w, seg2)
    d_spatial = h_spatial / math.log(n_areas)

    user_ids = [g.users[i] for i in active.tolist()]

    home = node_area[active]
    score_mask = np.ones(active.size, dtype=bool)
    if not include_k1:
        score_mask = k > 1
    a_sums_soc = np.bincount(home[score_mask], weights=d_social[score_mask],
                             minlength=len(area_codes))
    a_sums_spa = np.bincount(home[score_mask], weights=d_spatial[score_mask],
                             minlength=len(area_codes))
    a_counts = np.bincount(home[score_mask], minlength=len(area_codes))
    present = a_counts > 0
    area_ids = [a for a, p in zip(area_codes, present.tolist()) if p]

    return DiversityTable(
        tag=g.tag,
        user_ids=user_ids,
        k=k.astype(np.int64),
        d_social=d_social,
        d_spatial=d_spatial,
        area_ids=area_ids,
        area_social=a_sums_soc[present] / a_counts[present],
        area_spatial=a_sums_spa[present] / a_counts[present],
    )


def write_diversity_csv(tables: Iterable[DiversityTable], path: str) -> None:
    """Rows: graph_tag, level (user|area), id, d_social, d_spatial, k."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["graph_tag", "level", "id", "d_social", "d_spatial", "k"])
        for t in tables:
            for i, user in enumerate(t.user_ids):
                writer.writerow(
                    [t.tag, "user", user, repr(float(t.d_social[i])),
                     repr(float(t.d_spatial[i])), int(t.k[i])]
                )
            for i, area in enumerate(t.area_ids):
                writer.writerow(
                    [t.tag, "area", area, repr(float(t.area_social[i])),
                     repr(float(t.area_spatial[i])), ""]
                )


def read_area_diversity_csv(path: str) -> dict[str, dict[str, tuple[float, float]]]:
    """Area-level rows of a diversity CSV: tag -> area -> (social, spatial)."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            if row["level"] != "area":
                continue
            out.setdefault(row["graph_tag"], {})[row["id"]] = (
                float(row["d_social"]),
                float(row["d_spatial"]),
            )
    return out
