"""Synthetic corpora with known ground truth for every pipeline stage.

Areas sit on a kilometer-scale grid, every area holds the same number of
users, and each user sends a fixed number of messages. Label sets are
planted with exact per-dimension counts and scores are drawn from two
separated uniform bands, so percentile thresholding at the corpus' exact
alpha reproduces the planted labels with no boundary flakiness. Receiver
choice can be modulated by distance, per dimension, to plant geographic
coupling, and per (dimension, area) locality spreads induce area-level
diversity variation for planted outcome regressions.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .diversity import compute_diversity
from .errors import InputError
from .geospan import area_distance_matrix
from .graphs import CommGraph, _graph_from_pairs
from .ingest import AreaInfo, AreaTable, MessageTable, UserLocationMap

DISTANCE_OFFSET = 0.05  # keeps power-law weights finite at zero distance


@dataclass
class SynthConfig:
    n_areas: int = 16
    users_per_area: int = 25
    messages_per_user: int = 20
    dimensions: tuple[str, ...] = ("knowledge", "support")
    label_rates: float | Mapping[str, float] = 0.01
    coupling: Mapping[str, float] = field(default_factory=dict)
    locality: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    base_locality: float = 0.0
    grid_spacing_km: float = 400.0
    outcome_intercept: float | None = None
    outcome_betas: Mapping[str, float] = field(default_factory=dict)
    outcome_noise_sd: float = 0.0
    seed: int = 0

    def rate(self, dim: str) -> float:
        if isinstance(self.label_rates, Mapping):
            try:
                return float(self.label_rates[dim])
            except KeyError:
                raise InputError(f"no label rate for dimension '{dim}'") from None
        return float(self.label_rates)

    def validate(self) -> None:
        if self.n_areas < 2:
            raise InputError("need at least 2 areas")
        if self.users_per_area < 1 or self.n_areas * self.users_per_area < 2:
            raise InputError("need at least 2 users overall")
        if self.messages_per_user < 1:
            raise InputError("infeasible config: expected messages per user < 1")
        for d in self.dimensions:
            if not 0.0 < self.rate(d) < 1.0:
                raise InputError(f"label rate for '{d}' must be in (0, 1)")
        if self.outcome_noise_sd < 0:
            raise InputError("outcome noise sd must be >= 0")
        for d in self.outcome_betas:
            if d not in self.dimensions:
                raise InputError(f"outcome beta for unknown dimension '{d}'")


def zero_distance_heavy_config(**overrides) -> SynthConfig:
    """Preset whose edges concentrate heavily at zero distance."""
    params = dict(base_locality=6.0)
    params.update(overrides)
    return SynthConfig(**params)


@dataclass
class GeneratedCorpus:
    config: SynthConfig
    table: MessageTable
    labels: np.ndarray  # planted bool matrix (n, d), order of table.dimensions
    locations: UserLocationMap
    areas: AreaTable
    exact_alpha: dict[str, float]
    label_counts: dict[str, int]
    planted_features: dict[str, dict[str, float]]  # dim -> area -> spatial diversity

    def dimension_graph(self, dim: str) -> CommGraph:
        """Graph over the planted label set for one dimension."""
        j = self.table.dim_index(dim)
        mask = self.labels[:, j]
        return _graph_from_pairs(
            dim, 1, self.table.sender[mask], self.table.receiver[mask], self.table.users
        )


def _grid_area_table(cfg: SynthConfig) -> tuple[AreaTable, list[str]]:
    side = math.ceil(math.sqrt(cfg.n_areas))
    deg = cfg.grid_spacing_km / 111.1949  # km per degree of latitude
    codes = [f"A{i:02d}" for i in range(cfg.n_areas)]
    areas = {}
    density = np.linspace(0.2, 0.8, cfg.n_areas)
    gdp = np.linspace(0.5, 1.5, cfg.n_areas)
    # populations vary while user counts stay equal, so the penetration fit
    # is non-degenerate and its residuals are exactly zero
    for i, code in enumerate(codes):
        row, col = divmod(i, side)
        areas[code] = AreaInfo(
            population=float(cfg.users_per_area * 1000 * (i + 1)),
            gdp_per_capita=float(gdp[i]),
            density=float(density[i]),
            centroid_lat=float((row - side / 2) * deg),
            centroid_lon=float((col - side / 2) * deg),
            user_count=cfg.users_per_area,
        )
    return AreaTable(areas), codes


def receiver_area_weights(
    cfg: SynthConfig,
    dnorm: np.ndarray,
    sender_area: int,
    signature: tuple[str, ...],
    locality_exponents: Mapping[str, np.ndarray],
) -> np.ndarray:
    """Unnormalized probability of each receiver area for a message sent
    from ``sender_area`` carrying the given label set."""
    n_areas = dnorm.shape[0]
    row = dnorm[sender_area]
    eligible = np.full(n_areas, float(cfg.users_per_area))
    eligible[sender_area] -= 1.0
    w = eligible * np.exp(-cfg.base_locality * row)
    for d in signature:
        gamma = cfg.coupling.get(d)
        if gamma:
            w = w * (DISTANCE_OFFSET + row) ** gamma
        lam = locality_exponents.get(d)
        if lam is not None:
            w = w * np.exp(-lam[sender_area] * row)
    return w


def generate_corpus(cfg: SynthConfig) -> GeneratedCorpus:
    """Deterministic corpus generation; identical seeds give identical
    corpora byte for byte."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    areas, codes = _grid_area_table(cfg)
    n_users = cfg.n_areas * cfg.users_per_area
    upa = cfg.users_per_area
    users = [f"u{i:06d}" for i in range(n_users)]
    user_area_idx = np.arange(n_users) // upa
    locations = {users[i]: codes[user_area_idx[i]] for i in range(n_users)}

    n = n_users * cfg.messages_per_user
    dims = tuple(cfg.dimensions)
    n_dims = len(dims)

    # planted labels: exact counts so percentile thresholding is exact
    labels = np.zeros((n, n_dims), dtype=bool)
    label_counts = {}
    exact_alpha = {}
    for j, d in enumerate(dims):
        count = min(max(int(round(cfg.rate(d) * n)), 1), n - 1)
        labels[rng.choice(n, size=count, replace=False), j] = True
        label_counts[d] = count
        exact_alpha[d] = (n - count + 1) / n

    # per-(dimension, area) locality exponents for planted outcome spread
    locality_exponents: dict[str, np.ndarray] = {}
    for d in dims:
        if d in cfg.locality:
            lo, hi = cfg.locality[d]
            locality_exponents[d] = rng.permutation(
                np.linspace(lo, hi, cfg.n_areas)
            )

    mat = area_distance_matrix(areas, codes)
    dnorm = mat / mat.max()

    senders = np.repeat(np.arange(n_users, dtype=np.int64), cfg.messages_per_user)
    sender_area = user_area_idx[senders]

    sig_id = labels @ (1 << np.arange(n_dims, dtype=np.int64))
    group_key = sender_area * (1 << n_dims) + sig_id
    order = np.argsort(group_key, kind="stable")
    receivers = np.empty(n, dtype=np.int64)
    boundaries = np.flatnonzero(
        np.r_[True, group_key[order][1:] != group_key[order][:-1]]
    )
    starts = list(boundaries) + [n]
    for gi in range(len(boundaries)):
        members = order[starts[gi] : starts[gi + 1]]
        a = int(sender_area[members[0]])
        sig = tuple(d for j, d in enumerate(dims) if labels[members[0], j])
        w = receiver_area_weights(cfg, dnorm, a, sig, locality_exponents)
        total = w.sum()
        if total <= 0:
            raise InputError("receiver weights vanished; config is infeasible")
        rec_area = rng.choice(cfg.n_areas, size=members.size, p=w / total)
        slots = np.empty(members.size, dtype=np.int64)
        same = rec_area == a
        if same.any():
            sender_slot = senders[members[same]] % upa
            draw = rng.integers(0, upa - 1, size=int(same.sum()))
            slots[same] = draw + (draw >= sender_slot)
        if (~same).any():
            slots[~same] = rng.integers(0, upa, size=int((~same).sum()))
        receivers[members] = rec_area * upa + slots

    # two separated score bands around 0.5; threshold lands at the band gap
    u = rng.uniform(size=(n, n_dims))
    scores = np.where(labels, 0.55 + 0.45 * u, 0.45 * u)

    table = MessageTable(
        users=users,
        sender=senders,
        receiver=receivers,
        timestamp=1_500_000_000.0 + np.arange(n, dtype=np.float64),
        dimensions=dims,
        scores=scores,
    )

    corpus = GeneratedCorpus(
        config=cfg,
        table=table,
        labels=labels,
        locations=locations,
        areas=areas,
        exact_alpha=exact_alpha,
        label_counts=label_counts,
        planted_features={},
    )

    if cfg.outcome_betas:
        if cfg.outcome_intercept is None:
            raise InputError("outcome_betas require outcome_intercept")
        y = np.full(cfg.n_areas, float(cfg.outcome_intercept))
        for d, beta in cfg.outcome_betas.items():
            g_d = corpus.dimension_graph(d)
            div = compute_diversity(g_d, locations, n_areas=cfg.n_areas)
            spatial = div.area_spatial_map()
            missing = [c for c in codes if c not in spatial]
            if missing:
                raise InputError(
                    f"dimension '{d}' has no scored users in areas {missing}; "
                    "increase users or messages per user"
                )
            corpus.planted_features[d] = spatial
            y = y + beta * np.array([spatial[c] for c in codes])
        if cfg.outcome_noise_sd > 0:
            y = y + rng.normal(0.0, cfg.outcome_noise_sd, size=cfg.n_areas)
        for i, code in enumerate(codes):
            areas[code].gdp_per_capita = float(y[i])

    return corpus


def write_corpus(
    corpus: GeneratedCorpus, out_dir: str, fmt: str = "csv", activity_count: int = 10
) -> dict[str, str]:
    """Emit the corpus in the same file formats the ingest stage consumes."""
    os.makedirs(out_dir, exist_ok=True)
    table = corpus.table
    paths = {
        "messages": os.path.join(
            out_dir, "messages.jsonl" if fmt == "jsonl" else "messages.csv"
        ),
        "activity": os.path.join(out_dir, "activity.csv"),
        "areas": os.path.join(out_dir, "areas.csv"),
    }
    dim_cols = list(table.dimensions)
    if fmt == "jsonl":
        with open(paths["messages"], "w", encoding="utf-8") as fh:
            for i in range(len(table)):
                row = {
                    "message_id": f"m{i:07d}",
                    "sender": table.users[table.sender[i]],
                    "receiver": table.users[table.receiver[i]],
                    "timestamp": float(table.timestamp[i]),
                }
                for j, d in enumerate(dim_cols):
                    row[d] = float(table.scores[i, j])
                fh.write(json.dumps(row) + "\n")
    else:
        with open(paths["messages"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["message_id", "sender", "receiver", "timestamp"] + dim_cols)
            for i in range(len(table)):
                writer.writerow(
                    [f"m{i:07d}", table.users[table.sender[i]],
                     table.users[table.receiver[i]], repr(float(table.timestamp[i]))]
                    + [repr(float(table.scores[i, j])) for j in range(len(dim_cols))]
                )
    with open(paths["activity"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "area", "count"])
        for user in sorted(corpus.locations):
            writer.writerow([user, corpus.locations[user], activity_count])
    from .ingest import write_area_csv

    write_area_csv(corpus.areas, paths["areas"])
    return paths
