import numpy as np
import pytest

from netdiv.ingest import AreaInfo, AreaTable, MessageRecord


def record(i, sender, receiver, ts=0.0, **scores):
    return MessageRecord(f"m{i}", sender, receiver, ts, dict(scores))


def square_area_table(codes, spacing_deg=3.0, population=None):
    """Areas on a latitude/longitude grid with simple metadata."""
    side = int(np.ceil(np.sqrt(len(codes))))
    areas = {}
    for i, code in enumerate(codes):
        row, col = divmod(i, side)
        areas[code] = AreaInfo(
            population=float(population[i]) if population is not None else 1e6 * (i + 1),
            gdp_per_capita=1.0 + 0.1 * i,
            density=0.1 * (i + 1),
            centroid_lat=row * spacing_deg,
            centroid_lon=col * spacing_deg,
        )
    return AreaTable(areas)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
