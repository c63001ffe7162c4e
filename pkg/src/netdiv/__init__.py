"""Communication-graph diversity analytics.

Builds directed weighted communication graphs from scored message logs,
extracts dimension-specific subgraphs by percentile thresholding, computes
entropy-based social and spatial diversity per user and area, contrasts the
geographic span of dimension ties against a location-reshuffling null model,
and links area-level diversity to an economic outcome with OLS diagnostics.
"""

__version__ = "0.1.0"
