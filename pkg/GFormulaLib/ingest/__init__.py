"""Individual-level ingestion, geographic clustering and aggregation to cluster records."""

from .aggregate import AggregationResult, aggregate_clusters, summarize_clusters
from .geo import cluster_households, haversine_km
from .readers import read_cluster_csv, read_individuals_csv

__all__ = [
    "AggregationResult",
    "aggregate_clusters",
    "cluster_households",
    "haversine_km",
    "read_cluster_csv",
    "read_individuals_csv",
    "summarize_clusters",
]
