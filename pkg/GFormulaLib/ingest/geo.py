"""Geographic clustering of households by great-circle distance."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
from scipy.cluster import hierarchy
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import squareform

from GFormulaLib.models.data_classes import Linkage
from GFormulaLib.models.errors import DataValidationError, EmptyDatasetError
from GFormulaLib.utils.logging import get_logger

if TYPE_CHECKING:
    from collections.abc import Sequence

    from loguru import Logger
    from numpy.typing import ArrayLike, NDArray

    from GFormulaLib.models.data_classes import HouseholdPoint

logger: Logger = get_logger(__name__)

EARTH_RADIUS_KM = 6371.0088


def haversine_km(lat1: ArrayLike, lon1: ArrayLike, lat2: ArrayLike, lon2: ArrayLike) -> NDArray[np.float64]:
    """Great-circle distance in kilometres on a sphere of mean Earth radius; broadcasts."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    d_phi = phi2 - phi1
    d_lambda = np.radians(lon2) - np.radians(lon1)
    a = np.sin(d_phi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(d_lambda / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _unit_vectors(lat: NDArray[np.float64], lon: NDArray[np.float64]) -> NDArray[np.float64]:
    phi, lam = np.radians(lat), np.radians(lon)
    return np.column_stack((np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)))


def _single_linkage(lat: NDArray[np.float64], lon: NDArray[np.float64], threshold_km: float) -> NDArray[np.int64]:
    """Connected components of the graph joining sites at most ``threshold_km`` apart."""
    if threshold_km >= np.pi * EARTH_RADIUS_KM:
        return np.zeros(lat.size, dtype=np.int64)
    # great-circle distance t corresponds to chord 2 sin(t / 2R) on the unit sphere
    chord = 2.0 * np.sin(threshold_km / (2.0 * EARTH_RADIUS_KM))
    tree = cKDTree(_unit_vectors(lat, lon))
    pairs = tree.query_pairs(r=chord * (1.0 + 1e-12), output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(lat.size, lat.size))
    _, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64)


def _complete_linkage(lat: NDArray[np.float64], lon: NDArray[np.float64], threshold_km: float) -> NDArray[np.int64]:
    """Complete-linkage tree cut so every pair within a cluster is at most ``threshold_km`` apart."""
    if lat.size == 1:
        return np.zeros(1, dtype=np.int64)
    distances = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    np.fill_diagonal(distances, 0.0)
    tree = hierarchy.linkage(squareform(distances, checks=False), method="complete")
    return (hierarchy.fcluster(tree, t=threshold_km, criterion="distance") - 1).astype(np.int64)


def cluster_households(
    points: Sequence[HouseholdPoint],
    threshold_km: float,
    linkage: Linkage | str = Linkage.SINGLE,
) -> dict[str, int]:
    """
    Groups households into clusters by agglomerative clustering on haversine distance.

    Households sharing exact coordinates are collapsed to one site first. Single linkage
    joins everything connected by a chain of steps no longer than the threshold (computed
    as graph components with a KD-tree, so memory stays linear); complete linkage instead
    bounds the diameter of every cluster. Households are processed in household_id order
    and clusters are numbered 0, 1, ... by their smallest household_id, so labels do not
    depend on the input order.

    :param points: Households with coordinates.
    :param threshold_km: Cut height in kilometres, positive.
    :param linkage: ``single`` (default) or ``complete``.
    :return: Mapping household_id -> cluster label.
    :raises DataValidationError: If the threshold is not positive or ids repeat.
    :raises EmptyDatasetError: If there are no households.
    """
    if not threshold_km > 0.0:
        raise DataValidationError(f"Clustering threshold must be positive, got {threshold_km}")
    if not points:
        raise EmptyDatasetError("No households to cluster")
    method = Linkage(linkage)
    ordered = sorted(points, key=lambda p: p.household_id)
    ids = [p.household_id for p in ordered]
    if len(set(ids)) != len(ids):
        raise DataValidationError("Household ids must be unique")

    coords = np.array([(p.lat, p.lon) for p in ordered], dtype=float)
    sites, site_of_point = np.unique(coords, axis=0, return_inverse=True)
    site_of_point = site_of_point.ravel()
    lat, lon = sites[:, 0], sites[:, 1]
    if method is Linkage.SINGLE:
        site_labels = _single_linkage(lat, lon, threshold_km)
    else:
        site_labels = _complete_linkage(lat, lon, threshold_km)
    raw = site_labels[site_of_point]

    # renumber by first appearance in id order
    relabel: dict[int, int] = {}
    assignment: dict[str, int] = {}
    for household_id, label in zip(ids, raw, strict=True):
        assignment[household_id] = relabel.setdefault(int(label), len(relabel))
    logger.info(f"{method.value} linkage at {threshold_km:g} km: {len(points)} households, {len(sites)} sites, {len(relabel)} clusters")
    return assignment
