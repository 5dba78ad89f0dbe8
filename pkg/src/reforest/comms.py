"""Proximity graph over drone positions and one-hop location messages."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

INBOX_SLOTS = 3

Location = tuple[float, float, float]


@dataclass(frozen=True)
class ProximityGraph:
    """Directed k-nearest-within-range adjacency.

    ``neighbors[i]`` lists ``(j, distance)`` pairs sorted by ascending
    distance, ties broken by the lower agent index.
    """

    neighbors: tuple[tuple[tuple[int, float], ...], ...]
    comm_range: float
    k: int

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def edges(self):
        for src, lst in enumerate(self.neighbors):
            for dst, dist in lst:
                yield src, dst, dist


def build_graph(positions: Sequence[Sequence[float]], comm_range: float = 200.0, k: int = 3) -> ProximityGraph:
    """Each agent's ``k`` closest other agents within ``comm_range``.

    Candidates come from a uniform hash with ``comm_range``-sized cells, so
    only the 27 surrounding cells are scanned per agent.
    """
    n = len(positions)
    if n < 1:
        raise ValueError("need at least one position")
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return ProximityGraph(tuple(() for _ in range(n)), comm_range, k)
    pts = [tuple(float(c) for c in p) for p in positions]
    cell = comm_range if comm_range > 0 else 1.0
    grid: dict[tuple[int, int, int], list[int]] = {}
    keys = []
    for i, (x, y, z) in enumerate(pts):
        key = (math.floor(x / cell), math.floor(y / cell), math.floor(z / cell))
        keys.append(key)
        grid.setdefault(key, []).append(i)
    r2 = comm_range * comm_range
    out = []
    for i, (x, y, z) in enumerate(pts):
        cx, cy, cz = keys[i]
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in grid.get((cx + dx, cy + dy, cz + dz), ()):
                        if j == i:
                            continue
                        px, py, pz = pts[j]
                        d2 = (px - x) ** 2 + (py - y) ** 2 + (pz - z) ** 2
                        if d2 <= r2:
                            found.append((d2, j))
        found.sort()
        out.append(tuple((j, math.sqrt(d2)) for d2, j in found[:k]))
    return ProximityGraph(tuple(out), comm_range, k)


def exchange(graph: ProximityGraph, memories: Sequence[Optional[Location]]) -> list[list[Optional[Location]]]:
    """Fill each receiver's inbox from its neighbors' memories, nearest first.

    Slot ``s`` of receiver ``i`` carries the memory of ``i``'s ``s``-th
    nearest neighbor, or ``None`` when that neighbor is missing or has
    nothing stored.
    """
    inboxes = []
    for lst in graph.neighbors:
        inbox: list[Optional[Location]] = [None] * INBOX_SLOTS
        for slot, (j, _) in enumerate(lst[:INBOX_SLOTS]):
            inbox[slot] = memories[j]
        inboxes.append(inbox)
    return inboxes


def save_to_memory(drone, save: int = 1):
    """Overwrite the drone's memory with its current position when ``save`` is 1."""
    if save != 1:
        return drone
    return replace(drone, memory=tuple(drone.position))


def write_edge_csv(handle, tick: int, graph: ProximityGraph) -> None:
    """Append one tick's edges as ``tick,src,dst,distance`` rows."""
    for src, dst, dist in graph.edges():
        handle.write(f"{tick},{src},{dst},{dist:.6f}\n")
