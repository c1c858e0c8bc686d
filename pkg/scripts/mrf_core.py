"""Discrete energy minimization: max-flow/min-cut, alpha-expansion and chain DP.

Costs use a saturating infinity sentinel ``INF`` so that occluded cameras or
inadmissible candidates can be expressed as ordinary table entries. Sums that
would exceed the sentinel are clamped back to it.

Example::

    problem = MultiLabelProblem(unary, edges=[(0, 1), (1, 2)], costs=potts_costs(3))
    result = alpha_expand(problem)
    print(result.labels, result.energy)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import maxflow
import numpy as np


LOGGER = logging.getLogger(__name__)

INF = 1e30
SOURCE = -1
SINK = -2


class InfeasibleProblemError(RuntimeError):
    """Signal that no labeling of the problem has finite energy."""


def saturate(values: np.ndarray | float) -> np.ndarray:
    return np.minimum(values, INF)


def weighted_costs(weights: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Multiply costs by non-negative weights without letting INF lose its meaning."""
    weights = np.asarray(weights, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    product = weights * np.minimum(costs, INF)
    infinite = (costs >= INF) & (weights > 0)
    return np.where(infinite, INF, np.minimum(product, INF))


def potts_costs(label_count: int) -> np.ndarray:
    return 1.0 - np.eye(label_count)


# ---------------------------------------------------------------------------
# Max-flow / min-cut


@dataclass(frozen=True)
class Arc:
    tail: int
    head: int
    capacity: float
    reverse_capacity: float = 0.0


@dataclass
class FlowGraph:
    """Capacitated graph over ``node_count`` nodes plus the SOURCE/SINK terminals."""

    node_count: int
    arcs: List[Arc] = field(default_factory=list)

    def add_arc(self, tail: int, head: int, capacity: float, reverse_capacity: float = 0.0) -> None:
        for endpoint in (tail, head):
            if endpoint not in (SOURCE, SINK) and not 0 <= endpoint < self.node_count:
                raise ValueError(f"Arc endpoint {endpoint} outside 0..{self.node_count - 1}")
        if tail == head:
            raise ValueError(f"Self-loop on node {tail}")
        if capacity < 0 or reverse_capacity < 0:
            raise ValueError(f"Negative capacity on arc {tail}->{head}")
        self.arcs.append(Arc(tail, head, float(capacity), float(reverse_capacity)))

    def cut_capacity(self, sides: Sequence[int]) -> float:
        """Capacity of the cut where ``sides[v]`` is 0 for source side, 1 for sink side."""

        def side(node: int) -> int:
            if node == SOURCE:
                return 0
            if node == SINK:
                return 1
            return int(sides[node])

        total = 0.0
        for arc in self.arcs:
            tail_side, head_side = side(arc.tail), side(arc.head)
            if tail_side == 0 and head_side == 1:
                total += arc.capacity
            elif tail_side == 1 and head_side == 0:
                total += arc.reverse_capacity
        return total


def max_flow(graph: FlowGraph) -> Tuple[float, np.ndarray]:
    """Return the max-flow value and the min-cut side (0 source, 1 sink) per node.

    An arc joining the two terminals directly contributes its capacity to the
    flow and belongs to every cut.
    """
    constant = 0.0
    if graph.node_count == 0:
        for arc in graph.arcs:
            constant += _terminal_arc_flow(arc)
        return constant, np.zeros(0, dtype=np.int8)

    flow_graph = maxflow.GraphFloat()
    flow_graph.add_nodes(graph.node_count)
    for arc in graph.arcs:
        tail, head = arc.tail, arc.head
        if tail < 0 and head < 0:
            constant += _terminal_arc_flow(arc)
        elif tail == SOURCE:
            flow_graph.add_tedge(head, arc.capacity, 0.0)
        elif tail == SINK:
            flow_graph.add_tedge(head, 0.0, arc.reverse_capacity)
        elif head == SOURCE:
            flow_graph.add_tedge(tail, arc.reverse_capacity, 0.0)
        elif head == SINK:
            flow_graph.add_tedge(tail, 0.0, arc.capacity)
        else:
            flow_graph.add_edge(tail, head, arc.capacity, arc.reverse_capacity)

    value = float(flow_graph.maxflow()) + constant
    sink_side = flow_graph.get_grid_segments(np.arange(graph.node_count))
    return value, np.asarray(sink_side, dtype=np.int8)


def _terminal_arc_flow(arc: Arc) -> float:
    if arc.tail == SOURCE and arc.head == SINK:
        return arc.capacity
    if arc.tail == SINK and arc.head == SOURCE:
        return arc.reverse_capacity
    return 0.0


# ---------------------------------------------------------------------------
# Multi-label problems


@dataclass
class MultiLabelProblem:
    """Pairwise MRF: ``sum unary[v, l_v] + sum w_e * V_e(l_i, l_j)``.

    ``costs`` is either one L×L table shared by all edges or an E×L×L stack.
    Inadmissible labels (``admissible[v, l]`` False) cost INF.
    """

    unary: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    costs: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    admissible: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.unary = saturate(np.atleast_2d(np.asarray(self.unary, dtype=np.float64)))
        if np.any(self.unary < 0) or np.any(np.isnan(self.unary)):
            raise ValueError("Unary costs must be non-negative")
        node_count, label_count = self.unary.shape
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edge_count = len(self.edges)
        if edge_count and (self.edges.min() < 0 or self.edges.max() >= node_count):
            raise ValueError("Edge endpoint outside node range")
        if self.costs is None:
            self.costs = potts_costs(label_count)
        self.costs = saturate(np.asarray(self.costs, dtype=np.float64))
        if self.costs.shape not in ((label_count, label_count), (edge_count, label_count, label_count)):
            raise ValueError(f"Pairwise cost table has shape {self.costs.shape}, expected L×L or E×L×L")
        if np.any(self.costs < 0):
            raise ValueError("Pairwise costs must be non-negative")
        if self.weights is None:
            self.weights = np.ones(edge_count)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(edge_count)
        if np.any(self.weights < 0):
            raise ValueError("Edge weights must be non-negative")
        if self.admissible is None:
            self.admissible = np.ones((node_count, label_count), dtype=bool)
        self.admissible = np.asarray(self.admissible, dtype=bool).reshape(node_count, label_count)

    @property
    def node_count(self) -> int:
        return self.unary.shape[0]

    @property
    def label_count(self) -> int:
        return self.unary.shape[1]

    def effective_unary(self) -> np.ndarray:
        return np.where(self.admissible, self.unary, INF)

    def pair_costs(self, labels_i: np.ndarray, labels_j: np.ndarray) -> np.ndarray:
        """Weighted pairwise cost per edge for the given endpoint labels."""
        if self.costs.ndim == 2:
            raw = self.costs[labels_i, labels_j]
        else:
            raw = self.costs[np.arange(len(self.edges)), labels_i, labels_j]
        return weighted_costs(self.weights, raw)

    def energy(self, labels: Sequence[int]) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (self.node_count,):
            raise ValueError(f"Labeling has shape {labels.shape}, expected ({self.node_count},)")
        total = self.effective_unary()[np.arange(self.node_count), labels].sum()
        if len(self.edges):
            total += self.pair_costs(labels[self.edges[:, 0]], labels[self.edges[:, 1]]).sum()
        return float(saturate(total))

    def energy_key(self, labels: Sequence[int]) -> Tuple[int, float]:
        """Infinite term count and finite remainder, compared lexicographically.

        Expansion moves use this instead of the saturated energy so that a
        move removing some but not all INF terms still counts as progress.
        """
        labels = np.asarray(labels, dtype=np.int64)
        terms = self.effective_unary()[np.arange(self.node_count), labels]
        if len(self.edges):
            terms = np.concatenate([terms, self.pair_costs(labels[self.edges[:, 0]], labels[self.edges[:, 1]])])
        infinite = terms >= INF
        return int(infinite.sum()), float(terms[~infinite].sum())

    def is_metric(self) -> bool:
        tables = self.costs.reshape(-1, self.label_count, self.label_count)
        for table in tables:
            if not np.allclose(table, table.T) or np.any(np.diag(table) != 0):
                return False
            bound = saturate(table[:, :, None] + table[None, :, :])
            if np.any(table[:, None, :] > bound + 1e-9):
                return False
        return True


@dataclass
class ExpansionResult:
    labels: np.ndarray
    energy: float
    sweep_energies: List[float]
    truncated_terms: int = 0


def alpha_expand(
    problem: MultiLabelProblem,
    initial: Optional[Sequence[int]] = None,
    max_sweeps: int = 10,
) -> ExpansionResult:
    """Minimize a multi-label energy with expansion moves solved by graph cuts.

    Labels are visited in ascending order; sweeps stop once a full pass makes
    no move or after ``max_sweeps``. A move is kept only if the energy strictly
    drops, so ``sweep_energies`` is non-increasing.
    """
    if max_sweeps < 1:
        raise ValueError(f"max_sweeps must be >= 1, got {max_sweeps}")
    empty = ~problem.admissible.any(axis=1)
    if np.any(empty):
        raise InfeasibleProblemError(
            f"Node {int(np.flatnonzero(empty)[0])} has no admissible label ({int(empty.sum())} such nodes)"
        )

    labels = np.zeros(problem.node_count, dtype=np.int64) if initial is None else np.array(initial, dtype=np.int64)
    if labels.shape != (problem.node_count,) or (labels.size and (labels.min() < 0 or labels.max() >= problem.label_count)):
        raise ValueError("Initial labeling does not match the problem")
    key = problem.energy_key(labels)
    energy = problem.energy(labels)
    sweep_energies = [energy]
    truncated = 0

    for sweep in range(max_sweeps):
        improved = False
        for alpha in range(problem.label_count):
            proposal, cut_truncations = _expansion_move(problem, labels, alpha)
            truncated += cut_truncations
            candidate = problem.energy_key(proposal)
            if _improves(candidate, key):
                labels, key = proposal, candidate
                improved = True
        energy = problem.energy(labels)
        sweep_energies.append(energy)
        LOGGER.debug("alpha-expansion sweep %d: energy %.6g", sweep + 1, energy)
        if not improved:
            break

    if truncated:
        LOGGER.debug("alpha-expansion truncated %d non-submodular pair terms", truncated)
    return ExpansionResult(labels=labels, energy=energy, sweep_energies=sweep_energies, truncated_terms=truncated)


def _improves(candidate: Tuple[int, float], current: Tuple[int, float]) -> bool:
    if candidate[0] != current[0]:
        return candidate[0] < current[0]
    return candidate[1] < current[1] - 1e-12 * max(1.0, abs(current[1]))


def _expansion_move(problem: MultiLabelProblem, labels: np.ndarray, alpha: int) -> Tuple[np.ndarray, int]:
    """Best labeling reachable by letting any subset of nodes switch to ``alpha``.

    Binary variable x_v = 1 means node v takes ``alpha``. INF entries are
    replaced by a finite bound larger than any finite energy of the move so the
    cut stays numerically exact.
    """
    node_count = problem.node_count
    nodes = np.arange(node_count)
    unary = problem.effective_unary()
    keep_cost = unary[nodes, labels]
    switch_cost = unary[:, alpha].copy()

    terms = [keep_cost, switch_cost]
    if len(problem.edges):
        i, j = problem.edges[:, 0], problem.edges[:, 1]
        alpha_i = np.full(len(i), alpha)
        e00 = problem.pair_costs(labels[i], labels[j])
        e01 = problem.pair_costs(labels[i], alpha_i)
        e10 = problem.pair_costs(alpha_i, labels[j])
        e11 = problem.pair_costs(alpha_i, alpha_i)
        terms.extend([e00, e01, e10, e11])

    finite_total = sum(float(term[term < INF].sum()) for term in terms)
    bound = 1.0 + 2.0 * finite_total

    def bounded(values: np.ndarray) -> np.ndarray:
        return np.where(values >= INF, bound, values)

    cost0 = bounded(keep_cost)
    cost1 = bounded(switch_cost)
    truncated = 0
    pair_capacity = np.zeros(0)
    if len(problem.edges):
        e00, e01, e10, e11 = (bounded(term) for term in terms[2:])
        # E(xi,xj) = e00 + (e10-e00) xi + (e11-e10) xj + (e01+e10-e00-e11)(1-xi) xj
        np.add.at(cost1, i, e10 - e00)
        np.add.at(cost1, j, e11 - e10)
        pair_capacity = e01 + e10 - e00 - e11
        negative = pair_capacity < -1e-9 * bound
        truncated = int(negative.sum())
        pair_capacity = np.maximum(pair_capacity, 0.0)

    shift = np.minimum(cost0, cost1)
    graph = maxflow.GraphFloat()
    graph.add_nodes(node_count)
    graph.add_grid_tedges(nodes, cost1 - shift, cost0 - shift)
    for edge in np.flatnonzero(pair_capacity > 0):
        graph.add_edge(int(i[edge]), int(j[edge]), float(pair_capacity[edge]), 0.0)
    graph.maxflow()
    switch = np.asarray(graph.get_grid_segments(nodes), dtype=bool)
    return np.where(switch, alpha, labels), truncated


# ---------------------------------------------------------------------------
# Chains


@dataclass
class ChainProblem:
    """Chain energy ``sum U_k(s_k) + sum P_k(s_k, s_k+1)`` over per-position candidates.

    ``pairwise[k]`` has shape (len(unaries[k]), len(unaries[k+1])). ``keys``
    optionally names the candidates (e.g. sample ids) for the union-label
    encoding used by alpha-expansion.
    """

    unaries: List[np.ndarray]
    pairwise: List[np.ndarray]
    keys: Optional[List[np.ndarray]] = None

    def __post_init__(self) -> None:
        if not self.unaries:
            raise ValueError("Chain must have at least one position")
        self.unaries = [saturate(np.asarray(u, dtype=np.float64).reshape(-1)) for u in self.unaries]
        self.pairwise = [saturate(np.asarray(p, dtype=np.float64)) for p in self.pairwise]
        if len(self.pairwise) != len(self.unaries) - 1:
            raise ValueError(f"Expected {len(self.unaries) - 1} pairwise tables, got {len(self.pairwise)}")
        for position, unary in enumerate(self.unaries):
            if unary.size == 0:
                raise ValueError(f"Chain position {position} has no candidates")
        for position, table in enumerate(self.pairwise):
            expected = (self.unaries[position].size, self.unaries[position + 1].size)
            if table.shape != expected:
                raise ValueError(f"Pairwise table {position} has shape {table.shape}, expected {expected}")
        if self.keys is None:
            self.keys = [np.arange(unary.size) for unary in self.unaries]
        self.keys = [np.asarray(k, dtype=np.int64).reshape(-1) for k in self.keys]
        for position, (keys, unary) in enumerate(zip(self.keys, self.unaries)):
            if keys.size != unary.size or np.unique(keys).size != keys.size:
                raise ValueError(f"Chain position {position} needs one distinct key per candidate")

    @property
    def length(self) -> int:
        return len(self.unaries)

    def energy(self, assignment: Sequence[int]) -> float:
        total = sum(float(self.unaries[k][s]) for k, s in enumerate(assignment))
        total += sum(float(self.pairwise[k][assignment[k], assignment[k + 1]]) for k in range(self.length - 1))
        return float(saturate(total))

    def to_multilabel(self) -> Tuple[MultiLabelProblem, np.ndarray]:
        """Encode as a union-label MRF; candidates missing at a position get INF unaries."""
        label_keys = np.unique(np.concatenate(self.keys))
        label_count = label_keys.size
        unary = np.full((self.length, label_count), INF)
        admissible = np.zeros((self.length, label_count), dtype=bool)
        columns = [np.searchsorted(label_keys, keys) for keys in self.keys]
        for position in range(self.length):
            unary[position, columns[position]] = self.unaries[position]
            admissible[position, columns[position]] = True
        costs = np.zeros((self.length - 1, label_count, label_count))
        for position, table in enumerate(self.pairwise):
            costs[position][np.ix_(columns[position], columns[position + 1])] = table
        edges = np.column_stack([np.arange(self.length - 1), np.arange(1, self.length)])
        problem = MultiLabelProblem(unary, edges=edges, costs=costs, admissible=admissible)
        return problem, label_keys


@dataclass
class ChainSolution:
    assignment: List[int]
    energy: float


def chain_solve(problem: ChainProblem) -> ChainSolution:
    """Exact minimum of a chain energy by dynamic programming.

    Ties resolve to the lowest candidate index during backtracking.
    """
    cost = problem.unaries[0].copy()
    backpointers: List[np.ndarray] = []
    for position in range(1, problem.length):
        total = saturate(cost[:, None] + problem.pairwise[position - 1])
        best_previous = np.argmin(total, axis=0)
        cost = saturate(total[best_previous, np.arange(total.shape[1])] + problem.unaries[position])
        backpointers.append(best_previous)

    last = int(np.argmin(cost))
    energy = float(cost[last])
    if energy >= INF:
        raise InfeasibleProblemError("Every chain assignment has infinite energy")
    assignment = [last]
    for pointers in reversed(backpointers):
        assignment.append(int(pointers[assignment[-1]]))
    assignment.reverse()
    return ChainSolution(assignment=assignment, energy=energy)
