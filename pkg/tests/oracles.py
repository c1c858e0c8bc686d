"""Brute-force reference solutions used across the test-suite."""

from __future__ import annotations

import itertools
from typing import List, Tuple

import numpy as np

from mrf_core import ChainProblem, FlowGraph, MultiLabelProblem


def min_cut_by_enumeration(graph: FlowGraph) -> float:
    best = np.inf
    for sides in itertools.product((0, 1), repeat=graph.node_count):
        best = min(best, graph.cut_capacity(sides))
    if graph.node_count == 0:
        best = graph.cut_capacity(())
    return float(best)


def multilabel_by_enumeration(problem: MultiLabelProblem) -> Tuple[np.ndarray, float]:
    best_labels, best_energy = None, np.inf
    for labels in itertools.product(range(problem.label_count), repeat=problem.node_count):
        energy = problem.energy(labels)
        if energy < best_energy:
            best_labels, best_energy = np.array(labels), energy
    return best_labels, best_energy


def chain_by_enumeration(problem: ChainProblem) -> Tuple[List[int], float]:
    ranges = [range(unary.size) for unary in problem.unaries]
    best_assignment, best_energy = None, np.inf
    for assignment in itertools.product(*ranges):
        energy = problem.energy(assignment)
        if energy < best_energy:
            best_assignment, best_energy = list(assignment), energy
    return best_assignment, best_energy


def random_chain(rng: np.random.Generator, length: int, max_candidates: int) -> ChainProblem:
    sizes = rng.integers(1, max_candidates + 1, size=length)
    unaries = [rng.uniform(0.0, 2.0, size=size) for size in sizes]
    pairwise = [rng.uniform(0.0, 2.0, size=(sizes[k], sizes[k + 1])) for k in range(length - 1)]
    return ChainProblem(unaries, pairwise)
