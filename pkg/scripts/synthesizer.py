"""Concatenative synthesis of mouth animation from a viseme query.

Selection minimizes the sum of per-position label mismatch costs plus the
weighted transition costs between consecutive samples. The chosen samples are
spliced at their stored transition offsets, the latent sequence is blended in
the gradient domain around every junction that is not already seamless, and
the frames are decoded through the codec.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from asset_io import save_json
from blend_lab import blend_sequence_1d, laplacian_mesh_integrate, poisson_blend_2d, raster_gradients, vertex_adjacency
from face_model import PoseShapeParams, ShapeModel, deform
from latent_codec import MouthCodec, MouthFrame, MouthRoi, RoiError, decode_many, save_latent_sequence
from mrf_core import INF, ChainProblem, InfeasibleProblemError, alpha_expand, chain_solve
from viseme_db import (
    ExtendedLabel,
    MissingTransitionError,
    TransitionTable,
    UnsatisfiableQueryError,
    VisemeDatabase,
    candidates,
)


LOGGER = logging.getLogger(__name__)

SOLVERS = ("chain", "alpha")


class SynthesisError(RuntimeError):
    """Signal that a synthesis stage failed; ``stage`` names it."""

    def __init__(self, message: str, stage: str) -> None:
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class SynthesisConfig:
    transition_weight: float = 1.0
    solver: str = "chain"
    blend_radius: int = 5
    fps: float = 25.0
    seam_factor: float = 1.5
    max_sweeps: int = 10
    anchor_weight: float = 10.0

    def __post_init__(self) -> None:
        if self.transition_weight < 0:
            raise ValueError(f"transition_weight must be >= 0, got {self.transition_weight}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {', '.join(SOLVERS)}, got {self.solver!r}")
        if self.blend_radius < 1:
            raise ValueError(f"blend_radius must be >= 1, got {self.blend_radius}")
        if self.fps <= 0 or self.seam_factor <= 0:
            raise ValueError("fps and seam_factor must be positive")
        if self.anchor_weight <= 0:
            raise ValueError(f"anchor_weight must be positive, got {self.anchor_weight}")


@dataclass
class Selection:
    sample_ids: List[int]
    energy: float
    unary_energy: float
    transition_energy: float
    solver: str
    exact_energy: Optional[float] = None
    partial_positions: List[int] = field(default_factory=list)


@dataclass
class Concatenation:
    latents: np.ndarray
    junctions: List[int]
    pieces: List[Tuple[int, int, int]]
    junction_costs: List[float]


@dataclass
class SynthesisResult:
    query: List[ExtendedLabel]
    selection: Selection
    concatenation: Concatenation
    latents: np.ndarray
    blended_junctions: List[int]
    max_jump: float
    reference_jump: float
    seamless: bool
    elapsed_seconds: float
    word_count: int
    fps: float
    frames: Optional[List[MouthFrame]] = None

    @property
    def junctions(self) -> List[int]:
        return self.concatenation.junctions

    def manifest(self) -> Dict:
        return {
            "query": [str(label) for label in self.query],
            "sample_ids": self.selection.sample_ids,
            "pieces": [{"sample": s, "start": a, "end": b} for s, a, b in self.concatenation.pieces],
            "junctions": self.concatenation.junctions,
            "junction_costs": self.concatenation.junction_costs,
            "blended_junctions": self.blended_junctions,
            "energy": {
                "total": self.selection.energy,
                "unary": self.selection.unary_energy,
                "transition": self.selection.transition_energy,
                "exact": self.selection.exact_energy,
                "solver": self.selection.solver,
            },
            "partial_context_positions": self.selection.partial_positions,
            "frames": int(self.latents.shape[0]),
            "fps": self.fps,
            "seamless": self.seamless,
            "max_jump": self.max_jump,
            "reference_jump": self.reference_jump,
            "timing": {
                "seconds": self.elapsed_seconds,
                "words": self.word_count,
                "ms_per_word": 1000.0 * self.elapsed_seconds / max(1, self.word_count),
            },
        }


# ---------------------------------------------------------------------------
# Selection


def selection_problem(
    query: Sequence[ExtendedLabel],
    database: VisemeDatabase,
    table: TransitionTable,
    config: SynthesisConfig,
) -> Tuple[ChainProblem, List[int]]:
    """Chain problem over per-position candidates plus the partial-match positions."""
    unaries, keys, partial = [], [], []
    for position, label in enumerate(query):
        found = candidates(label, database)
        keys.append(np.array([c.sample_id for c in found]))
        unaries.append(np.array([c.unary for c in found]))
        if found[0].unary > 0:
            partial.append(position)
            LOGGER.warning(
                "Query position %d (%s) served by partial-context match (cost %.0f)", position, label, found[0].unary
            )
    pairwise = []
    for left, right in zip(keys, keys[1:]):
        costs = np.array([[table.get(int(a), int(b)).cost for b in right] for a in left])
        pairwise.append(config.transition_weight * costs)
    return ChainProblem(unaries, pairwise, keys), partial


def _energy_terms(problem: ChainProblem, assignment: Sequence[int], table: TransitionTable) -> Tuple[float, float]:
    """Unweighted unary and transition sums of an assignment."""
    unary = sum(float(problem.unaries[k][s]) for k, s in enumerate(assignment))
    ids = [int(problem.keys[k][s]) for k, s in enumerate(assignment)]
    transition = sum(table.get(a, b).cost for a, b in zip(ids, ids[1:]))
    return unary, float(transition)


def select_samples(
    query: Sequence[ExtendedLabel],
    database: VisemeDatabase,
    table: TransitionTable,
    config: SynthesisConfig,
) -> Selection:
    if not query:
        raise ValueError("Query is empty")
    problem, partial = selection_problem(query, database, table, config)
    exact = chain_solve(problem)

    if config.solver == "chain":
        assignment = exact.assignment
    else:
        multilabel, label_keys = problem.to_multilabel()
        result = alpha_expand(multilabel, max_sweeps=config.max_sweeps)
        if result.energy >= INF:
            raise InfeasibleProblemError("Alpha-expansion ended on an inadmissible sample sequence")
        chosen = label_keys[result.labels]
        assignment = [int(np.flatnonzero(problem.keys[k] == chosen[k])[0]) for k in range(problem.length)]
        LOGGER.debug("alpha-expansion energy %.6g vs exact %.6g", result.energy, exact.energy)

    unary, transition = _energy_terms(problem, assignment, table)
    ids = [int(problem.keys[k][s]) for k, s in enumerate(assignment)]
    return Selection(
        sample_ids=ids,
        energy=problem.energy(assignment),
        unary_energy=unary,
        transition_energy=transition,
        solver=config.solver,
        exact_energy=exact.energy,
        partial_positions=partial,
    )


# ---------------------------------------------------------------------------
# Concatenation


def concatenate(sample_ids: Sequence[int], database: VisemeDatabase, table: TransitionTable) -> Concatenation:
    """Splice samples at their stored offsets: ``a[:tail] + b[head:]`` per junction."""
    if not sample_ids:
        raise ValueError("Nothing to concatenate")
    transitions = [table.get(a, b) for a, b in zip(sample_ids, sample_ids[1:])]
    pieces, parts, junctions = [], [], []
    length = 0
    for position, sample_id in enumerate(sample_ids):
        latents = database.sample(sample_id).latents
        start = transitions[position - 1].head if position > 0 else 0
        end = transitions[position].tail if position < len(transitions) else latents.shape[0]
        if end <= start:
            LOGGER.warning(
                "Sample %d keeps no frame between head %d and tail %d; keeping frame %d", sample_id, start, end, start
            )
            end = start + 1
        if position > 0:
            junctions.append(length)
        pieces.append((int(sample_id), int(start), int(end)))
        parts.append(latents[start:end])
        length += end - start
    return Concatenation(
        latents=np.concatenate(parts, axis=0),
        junctions=junctions,
        pieces=pieces,
        junction_costs=[float(t.cost) for t in transitions],
    )


def _max_jump(latents: np.ndarray) -> float:
    if latents.shape[0] < 2:
        return 0.0
    return float(np.max(np.linalg.norm(np.diff(latents, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# Synthesis


def synthesize(
    query: Sequence[ExtendedLabel],
    database: VisemeDatabase,
    table: TransitionTable,
    codec: Optional[MouthCodec],
    config: SynthesisConfig,
    word_count: int = 1,
) -> SynthesisResult:
    """Select, splice, blend and decode; each failure is tagged with its stage."""
    query = list(query)
    if not query:
        raise SynthesisError("Query is empty", stage="select")
    if codec is not None and codec.latent_dim != database.latent_dim:
        raise SynthesisError(
            f"Codec latent size {codec.latent_dim} does not match database {database.latent_dim}", stage="decode"
        )

    started = time.perf_counter()
    try:
        selection = select_samples(query, database, table, config)
    except (UnsatisfiableQueryError, MissingTransitionError, InfeasibleProblemError) as error:
        raise SynthesisError(f"{type(error).__name__}: {error}", stage="select") from error
    try:
        concatenation = concatenate(selection.sample_ids, database, table)
    except MissingTransitionError as error:
        raise SynthesisError(f"{type(error).__name__}: {error}", stage="concatenate") from error

    blended_junctions = [j for j, cost in zip(concatenation.junctions, concatenation.junction_costs) if cost > 0]
    latents = concatenation.latents
    if blended_junctions:
        latents = blend_sequence_1d(latents, blended_junctions, config.blend_radius)
    elapsed = time.perf_counter() - started

    reference = max(_max_jump(database.sample(sample_id).latents) for sample_id in selection.sample_ids)
    jump = _max_jump(latents)
    seamless = jump <= config.seam_factor * reference + 1e-12
    if not seamless:
        LOGGER.warning(
            "Largest frame-to-frame jump %.4g exceeds %.2f x within-sample maximum %.4g", jump, config.seam_factor, reference
        )

    frames = None
    if codec is not None:
        try:
            frames = decode_many(codec, latents)
        except ValueError as error:
            raise SynthesisError(str(error), stage="decode") from error

    LOGGER.info(
        "Synthesized %d frame(s) from %d sample(s), %d junction(s) blended, %.1f ms",
        latents.shape[0],
        len(selection.sample_ids),
        len(blended_junctions),
        1000.0 * elapsed,
    )
    return SynthesisResult(
        query=query,
        selection=selection,
        concatenation=concatenation,
        latents=latents,
        blended_junctions=blended_junctions,
        max_jump=jump,
        reference_jump=reference,
        seamless=seamless,
        elapsed_seconds=elapsed,
        word_count=word_count,
        fps=config.fps,
        frames=frames,
    )


def save_result(directory: Path, result: SynthesisResult) -> Path:
    directory = Path(directory)
    save_latent_sequence(directory / "latents.vsls", result.latents)
    return save_json(directory / "manifest.json", result.manifest())


# ---------------------------------------------------------------------------
# Compositing


def roi_anchor_ring(model: ShapeModel, roi_vertices: np.ndarray) -> np.ndarray:
    """ROI vertices that share an edge with a vertex outside the ROI."""
    adjacency = vertex_adjacency(model.triangles, model.vertex_count)
    inside = np.zeros(model.vertex_count, dtype=bool)
    inside[roi_vertices] = True
    outside_neighbours = adjacency @ (~inside).astype(np.float64)
    return np.flatnonzero(inside & (outside_neighbours > 0))


def composite_frame(
    frame: MouthFrame,
    base_atlas: np.ndarray,
    model: ShapeModel,
    base_vertices: np.ndarray,
    roi: MouthRoi,
    config: SynthesisConfig,
    pose: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Paste a decoded mouth into the full atlas and head mesh.

    The ROI's outermost texel ring keeps the base atlas and acts as the
    Dirichlet boundary; the interior follows the decoded texture gradients.
    Geometry is deformed from the decoded weights and merged with the base
    mesh, anchored on the ROI vertices bordering the rest of the face.
    """
    base_atlas = np.asarray(base_atlas, dtype=np.float64)
    rect = roi.rect
    rect.check(base_atlas.shape[:2])
    if frame.texture.shape != (rect.height, rect.width, 3):
        raise RoiError(f"Decoded texture {frame.texture.shape} does not match ROI {rect.width}x{rect.height}")
    if rect.width < 3 or rect.height < 3:
        raise RoiError(f"ROI {rect.width}x{rect.height} has no interior to blend")
    base_vertices = np.asarray(base_vertices, dtype=np.float64).reshape(-1, 3)
    if base_vertices.shape[0] != model.vertex_count:
        raise RoiError(f"Base mesh has {base_vertices.shape[0]} vertices, model has {model.vertex_count}")

    rows = slice(rect.y, rect.y + rect.height)
    cols = slice(rect.x, rect.x + rect.width)
    pasted = base_atlas.copy()
    pasted[rows, cols] = frame.texture
    mask = np.zeros(base_atlas.shape[:2], dtype=bool)
    mask[rect.y + 1:rect.y + rect.height - 1, rect.x + 1:rect.x + rect.width - 1] = True
    gx, gy = raster_gradients(pasted)
    atlas = poisson_blend_2d(base_atlas, mask, gx, gy)

    roi_ids = np.asarray(roi.vertex_ids, dtype=np.int64)
    if roi_ids.size == 0:
        return atlas, base_vertices.copy()
    params = PoseShapeParams(np.zeros(6) if pose is None else pose, frame.weights)
    replacement = deform(model, params)
    anchors = roi_anchor_ring(model, roi_ids)
    vertices = laplacian_mesh_integrate(
        base_vertices, replacement, roi_ids, anchors, config.anchor_weight, model.triangles
    )
    return atlas, vertices
