"""Example-based visual speech synthesis from the command line.

Usage example (synthetic end-to-end run):

    python scripts/visual_speech.py gen-synthetic --preset tiny --output work/scene --seed 7
    python scripts/visual_speech.py track --scene work/scene --output work/params.json
    python scripts/visual_speech.py stitch --config work/scene/config.json --scene work/scene \
        --params work/params.json --output-dir work/atlases
    python scripts/visual_speech.py fit-codec --config work/scene/config.json --scene work/scene \
        --params work/params.json --atlases work/atlases --output work/codec.vscm
    python scripts/visual_speech.py encode --codec work/codec.vscm --params work/params.json \
        --atlases work/atlases --output work/take0.vsls
    python scripts/visual_speech.py build-db --take work/take0.vsls work/scene/annotations/take0.json \
        --output work/db.vsdb
    python scripts/visual_speech.py transitions --database work/db.vsdb --output work/db.vstt
    python scripts/visual_speech.py synth --database work/db.vsdb --transitions work/db.vstt \
        --codec work/codec.vscm --query "k a l t" --output-dir work/kalt
    python scripts/visual_speech.py composite --scene work/scene --codec work/codec.vscm \
        --latents work/kalt/latents.vsls --output-dir work/kalt/composite

Every command exits with 0 on success. On failure it logs the error and
writes one machine-readable line to stderr:

    ERROR {"command": "synth", "error": "SynthesisError", "message": "...", "offset": null}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from asset_io import load_image, load_json, save_image, save_json, save_obj
from face_model import PoseShapeParams, deform
from latent_codec import (
    MouthFrame,
    RoiRect,
    decode_many,
    encode_many,
    extract_roi,
    fit_codec,
    load_codec,
    load_latent_sequence,
    save_codec,
    save_latent_sequence,
    storage_report,
)
from pipeline_config import PipelineConfig, load_config
from synthesizer import composite_frame, save_result, synthesize
from synthetic_scene import PRESETS, generate_scene, load_scene, write_scene
from texture_stitch import assemble_texture, build_stitch_problem, conceal_seams, save_labeling, solve_labeling
from tracker import FrameFit, build_reference, register_neutral, track_sequence
from viseme_db import (
    ExtendedLabel,
    build_database,
    build_transition_table,
    coverage_report,
    load_annotations,
    load_database,
    load_dictionary,
    load_transition_table,
    phonemes_to_extended,
    save_database,
    save_transition_table,
    split_query,
)


LOGGER = logging.getLogger(__name__)

MAX_SEED = 2 ** 64 - 1


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")


def log_summary(title: str, lines: Sequence[str]) -> None:
    LOGGER.info("=" * 60)
    LOGGER.info("%s", title)
    for line in lines:
        LOGGER.info("  %s", line)
    LOGGER.info("=" * 60)


def seed_value(text: str) -> int:
    value = int(text)
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


# ---------------------------------------------------------------------------
# Shared helpers


def load_params_sequence(path: Path) -> List[PoseShapeParams]:
    records = load_json(path)
    if not isinstance(records, list) or not records:
        raise ValueError(f"{path}: expected a non-empty list of parameter records")
    return [PoseShapeParams.from_json(record) for record in records]


def atlas_path(directory: Path, frame: int) -> Path:
    return Path(directory) / f"f{frame:05d}.ppm"


def load_mouth_frames(atlases: Path, params: Sequence[PoseShapeParams], rect: RoiRect) -> List[MouthFrame]:
    frames = []
    for index, frame_params in enumerate(params):
        atlas = load_image(atlas_path(atlases, index))
        rect.check(atlas.shape[:2])
        crop = atlas[rect.y:rect.y + rect.height, rect.x:rect.x + rect.width]
        frames.append(MouthFrame(crop, frame_params.b))
    return frames


def parse_labels(args: argparse.Namespace, config: PipelineConfig) -> List[ExtendedLabel]:
    if args.labels:
        return [ExtendedLabel.parse(text) for text in args.labels.split()]
    dictionary = load_dictionary(Path(config.assets.dictionary) if config.assets.dictionary else None)
    return phonemes_to_extended(split_query(args.query), dictionary)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_synthetic(args: argparse.Namespace, config: PipelineConfig) -> None:
    dictionary = load_dictionary(Path(config.assets.dictionary) if config.assets.dictionary else None)
    scene = generate_scene(args.seed, args.preset, dictionary)
    write_scene(scene, args.output)
    log_summary("Synthetic scene", [
        f"preset: {args.preset} (seed {args.seed})",
        f"triangles: {scene.model.triangle_count}",
        f"cameras: {len(scene.cameras)}",
        f"frames: {scene.frame_count}",
        f"annotated visemes: {len(scene.annotations)}",
        f"output: {args.output}",
    ])


def cmd_track(args: argparse.Namespace, config: PipelineConfig) -> None:
    scene = load_scene(args.scene, max_frames=args.max_frames)
    neutral = register_neutral(scene.model, scene.frames[0], config.tracker)
    reference = build_reference(neutral, scene.frames[0])
    fits: Dict[int, FrameFit] = {}

    def on_frame(index: int, fit: FrameFit) -> None:
        fits[index] = fit
        LOGGER.debug("frame %d: %d iteration(s), energy %.6g", index, fit.iterations, fit.energies[-1])

    params = track_sequence(scene.model, scene.frames, reference, config.tracker, on_frame=on_frame)
    save_json(args.output, [
        dict(frame_params.to_json(), energies=fits[index].energies, iterations=fits[index].iterations)
        for index, frame_params in enumerate(params)
    ])

    lines = [
        f"frames tracked: {len(params)}",
        f"mean iterations: {np.mean([fit.iterations for fit in fits.values()]):.2f}",
        f"neutral pose: {' '.join(f'{value:.4f}' for value in neutral.t)}",
    ]
    if scene.layout.truth.is_file():
        truth = scene.truth()[: len(params)]
        error = max(float(np.max(np.abs(fit.t - true.t))) for fit, true in zip(params, truth))
        lines.append(f"max pose error vs ground truth: {error:.3g}")
    lines.append(f"output: {args.output}")
    log_summary("Tracking", lines)


def cmd_stitch(args: argparse.Namespace, config: PipelineConfig) -> None:
    params = load_params_sequence(args.params)
    scene = load_scene(args.scene, max_frames=len(params))
    if len(scene.frames) < len(params):
        raise ValueError(f"Scene has {len(scene.frames)} frame(s), parameters cover {len(params)}")
    problem = build_stitch_problem(scene.model, params, scene.frames, config.stitch, threads=args.threads)
    labeling = solve_labeling(problem, config.stitch)
    save_labeling(Path(args.output_dir) / "labels.json", labeling.labels)
    seam_total = 0
    for index, frame_params in enumerate(params):
        atlas, seams = assemble_texture(scene.model, frame_params, labeling.labels[index], scene.frames[index],
                                        config.stitch)
        seam_total += len(seams)
        save_image(atlas_path(args.output_dir, index), conceal_seams(atlas, seams, config.stitch))
    log_summary("Texture stitching", [
        f"frames: {problem.frame_count}",
        f"labeling energy: {labeling.energy:.6g}",
        f"fallback triangle-frames: {len(labeling.fallbacks)}",
        f"seam edges: {seam_total}",
        f"output: {args.output_dir}",
    ])


def cmd_fit_codec(args: argparse.Namespace, config: PipelineConfig) -> None:
    params = load_params_sequence(args.params)
    scene = load_scene(args.scene, max_frames=0)
    rect = config.codec.roi
    frames = []
    roi = None
    for index, frame_params in enumerate(params):
        crop, roi = extract_roi(load_image(atlas_path(args.atlases, index)), scene.model, rect)
        frames.append(MouthFrame(crop, frame_params.b))
    model = fit_codec(frames, roi, config.codec.latent_dim, config.codec.alpha)
    save_codec(args.output, model)
    report = storage_report(model, frame_count=len(frames), fps=config.synthesis.fps)
    log_summary("Mouth codec", [
        f"training frames: {len(frames)}",
        f"ROI: {rect.width}x{rect.height} at ({rect.x}, {rect.y}), {roi.vertex_ids.size} vertices",
        f"latent dimension: {model.latent_dim} (alpha {model.alpha:.4g})",
        *report.summary_lines(),
        f"output: {args.output}",
    ])


def cmd_encode(args: argparse.Namespace, config: PipelineConfig) -> None:
    codec = load_codec(args.codec)
    params = load_params_sequence(args.params)
    latents = encode_many(codec, load_mouth_frames(args.atlases, params, codec.roi.rect))
    save_latent_sequence(args.output, latents)
    LOGGER.info("Encoded %d frame(s) to %s", latents.shape[0], args.output)


def cmd_build_db(args: argparse.Namespace, config: PipelineConfig) -> None:
    takes = []
    for latents_path, annotations_path in args.take:
        takes.append((Path(latents_path).stem, load_latent_sequence(Path(latents_path)),
                      load_annotations(Path(annotations_path))))
    database = build_database(takes)
    save_database(args.output, database)
    dictionary = load_dictionary(Path(config.assets.dictionary) if config.assets.dictionary else None)
    report = coverage_report(database, dictionary)
    log_summary("Viseme database", [
        f"takes: {len(takes)}",
        f"samples: {len(database)}",
        f"latent dimension: {database.latent_dim}",
        "per viseme: " + ", ".join(f"{symbol}={count}" for symbol, count in report.per_symbol.items()),
        f"missing visemes: {', '.join(report.missing_symbols) or 'none'}",
        f"output: {args.output}",
    ])


def cmd_transitions(args: argparse.Namespace, config: PipelineConfig) -> None:
    database = load_database(args.database)
    table = build_transition_table(database, config.transitions, threads=args.threads)
    save_transition_table(args.output, table)
    LOGGER.info("Wrote %d transition(s) to %s", len(table), args.output)


def cmd_synth(args: argparse.Namespace, config: PipelineConfig) -> None:
    labels = parse_labels(args, config)
    database = load_database(args.database)
    table = load_transition_table(args.transitions)
    codec = load_codec(args.codec) if args.codec else None
    word_count = len(args.query.split("|")) if args.query else 1
    result = synthesize(labels, database, table, codec, config.synthesis, word_count=word_count)
    save_result(args.output_dir, result)
    if args.write_frames and result.frames is not None:
        for index, frame in enumerate(result.frames):
            save_image(atlas_path(Path(args.output_dir) / "frames", index), frame.texture)
    manifest = result.manifest()
    log_summary("Synthesis", [
        f"query: {' '.join(manifest['query'])}",
        f"samples: {manifest['sample_ids']}",
        f"frames: {manifest['frames']} at {manifest['fps']:g} fps",
        f"energy: {manifest['energy']['total']:.6g} (unary {manifest['energy']['unary']:.6g}, "
        f"transition {manifest['energy']['transition']:.6g})",
        f"seamless: {manifest['seamless']}",
        f"time: {manifest['timing']['ms_per_word']:.1f} ms per word",
        f"output: {args.output_dir}",
    ])


def cmd_composite(args: argparse.Namespace, config: PipelineConfig) -> None:
    scene = load_scene(args.scene, max_frames=0)
    codec = load_codec(args.codec)
    latents = load_latent_sequence(args.latents)
    base_atlas = load_image(args.base_atlas or scene.layout.atlas)
    base_vertices = deform(scene.model, PoseShapeParams.neutral(scene.model.weight_count))
    output = Path(args.output_dir)
    for index, frame in enumerate(decode_many(codec, latents)):
        atlas, vertices = composite_frame(frame, base_atlas, scene.model, base_vertices, codec.roi, config.synthesis)
        save_image(atlas_path(output, index), atlas)
        save_obj(output / f"f{index:05d}.obj", vertices, scene.model.uv, scene.model.triangles)
    LOGGER.info("Composited %d frame(s) into %s", latents.shape[0], output)


COMMANDS: Dict[str, Callable[[argparse.Namespace, PipelineConfig], None]] = {
    "gen-synthetic": cmd_gen_synthetic,
    "track": cmd_track,
    "stitch": cmd_stitch,
    "fit-codec": cmd_fit_codec,
    "encode": cmd_encode,
    "build-db": cmd_build_db,
    "transitions": cmd_transitions,
    "synth": cmd_synth,
    "composite": cmd_composite,
}


# ---------------------------------------------------------------------------
# Arguments


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=Path,
        default=None,
        help="JSON file overriding pipeline defaults section by section.",
    )
    common.add_argument(
        "--threads",
        type=positive_int,
        default=1,
        help="Upper bound on worker threads (default: %(default)s).",
    )
    common.add_argument(
        "--seed",
        type=seed_value,
        default=0,
        help="64-bit seed for every random choice (default: %(default)s).",
    )
    common.add_argument(
        "--verbose",
        action="store_true",
        help="Enable debug logging output.",
    )

    parser = argparse.ArgumentParser(description="Example-based visual speech synthesis pipeline.")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("gen-synthetic", parents=[common], help="Generate a synthetic capture scene.")
    sub.add_argument("--preset", choices=sorted(PRESETS), default="tiny", help="Scene size (default: %(default)s).")
    sub.add_argument("--output", type=Path, required=True, help="Scene directory to write.")

    sub = commands.add_parser("track", parents=[common], help="Track pose and shape through a scene.")
    sub.add_argument("--scene", type=Path, required=True, help="Scene directory.")
    sub.add_argument("--output", type=Path, required=True, help="Per-frame parameter JSON to write.")
    sub.add_argument("--max-frames", type=positive_int, default=None, help="Track only the first N frames.")

    sub = commands.add_parser("stitch", parents=[common], help="Stitch per-frame texture atlases.")
    sub.add_argument("--scene", type=Path, required=True, help="Scene directory.")
    sub.add_argument("--params", type=Path, required=True, help="Tracked parameter JSON.")
    sub.add_argument("--output-dir", type=Path, required=True, help="Directory for atlases and labels.")

    sub = commands.add_parser("fit-codec", parents=[common], help="Fit the mouth codec on stitched atlases.")
    sub.add_argument("--scene", type=Path, required=True, help="Scene directory (for the mesh).")
    sub.add_argument("--params", type=Path, required=True, help="Tracked parameter JSON.")
    sub.add_argument("--atlases", type=Path, required=True, help="Directory of stitched atlases.")
    sub.add_argument("--output", type=Path, required=True, help="Codec file (VSCM) to write.")

    sub = commands.add_parser("encode", parents=[common], help="Encode a take into a latent sequence.")
    sub.add_argument("--codec", type=Path, required=True, help="Codec file (VSCM).")
    sub.add_argument("--params", type=Path, required=True, help="Tracked parameter JSON.")
    sub.add_argument("--atlases", type=Path, required=True, help="Directory of stitched atlases.")
    sub.add_argument("--output", type=Path, required=True, help="Latent sequence (VSLS) to write.")

    sub = commands.add_parser("build-db", parents=[common], help="Cut annotated takes into a viseme database.")
    sub.add_argument(
        "--take",
        nargs=2,
        action="append",
        required=True,
        metavar=("LATENTS", "ANNOTATIONS"),
        help="Latent sequence and its annotation JSON; repeat for several takes.",
    )
    sub.add_argument("--output", type=Path, required=True, help="Database file (VSDB) to write.")

    sub = commands.add_parser("transitions", parents=[common], help="Precompute sample transitions.")
    sub.add_argument("--database", type=Path, required=True, help="Database file (VSDB).")
    sub.add_argument("--output", type=Path, required=True, help="Transition table (VSTT) to write.")

    sub = commands.add_parser("synth", parents=[common], help="Synthesize a latent sequence for a query.")
    sub.add_argument("--database", type=Path, required=True, help="Database file (VSDB).")
    sub.add_argument("--transitions", type=Path, required=True, help="Transition table (VSTT).")
    sub.add_argument("--codec", type=Path, default=None, help="Codec file (VSCM) used to decode frames.")
    query = sub.add_mutually_exclusive_group(required=True)
    query.add_argument("--query", help="Space-separated CELEX phonemes; '|' separates words.")
    query.add_argument("--labels", help="Space-separated extended labels such as '#-A -AL'.")
    sub.add_argument("--output-dir", type=Path, required=True, help="Directory for manifest and latents.")
    sub.add_argument("--write-frames", action="store_true", help="Also write decoded mouth textures.")

    sub = commands.add_parser("composite", parents=[common], help="Paste synthesized mouths into the head.")
    sub.add_argument("--scene", type=Path, required=True, help="Scene directory (mesh and atlas).")
    sub.add_argument("--codec", type=Path, required=True, help="Codec file (VSCM).")
    sub.add_argument("--latents", type=Path, required=True, help="Synthesized latent sequence (VSLS).")
    sub.add_argument("--base-atlas", type=Path, default=None, help="Base atlas (default: the scene's atlas).")
    sub.add_argument("--output-dir", type=Path, required=True, help="Directory for atlases and meshes.")
    return parser


def error_line(command: Optional[str], error: BaseException) -> str:
    payload = {
        "command": command,
        "error": type(error).__name__,
        "message": str(error),
        "offset": getattr(error, "offset", None),
    }
    return "ERROR " + json.dumps(payload)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = load_config(args.config)
        COMMANDS[args.command](args, config)
    except (RuntimeError, ValueError, OSError) as error:
        LOGGER.error("%s failed: %s", args.command, error)
        sys.stderr.write(error_line(args.command, error) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
