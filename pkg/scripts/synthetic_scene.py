"""Procedural multi-camera recordings of a talking face proxy.

The generator builds a low-poly face surface with a 15-column mouth shape
basis, a ring of calibrated cameras and a scripted word sequence. Every frame
carries ground-truth pose and shape parameters, noise-free landmarks and
flat-shaded textured renders whose mouth texture follows the shape weights.
All randomness flows from one seed, so two runs with the same seed and preset
write identical files.

Scene directory layout::

    scene.json              preset, seed, counts, landmark ids, ROI
    config.json             pipeline settings sized for this scene
    mesh.obj, basis.vsbm    shape model
    atlas.ppm               neutral texture atlas
    cameras/cam<c>.json     3x4 projection and image size
    images/f<frame>_c<c>.ppm
    landmarks/f<frame>.json
    truth/params.json       per-frame ground-truth parameters
    annotations/take0.json  extended viseme labels per frame range
    script.json             words with their phonemes and frame ranges
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from asset_io import load_image, load_json, save_image, save_json
from face_model import (
    SHAPE_WEIGHT_COUNT,
    CameraView,
    Landmarks,
    PoseShapeParams,
    ShapeModel,
    deform,
    load_camera,
    load_landmarks,
    load_shape_model,
    project,
    project_with_depth,
    rotation_matrix,
    sample_image,
    save_camera,
    save_landmarks,
    save_shape_model,
)
from latent_codec import RoiRect
from texture_stitch import uv_to_texel
from viseme_db import (
    Annotation,
    VisemeDictionary,
    load_annotations,
    load_dictionary,
    phonemes_to_extended,
    save_annotations,
)


LOGGER = logging.getLogger(__name__)

WORDS = ("kalt", "bIz", "fErn", "Son", "mut", "vir", "zel", "hOS", "luft", "raS", "zUp@", "mEl", "faz", "Si", "oft")

MOUTH_UV = (0.5, 0.68)
BACKGROUND = 0.1
LIGHT = np.array([0.3, -0.5, -1.0]) / np.linalg.norm([0.3, -0.5, -1.0])
SKIN = np.array([0.85, 0.65, 0.55])
LIP = np.array([0.55, 0.15, 0.18])
CAVITY = np.array([0.2, 0.03, 0.05])

# jaw opening (weight 0) and lip rounding (weight 1) per viseme
OPENNESS = {"P": -1.5, "F": -0.8, "T": -0.3, "-": 0.2, "L": 0.0, "I": 0.4, "E": 0.8,
            "A": 1.5, "O": 1.0, "U": 0.2, "R": 0.3, "S": -0.6, "G": -0.2}
ROUNDING = {"O": 1.2, "U": 1.5, "G": 0.8}


@dataclass(frozen=True)
class ScenePreset:
    grid: int
    cameras: int
    image_size: int
    atlas_size: int
    core_frames: int
    rest_frames: int
    passes: int
    latent_dim: int


PRESETS: Dict[str, ScenePreset] = {
    "tiny": ScenePreset(grid=10, cameras=3, image_size=80, atlas_size=64, core_frames=5, rest_frames=3, passes=1,
                        latent_dim=16),
    "small": ScenePreset(grid=14, cameras=4, image_size=128, atlas_size=128, core_frames=6, rest_frames=3, passes=2,
                         latent_dim=32),
}


@dataclass
class ScriptedWord:
    word: str
    phonemes: List[str]
    start: int
    end: int


@dataclass
class SyntheticScene:
    preset_name: str
    seed: int
    model: ShapeModel
    cameras: List[CameraView]
    params: List[PoseShapeParams]
    images: List[List[np.ndarray]]
    landmarks: List[List[Landmarks]]
    base_atlas: np.ndarray
    annotations: List[Annotation]
    words: List[ScriptedWord]
    landmark_ids: np.ndarray
    roi: RoiRect

    @property
    def preset(self) -> ScenePreset:
        return PRESETS[self.preset_name]

    @property
    def frame_count(self) -> int:
        return len(self.params)


# ---------------------------------------------------------------------------
# Geometry and cameras


def face_proxy(grid: int, rng: np.random.Generator) -> ShapeModel:
    """Bulged square patch facing -z with a smooth mouth-region shape basis."""
    steps = np.linspace(-1.0, 1.0, grid)
    ys, xs = np.meshgrid(steps, steps, indexing="ij")
    zs = -0.5 * np.exp(-(xs ** 2 + ys ** 2) / 0.8)
    vertices = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    uv = np.stack([(xs + 1.0) / 2.0, (ys + 1.0) / 2.0], axis=-1).reshape(-1, 2)

    triangles = []
    for row in range(grid - 1):
        for col in range(grid - 1):
            v = row * grid + col
            triangles.append([v, v + grid, v + 1])
            triangles.append([v + 1, v + grid, v + grid + 1])

    mouth = np.array([2.0 * MOUTH_UV[0] - 1.0, 2.0 * MOUTH_UV[1] - 1.0])
    basis = np.zeros((vertices.size, SHAPE_WEIGHT_COUNT))
    for column in range(SHAPE_WEIGHT_COUNT):
        if column == 0:
            centre, direction = mouth + [0.0, 0.2], np.array([0.0, 1.0, 0.0])
        else:
            centre = mouth + rng.uniform(-0.25, 0.25, size=2)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
        falloff = np.exp(-np.sum((vertices[:, :2] - centre) ** 2, axis=1) / (2 * 0.35 ** 2))
        basis[:, column] = (0.08 * falloff[:, None] * direction).reshape(-1)
    return ShapeModel(vertices.reshape(-1), basis, np.array(triangles), uv)


def camera_rig(count: int, image_size: int, distance: float = 5.0) -> List[CameraView]:
    """Cameras orbiting the face origin about the vertical axis, all at ``distance``."""
    focal = 0.35 * image_size * distance
    centre = (image_size - 1) / 2.0
    intrinsics = np.array([[focal, 0.0, centre], [0.0, focal, centre], [0.0, 0.0, 1.0]])
    angles = np.linspace(-0.45, 0.45, count) if count > 1 else np.zeros(1)
    cameras = []
    for angle in angles:
        extrinsics = np.hstack([rotation_matrix(0.0, float(angle), 0.0), [[0.0], [0.0], [distance]]])
        cameras.append(CameraView(intrinsics @ extrinsics, image_size, image_size))
    return cameras


def landmark_vertices(grid: int) -> np.ndarray:
    rows = (1, grid // 2, grid - 2)
    ids = [r * grid + c for r in rows for c in rows]
    mouth_row = int(round(MOUTH_UV[1] * (grid - 1)))
    offset = max(1, grid // 5)
    ids += [mouth_row * grid + grid // 2 - offset, mouth_row * grid + grid // 2 + offset,
            (mouth_row + 1) * grid + grid // 2]
    return np.array(sorted(set(ids)), dtype=np.int64)


def mouth_roi(atlas_size: int) -> RoiRect:
    return RoiRect(int(0.28 * atlas_size), int(0.54 * atlas_size), int(0.44 * atlas_size), int(0.28 * atlas_size))


# ---------------------------------------------------------------------------
# Script and trajectories


def viseme_targets(rng: np.random.Generator) -> Dict[str, np.ndarray]:
    targets = {}
    for symbol in sorted(OPENNESS):
        weights = rng.normal(scale=0.5, size=SHAPE_WEIGHT_COUNT)
        weights[0] = OPENNESS[symbol]
        weights[1] = ROUNDING.get(symbol, -0.5)
        targets[symbol] = weights
    return targets


def script_words(preset: ScenePreset, rng: np.random.Generator) -> List[str]:
    """The word list once per pass; the first pass keeps its order so "kalt" leads."""
    words = list(WORDS)
    for _ in range(preset.passes - 1):
        words.extend(rng.permutation(WORDS).tolist())
    return words


def build_script(
    words: Sequence[str],
    dictionary: VisemeDictionary,
    preset: ScenePreset,
    window: int = 4,
) -> Tuple[List[ScriptedWord], List[Annotation], List[Tuple[float, str]], int]:
    """Frame ranges, overlapping annotations and viseme key times for a word list.

    Consecutive annotations of one word share ``window`` frames so that the
    take can be re-spliced at zero transition cost.
    """
    scripted, annotations, keys = [], [], []
    frame = preset.rest_frames
    half = window // 2
    for word in words:
        phonemes = list(word)
        labels = phonemes_to_extended(phonemes, dictionary)
        start = frame
        end = start + preset.core_frames * len(labels)
        for index, label in enumerate(labels):
            core = start + index * preset.core_frames
            annotations.append(Annotation(label, max(start, core - half), min(end, core + preset.core_frames + half)))
            keys.append((core + (preset.core_frames - 1) / 2.0, label.cur))
        scripted.append(ScriptedWord(word, phonemes, start, end))
        frame = end + preset.rest_frames
    return scripted, annotations, keys, frame


def weight_trajectory(
    keys: Sequence[Tuple[float, str]],
    words: Sequence[ScriptedWord],
    targets: Dict[str, np.ndarray],
    frame_count: int,
) -> np.ndarray:
    """Smoothstep interpolation between viseme targets, resting at zero between words."""
    times, values = [0.0], [np.zeros(SHAPE_WEIGHT_COUNT)]
    key_iter = iter(keys)
    for word in words:
        for _ in word.phonemes:
            time, symbol = next(key_iter)
            times.append(time)
            values.append(targets[symbol])
        times.append(word.end + 0.5)
        values.append(np.zeros(SHAPE_WEIGHT_COUNT))
    if times[-1] < frame_count - 1:
        times.append(float(frame_count - 1))
        values.append(np.zeros(SHAPE_WEIGHT_COUNT))
    times = np.asarray(times)
    values = np.asarray(values)

    frames = np.arange(frame_count, dtype=np.float64)
    segment = np.clip(np.searchsorted(times, frames, side="right") - 1, 0, len(times) - 2)
    local = np.clip((frames - times[segment]) / (times[segment + 1] - times[segment]), 0.0, 1.0)
    smooth = local * local * (3.0 - 2.0 * local)
    return values[segment] + smooth[:, None] * (values[segment + 1] - values[segment])


def pose_trajectory(frame_count: int, rng: np.random.Generator) -> np.ndarray:
    offset = rng.uniform(-1.0, 1.0, size=6) * np.array([0.05, 0.05, 0.1, 0.03, 0.03, 0.03])
    amplitude = np.array([0.04, 0.03, 0.08, 0.02, 0.04, 0.015])
    periods = rng.uniform(60.0, 120.0, size=6)
    frames = np.arange(frame_count, dtype=np.float64)[:, None]
    return offset + amplitude * np.sin(2.0 * np.pi * frames / periods)


# ---------------------------------------------------------------------------
# Texture and rendering


def skin_atlas(size: int, rng: np.random.Generator) -> np.ndarray:
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    atlas = np.tile(SKIN, (size, size, 1))
    for channel in range(3):
        fx, fy, phase = rng.uniform(3.0, 9.0), rng.uniform(3.0, 9.0), rng.uniform(0.0, 2.0 * np.pi)
        atlas[..., channel] += 0.08 * np.sin(fx * u + fy * v + phase)
    return np.clip(atlas, 0.0, 1.0)


def mouth_atlas(base: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Paint a soft-edged mouth whose height follows jaw opening and width follows rounding."""
    size = base.shape[0]
    v, u = (np.mgrid[0:size, 0:size] + 0.5) / size
    openness = 0.5 + 0.5 * np.tanh(weights[0])
    rounding = 0.5 + 0.5 * np.tanh(weights[1])
    rx = 0.16 * (1.0 - 0.35 * rounding)
    ry = 0.015 + 0.09 * openness
    distance = np.sqrt(((u - MOUTH_UV[0]) / rx) ** 2 + ((v - MOUTH_UV[1]) / ry) ** 2)
    coverage = np.clip((1.15 - distance) / 0.3, 0.0, 1.0)[..., None]
    inner = (openness * np.clip((0.85 - distance) / 0.3, 0.0, 1.0))[..., None]
    mouth = LIP + inner * (CAVITY - LIP)
    return base * (1.0 - coverage) + mouth * coverage


@njit(cache=True)
def _rasterize(screen, inverse_depth, width, height, owner, weights, nearest):
    for tri in range(screen.shape[0]):
        z0, z1, z2 = inverse_depth[tri, 0], inverse_depth[tri, 1], inverse_depth[tri, 2]
        if z0 <= 0.0 or z1 <= 0.0 or z2 <= 0.0:
            continue
        x0, y0 = screen[tri, 0, 0], screen[tri, 0, 1]
        x1, y1 = screen[tri, 1, 0], screen[tri, 1, 1]
        x2, y2 = screen[tri, 2, 0], screen[tri, 2, 1]
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if det == 0.0:
            continue
        lo_x = max(int(np.ceil(min(x0, x1, x2))), 0)
        hi_x = min(int(np.floor(max(x0, x1, x2))), width - 1)
        lo_y = max(int(np.ceil(min(y0, y1, y2))), 0)
        hi_y = min(int(np.floor(max(y0, y1, y2))), height - 1)
        for y in range(lo_y, hi_y + 1):
            for x in range(lo_x, hi_x + 1):
                w0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
                w1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                inverse = w0 * z0 + w1 * z1 + w2 * z2
                if inverse <= nearest[y, x]:
                    continue
                nearest[y, x] = inverse
                owner[y, x] = tri
                weights[y, x, 0] = w0 * z0 / inverse
                weights[y, x, 1] = w1 * z1 / inverse
                weights[y, x, 2] = w2 * z2 / inverse


def render(model: ShapeModel, params: PoseShapeParams, camera: CameraView, atlas: np.ndarray) -> np.ndarray:
    """Depth-buffered render with per-triangle Lambert shading of the textured surface."""
    vertices = deform(model, params)
    corners = vertices[model.triangles]
    screen, depth = project_with_depth(camera, corners)
    inverse_depth = np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1.0), 0.0)

    owner = np.full((camera.height, camera.width), -1, dtype=np.int64)
    weights = np.zeros((camera.height, camera.width, 3))
    nearest = np.zeros((camera.height, camera.width))
    _rasterize(np.ascontiguousarray(screen), np.ascontiguousarray(inverse_depth),
               camera.width, camera.height, owner, weights, nearest)

    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    shade = 0.6 + 0.4 * np.clip(normals @ LIGHT, 0.0, 1.0)

    image = np.full((camera.height, camera.width, 3), BACKGROUND)
    ys, xs = np.nonzero(owner >= 0)
    triangle_ids = owner[ys, xs]
    uv = np.einsum("sk,skd->sd", weights[ys, xs], model.uv[model.triangles[triangle_ids]])
    colours = sample_image(atlas, uv_to_texel(uv, atlas.shape[0]))
    image[ys, xs] = colours * shade[triangle_ids, None]
    return image


# ---------------------------------------------------------------------------
# Generation


def generate_scene(seed: int, preset_name: str = "tiny", dictionary: Optional[VisemeDictionary] = None) -> SyntheticScene:
    if preset_name not in PRESETS:
        raise ValueError(f"Unknown preset {preset_name!r}; choose from {', '.join(sorted(PRESETS))}")
    preset = PRESETS[preset_name]
    dictionary = dictionary or load_dictionary()
    rng = np.random.default_rng(seed)

    model = face_proxy(preset.grid, rng)
    cameras = camera_rig(preset.cameras, preset.image_size)
    targets = viseme_targets(rng)
    words, annotations, keys, frame_count = build_script(script_words(preset, rng), dictionary, preset)
    weights = weight_trajectory(keys, words, targets, frame_count)
    poses = pose_trajectory(frame_count, rng)
    base = skin_atlas(preset.atlas_size, rng)
    landmark_ids = landmark_vertices(preset.grid)

    params, images, landmarks = [], [], []
    for frame in range(frame_count):
        frame_params = PoseShapeParams(poses[frame], weights[frame])
        atlas = mouth_atlas(base, weights[frame])
        vertices = deform(model, frame_params)
        params.append(frame_params)
        images.append([render(model, frame_params, camera, atlas) for camera in cameras])
        landmarks.append([Landmarks(landmark_ids, project(camera, vertices[landmark_ids])) for camera in cameras])

    LOGGER.info(
        "Synthetic scene %r (seed %d): %d triangles, %d cameras, %d frames, %d annotated visemes",
        preset_name, seed, model.triangle_count, len(cameras), frame_count, len(annotations),
    )
    return SyntheticScene(
        preset_name=preset_name,
        seed=seed,
        model=model,
        cameras=cameras,
        params=params,
        images=images,
        landmarks=landmarks,
        base_atlas=mouth_atlas(base, np.zeros(SHAPE_WEIGHT_COUNT)),
        annotations=annotations,
        words=words,
        landmark_ids=landmark_ids,
        roi=mouth_roi(preset.atlas_size),
    )


def scene_config(scene: SyntheticScene) -> Dict:
    """Pipeline overrides matching the scene's atlas, ROI and frame count."""
    roi = scene.roi
    return {
        "stitch": {"atlas_size": scene.preset.atlas_size},
        "codec": {
            "latent_dim": scene.preset.latent_dim,
            "roi_x": roi.x,
            "roi_y": roi.y,
            "roi_width": roi.width,
            "roi_height": roi.height,
        },
    }


# ---------------------------------------------------------------------------
# Files


class SceneLayout:
    """Paths inside a scene directory."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "scene.json"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def mesh(self) -> Path:
        return self.root / "mesh.obj"

    @property
    def basis(self) -> Path:
        return self.root / "basis.vsbm"

    @property
    def atlas(self) -> Path:
        return self.root / "atlas.ppm"

    @property
    def truth(self) -> Path:
        return self.root / "truth" / "params.json"

    @property
    def annotations(self) -> Path:
        return self.root / "annotations" / "take0.json"

    @property
    def script(self) -> Path:
        return self.root / "script.json"

    def camera(self, index: int) -> Path:
        return self.root / "cameras" / f"cam{index}.json"

    def image(self, frame: int, camera: int) -> Path:
        return self.root / "images" / f"f{frame:05d}_c{camera}.ppm"

    def landmarks(self, frame: int) -> Path:
        return self.root / "landmarks" / f"f{frame:05d}.json"


def write_scene(scene: SyntheticScene, directory: Path) -> SceneLayout:
    layout = SceneLayout(directory)
    layout.root.mkdir(parents=True, exist_ok=True)
    save_shape_model(scene.model, layout.mesh, layout.basis)
    save_image(layout.atlas, scene.base_atlas)
    for index, camera in enumerate(scene.cameras):
        save_camera(layout.camera(index), camera)
    for frame in range(scene.frame_count):
        for camera, image in enumerate(scene.images[frame]):
            save_image(layout.image(frame, camera), image)
        save_landmarks(layout.landmarks(frame), scene.landmarks[frame])
    save_json(layout.truth, [params.to_json() for params in scene.params])
    save_annotations(layout.annotations, scene.annotations)
    save_json(layout.script, [
        {"word": word.word, "phonemes": word.phonemes, "start": word.start, "end": word.end} for word in scene.words
    ])
    save_json(layout.config, scene_config(scene))
    roi = scene.roi
    save_json(layout.manifest, {
        "preset": scene.preset_name,
        "seed": scene.seed,
        "frames": scene.frame_count,
        "cameras": len(scene.cameras),
        "triangles": scene.model.triangle_count,
        "vertices": scene.model.vertex_count,
        "atlas_size": scene.preset.atlas_size,
        "landmark_ids": scene.landmark_ids.tolist(),
        "roi": [roi.x, roi.y, roi.width, roi.height],
    })
    LOGGER.info("Wrote scene to %s", layout.root)
    return layout


@dataclass
class LoadedScene:
    layout: SceneLayout
    model: ShapeModel
    cameras: List[CameraView]
    frames: List[List[CameraView]]
    info: Dict

    @property
    def annotations(self) -> List[Annotation]:
        return load_annotations(self.layout.annotations)

    def truth(self) -> List[PoseShapeParams]:
        return [PoseShapeParams.from_json(record) for record in load_json(self.layout.truth)]


def load_scene(directory: Path, max_frames: Optional[int] = None, with_images: bool = True) -> LoadedScene:
    """Model, cameras and per-frame views (image plus landmarks) of a scene directory."""
    layout = SceneLayout(directory)
    info = load_json(layout.manifest)
    model = load_shape_model(layout.mesh, layout.basis)
    cameras = [load_camera(layout.camera(index)) for index in range(int(info["cameras"]))]
    frame_count = int(info["frames"]) if max_frames is None else min(int(info["frames"]), max_frames)
    frames = []
    for frame in range(frame_count):
        marks = load_landmarks(layout.landmarks(frame), len(cameras))
        frames.append([
            camera.with_frame(load_image(layout.image(frame, index)) if with_images else None, marks[index])
            for index, camera in enumerate(cameras)
        ])
    LOGGER.info("Loaded scene %s: %d frame(s), %d camera(s)", layout.root, frame_count, len(cameras))
    return LoadedScene(layout=layout, model=model, cameras=cameras, frames=frames, info=info)
