import itertools
import time

import numpy as np
import pytest

from face_model import PoseShapeParams, ShapeModel, deform
from latent_codec import MouthFrame, MouthRoi, RoiError, RoiRect, fit_codec, roi_vertices
from synthesizer import (
    SynthesisConfig,
    SynthesisError,
    composite_frame,
    concatenate,
    roi_anchor_ring,
    select_samples,
    selection_problem,
    synthesize,
)
from viseme_db import (
    Annotation,
    ExtendedLabel,
    MotionSample,
    TransitionConfig,
    VisemeDatabase,
    build_database,
    build_transition_table,
    transition_cost,
)


KALT = [ExtendedLabel.parse(text) for text in ("#-A", "-AL", "ALT", "LT#")]


def _kalt_take(rng, dim=3):
    latents = np.cumsum(rng.normal(scale=0.3, size=(24, dim)), axis=0)
    ranges = [(0, 8), (4, 14), (10, 19), (15, 24)]
    return latents, [Annotation(label, start, end) for label, (start, end) in zip(KALT, ranges)]


def _kalt_database(seed=0, dim=3):
    rng = np.random.default_rng(seed)
    latents, annotations = _kalt_take(rng, dim)
    other = np.cumsum(rng.normal(scale=0.3, size=(24, dim)), axis=0) + 5.0
    _, other_annotations = _kalt_take(rng, dim)
    database = build_database([("kalt", latents, annotations), ("other", other, other_annotations)])
    return database, latents


def _random_database(rng, labels, frames=(6, 10), dim=3):
    samples = [
        MotionSample(index, ExtendedLabel.parse(label), rng.normal(size=(rng.integers(*frames), dim)))
        for index, label in enumerate(labels)
    ]
    return VisemeDatabase(dim, samples)


def _brute_force(problem):
    best = None
    for assignment in itertools.product(*(range(u.size) for u in problem.unaries)):
        energy = problem.energy(assignment)
        if best is None or energy < best:
            best = energy
    return best


# ---------------------------------------------------------------------------
# Selection


def test_single_position_takes_lowest_unary_then_lowest_id():
    database = _random_database(np.random.default_rng(0), ["#A#", "-AL", "#A#", "#O#"])
    table = build_transition_table(database, TransitionConfig())
    selection = select_samples([ExtendedLabel.parse("#A#")], database, table, SynthesisConfig())
    assert selection.sample_ids == [0]
    assert selection.unary_energy == 0.0


def test_zero_weight_decouples_positions():
    database = _random_database(np.random.default_rng(1), ["#A#", "#A#", "#O#", "#O#", "AO#"])
    table = build_transition_table(database, TransitionConfig())
    query = [ExtendedLabel.parse("#AO"), ExtendedLabel.parse("AO#")]
    selection = select_samples(query, database, table, SynthesisConfig(transition_weight=0.0))
    assert selection.sample_ids == [0, 4]
    assert selection.energy == pytest.approx(1.0)


def test_exact_chain_matches_enumeration_and_bounds_alpha_expansion():
    rng = np.random.default_rng(2)
    symbols = ["A", "O", "U"]
    for _ in range(20):
        labels = [f"#{rng.choice(symbols)}#" for _ in range(9)]
        labels += [f"{rng.choice(symbols)}{rng.choice(symbols)}{rng.choice(symbols)}" for _ in range(6)]
        database = _random_database(rng, labels)
        table = build_transition_table(database, TransitionConfig())
        present = sorted({label[1] for label in labels})
        query = [ExtendedLabel("#", str(rng.choice(present)), "#") for _ in range(6)]
        config = SynthesisConfig(transition_weight=float(rng.uniform(0.2, 2.0)))
        problem, _ = selection_problem(query, database, table, config)
        if max(u.size for u in problem.unaries) > 5:
            continue
        exact = select_samples(query, database, table, config)
        assert exact.energy == pytest.approx(_brute_force(problem), abs=1e-12)
        alpha = select_samples(query, database, table, SynthesisConfig(config.transition_weight, solver="alpha"))
        assert alpha.energy >= exact.energy - 1e-9
        assert alpha.exact_energy == pytest.approx(exact.energy)


def test_partial_context_match_is_logged(caplog):
    database = _random_database(np.random.default_rng(3), ["#L#"])
    table = build_transition_table(database, TransitionConfig())
    selection = select_samples([ExtendedLabel.parse("ALT")], database, table, SynthesisConfig())
    assert selection.partial_positions == [0]
    assert selection.unary_energy == 2.0
    assert "partial-context" in caplog.text


def test_worse_duplicate_never_changes_selection():
    rng = np.random.default_rng(4)
    database = _random_database(rng, ["#A#", "#A#", "#O#", "#O#"])
    query = [ExtendedLabel.parse("#A#"), ExtendedLabel.parse("#O#")]
    baseline = select_samples(query, database, build_transition_table(database, TransitionConfig()), SynthesisConfig())
    extended = VisemeDatabase(database.latent_dim, database.samples + [
        MotionSample(9, ExtendedLabel.parse("-A#"), database.sample(baseline.sample_ids[0]).latents.copy())
    ])
    again = select_samples(query, extended, build_transition_table(extended, TransitionConfig()), SynthesisConfig())
    assert again.sample_ids == baseline.sample_ids


def test_scaling_latents_keeps_exact_match_selection():
    rng = np.random.default_rng(5)
    database = _random_database(rng, ["#A#", "#A#", "#O#", "#O#", "#U#", "#U#"])
    scaled = VisemeDatabase(database.latent_dim, [
        MotionSample(s.id, s.label, 3.0 * s.latents) for s in database.samples
    ])
    query = [ExtendedLabel.parse(text) for text in ("#A#", "#O#", "#U#")]
    table = build_transition_table(database, TransitionConfig())
    scaled_table = build_transition_table(scaled, TransitionConfig())
    for key, transition in table.entries.items():
        assert scaled_table.get(*key).cost == pytest.approx(9.0 * transition.cost)
    assert (select_samples(query, database, table, SynthesisConfig()).sample_ids
            == select_samples(query, scaled, scaled_table, SynthesisConfig()).sample_ids)


# ---------------------------------------------------------------------------
# Concatenation


def test_single_sample_is_unchanged():
    database = _random_database(np.random.default_rng(6), ["#A#"])
    table = build_transition_table(database, TransitionConfig())
    result = concatenate([0], database, table)
    np.testing.assert_array_equal(result.latents, database.sample(0).latents)
    assert result.junctions == []


def test_identical_constant_samples_concatenate_to_constant():
    samples = [MotionSample(i, ExtendedLabel.parse("#A#"), np.ones((6, 2))) for i in range(2)]
    database = VisemeDatabase(2, samples)
    table = build_transition_table(database, TransitionConfig())
    result = concatenate([0, 1], database, table)
    np.testing.assert_array_equal(result.latents, np.ones_like(result.latents))


def test_splice_uses_direct_transition_offsets():
    database = _random_database(np.random.default_rng(7), ["#A#", "#O#"], frames=(9, 12))
    table = build_transition_table(database, TransitionConfig())
    result = concatenate([0, 1], database, table)
    a, b = database.sample(0).latents, database.sample(1).latents
    direct = transition_cost(a, b, window=4, search=3)
    assert result.pieces == [(0, 0, direct.tail), (1, direct.head, b.shape[0])]
    assert result.junctions == [direct.tail]
    np.testing.assert_array_equal(result.latents, np.concatenate([a[:direct.tail], b[direct.head:]]))


# ---------------------------------------------------------------------------
# Synthesis


def test_kalt_query_reconstructs_the_captured_take():
    database, latents = _kalt_database()
    table = build_transition_table(database, TransitionConfig())
    result = synthesize(KALT, database, table, None, SynthesisConfig())
    assert result.selection.sample_ids == [0, 1, 2, 3]
    assert result.concatenation.junction_costs == pytest.approx([0.0, 0.0, 0.0])
    assert result.blended_junctions == []
    np.testing.assert_allclose(result.latents, latents, atol=1e-6)
    assert len(result.junctions) == len(KALT) - 1
    assert result.seamless


def test_blending_leaves_frames_outside_windows_untouched():
    database = _random_database(np.random.default_rng(8), ["#A#", "#O#"], frames=(14, 16))
    table = build_transition_table(database, TransitionConfig())
    config = SynthesisConfig(blend_radius=3)
    result = synthesize([ExtendedLabel.parse("#A#"), ExtendedLabel.parse("#O#")], database, table, None, config)
    raw = result.concatenation.latents
    (junction,) = result.blended_junctions
    outside = np.r_[0:junction - 3, junction + 4:raw.shape[0]]
    np.testing.assert_array_equal(result.latents[outside], raw[outside])
    assert result.latents.shape == raw.shape


def test_synthesis_is_deterministic():
    database = _random_database(np.random.default_rng(9), ["#A#", "#O#", "#A#", "#O#"])
    table = build_transition_table(database, TransitionConfig())
    query = [ExtendedLabel.parse("#A#"), ExtendedLabel.parse("#O#"), ExtendedLabel.parse("#A#")]
    first = synthesize(query, database, table, None, SynthesisConfig())
    second = synthesize(query, database, table, None, SynthesisConfig())
    np.testing.assert_array_equal(first.latents, second.latents)
    assert first.selection.sample_ids == second.selection.sample_ids


def test_six_viseme_query_over_large_database_runs_under_a_second():
    query = [ExtendedLabel.parse(text) for text in ("#PA", "PAF", "AFO", "FOS", "OSU", "SU#")]
    labels = [str(label) for label in query] * 17
    database = _random_database(np.random.default_rng(12), labels, frames=(18, 23), dim=1024)
    table = build_transition_table(database, TransitionConfig(), threads=4)
    assert len(database) >= 100

    started = time.perf_counter()
    result = synthesize(query, database, table, None, SynthesisConfig())
    elapsed = time.perf_counter() - started

    assert len(result.selection.sample_ids) == 6
    assert result.latents.shape[1] == 1024
    assert elapsed < 1.0


def test_manifest_records_energies_and_timing():
    database, _ = _kalt_database(seed=1)
    table = build_transition_table(database, TransitionConfig())
    manifest = synthesize(KALT, database, table, None, SynthesisConfig(), word_count=1).manifest()
    assert manifest["query"] == ["#-A", "-AL", "ALT", "LT#"]
    assert manifest["energy"]["total"] == pytest.approx(0.0)
    assert manifest["timing"]["ms_per_word"] >= 0.0
    assert manifest["frames"] == 24


def test_empty_and_unsatisfiable_queries_fail_with_stage():
    database, _ = _kalt_database()
    table = build_transition_table(database, TransitionConfig())
    with pytest.raises(SynthesisError):
        synthesize([], database, table, None, SynthesisConfig())
    with pytest.raises(SynthesisError) as error:
        synthesize([ExtendedLabel.parse("#R#")], database, table, None, SynthesisConfig())
    assert error.value.stage == "select"


def test_decoding_through_codec():
    rng = np.random.default_rng(10)
    roi = MouthRoi(RoiRect(0, 0, 4, 3), np.arange(3))
    frames = [MouthFrame(rng.uniform(0.2, 0.8, size=(3, 4, 3)), rng.normal(size=15)) for _ in range(6)]
    codec = fit_codec(frames, roi, latent_dim=3)
    database, _ = _kalt_database(dim=3)
    table = build_transition_table(database, TransitionConfig())
    result = synthesize(KALT, database, table, codec, SynthesisConfig())
    assert len(result.frames) == result.latents.shape[0]
    assert result.frames[0].texture.shape == (3, 4, 3)

    narrow = fit_codec(frames, roi, latent_dim=2)
    with pytest.raises(SynthesisError) as error:
        synthesize(KALT, database, table, narrow, SynthesisConfig())
    assert error.value.stage == "decode"


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(transition_weight=-1.0)
    with pytest.raises(ValueError):
        SynthesisConfig(solver="viterbi")


# ---------------------------------------------------------------------------
# Compositing


def _face_grid(size=6):
    coords = np.arange(size, dtype=float)
    vertices = np.array([[x, y, 0.0] for y in coords for x in coords])
    triangles = []
    for y in range(size - 1):
        for x in range(size - 1):
            v = y * size + x
            triangles.append([v, v + size, v + 1])
            triangles.append([v + 1, v + size, v + size + 1])
    basis = np.random.default_rng(11).normal(scale=0.05, size=(vertices.size, 15))
    return ShapeModel(vertices.reshape(-1), basis, np.array(triangles), vertices[:, :2] / (size - 1))


def _composite_setup():
    model = _face_grid()
    yy, xx = np.mgrid[0:12, 0:12] / 12.0
    atlas = np.stack([0.3 + 0.4 * xx, 0.2 + 0.5 * yy, 0.5 + 0.2 * xx * yy], axis=-1)
    rect = RoiRect(3, 3, 6, 6)
    roi = MouthRoi(rect, roi_vertices(model, rect, 12))
    base = deform(model, PoseShapeParams.neutral())
    return model, atlas, roi, base


def test_roi_anchor_ring_borders_the_rest_of_the_face():
    model, _, roi, _ = _composite_setup()
    assert roi.vertex_ids.tolist() == [14, 15, 20, 21]
    assert roi_anchor_ring(model, roi.vertex_ids).tolist() == [14, 15, 20, 21]


def test_composite_of_base_content_is_a_fixed_point():
    model, atlas, roi, base = _composite_setup()
    frame = MouthFrame(atlas[3:9, 3:9].copy(), np.zeros(15))
    result_atlas, vertices = composite_frame(frame, atlas, model, base, roi, SynthesisConfig())
    np.testing.assert_allclose(result_atlas, atlas, atol=1e-5)
    np.testing.assert_allclose(vertices, base, atol=1e-9)


def test_shifted_mouth_blends_into_the_ring():
    model, atlas, roi, base = _composite_setup()
    frame = MouthFrame(atlas[3:9, 3:9] + 0.1, np.zeros(15))
    result_atlas, _ = composite_frame(frame, atlas, model, base, roi, SynthesisConfig())
    assert np.max(np.abs(result_atlas - atlas)) <= 1.0 / 255.0
    outside = np.ones((12, 12), dtype=bool)
    outside[4:8, 4:8] = False
    np.testing.assert_array_equal(result_atlas[outside], atlas[outside])


def test_mouth_geometry_only_moves_roi_vertices():
    model, atlas, roi, base = _composite_setup()
    weights = np.random.default_rng(12).normal(size=15)
    frame = MouthFrame(atlas[3:9, 3:9].copy(), weights)
    _, vertices = composite_frame(frame, atlas, model, base, roi, SynthesisConfig())
    outside = np.setdiff1d(np.arange(model.vertex_count), roi.vertex_ids)
    np.testing.assert_array_equal(vertices[outside], base[outside])
    assert not np.allclose(vertices[roi.vertex_ids], base[roi.vertex_ids])


def test_composite_rejects_mismatched_texture():
    model, atlas, roi, base = _composite_setup()
    with pytest.raises(RoiError):
        composite_frame(MouthFrame(np.zeros((5, 6, 3)), np.zeros(15)), atlas, model, base, roi, SynthesisConfig())
