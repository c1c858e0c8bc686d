import itertools

import numpy as np
import pytest

from asset_io import FormatError
from viseme_db import (
    Annotation,
    ExtendedLabel,
    MissingTransitionError,
    MotionSample,
    TransitionConfig,
    UnknownPhonemeError,
    UnsatisfiableQueryError,
    VisemeDatabase,
    build_database,
    build_transition_table,
    candidates,
    coverage_report,
    load_annotations,
    load_database,
    load_dictionary,
    load_transition_table,
    phonemes_to_extended,
    save_annotations,
    save_database,
    save_transition_table,
    split_query,
    transition_cost,
)


@pytest.fixture(scope="module")
def dictionary():
    return load_dictionary()


def _labels(text, dictionary):
    return [str(label) for label in phonemes_to_extended(split_query(text), dictionary)]


def _database(labels, frames=5, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    samples = [MotionSample(index, ExtendedLabel.parse(label), rng.normal(size=(frames, dim)))
               for index, label in enumerate(labels)]
    return VisemeDatabase(dim, samples)


# ---------------------------------------------------------------------------
# Labels


def test_word_becomes_extended_labels(dictionary):
    assert _labels("k a l t", dictionary) == ["#-A", "-AL", "ALT", "LT#"]


def test_single_phoneme_word_has_empty_context(dictionary):
    assert _labels("a", dictionary) == ["#A#"]


def test_same_viseme_phonemes_repeat_the_symbol(dictionary):
    assert _labels("b m p", dictionary) == ["#PP", "PPP", "PP#"]


def test_word_break_resets_context(dictionary):
    assert _labels("a | o", dictionary) == ["#A#", "#O#"]
    assert _labels("f a|m a", dictionary) == ["#FA", "FA#", "#PA", "PA#"]


def test_unknown_phoneme_reports_position(dictionary):
    with pytest.raises(UnknownPhonemeError) as error:
        phonemes_to_extended(["k", "a", "W"], dictionary)
    assert error.value.position == 2
    assert error.value.phoneme == "W"


def test_extended_label_validation():
    assert str(ExtendedLabel.parse("#A#")) == "#A#"
    with pytest.raises(ValueError):
        ExtendedLabel.parse("A#")
    with pytest.raises(ValueError):
        ExtendedLabel("A", "#", "A")
    with pytest.raises(ValueError):
        ExtendedLabel("A", "W", "A")


def test_every_dictionary_symbol_is_a_viseme(dictionary):
    assert len(dictionary.symbols) == 13
    assert dictionary.viseme("z") == "S"
    assert dictionary.viseme("S") == "G"


# ---------------------------------------------------------------------------
# Transitions


def _exhaustive_transition(a, b, window, search):
    width = min(window, len(a), len(b))
    best = None
    for end, head in itertools.product(range(len(a)), range(len(b))):
        tail = end - width + 1
        if end < len(a) - search or tail < 0 or head > search - 1 or head + width > len(b):
            continue
        cost = np.mean((a[tail:end + 1] - b[head:head + width]) ** 2)
        if best is None or cost < best[0]:
            best = (cost, tail, head)
    return best


def test_constant_sequences_cost_their_squared_distance():
    a = np.tile([1.0, 2.0, 0.0], (6, 1))
    b = np.tile([0.0, 2.0, 2.0], (6, 1))
    transition = transition_cost(a, b)
    assert transition.cost == pytest.approx((1.0 + 4.0) / 3)
    # ties resolve to the earliest window on both sides
    assert (transition.tail, transition.head) == (0, 0)


def test_transition_matches_exhaustive_search():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.normal(size=(10, 4))
        b = rng.normal(size=(10, 4))
        transition = transition_cost(a, b, window=4, search=3)
        cost, tail, head = _exhaustive_transition(a, b, 4, 3)
        assert transition.cost == pytest.approx(cost)
        assert (transition.tail, transition.head) == (tail, head)


def test_self_transition_of_short_sample_costs_nothing():
    a = np.random.default_rng(2).normal(size=(5, 3))
    transition = transition_cost(a, a, window=4, search=3)
    assert transition.cost == pytest.approx(0.0)
    assert (transition.tail, transition.head) == (0, 0)


def test_window_shrinks_to_the_shorter_sample():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(8, 3))
    transition = transition_cost(a, b, window=4, search=3)
    cost, tail, head = _exhaustive_transition(a, b, 4, 3)
    assert transition.cost == pytest.approx(cost)
    assert transition.tail == 0


def test_transition_rejects_mismatched_latents():
    with pytest.raises(ValueError):
        transition_cost(np.zeros((4, 2)), np.zeros((4, 3)))


def test_transition_table_sizes():
    assert len(build_transition_table(_database(["#A#"]), TransitionConfig())) == 1
    assert len(build_transition_table(_database(["#A#", "#O#", "#U#"]), TransitionConfig(), threads=2)) == 9


def test_transition_table_does_not_depend_on_sample_order():
    database = _database(["#A#", "#O#", "#U#", "#E#"], frames=7)
    reordered = VisemeDatabase(database.latent_dim, list(reversed(database.samples)))
    forward = build_transition_table(database, TransitionConfig())
    backward = build_transition_table(reordered, TransitionConfig(), threads=3)
    assert forward.entries == backward.entries


def test_missing_transition_raises():
    table = build_transition_table(_database(["#A#"]), TransitionConfig())
    with pytest.raises(MissingTransitionError):
        table.get(0, 5)


# ---------------------------------------------------------------------------
# Candidates


def test_exact_context_match_has_zero_unary():
    database = _database(["ALT", "-LT", "#L#"])
    result = candidates(ExtendedLabel.parse("ALT"), database)
    assert [(c.sample_id, c.unary) for c in result] == [(0, 0.0)]


def test_partial_context_match_keeps_best_class():
    database = _database(["-LT", "#L#"])
    result = candidates(ExtendedLabel.parse("ALT"), database)
    assert [(c.sample_id, c.unary) for c in result] == [(0, 1.0)]


def test_no_context_match_keeps_all_samples_of_the_viseme():
    database = _database(["#L#", "PL-", "#A#"])
    result = candidates(ExtendedLabel.parse("ALT"), database)
    assert [(c.sample_id, c.unary) for c in result] == [(0, 2.0), (1, 2.0)]


def test_unknown_viseme_is_unsatisfiable():
    with pytest.raises(UnsatisfiableQueryError):
        candidates(ExtendedLabel.parse("#R#"), _database(["#A#"]))


# ---------------------------------------------------------------------------
# Database and files


def test_build_database_cuts_annotations():
    latents = np.arange(30, dtype=float).reshape(10, 3)
    annotations = [Annotation(ExtendedLabel.parse("#FA"), 0, 6), Annotation(ExtendedLabel.parse("FA#"), 2, 10)]
    database = build_database([("take0", latents, annotations)])
    assert database.ids == [0, 1]
    np.testing.assert_array_equal(database.sample(1).latents, latents[2:10])
    with pytest.raises(ValueError):
        build_database([("take0", latents, [Annotation(ExtendedLabel.parse("#A#"), 5, 12)])])


def test_coverage_lists_missing_visemes(caplog):
    report = coverage_report(_database(["#A#", "#A#", "-AL"]))
    assert report.per_symbol == {"A": 3}
    assert report.per_label == {"#A#": 2, "-AL": 1}
    assert "P" in report.missing_symbols and "A" not in report.missing_symbols
    assert "No samples" in caplog.text


def test_database_rejects_short_and_mismatched_samples():
    with pytest.raises(ValueError):
        MotionSample(0, ExtendedLabel.parse("#A#"), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        VisemeDatabase(2, [MotionSample(0, ExtendedLabel.parse("#A#"), np.zeros((3, 3)))])


def test_annotation_file_round_trip(tmp_path):
    annotations = [Annotation(ExtendedLabel.parse("#-A"), 0, 5), Annotation(ExtendedLabel.parse("-A#"), 1, 9)]
    save_annotations(tmp_path / "take.json", annotations)
    assert load_annotations(tmp_path / "take.json") == annotations


def test_database_and_table_files_round_trip(tmp_path):
    database = _database(["#A#", "ALT", "LT#"], frames=6)
    database.samples[0].latents = database.samples[0].latents.astype(np.float32).astype(np.float64)
    save_database(tmp_path / "db.vsdb", database)
    loaded = load_database(tmp_path / "db.vsdb")
    assert [str(sample.label) for sample in loaded.samples] == ["#A#", "ALT", "LT#"]
    np.testing.assert_array_equal(loaded.samples[0].latents, database.samples[0].latents)

    table = build_transition_table(loaded, TransitionConfig())
    save_transition_table(tmp_path / "db.vstt", table)
    reloaded = load_transition_table(tmp_path / "db.vstt")
    assert set(reloaded.entries) == set(table.entries)
    for key, transition in table.entries.items():
        assert reloaded.get(*key).cost == pytest.approx(transition.cost, rel=1e-6)
        assert (reloaded.get(*key).tail, reloaded.get(*key).head) == (transition.tail, transition.head)


def test_truncated_database_reports_offset(tmp_path):
    save_database(tmp_path / "db.vsdb", _database(["#A#"]))
    data = (tmp_path / "db.vsdb").read_bytes()
    (tmp_path / "cut.vsdb").write_bytes(data[:-5])
    with pytest.raises(FormatError) as error:
        load_database(tmp_path / "cut.vsdb")
    assert error.value.offset is not None and error.value.offset > 16
