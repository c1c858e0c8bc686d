import json

import numpy as np
import pytest

from asset_io import load_json, save_json
from latent_codec import load_codec, load_latent_sequence, save_latent_sequence
from viseme_db import (
    Annotation,
    ExtendedLabel,
    MotionSample,
    VisemeDatabase,
    load_transition_table,
    save_annotations,
    save_database,
)
from visual_speech import error_line, main


KALT = ["#-A", "-AL", "ALT", "LT#"]


def _error_record(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("ERROR ")]
    assert len(lines) == 1
    return json.loads(lines[0][len("ERROR "):])


def _kalt_files(tmp_path):
    rng = np.random.default_rng(3)
    latents = np.cumsum(rng.normal(scale=0.3, size=(24, 4)), axis=0)
    ranges = [(0, 8), (4, 14), (10, 19), (15, 24)]
    annotations = [Annotation(ExtendedLabel.parse(label), a, b) for label, (a, b) in zip(KALT, ranges)]
    save_latent_sequence(tmp_path / "take0.vsls", latents)
    save_annotations(tmp_path / "take0.json", annotations)
    return latents


def test_error_line_format():
    line = error_line("synth", ValueError("bad query"))

    assert line.startswith("ERROR ")
    assert json.loads(line[6:]) == {"command": "synth", "error": "ValueError", "message": "bad query", "offset": None}


def test_missing_input_reports_error(tmp_path, capsys):
    code = main(["transitions", "--database", str(tmp_path / "missing.vsdb"), "--output", str(tmp_path / "t.vstt")])

    assert code == 1
    record = _error_record(capsys)
    assert record["command"] == "transitions"
    assert record["error"] == "FileNotFoundError"
    assert record["offset"] is None


def test_truncated_database_reports_offset(tmp_path, capsys):
    database = VisemeDatabase(2, [MotionSample(0, ExtendedLabel.parse("#A#"), np.ones((3, 2)))])
    path = save_database(tmp_path / "db.vsdb", database)
    path.write_bytes(path.read_bytes()[:-5])

    code = main(["transitions", "--database", str(path), "--output", str(tmp_path / "t.vstt")])

    assert code == 1
    record = _error_record(capsys)
    assert record["error"] == "FormatError"
    assert isinstance(record["offset"], int)


def test_unknown_config_key_rejected(tmp_path, capsys):
    config = save_json(tmp_path / "config.json", {"synthesis": {"blend_radiu": 3}})

    code = main(["transitions", "--config", str(config), "--database", "db.vsdb", "--output", "t.vstt"])

    assert code == 1
    assert _error_record(capsys)["error"] == "ConfigError"


def test_seed_must_fit_64_bits(tmp_path):
    with pytest.raises(SystemExit):
        main(["gen-synthetic", "--seed", str(2 ** 64), "--output", str(tmp_path)])


def test_transitions_on_single_sample(tmp_path):
    database = VisemeDatabase(2, [MotionSample(0, ExtendedLabel.parse("#A#"), np.arange(10.0).reshape(5, 2))])
    save_database(tmp_path / "db.vsdb", database)

    code = main(["transitions", "--database", str(tmp_path / "db.vsdb"), "--output", str(tmp_path / "t.vstt")])

    assert code == 0
    table = load_transition_table(tmp_path / "t.vstt")
    assert len(table) == 1
    assert table.get(0, 0).cost == 0.0


def test_build_db_and_synth_kalt(tmp_path):
    latents = _kalt_files(tmp_path)
    db, table, out = tmp_path / "db.vsdb", tmp_path / "db.vstt", tmp_path / "out"

    assert main(["build-db", "--take", str(tmp_path / "take0.vsls"), str(tmp_path / "take0.json"),
                 "--output", str(db)]) == 0
    assert main(["transitions", "--threads", "2", "--database", str(db), "--output", str(table)]) == 0
    assert main(["synth", "--database", str(db), "--transitions", str(table), "--query", "k a l t",
                 "--output-dir", str(out)]) == 0

    manifest = load_json(out / "manifest.json")
    assert manifest["query"] == KALT
    assert manifest["sample_ids"] == [0, 1, 2, 3]
    assert manifest["seamless"] is True
    np.testing.assert_allclose(load_latent_sequence(out / "latents.vsls"), latents, atol=1e-6)


def test_synth_labels_and_unknown_phoneme(tmp_path, capsys):
    _kalt_files(tmp_path)
    db, table = tmp_path / "db.vsdb", tmp_path / "db.vstt"
    main(["build-db", "--take", str(tmp_path / "take0.vsls"), str(tmp_path / "take0.json"), "--output", str(db)])
    main(["transitions", "--database", str(db), "--output", str(table)])

    assert main(["synth", "--database", str(db), "--transitions", str(table), "--labels", "#-A -AL",
                 "--output-dir", str(tmp_path / "labels")]) == 0
    assert load_json(tmp_path / "labels" / "manifest.json")["query"] == ["#-A", "-AL"]

    capsys.readouterr()
    code = main(["synth", "--database", str(db), "--transitions", str(table), "--query", "k q",
                 "--output-dir", str(tmp_path / "bad")])
    assert code == 1
    record = _error_record(capsys)
    assert record["error"] == "UnknownPhonemeError"
    assert "'q'" in record["message"]


def test_synthetic_pipeline_end_to_end(tmp_path):
    scene = tmp_path / "scene"
    assert main(["gen-synthetic", "--preset", "tiny", "--seed", "5", "--output", str(scene)]) == 0
    config = str(scene / "config.json")

    # "kalt" opens the take; its four samples end by frame 23.
    params = tmp_path / "params.json"
    save_json(params, load_json(scene / "truth" / "params.json")[:24])
    annotations = tmp_path / "kalt.json"
    save_json(annotations, load_json(scene / "annotations" / "take0.json")[:4])

    atlases = tmp_path / "atlases"
    assert main(["stitch", "--config", config, "--scene", str(scene), "--params", str(params),
                 "--output-dir", str(atlases)]) == 0
    assert len(list(atlases.glob("f*.ppm"))) == 24

    codec = tmp_path / "codec.vscm"
    assert main(["fit-codec", "--config", config, "--scene", str(scene), "--params", str(params),
                 "--atlases", str(atlases), "--output", str(codec)]) == 0
    assert load_codec(codec).latent_dim == 16

    take = tmp_path / "take0.vsls"
    assert main(["encode", "--codec", str(codec), "--params", str(params), "--atlases", str(atlases),
                 "--output", str(take)]) == 0
    db, table, out = tmp_path / "db.vsdb", tmp_path / "db.vstt", tmp_path / "kalt"
    assert main(["build-db", "--config", config, "--take", str(take), str(annotations), "--output", str(db)]) == 0
    assert main(["transitions", "--database", str(db), "--output", str(table)]) == 0
    assert main(["synth", "--config", config, "--database", str(db), "--transitions", str(table),
                 "--codec", str(codec), "--query", "k a l t", "--output-dir", str(out), "--write-frames"]) == 0

    manifest = load_json(out / "manifest.json")
    assert manifest["sample_ids"] == [0, 1, 2, 3]
    assert manifest["junction_costs"] == pytest.approx([0.0, 0.0, 0.0])
    synthesized = load_latent_sequence(out / "latents.vsls")
    np.testing.assert_allclose(synthesized, load_latent_sequence(take)[3:23], atol=1e-6)
    assert len(list((out / "frames").glob("f*.ppm"))) == synthesized.shape[0]

    composite = tmp_path / "composite"
    assert main(["composite", "--config", config, "--scene", str(scene), "--codec", str(codec),
                 "--latents", str(out / "latents.vsls"), "--output-dir", str(composite)]) == 0
    assert len(list(composite.glob("f*.obj"))) == synthesized.shape[0]


def test_track_first_frames(tmp_path):
    scene = tmp_path / "scene"
    main(["gen-synthetic", "--seed", "2", "--output", str(scene)])

    code = main(["track", "--scene", str(scene), "--max-frames", "2", "--output", str(tmp_path / "params.json")])

    assert code == 0
    records = load_json(tmp_path / "params.json")
    truth = load_json(scene / "truth" / "params.json")
    assert len(records) == 2
    assert records[0]["iterations"] >= 0
    np.testing.assert_allclose(records[0]["t"], truth[0]["t"], atol=1e-3)


def test_gen_synthetic_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-synthetic", "--seed", "9", "--output", str(tmp_path / name)]) == 0

    files = sorted(path.relative_to(tmp_path / "a") for path in (tmp_path / "a").rglob("*") if path.is_file())
    assert files
    for relative in files:
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()
