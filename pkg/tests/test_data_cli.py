import csv
import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from facemorph import cli
from facemorph.data import (
    DatasetIndex,
    check_face,
    from_uint8,
    generate_synthetic_faces,
    index_dataset,
    load_image,
    save_image,
    to_uint8,
)
from facemorph.errors import ConfigError, DataError, ShapeError, ValidationError


def write_png(path, size=(112, 112), value=128):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.full((size[1], size[0], 3), value, dtype=np.uint8)).save(path)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


class TestPixels:
    def test_mapping(self):
        arr = np.array([[[0, 127, 255]]], dtype=np.uint8)
        t = from_uint8(arr)
        assert t.shape == (3, 1, 1)
        assert t[0, 0, 0] == -1.0 and t[2, 0, 0] == 1.0
        assert float(t[1, 0, 0]) == pytest.approx(127 / 127.5 - 1)

    def test_round_trip(self):
        arr = np.random.default_rng(0).integers(0, 256, (112, 112, 3), dtype=np.uint8)
        assert np.array_equal(to_uint8(from_uint8(arr)), arr)

    def test_png_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 256, (112, 112, 3), dtype=np.uint8)
        save_image(from_uint8(arr), str(tmp_path / "x.png"))
        assert torch.equal(load_image(str(tmp_path / "x.png")), from_uint8(arr))

    def test_check_face(self):
        with pytest.raises(ShapeError):
            check_face(torch.zeros(3, 100, 112))
        with pytest.raises(ValidationError):
            check_face(torch.full((3, 112, 112), 1.5))
        with pytest.raises(ValidationError):
            check_face(np.zeros((3, 112, 112)))

    def test_load_rejects_wrong_size(self, tmp_path):
        write_png(str(tmp_path / "a.png"), size=(100, 112))
        with pytest.raises(ShapeError):
            load_image(str(tmp_path / "a.png"))


class TestIndex:
    def test_three_by_two(self, tmp_path):
        for i in range(3):
            for j in range(2):
                write_png(str(tmp_path / f"person{i}" / f"{j}.png"))
        idx = index_dataset(str(tmp_path))
        assert len(idx) == 6
        idx.write_csv(str(tmp_path / "index.csv"))
        rows = list(csv.reader(open(tmp_path / "index.csv")))
        assert rows[0] == ["identity_id", "image_path", "image_count"]
        assert len(rows) == 7
        assert all(r[2] == "2" for r in rows[1:])

    def test_non_square_is_warned_and_excluded(self, tmp_path):
        write_png(str(tmp_path / "a" / "ok.png"))
        write_png(str(tmp_path / "a" / "wide.png"), size=(128, 112))
        idx = index_dataset(str(tmp_path))
        assert [rel for _, rel in idx.entries] == ["a/ok.png"]
        assert len(idx.warnings) == 1 and "wide.png" in idx.warnings[0]

    def test_reindex_is_byte_identical(self, tmp_path):
        for i in range(2):
            write_png(str(tmp_path / "d" / f"p{i}" / "0.png"), value=10 * i)
        index_dataset(str(tmp_path / "d")).write_csv(str(tmp_path / "a.csv"))
        index_dataset(str(tmp_path / "d")).write_csv(str(tmp_path / "b.csv"))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_csv_round_trip(self, tmp_path):
        write_png(str(tmp_path / "data" / "p0" / "0.png"))
        idx = index_dataset(str(tmp_path / "data"))
        idx.write_csv(str(tmp_path / "index.csv"))
        back = DatasetIndex.read_csv(str(tmp_path / "index.csv"))
        assert os.path.exists(back.abspath(back.entries[0][1]))

    def test_empty_root(self, tmp_path):
        with pytest.raises(DataError):
            index_dataset(str(tmp_path))
        with pytest.raises(DataError):
            index_dataset(str(tmp_path / "missing"))


class TestSynthetic:
    def test_counts(self, synth_index):
        assert len(synth_index) == 160
        assert len(synth_index.identities) == 8
        assert all(len(v) == 20 for v in synth_index.by_identity.values())

    def test_same_seed_same_bytes(self, tmp_path):
        generate_synthetic_faces(str(tmp_path / "a"), 3, 2, seed=5)
        generate_synthetic_faces(str(tmp_path / "b"), 3, 2, seed=5)
        generate_synthetic_faces(str(tmp_path / "c"), 3, 2, seed=6)
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")

    def test_too_few_identities(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_synthetic_faces(str(tmp_path), 1, 5, seed=0)

    def test_identities_differ_more_than_images(self, synth_store, synth_index):
        ids = synth_index.identities
        within = (synth_store.get(synth_index.by_identity[ids[0]][0])
                  - synth_store.get(synth_index.by_identity[ids[0]][1])).abs().mean()
        across = (synth_store.get(synth_index.by_identity[ids[0]][0])
                  - synth_store.get(synth_index.by_identity[ids[1]][0])).abs().mean()
        assert across > within


# -- command line ----------------------------------------------------------


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    """A complete tiny pipeline driven through the command line."""
    w = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out-dir", w / "data", "--n-identities", 4, "--images-per-identity", 6, "--seed", 1) == 0
    index = w / "data" / "index.csv"
    assert run("train-encoder", "--index", index, "--out-dir", w / "enc", "--set", "epochs=1",
               "--set", "widths=[4,4,8,8,8]", "--set", "feature_dim=16") == 0
    enc = w / "enc" / "encoder.pt"
    assert run("train", "--index", index, "--encoder", enc, "--out-dir", w / "train", "--desk-scale",
               "--set", "batches_per_epoch=2", "--set", "channel_scale=16",
               "--set", "disc_widths=[4,4,8,8]") == 0
    gen = w / "train" / "generator.pt"
    assert run("build-protocol", "--index", index, "--out-dir", w / "proto", "--n-genuine", 20,
               "--n-imposter", 20, "--seed", 3) == 0
    proto = w / "proto" / "protocol.csv"
    common = ["--generator", gen, "--encoder", enc, "--index", index, "--protocol", proto]
    assert run("evaluate", *common, "--out-dir", w / "eval") == 0
    assert run("sweep-alpha", *common, "--out-dir", w / "eval2", "--alphas", "0,0.5,1", "--cache") == 0
    return {"w": w, "index": index, "enc": enc, "gen": gen, "proto": proto, "common": common}


class TestCli:
    def test_artifacts(self, cli_run):
        w = cli_run["w"]
        for rel in ("data/index.csv", "enc/encoder.pt.json", "enc/encoder_report.json", "train/loss_log.csv",
                    "train/train_config.json", "proto/protocol.csv", "proto/triplets.csv",
                    "eval/evaluation.json", "eval/distances.csv", "eval2/alpha_sweep.csv"):
            assert (w / rel).exists(), rel
        cfg = json.loads((w / "train" / "train_config.json").read_text())
        assert cfg["desk_scale"] is True and cfg["channel_scale"] == 16
        assert not any(p.name == ".lock" for p in w.rglob(".lock"))

    def test_every_command_records_its_config(self, cli_run):
        w = cli_run["w"]
        for d in ("data", "enc", "train", "proto", "eval", "eval2"):
            cfg = json.loads((w / d / "run_config.json").read_text())
            assert cfg["out_dir"] == str(w / d)
            assert "command" in cfg

    def test_run_config_round_trip(self, cli_run, tmp_path):
        w = cli_run["w"]
        assert run("--config", w / "proto" / "run_config.json", "--out-dir", tmp_path / "again") == 0
        assert (tmp_path / "again" / "protocol.csv").read_bytes() == (w / "proto" / "protocol.csv").read_bytes()
        a = json.loads((w / "proto" / "run_config.json").read_text())
        b = json.loads((tmp_path / "again" / "run_config.json").read_text())
        assert {**a, "out_dir": None} == {**b, "out_dir": None}

    def test_config_flags_override(self, cli_run, tmp_path):
        w = cli_run["w"]
        assert run("--config", w / "proto" / "run_config.json", "--out-dir", tmp_path / "o", "--seed", 9) == 0
        assert json.loads((tmp_path / "o" / "run_config.json").read_text())["seed"] == 9
        assert (tmp_path / "o" / "protocol.csv").read_bytes() != (w / "proto" / "protocol.csv").read_bytes()

    def test_morph_swap_gives_identical_png(self, cli_run, tmp_path):
        idx = DatasetIndex.read_csv(str(cli_run["index"]))
        a, b = idx.abspath(idx.entries[0][1]), idx.abspath(idx.entries[-1][1])
        base = ["--generator", cli_run["gen"], "--encoder", cli_run["enc"]]
        assert run("morph", *base, "--image1", a, "--image2", b, "--alpha", 0.3,
                   "--output", tmp_path / "ab.png", "--out-dir", tmp_path / "m1") == 0
        assert run("morph", *base, "--image1", b, "--image2", a, "--alpha", 0.7,
                   "--output", tmp_path / "ba.png", "--out-dir", tmp_path / "m2") == 0
        assert (tmp_path / "ab.png").read_bytes() == (tmp_path / "ba.png").read_bytes()
        m1 = json.loads((tmp_path / "m1" / "morph.json").read_text())
        m2 = json.loads((tmp_path / "m2" / "morph.json").read_text())
        assert (m1["d1"], m1["d2"]) == (m2["d2"], m2["d1"])

    def test_alpha_out_of_range(self, cli_run, tmp_path, capsys):
        idx = DatasetIndex.read_csv(str(cli_run["index"]))
        a = idx.abspath(idx.entries[0][1])
        code = run("morph", "--generator", cli_run["gen"], "--encoder", cli_run["enc"], "--image1", a,
                   "--image2", a, "--alpha", 1.3, "--output", tmp_path / "x.png", "--out-dir", tmp_path)
        assert code == cli.EXIT_CONFIG
        assert "alpha" in capsys.readouterr().err
        assert not (tmp_path / "x.png").exists()

    def test_report(self, cli_run):
        w = cli_run["w"]
        assert run("report", w / "eval") == 0
        first = tree_bytes(w / "eval" / "report")
        assert run("report", w / "eval") == 0
        assert tree_bytes(w / "eval" / "report") == first
        metrics = json.loads((w / "eval" / "report" / "metrics.json").read_text())
        scatter = list(csv.DictReader(open(w / "eval" / "report" / "scatter.csv")))
        assert len(scatter) == metrics["n_rows"] == 40
        m = metrics["metrics"]
        assert metrics["quadrant_both_below_diff"] == m["matches_diff"]
        assert metrics["quadrant_both_below_diff"] == round((1 - m["acc_morph_diff"] / 100) * m["n_diff"])
        th = json.loads((w / "eval" / "report" / "thresholds.json").read_text())
        assert set(th) == {"max_accuracy", "far", "far_rate", "per_fold"}

    def test_report_missing_artifacts(self, tmp_path):
        assert run("report", tmp_path) == cli.EXIT_DATA

    def test_exit_codes(self, cli_run, tmp_path):
        assert run("train", "--index", tmp_path / "none.csv", "--encoder", cli_run["enc"],
                   "--out-dir", tmp_path / "a") == cli.EXIT_DATA
        assert run("train", "--index", cli_run["index"], "--encoder", cli_run["enc"], "--out-dir", tmp_path / "b",
                   "--set", "batch_faces=7") == cli.EXIT_CONFIG
        assert run("synth", "--n-identities", 1, "--out-dir", tmp_path / "c") == cli.EXIT_CONFIG
        (tmp_path / "bad.json").write_text("[1]")
        assert run("--config", tmp_path / "bad.json") == cli.EXIT_CONFIG

    def test_numeric_abort_exit_code(self, cli_run, tmp_path):
        code = run("train", "--index", cli_run["index"], "--encoder", cli_run["enc"], "--out-dir", tmp_path,
                   "--desk-scale", "--set", "batches_per_epoch=1", "--set", "channel_scale=16",
                   "--set", "disc_widths=[4,4,8,8]", "--set", "gen_lr=1e30", "--set", "adam_betas=[0,0]")
        if code == 0:
            pytest.skip("training stayed finite")
        assert code == cli.EXIT_NUMERIC

    def test_locked_run_directory(self, tmp_path):
        (tmp_path / ".lock").write_text("1")
        assert run("synth", "--out-dir", tmp_path, "--n-identities", 2, "--images-per-identity", 1) == cli.EXIT_DATA

    def test_dataset_untouched(self, cli_run):
        data = cli_run["w"] / "data" / "images"
        before = tree_bytes(data)
        assert run("build-protocol", "--index", cli_run["index"], "--out-dir", cli_run["w"] / "p2") == 0
        assert tree_bytes(data) == before
