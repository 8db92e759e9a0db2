import json

import numpy as np
import pytest

from tomevl.cli import main
from tomevl.config import ConfigKeyError, RunConfig, load_config
from tomevl.datagen import read_ppm, write_ppm, make_samples

TINY = [
    "--set", "encoder.dim=16",
    "--set", "decoder.dim=16",
    "--set", "connector.model_dim=16",
    "--set", "connector.num_heads=2",
]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


# -- config ---------------------------------------------------------------------------


def test_config_overrides_and_echo_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"connector": {"r": 8}, "train": {"seed": 3}}))
    cfg = load_config(path, ["temporal.blocks=[1]", "train.max_lr=0.01"])
    assert cfg.connector.r == 8 and cfg.train.seed == 3
    assert cfg.temporal.blocks == [1] and cfg.train.max_lr == 0.01
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


@pytest.mark.parametrize("doc", [{"conector": {}}, {"connector": {"rr": 1}}, {"connector": 3}])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigKeyError):
        RunConfig.from_dict(doc)


def test_unknown_override_rejected():
    with pytest.raises(ConfigKeyError):
        RunConfig().with_overrides(["connector.nope=1"])
    with pytest.raises(ConfigKeyError):
        RunConfig().with_overrides(["connector.r"])


# -- macs / ablate ---------------------------------------------------------------------


def test_macs_defaults_flops_twice_macs(capsys):
    code, out, err = run(["macs", "--json"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema_version"] == 1
    assert doc["total_flops"] == 2 * doc["total_macs"]
    assert all(e["flops"] == 2 * e["macs"] for e in doc["entries"])
    assert "resolved config" in err


def test_macs_text_report(capsys):
    code, out, _ = run(["macs", "--qformer", "--stage", "1"], capsys)
    assert code == 0
    total = [line for line in out.splitlines() if line.startswith("total")][0].split("\t")
    assert int(total[2]) == 2 * int(total[1])


def test_ablate_r_table(capsys):
    code, out, _ = run(["ablate-r", "--json"], capsys)
    rows = json.loads(out)["rows"]
    assert [r["final_tokens"] for r in rows] == [136, 100, 64, 28, 9, 4]
    code, out, _ = run(["ablate-r", "--r-list", "19"], capsys)
    assert out.splitlines()[1].split("\t")[2] == "28"


def test_usage_errors_exit_1(capsys):
    assert main(["ablate-r", "--r-list", "a,b"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["macs", "--stage", "7"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["macs", "--set", "connector.bogus=1"]) == 1


def test_bad_config_file_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["macs", "--config", str(bad)]) == 2
    assert main(["macs", "--config", str(tmp_path / "missing.json")]) == 2


# -- datagen / merge-viz / temporal-check ------------------------------------------------


def test_datagen_rejects_overlong_clips(tmp_path):
    assert main(["datagen", "--out", str(tmp_path / "c"), "--n", "1", "--video", "12"]) == 1


def test_datagen_writes_corpus(tmp_path, capsys):
    code, out, _ = run(["datagen", "--out", str(tmp_path / "c"), "--n", "3", "--video", "2"], capsys)
    assert code == 0
    assert (tmp_path / "c" / "captions.tsv").read_text().count("\n") == 3
    assert (tmp_path / "c" / "videos" / "000000" / "frame1.ppm").exists()


def test_merge_viz_colors_every_patch(tmp_path, capsys):
    img = tmp_path / "in.ppm"
    write_ppm(img, make_samples(1, seed=4)[0].pixels)
    out_path = tmp_path / "viz.ppm"
    code, out, _ = run(["merge-viz", "--input", str(img), "--out", str(out_path)], capsys)
    assert code == 0
    overlay = read_ppm(out_path)
    assert overlay.shape == (32, 32, 3)
    patches = overlay[::4, ::4].reshape(-1, 3)
    # each 4x4 patch is a single flat color
    assert np.array_equal(overlay, np.repeat(np.repeat(overlay[::4, ::4], 4, 0), 4, 1))
    n_colors = len({tuple(p) for p in patches})
    assert n_colors == 32  # 64 patches, two tiny-config layers with r=16
    assert out.startswith("32 merged tokens")


def test_merge_viz_missing_input_is_data_error(tmp_path, capsys):
    assert main(["merge-viz", "--input", str(tmp_path / "nope.ppm"), "--out", str(tmp_path / "o.ppm")]) == 2


def test_merge_viz_malformed_input_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n")
    assert main(["merge-viz", "--input", str(bad), "--out", str(tmp_path / "o.ppm")]) == 2


def test_temporal_check_default_passes(capsys):
    code, out, _ = run(["temporal-check"], capsys)
    assert code == 0
    assert out.count("PASS") == 4


def test_temporal_check_skips_permutation_with_position_encoding(capsys):
    code, out, _ = run(["temporal-check", "--set", "temporal.position_encoding=true"], capsys)
    assert code == 0
    assert "SKIP  frame permutation equivariance" in out


def test_temporal_check_failure_exits_3(monkeypatch, capsys):
    from tomevl import pipeline

    def failing(run, seed=0):
        return [pipeline.CheckResult("forced", "fail", "injected")]

    monkeypatch.setattr(pipeline, "temporal_checks", failing)
    assert main(["temporal-check"]) == 3


# -- train / generate ------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert main(["datagen", "--out", str(root / "data"), "--n", "8"]) == 0
    args = ["train", "--data", str(root / "data"), *TINY,
            "--set", "train.total_steps=4", "--set", "train.warmup_steps=1",
            "--set", "pretrain.encoder_steps=2", "--set", "pretrain.decoder_steps=2",
            "--set", "data.pretrain_images=8", "--set", "data.pretrain_captions=8"]
    outs = []
    for name in ("a", "b"):
        assert main([*args, "--out", str(root / name)]) == 0
        outs.append((root / name / "train_log.tsv").read_text())
    return root, outs


def test_train_writes_log_and_checkpoint(trained):
    root, outs = trained
    lines = outs[0].splitlines()
    assert lines[0] == "step\tloss\tlr\twall_ms" and len(lines) == 5
    assert (root / "a" / "model.ckpt").read_bytes() == (root / "b" / "model.ckpt").read_bytes()


def test_train_twice_same_final_loss(trained):
    _, outs = trained
    strip = lambda text: [line.split("\t")[:3] for line in text.splitlines()]  # noqa: E731
    assert strip(outs[0]) == strip(outs[1])


def test_generate_from_checkpoint(trained, capsys):
    root, _ = trained
    img = next((root / "data" / "images").glob("*.ppm"))
    code, out, _ = run(["generate", "--checkpoint", str(root / "a" / "model.ckpt"), "--input", str(img), str(img)], capsys)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 2 and lines[0] == lines[1]


def test_merge_viz_with_checkpoint(trained, tmp_path, capsys):
    root, _ = trained
    img = next((root / "data" / "images").glob("*.ppm"))
    code, out, _ = run(["merge-viz", "--checkpoint", str(root / "a" / "model.ckpt"), "--input", str(img), "--out", str(tmp_path / "v.ppm")], capsys)
    assert code == 0 and out.startswith("32 merged tokens")


def test_generate_bad_checkpoint_is_data_error(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"nope")
    img = tmp_path / "i.ppm"
    write_ppm(img, make_samples(1)[0].pixels)
    assert main(["generate", "--checkpoint", str(bad), "--input", str(img)]) == 2
    assert main(["generate", "--checkpoint", str(tmp_path / "none.ckpt"), "--input", str(img)]) == 2


def test_train_on_missing_corpus_is_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2
