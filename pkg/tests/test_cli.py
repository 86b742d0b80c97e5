import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from mote import cli, data, pipeline
from mote.data import MotionSpec


TINY_CONFIG = {
    "pipeline": {
        "med": {"model_dim": 16, "heads": 2, "ffn_dim": 32, "latent_len": 2,
                "layers": 2},
        "ted": {"model_dim": 16, "heads": 2, "ffn_dim": 32, "latent_len": 2,
                "enc_layers": 1, "dec_layers": 1},
        "mtdm": {"model_dim": 16, "heads": 2, "ffn_dim": 32, "blocks": 3,
                 "motion_latent_len": 2, "text_latent_len": 2,
                 "motion_latent_dim": 16, "text_latent_dim": 16,
                 "dropout": 0.0, "timesteps": 50},
        "med_train": {"lr": 1e-3, "weight_decay": 0.0, "batch": 64,
                      "epochs": 2, "seed": 1},
        "ted_train": {"lr": 2e-3, "weight_decay": 0.0, "batch": 64,
                      "epochs": 2, "seed": 2},
        "mtdm_train": {"lr": 3e-4, "batch": 64, "epochs": 2, "seed": 3},
        "extractor": {"feature_dim": 8, "epochs": 4},
    }
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli-ws")
    cfg = ws / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    dataset = ws / "dataset"
    assert cli.main(["dataset", "make", "--out", str(dataset),
                     "--seeds-per-combo", "2", "--seed", "0"]) == 0
    assert cli.main(["train", "med", "--data", str(dataset), "--config",
                     str(cfg), "--out", str(ws / "med")]) == 0
    assert cli.main(["train", "ted", "--data", str(dataset), "--config",
                     str(cfg), "--out", str(ws / "ted")]) == 0
    assert cli.main(["train", "mtdm", "--data", str(dataset), "--config",
                     str(cfg), "--out", str(ws / "sys"),
                     "--med", str(ws / "med" / "med.mote"),
                     "--ted", str(ws / "ted" / "ted.mote")]) == 0
    return {"ws": ws, "config": cfg, "dataset": dataset,
            "system": ws / "sys" / "system.mote"}


def read_manifest(out_dir):
    files = list(out_dir.glob(cli.MANIFEST_NAME))
    assert len(files) == 1
    return json.loads(files[0].read_text())


def test_dataset_make_and_inspect(workspace, capsys):
    dataset = workspace["dataset"]
    assert (dataset / "data.bin").exists()
    assert (dataset / "manifest.json").exists()
    manifest = read_manifest(dataset)
    assert manifest["command"] == "dataset make"
    assert manifest["seed"] == 0
    capsys.readouterr()
    assert cli.main(["dataset", "inspect", "--data", str(dataset)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["items"] == 48 * 3 * 2
    assert summary["feature_dim"] == 8
    assert summary["train"] + summary["test"] == summary["items"]


def test_train_outputs(workspace):
    for sub in ("med", "ted", "sys"):
        out = workspace["ws"] / sub
        assert (out / "train_log.jsonl").exists()
        manifest = read_manifest(out)
        assert manifest["checkpoint_hash"]
    sys_manifest = read_manifest(workspace["ws"] / "sys")
    assert sys_manifest["checkpoint_hash"] == pipeline.file_hash(workspace["system"])


def test_train_without_dataset_exits_2(tmp_path, capsys):
    code = cli.main(["train", "mtdm", "--data", str(tmp_path / "nope")])
    assert code == 2
    assert "dataset make" in capsys.readouterr().err


def test_train_mtdm_without_codecs_exits_2(workspace, capsys):
    code = cli.main(["train", "mtdm", "--data", str(workspace["dataset"]),
                     "--config", str(workspace["config"]),
                     "--out", str(workspace["ws"] / "sys2")])
    assert code == 2
    assert "--med" in capsys.readouterr().err


def test_sample_t2m_contract(workspace, capsys):
    out = workspace["ws"] / "t2m"
    code = cli.main(["sample", "t2m", "--text", "a point moves left slowly",
                     "--frames", "64", "--seed", "7", "--steps", "4",
                     "--checkpoint", str(workspace["system"]),
                     "--out", str(out)])
    assert code == 0
    assert (out / "motion.csv").exists()
    assert (out / "trajectory.svg").exists()
    manifest = read_manifest(out)
    assert manifest["seed"] == 7
    assert manifest["config"]["text"] == "a point moves left slowly"
    assert manifest["checkpoint_hash"] == pipeline.file_hash(workspace["system"])
    clip = cli.load_motion_csv(out / "motion.csv")
    assert clip.shape == (64, 8)


def test_sample_is_byte_reproducible(workspace):
    outs = []
    for name in ("rep-a", "rep-b"):
        out = workspace["ws"] / name
        assert cli.main(["sample", "t2m", "--text", "a point walks right",
                         "--seed", "9", "--steps", "4",
                         "--checkpoint", str(workspace["system"]),
                         "--out", str(out)]) == 0
        outs.append(out)
    for name in ("motion.csv", "trajectory.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    a = read_manifest(outs[0])
    b = read_manifest(outs[1])
    a.pop("wall_time"), b.pop("wall_time")
    assert a == b


def test_sample_other_tasks(workspace):
    ws = workspace["ws"]
    ckpt = str(workspace["system"])
    src = ws / "t2m" / "motion.csv"

    assert cli.main(["sample", "m2t", "--motion", str(src), "--seed", "3",
                     "--steps", "3", "--checkpoint", ckpt,
                     "--out", str(ws / "m2t")]) == 0
    caption = (ws / "m2t" / "caption.txt").read_text().strip()
    assert caption

    assert cli.main(["sample", "uncond", "--modality", "text", "--count", "2",
                     "--seed", "4", "--steps", "3", "--checkpoint", ckpt,
                     "--out", str(ws / "unc")]) == 0
    lines = (ws / "unc" / "captions.txt").read_text().splitlines()
    assert len(lines) == 2

    assert cli.main(["sample", "joint", "--count", "1", "--seed", "5",
                     "--steps", "3", "--checkpoint", ckpt,
                     "--out", str(ws / "joint")]) == 0
    assert (ws / "joint" / "joint_000.csv").exists()
    assert (ws / "joint" / "captions.txt").exists()

    assert cli.main(["sample", "vary", "--motion", str(src), "--strength",
                     "0.4", "--seed", "6", "--steps", "3",
                     "--checkpoint", ckpt, "--out", str(ws / "vary")]) == 0
    varied = cli.load_motion_csv(ws / "vary" / "motion.csv")
    assert varied.shape == (64, 8)

    code = cli.main(["sample", "vary", "--seed", "6", "--checkpoint", ckpt,
                     "--out", str(ws / "vary2")])
    assert code == 2


def test_sample_without_checkpoint_exits_2(capsys):
    assert cli.main(["sample", "t2m", "--text", "hi", "--seed", "1"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_flag_beats_file_beats_default(workspace, tmp_path):
    cfg = tmp_path / "steps.json"
    cfg.write_text(json.dumps({"steps": 3}))
    ckpt = str(workspace["system"])

    out1 = tmp_path / "o1"
    assert cli.main(["sample", "t2m", "--text", "x", "--seed", "1",
                     "--config", str(cfg), "--steps", "2",
                     "--checkpoint", ckpt, "--out", str(out1)]) == 0
    assert read_manifest(out1)["config"]["steps"] == 2

    out2 = tmp_path / "o2"
    assert cli.main(["sample", "t2m", "--text", "x", "--seed", "1",
                     "--config", str(cfg), "--checkpoint", ckpt,
                     "--out", str(out2)]) == 0
    assert read_manifest(out2)["config"]["steps"] == 3

    out3 = tmp_path / "o3"
    assert cli.main(["sample", "t2m", "--text", "x", "--seed", "1",
                     "--steps", "2", "--checkpoint", ckpt,
                     "--out", str(out3)]) == 0
    assert read_manifest(out3)["config"]["steps"] == 2


def test_eval_report(workspace, capsys):
    out = workspace["ws"] / "eval"
    code = cli.main(["eval", "--checkpoint", str(workspace["system"]),
                     "--data", str(workspace["dataset"]),
                     "--config", str(workspace["config"]),
                     "--out", str(out), "--n", "16", "--steps", "2",
                     "--gallery", "8", "--seed", "0"])
    assert code == 0, capsys.readouterr().err
    payload = json.loads((out / "eval.json").read_text())
    expected = {"r_at_1", "r_at_2", "r_at_3", "ci95", "ground_truth", "fid",
                "mm_dist", "m_modality", "bleu1", "bleu4", "rougeL", "cider", "n"}
    assert expected <= set(payload)
    assert 0.0 <= payload["r_at_1"] <= 1.0
    assert payload["fid"] >= 0.0


def test_bench_interactions_ordering(capsys):
    assert cli.main(["bench", "interactions", "--dim", "768", "--ffn", "1024",
                     "--blocks", "7"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["ordering"] == ["in_context", "cross_attention", "adaln"]
    counts = payload["params"]
    assert counts["in_context"] < counts["cross_attention"] < counts["adaln"]


def test_bench_even_blocks_is_usage_error(capsys):
    assert cli.main(["bench", "interactions", "--blocks", "6"]) == 2


def test_unknown_flag_rejected():
    assert cli.main(["render", "--bogus"]) == 2


def test_help_everywhere():
    for argv in (["--help"], ["dataset", "--help"], ["dataset", "make", "--help"],
                 ["dataset", "inspect", "--help"], ["train", "--help"],
                 ["train", "med", "--help"], ["train", "mtdm", "--help"],
                 ["sample", "--help"], ["sample", "t2m", "--help"],
                 ["sample", "vary", "--help"], ["eval", "--help"],
                 ["bench", "--help"], ["bench", "interactions", "--help"],
                 ["render", "--help"]):
        assert cli.main(argv) == 0


def test_motion_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    clip = rng.standard_normal((17, 8))
    path = tmp_path / "clip.csv"
    cli.save_motion_csv(path, clip)
    back = cli.load_motion_csv(path)
    assert back.shape == clip.shape
    assert np.array_equal(back, clip)


def test_render_straight_line(tmp_path):
    clip = data.generate_clip(MotionSpec("walk-line", "right", "medium", seed=0),
                              noise=0.0)
    path = tmp_path / "line.svg"
    cli.render_svg(clip, path, caption="straight")
    svg = path.read_text()
    root = ET.fromstring(svg)
    lines = [e for e in root.iter() if e.tag.endswith("line")]
    assert len(lines) == len(clip) - 1
    xs = [float(e.attrib["x1"]) for e in lines]
    assert all(b >= a for a, b in zip(xs, xs[1:]))
    assert "straight" in svg
    cli.render_svg(clip, tmp_path / "again.svg", caption="straight")
    assert (tmp_path / "again.svg").read_bytes() == path.read_bytes()


def test_render_circle_closes(tmp_path):
    clip = data.generate_clip(MotionSpec("circle", "forward", "medium", seed=0),
                              noise=0.0)
    xy = clip[:, :2]
    path_len = float(np.linalg.norm(np.diff(xy, axis=0), axis=1).sum())
    endpoint_gap = float(np.linalg.norm(xy[-1] - xy[0]))
    assert endpoint_gap < 0.05 * path_len
    cli.render_svg(clip, tmp_path / "circle.svg")
    ET.fromstring((tmp_path / "circle.svg").read_text())


def test_render_cli_command(workspace, tmp_path, capsys):
    src = workspace["ws"] / "t2m" / "motion.csv"
    out = tmp_path / "render"
    assert cli.main(["render", "--motion", str(src), "--caption", "demo",
                     "--out", str(out)]) == 0
    assert (out / "trajectory.svg").exists()
    assert read_manifest(out)["command"] == "render"
