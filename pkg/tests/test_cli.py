import xml.etree.ElementTree as ET

import pytest

from dppo.cli import dispatch
from dppo.plot import emit_plot
from conftest import tiny_run

NS = "{http://www.w3.org/2000/svg}"


def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "train-teacher" in capsys.readouterr().out
    assert dispatch(["train-student", "--help"]) == 0


def test_missing_teacher_flag(write_config, capsys):
    cfg = write_config(tiny_run(stage={"stage": "student"}))
    assert dispatch(["train-student", "--config", str(cfg)]) == 1
    assert "--teacher" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert dispatch(["fly"]) == 1
    assert dispatch(["plot", "--metrics", "m.csv", "--out", "o.svg", "--colour", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_bad_config_exits_one(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("[ppo]\nlearning_rate = 1\n")
    assert dispatch(["train-teacher", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_files_exit_one(tmp_path, write_config):
    cfg = write_config(tiny_run(stage={"stage": "student"}))
    assert dispatch(["train-student", "--config", str(cfg), "--teacher", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "s")]) == 1
    assert dispatch(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--suite", str(cfg)]) == 1
    assert dispatch(["plot", "--metrics", str(tmp_path / "none.csv"), "--out", str(tmp_path / "p.svg")]) == 1


def test_teacher_config_with_noise_rejected(tmp_path, write_config):
    cfg = write_config(tiny_run(noise={"grid": 0.1}))
    assert dispatch(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_map_demo_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert dispatch(["map-demo", "--terrain", "stairs", "--seed", "3", "--scans", "8", "--out", str(out)]) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == ["heightmap.csv", "map_height.csv", "map_observed.csv", "map_var.csv"]
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_map_demo_rejects_unknown_terrain(tmp_path):
    assert dispatch(["map-demo", "--terrain", "lava", "--seed", "1", "--out", str(tmp_path)]) == 1


def polylines(svg_path):
    root = ET.parse(svg_path).getroot()
    return root, root.findall(f"{NS}polyline")


def test_plot_two_rows_one_column(tmp_path):
    csv = tmp_path / "m.csv"
    csv.write_text("update,mean_return\n0,1.5\n1,2.5\n")
    out = tmp_path / "p.svg"
    assert dispatch(["plot", "--metrics", str(csv), "--out", str(out)]) == 0
    _, lines = polylines(out)
    assert len(lines) == 1
    assert len(lines[0].get("points").split()) == 2


def test_plot_byte_identical(tmp_path):
    csv = tmp_path / "m.csv"
    csv.write_text("update,a,b\n0,1,3\n1,2,1\n2,0.5,2\n")
    emit_plot(csv, ["a", "b"], tmp_path / "1.svg")
    emit_plot(csv, ["a", "b"], tmp_path / "2.svg")
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()


def test_plot_constant_column_mid_axis(tmp_path):
    csv = tmp_path / "m.csv"
    csv.write_text("update,c\n0,4\n1,4\n2,4\n3,4\n")
    emit_plot(csv, ["c"], tmp_path / "c.svg")
    root, lines = polylines(tmp_path / "c.svg")
    pts = [tuple(map(float, p.split(","))) for p in lines[0].get("points").split()]
    ys = {y for _, y in pts}
    assert len(ys) == 1
    axes = [a for a in root.findall(f"{NS}line") if a.get("class") == "axis"]
    y_top = min(float(a.get("y1")) for a in axes)
    y_bottom = max(float(a.get("y2")) for a in axes)
    assert ys.pop() == pytest.approx((y_top + y_bottom) / 2, abs=1e-3)
    labels = [float(t.text) for t in root.findall(f"{NS}text") if t.get("class") == "ytick"]
    assert labels == [3.0, 3.5, 4.0, 4.5, 5.0]
    xs = [x for x, _ in pts]
    assert xs == sorted(xs) and len(xs) == 4


def test_plot_missing_column(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text("update,a\n0,1\n")
    assert dispatch(["plot", "--metrics", str(csv), "--out", str(tmp_path / "p.svg"), "--columns", "a,zz"]) == 1
    assert "zz" in capsys.readouterr().err
