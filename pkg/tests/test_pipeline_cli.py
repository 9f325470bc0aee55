import json

import numpy as np
import pytest

from microid.cli import main
from microid.errors import ConfigInvalid
from microid.pipeline import bundled_configs, config_from_dict, load_config, run_stages


def small_cfg(out, seed=0, **dgp):
    d = load_config("lemma3-linear").to_dict()
    d["dgp"].update(T=60, grid={"half_width": 2.0, "n": 21}, **dgp)
    d.update(out=str(out), seed=seed)
    return d


def write_cfg(path, d):
    path.write_text(json.dumps(d))
    return str(path)


def test_bundled_configs_load():
    names = bundled_configs()
    assert {"lemma3-linear", "lemma3-quadratic", "shocks", "nested", "blp"} <= set(names)
    for n in names:
        load_config(n)


def test_lemma3_linear_exits_zero(tmp_path, capsys):
    code = main(["full", "--config", "lemma3-linear", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["passed"]
    assert rep["stages"]["recover-index"]["metrics"]["g_error"] <= 5e-2
    assert "g_error" in capsys.readouterr().out


def test_shocks_without_index_stage_invalid(tmp_path, capsys):
    d = small_cfg(tmp_path / "run")
    d["stages"] = ["simulate", "recover-shocks"]
    with pytest.raises(ConfigInvalid, match="recover-index"):
        config_from_dict(d)
    assert main(["full", "--config", write_cfg(tmp_path / "c.json", d)]) == 2
    assert "ConfigInvalid" in capsys.readouterr().err


def test_unknown_config_field_invalid():
    d = small_cfg("x")
    d["bogus"] = 1
    with pytest.raises(ConfigInvalid):
        config_from_dict(d)
    d = small_cfg("x")
    d["dgp"]["J"] = "two"
    with pytest.raises(ConfigInvalid):
        config_from_dict(d)


def test_same_seed_identical_tables(tmp_path):
    outs = []
    for k in range(2):
        cfg = config_from_dict(small_cfg(tmp_path / f"r{k}"))
        run_stages(cfg)
        outs.append(tmp_path / f"r{k}" / "tables")
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
    r0, r1 = (json.loads((tmp_path / f"r{k}" / "report.json").read_text()) for k in range(2))
    r0.pop("timing"), r1.pop("timing")
    r0["config"].pop("out"), r1["config"].pop("out")
    assert r0 == r1


def test_seed_changes_output(tmp_path):
    for k, seed in enumerate((0, 1)):
        run_stages(config_from_dict(small_cfg(tmp_path / f"r{k}", seed=seed)), ["simulate"])
    a, b = ((tmp_path / f"r{k}" / "tables" / "markets.csv").read_bytes() for k in range(2))
    assert a != b


def test_stages_rerun_from_artifacts(tmp_path):
    cfg = config_from_dict(small_cfg(tmp_path))
    run_stages(cfg, ["simulate"])
    rep = run_stages(cfg, ["recover-index"])
    assert set(rep["stages"]) == {"simulate", "recover-index"}
    with np.load(tmp_path / "index_0.npz") as z:
        assert z is not None


def test_stage_without_inputs_reports_stage(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", small_cfg(tmp_path / "empty"))
    assert main(["recover-index", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "recover-index" in err and "markets.json" in err
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == 2


def test_report_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", small_cfg(tmp_path / "run"))
    main(["simulate", "--config", cfg])
    capsys.readouterr()
    assert main(["report", "--config", cfg]) == 0
    assert "overall: PASS" in capsys.readouterr().out


def test_configs_command(capsys):
    assert main(["configs"]) == 0
    assert "lemma3-linear" in capsys.readouterr().out.split()


def test_dsep_figures_reports_mismatch(capsys, tmp_path):
    code = main(["dsep", "--figures", "--json", str(tmp_path / "f.json")])
    out = capsys.readouterr().out
    assert "figure verdicts match" in out
    rows = json.loads((tmp_path / "f.json").read_text())["figures"]
    n = sum(r["match"] for r in rows)
    assert code == (0 if n == len(rows) else 1)


def test_dsep_collider_file(tmp_path, capsys):
    g = tmp_path / "collider.txt"
    g.write_text("Xi -> X\nW -> X\n")
    assert main(["dsep", str(g), "--query", "W _||_ Xi | X"]) == 0
    out = capsys.readouterr().out
    assert "fails" in out and "W -> X <- Xi" in out
    main(["dsep", str(g), "--query", "W _||_ Xi"])
    assert "holds" in capsys.readouterr().out


def test_dsep_malformed_line(tmp_path, capsys):
    g = tmp_path / "bad.txt"
    g.write_text("Xi -> X\n\nW --> X\n")
    assert main(["dsep", str(g)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_dsep_needs_input(capsys):
    assert main(["dsep"]) == 2
