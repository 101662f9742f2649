import numpy as np
import pytest
import scipy.sparse as sp

from msflow.cli import main
from msflow.errors import ConfigError, MsflowError
from msflow.harness import (
    CSV_HEADER,
    ExperimentConfig,
    ExperimentReport,
    export_vtk,
    fine_reference,
    parse_variant,
    relative_h1_error,
    relative_l2_error,
    run_experiment,
    sweep,
)


def small_config(tmp_path, **overrides):
    cfg = ExperimentConfig.default()
    cfg.values.update({
        "mesh.nx": 8, "mesh.ny": 8, "mesh.nz": 8, "mesh.ratio": 4,
        "time.steps": 2, "basis.offline": 2,
        "field.n_channels": 2, "field.n_inclusions": 2,
        "output.dir": str(tmp_path / "out"),
    })
    cfg.values.update(overrides)
    return cfg


def test_config_defaults_complete():
    cfg = ExperimentConfig.default()
    assert cfg["mesh.nx"] == 16
    assert cfg["problem.preset"] == "mixed-bc"
    assert cfg["fluid.mu"] == 5.0
    assert cfg["newton.tol"] == 1e-6
    cfg.validate()


def test_config_file_parsing(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# comment\n"
        "mesh.nx = 8\nmesh.ny = 8\nmesh.nz = 8\nmesh.ratio = 4\n"
        "basis.snapshot = v2\n"
        "error.plain_h1 = true\n"
        "online.updates = 1,7,14\n"
    )
    cfg = ExperimentConfig.from_file(path)
    assert cfg["mesh.nx"] == 8
    assert cfg["basis.snapshot"] == "v2"
    assert cfg["error.plain_h1"] is True
    assert cfg.update_steps() == (1, 7, 14)


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("mesh.bogus = 3\n")
    with pytest.raises(ConfigError, match="mesh.bogus"):
        ExperimentConfig.from_file(path)


def test_config_bad_value_rejected():
    cfg = ExperimentConfig.default()
    with pytest.raises(ConfigError):
        cfg.set("mesh.nx", "not-a-number")
    with pytest.raises(ConfigError):
        cfg.set("error.plain_h1", "maybe")


def test_config_missing_file():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file("/nonexistent/path.cfg")


def test_config_line_without_equals(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("mesh.nx 8\n")
    with pytest.raises(ConfigError, match=":1"):
        ExperimentConfig.from_file(path)


def test_config_validation_rules(tmp_path):
    cfg = small_config(tmp_path, **{"basis.offline": 0, "online.count": 0})
    with pytest.raises(ConfigError, match="empty coarse space"):
        cfg.validate()
    cfg = small_config(tmp_path, **{"mesh.nx": 9})
    with pytest.raises(ConfigError, match="divisible"):
        cfg.validate()
    cfg = small_config(tmp_path, **{"field.kind": "weird"})
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = small_config(tmp_path, **{"online.count": 1, "online.updates": "99"})
    with pytest.raises(ConfigError):
        cfg.validate()


def test_reference_hash_sensitivity(tmp_path):
    a = small_config(tmp_path)
    b = small_config(tmp_path, seed=1)
    c = small_config(tmp_path, **{"output.dir": str(tmp_path / "elsewhere")})
    d = small_config(tmp_path, **{"basis.offline": 4})
    assert a.reference_hash() != b.reference_hash()
    assert a.reference_hash() == c.reference_hash()  # output dir irrelevant
    assert a.reference_hash() == d.reference_hash()  # basis irrelevant


def _mass2():
    return sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)


def test_relative_l2_error_cases():
    M = _mass2()
    p = np.array([1.0, 2.0])
    assert relative_l2_error(p, p, M) == 0.0
    assert relative_l2_error(2 * p, p, M) == pytest.approx(1.0, rel=1e-14)
    # dense quadratic-form oracle
    q = np.array([1.5, -0.5])
    d = q - p
    expected = np.sqrt((d @ (M @ d)) / (p @ (M @ p)))
    assert relative_l2_error(q, p, M) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(MsflowError):
        relative_l2_error(p, np.zeros(2), M)


def test_relative_h1_error_cases():
    A = sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    p = np.array([1.0, 3.0])
    assert relative_h1_error(p, p, A) == 0.0
    # seminorm kills constant shifts
    assert relative_h1_error(p + 5.0, p, A) == pytest.approx(0.0, abs=1e-14)
    q = np.array([1.0, 4.0])
    assert relative_h1_error(q, p, A) == pytest.approx(0.5, rel=1e-14)


def test_export_vtk(mesh4, tmp_path):
    path = tmp_path / "field.vtk"
    field = np.full(mesh4.fine.n_nodes, 3.25)
    export_vtk(mesh4.fine, field, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("# vtk DataFile")
    assert f"DIMENSIONS {mesh4.fine.nx + 1} {mesh4.fine.ny + 1} {mesh4.fine.nz + 1}" in text
    assert f"POINT_DATA {mesh4.fine.n_nodes}" in text
    values = [float(v) for v in text[text.index("LOOKUP_TABLE default") + 1:]]
    assert values == [3.25] * mesh4.fine.n_nodes
    # byte-stable across writes
    first = path.read_bytes()
    export_vtk(mesh4.fine, field, path)
    assert path.read_bytes() == first
    with pytest.raises(MsflowError):
        export_vtk(mesh4.fine, np.zeros(3), path)


def test_parse_variant():
    assert parse_variant("4+0") == (4, 0, 0)
    assert parse_variant("4+1") == (4, 1, 1)
    assert parse_variant("4+1u3") == (4, 1, 3)
    with pytest.raises(ConfigError):
        parse_variant("four+one")


def test_csv_row_format():
    r = ExperimentReport("4+1", 500, 1.0, 2.0, 3.0, 1e-4, 2e-2, 40)
    row = r.csv_row()
    fields = row.split(",")
    assert len(fields) == len(CSV_HEADER.split(","))
    assert fields[0] == "4+1"
    assert int(fields[1]) == 500
    assert float(fields[5]) == 1e-4


def test_fine_reference_caching(tmp_path):
    cfg = small_config(tmp_path)
    (states, iters, _, _), problem, mesh = fine_reference(cfg)
    assert len(states) == cfg["time.steps"] + 1
    caches = list((tmp_path / "out").glob("fine_ref_*.npz"))
    assert len(caches) == 1
    mtime = caches[0].stat().st_mtime_ns
    (states2, _, _, _), _, _ = fine_reference(cfg)
    assert caches[0].stat().st_mtime_ns == mtime  # reused, not recomputed
    assert np.array_equal(np.asarray(states), np.asarray(states2))


def test_run_experiment_report(tmp_path):
    cfg = small_config(tmp_path)
    report = run_experiment(cfg)
    assert report.nb_label == "2+0"
    assert report.dim == 2 * 27
    assert 0.0 < report.e_l2 < 1.0
    assert 0.0 < report.e_h1 < 1.0
    csv = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert csv[0] == CSV_HEADER
    assert csv[1].startswith("2+0,54,")


def test_run_experiment_online_label_and_series(tmp_path):
    cfg = small_config(
        tmp_path,
        **{
            "online.count": 1, "online.updates": "1,2",
            "error.all_steps": True,
            "problem.preset": "neumann-wells",
        },
    )
    report = run_experiment(cfg)
    assert report.nb_label == "2+1(2 updates)"
    assert report.dim == 2 * 27 + 27
    series = (tmp_path / "out" / "errors_per_step.csv").read_text().splitlines()
    assert series[0] == "step,e_l2,e_h1"
    assert len(series) == 1 + cfg["time.steps"]


def test_run_experiment_vtk_steps(tmp_path):
    cfg = small_config(tmp_path)
    run_experiment(cfg, vtk_steps=(0, 2))
    out = tmp_path / "out"
    for step in (0, 2):
        assert (out / f"coarse_step{step:03d}.vtk").exists()
        assert (out / f"fine_step{step:03d}.vtk").exists()
    with pytest.raises(ConfigError):
        run_experiment(cfg, vtk_steps=(99,))


def test_sweep_rows(tmp_path):
    cfg = small_config(tmp_path)
    reports = sweep(cfg, ["2+0", "2+1"])
    assert [r.nb_label for r in reports] == ["fine", "2+0", "2+1"]
    assert reports[0].dim == 9**3
    assert reports[0].e_l2 == 0.0
    csv = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert csv[0] == CSV_HEADER
    assert len(csv) == 4


def test_cli_run_and_check(tmp_path, capsys):
    cfgfile = tmp_path / "exp.cfg"
    cfgfile.write_text(
        "mesh.nx = 8\nmesh.ny = 8\nmesh.nz = 8\nmesh.ratio = 4\n"
        "time.steps = 2\nbasis.offline = 2\n"
        "field.n_channels = 2\nfield.n_inclusions = 2\n"
        f"output.dir = {tmp_path / 'out'}\n"
    )
    assert main(["run", "--config", str(cfgfile)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == CSV_HEADER
    assert out[1].startswith("2+0,")


def test_cli_sweep_prints_ratio(tmp_path, capsys):
    cfgfile = tmp_path / "exp.cfg"
    cfgfile.write_text(
        "mesh.nx = 8\nmesh.ny = 8\nmesh.nz = 8\nmesh.ratio = 4\n"
        "time.steps = 2\nbasis.offline = 2\n"
        "field.n_channels = 2\nfield.n_inclusions = 2\n"
        f"output.dir = {tmp_path / 'out'}\n"
    )
    assert main(["sweep", "--config", str(cfgfile), "--nb", "2+0"]) == 0
    out = capsys.readouterr().out
    assert CSV_HEADER in out
    assert "T_solve(coarse)/T_solve(fine)" in out


def test_cli_gen_field_round_trip(tmp_path, capsys):
    cfgfile = tmp_path / "exp.cfg"
    cfgfile.write_text("mesh.nx = 8\nmesh.ny = 8\nmesh.nz = 8\nmesh.ratio = 4\n")
    path = tmp_path / "field.bin"
    assert main(["gen-field", "--config", str(cfgfile), str(path)]) == 0
    assert path.stat().st_size == 8 * 8**3


def test_cli_exit_codes(tmp_path):
    # 2: configuration error
    badcfg = tmp_path / "bad.cfg"
    badcfg.write_text("mesh.bogus = 1\n")
    assert main(["run", "--config", str(badcfg)]) == 2
    # 2: bad variant list
    assert main(["sweep", "--config", str(badcfg), "--nb", "2+0"]) == 2
    # 4: IO error (unreadable field file)
    iocfg = tmp_path / "io.cfg"
    iocfg.write_text(
        "mesh.nx = 8\nmesh.ny = 8\nmesh.nz = 8\nmesh.ratio = 4\n"
        "time.steps = 1\nfield.kind = file\n"
        f"field.path = {tmp_path / 'missing.bin'}\n"
        f"output.dir = {tmp_path / 'out'}\n"
    )
    assert main(["run", "--config", str(iocfg)]) == 4
    # 3: Newton non-convergence
    newtcfg = tmp_path / "newt.cfg"
    newtcfg.write_text(
        "mesh.nx = 4\nmesh.ny = 4\nmesh.nz = 4\nmesh.ratio = 2\n"
        "time.steps = 1\nbasis.offline = 2\n"
        "field.n_channels = 0\nfield.n_inclusions = 0\n"
        "newton.tol = 1e-300\nnewton.max_iter = 1\n"
        f"output.dir = {tmp_path / 'out3'}\n"
    )
    assert main(["run", "--config", str(newtcfg)]) == 3
