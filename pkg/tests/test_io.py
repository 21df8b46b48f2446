"""Image I/O, config parsing, and the command-line pipeline."""
import csv
import filecmp
from pathlib import Path

import numpy as np
import pytest

from otvec import read_density_image, read_netpbm, write_netpbm
from otvec.cli import CliError, main, parse_config


# -- netpbm -------------------------------------------------------------------

def test_read_p5_maps_bytes_linearly(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 0, 255]))
    planes, maxval = read_netpbm(p)
    assert maxval == 255
    np.testing.assert_array_equal(planes, [[[0.0, 1.0], [0.0, 1.0]]])


def test_read_p6_pure_red(tmp_path):
    p = tmp_path / "red.ppm"
    p.write_bytes(b"P6\n3 1\n255\n" + bytes([255, 0, 0] * 3))
    planes = read_density_image(p)
    assert planes.shape == (3, 1, 3)
    np.testing.assert_array_equal(planes[0], 1.0)
    np.testing.assert_array_equal(planes[1], 0.0)
    np.testing.assert_array_equal(planes[2], 0.0)


def test_read_tolerates_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n" + bytes([7, 9]))
    planes, _ = read_netpbm(p)
    np.testing.assert_allclose(planes[0, 0], [7 / 255, 9 / 255])


def test_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(41)
    first = tmp_path / "one.ppm"
    second = tmp_path / "two.ppm"
    write_netpbm(first, rng.random((3, 5, 4)))
    planes, maxval = read_netpbm(first)
    write_netpbm(second, planes, maxval)
    assert filecmp.cmp(first, second, shallow=False)


def test_16bit_samples_are_big_endian(tmp_path):
    p = tmp_path / "deep.pgm"
    write_netpbm(p, np.full((1, 1, 1), 0.5), maxval=65535)
    header, _, payload = p.read_bytes().partition(b"65535\n")
    assert header.startswith(b"P5")
    assert payload == b"\x80\x00"
    planes, maxval = read_netpbm(p)
    assert maxval == 65535
    assert planes[0, 0, 0] == pytest.approx(32768 / 65535, abs=1e-12)


def test_write_zero_field_gives_zero_payload(tmp_path):
    p = tmp_path / "zero.pgm"
    write_netpbm(p, np.zeros((1, 2, 3)))
    payload = p.read_bytes().split(b"255\n", 1)[1]
    assert payload == bytes(6)


@pytest.mark.parametrize("content,excerpt", [
    (b"P4\n2 2\n255\n" + bytes(4), "unsupported magic"),
    (b"P5\n2 2\n128\n" + bytes(4), "unsupported maxval 128"),
    (b"P5\n0 5\n255\n", "bad image size 0x5"),
    (b"P5\n4 4\n255\n" + bytes(3), "truncated raster"),
    (b"P5\n2", "malformed netpbm header"),
])
def test_read_rejects_malformed_files(tmp_path, content, excerpt):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(ValueError, match=excerpt) as info:
        read_netpbm(p)
    assert str(p) in str(info.value)


def test_write_validation(tmp_path):
    with pytest.raises(ValueError, match="expected"):
        write_netpbm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="non-finite"):
        write_netpbm(tmp_path / "x.pgm", np.full((1, 1, 1), np.nan))


# -- config -------------------------------------------------------------------

def test_config_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("# nothing but a comment\n\n")
    cfg = parse_config(str(p))
    assert cfg["gamma"] == 1.0 and cfg["nt"] == 16
    assert cfg["normalization"] == "fixed_scale"
    assert cfg["deterministic"] is False and cfg["gamma_grid"] is None


def test_config_parses_values_and_whitespace(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("gamma = 2.5\nnt=8\ndeterministic = yes\n"
                 "gamma_grid = 0.1, 1, 10\n")
    cfg = parse_config(str(p))
    assert cfg["gamma"] == 2.5 and cfg["nt"] == 8
    assert cfg["deterministic"] is True
    assert cfg["gamma_grid"] == [0.1, 1.0, 10.0]


def test_config_errors_name_file_and_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("gamma=1\ngama=2\n")
    with pytest.raises(CliError, match=r"bad\.cfg:2: unknown key 'gama'"):
        parse_config(str(p))
    p.write_text("nt=abc\n")
    with pytest.raises(CliError, match="bad value for nt"):
        parse_config(str(p))
    p.write_text("just a line\n")
    with pytest.raises(CliError, match="expected key=value"):
        parse_config(str(p))
    with pytest.raises(CliError, match="cannot read"):
        parse_config(str(tmp_path / "missing.cfg"))
    assert CliError("config", "boom").stage == "config"
    assert str(CliError("read", "boom")) == "error [read]: boom"


# -- CLI pipeline -------------------------------------------------------------

def _blob_image(path, ny=6, nx=6, bright=None, total_scale=1.0):
    y, x = np.mgrid[0:ny, 0:nx]
    plane = np.exp(-((x - nx / 3) ** 2 + (y - ny / 2) ** 2) / 3.0)
    if bright is not None:
        plane[bright] = 1.0
    write_netpbm(path, plane[None] * total_scale)
    return read_density_image(path)


def _config(path, **keys):
    path.write_text("".join(f"{k}={v}\n" for k, v in keys.items()))
    return str(path)


def _read_summary(outdir):
    out = {}
    for line in (Path(outdir) / "summary.txt").read_text().splitlines():
        key, _, val = line.partition("=")
        out[key] = val
    return out


def test_cli_info(tmp_path, capsys):
    img = tmp_path / "img.pgm"
    _blob_image(img, ny=2, nx=3)
    assert main(["info", str(img)]) == 0
    out = capsys.readouterr().out
    assert "size=3x2 channels=1 maxval=255" in out
    assert "total_mass=" in out and "channel_0:" in out


def test_cli_info_bad_file(tmp_path, capsys):
    img = tmp_path / "bad.pgm"
    img.write_bytes(b"P4\n1 1\n255\n\x00")
    assert main(["info", str(img)]) == 1
    assert "error [read]:" in capsys.readouterr().err


def test_cli_solve_identity_end_to_end(tmp_path, capsys):
    img = tmp_path / "same.pgm"
    cells = _blob_image(img, bright=(1, 1))
    out = tmp_path / "out"
    cfg = _config(tmp_path / "run.cfg", source=img, target=img, nt=4,
                  max_iters=300, out=out)
    assert main(["solve", cfg]) == 0
    assert "energy=" in capsys.readouterr().out

    summary = _read_summary(out)
    assert float(summary["total_energy"]) <= 1e-6
    assert summary["converged"] == "true"
    assert abs(float(summary["mass_deficit"])) <= 1e-12

    density = sorted((out / "density" / "channel_0").glob("frame_*.pgm"))
    layer = sorted((out / "layer").glob("frame_*.pgm"))
    source = sorted((out / "source").glob("frame_*.pgm"))
    assert len(density) == 5 and len(layer) == 5 and len(source) == 4

    # the first frame reproduces the input up to 8-bit quantization
    recon = read_density_image(density[0])
    np.testing.assert_allclose(recon, cells, atol=1 / 255)

    with open(out / "metrics.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["iteration", "total_energy"]
    assert len(rows) >= 2
    assert rows[-1][-1] != ""       # layer masses recorded on the last row
    assert len(rows[-1][-1].split(";")) == 5


def test_cli_solve_absorbs_zero_total_target(tmp_path):
    src = tmp_path / "src.pgm"
    _blob_image(src, ny=4, nx=4)
    dst = tmp_path / "dst.pgm"
    write_netpbm(dst, np.zeros((1, 4, 4)))
    out = tmp_path / "out"
    cfg = _config(tmp_path / "run.cfg", source=src, target=dst, nt=4,
                  max_iters=6000, out=out)
    assert main(["solve", cfg]) == 0
    summary = _read_summary(out)
    deficit = float(summary["mass_deficit"])
    assert deficit == pytest.approx(-read_density_image(src).sum(), rel=1e-9)
    assert float(summary["source_integral"]) == pytest.approx(deficit, rel=1e-2)


def test_cli_solve_flag_overrides_config(tmp_path):
    img = tmp_path / "same.pgm"
    _blob_image(img)
    out = tmp_path / "out"
    cfg = _config(tmp_path / "run.cfg", source=img, target=img, nt=9,
                  max_iters=200, out=out)
    assert main(["solve", cfg, "--nt", "3"]) == 0
    frames = list((out / "density" / "channel_0").glob("frame_*.pgm"))
    assert len(frames) == 4


def test_cli_solve_vector_writes_composite_frames(tmp_path):
    rng = np.random.default_rng(42)
    src = tmp_path / "a.ppm"
    dst = tmp_path / "b.ppm"
    write_netpbm(src, 0.2 + 0.6 * rng.random((3, 4, 4)))
    write_netpbm(dst, 0.2 + 0.6 * rng.random((3, 4, 4)))
    out = tmp_path / "out"
    cfg = _config(tmp_path / "run.cfg", source=src, target=dst, nt=3,
                  max_iters=150, energy_rtol="1e-3", residual_tol="1e-6",
                  out=out)
    code = main(["solve", cfg])
    assert code in (0, 2)
    assert len(list((out / "density").glob("frame_*.ppm"))) == 4
    for c in range(3):
        assert len(list((out / "density" / f"channel_{c}").glob("*.pgm"))) == 4
    comp = read_density_image(out / "density" / "frame_0000.ppm")
    assert comp.shape == (3, 4, 4)
    # source frames stay grayscale in vector mode
    planes, _ = read_netpbm(out / "source" / "frame_0000.pgm")
    assert planes.shape[0] == 1


@pytest.mark.parametrize("setup,stage,excerpt", [
    ("dims", "read", "image dimensions differ"),
    ("mode", "read", "mode=vector needs color"),
    ("zero", "augment", "identically zero"),
])
def test_cli_solve_input_errors(tmp_path, capsys, setup, stage, excerpt):
    src = tmp_path / "src.pgm"
    dst = tmp_path / "dst.pgm"
    keys = {}
    if setup == "dims":
        write_netpbm(src, np.ones((1, 2, 2)) * 0.5)
        write_netpbm(dst, np.ones((1, 3, 3)) * 0.5)
    elif setup == "mode":
        write_netpbm(src, np.ones((1, 2, 2)) * 0.5)
        write_netpbm(dst, np.ones((1, 2, 2)) * 0.5)
        keys["mode"] = "vector"
    else:
        write_netpbm(src, np.zeros((1, 2, 2)))
        write_netpbm(dst, np.zeros((1, 2, 2)))
    cfg = _config(tmp_path / "run.cfg", source=src, target=dst,
                  out=tmp_path / "out", **keys)
    assert main(["solve", cfg]) == 1
    err = capsys.readouterr().err
    assert f"error [{stage}]:" in err and excerpt in err


def test_cli_sweep_singleton_matches_solve(tmp_path):
    src = tmp_path / "src.pgm"
    dst = tmp_path / "dst.pgm"
    _blob_image(src)
    _blob_image(dst, total_scale=0.6)
    solve_out = tmp_path / "solve_out"
    sweep_out = tmp_path / "sweep_out"
    common = dict(source=src, target=dst, nt=4, gamma=2.0, max_iters=800)
    cfg_a = _config(tmp_path / "a.cfg", out=solve_out, **common)
    cfg_b = _config(tmp_path / "b.cfg", out=sweep_out, **common)
    assert main(["solve", cfg_a]) == 0
    assert main(["sweep", cfg_b]) == 0

    with open(sweep_out / "sweep.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    direct = float(_read_summary(solve_out)["total_energy"])
    assert float(rows[0]["energy"]) == direct
    assert rows[0]["gamma"] == "2"
    assert rows[0]["error"] == ""


def test_cli_sweep_records_bad_points_without_failing(tmp_path, capsys):
    src = tmp_path / "src.pgm"
    dst = tmp_path / "dst.pgm"
    _blob_image(src)
    _blob_image(dst, total_scale=0.6)
    out = tmp_path / "out"
    cfg = _config(tmp_path / "run.cfg", source=src, target=dst, nt=4,
                  max_iters=800, out=out, gamma_grid="-1.0,1.0")
    assert main(["sweep", cfg]) == 0
    err = capsys.readouterr().err
    assert "gamma" in err
    with open(out / "sweep.csv", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert rows[0]["error"] != "" and rows[0]["energy"] == ""
    assert rows[1]["error"] == "" and float(rows[1]["energy"]) > 0.0


def test_cli_sweep_eta_grid_needs_vector_mode(tmp_path, capsys):
    img = tmp_path / "img.pgm"
    _blob_image(img)
    cfg = _config(tmp_path / "run.cfg", source=img, target=img,
                  out=tmp_path / "out", eta_grid="0.5,1.0")
    assert main(["sweep", cfg]) == 1
    assert "eta_grid applies to vector mode only" in capsys.readouterr().err


def test_cli_sweep_rejects_bad_thread_env(tmp_path, capsys, monkeypatch):
    img = tmp_path / "img.pgm"
    _blob_image(img)
    cfg = _config(tmp_path / "run.cfg", source=img, target=img,
                  out=tmp_path / "out")
    monkeypatch.setenv("OTVEC_THREADS", "many")
    assert main(["sweep", cfg]) == 1
    assert "OTVEC_THREADS must be an integer" in capsys.readouterr().err
