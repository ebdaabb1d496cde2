"""CLI: subcommand outputs, sibling figures, determinism, error paths."""
import pytest

from quantkv.cli import main
from quantkv.traces import read_trace

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def run(*argv):
    return main([str(a) for a in argv])


def gen_trace(tmp_path, name="t.kvtr", seed=3):
    path = tmp_path / name
    rc = run("gen", "--out", path, "--seq", 64, "--d", 16,
             "--outlier-channels", 2, "--outlier-gain", 20, "--seed", seed)
    assert rc == 0
    return path


def data_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return lines[0].split("\t"), [l.split("\t") for l in lines[1:]]


def test_gen_writes_trace(tmp_path, capsys):
    path = gen_trace(tmp_path)
    out = capsys.readouterr().out
    assert "config: command=gen" in out
    assert path.stat().st_size == 24 + 3 * 64 * 16 * 4
    trace = read_trace(path)
    assert trace.seq_len == 64 and trace.head_dim == 16


def test_gen_is_deterministic(tmp_path):
    a = gen_trace(tmp_path, "a.kvtr", seed=7)
    b = gen_trace(tmp_path, "b.kvtr", seed=7)
    assert a.read_bytes() == b.read_bytes()
    c = gen_trace(tmp_path, "c.kvtr", seed=8)
    assert a.read_bytes() != c.read_bytes()


def test_sweep_outputs(tmp_path):
    trace = gen_trace(tmp_path)
    out = tmp_path / "sweep.tsv"
    assert run("sweep", "--trace", trace, "--group", 16, "--out", out,
               "--threads", 1) == 0
    header, rows = data_rows(out)
    assert header == ["k_axis", "k_rotation", "v_axis", "v_rotation", "mse_output"]
    assert len(rows) == 36
    assert all(float(r[4]) >= 0 for r in rows)
    grid_header, grid_rows = data_rows(tmp_path / "sweep_grid.tsv")
    assert grid_header == ["key_config", "value_config", "mse_output"]
    assert len(grid_rows) == 36
    png = tmp_path / "sweep.png"
    assert png.read_bytes()[:8] == PNG_MAGIC


def test_train_outputs_and_determinism(tmp_path):
    trace = gen_trace(tmp_path)
    dirs = [tmp_path / "run1", tmp_path / "run2"]
    for d in dirs:
        assert run("train", "--trace", trace, "--out", d, "--rank", 8,
                   "--steps", 5, "--batch", 16, "--group", 16) == 0
        assert (d / "adapter_L0_H0.kvla").exists()
        assert (d / "loss.png").read_bytes()[:8] == PNG_MAGIC
        header, rows = data_rows(d / "loss.tsv")
        assert header == ["layer", "head", "step", "loss"]
        assert len(rows) == 5
    assert (dirs[0] / "adapter_L0_H0.kvla").read_bytes() == \
        (dirs[1] / "adapter_L0_H0.kvla").read_bytes()
    assert (dirs[0] / "loss.tsv").read_bytes() == (dirs[1] / "loss.tsv").read_bytes()


def test_report_errors_with_adapters(tmp_path):
    trace = gen_trace(tmp_path)
    adir = tmp_path / "adapters"
    assert run("train", "--trace", trace, "--out", adir, "--rank", 8,
               "--steps", 5, "--batch", 16, "--group", 16) == 0
    out = tmp_path / "err.tsv"
    assert run("report", "errors", "--trace", trace, "--out", out,
               "--group", 16, "--adapters", adir) == 0
    header, rows = data_rows(out)
    assert header == ["layer", "head", "mse_weights", "mse_outputs"]
    assert len(rows) == 1
    assert float(rows[0][2]) >= 0 and float(rows[0][3]) >= 0
    assert (tmp_path / "err.png").read_bytes()[:8] == PNG_MAGIC

    single = tmp_path / "err1.tsv"
    assert run("report", "errors", "--trace", trace, "--out", single,
               "--group", 16, "--adapters", adir / "adapter_L0_H0.kvla") == 0
    assert data_rows(single)[1] == rows


def test_report_scales(tmp_path):
    trace = gen_trace(tmp_path)
    out = tmp_path / "scales.tsv"
    assert run("report", "scales", "--trace", trace, "--out", out,
               "--group", 16) == 0
    header, rows = data_rows(out)
    assert header == ["layer", "head", "axis", "rotation", "mean_scale"]
    assert {(r[2], r[3]) for r in rows} == {("channel", "none"), ("channel", "post"),
                                            ("token", "none"), ("token", "post")}
    assert (tmp_path / "scales.png").read_bytes()[:8] == PNG_MAGIC


def test_report_ranks(tmp_path):
    trace = gen_trace(tmp_path)
    out = tmp_path / "ranks.tsv"
    assert run("report", "ranks", "--trace", trace, "--out", out, "--group", 16,
               "--ranks", "4,8", "--steps", 2, "--threads", 1) == 0
    header, rows = data_rows(out)
    assert header == ["rank", "mse_weights", "mse_outputs", "params"]
    assert [int(r[0]) for r in rows] == [4, 8]
    assert [int(r[3]) for r in rows] == [4 * 16 * 2, 4 * 16 * 4]
    assert (tmp_path / "ranks.png").read_bytes()[:8] == PNG_MAGIC


def test_bench_metrics_and_cache(tmp_path, capsys):
    trace = gen_trace(tmp_path)
    out = tmp_path / "bench.tsv"
    cache_path = tmp_path / "c.kvlc"
    assert run("bench", "--trace", trace, "--out", out, "--decode-steps", 4,
               "--group", 16, "--residual", 16, "--save-cache", cache_path) == 0
    assert cache_path.read_bytes()[:4] == b"KVLC"
    _, rows = data_rows(out)
    metrics = {r[0]: r[1] for r in rows}
    assert int(metrics["tokens_total"]) == 64
    assert int(metrics["quantized_tokens"]) == 48
    assert int(metrics["residual_tokens"]) == 16
    assert int(metrics["cache_bytes_total"]) > 0
    assert float(metrics["fp16_over_packed_ratio"]) > 1.0
    assert float(metrics["blocked_mean_ms"]) > 0.0
    assert "ratio" in capsys.readouterr().out


def test_precision_stdout_and_file(tmp_path, capsys):
    assert run("precision", "--seq", 8192, "--d", 128) == 0
    assert "bits_per_element\t2.464844" in capsys.readouterr().out
    out = tmp_path / "prec.tsv"
    assert run("precision", "--seq", 8192, "--d", 128, "--rank", 256,
               "--out", out) == 0
    assert "bits_per_element\t2.716797" in out.read_text()


def test_cli_argument_errors():
    with pytest.raises(SystemExit) as err:
        main(["sweep", "--no-such-flag"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["train", "--trace", "t", "--out", "d", "--rank", "7"])
    assert err.value.code == 2


def test_cli_runtime_errors(tmp_path, capsys):
    missing = tmp_path / "missing.kvtr"
    assert run("sweep", "--trace", missing, "--out", tmp_path / "x.tsv") == 1
    assert "error:" in capsys.readouterr().err

    trace = gen_trace(tmp_path)
    assert run("sweep", "--trace", trace, "--bits", 5,
               "--out", tmp_path / "x.tsv") == 1
    assert "bits" in capsys.readouterr().err

    assert run("gen", "--out", tmp_path / "bad.kvtr", "--seq", 8, "--d", 4,
               "--outlier-channels", 9) == 1
    assert "outlier_channels" in capsys.readouterr().err
