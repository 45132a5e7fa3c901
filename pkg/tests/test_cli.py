import numpy as np
import pytest

from dynopool import cli, pool
from dynopool.train import CSV_HEADER, read_metrics


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "base.dynp"
    assert cli.main(["gen", "--seed", "1", "--n", "96", "--k", "4", "--size", "16", "--out", str(path)]) == 0
    return path


def run_train(dataset, out, *extra):
    metrics, ckpt = out / "m.csv", out / "c.ckpt"
    argv = ["train", "--data", str(dataset), "--metrics", str(metrics), "--ckpt", str(ckpt),
            "--batch-size", "32", *extra]
    assert cli.main(argv) == 0
    return metrics, ckpt


class TestGen:
    def test_header_and_repeatable_bytes(self, tmp_path, capsys):
        paths = [tmp_path / "a", tmp_path / "b"]
        for p in paths:
            assert cli.main(["gen", "--transform", "tile", "--n", "10", "--k", "3", "--size", "8", "--out", str(p)]) == 0
        assert "N=10 shape=1x16x16 K=3" in capsys.readouterr().out
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_odd_tile_size_is_usage_error(self, tmp_path, capsys):
        code = cli.main(["gen", "--transform", "tile", "--size", "15", "--out", str(tmp_path / "x")])
        assert code == cli.EXIT_USAGE
        assert "odd size" in capsys.readouterr().err

    def test_bad_flag_exits_with_usage(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["gen", "--out", "x", "--transform", "rotate"])
        assert info.value.code == cli.EXIT_USAGE


class TestTrainEval:
    def test_writes_metrics_and_checkpoint(self, dataset, tmp_path, capsys):
        metrics, ckpt = run_train(dataset, tmp_path, "--epochs", "2")
        assert ckpt.exists()
        assert [r.epoch for r in read_metrics(metrics)] == [0, 1, 2]
        assert cli.main(["eval", "--data", str(dataset), "--ckpt", str(ckpt)]) == 0
        assert "acc=" in capsys.readouterr().out

    def test_zero_epochs_has_only_initial_row(self, dataset, tmp_path):
        metrics, _ = run_train(dataset, tmp_path, "--epochs", "0")
        assert [r.epoch for r in read_metrics(metrics)] == [0]

    def test_resume(self, dataset, tmp_path):
        metrics, ckpt = run_train(dataset, tmp_path, "--epochs", "1")
        run_train(dataset, tmp_path, "--epochs", "2", "--resume", str(ckpt))
        assert [r.epoch for r in read_metrics(metrics)] == [0, 1, 2]

    def test_penalty_does_not_add_compute(self, dataset, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        plain, _ = run_train(dataset, tmp_path / "a", "--epochs", "4")
        taxed, _ = run_train(dataset, tmp_path / "b", "--epochs", "4", "--lambda", "1")
        assert read_metrics(taxed)[-1].gmacs <= read_metrics(plain)[-1].gmacs

    def test_missing_data_is_io_error(self, tmp_path, capsys):
        code = cli.main(["train", "--data", str(tmp_path / "none"), "--metrics", str(tmp_path / "m")])
        assert code == cli.EXIT_IO

    def test_corrupt_data_is_io_error(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK")
        assert cli.main(["eval", "--data", str(tmp_path / "bad"), "--ckpt", "x"]) == cli.EXIT_IO

    def test_unknown_arch(self, dataset, tmp_path):
        code = cli.main(["train", "--data", str(dataset), "--arch", "nope", "--metrics", str(tmp_path / "m")])
        assert code == cli.EXIT_USAGE

    def test_arch_file(self, dataset, tmp_path):
        arch = tmp_path / "net.txt"
        arch.write_text("input 1 16 16\nclasses 4\nconv 1 4 3\nrelu\ndynopool p0 0.5 0.5\ngap\nlinear 4 4\n")
        run_train(dataset, tmp_path, "--epochs", "1", "--arch", str(arch))

    def test_arch_file_pools_become_resizers(self, dataset, tmp_path):
        arch = tmp_path / "net.txt"
        arch.write_text("input 1 16 16\nclasses 4\nconv 1 8 3\nrelu\nmaxpool 2\n"
                        "conv 8 16 3 stride=2\nrelu\ngap\nlinear 16 4\n")
        metrics, _ = run_train(dataset, tmp_path, "--epochs", "0", "--arch", str(arch))
        row = read_metrics(metrics)[0]
        assert list(row.ratios) == ["p0", "p1"]
        assert [(s.h, s.w) for s in row.shapes] == [(16, 16), (8, 8)]

    def test_mismatched_checkpoint(self, dataset, tmp_path, capsys):
        _, ckpt = run_train(dataset, tmp_path, "--epochs", "0")
        code = cli.main(["eval", "--data", str(dataset), "--arch", "tiny5", "--ckpt", str(ckpt)])
        assert code == cli.EXIT_IO
        assert "layer" in capsys.readouterr().err


class TestGradcheck:
    def test_lists_every_check(self, capsys):
        assert cli.main(["gradcheck", "--configs", "3"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.endswith("ok")]
        assert len(lines) >= 8

    def test_flipped_alpha_gradient_is_caught(self, monkeypatch, capsys):
        def flipped(alpha):
            r = alpha.reciprocal()
            # same value, negated gradient
            return r.detach() * 2.0 - r

        monkeypatch.setattr(pool, "alpha_to_ratio", flipped)
        assert cli.main(["gradcheck", "--configs", "5"]) == cli.EXIT_NUMERIC
        assert "dynopool.alpha" in capsys.readouterr().err


class TestReport:
    def test_frozen_run_keeps_halving_schedule(self, dataset, tmp_path, capsys):
        metrics, _ = run_train(dataset, tmp_path, "--epochs", "1", "--freeze-alpha")
        svg = tmp_path / "s.svg"
        assert cli.main(["report", "--metrics", str(metrics), "--svg", str(svg)]) == 0
        out = capsys.readouterr().out
        assert "0: 16x16" in out and "3: 8x8" in out and "6: 4x4" in out
        assert svg.read_text().startswith("<svg")

    def test_gmacs_consistent_with_shapes(self, dataset, tmp_path):
        metrics, _ = run_train(dataset, tmp_path, "--epochs", "2", "--lambda", "1")
        widths = {"0": (1, 8), "3": (8, 16), "6": (16, 32)}
        for row in read_metrics(metrics):
            convs = sum(widths[s.layer_id][0] * widths[s.layer_id][1] * 9 * s.h * s.w for s in row.shapes)
            expected = (convs + 32 * 4) / 1e9
            assert row.gmacs == pytest.approx(expected, rel=1e-6)

    def test_missing_file(self, tmp_path):
        assert cli.main(["report", "--metrics", str(tmp_path / "none.csv")]) != 0

    def test_empty_metrics(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(",".join(CSV_HEADER) + "\n")
        assert cli.main(["report", "--metrics", str(path)]) == cli.EXIT_USAGE


def test_sweep_writes_csv(dataset, tmp_path):
    out = tmp_path / "sweep.csv"
    argv = ["sweep", "--data", str(dataset), "--epochs", "1", "--batch-size", "48",
            "--lambdas", "0,1", "--seeds", "0", "--out", str(out)]
    assert cli.main(argv) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "lambda,seed,gmacs,eval_acc"
    assert len(lines) == 3
    assert np.isfinite([float(v) for v in lines[1].split(",")]).all()
