import pytest

from i3net import cli
from i3net.synth import read_dataset
from i3net.train import I3NetState


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cli.main(["synth", "--out", str(root / "src"), "--domain", "source", "--count", "16", "--seed", "3"])
    cli.main(["synth", "--out", str(root / "tgt"), "--domain", "target", "--count", "16", "--seed", "4",
              "--freq", "0.6,0.3,0.1"])
    cfg = root / "run.cfg"
    cfg.write_text(f"source_data = {root / 'src'}\ntarget_data = {root / 'tgt'}\ntest_data = {root / 'tgt'}\n"
                   "epochs = 1\nmlc_epochs = 1\nwall_clock = false\n")
    return root, cfg


def test_synth_writes_dataset(tmp_path, capsys):
    code, out = run(capsys, "synth", "--out", tmp_path / "d", "--domain", "target", "--count", 5, "--seed", 1)
    assert code == 0 and "wrote 5 target images" in out.out
    ds = read_dataset(tmp_path / "d")
    assert len(ds) == 5 and ds.images.shape == (5, 3, 64, 64)


def test_synth_rejects_bad_frequencies(tmp_path, capsys):
    code, out = run(capsys, "synth", "--out", tmp_path / "d", "--domain", "source", "--count", 2,
                    "--freq", "0.5,0.6")
    assert code == 2 and "sum to 1" in out.err


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_gradcheck_single_op(capsys):
    code, out = run(capsys, "gradcheck", "--op", "total", "--seeds", 5)
    assert code == 0 and "total" in out.out and "ok" in out.out


def test_pretrain_train_eval_export(datasets, tmp_path, capsys):
    root, cfg = datasets
    code, out = run(capsys, "pretrain-mlc", "--config", cfg, "--out", tmp_path / "mlc.i3nt")
    assert code == 0 and "mlc loss" in out.out
    assert I3NetState.load(tmp_path / "mlc.i3nt").model is not None

    code, out = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run", "--disable", "copm",
                    "--log-every", 1)
    assert code == 0 and "map = " in out.out
    ckpt = tmp_path / "run" / "checkpoint_final.i3nt"
    assert ckpt.is_file() and (tmp_path / "run" / "metrics.jsonl").is_file()

    code, out = run(capsys, "eval", "--checkpoint", ckpt, "--data", root / "tgt", "--out", tmp_path / "r.txt")
    assert code == 0 and out.out == (tmp_path / "r.txt").read_text()
    assert "images = 16" in out.out and "ap[2] = " in out.out

    image = sorted((root / "tgt").glob("*.ppm"))[0]
    code, out = run(capsys, "export-attention", "--checkpoint", ckpt, "--image", image,
                    "--out", tmp_path / "a.pgm")
    assert code == 0
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == len(b"P5\n16 16\n255\n") + 256


def test_train_rejects_unknown_component(datasets, tmp_path, capsys):
    _, cfg = datasets
    code, out = run(capsys, "train", "--config", cfg, "--out", tmp_path / "x", "--disable", "mlc")
    assert code == 2 and "unknown components" in out.err


def test_missing_files_reported(tmp_path, capsys):
    code, out = run(capsys, "eval", "--checkpoint", tmp_path / "none.i3nt", "--data", tmp_path)
    assert code == 2 and "error:" in out.err
