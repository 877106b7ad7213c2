import csv

import numpy as np
import pytest

from sdlss import cli
from sdlss import config as cfgmod
from sdlss.data import read_pnm, synthetic_images
from sdlss.errors import ConfigError
from sdlss.metrics import psnr_db

TINY = ["--dataset", "synthetic", "--train-size", "48", "--val-size", "8", "--test-size", "64",
        "--k", "32", "--s", "8", "--m", "6", "--hidden", "24", "--epochs", "2", "--batch-size", "16"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", *TINY, "--out", str(out)]) == 0
    return out


# -- config ---------------------------------------------------------------------

def test_precedence_and_manifest_keys(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nk = 50\ns = 5\nstream.data = ignored\ncommand = train\n")
    cfg = cfgmod.resolve(cfgmod.read_kv(f), {"s": 7, "m": None})
    assert (cfg.k, cfg.s, cfg.m) == (50, 7, 10)
    assert cfgmod.resolve().T == 5 and cfgmod.resolve().alpha == 0.01
    bad = tmp_path / "bad.txt"
    bad.write_text("just words\n")
    with pytest.raises(ConfigError):
        cfgmod.read_kv(bad)
    with pytest.raises(ConfigError):
        cfgmod.resolve({"k": "many"})
    with pytest.raises(ConfigError):
        cfgmod.parse_dims("5,x")
    with pytest.raises(ConfigError):
        cfgmod.resolve({"s": 900}).validate()


def test_hash_ignores_volatile_keys():
    a = cfgmod.resolve({"out": "a", "threads": 1})
    b = cfgmod.resolve({"out": "b", "threads": 4})
    assert cfgmod.config_hash(a, "train") == cfgmod.config_hash(b, "train")
    assert cfgmod.config_hash(a, "train") != cfgmod.config_hash(cfgmod.resolve({"seed": 1}), "train")
    assert cfgmod.config_hash(a, "train") != cfgmod.config_hash(a, "eval")


def test_m_list_parsing():
    assert cli.parse_m_list("2:64") == [2, 4, 8, 16, 32, 64]
    assert cli.parse_m_list("1,5,10") == [1, 5, 10]
    with pytest.raises(ConfigError):
        cli.parse_m_list("8:2")


# -- commands -------------------------------------------------------------------

def test_missing_dataset_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SDLSS_DATA_DIR", raising=False)
    code = cli.main(["train", "--dataset", "fashion-mnist", "--data-dir", str(tmp_path), "--out", str(tmp_path)])
    assert code == 2
    assert "Fashion-MNIST not found" in capsys.readouterr().err
    assert cli.main(["train", "--dataset", str(tmp_path / "nope.idx"), "--out", str(tmp_path)]) == 2


def test_invalid_config_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", *TINY, "--s", "99", "--out", str(tmp_path)]) == 2
    assert "exceeds latent dim" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--k", "many"])
    assert exc.value.code == 2


def test_verify_regions_prints_11_pass(tmp_path, capsys):
    assert cli.main(["verify", "regions", "--k", "2", "--h", "4", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("11 ") and "PASS" in out
    table = rows(tmp_path / "regions.csv")
    assert table[0] == cli.REGION_COLUMNS and table[1][4:6] == ["11", "11"]
    assert (tmp_path / "regions.png").stat().st_size > 0
    assert cli.main(["verify", "regions", "--k", "4", "--h", "3", "--s", "2", "--arrangements", "3",
                     "--out", str(tmp_path)]) == 0


def test_verify_budget_refusal(tmp_path, capsys):
    assert cli.main(["verify", "regions", "--k", "4", "--h", "13", "--out", str(tmp_path)]) == 3
    assert "refused" in capsys.readouterr().err


def test_train_outputs(trained):
    table = rows(trained / "train_metrics.csv")
    assert table[0] == cli.TRAIN_COLUMNS
    assert len(table) == 3
    for name in ("checkpoint.sdls", "training_curve.png", "manifest.txt"):
        assert (trained / name).stat().st_size > 0
    man = cfgmod.read_kv(trained / "manifest.txt")
    assert man["command"] == "train" and man["schema_version"] == "1"
    assert "stream.latent" in man and "artifact.train_metrics.csv" in man
    assert man["artifact.train_metrics.csv"] == cfgmod.file_digest(trained / "train_metrics.csv")


def test_reconstruct_grid_and_rows(trained, tmp_path, capsys):
    out = tmp_path / "rec"
    code = cli.main(["reconstruct", "--checkpoint", str(trained / "checkpoint.sdls"), "--images", "synthetic",
                     "--count", "64", "--out", str(out)])
    assert code == 0
    assert read_pnm(out / "reconstruction.pgm").shape == (238, 238)
    assert read_pnm(out / "ground_truth.pgm").shape == (238, 238)
    table = rows(out / "reconstruct.csv")
    assert table[0] == cli.RECON_COLUMNS and len(table) == 65
    assert all(r[1] != "" for r in table[1:])
    assert all(int(r[4]) <= 8 for r in table[1:])


def test_reconstruct_from_measurements_has_empty_metrics(trained, tmp_path):
    Y = np.random.default_rng(0).standard_normal((5, 6))
    np.savetxt(tmp_path / "y.csv", Y, delimiter=",")
    out = tmp_path / "recm"
    assert cli.main(["reconstruct", "--checkpoint", str(trained / "checkpoint.sdls"),
                     "--measurements", str(tmp_path / "y.csv"), "--out", str(out)]) == 0
    table = rows(out / "reconstruct.csv")
    assert len(table) == 6 and all(r[1:4] == ["", "", ""] for r in table[1:])
    assert (out / "reconstruction.pgm").exists() and not (out / "ground_truth.pgm").exists()
    np.savetxt(tmp_path / "bad.csv", Y[:, :4], delimiter=",")
    assert cli.main(["reconstruct", "--checkpoint", str(trained / "checkpoint.sdls"),
                     "--measurements", str(tmp_path / "bad.csv"), "--out", str(out)]) == 4


def test_corrupted_checkpoint_magic(trained, tmp_path, capsys):
    bad = tmp_path / "bad.sdls"
    bad.write_bytes(b"NOPE" + (trained / "checkpoint.sdls").read_bytes()[4:])
    assert cli.main(["reconstruct", "--checkpoint", str(bad), "--images", "synthetic", "--out", str(tmp_path)]) == 4
    err = capsys.readouterr().err
    assert "FormatError" in err and "magic" in err


def test_checkpoint_dimension_mismatch(trained, tmp_path):
    np.save(tmp_path / "small.npy", np.zeros((4, 5, 5), np.uint8))
    code = cli.main(["reconstruct", "--checkpoint", str(trained / "checkpoint.sdls"),
                     "--images", str(tmp_path / "small.npy"), "--count", "4", "--out", str(tmp_path)])
    assert code == 4


def test_eval_is_deterministic(trained, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["eval", "--checkpoint", str(trained / "checkpoint.sdls"), "--out", str(out)]) == 0
        outs.append((out / "eval.csv").read_bytes())
    assert outs[0] == outs[1]
    assert "±" in capsys.readouterr().out
    table = rows(tmp_path / "a" / "eval.csv")
    assert table[0] == cli.EVAL_COLUMNS and [r[0] for r in table[1:]] == ["batch0", "all"]


def test_untrained_model_sits_near_the_constant_predictor_floor(tmp_path, capsys):
    # zero epochs is not allowed, so a one-step run with alpha=0 stands in for an untrained model
    out = tmp_path / "u"
    args = [*TINY, "--alpha", "0", "--epochs", "1", "--output", "sigmoid", "--out", str(out)]
    assert cli.main(["train", *args]) == 0
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.sdls"), "--out", str(out)]) == 0
    got = float(rows(out / "eval.csv")[2][5])
    X = synthetic_images(48 + 8 + 64, seed=cli.seeding.stream(0, "data", 1)).images[-64:]
    floor = np.mean([psnr_db(x, np.full_like(x, X.mean())) for x in X])
    assert floor - 6 < got < floor + 1


def test_sparsity_sweep_trains_per_s(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["eval", *TINY, "--epochs", "1", "--sparsity-sweep", "4,16,32", "--out", str(out)]) == 0
    table = rows(out / "re_vs_s.csv")
    assert table[0] == cli.SPARSITY_COLUMNS and [r[0] for r in table[1:]] == ["4", "16", "32"]
    assert (out / "re_vs_s.png").exists()


def test_threads_do_not_change_results(tmp_path):
    base = ["verify", "srec", "--m-sweep", "2:16", "--trials", "1500"]
    assert cli.main([*base, "--out", str(tmp_path / "t1")]) == 0
    assert cli.main([*base, "--threads", "3", "--out", str(tmp_path / "t3")]) == 0
    assert (tmp_path / "t1" / "srec.csv").read_bytes() == (tmp_path / "t3" / "srec.csv").read_bytes()
    assert rows(tmp_path / "t1" / "srec.csv")[0] == cli.SREC_COLUMNS


@pytest.mark.parametrize("argv, csvs", [
    (["train", *TINY], ["train_metrics.csv"]),
    (["verify", "srec", "--m-sweep", "2:8", "--trials", "500"], ["srec.csv"]),
    (["verify", "sweep", "--m-sweep", "2,20", "--instances", "4", "--T", "50"], ["sweep.csv"]),
    (["verify", "regions", "--k", "3", "--h", "5", "--arrangements", "2"], ["regions.csv"]),
])
def test_manifest_rerun_is_byte_identical(tmp_path, argv, csvs):
    first = tmp_path / "first"
    cli.main([*argv, "--out", str(first)])
    assert cli.main(["rerun", str(first / "manifest.txt"), "--out", str(tmp_path / "second")]) in (0, 1)
    for name in csvs:
        assert (first / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    a = cfgmod.read_kv(first / "manifest.txt")
    b = cfgmod.read_kv(tmp_path / "second" / "manifest.txt")
    assert a["config_hash"] == b["config_hash"]
    assert {k: v for k, v in a.items() if k.startswith("artifact.")} == \
        {k: v for k, v in b.items() if k.startswith("artifact.")}
