import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import tiny_model_config
from stimpute import cli
from stimpute.config import RunConfig
from stimpute.errors import NumericalError
from stimpute.metrics import mae, pcc, ssim
from stimpute.st_data import read_gene_grid


def tiny_run_config(tmp_path, **train):
    cfg = RunConfig().with_delta({
        "model": tiny_model_config().to_dict(),
        "train": dict(dict(patch=16, crop_stride=8, batch_size=4, epochs=1, checkpoint_every=1),
                      **train),
        "infer": {"window": 16, "window_stride": 8},
    })
    return cfg.save(tmp_path / "tiny.json")


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["synth", "--out-dir", str(out), "--size", "32", "--seed", "7"]) == 0
    return out


@pytest.fixture
def image_dir(tmp_path):
    from PIL import Image
    from conftest import smooth_image

    d = tmp_path / "images"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        Image.fromarray((smooth_image(rng, 40) * 255).astype(np.uint8)).save(d / f"{i}.png")
    return d


def test_synth_is_byte_identical(tmp_path, synth_dir):
    again = tmp_path / "again"
    cli.main(["synth", "--out-dir", str(again), "--size", "32", "--seed", "7"])
    names = sorted(p.name for p in synth_dir.iterdir())
    assert "truth.s2sgrid" in names and "sparse.tissue.s2sgrid" in names and "spec.json" in names
    for name in names:
        assert (synth_dir / name).read_bytes() == (again / name).read_bytes()
    truth = read_gene_grid(synth_dir / "truth.s2sgrid")
    sparse = read_gene_grid(synth_dir / "sparse.s2sgrid")
    assert truth.shape == (32, 32) and sparse.shape == (16, 16)
    np.testing.assert_array_equal(truth.values[::2, ::2], sparse.values)


def test_missing_required_argument_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["synth"])
    assert info.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "stimpute", "infer", "--out-dir", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "--checkpoint" in proc.stderr


def test_config_errors_exit_2(tmp_path, synth_dir):
    cfg = tiny_run_config(tmp_path)
    # co-training without an image directory
    code = cli.main(["train", "--config", str(cfg), "--sparse", str(synth_dir / "sparse.s2sgrid"),
                     "--out-dir", str(tmp_path / "r")])
    assert code == 2
    assert cli.main(["train", "--config", str(cfg), "--ablate", "no-gni"]) == 2


def test_numerical_failure_exits_3(tmp_path, synth_dir, monkeypatch, capsys):
    from stimpute import training

    def boom(state, *a):
        raise NumericalError("loss is nan", None)

    monkeypatch.setattr(training, "training_step", boom)
    code = cli.main(["train", "--config", str(tiny_run_config(tmp_path)), "--ablate", "no-gni",
                     "--sparse", str(synth_dir / "sparse.s2sgrid"), "--out-dir", str(tmp_path / "r")])
    assert code == 3
    assert "numerical failure" in capsys.readouterr().err


def test_ablation_flag_and_resolved_config(tmp_path, synth_dir):
    out = tmp_path / "run"
    t0 = time.time()
    code = cli.main(["train", "--config", str(tiny_run_config(tmp_path)), "--ablate", "no-gni",
                     "--ablate", "no-dc", "--sparse", str(synth_dir / "sparse.s2sgrid"),
                     "--out-dir", str(out)])
    assert code == 0 and time.time() - t0 < 60
    resolved = json.loads((out / "resolved-config.json").read_text())
    assert resolved["train"]["gni_cotraining"] is False
    assert resolved["model"]["use_dc"] is False
    assert resolved["config_hash"] == RunConfig.from_dict(resolved).hash()

    rerun = tmp_path / "rerun"
    assert cli.main(["train", "--config", str(out / "resolved-config.json"),
                     "--out-dir", str(rerun)]) == 0
    assert (out / "loss.jsonl").read_bytes() == (rerun / "loss.jsonl").read_bytes()


def test_cascade_sweep_writes_one_checkpoint_per_k(tmp_path, synth_dir, image_dir):
    from stimpute.checkpoint import read_checkpoint

    out = tmp_path / "sweep"
    code = cli.main(["train", "--config", str(tiny_run_config(tmp_path)), "--cascades", "1..2",
                     "--sparse", str(synth_dir / "sparse.s2sgrid"), "--images", str(image_dir),
                     "--out-dir", str(out)])
    assert code == 0
    for k in (1, 2):
        _, meta = read_checkpoint(out / f"k{k}" / "final.s2sckpt")
        assert meta["model_config"]["num_cascades"] == k
    assert cli.main(["train", "--cascades", "3..1", "--sparse", "x"]) == 2


@pytest.fixture
def trained(tmp_path, synth_dir):
    out = tmp_path / "model"
    cli.main(["train", "--config", str(tiny_run_config(tmp_path)), "--ablate", "no-gni",
              "--sparse", str(synth_dir / "sparse.s2sgrid"), "--out-dir", str(out)])
    return out / "final.s2sckpt"


def test_infer_is_deterministic(tmp_path, synth_dir, trained):
    outs = []
    for name in ("i1", "i2"):
        d = tmp_path / name
        assert cli.main(["infer", "--checkpoint", str(trained), "--sparse",
                         str(synth_dir / "sparse.s2sgrid"), "--window", "16", "--out-dir",
                         str(d)]) == 0
        outs.append(d)
    for name in ("recon.s2sgrid", "recon.tissue.s2sgrid", "recon.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert json.loads((outs[0] / "metrics.json").read_text())["shape"] == [32, 32]
    assert (outs[0] / "resolved-config.json").exists()
    recon = read_gene_grid(outs[0] / "recon.s2sgrid")
    sparse = read_gene_grid(synth_dir / "sparse.s2sgrid")
    np.testing.assert_array_equal(recon.values[::2, ::2], sparse.values)


def test_infer_rejects_mismatched_config(tmp_path, synth_dir, trained):
    other = RunConfig().save(tmp_path / "default.json")
    code = cli.main(["infer", "--checkpoint", str(trained), "--config", str(other), "--sparse",
                     str(synth_dir / "sparse.s2sgrid"), "--out-dir", str(tmp_path / "x")])
    assert code == 4
    (tmp_path / "bad.s2sckpt").write_bytes(b"nonsense")
    code = cli.main(["infer", "--checkpoint", str(tmp_path / "bad.s2sckpt"), "--sparse",
                     str(synth_dir / "sparse.s2sgrid"), "--out-dir", str(tmp_path / "y")])
    assert code == 4


def test_eval_identity_and_csv(tmp_path, synth_dir, capsys):
    truth = synth_dir / "truth.s2sgrid"
    assert cli.main(["eval", "--pred", str(truth), "--truth", str(truth)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert (rep["mae"], rep["pcc"], rep["ssim"]) == (0.0, 1.0, 1.0)

    cli.main(["synth", "--out-dir", str(tmp_path / "other"), "--size", "32", "--seed", "8"])
    pred = tmp_path / "other" / "truth.s2sgrid"
    csv_path = tmp_path / "table.csv"
    for _ in range(2):
        assert cli.main(["eval", "--pred", str(pred), "--truth", str(truth), "--csv",
                         str(csv_path), "--dataset", "synthetic", "--variant", "seed8"]) == 0
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("dataset,gene,variant")
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    p, t = read_gene_grid(pred), read_gene_grid(truth)
    pv, tv = p.values.astype(np.float64), t.values.astype(np.float64)
    assert float(row["mae"]) == mae(pv, tv, t.tissue)
    assert float(row["pcc"]) == pcc(pv, tv, t.tissue)
    assert float(row["ssim"]) == ssim(tv, pv, t.tissue)


def test_eval_shape_mismatch_exits_2(tmp_path, synth_dir):
    code = cli.main(["eval", "--pred", str(synth_dir / "sparse.s2sgrid"), "--truth",
                     str(synth_dir / "truth.s2sgrid")])
    assert code == 2


def test_missing_file_exits_4(tmp_path):
    assert cli.main(["eval", "--pred", str(tmp_path / "nope"), "--truth", str(tmp_path / "nope")]) == 4


def test_parse_cascades():
    assert cli.parse_cascades("3") == [3]
    assert cli.parse_cascades("1..5") == [1, 2, 3, 4, 5]
