import csv

import numpy as np
import pytest

from featslam.cli import main
from featslam.datasets import read_trajectory
from featslam.gaussians import deserialize

TINY = """\
scene_frames = 10
scene_width = 32
scene_height = 32
pretrain_epochs = 5
pretrain_views = 4
codebook_k = 8
mapping_iterations = 5
map_samples = 4000
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.txt").write_text(TINY)
    cfg = str(d / "tiny.txt")
    codes = [
        main(["generate", "--config", cfg, "--output", str(d / "ds")]),
        main(["pretrain", "--config", cfg, "--dataset", str(d / "ds"), "--output", str(d / "models")]),
        main(["run", "--config", cfg, "--dataset", str(d / "ds"), "--output", str(d / "run"),
              "--codec", str(d / "models/codec.bin"), "--codebook", str(d / "models/codebook.bin")]),
    ]
    return d, codes


def test_generate_pretrain_run(workdir):
    d, codes = workdir
    assert codes == [0, 0, 0]
    assert len(list((d / "ds" / "rgb").glob("*.png"))) == 10
    for name in ("trajectory.txt", "map.bin", "metrics.csv", "loop_log.csv", "prune_log.csv", "config.txt"):
        assert (d / "run" / name).is_file()
    assert len(read_trajectory(d / "run" / "trajectory.txt")) == 10
    assert deserialize(d / "run" / "map.bin").feature_dim == 16


def test_query_and_eval(workdir):
    d, _ = workdir
    assert main(["query", "--dataset", str(d / "ds"), "--run", str(d / "run"),
                 "--output", str(d / "q"), "--query-class", "2"]) == 0
    assert (d / "q" / "relevancy_00000.png").is_file()
    rows = list(csv.reader(open(d / "q" / "localization.csv")))
    assert rows[0] == ["id", "score", "x", "y", "z"]
    assert all(float(r[1]) > 0.6 for r in rows[1:])
    assert main(["eval", "--dataset", str(d / "ds"), "--run", str(d / "run"), "--stride", "3"]) == 0
    head, vals = list(csv.reader(open(d / "run" / "eval.csv")))
    assert head == ["ate_rmse", "mean_psnr", "miou", "accuracy", "frames_evaluated"]
    assert int(vals[4]) == 4 and np.isfinite(float(vals[1]))


def test_query_file_vector(workdir, tmp_path):
    d, _ = workdir
    np.savetxt(tmp_path / "q.txt", np.ones(32))
    assert main(["query", "--dataset", str(d / "ds"), "--run", str(d / "run"),
                 "--output", str(tmp_path), "--query-file", str(tmp_path / "q.txt")]) == 0
    assert main(["query", "--dataset", str(d / "ds"), "--run", str(d / "run"),
                 "--output", str(tmp_path), "--query-class", "99"]) == 3


def test_config_errors_exit_3(tmp_path, workdir):
    d, _ = workdir
    (tmp_path / "bad.txt").write_text("seed = x\n")
    assert main(["generate", "--config", str(tmp_path / "bad.txt"), "--output", str(tmp_path / "o")]) == 3
    assert main(["run", "--config", str(tmp_path / "missing.txt"), "--dataset", ".", "--output", "o"]) == 3
    assert main(["run", "--dataset", str(d / "ds"), "--output", str(tmp_path / "o"),
                 "--codec", str(d / "models/codec.bin")]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 3
    with pytest.raises(SystemExit) as exc:
        main(["run", "--mode", "stereo", "--output", "o"])
    assert exc.value.code == 3


def test_dataset_errors_exit_4(tmp_path):
    assert main(["run", "--dataset", str(tmp_path / "nowhere"), "--output", str(tmp_path / "o")]) == 4
    assert main(["run", "--output", str(tmp_path / "o")]) == 4
    assert main(["run", "--mode", "tum", "--dataset", str(tmp_path), "--output", str(tmp_path / "o")]) == 4
