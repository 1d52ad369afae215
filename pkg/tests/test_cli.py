import json

import numpy as np
import pytest
from PIL import Image

from rccformer.cli import build_parser, main
from rccformer.core.checkpoint import save_checkpoint
from rccformer.core.model_config import dump_run_config
from rccformer.core.tensor import Tensor
from rccformer.data.loader import read_manifest, write_image
from rccformer.nets.model import RCCFormer, forward
from rccformer.render import read_grid

SYNTH_SETS = ["--set", "synth.n_train=2", "--set", "synth.n_val=1",
              "--set", "synth.image_size=32", "--set", "synth.count_max=4",
              "--set", "synth.head_radius=2"]


@pytest.fixture
def config_file(tmp_path, mini_run):
    path = tmp_path / "run.yaml"
    dump_run_config(mini_run, path)
    return path


@pytest.fixture
def checkpoint(tmp_path, tiny_config, rng):
    model = RCCFormer.from_seed(tiny_config, 0)
    forward(Tensor(rng.random((2, 3, 32, 32))), model)
    path = tmp_path / "model.rcck"
    save_checkpoint(path, tiny_config, model.state_dict())
    return path


def test_synth_writes_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["synth", "--out", str(out), "--seed", "5", *SYNTH_SETS]) == 0
    assert [row["seed"] for row in read_manifest(out)] == [5, 6, 7]
    assert "✅" in capsys.readouterr().err


def test_synth_refuses_existing_dataset(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["synth", "--out", str(out), *SYNTH_SETS]) == 0
    assert main(["synth", "--out", str(out), *SYNTH_SETS]) == 1
    assert "❌" in capsys.readouterr().err
    assert main(["synth", "--out", str(out), "--force", *SYNTH_SETS]) == 0


def test_bad_seed_is_a_usage_error():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["synth", "--seed", "-1"])


def test_unknown_set_key_fails(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--set", "synth.heads=3"]) == 1


def test_train_zero_epochs(config_file, mini_run):
    assert main(["train", "--config", str(config_file), "--set", "epochs=0"]) == 0
    lines = mini_run.log_path.read_text().splitlines()
    assert len(lines) == 1
    header = json.loads(lines[0])
    assert set(header) == {"run", "initial"}
    assert header["run"]["seed"] == mini_run.seed
    assert mini_run.checkpoint_path.exists()
    # a second run needs --force
    assert main(["train", "--config", str(config_file), "--set", "epochs=0"]) == 1
    args = ["train", "--config", str(config_file), "--set", "epochs=0", "--force"]
    assert main(args) == 0


def test_eval_prints_table_and_writes_rows(config_file, checkpoint, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--config", str(config_file), "--checkpoint", str(checkpoint),
                 "--out", str(out)]) == 0
    assert "overall" in capsys.readouterr().out
    lines = (out / "eval_val.jsonl").read_text().splitlines()
    rows = [json.loads(line) for line in lines]
    assert [row["id"] for row in rows] == ["val_00000", "val_00001"]


def test_infer_pads_and_writes_outputs(checkpoint, tmp_path, capsys):
    image = tmp_path / "scene.png"
    write_image(image, np.full((40, 32, 3), 128, dtype=np.uint8))
    out = tmp_path / "pred"
    assert main(["infer", str(checkpoint), str(image), "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "⚠️" in captured.err
    grid = read_grid(out / "scene.rccd")
    assert grid.shape == (8, 4)
    assert float(captured.out.strip()) == float(grid.sum())
    with Image.open(out / "scene_heatmap.png") as heat:
        assert heat.size == (32, 64)


def test_infer_missing_checkpoint(tmp_path):
    image = tmp_path / "scene.png"
    write_image(image, np.zeros((32, 32, 3), dtype=np.uint8))
    assert main(["infer", str(tmp_path / "none.rcck"), str(image)]) == 1


def test_gradcheck_ops(capsys):
    assert main(["gradcheck", "--scope", "ops"]) == 0
    captured = capsys.readouterr()
    assert "matmul" in captured.out
    assert "✅" in captured.err


def test_unknown_ablation_matrix(config_file):
    assert main(["ablate", "--config", str(config_file), "--matrix", "table9"]) == 1
