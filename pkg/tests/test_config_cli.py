import json

import numpy as np
import pytest
import yaml

from tinyquest.autograd import ContractError, Tensor
from tinyquest.binfmt import FormatError
from tinyquest.checkpoint import ConfigMismatchError, load_checkpoint, save_checkpoint
from tinyquest.cli import main
from tinyquest.config import RunConfig, apply_override
from tinyquest.diffusion import time_embedding
from tinyquest.finetune import TrainConfig, attach_and_init

TINY = ["task.dataset_size=64", "task.teacher_steps=4", "task.teacher_loss_threshold=100", "task.num_steps=5",
        "task.calib_per_step=2", "task.eval_samples=2", "quant.num_clusters=5", "train.epochs=1",
        "train.batch_size=2"]


def tiny_args(out_dir, *extra):
    args = []
    for item in [*TINY, f"paths.out_dir={out_dir}", *extra]:
        args += ["--set", item]
    return args


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out.strip(), captured.err.strip()


# -- config ---------------------------------------------------------------------------

def test_defaults_and_yaml_round_trip(tmp_path):
    cfg = RunConfig()
    assert (cfg.task.T, cfg.task.num_steps, cfg.quant.num_clusters, cfg.train.epochs) == (100, 20, 20, 20)
    cfg.dump(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml") == cfg
    assert cfg.train_config() == TrainConfig()


def test_overrides_parse_yaml_values():
    cfg = RunConfig.load(None, ["quant.bits_a=8", "quant.io_bits=null", "task.channels=[4, 8]", "seed=3"])
    assert cfg.quant.bits_a == 8 and cfg.quant.io_bits is None and cfg.task.channels == [4, 8] and cfg.seed == 3
    with pytest.raises(ContractError):
        apply_override({}, "quant.bits_a")
    with pytest.raises(ContractError):
        apply_override({}, "bogus.key=1")


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"quant": {"bitz": 4}}))
    with pytest.raises(ContractError, match="bitz"):
        RunConfig.load(tmp_path / "c.yaml")
    with pytest.raises(ContractError, match="unknown config sections"):
        RunConfig.from_dict({"extra": {}})


def test_validation():
    with pytest.raises(ContractError):
        RunConfig.load(None, ["quant.bits_w=16"])
    with pytest.raises(ContractError):
        RunConfig.load(None, ["task.num_steps=7"])
    with pytest.raises(ContractError):
        RunConfig.load(None, ["task.num_steps=5"])
    assert RunConfig.load(None, ["quant.bits_a=32"]).quant.bits_a == 32


def test_hash_scoping():
    a, b = RunConfig(), RunConfig.load(None, ["train.epochs=3", "paths.out_dir=elsewhere"])
    assert a.hash(("task",)) == b.hash(("task",))
    assert a.hash(("task", "quant")) == b.hash(("task", "quant"))
    assert a.hash() != b.hash()
    assert a.hash(("task",)) != RunConfig(seed=1).hash(("task",))
    assert a.stream("teacher") != a.stream("calibration")


# -- checkpoints ----------------------------------------------------------------------

def test_teacher_checkpoint_round_trip(random_unet, tmp_path):
    path = tmp_path / "t.qckp"
    save_checkpoint(path, random_unet, {"config_hash": "abc", "seed": 3})
    ckpt = load_checkpoint(path)
    assert not ckpt.quantized and ckpt.provenance["config_hash"] == "abc"
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 16, 16)).astype(np.float32))
    e = time_embedding(17, 32)
    assert ckpt.teacher.forward(x, e).data.tobytes() == random_unet.forward(x, e).data.tobytes()
    save_checkpoint(tmp_path / "u.qckp", ckpt.teacher, ckpt.provenance)
    assert path.read_bytes() == (tmp_path / "u.qckp").read_bytes()


def test_quantized_checkpoint_round_trip(random_unet, small_calib, tmp_path):
    qm = attach_and_init(random_unet, small_calib, TrainConfig(per_channel=True))
    path = tmp_path / "q.qckp"
    save_checkpoint(path, qm, {"config_hash": "h"})
    back = load_checkpoint(path).model
    assert back.history == qm.history and back.selection.all == qm.selection.all
    for t in (96, 41, 1):
        rec = small_calib[t]
        assert back.forward(rec.x_t, t).data.tobytes() == qm.forward(rec.x_t, t).data.tobytes()
    ckpt = load_checkpoint(path)
    assert ckpt.quantized and ckpt.teacher is ckpt.model.base


def test_checkpoint_corruption_and_hash(random_unet, tmp_path):
    path = tmp_path / "t.qckp"
    save_checkpoint(path, random_unet, {"config_hash": "abc"})
    ckpt = load_checkpoint(path)
    ckpt.check_hash("abc", path)
    with pytest.raises(ConfigMismatchError) as info:
        ckpt.check_hash("def", path)
    assert info.value.found == "abc" and info.value.expected == "def"
    ckpt.check_hash("def", path, allow_mismatch=True)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"ABCD"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="QCKP"):
        load_checkpoint(path)


# -- command line ---------------------------------------------------------------------

def test_write_config(capsys):
    code, out, _ = run(capsys, "write-config", "--set", "quant.bits_a=8")
    assert code == 0
    data = yaml.safe_load(out)
    assert data["quant"]["bits_a"] == 8 and set(data) == {"task", "quant", "train", "paths", "seed"}


def test_finetune_without_calibration_names_calibrate(tmp_path, capsys):
    code, _, err = run(capsys, "finetune", *tiny_args(tmp_path))
    assert code != 0
    error = json.loads(err)
    assert error["error"] == "MissingArtifactError" and error["produced_by"] == "calibrate"
    assert "tinyquest calibrate" in error["message"] and error["artifact"].endswith("calib.qcal")


def test_bad_config_is_structured_error(tmp_path, capsys):
    code, _, err = run(capsys, "quantize", "--set", "quant.bits_a=12", "--set", f"paths.out_dir={tmp_path}")
    assert code == 2 and json.loads(err)["error"] == "ContractError"


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    for cmd in ("teacher-train", "calibrate", "quantize"):
        assert main([cmd, *tiny_args(out, "quant.bits_a=32", "quant.bits_w=32")]) == 0
    return out


def test_passthrough_quantize_then_sample(chain, capsys):
    code, out, _ = run(capsys, "sample", "--checkpoint", str(chain / "ptq.qckp"), "--seeds", "0", "1",
                       *tiny_args(chain, "quant.bits_a=32", "quant.bits_w=32"))
    assert code == 0
    report = json.loads(open(out).read())
    assert report["seeds"] == [0, 1] and report["mean_trajectory_mse"] < 1e-3
    assert (chain / "samples_ptq_seed1.npy").exists()


def test_commands_are_idempotent(chain, capsys):
    before = (chain / "calib.qcal").read_bytes(), (chain / "ptq.qckp").read_bytes()
    for cmd in ("calibrate", "quantize"):
        assert main([cmd, *tiny_args(chain, "quant.bits_a=32", "quant.bits_w=32")]) == 0
    assert ((chain / "calib.qcal").read_bytes(), (chain / "ptq.qckp").read_bytes()) == before


def test_config_mismatch_refused_then_overridden(chain, capsys, tmp_path):
    calib = (chain / "calib.qcal").read_bytes()
    args = tiny_args(chain, "quant.bits_a=32", "quant.bits_w=32", "task.calib_per_step=3")
    code, _, err = run(capsys, "calibrate", *args)
    assert code == 2 and json.loads(err)["error"] == "ConfigMismatchError"
    assert (chain / "calib.qcal").read_bytes() == calib
    other = tmp_path / "other"
    code, out, _ = run(capsys, "calibrate", "--allow-config-mismatch", *args, "--set", f"paths.out_dir={other}",
                       "--set", f"paths.teacher={chain / 'teacher.qckp'}")
    assert code == 0 and out.endswith("calib.qcal") and str(other) in out


def test_analyze_probe_reports(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "decomposition", *tiny_args(tmp_path))
    assert code == 0
    summary = json.loads(open(out).read())
    assert set(summary) == {"0", "1", "2", "3", "4"}
    assert (tmp_path / "analysis" / "decomposition.csv").exists()
