import json

import pytest
import torch

from sbrcnn.exceptions import CheckpointError
from sbrcnn.heads import fcc_param_table, fcc_totals
from sbrcnn.r3cnn import SBRCNN
from sbrcnn.schemas import EvalReport, EvalResult, ExperimentConfig
from sbrcnn.services.checkpoint_service import CHECKPOINT_VERSION, CheckpointService
from sbrcnn.services.export_service import ExportService

from tests.conftest import make_tiny_model_config


@pytest.fixture
def service(tmp_path):
    return CheckpointService(root=tmp_path)


@pytest.fixture
def experiment():
    return ExperimentConfig(name="ckpt", model=make_tiny_model_config())


def test_checkpoint_round_trip(service, experiment, tmp_path):
    torch.manual_seed(0)
    model = SBRCNN(experiment.model)
    path = service.save(tmp_path / "a" / "checkpoint.pt", model, experiment, epoch=3, extra={"note": "x"})

    config, payload = service.load(path)
    assert config.model_dump() == experiment.model_dump()
    assert payload["extra"] == {"note": "x"}

    torch.manual_seed(1)
    fresh = SBRCNN(config.model)
    assert service.restore(path, fresh) == 3
    for key, value in model.state_dict().items():
        torch.testing.assert_close(fresh.state_dict()[key], value)


def test_relative_paths_resolve_under_root(service, experiment, tmp_path):
    service.save(tmp_path / "run" / "checkpoint.pt", SBRCNN(experiment.model), experiment, epoch=1)
    config, _ = service.load("run/checkpoint.pt")
    assert config.name == "ckpt"


def test_missing_checkpoint(service, tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        service.load(tmp_path / "nope.pt")


def test_missing_relative_checkpoint_names_the_given_path(service, tmp_path):
    with pytest.raises(CheckpointError) as info:
        service.load("runs/missing.pt")
    message = info.value.detail
    assert message.startswith("checkpoint not found: runs/missing.pt")
    assert str(tmp_path / "runs" / "missing.pt") in message


def test_version_mismatch(service, experiment, tmp_path):
    path = service.save(tmp_path / "old.pt", SBRCNN(experiment.model), experiment, epoch=1)
    payload = torch.load(path, weights_only=True)
    payload["version"] = CHECKPOINT_VERSION + 1
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version"):
        service.load(path)


def test_not_a_checkpoint(service, tmp_path):
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a torch archive")
    with pytest.raises(CheckpointError):
        service.load(garbage)
    plain = tmp_path / "plain.pt"
    torch.save({"weights": torch.zeros(1)}, plain)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        service.load(plain)


def test_weights_must_fit_the_model(service, experiment, tmp_path):
    path = service.save(tmp_path / "c.pt", SBRCNN(experiment.model), experiment, epoch=1)
    other = SBRCNN(make_tiny_model_config(train_loops=2, alternation="ab", num_head_pairs=2))
    with pytest.raises(CheckpointError, match="do not fit"):
        service.restore(path, other)


def test_format_param_table():
    text = ExportService.format_param_table(fcc_param_table())
    assert "12,846,080" in text
    assert "L2C (conv2b)" in text
    assert text.splitlines()[1] == "PARAMETER COUNT"


def test_format_fcc_totals():
    text = ExportService.format_fcc_totals(fcc_totals())
    assert "l2c_rect+nl_b" in text
    assert "13.983" in text


def test_format_eval_report():
    bbox = EvalResult(task="bbox", ap=0.5, ap50=0.75, ap75=0.5, ap_s=-1.0, ap_m=0.4, ap_l=0.6, per_class={"circle": 0.5})
    text = ExportService.format_eval_report(EvalReport(bbox=bbox, num_images=3, eval_loops=2))
    assert "Images: 3" in text
    assert "Evaluation loops: 2" in text
    assert "circle" in text
    assert "  -1.000" in text


def test_write_json(tmp_path):
    path = ExportService.write_json(fcc_totals()[:2], tmp_path / "out" / "totals.json")
    data = json.loads(path.read_text())
    assert [d["variant"] for d in data] == ["fc_baseline", "l2c_7x7"]
    assert ExportService.get_filename("eval", "json") == "eval.json"
