import pytest
import torch

from services.backbone import EventDetector
from services.exceptions import CheckpointIoError, VersionMismatch
from storage.checkpoints import load_checkpoint, read_checkpoint, save_checkpoint


def test_round_trip_reproduces_outputs(tmp_path, tiny_backbone):
    model = EventDetector(tiny_backbone, n_out=3)
    model.train()
    model(torch.randn(8, 32, 32))  # move the batch-norm running statistics
    model.eval()
    path = save_checkpoint(model, str(tmp_path / "ckpt" / "model.pt"), {"seed": 3})

    restored = load_checkpoint(path).eval()
    x = torch.randn(4, 32, 32)
    torch.testing.assert_close(restored(x), model(x))
    assert read_checkpoint(path)["meta"] == {"seed": 3}
    assert not list((tmp_path / "ckpt").glob("*.tmp"))


def test_headless_model_round_trip(tmp_path, tiny_backbone):
    model = EventDetector(tiny_backbone).eval()
    restored = load_checkpoint(save_checkpoint(model, str(tmp_path / "proto.pt"))).eval()
    assert restored.head is None
    x = torch.randn(2, 32, 32)
    torch.testing.assert_close(restored.embedder(x), model.embedder(x))


def test_truncated_file_is_rejected(tmp_path, tiny_backbone):
    path = save_checkpoint(EventDetector(tiny_backbone, n_out=2), str(tmp_path / "model.pt"))
    data = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(data[: len(data) // 2])
    with pytest.raises(CheckpointIoError):
        load_checkpoint(path)


def test_missing_and_foreign_files(tmp_path):
    with pytest.raises(CheckpointIoError):
        load_checkpoint(str(tmp_path / "absent.pt"))
    torch.save([1, 2, 3], tmp_path / "list.pt")
    with pytest.raises(CheckpointIoError):
        load_checkpoint(str(tmp_path / "list.pt"))


def test_unknown_version(tmp_path):
    torch.save({"format_version": 99}, tmp_path / "future.pt")
    with pytest.raises(VersionMismatch):
        read_checkpoint(str(tmp_path / "future.pt"))
