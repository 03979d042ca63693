import json
import threading
import zipfile

import pytest
import torch

from advtune.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    decode_state,
    encode_state,
    load_checkpoint,
    read_payload,
    save_checkpoint,
)
from advtune.metrics import MetricsLog, strip_wall_clock

from conftest import mnist_model


def make_ckpt(**kw):
    model = mnist_model("resnet18")
    opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9)
    model(torch.rand(2, 1, 28, 28)).sum().backward()
    opt.step()
    base = dict(parameters=model.state_dict(), phase="standard", epoch=3, optimizer_state=opt.state_dict(),
                fingerprint="abc", extra={"margin": 0.25})
    base.update(kw)
    return Checkpoint(**base)


def test_roundtrip_and_stable_payload(tmp_path):
    ckpt = make_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.phase == "standard" and back.epoch == 3 and back.extra == {"margin": 0.25}
    for k, v in ckpt.parameters.items():
        assert torch.equal(back.parameters[k], v) and back.parameters[k].dtype == v.dtype
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert read_payload(tmp_path / "a.ckpt") == read_payload(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    opt = torch.optim.SGD(mnist_model("resnet18").parameters(), lr=0.1, momentum=0.9)
    opt.load_state_dict(back.optimizer_state)


def test_state_encoding_handles_dtypes():
    state = {"b": torch.arange(3, dtype=torch.int64), "a": torch.rand(2, 2, dtype=torch.float64),
             "c": torch.tensor(True)}
    back = decode_state(encode_state(state))
    assert list(back) == ["a", "b", "c"]
    assert all(torch.equal(back[k], state[k]) for k in state)


def test_corrupt_payload_detected(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt(optimizer_state=None))
    with zipfile.ZipFile(tmp_path / "a.ckpt") as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    raw = bytearray(members["params.bin"])
    raw[-1] ^= 0xFF
    members["params.bin"] = bytes(raw)
    with zipfile.ZipFile(tmp_path / "b.ckpt", "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path / "b.ckpt")


def test_newer_format_refused(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt(format_version=FORMAT_VERSION + 1))
    with pytest.raises(CheckpointError, match="format version"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_missing_and_bad_phase(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")
    with pytest.raises(ValueError, match="phase"):
        make_ckpt(phase="warmup")


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]


# --------------------------------------------------------------------------- metrics


def test_metrics_append_only_and_reload(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl", run_id="r", fingerprint="f")
    log.emit(0, "train", loss=1.0, phase="standard")
    log.emit(0, "test", accuracy=0.5, phase="standard")
    again = MetricsLog(tmp_path / "m.jsonl", run_id="r", fingerprint="f")
    rec = again.emit(1, "train", loss=0.5, phase="standard")
    assert rec.seq == 2
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [x["seq"] for x in lines] == [0, 1, 2]
    assert lines[1]["accuracy"] == 0.5 and lines[0]["attack"] == "clean" and lines[0]["fingerprint"] == "f"


def test_metrics_threaded_emission_is_ordered(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")

    def work(i):
        for j in range(50):
            log.emit(j, f"t{i}")

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seqs = [json.loads(x)["seq"] for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert seqs == list(range(400))


def test_metrics_truncate_after(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    for e in range(3):
        log.emit(e, "train", phase="standard")
    for e in range(2):
        log.emit(e, "train", phase="robust")
    log.truncate_after(0, "robust")
    log.truncate_after(1, "standard")
    kept = [(r.phase, r.epoch) for r in MetricsLog(tmp_path / "m.jsonl").records]
    assert kept == [("standard", 0), ("standard", 1), ("robust", 0)]


def test_strip_wall_clock():
    log = MetricsLog()
    rec = log.emit(0, "train")
    assert "wall_clock" not in strip_wall_clock([rec])[0]
