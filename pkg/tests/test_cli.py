import json

import pytest

from partflow.cli import main
from partflow.config import TrainConfig
from partflow.dataset_io import read_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config + datasets + trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = TrainConfig(
        seed=2, p_max=4, k_tokens=2, c_dim=8, m_protos=3, d_feat=16,
        points_per_part=32, render_size=16, min_parts=1, max_parts=3,
        epochs_stage0=2, epochs_stage1=2, epochs_stage2=2, batch_size=8,
        backbone_blocks=1, backbone_hidden=16, backbone_heads=2,
        sample_steps=2,
    )
    cfg_path = root / "config.json"
    cfg.save(cfg_path)
    data = root / "data"
    heldout = root / "heldout"
    assert main(["gen-data", "--config", str(cfg_path), "--count", "10",
                 "--seed", "50", "--out", str(data)]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--count", "4",
                 "--seed", "7150", "--out", str(heldout)]) == 0
    run = root / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(run)]) == 0
    return {
        "root": root,
        "cfg_path": cfg_path,
        "data": data,
        "heldout": heldout,
        "ckpt": run / "checkpoint_stage2.ckpt",
    }


def test_gen_data_wrote_dataset(workspace):
    items = read_dataset(workspace["data"])
    assert len(items) == 10


def test_gen_data_jobs_matches_serial(workspace, tmp_path):
    out = tmp_path / "par"
    assert main(["gen-data", "--config", str(workspace["cfg_path"]),
                 "--count", "10", "--seed", "50", "--out", str(out),
                 "--jobs", "2"]) == 0
    serial = read_dataset(workspace["data"])
    parallel = read_dataset(out)
    assert [o.object_id for o, _ in serial] == [o.object_id for o, _ in parallel]


def test_eval_writes_report(workspace, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--ckpt", str(workspace["ckpt"]), "--data",
                 str(workspace["heldout"]), "--out", str(out)]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["schema_version"] == 1
    assert 0.0 <= report["fscore"] <= 1.0
    assert (out / "per_object.json").is_file()


def test_eval_oracle_passthrough_perfect(workspace, tmp_path):
    out = tmp_path / "oracle"
    assert main(["eval", "--ckpt", str(workspace["ckpt"]), "--data",
                 str(workspace["heldout"]), "--out", str(out),
                 "--oracle-passthrough"]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["chamfer_l2"] == 0.0
    assert report["fscore"] == 1.0
    assert report["gate_mode"] == "passthrough"


def test_sample_writes_parts_and_record(workspace, tmp_path):
    out = tmp_path / "samples"
    items = read_dataset(workspace["heldout"])
    target = items[0][0].object_id
    assert main(["sample", "--ckpt", str(workspace["ckpt"]), "--data",
                 str(workspace["heldout"]), "--out", str(out),
                 "--object-id", target]) == 0
    record = json.loads((out / target / "record.json").read_text())
    assert record["object_id"] == target
    assert len(record["active_slots"]) >= 1
    plys = list((out / target).glob("part_*.ply"))
    assert len(plys) == len(record["active_slots"])


def test_inspect_gates_jsonl(workspace, capsys):
    assert main(["inspect-gates", "--ckpt", str(workspace["ckpt"]),
                 "--data", str(workspace["heldout"])]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) == {"object_id", "alpha", "selected", "mask"}
    assert len(rec["alpha"]) == 4


def test_export_prototypes(workspace, tmp_path):
    out = tmp_path / "protos.json"
    assert main(["export-prototypes", "--ckpt", str(workspace["ckpt"]),
                 "--data", str(workspace["heldout"]), "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert len(payload["prototypes"]) == 3
    assert len(payload["assignments"]) == 4


def test_exit_code_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    code = main(["gen-data", "--config", str(bad), "--count", "1",
                 "--out", str(tmp_path / "x")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config"


def test_exit_code_missing_dataset(workspace, tmp_path, capsys):
    code = main(["train", "--config", str(workspace["cfg_path"]),
                 "--data", str(tmp_path / "nothing"), "--out",
                 str(tmp_path / "out")])
    assert code == 3
    assert json.loads(capsys.readouterr().err.strip())["error"] == "dataset"


def test_exit_code_missing_checkpoint(workspace, tmp_path, capsys):
    code = main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data",
                 str(workspace["heldout"]), "--out", str(tmp_path / "o")])
    assert code == 4
    assert json.loads(capsys.readouterr().err.strip())["error"] == "checkpoint"


def test_unknown_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0


def test_cli_eval_deterministic(workspace, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["eval", "--ckpt", str(workspace["ckpt"]), "--data",
                     str(workspace["heldout"]), "--out", str(out)]) == 0
    assert (out_a / "metrics.json").read_text() == \
        (out_b / "metrics.json").read_text()
