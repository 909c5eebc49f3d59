import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from smartseg.cli import main
from smartseg.dataio import (FormatError, RunManifest, directory_checksum, read_config_file, read_dataset,
                             read_pbm, read_pgm, write_config_file, write_dataset, write_pbm, write_pgm)
from smartseg.flow import FlowKind, FlowProvider
from smartseg.synthdata import dataset_checksum
from smartseg.trainer import (DESK_OVERRIDES, TrainConfig, build_student, load_checkpoint, save_checkpoint,
                              train_student)

FAST = "teacher_iterations = 3\niterations = 3\n"


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 17))))
@settings(max_examples=40, deadline=None)
def test_pgm_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(p, a / 255.0)
    assert np.array_equal(read_pgm(p), a / 255.0)


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 19))))
@settings(max_examples=40, deadline=None)
def test_pbm_round_trip(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("pbm") / "x.pbm"
    write_pbm(p, m)
    assert np.array_equal(read_pbm(p).astype(bool), m)


def test_pgm_rejects_bad_files(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00\x01")
    for name in ("a.pgm", "b.pgm"):
        with pytest.raises(FormatError):
            read_pgm(tmp_path / name)


def test_dataset_disk_round_trip(tiny_data, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    write_dataset(first, *tiny_data)
    back = read_dataset(first)
    # frames are stored at 8 bits, so compare after the same quantisation
    for orig, got in zip(tiny_data, back):
        assert [c.clip_id for c in orig] == [c.clip_id for c in got]
        for a, b in zip(orig, got):
            for fa, fb in zip(a.frames, b.frames):
                assert np.array_equal(np.rint(fa.pixels * 255) / 255, fb.pixels)
            assert (a.masks is None) == (b.masks is None)
            if a.masks:
                assert [t for t, _ in a.masks] == [t for t, _ in b.masks]
                assert all(np.array_equal(x.values, y.values) for (_, x), (_, y) in zip(a.masks, b.masks))
            for (f1, b1), (f2, b2) in zip(a.flows, b.flows):
                assert np.array_equal(np.float32(f1.u), f2.u) and np.array_equal(np.float32(b1.v), b2.v)
    write_dataset(second, *back)
    assert directory_checksum(second) == directory_checksum(first)
    assert dataset_checksum(*back) == dataset_checksum(*read_dataset(second))


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.01  # trailing\n\nseed=3\n")
    assert read_config_file(p) == {"lr": "0.01", "seed": "3"}
    write_config_file(tmp_path / "d.cfg", {"b": "1", "a": "2"})
    assert read_config_file(tmp_path / "d.cfg") == {"a": "2", "b": "1"}
    p.write_text("lr = 1\nlr = 2\n")
    with pytest.raises(FormatError):
        read_config_file(p)
    p.write_text("just words\n")
    with pytest.raises(FormatError):
        read_config_file(p)


# ---------------------------------------------------------------------------
# end-to-end command line


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "fast.cfg"
    cfg.write_text(FAST)
    data = root / "data"
    assert _run("generate", "--labeled", 2, "--unlabeled", 2, "--seed", 3, data) == 0
    assert _run("finetune", "--config", cfg, data, root / "teacher") == 0
    assert _run("train", "--config", cfg, "--teacher", root / "teacher" / "teacher.ckpt", data, root / "student") == 0
    return root


def test_generate_is_deterministic(workspace, tmp_path):
    assert _run("generate", "--labeled", 2, "--unlabeled", 2, "--seed", 3, tmp_path / "again") == 0
    assert directory_checksum(tmp_path / "again") == directory_checksum(workspace / "data")
    m = RunManifest.read(workspace / "data")
    assert m.command == "generate" and m.seed == 3 and m.finished


def test_generate_refuses_to_overwrite(workspace):
    before = directory_checksum(workspace / "data")
    assert _run("generate", "--labeled", 1, "--unlabeled", 0, workspace / "data") == 1
    assert directory_checksum(workspace / "data") == before


def test_force_replaces_output(tmp_path):
    out = tmp_path / "d"
    out.mkdir()
    (out / "stale.txt").write_text("x")
    assert _run("generate", "--labeled", 1, "--unlabeled", 0, "--force", out) == 0
    assert not (out / "stale.txt").exists() and (out / "split.txt").exists()


def _log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_train_log_columns(workspace):
    rows = [r for r in _log(workspace / "student" / "log.jsonl") if r["stage"] == "train"]
    assert len(rows) == 3
    for r in rows:
        assert {"L_dice", "L_bce", "L_conf", "L_opti", "L_coh"} <= r.keys()


def test_ablate_ccr_logs_zero_confidence(workspace, tmp_path):
    cfg = workspace / "fast.cfg"
    assert _run("train", "--config", cfg, "--ablate", "ccr", "--teacher", workspace / "teacher" / "teacher.ckpt",
                workspace / "data", tmp_path / "s") == 0
    rows = _log(tmp_path / "s" / "log.jsonl")
    assert rows and all(r["L_conf"] == 0.0 for r in rows)


def test_train_rejects_prompt_mismatch(workspace, tmp_path):
    assert _run("train", "--config", workspace / "fast.cfg", "--ablate", "tpt",
                "--teacher", workspace / "teacher" / "teacher.ckpt", workspace / "data", tmp_path / "s") == 1


def _strip_times(rows):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]


def test_rerun_is_idempotent(workspace, tmp_path):
    cfg = workspace / "fast.cfg"
    assert _run("train", "--config", cfg, "--teacher", workspace / "teacher" / "teacher.ckpt",
                workspace / "data", tmp_path / "s2") == 0
    a, b = workspace / "student", tmp_path / "s2"
    assert (a / "student.ckpt").read_bytes() == (b / "student.ckpt").read_bytes()
    assert _strip_times(_log(a / "log.jsonl")) == _strip_times(_log(b / "log.jsonl"))
    assert RunManifest.read(a).config_hash == RunManifest.read(b).config_hash


def test_evaluate_writes_stable_metrics_and_plots(workspace, tmp_path):
    ckpt = workspace / "student" / "student.ckpt"
    assert _run("evaluate", "--checkpoint", ckpt, "--plot", "--log", workspace / "student" / "log.jsonl",
                workspace / "data", tmp_path / "e1") == 0
    assert _run("evaluate", "--checkpoint", ckpt, workspace / "data", tmp_path / "e2") == 0
    t1 = (tmp_path / "e1" / "metrics.csv").read_text()
    assert t1 == (tmp_path / "e2" / "metrics.csv").read_text()
    assert t1.splitlines()[0] == "clip_id,DSC,NSD,clDice,Spe,Sen" and t1.splitlines()[-1].startswith("mean,")
    assert (tmp_path / "e1" / "loss_curve.png").stat().st_size > 0
    assert any(name.endswith(".png") for name in os.listdir(tmp_path / "e1" / "plots"))


def test_resume_through_cli(workspace, tmp_path):
    # interrupt the same run after one iteration, then let the CLI finish it
    cfg = TrainConfig.from_flat({**{k: str(v) for k, v in DESK_OVERRIDES.items()},
                                 **read_config_file(workspace / "fast.cfg")})
    teacher = load_checkpoint(workspace / "teacher" / "teacher.ckpt")[0]
    lab, unl, _ = read_dataset(workspace / "data")
    mid = tmp_path / "mid.ckpt"
    train_student(teacher, build_student(cfg), lab, unl, FlowProvider(FlowKind.GROUND_TRUTH), cfg, stop_after=1,
                  on_checkpoint=lambda m, st: save_checkpoint(mid, m, cfg, train_state=st))
    assert _run("train", "--config", workspace / "fast.cfg", "--teacher", workspace / "teacher" / "teacher.ckpt",
                "--resume", mid, workspace / "data", tmp_path / "r") == 0
    assert [r["iteration"] for r in _log(tmp_path / "r" / "log.jsonl")] == [1, 2]
    assert (tmp_path / "r" / "student.ckpt").read_bytes() == (workspace / "student" / "student.ckpt").read_bytes()

    other = tmp_path / "other.cfg"
    other.write_text(FAST + "seed = 5\n")
    assert _run("train", "--config", other, "--teacher", workspace / "teacher" / "teacher.ckpt",
                "--resume", mid, workspace / "data", tmp_path / "r2") == 1


def test_bad_inputs_exit_nonzero(workspace, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert _run("finetune", "--config", bad, workspace / "data", tmp_path / "x") == 1
    assert _run("finetune", tmp_path / "missing", tmp_path / "y") == 1
    assert _run("evaluate", "--checkpoint", tmp_path / "none.ckpt", workspace / "data", tmp_path / "z") == 1
    with pytest.raises(SystemExit):
        _run("frobnicate")
