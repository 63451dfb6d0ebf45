import csv
import json
import subprocess
import sys

import pytest

from ecl.cli import main
from ecl.config import DataConfig, EclConfig
from ecl.genome import OpKind, serialize_genome, uniform_genome
from ecl.network import NetworkConfig, TrainSchedule


def write_config(path, **kw):
    cfg = EclConfig(
        population_size=4, generations_first=2, generations_later=1,
        search_schedule=TrainSchedule(1), full_schedule=TrainSchedule(1, 0.1, 1e-5),
        search_net=NetworkConfig(2, 1), full_net=NetworkConfig(2, 1), evaluator="surrogate",
        data=DataConfig(num_tasks=2, classes_per_task=2, samples_per_class=20, image_size=4), **kw,
    )
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return path


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json")
    genome = root / "identity.json"
    genome.write_text(serialize_genome(uniform_genome(OpKind.IDENTITY)))
    assert main(["evolve", "--config", str(cfg), "--out", str(root / "ecl")]) == 0
    assert main(["baseline", "--config", str(cfg), "--genome", str(genome), "--out", str(root / "base")]) == 0
    return root


def test_evolve_layout(runs):
    run = runs / "ecl"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "evolve" and manifest["master_seed"] == 0
    for rel in manifest["artifacts"]:
        assert (run / rel).exists()
    for t in range(2):
        for name in ("genome.json", "weights.bin", "weights.json"):
            assert (run / "experts" / f"task_{t}" / name).exists()
    assert not (run / ".lock").exists()
    events = [json.loads(line) for line in (run / "log.jsonl").read_text().splitlines()]
    assert {e["event"] for e in events} >= {"generation", "solution", "expert"}
    rows = list(csv.reader((run / "ledger.csv").open()))
    assert rows[0] == ["task", "param_count", "val_error", "genome_hash"] and len(rows) == 3


def test_rerun_gives_identical_ledger(runs, tmp_path):
    assert main(["evolve", "--config", str(runs / "cfg.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "ledger.csv").read_bytes() == (runs / "ecl" / "ledger.csv").read_bytes()


def test_threads_match_single_thread(runs, tmp_path):
    assert main(["evolve", "--config", str(runs / "cfg.json"), "--out", str(tmp_path / "par"), "--threads", "3"]) == 0
    assert (tmp_path / "par" / "ledger.csv").read_bytes() == (runs / "ecl" / "ledger.csv").read_bytes()


def test_baseline_ledger_has_one_genome(runs):
    rows = list(csv.DictReader((runs / "base" / "ledger.csv").open()))
    assert len(rows) == 2 and len({r["genome_hash"] for r in rows}) == 1


def test_report_outputs_and_idempotence(runs, tmp_path):
    out = tmp_path / "cmp"
    assert main(["report", str(runs / "ecl"), str(runs / "base"), "--out", str(out)]) == 0
    report = runs / "ecl" / "report"
    names = ["report.json", "accuracy.csv", "confusion_task_il.csv", "confusion_class_il.csv"]
    first = {n: (report / n).read_bytes() for n in names}
    comparison = (out / "comparison.csv").read_bytes()

    ident = list(csv.reader((report / "confusion_task_il.csv").open()))[1:]
    assert [[float(v) for v in r[1:]] for r in ident] == [[1.0, 0.0], [0.0, 1.0]]
    for row in csv.DictReader((out / "comparison.csv").open()):
        accs = [float(row["task_0"]), float(row["task_1"])]
        assert abs(float(row["LA"]) - sum(accs) / 2) <= 1e-12
    assert {r["run"] for r in csv.DictReader((out / "comparison.csv").open())} == {"ecl", "base"}

    assert main(["report", str(runs / "ecl"), str(runs / "base"), "--out", str(out)]) == 0
    assert {n: (report / n).read_bytes() for n in names} == first
    assert (out / "comparison.csv").read_bytes() == comparison


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["evolve", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    data = json.loads(cfg.read_text())
    data["generations"] = 3
    cfg.write_text(json.dumps(data))
    assert main(["evolve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "generations" in capsys.readouterr().err


def test_invalid_genome_exits_2(tmp_path):
    cfg = write_config(tmp_path / "cfg.json")
    bad = tmp_path / "g.json"
    bad.write_text('{"version": 1, "normal": {"node_count": 1, "nodes": [{"op": "conv9", "inputs": [-2, -1]}]}}')
    assert main(["baseline", "--config", str(cfg), "--genome", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["baseline", "--config", str(cfg), "--genome", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_incomplete_run_exits_2(runs, tmp_path, capsys):
    import shutil

    run = tmp_path / "partial"
    shutil.copytree(runs / "ecl", run)
    (run / "experts" / "task_1" / "weights.bin").unlink()
    assert main(["report", str(run)]) == 2
    assert "task_1/weights.bin" in capsys.readouterr().err

    (run / "manifest.json").unlink()
    assert main(["report", str(run)]) == 2
    assert "manifest.json" in capsys.readouterr().err


def test_locked_output_is_a_runtime_failure(runs, tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / ".lock").write_text("1")
    assert main(["evolve", "--config", str(runs / "cfg.json"), "--out", str(out)]) == 3


def test_bad_thread_count_exits_2(runs, tmp_path):
    assert main(["evolve", "--config", str(runs / "cfg.json"), "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_module_entry_point(runs, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ecl", "report", str(runs / "base"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout == ""
    assert (tmp_path / "comparison.csv").exists()
