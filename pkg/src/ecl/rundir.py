"""On-disk layout of a run: config, event log, experts, ledger, manifest."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from pathlib import Path
from typing import Iterable

from . import __version__
from .config import EclConfig
from .core import ExpertArchive, ExpertRecord
from .errors import ConfigError
from .genome import deserialize_genome, genome_hash, serialize_genome
from .network import NetworkConfig, load_weights, save_weights, weights_digest

MANIFEST = "manifest.json"
LEDGER_HEADER = ["task", "param_count", "val_error", "genome_hash"]


class IncompleteRunError(ConfigError):
    pass


def expert_dir(run_dir: Path, task_id: int) -> Path:
    return run_dir / "experts" / f"task_{task_id}"


def write_expert(run_dir: Path, record: ExpertRecord) -> list[Path]:
    d = expert_dir(run_dir, record.task_id)
    d.mkdir(parents=True, exist_ok=True)
    (d / "genome.json").write_text(serialize_genome(record.genome) + "\n")
    save_weights(record.network, d / "weights.bin", d / "weights.json")
    meta = {
        "task_id": record.task_id,
        "class_ids": list(record.class_ids),
        "val_error": record.val_error,
        "param_count": record.param_count,
        "weights_digest": record.weights_digest,
        "net_config": dataclasses.asdict(record.network.config),
    }
    (d / "expert.json").write_text(json.dumps(meta, indent=2) + "\n")
    return [d / name for name in ("genome.json", "weights.bin", "weights.json", "expert.json")]


def write_ledger(path: Path, archive: ExpertArchive) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_HEADER)
        for r in archive:
            w.writerow([r.task_id, r.param_count, repr(r.val_error), genome_hash(r.genome)])


def write_events(path: Path, events: Iterable[dict]) -> None:
    with path.open("w") as fh:
        for e in events:
            fh.write(json.dumps(e, default=float) + "\n")


def write_run(run_dir: str | Path, cfg: EclConfig, archive: ExpertArchive, events: Iterable[dict]) -> list[Path]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    write_events(run_dir / "log.jsonl", events)
    paths = [run_dir / "config.json", run_dir / "log.jsonl"]
    for record in archive:
        paths += write_expert(run_dir, record)
    write_ledger(run_dir / "ledger.csv", archive)
    paths.append(run_dir / "ledger.csv")
    return paths


def write_manifest(run_dir: str | Path, cfg: EclConfig, started: str, finished: str,
                   artifacts: Iterable[Path], command: str) -> Path:
    """Write the manifest last and atomically; its presence marks a complete run."""
    run_dir = Path(run_dir)
    manifest = {
        "tool": "ecl",
        "version": __version__,
        "command": command,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "started": started,
        "finished": finished,
        "artifacts": sorted(str(Path(p).relative_to(run_dir)) for p in artifacts),
    }
    tmp = run_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n")
    os.replace(tmp, run_dir / MANIFEST)
    return run_dir / MANIFEST


def _require(path: Path) -> Path:
    if not path.exists():
        raise IncompleteRunError(f"incomplete run directory: missing {path}")
    return path


def load_run(run_dir: str | Path) -> tuple[EclConfig, ExpertArchive]:
    run_dir = Path(run_dir)
    manifest = json.loads(_require(run_dir / MANIFEST).read_text())
    cfg = EclConfig.from_dict(json.loads(_require(run_dir / "config.json").read_text()))
    for rel in manifest.get("artifacts", []):
        _require(run_dir / rel)
    archive = ExpertArchive()
    t = 0
    while expert_dir(run_dir, t).exists():
        d = expert_dir(run_dir, t)
        meta = json.loads(_require(d / "expert.json").read_text())
        genome = deserialize_genome(_require(d / "genome.json").read_text())
        net_config = NetworkConfig(**meta["net_config"])
        net = load_weights(genome, net_config, _require(d / "weights.bin"), _require(d / "weights.json"))
        for p in net.module.parameters():
            p.requires_grad_(False)
        record = ExpertRecord(
            task_id=meta["task_id"],
            genome=genome,
            class_ids=tuple(meta["class_ids"]),
            val_error=meta["val_error"],
            param_count=meta["param_count"],
            network=net,
            weights_digest=weights_digest(net),
            weights_path=str(d / "weights.bin"),
        )
        if record.weights_digest != meta["weights_digest"]:
            raise IncompleteRunError(f"{d}: weights do not match their recorded digest")
        archive.append(record)
        t += 1
    if len(archive) == 0:
        raise IncompleteRunError(f"incomplete run directory: missing {expert_dir(run_dir, 0)}")
    return cfg, archive
