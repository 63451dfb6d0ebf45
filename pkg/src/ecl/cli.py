"""Command-line entry point.

    ecl evolve   --config CFG --out DIR [--threads N]
    ecl baseline --config CFG --genome GENOME --out DIR
    ecl report   DIR [DIR ...] [--out DIR]

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from .config import DataConfig, load_config
from .errors import ConfigError, DatasetError, GenomeError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOCK_NAME = ".lock"

log = logging.getLogger("ecl")


def build_stream(data: DataConfig):
    from .tasks import SplitSpec, load_stream, synth_stream

    if data.kind == "synthetic":
        return synth_stream(data.num_tasks, data.classes_per_task, data.samples_per_class,
                            data.image_size, data.difficulty, data.seed)
    spec = SplitSpec(data.classes_per_task, data.ratios, data.image_size, data.shuffle_classes, data.seed)
    return load_stream(data.root, spec)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@contextmanager
def _run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out} is locked by another writer ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _set_threads(n: int) -> None:
    import torch

    if n < 1:
        raise ConfigError("--threads must be at least 1")
    # Parallelism comes from concurrent evaluations; kernels stay single-threaded.
    torch.set_num_threads(1)


def cmd_evolve(config_path, out_dir, threads: int = 1) -> int:
    from .core import run_ecl
    from .rundir import write_manifest, write_run

    cfg = load_config(config_path)
    _set_threads(threads)
    out = Path(out_dir)
    stream = build_stream(cfg.data)
    with _run_lock(out):
        started = _now()
        archive, _, events = run_ecl(stream, cfg, threads=threads)
        paths = write_run(out, cfg, archive, events)
        stream.write_manifest(out / "stream.json")
        paths.append(out / "stream.json")
        write_manifest(out, cfg, started, _now(), paths, "evolve")
    return EXIT_OK


def cmd_baseline(config_path, genome_path, out_dir) -> int:
    from .core import expert_event, run_multi_baseline
    from .genome import deserialize_genome
    from .rundir import write_manifest, write_run

    cfg = load_config(config_path)
    try:
        text = Path(genome_path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read genome {genome_path}: {exc.strerror or exc}") from exc
    genome = deserialize_genome(text)
    _set_threads(1)
    out = Path(out_dir)
    stream = build_stream(cfg.data)
    with _run_lock(out):
        started = _now()
        archive = run_multi_baseline(stream, genome, cfg)
        events = [expert_event(r, "baseline_expert") for r in archive]
        paths = write_run(out, cfg, archive, events)
        stream.write_manifest(out / "stream.json")
        paths.append(out / "stream.json")
        write_manifest(out, cfg, started, _now(), paths, "baseline")
    return EXIT_OK


def cmd_report(run_dirs, out_dir=None) -> int:
    from .inference import EvalMode, evaluate, write_comparison, write_reports
    from .rundir import load_run

    _set_threads(1)
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        cfg, archive = load_run(run_dir)
        stream = build_stream(cfg.data)
        if len(archive) < stream.num_tasks:
            raise ConfigError(f"{run_dir}: {len(archive)} experts for {stream.num_tasks} tasks")
        task_il = evaluate(archive, stream, EvalMode.TASK_IL)
        class_il = evaluate(archive, stream, EvalMode.CLASS_IL)
        write_reports(task_il, class_il, run_dir / "report")
        rows += [(run_dir.name, task_il), (run_dir.name, class_il)]
    target = Path(out_dir) if out_dir else Path(run_dirs[0]) / "report"
    target.mkdir(parents=True, exist_ok=True)
    write_comparison(rows, target / "comparison.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run the evolutionary continual-learning loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1,
                   help="concurrent fitness evaluations (1 keeps runs bit-exact)")

    p = sub.add_parser("baseline", help="train one fixed architecture per task")
    p.add_argument("--config", required=True)
    p.add_argument("--genome", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="evaluate completed runs in both settings")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None, help="where to write comparison.csv")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("ECL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "evolve":
            return cmd_evolve(args.config, args.out, args.threads)
        if args.command == "baseline":
            return cmd_baseline(args.config, args.genome, args.out)
        return cmd_report(args.run_dirs, args.out)
    except (ConfigError, DatasetError, GenomeError) as exc:
        print(f"ecl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("runtime failure", exc_info=True)
        print(f"ecl: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

