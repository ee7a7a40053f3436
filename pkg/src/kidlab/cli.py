"""Command-line driver: gen-world, train-teacher, distill, evaluate, report.

Every subcommand reads one JSON experiment spec and writes under
``output_dir/{worlds,checkpoints,runs,reports}``.  Existing outputs are never
replaced without ``--force``; every written path is printed.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evalx, toysql
from .distill import DistillConfig, NonFiniteGradient, NonFiniteLoss, Seeds, train
from .model import ModelConfig, load_checkpoint, save_checkpoint

QUALITY_GATE = 0.7


class QualityGateFailed(RuntimeError):
    def __init__(self, ex: float):
        super().__init__(f"teacher EX {ex:.3f} is below the {QUALITY_GATE} gate")
        self.ex = ex


class MissingSftBaseline(RuntimeError):
    pass


class OutputExists(FileExistsError):
    pass


@dataclass
class WorldSpec:
    seed: int = 7
    n_train: int = 2000
    n_eval: int = 300


@dataclass
class TeacherSpec:
    config: ModelConfig = field(default_factory=ModelConfig.teacher)
    steps: int = 5000
    lr: float = 2e-3
    batch_size: int = 16
    seed: int = 1


@dataclass
class EvalSpec:
    k: int = evalx.DEFAULT_K
    horizon: int = evalx.DEFAULT_HORIZON


@dataclass
class RunSpec:
    id: str
    config: DistillConfig


@dataclass
class ExperimentSpec:
    world: WorldSpec = field(default_factory=WorldSpec)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    student: ModelConfig = field(default_factory=ModelConfig.student)
    runs: list[RunSpec] = field(default_factory=list)
    eval: EvalSpec = field(default_factory=EvalSpec)
    output_dir: str = "out"

    def run(self, run_id: str) -> RunSpec:
        for r in self.runs:
            if r.id == run_id:
                return r
        raise KeyError(f"no run {run_id!r} in spec (have: {', '.join(r.id for r in self.runs)})")

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "teacher": {**asdict(self.teacher), "config": self.teacher.config.to_dict()},
            "student": self.student.to_dict(),
            "runs": [{"id": r.id, "config": r.config.to_dict()} for r in self.runs],
            "eval": asdict(self.eval),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        t = dict(d.get("teacher", {}))
        tcfg = ModelConfig.from_dict(t.pop("config")) if "config" in t else ModelConfig.teacher()
        runs = [RunSpec(r["id"], DistillConfig.from_dict(r["config"])) for r in d.get("runs", [])]
        if len({r.id for r in runs}) != len(runs):
            raise ValueError("run ids must be unique")
        return cls(
            world=WorldSpec(**d.get("world", {})),
            teacher=TeacherSpec(config=tcfg, **t),
            student=ModelConfig.from_dict(d["student"]) if "student" in d else ModelConfig.student(),
            runs=runs,
            eval=EvalSpec(**d.get("eval", {})),
            output_dir=d.get("output_dir", "out"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        spec = cls.from_dict(json.loads(Path(path).read_text()))
        out = Path(spec.output_dir)
        if not out.is_absolute():
            spec.output_dir = str(Path(path).resolve().parent / out)
        return spec


# --------------------------------------------------------------------------- layout


class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def world(self) -> Path:
        return self.root / "worlds" / "world.json"

    @property
    def teacher(self) -> Path:
        return self.root / "checkpoints" / "teacher.ckpt"

    @property
    def teacher_report(self) -> Path:
        return self.root / "reports" / "teacher_metrics.json"

    def student(self, run_id: str) -> Path:
        return self.root / "checkpoints" / f"{run_id}.ckpt"

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def manifest(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "manifest.json"

    def metrics(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "metrics.json"

    def row(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "row.csv"


def _guard(paths, force: bool) -> None:
    for p in paths:
        if Path(p).exists() and not force:
            raise OutputExists(f"{p} exists (pass --force to overwrite)")


def _write_text(path: Path, text: str, log) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log(str(path))


def _load_world(lay: Layout) -> toysql.ToyWorld:
    if not lay.world.exists():
        raise FileNotFoundError(f"{lay.world} missing; run gen-world first")
    return toysql.ToyWorld.from_json(lay.world.read_text())


# --------------------------------------------------------------------------- commands


def cmd_gen_world(spec: ExperimentSpec, force: bool = False, log=print) -> Path:
    lay = Layout(spec.output_dir)
    _guard([lay.world], force)
    w = spec.world
    world = toysql.generate_world(w.seed, w.n_train, w.n_eval)
    _write_text(lay.world, world.to_json(), log)
    return lay.world


def cmd_train_teacher(spec: ExperimentSpec, force: bool = False, log=print) -> evalx.MetricsReport:
    lay = Layout(spec.output_dir)
    _guard([lay.teacher, lay.teacher_report], force)
    world = _load_world(lay)
    t = spec.teacher
    cfg = DistillConfig("SFT", steps=t.steps, lr=t.lr, batch_size=t.batch_size, seeds=Seeds(t.seed, t.seed, t.seed))
    res = train(world, t.config, cfg)
    lay.teacher.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.params, lay.teacher, extra={"role": "teacher", "final": True})
    log(str(lay.teacher))
    report = evalx.evaluate(res.params, world, spec.eval.k, spec.eval.horizon)
    doc = report.to_dict()
    doc["ledger"] = res.ledger.to_dict()
    _write_text(lay.teacher_report, json.dumps(doc, indent=1), log)
    if report.ex < QUALITY_GATE:
        raise QualityGateFailed(report.ex)
    return report


def _teacher_for(lay: Layout) -> "object":
    if not lay.teacher.exists():
        raise FileNotFoundError(f"{lay.teacher} missing; run train-teacher first")
    if lay.teacher_report.exists():
        ex = json.loads(lay.teacher_report.read_text())["ex"]
        if ex < QUALITY_GATE:
            raise QualityGateFailed(ex)
    return load_checkpoint(lay.teacher)


def cmd_distill(spec: ExperimentSpec, run_id: str, force: bool = False, seed_override: int | None = None,
                log=print) -> Path:
    lay = Layout(spec.output_dir)
    run = spec.run(run_id)
    cfg = run.config
    if seed_override is not None:
        cfg = DistillConfig.from_dict({**cfg.to_dict(), "seeds": asdict(Seeds(seed_override, seed_override, seed_override))})
    _guard([lay.student(run_id), lay.manifest(run_id)], force)
    world = _load_world(lay)
    teacher = None if cfg.algorithm == "SFT" else _teacher_for(lay)
    manifest = {
        "run_id": run_id, "config": cfg.to_dict(), "seeds": asdict(cfg.seeds),
        "student_config": spec.student.to_dict(),
        "teacher_checkpoint": None if teacher is None else str(lay.teacher),
        "student_checkpoint": str(lay.student(run_id)),
    }
    lay.run_dir(run_id).mkdir(parents=True, exist_ok=True)
    lay.student(run_id).parent.mkdir(parents=True, exist_ok=True)

    def probe(params, step):
        r = evalx.evaluate(params, world, spec.eval.k, spec.eval.horizon)
        return {"ex": r.ex, "ts": r.ts, "exaccerr": r.exaccerr}

    try:
        res = train(world, spec.student, cfg, teacher, eval_fn=probe if cfg.eval_every else None)
    except (NonFiniteLoss, NonFiniteGradient) as e:
        if getattr(e, "params", None) is not None:
            save_checkpoint(e.params, lay.student(run_id), extra={"run_id": run_id, "final": False})
            log(str(lay.student(run_id)))
        manifest.update(status="failed", error=f"{type(e).__name__}: {e}", failed_step=getattr(e, "step", None))
        _write_text(lay.manifest(run_id), json.dumps(manifest, indent=1), log)
        raise
    save_checkpoint(res.params, lay.student(run_id), extra={"run_id": run_id, "final": True})
    log(str(lay.student(run_id)))
    manifest.update(status="final", ledger=res.ledger.to_dict(), history=res.history,
                    final_loss=res.losses[-1] if res.losses else None)
    _write_text(lay.manifest(run_id), json.dumps(manifest, indent=1), log)
    return lay.manifest(run_id)


def cmd_evaluate(spec: ExperimentSpec, run_id: str, force: bool = False, log=print) -> evalx.MetricsReport:
    lay = Layout(spec.output_dir)
    _guard([lay.metrics(run_id), lay.row(run_id)], force)
    if not lay.manifest(run_id).exists():
        raise FileNotFoundError(f"{lay.manifest(run_id)} missing; run distill first")
    manifest = json.loads(lay.manifest(run_id).read_text())
    if manifest.get("status") != "final":
        raise RuntimeError(f"run {run_id} did not finish (status {manifest.get('status')})")
    world = _load_world(lay)
    report = evalx.evaluate(load_checkpoint(lay.student(run_id)), world, spec.eval.k, spec.eval.horizon)
    _write_text(lay.metrics(run_id), report.to_json(), log)
    cfg = manifest["config"]
    row = evalx.csv_row(report, run_id, cfg["algorithm"], cfg["divergence"],
                        cfg["alpha"] if cfg["algorithm"] == "KID" else None, None)
    _write_text(lay.row(run_id), evalx.write_csv([row]), log)
    return report


def _label(cfg: dict) -> str:
    algo = cfg["algorithm"]
    if algo == "SFT":
        return "SFT"
    label = f"{algo}-{cfg['divergence']}"
    if algo == "KID":
        label += f" a={cfg['alpha']:g}"
        if cfg.get("mask_strategy", "random") != "random":
            label += f" {cfg['mask_strategy']}"
        if not cfg.get("rewrite", True):
            label += " mask-only"
    return label


def collect_runs(root: str | Path) -> list[dict]:
    """Every finished run with its manifest and (if present) metrics."""
    lay = Layout(root)
    out = []
    for mpath in sorted((lay.root / "runs").glob("*/manifest.json")):
        manifest = json.loads(mpath.read_text())
        if manifest.get("status") != "final":
            continue
        metrics_path = mpath.parent / "metrics.json"
        metrics = json.loads(metrics_path.read_text()) if metrics_path.exists() else None
        out.append({"manifest": manifest, "metrics": metrics})
    return out


def relative_latency(runs: list[dict]) -> dict[str, dict]:
    """Wall-clock and forward-pass ratios against the SFT run with matching steps and batch size."""
    sft = [r["manifest"] for r in runs if r["manifest"]["config"]["algorithm"] == "SFT"]
    if not sft:
        raise MissingSftBaseline("no finished SFT run to normalise latency against")
    ratios = {}
    for r in runs:
        m = r["manifest"]
        c = m["config"]
        same = [s for s in sft if s["config"]["steps"] == c["steps"] and s["config"]["batch_size"] == c["batch_size"]]
        base = (same or sft)[0]["ledger"]
        ratios[m["run_id"]] = {
            "rel_latency": m["ledger"]["wall_seconds"] / max(base["wall_seconds"], 1e-12),
            "rel_forward": m["ledger"]["forward_passes"] / max(base["forward_passes"], 1),
        }
    return ratios


def _fmt(x, spec=".3f") -> str:
    return "n/a" if x is None or (isinstance(x, float) and np.isnan(x)) else format(x, spec)


def cmd_report(output_dir: str | Path, force: bool = False, log=print) -> str:
    lay = Layout(output_dir)
    runs = collect_runs(lay.root)
    if not runs:
        raise FileNotFoundError(f"no finished run manifests under {lay.root / 'runs'}")
    ratios = relative_latency(runs)
    out_csv = lay.root / "reports" / "summary.csv"
    out_table = lay.root / "reports" / "table.txt"
    out_curves = lay.root / "reports" / "curves.csv"
    _guard([out_csv, out_table, out_curves], force)

    rows, groups = [], defaultdict(list)
    for r in runs:
        m, met = r["manifest"], r["metrics"]
        c = m["config"]
        rep = evalx.MetricsReport.from_dict(met) if met else None
        row = {
            "run_id": m["run_id"], "algorithm": c["algorithm"], "divergence": c["divergence"] or "",
            "alpha": c["alpha"] if c["algorithm"] == "KID" else "",
            "ex": rep.ex if rep else "", "ts": rep.ts if rep else "",
            "exaccerr": "" if rep is None or rep.exaccerr is None else rep.exaccerr,
            "rel_latency": ratios[m["run_id"]]["rel_latency"],
        }
        rows.append(row)
        groups[_label(c)].append((rep, ratios[m["run_id"]]))
    _write_text(out_csv, evalx.write_csv(rows), log)

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    header = f"{'method':<28}{'n':>3}{'EX':>8}{'TS':>8}{'ExAccErr':>10}{'latency':>9}{'fwd':>8}"
    lines = [header, "-" * len(header)]
    for label in sorted(groups, key=lambda s: (s != "SFT", s)):
        g = groups[label]
        reps = [rep for rep, _ in g if rep is not None]
        lines.append(
            f"{label:<28}{len(g):>3}"
            f"{_fmt(mean([r.ex for r in reps])):>8}{_fmt(mean([r.ts for r in reps])):>8}"
            f"{_fmt(mean([r.exaccerr for r in reps]), '.1f'):>10}"
            f"{_fmt(mean([x['rel_latency'] for _, x in g]), '.2f') + 'x':>9}"
            f"{_fmt(mean([x['rel_forward'] for _, x in g]), '.2f') + 'x':>8}"
        )
    table = "\n".join(lines) + "\n"
    _write_text(out_table, table, log)

    buf = [("run_id", "label", "step", "ex", "ts", "exaccerr")]
    for r in runs:
        m = r["manifest"]
        for h in m.get("history", []):
            buf.append((m["run_id"], _label(m["config"]), h["step"], h.get("ex"), h.get("ts"), h.get("exaccerr")))
    out_curves.parent.mkdir(parents=True, exist_ok=True)
    with open(out_curves, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(buf)
    log(str(out_curves))
    return table


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kidlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-world", "train-teacher", "distill", "evaluate", "report"):
        p = sub.add_parser(name)
        p.add_argument("--spec", required=True, help="experiment spec (JSON)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the world seed (gen-world) or every run seed (distill)")
        if name in ("distill", "evaluate"):
            p.add_argument("--run", required=True, help="run id from the experiment spec")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExperimentSpec.load(args.spec)
        if args.command == "gen-world":
            if args.seed_override is not None:
                spec.world.seed = args.seed_override
            cmd_gen_world(spec, args.force)
        elif args.command == "train-teacher":
            rep = cmd_train_teacher(spec, args.force)
            print(f"teacher EX {rep.ex:.3f}  TS {rep.ts:.3f}")
        elif args.command == "distill":
            cmd_distill(spec, args.run, args.force, args.seed_override)
        elif args.command == "evaluate":
            rep = cmd_evaluate(spec, args.run, args.force)
            print(f"{args.run}: EX {rep.ex:.3f}  TS {rep.ts:.3f}  ExAccErr {_fmt(rep.exaccerr, '.1f')}")
        else:
            sys.stdout.write(cmd_report(spec.output_dir, args.force))
    except QualityGateFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OutputExists, FileNotFoundError, KeyError, MissingSftBaseline, ValueError,
            RuntimeError, NonFiniteLoss, NonFiniteGradient) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
