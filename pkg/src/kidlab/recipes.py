"""Ready-made experiment specs and a resumable driver that chains the CLI steps.

``run_recipe`` skips any artifact already on disk, so an interrupted recipe
picks up where it stopped and a finished one is a cache.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import cli
from .cli import EvalSpec, ExperimentSpec, Layout, RunSpec, TeacherSpec, WorldSpec
from .distill import DistillConfig, Seeds
from .model import ModelConfig

ACCEPTANCE_SEEDS = (11, 13, 17)
EXTRA_SEEDS = (19, 23)
ALPHA_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)

# name -> DistillConfig overrides (algorithm first)
ACCEPTANCE_RUNS = {
    "sft": {"algorithm": "SFT"},
    "fkd": {"algorithm": "FKD"},
    "rkd": {"algorithm": "RKD"},
    "fdistill": {"algorithm": "FDistill"},
    "imitkd": {"algorithm": "ImitKD"},
    "gkd": {"algorithm": "GKD"},
    "kid": {"algorithm": "KID"},
    "kid-maskonly": {"algorithm": "KID", "rewrite": False},
    **{f"kid-a{a:g}": {"algorithm": "KID", "alpha": a} for a in ALPHA_SWEEP if a != 0.2},
}
# single-seed report-only rows
REPORT_RUNS = {
    "gkd-fkl": {"algorithm": "GKD", "divergence": "FKL"},
    "gkd-jsd": {"algorithm": "GKD", "divergence": "JSD"},
    **{f"kid-{m}": {"algorithm": "KID", "mask_strategy": m} for m in ("uniform", "easy", "hard")},
}


def run_id(name: str, seed: int) -> str:
    return f"{name}-s{seed}"


def _runs(table: dict, seeds, steps: int, batch_size: int, lr: float) -> list[RunSpec]:
    out = []
    for name, over in table.items():
        for s in seeds:
            cfg = DistillConfig(steps=steps, batch_size=batch_size, lr=lr, seeds=Seeds(s, s, s), **over)
            out.append(RunSpec(run_id(name, s), cfg))
    return out


def acceptance_spec(output_dir: str = "out/acceptance", seeds=ACCEPTANCE_SEEDS, report_runs: bool = True) -> ExperimentSpec:
    """Reference setup: world 7 (2000/300), teacher 5000 steps, students 3000 steps."""
    runs = _runs(ACCEPTANCE_RUNS, seeds, 3000, 16, 3e-3)
    if report_runs:
        runs += _runs(REPORT_RUNS, seeds[:1], 3000, 16, 3e-3)
    return ExperimentSpec(
        world=WorldSpec(7, 2000, 300),
        teacher=TeacherSpec(ModelConfig.teacher(), steps=5000, lr=1e-3, batch_size=16, seed=1),
        student=ModelConfig.student(),
        runs=runs,
        eval=EvalSpec(),
        output_dir=output_dir,
    )


def extra_seed_runs(spec: ExperimentSpec, names, seeds=EXTRA_SEEDS) -> ExperimentSpec:
    """Copy of ``spec`` with more seeds for the named run families (used to confirm an ordering)."""
    base = {r.id: r for r in spec.runs}
    added = []
    for name in names:
        proto = base[run_id(name, ACCEPTANCE_SEEDS[0])].config.to_dict()
        for s in seeds:
            cfg = DistillConfig.from_dict({**proto, "seeds": {"data": s, "init": s, "sampling": s}})
            added.append(RunSpec(run_id(name, s), cfg))
    known = {r.id for r in spec.runs}
    return ExperimentSpec(spec.world, spec.teacher, spec.student, spec.runs + [r for r in added if r.id not in known],
                          spec.eval, spec.output_dir)


def smoke_spec(output_dir: str = "out/smoke") -> ExperimentSpec:
    """One run per algorithm family on a 200-example world; minutes, not hours."""
    runs = []
    for name in ("sft", "fkd", "gkd", "kid"):
        over = ACCEPTANCE_RUNS[name]
        runs.append(RunSpec(run_id(name, 11), DistillConfig(steps=300, seeds=Seeds(11, 11, 11), **over)))
    return ExperimentSpec(
        world=WorldSpec(7, 200, 40),
        teacher=TeacherSpec(ModelConfig(d_model=64, n_heads=4, n_layers=2, d_ff=128), steps=1500, lr=2e-3, seed=1),
        student=ModelConfig.student(),
        runs=runs,
        output_dir=output_dir,
    )


def spec_hash(spec: ExperimentSpec) -> str:
    """Content hash of everything except where outputs go."""
    d = spec.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def run_recipe(spec: ExperimentSpec, run_ids=None, log=print, gate: bool = True) -> dict[str, dict]:
    """Generate, train, distill and evaluate every run the experiment spec names; reuse what exists.

    Returns ``{run_id: {"manifest": ..., "metrics": ...}}``.
    """
    lay = Layout(spec.output_dir)
    if not lay.world.exists():
        cli.cmd_gen_world(spec, log=log)
    if not lay.teacher.exists() or not lay.teacher_report.exists():
        try:
            cli.cmd_train_teacher(spec, force=True, log=log)
        except cli.QualityGateFailed:
            if gate:
                raise
    ids = [r.id for r in spec.runs] if run_ids is None else list(run_ids)
    out = {}
    for rid in ids:
        manifest = lay.manifest(rid)
        if not manifest.exists() or json.loads(manifest.read_text()).get("status") != "final":
            cli.cmd_distill(spec, rid, force=True, log=log)
        if not lay.metrics(rid).exists():
            cli.cmd_evaluate(spec, rid, force=True, log=log)
        out[rid] = {
            "manifest": json.loads(lay.manifest(rid).read_text()),
            "metrics": json.loads(lay.metrics(rid).read_text()),
        }
    return out


def write_spec(spec: ExperimentSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(spec.to_json())
    return path
