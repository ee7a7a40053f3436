"""Acceptance criteria AC-1 .. AC-11, one test each, at their stated tolerances.

The training-dependent criteria share one recipe run (world, teacher, every
student) cached under ``.acceptance_cache/<spec hash>/``; set
``KIDLAB_ACCEPTANCE_DIR`` to use another location.  A cold cache trains
everything, which takes hours on one CPU core.  Each test records a single
PASS/FAIL line that is echoed in the terminal summary.
"""
from __future__ import annotations

import json
import os
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import record
from conftest import micro_config
from oracles import brute_execute, central_difference, rel_error
from kidlab import cli, divergence as dv, imperfect, recipes, toysql
from kidlab.cli import Layout
from kidlab.distill import kd_step_loss
from kidlab.divergence import DivergenceKind as K
from kidlab.evalx import score_texts
from kidlab.imperfect import KEPT, REWRITTEN, MaskStrategy
from kidlab.model import ModelConfig, count_forwards, init_params
from kidlab.tokenizer import MASK

ROOT = Path(__file__).resolve().parents[1]
SEEDS = recipes.ACCEPTANCE_SEEDS


def _cache_dir(spec) -> Path:
    base = os.environ.get("KIDLAB_ACCEPTANCE_DIR")
    return Path(base) if base else ROOT / ".acceptance_cache" / recipes.spec_hash(spec)


@pytest.fixture(scope="module")
def acceptance():
    spec = recipes.acceptance_spec()
    spec.output_dir = str(_cache_dir(spec))
    runs = recipes.run_recipe(spec, log=lambda s: None, gate=False)
    return spec, runs


def _ex(runs, name, seeds=SEEDS):
    return [runs[recipes.run_id(name, s)]["metrics"]["ex"] for s in seeds]


def _mean(xs) -> float:
    return float(np.mean(xs))


# AC-1 ---------------------------------------------------------------------

def test_ac1_teacher_viability(acceptance):
    spec, _ = acceptance
    rep = json.loads(Layout(spec.output_dir).teacher_report.read_text())
    wall = rep["ledger"]["wall_seconds"]
    parse = _mean([r["parse_ok"] for r in rep["per_example"]])
    ok = rep["ex"] >= 0.80 and wall <= 15 * 60 and parse >= 0.80
    record("AC-1", ok, f"teacher EX={rep['ex']:.3f} (>=0.80), train wall={wall / 60:.1f} min (<=15), "
                       f"parseable={parse:.3f} (>=0.80)")
    assert ok


# AC-2 ---------------------------------------------------------------------

def test_ac2_divergence_properties():
    rng = np.random.default_rng(2024)
    failures = []
    ln2 = np.log(2.0)
    if abs(dv.pointwise(K.FKL, np.array([1.0, 0.0]), np.array([0.5, 0.5])) - ln2) > 1e-9:
        failures.append("FKL closed form")
    if abs(dv.pointwise(K.TVD, np.array([1.0, 0.0]), np.array([0.5, 0.5])) - 0.5) > 1e-9:
        failures.append("TVD closed form")
    for _ in range(2000):
        v = int(rng.integers(2, 12))
        conc = float(rng.choice([0.1, 1.0, 10.0]))
        p, q = rng.dirichlet(np.full(v, conc)), rng.dirichlet(np.full(v, conc))
        if rng.random() < 0.2:
            p[rng.integers(v)] = 0.0
            p /= p.sum()
        for k in K:
            if dv.pointwise(k, p, q) < 0:
                failures.append(f"{k.value} negative")
            if abs(dv.pointwise(k, p, p)) > 1e-9:
                failures.append(f"{k.value} identity")
        if abs(dv.pointwise(K.JSD, p, q) - dv.pointwise(K.JSD, q, p)) > 1e-9:
            failures.append("JSD symmetry")
        if abs(dv.pointwise(K.TVD, p, q) - dv.pointwise(K.TVD, q, p)) > 1e-9:
            failures.append("TVD symmetry")
        if dv.pointwise(K.TVD, p, q) > 1 + 1e-12 or dv.pointwise(K.JSD, p, q) > ln2 + 1e-12:
            failures.append("bound")
    ok = not failures
    record("AC-2", ok, "closed forms, non-negativity, identity, symmetry and bounds on 2000 random pairs"
           + ("" if ok else f"; failures: {sorted(set(failures))}"))
    assert ok


# AC-3 ---------------------------------------------------------------------

def _draw(rng):
    n = 2
    prompts = [[1] + list(rng.integers(4, 10, size=int(rng.integers(1, 3)))) for _ in range(n)]
    outputs = [list(rng.integers(4, 10, size=int(rng.integers(1, 4)))) + [2] for _ in range(n)]
    return prompts, outputs


def test_ac3_gradient_fidelity():
    cfg = micro_config()
    n_params = sum(a.size for a in init_params(cfg, 0, dtype=np.float64).arrays.values())
    assert n_params <= 500
    rng = np.random.default_rng(33)
    worst = {}
    for name in ("MLE", "FKL", "RKL", "JSD", "TVD"):
        worst[name] = 0.0
        for d in range(20):
            student = init_params(cfg, seed=int(rng.integers(2**31)), scale=0.5, dtype=np.float64)
            teacher = init_params(cfg, seed=int(rng.integers(2**31)), scale=1.0, dtype=np.float64)
            prompts, outputs = _draw(rng)
            if name == "MLE":
                args = (student, None, None, prompts, None, outputs, 0.0, 1.0, False)
            else:
                args = (student, teacher, K(name), prompts, outputs, outputs, 1.0, 0.0, True)
            _, grads, _ = kd_step_loss(*args)
            for pname, arr in student.arrays.items():
                num = central_difference(lambda: kd_step_loss(*args)[0], arr, h=1e-4)
                worst[name] = max(worst[name], rel_error(grads[pname], num))
    ok = all(v < 1e-3 for v in worst.values())
    record("AC-3", ok, f"{n_params}-parameter model, 20 draws each, worst relative error "
           + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + " (<1e-3)")
    assert ok


# AC-4 ---------------------------------------------------------------------

def test_ac4_mode_seeking():
    parts, ok = [], True
    for delta in (0.05, 0.1, 0.2):
        p = dv.bimodal_teacher(delta)
        _, fkl = dv.fit_peaked_student(K.FKL, p, resolution=1e-3)
        _, rkl = dv.fit_peaked_student(K.RKL, p, resolution=1e-3)
        ok &= rkl > fkl
        parts.append(f"d={delta}: RKL {rkl:.3f} > FKL {fkl:.3f}")
    record("AC-4", ok, "argmax mass, grid 1e-3; " + "; ".join(parts))
    assert ok


# AC-5 ---------------------------------------------------------------------

def test_ac5_imperfect_invariants():
    world = toysql.generate_world(7, 2000, 300)
    examples = world.examples[:1000]
    student = init_params(ModelConfig.student(), seed=0)
    alpha = imperfect.DEFAULT_ALPHA
    problems = Counter()
    for strat in MaskStrategy:
        costs = set()
        for k, ex in enumerate(examples):
            with count_forwards() as c:
                s = imperfect.make_imperfect(strat, student, ex, seed=k, alpha=alpha)
            costs.add(c.passes)
            if len(s.masked_positions) != imperfect.mask_count(len(s.gold), alpha):
                problems[f"{strat.value}: count"] += 1
            if len(s.gold) - 1 in s.masked_positions or len(s.rewritten) != len(s.gold):
                problems[f"{strat.value}: shape"] += 1
            for i, (g, r, prov) in enumerate(zip(s.gold, s.rewritten, s.provenance)):
                masked = i in s.masked_positions
                if masked and (prov != REWRITTEN or r == MASK):
                    problems[f"{strat.value}: fill"] += 1
                if not masked and (prov != KEPT or r != g):
                    problems[f"{strat.value}: locality"] += 1
            if s != imperfect.make_imperfect(strat, student, ex, seed=k, alpha=alpha):
                problems[f"{strat.value}: determinism"] += 1
        if costs != {2 if strat.needs_confidence else 1}:
            problems[f"{strat.value}: cost {sorted(costs)}"] += 1
    ok = not problems
    record("AC-5", ok, "1000 examples x 4 strategies: count, locality, determinism, cost "
           + ("hold" if ok else f"violations {dict(problems)}"))
    assert ok


# AC-6 ---------------------------------------------------------------------

def test_ac6_latency_ordering(acceptance):
    _, runs = acceptance

    def per_step(name):
        return _mean([runs[recipes.run_id(name, s)]["manifest"]["ledger"]["passes_per_step"] for s in SEEDS])

    def wall(name):
        return _mean([runs[recipes.run_id(name, s)]["manifest"]["ledger"]["wall_seconds"] for s in SEEDS])

    gkd, kid, rkd = per_step("gkd"), per_step("kid"), per_step("rkd")
    ok = gkd >= 3 * kid and kid <= 1.5 * rkd
    sft_wall = wall("sft")
    record("AC-6", ok, f"passes/step GKD={gkd:.1f} KID={kid:.1f} RKD={rkd:.1f} "
           f"(GKD>=3*KID, KID<=1.5*RKD); wall vs SFT (not asserted) "
           + " ".join(f"{n.upper()}={wall(n) / sft_wall:.1f}x" for n in ("rkd", "kid", "gkd")))
    assert ok


# AC-7 ---------------------------------------------------------------------

_AC7_FAMILIES = ("sft", "rkd", "gkd", "kid", "kid-maskonly")


def _ac7_checks(ex: dict[str, float]) -> dict[str, bool]:
    return {
        "KID>SFT+2": ex["kid"] >= ex["sft"] + 0.02,
        "KID>=RKD": ex["kid"] >= ex["rkd"],
        "KID>=GKD-1.5": ex["kid"] >= ex["gkd"] - 0.015,
        "rewrite>mask-only": ex["kid"] > ex["kid-maskonly"],
    }


def test_ac7_accuracy_ordering(acceptance):
    spec, runs = acceptance
    seeds = SEEDS
    single_seed_ok = all(
        all(_ac7_checks({n: _ex(runs, n, (s,))[0] for n in _AC7_FAMILIES}).values()) for s in SEEDS
    )
    if not single_seed_ok:
        spec5 = recipes.extra_seed_runs(spec, _AC7_FAMILIES)
        runs = {**runs, **recipes.run_recipe(spec5, log=lambda s: None, gate=False)}
        seeds = SEEDS + recipes.EXTRA_SEEDS
    means = {n: _mean(_ex(runs, n, seeds)) for n in _AC7_FAMILIES}
    checks = _ac7_checks(means)
    ok = all(checks.values())
    record("AC-7", ok, f"{len(seeds)}-seed mean EX " + " ".join(f"{n}={v:.3f}" for n, v in means.items())
           + "; " + ", ".join(f"{k} {'ok' if v else 'violated'}" for k, v in checks.items()))
    assert ok


# AC-8 ---------------------------------------------------------------------

def test_ac8_mismatch_ordering(acceptance):
    _, runs = acceptance

    def err(name):
        vals = [runs[recipes.run_id(name, s)]["metrics"]["exaccerr"] for s in SEEDS]
        assert all(v is not None for v in vals), f"{name}: teacher-forced error of 0 leaves ExAccErr undefined"
        return _mean(vals)

    fkd, kid, gkd = err("fkd"), err("kid"), err("gkd")
    ok = kid < fkd and gkd <= kid + 5.0
    record("AC-8", ok, f"3-seed mean ExAccErr FKD={fkd:.1f} KID={kid:.1f} GKD={gkd:.1f} "
                       f"(KID<FKD, GKD<=KID+5)")
    assert ok


# AC-9 ---------------------------------------------------------------------

def test_ac9_alpha_sweep(acceptance, capsys):
    _, runs = acceptance
    sweep = {a: _mean(_ex(runs, "kid" if a == 0.2 else f"kid-a{a:g}")) for a in recipes.ALPHA_SWEEP}
    with capsys.disabled():
        print("\nalpha sweep (3-seed mean EX): " + " ".join(f"{a:g}:{v:.3f}" for a, v in sweep.items()))
    ok = sweep[0.2] >= sweep[0.5]
    record("AC-9", ok, f"EX a=0.2 {sweep[0.2]:.3f} >= a=0.5 {sweep[0.5]:.3f}; sweep "
           + " ".join(f"{a:g}:{v:.3f}" for a, v in sweep.items()))
    assert ok


# AC-10 --------------------------------------------------------------------

def test_ac10_metric_sanity(acceptance):
    spec, runs = acceptance
    world = toysql.ToyWorld.from_json(Layout(spec.output_dir).world.read_text())
    gold_rows = score_texts(world, world.eval, [e.gold_sql for e in world.eval], k=spec.eval.k)
    gold_ex = _mean([r["ex_ok"] for r in gold_rows])
    ts_le_ex = all(
        m["metrics"]["ts"] <= m["metrics"]["ex"] and all(r["ex_ok"] or not r["ts_ok"] for r in m["metrics"]["per_example"])
        for m in runs.values()
    )
    mismatches = 0
    for q, db in toysql.iter_random_cases(10, 10_000):
        rs = toysql.execute(q, db)
        rows, ordered = brute_execute(q, db)
        mismatches += list(rs.rows) != rows or rs.ordered != ordered
    ok = gold_ex == 1.0 and ts_le_ex and mismatches == 0
    record("AC-10", ok, f"gold EX={gold_ex:.3f}, TS<=EX on all {len(runs)} runs: {ts_le_ex}, "
                        f"executor vs brute force: {mismatches} mismatches in 10000 pairs")
    assert ok


# AC-11 --------------------------------------------------------------------

_NONDETERMINISTIC = ("wall_seconds", "relative_to_sft")


def _stable_manifest(path: Path) -> dict:
    m = json.loads(path.read_text())
    for key in _NONDETERMINISTIC:
        m["ledger"].pop(key, None)
    for key in ("teacher_checkpoint", "student_checkpoint"):
        m[key] = m[key] and Path(m[key]).name
    return m


def test_ac11_reproducibility(acceptance, tmp_path):
    """Rerun world generation and two students against the cached recipe.

    Retraining the teacher and all students a second time would double the
    hours-long recipe, so the rerun is the world plus one fixed-data and one
    on-the-fly run on the cached teacher (see the decisions ledger).
    """
    spec, _ = acceptance
    src = Layout(spec.output_dir)
    again = recipes.acceptance_spec(str(tmp_path / "rerun"))
    dst = Layout(again.output_dir)
    cli.cmd_gen_world(again, log=lambda s: None)
    dst.teacher.parent.mkdir(parents=True, exist_ok=True)
    dst.teacher_report.parent.mkdir(parents=True, exist_ok=True)
    dst.teacher.write_bytes(src.teacher.read_bytes())
    dst.teacher_report.write_bytes(src.teacher_report.read_bytes())
    diffs = []
    if dst.world.read_bytes() != src.world.read_bytes():
        diffs.append("world")
    for rid in (recipes.run_id("sft", SEEDS[0]), recipes.run_id("kid", SEEDS[0])):
        recipes.run_recipe(again, [rid], log=lambda s: None)
        if dst.student(rid).read_bytes() != src.student(rid).read_bytes():
            diffs.append(f"{rid} checkpoint")
        if dst.metrics(rid).read_bytes() != src.metrics(rid).read_bytes():
            diffs.append(f"{rid} metrics")
        if _stable_manifest(dst.manifest(rid)) != _stable_manifest(src.manifest(rid)):
            diffs.append(f"{rid} manifest")
    ok = not diffs
    record("AC-11", ok, "world, sft and kid reruns bit-identical (checkpoints, metrics, manifests minus wall clock)"
           if ok else f"differences: {diffs}")
    assert ok
