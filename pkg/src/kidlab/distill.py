"""Training algorithms: SFT plus the six KD variants (FKD, RKD, f-distill, ImitKD, GKD, KID).

Every trainer shares one loop.  Per step it decides which output sequences
the divergence is measured on (gold, student samples, teacher samples, or
imperfect rewrites), runs the frozen teacher on them, and runs the student
once over those sequences stacked with the gold outputs that carry the
auxiliary MLE term.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import imperfect
from .divergence import DivergenceKind, value_and_grad
from .imperfect import MaskStrategy
from .model import (
    Adam,
    ModelConfig,
    NonFiniteGradient,
    NonFiniteLoss,
    ParamStore,
    backward,
    count_forwards,
    forward_logits,
    gather_steps,
    generate_batch,
    init_params,
    make_batch,
    nll_rows,
    scatter_steps,
    softmax,
)
from .toysql import ToyWorld, derive_seed
from .tokenizer import VOCAB

ALGORITHMS = ("SFT", "FKD", "RKD", "FDistill", "ImitKD", "GKD", "KID")
DEFAULT_DIVERGENCE = {
    "SFT": None,
    "FKD": DivergenceKind.FKL,
    "RKD": DivergenceKind.RKL,
    "FDistill": DivergenceKind.TVD,
    "ImitKD": DivergenceKind.FKL,
    "GKD": DivergenceKind.RKL,
    "KID": DivergenceKind.RKL,
}


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    sampling: int = 0


@dataclass
class DistillConfig:
    algorithm: str = "KID"
    divergence: str | None = None  # None -> the algorithm's default pairing
    alpha: float = imperfect.DEFAULT_ALPHA
    mle_weight: float = 1.0
    kd_weight: float = 1.0
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    seeds: Seeds = field(default_factory=Seeds)
    mask_strategy: str = "random"
    rewrite: bool = True
    fill_mode: str = "greedy"
    sample_temperature: float = 1.0
    imit_gold_prob: float = 0.5
    max_new: int = 40
    eval_every: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)

    @property
    def kind(self) -> DivergenceKind | None:
        if self.divergence is not None:
            return DivergenceKind(self.divergence)
        return DEFAULT_DIVERGENCE[self.algorithm]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["divergence"] = self.kind.value if self.kind else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)


@dataclass
class LatencyLedger:
    wall_seconds: float = 0.0
    forward_passes: int = 0
    forward_positions: int = 0
    generated_tokens: int = 0
    steps: int = 0
    relative_to_sft: float | None = None

    @property
    def passes_per_step(self) -> float:
        return self.forward_passes / max(1, self.steps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passes_per_step"] = self.passes_per_step
        return d


class TeacherRequired(ValueError):
    pass


@dataclass
class TrainResult:
    params: ParamStore
    ledger: LatencyLedger
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    gold_elements: int = 0  # batch elements whose divergence target was the gold output
    kd_elements: int = 0


def _encode_split(world: ToyWorld):
    prompts = [VOCAB.encode_prompt(e.prompt) for e in world.train]
    golds = [VOCAB.encode(e.gold_sql) for e in world.train]
    return prompts, golds


class _Sampler:
    """Epoch-wise shuffled mini-batches from the data seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self.order = np.array([], dtype=np.int64)

    def next(self) -> np.ndarray:
        if len(self.order) < self.bs:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[: self.bs], self.order[self.bs:]
        return idx


def _complete(seq: list[int]) -> list[int]:
    return seq if seq else [0]


def teacher_samples(teacher: ParamStore, prompts, seed: int, max_new: int, temperature: float = 1.0,
                    chunk: int = 64) -> list[list[int]]:
    """Teacher outputs sampled once up front (the fixed half of f-distill's data)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(0, len(prompts), chunk):
        out += generate_batch(teacher, prompts[i:i + chunk], greedy=False, temperature=temperature,
                              max_new=max_new, rng=rng)
    return out


def kd_step_loss(student: ParamStore, teacher: ParamStore | None, kind: DivergenceKind | None,
                 prompts, kd_outputs, gold_outputs, kd_weight: float, mle_weight: float,
                 share_gold: bool, drop_rng: np.random.Generator | None = None):
    """Loss and student gradients for one batch.

    ``kd_outputs`` are the sequences the divergence is averaged over (per
    sequence, then over the batch); ``gold_outputs`` carry the MLE term.  When
    ``share_gold`` the two coincide and a single B-row student pass serves both.
    """
    B = len(prompts)
    use_kd = kind is not None and kd_outputs is not None
    if use_kd and not share_gold:
        rows_prompts = list(prompts) + list(prompts)
        rows_outputs = list(kd_outputs) + list(gold_outputs)
    else:
        rows_prompts, rows_outputs = list(prompts), list(gold_outputs if not use_kd else kd_outputs)
    batch = make_batch(rows_prompts, rows_outputs)
    logits, cache = forward_logits(student, batch.ids, keep_cache=True, train=drop_rng is not None, rng=drop_rng)
    rows, owner, targets = gather_steps(batch, logits)
    lens = batch.output_lens[owner].astype(np.float64)
    drows = np.zeros(rows.shape, dtype=np.float64)
    total = 0.0
    kd_val = 0.0

    if use_kd:
        kd_sel = owner < B
        kbatch = make_batch(prompts, kd_outputs)
        tlogits, _ = forward_logits(teacher, kbatch.ids)
        trows, _, _ = gather_steps(kbatch, tlogits)
        p = softmax(trows.astype(np.float64))
        vals, grads = value_and_grad(kind, p, rows[kd_sel])
        w = 1.0 / (lens[kd_sel] * B)
        kd_val = float((w * vals).sum())
        total += kd_weight * kd_val
        drows[kd_sel] += kd_weight * grads * w[:, None]

    mle_sel = owner >= B if (use_kd and not share_gold) else np.ones(len(owner), dtype=bool)
    w = 1.0 / (lens[mle_sel] * B)
    mle_val, mle_grad = nll_rows(rows[mle_sel], targets[mle_sel], w)
    total += mle_weight * mle_val
    drows[mle_sel] += mle_weight * mle_grad

    if not np.isfinite(total):
        raise NonFiniteLoss(f"loss {total}")
    grads = backward(student, cache, scatter_steps(batch, drows, logits.shape))
    return total, grads, {"kd": kd_val, "mle": mle_val}


def train(world: ToyWorld, student_config: ModelConfig, cfg: DistillConfig, teacher: ParamStore | None = None,
          *, init: ParamStore | None = None,
          eval_fn: Callable[[ParamStore, int], dict] | None = None) -> TrainResult:
    """Run one algorithm end to end. The teacher is never modified."""
    algo = cfg.algorithm
    kind = cfg.kind
    if algo != "SFT" and teacher is None:
        raise TeacherRequired(f"{algo} needs a teacher checkpoint")
    if not world.train:
        raise ValueError("world has no training examples")
    prompts, golds = _encode_split(world)
    params = init.copy() if init is not None else init_params(student_config, cfg.seeds.init)
    opt = Adam(lr=cfg.lr, total_steps=max(1, cfg.steps))
    sampler = _Sampler(len(prompts), cfg.batch_size, cfg.seeds.data)
    srng = np.random.default_rng(cfg.seeds.sampling)
    ledger = LatencyLedger()
    result = TrainResult(params, ledger)
    strategy = MaskStrategy(cfg.mask_strategy)
    drop_rng = np.random.default_rng(derive_seed(cfg.seeds.init, 1)) if params.config.dropout > 0 else None

    def run_eval(step: int):
        if eval_fn is not None:
            row = dict(eval_fn(params, step))
            row["step"] = step
            result.history.append(row)

    t0 = time.perf_counter()
    with count_forwards() as counter:
        fixed_teacher = None
        if algo == "FDistill":
            fixed_teacher = teacher_samples(teacher, prompts, cfg.seeds.sampling, cfg.max_new,
                                            cfg.sample_temperature)
            ledger.generated_tokens += sum(len(s) for s in fixed_teacher)
        for step in range(cfg.steps):
            if cfg.eval_every and step % cfg.eval_every == 0:
                ledger.wall_seconds += time.perf_counter() - t0
                with paused_counter(counter):
                    run_eval(step)
                t0 = time.perf_counter()
            idx = sampler.next()
            bp = [prompts[i] for i in idx]
            bg = [golds[i] for i in idx]
            kd_out = None
            share = False
            if algo in ("FKD", "RKD"):
                kd_out, share = bg, True
            elif algo == "GKD":
                kd_out = [_complete(s) for s in generate_batch(params, bp, greedy=False, temperature=cfg.sample_temperature,
                                                               max_new=cfg.max_new, rng=srng)]
                ledger.generated_tokens += sum(len(s) for s in kd_out)
            elif algo == "ImitKD":
                use_gold = srng.random(len(idx)) < cfg.imit_gold_prob
                kd_out = list(bg)
                todo = [j for j in range(len(idx)) if not use_gold[j]]
                if todo:
                    gen = generate_batch(params, [bp[j] for j in todo], greedy=False,
                                         temperature=cfg.sample_temperature, max_new=cfg.max_new, rng=srng)
                    for j, s in zip(todo, gen):
                        kd_out[j] = _complete(s)
                    ledger.generated_tokens += sum(len(s) for s in gen)
            elif algo == "FDistill":
                half = len(idx) // 2
                kd_out = [fixed_teacher[i] for i in idx[:half]]
                gen = generate_batch(params, bp[half:], greedy=False, temperature=cfg.sample_temperature,
                                     max_new=cfg.max_new, rng=srng)
                kd_out += [_complete(s) for s in gen]
                ledger.generated_tokens += sum(len(s) for s in gen)
            elif algo == "KID":
                seeds = srng.integers(0, 2**63, size=len(idx))
                samples = imperfect.make_imperfect_batch(
                    strategy, params, bp, bg, seeds, alpha=cfg.alpha, mode=cfg.fill_mode,
                    temperature=cfg.sample_temperature, rewrite=cfg.rewrite)
                kd_out = [s.rewritten for s in samples]
            if kd_out is not None:
                result.kd_elements += len(kd_out)
                result.gold_elements += sum(a is b for a, b in zip(kd_out, bg))
            try:
                loss, grads, _ = kd_step_loss(params, teacher, kind if algo != "SFT" else None, bp, kd_out, bg,
                                              cfg.kd_weight, cfg.mle_weight, share, drop_rng)
                opt.step(params, grads)
            except (NonFiniteLoss, NonFiniteGradient) as e:
                # both checks fire before any parameter is touched, so these are last-good
                e.params, e.step = params, step
                raise
            result.losses.append(loss)
            ledger.steps += 1
        ledger.wall_seconds += time.perf_counter() - t0
        ledger.forward_passes = counter.passes
        ledger.forward_positions = counter.positions
    if cfg.eval_every:
        run_eval(cfg.steps)
    return result


class paused_counter:
    """Suspend one forward counter (evaluation cost is not training cost)."""

    def __init__(self, counter):
        self.counter = counter
        self.saved = None

    def __enter__(self):
        self.saved = (self.counter.passes, self.counter.sequences, self.counter.positions)
        return self

    def __exit__(self, *exc):
        self.counter.passes, self.counter.sequences, self.counter.positions = self.saved
        return False


def train_sft(world, student_config, run: DistillConfig, **kw) -> TrainResult:
    return train(world, student_config, _with_algo(run, "SFT"), None, **kw)


def train_fixed_data_kd(world, teacher, student_config, run: DistillConfig, **kw) -> TrainResult:
    if run.algorithm not in ("FKD", "RKD"):
        raise ValueError("fixed-data KD is FKD or RKD")
    return train(world, student_config, run, teacher, **kw)


def train_onpolicy_kd(world, teacher, student_config, run: DistillConfig, **kw) -> TrainResult:
    if run.algorithm not in ("GKD", "ImitKD", "FDistill"):
        raise ValueError("on-policy KD is GKD, ImitKD or FDistill")
    return train(world, student_config, run, teacher, **kw)


def train_kid(world, teacher, student_config, run: DistillConfig, **kw) -> TrainResult:
    return train(world, student_config, _with_algo(run, "KID"), teacher, **kw)


def _with_algo(run: DistillConfig, algo: str) -> DistillConfig:
    if run.algorithm == algo:
        return run
    d = run.to_dict()
    d["algorithm"] = algo
    d["divergence"] = None
    return DistillConfig.from_dict(d)
