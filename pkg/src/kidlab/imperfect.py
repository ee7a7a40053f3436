"""Imperfect training targets: mask a fraction of gold tokens, let the student
fill them in one teacher-forced pass, and splice the fills back into the gold.

No autoregressive loop anywhere: one forward pass per batch for Random/Uniform
masks, two for Easy/Hard (an extra confidence pass over the clean gold).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .model import ParamStore, forward_logits, make_batch, softmax
from .tokenizer import BOS, EOS, MASK, PAD, VOCAB

DEFAULT_ALPHA = 0.2
_NEVER_FILL = (PAD, BOS, EOS, MASK)


class MaskStrategy(str, Enum):
    RANDOM = "random"
    UNIFORM = "uniform"
    EASY = "easy"
    HARD = "hard"

    @property
    def needs_confidence(self) -> bool:
        return self in (MaskStrategy.EASY, MaskStrategy.HARD)


class SequenceTooShort(ValueError):
    pass


KEPT, REWRITTEN = "kept", "rewritten"


@dataclass
class ImperfectSample:
    prompt: list[int]
    gold: list[int]
    masked_positions: list[int]
    rewritten: list[int]
    provenance: list[str]

    def to_json(self, strategy: str, alpha: float) -> str:
        return json.dumps({
            "gold_text": VOCAB.decode(self.gold),
            "rewritten_text": VOCAB.decode(self.rewritten),
            "masked_positions": self.masked_positions,
            "strategy": strategy,
            "alpha": alpha,
        })


def mask_count(length: int, alpha: float) -> int:
    """``max(1, round(alpha * length))`` with half-up rounding, capped at the maskable count."""
    if length < 2:
        raise SequenceTooShort(f"output of length {length} has no maskable token")
    k = max(1, math.floor(alpha * length + 0.5))
    return min(k, length - 1)


def _uniform_positions(n_maskable: int, k: int, alpha: float, seed: int) -> list[int]:
    stride = math.ceil(1.0 / alpha)
    start = seed % stride
    chosen: list[int] = []
    j = 0
    while len(chosen) < k and j < k:
        pos = (start + j * stride) % n_maskable
        if pos not in chosen:
            chosen.append(pos)
        j += 1
    # stride wrapped onto itself (short sequences): top up with the lowest free indices
    free = (i for i in range(n_maskable) if i not in chosen)
    while len(chosen) < k:
        chosen.append(next(free))
    return sorted(chosen)


def step_entropies(params: ParamStore, prompts, golds) -> list[np.ndarray]:
    """Per-position entropy of the student's teacher-forced distributions (one batched pass)."""
    batch = make_batch(prompts, golds)
    logits, _ = forward_logits(params, batch.ids)
    out = []
    for b in range(len(golds)):
        q = softmax(logits[b, batch.positions(b)].astype(np.float64))
        out.append(-(q * np.log(np.maximum(q, 1e-300))).sum(-1))
    return out


def _select(strategy: MaskStrategy, gold: Sequence[int], alpha: float, seed: int,
            entropy: np.ndarray | None) -> list[int]:
    n = len(gold)
    k = mask_count(n, alpha)
    n_maskable = n - 1  # the trailing EOS is never masked
    if strategy is MaskStrategy.RANDOM:
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(n_maskable, size=k, replace=False))
    if strategy is MaskStrategy.UNIFORM:
        return _uniform_positions(n_maskable, k, alpha, seed)
    h = np.asarray(entropy[:n_maskable])
    order = np.argsort(-h if strategy is MaskStrategy.HARD else h, kind="stable")
    return sorted(int(i) for i in order[:k])


def select_mask_positions_batch(strategy, golds, params: ParamStore | None, prompts, seeds,
                                alpha: float = DEFAULT_ALPHA) -> list[list[int]]:
    strategy = MaskStrategy(strategy)
    for g in golds:
        if len(g) < 2:
            raise SequenceTooShort(f"output of length {len(g)} has no maskable token")
    ent = step_entropies(params, prompts, golds) if strategy.needs_confidence else [None] * len(golds)
    return [_select(strategy, g, alpha, int(s), e) for g, s, e in zip(golds, seeds, ent)]


def select_mask_positions(strategy, gold, student_params, prompt, seed: int,
                          alpha: float = DEFAULT_ALPHA) -> list[int]:
    """Indices of ``gold`` to mask; never the final EOS."""
    return select_mask_positions_batch(strategy, [list(gold)], student_params, [list(prompt)], [seed], alpha)[0]


def apply_mask(gold: Sequence[int], positions: Sequence[int]) -> list[int]:
    out = list(gold)
    for i in positions:
        out[i] = MASK
    return out


def fill_masks_batch(params: ParamStore, prompts, masked_golds, *, mode: str = "greedy",
                     temperature: float = 1.0, seeds=None) -> list[list[tuple[int, int]]]:
    """One teacher-forced pass over the masked sequences; read a fill at every MASK.

    The step distribution at position ``t`` conditions on the masked prefix
    (earlier MASK tokens included) and never on the MASK at ``t`` itself.
    """
    for mg in masked_golds:
        if MASK not in mg:
            raise ValueError("masked sequence contains no MASK token")
    batch = make_batch(prompts, masked_golds)
    logits, _ = forward_logits(params, batch.ids)
    fills = []
    for b, mg in enumerate(masked_golds):
        pos = [i for i, t in enumerate(mg) if t == MASK]
        rows = logits[b, batch.positions(b)[pos]].astype(np.float64)
        rows[:, list(_NEVER_FILL)] = -np.inf
        if mode == "greedy":
            toks = rows.argmax(-1)
        elif mode == "sample":
            rng = np.random.default_rng(None if seeds is None else int(seeds[b]))
            probs = softmax(rows, temperature)
            toks = np.array([rng.choice(len(p), p=p) for p in probs])
        else:
            raise ValueError(f"unknown fill mode {mode!r}")
        fills.append([(int(i), int(t)) for i, t in zip(pos, toks)])
    return fills


def fill_masks(student_params, prompt, masked_gold, mode: str = "greedy", temperature: float = 1.0,
               seed: int | None = None) -> list[tuple[int, int]]:
    return fill_masks_batch(student_params, [list(prompt)], [list(masked_gold)], mode=mode,
                            temperature=temperature, seeds=None if seed is None else [seed])[0]


def make_imperfect_batch(strategy, params: ParamStore, prompts, golds, seeds, *,
                         alpha: float = DEFAULT_ALPHA, mode: str = "greedy", temperature: float = 1.0,
                         rewrite: bool = True) -> list[ImperfectSample]:
    """Mask -> predict -> rewrite for a whole batch.

    With ``rewrite=False`` the masked sequence itself is the imperfect target
    (the masking-only ablation) and no fill pass runs.
    """
    prompts = [list(p) for p in prompts]
    golds = [list(g) for g in golds]
    positions = select_mask_positions_batch(strategy, golds, params, prompts, seeds, alpha)
    masked = [apply_mask(g, pos) for g, pos in zip(golds, positions)]
    if rewrite:
        fills = fill_masks_batch(params, prompts, masked, mode=mode, temperature=temperature, seeds=seeds)
    else:
        fills = [[(i, MASK) for i in pos] for pos in positions]
    samples = []
    for p, g, pos, f in zip(prompts, golds, positions, fills):
        out = list(g)
        prov = [KEPT] * len(g)
        for i, tok in f:
            out[i] = tok
            prov[i] = REWRITTEN
        samples.append(ImperfectSample(p, g, list(pos), out, prov))
    return samples


def encode_example(example) -> tuple[list[int], list[int]]:
    """Prompt and gold output ids of a :class:`toysql.Example`."""
    return VOCAB.encode_prompt(example.prompt), VOCAB.encode(example.gold_sql)


def make_imperfect(strategy, student_params, example, seed: int, alpha: float = DEFAULT_ALPHA,
                   mode: str = "greedy", rewrite: bool = True) -> ImperfectSample:
    prompt, gold = encode_example(example)
    return make_imperfect_batch(strategy, student_params, [prompt], [gold], [seed], alpha=alpha,
                                mode=mode, rewrite=rewrite)[0]
