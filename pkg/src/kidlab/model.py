"""Tiny decoder-only transformer in numpy with exact reverse-mode gradients.

Pre-norm blocks, learned positional embeddings, output head tied to the token
embedding.  Everything is batched over right-padded ``[B, T]`` id arrays; with
causal attention, right padding never influences the real positions.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import EOS, MASK, PAD, VOCAB

FORMAT_VERSION = 1
_MAGIC = b"KIDCKPT\x00"


class LengthExceeded(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int = len(VOCAB)
    max_len: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def teacher(cls, **kw) -> "ModelConfig":
        return cls(d_model=128, n_heads=4, n_layers=4, d_ff=256, **kw)

    @classmethod
    def student(cls, **kw) -> "ModelConfig":
        return cls(d_model=48, n_heads=2, n_layers=2, d_ff=192, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ParamStore:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {k: v.copy() for k, v in self.arrays.items()}, self.step, self.seed)

    def check_finite(self) -> None:
        for k, v in self.arrays.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite values in parameter {k}")

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for l in range(cfg.n_layers):
        shapes.update({
            f"h{l}.ln1_g": (d,), f"h{l}.ln1_b": (d,),
            f"h{l}.w_qkv": (d, 3 * d), f"h{l}.b_qkv": (3 * d,),
            f"h{l}.w_o": (d, d), f"h{l}.b_o": (d,),
            f"h{l}.ln2_g": (d,), f"h{l}.ln2_b": (d,),
            f"h{l}.w_fc": (d, f), f"h{l}.b_fc": (f,),
            f"h{l}.w_proj": (f, d), f"h{l}.b_proj": (d,),
        })
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, seed: int, scale: float = 0.02, dtype=np.float32) -> ParamStore:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            a = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            a = np.zeros(shape)
        else:
            std = scale
            if leaf == "w_proj" or leaf == "w_o":
                std = scale / math.sqrt(2 * cfg.n_layers)
            a = rng.normal(0.0, std, size=shape)
        arrays[name] = a.astype(dtype)
    return ParamStore(cfg, arrays, 0, seed)


# --------------------------------------------------------------------------- instrumentation


@dataclass
class ForwardCounter:
    passes: int = 0
    sequences: int = 0
    positions: int = 0

    def add(self, batch: int, length: int) -> None:
        self.passes += 1
        self.sequences += batch
        self.positions += batch * length


_counters: list[ForwardCounter] = []


@contextlib.contextmanager
def count_forwards():
    """Count every forward pass (one batched call = one pass) run inside the block."""
    c = ForwardCounter()
    _counters.append(c)
    try:
        yield c
    finally:
        _counters.remove(c)


# --------------------------------------------------------------------------- forward / backward

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    # tanh approximation; returns the tanh term for reuse in the backward pass
    t = x * x
    t *= 0.044715 * _GELU_C
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_grad(x, t):
    x2 = x * x
    x2 *= 3 * 0.044715 * _GELU_C
    x2 += _GELU_C  # d(inner)/dx
    sech2 = 1.0 - t * t
    sech2 *= x
    sech2 *= x2
    sech2 += 1.0 + t
    sech2 *= 0.5
    return sech2


def _layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(0)
    db = dy.sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def forward_logits(params: ParamStore, ids: np.ndarray, *, train: bool = False,
                   rng: np.random.Generator | None = None, keep_cache: bool = False):
    """Logits ``[B, T, V]`` for an id batch. Returns ``(logits, cache)``."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    B, T = ids.shape
    if T > cfg.max_len:
        raise LengthExceeded(f"sequence length {T} > max_len {cfg.max_len}")
    for c in _counters:
        c.add(B, T)
    P = params.arrays
    H = cfg.n_heads
    d = cfg.d_model
    dh = d // H
    N = B * T
    drop = cfg.dropout if train else 0.0
    if drop > 0 and rng is None:
        raise ValueError("dropout needs an rng")

    x = (P["tok_emb"][ids] + P["pos_emb"][:T]).reshape(N, d)
    mask = _causal_mask(T)
    layers = []
    for l in range(cfg.n_layers):
        pre = f"h{l}."
        h, ln1 = _layernorm(x, P[pre + "ln1_g"], P[pre + "ln1_b"])
        qkv = h @ P[pre + "w_qkv"]
        qkv += P[pre + "b_qkv"]
        qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        s = q @ k.transpose(0, 1, 3, 2)
        s *= 1.0 / math.sqrt(dh)
        s[..., mask] = -1e30
        s -= s.max(-1, keepdims=True)
        a = np.exp(s, out=s)
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(N, d)
        attn = o @ P[pre + "w_o"]
        attn += P[pre + "b_o"]
        m1 = None
        if drop > 0:
            m1 = (rng.random(attn.shape) >= drop).astype(attn.dtype) / (1 - drop)
            attn *= m1
        x = x + attn
        h2, ln2 = _layernorm(x, P[pre + "ln2_g"], P[pre + "ln2_b"])
        u = h2 @ P[pre + "w_fc"]
        u += P[pre + "b_fc"]
        g, t = _gelu(u)
        mlp = g @ P[pre + "w_proj"]
        mlp += P[pre + "b_proj"]
        m2 = None
        if drop > 0:
            m2 = (rng.random(mlp.shape) >= drop).astype(mlp.dtype) / (1 - drop)
            mlp *= m2
        x = x + mlp
        if keep_cache:
            layers.append((h, ln1, q, k, v, a, o, m1, h2, ln2, u, g, t, m2))
    xf, lnf = _layernorm(x, P["lnf_g"], P["lnf_b"])
    logits = (xf @ P["tok_emb"].T).reshape(B, T, -1)
    cache = {"ids": ids, "layers": layers, "xf": xf, "lnf": lnf} if keep_cache else None
    return logits, cache


def backward(params: ParamStore, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given its gradient w.r.t. the logits."""
    if not np.all(np.isfinite(dlogits)):
        raise NonFiniteLoss("non-finite loss gradient")
    cfg = params.config
    P = params.arrays
    ids = cache["ids"]
    B, T = ids.shape
    H = cfg.n_heads
    d = cfg.d_model
    dh = d // H
    N = B * T
    dlogits = dlogits.astype(P["tok_emb"].dtype, copy=False).reshape(N, -1)
    grads = {}

    xf = cache["xf"]
    d_emb = dlogits.T @ xf
    dxf = dlogits @ P["tok_emb"]
    dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dxf, P["lnf_g"], cache["lnf"])

    for l in reversed(range(cfg.n_layers)):
        pre = f"h{l}."
        h, ln1, q, k, v, a, o, m1, h2, ln2, u, g, t, m2 = cache["layers"][l]
        # MLP branch
        dmlp = dx if m2 is None else dx * m2
        grads[pre + "b_proj"] = dmlp.sum(0)
        grads[pre + "w_proj"] = g.T @ dmlp
        du = dmlp @ P[pre + "w_proj"].T
        du *= _gelu_grad(u, t)
        grads[pre + "b_fc"] = du.sum(0)
        grads[pre + "w_fc"] = h2.T @ du
        dh2 = du @ P[pre + "w_fc"].T
        dxl, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layernorm_back(dh2, P[pre + "ln2_g"], ln2)
        dx = dx + dxl
        # attention branch
        dattn = dx if m1 is None else dx * m1
        grads[pre + "b_o"] = dattn.sum(0)
        grads[pre + "w_o"] = o.T @ dattn
        do = (dattn @ P[pre + "w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = da - (da * a).sum(-1, keepdims=True)
        ds *= a
        ds *= 1.0 / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv], axis=0).transpose(1, 3, 0, 2, 4).reshape(N, 3 * d)
        grads[pre + "b_qkv"] = dqkv.sum(0)
        grads[pre + "w_qkv"] = h.T @ dqkv
        dh_ = dqkv @ P[pre + "w_qkv"].T
        dxl, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layernorm_back(dh_, P[pre + "ln1_g"], ln1)
        dx = dx + dxl

    dpos = np.zeros_like(P["pos_emb"])
    dpos[:T] = dx.reshape(B, T, d).sum(0)
    grads["pos_emb"] = dpos
    np.add.at(d_emb, ids.reshape(-1), dx)
    grads["tok_emb"] = d_emb
    return grads


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = z / temperature
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


# --------------------------------------------------------------------------- batching helpers


@dataclass
class Batch:
    """Right-padded prompt+output sequences and where each output token is predicted."""

    ids: np.ndarray  # [B, T]
    prompt_lens: np.ndarray  # [B]
    output_lens: np.ndarray  # [B]

    def positions(self, b: int) -> np.ndarray:
        """Indices of the logits that predict output tokens 0..len-1 of row ``b``."""
        start = self.prompt_lens[b] - 1
        return np.arange(start, start + self.output_lens[b])

    def output_tokens(self, b: int) -> np.ndarray:
        p = self.prompt_lens[b]
        return self.ids[b, p:p + self.output_lens[b]]


def make_batch(prompts, outputs) -> Batch:
    """Stack prompts and (complete) output sequences into one padded array."""
    lens = [len(p) + len(o) for p, o in zip(prompts, outputs)]
    T = max(lens)
    ids = np.full((len(prompts), T), PAD, dtype=np.int64)
    for b, (p, o) in enumerate(zip(prompts, outputs)):
        ids[b, :len(p)] = p
        ids[b, len(p):len(p) + len(o)] = o
    # The last output token is an input only for positions we never read, so the
    # array can stop one short; keep it anyway for decoding convenience.
    return Batch(ids, np.array([len(p) for p in prompts]), np.array([len(o) for o in outputs]))


def gather_steps(batch: Batch, logits: np.ndarray):
    """Flatten output-predicting rows: ``(rows [N, V], row_of [N], targets [N])``."""
    rows, owner, targets = [], [], []
    for b in range(len(batch.prompt_lens)):
        pos = batch.positions(b)
        rows.append(logits[b, pos])
        owner.append(np.full(len(pos), b))
        targets.append(batch.output_tokens(b))
    return np.concatenate(rows), np.concatenate(owner), np.concatenate(targets)


def scatter_steps(batch: Batch, grad_rows: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float32)
    k = 0
    for b in range(len(batch.prompt_lens)):
        pos = batch.positions(b)
        out[b, pos] = grad_rows[k:k + len(pos)]
        k += len(pos)
    return out


# --------------------------------------------------------------------------- public single-example API


def forward(params: ParamStore, prompt, output_prefix, temperature: float = 1.0) -> np.ndarray:
    """Teacher-forced step distributions, one row per output position ``[len(output), V]``.

    Row ``t`` conditions on the prompt and ``output_prefix[:t]`` only.
    """
    prompt = list(prompt)
    output_prefix = list(output_prefix)
    if len(prompt) + len(output_prefix) > params.config.max_len:
        raise LengthExceeded("prompt + output longer than max_len")
    batch = make_batch([prompt], [output_prefix])
    logits, _ = forward_logits(params, batch.ids)
    return softmax(logits[0, batch.positions(0)].astype(np.float64), temperature)


def mle_loss(params: ParamStore, prompts, outputs):
    """Mean over sequences of per-token negative log-likelihood, with its gradients."""
    batch = make_batch(prompts, outputs)
    logits, cache = forward_logits(params, batch.ids, keep_cache=True)
    rows, owner, targets = gather_steps(batch, logits)
    w = 1.0 / (batch.output_lens[owner] * len(outputs))
    loss, drows = nll_rows(rows, targets, w)
    grads = backward(params, cache, scatter_steps(batch, drows, logits.shape))
    return loss, grads


def nll_rows(rows: np.ndarray, targets: np.ndarray, weights: np.ndarray):
    """Weighted cross-entropy of logit rows and its gradient w.r.t. the rows."""
    z = rows.astype(np.float64)
    lp = log_softmax(z)
    n = np.arange(len(targets))
    loss = float(-(weights * lp[n, targets]).sum())
    g = np.exp(lp)
    g[n, targets] -= 1.0
    return loss, g * weights[:, None]


# --------------------------------------------------------------------------- generation


def generate_batch(params: ParamStore, prompts, *, greedy: bool = True, temperature: float = 1.0,
                   seed: int | None = None, max_new: int = 48, rng: np.random.Generator | None = None):
    """Autoregressive decoding for a list of prompts; returns outputs ending in EOS when emitted."""
    cfg = params.config
    if max(len(p) for p in prompts) + max_new > cfg.max_len:
        raise LengthExceeded("prompt leaves no room for max_new tokens")
    if not greedy and rng is None:
        rng = np.random.default_rng(seed)
    B = len(prompts)
    lens = np.array([len(p) for p in prompts])
    ids = np.full((B, lens.max() + max_new), PAD, dtype=np.int64)
    for b, p in enumerate(prompts):
        ids[b, :len(p)] = p
    outs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for _ in range(max_new):
        active = np.nonzero(~done)[0]
        if len(active) == 0:
            break
        cur = lens[active]
        T = int(cur.max())
        logits, _ = forward_logits(params, ids[active, :T])
        last = logits[np.arange(len(active)), cur - 1].astype(np.float64)
        last[:, MASK] = -np.inf
        last[:, PAD] = -np.inf
        if greedy or temperature <= 0:
            nxt = last.argmax(-1)
        else:
            probs = softmax(last, temperature)
            u = rng.random(len(active))
            nxt = np.minimum((probs.cumsum(-1) < u[:, None]).sum(-1), probs.shape[-1] - 1)
        for j, b in enumerate(active):
            tok = int(nxt[j])
            outs[b].append(tok)
            ids[b, lens[b]] = tok
            lens[b] += 1
            if tok == EOS:
                done[b] = True
    return outs


def generate(params: ParamStore, prompt, mode: str = "greedy", temperature: float = 1.0,
             seed: int | None = None, max_new: int = 48) -> list[int]:
    """Decode one prompt. ``mode`` is ``"greedy"`` or ``"sample"``."""
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    return generate_batch(params, [list(prompt)], greedy=mode == "greedy", temperature=temperature,
                          seed=seed, max_new=max_new)[0]


# --------------------------------------------------------------------------- optimizer


@dataclass
class Adam:
    lr: float = 3e-3
    total_steps: int = 1000
    warmup_frac: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def lr_at(self, step: int) -> float:
        warm = max(1, int(round(self.warmup_frac * self.total_steps)))
        return self.lr * min(1.0, (step + 1) / warm)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        """In-place Adam update; warmup is linear over the first 5% of steps."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(k)
        scale = 1.0
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        lr = self.lr_at(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in params.arrays.items():
            g = grads.get(k)
            if g is None:
                continue
            g = g * scale if scale != 1.0 else g
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        params.step += 1


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(params: ParamStore, path: str | Path, extra: dict | None = None) -> None:
    """Header (config JSON, format version) followed by little-endian float32 arrays."""
    names = sorted(params.arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "step": params.step,
        "seed": params.seed,
        "arrays": [{"name": n, "shape": list(params.arrays[n].shape)} for n in names],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for n in names:
        buf.write(np.ascontiguousarray(params.arrays[n], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hl,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hl])
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    off = 12 + hl
    arrays = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(spec["shape"])
        arrays[spec["name"]] = arr.astype(np.float32)
        off += 4 * n
    return ParamStore(ModelConfig.from_dict(header["config"]), arrays, header["step"], header["seed"])
