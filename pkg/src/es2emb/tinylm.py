"""Byte-level autoregressive transformer with a hand-written backward pass.

Pre-norm GPT-style blocks, learned positions, input/output embedding tied.
All math runs in float64 numpy so training is bit-deterministic on CPU and
analytic gradients can be checked against central finite differences;
checkpoints store parameters as little-endian float32.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

BOS_ID = 0
N_SPECIAL = 1  # just the beginning-of-sequence marker
MIN_VOCAB = 256 + N_SPECIAL

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss at step {step}: {value!r}")
        self.step = step


@dataclass(frozen=True)
class LMConfig:
    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    context_len: int = 1024
    vocab_size: int = MIN_VOCAB
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.hidden_dim < 2:
            raise ValueError("hidden_dim must be >= 2")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.vocab_size < MIN_VOCAB:
            raise ValueError(f"vocab_size must be >= {MIN_VOCAB}")


@dataclass(frozen=True)
class TokenStream:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def truncate(self, max_len: int) -> "TokenStream":
        return TokenStream(self.ids[:max_len]) if len(self.ids) > max_len else self


def tokenize(text: str) -> TokenStream:
    """UTF-8 bytes shifted past the special ids, with BOS prepended."""
    return TokenStream((BOS_ID,) + tuple(b + N_SPECIAL for b in text.encode("utf-8")))


def detokenize(stream: TokenStream) -> str:
    return bytes(i - N_SPECIAL for i in stream.ids if i >= N_SPECIAL).decode("utf-8")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-5
    schedule: str = "cosine"
    weight_decay: float = 1e-6
    batch_size: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_epsilon: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("learning_rate", "weight_decay", "adam_beta2", "adam_epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")


def param_order(config: LMConfig) -> list[str]:
    """Fixed parameter order used by the TLM1 checkpoint layout."""
    names = ["wte", "wpe"]
    for i in range(config.n_layers):
        names += [
            f"h{i}.ln1.g",
            f"h{i}.ln1.b",
            f"h{i}.attn.w_qkv",
            f"h{i}.attn.b_qkv",
            f"h{i}.attn.w_out",
            f"h{i}.attn.b_out",
            f"h{i}.ln2.g",
            f"h{i}.ln2.b",
            f"h{i}.mlp.w_fc",
            f"h{i}.mlp.b_fc",
            f"h{i}.mlp.w_out",
            f"h{i}.mlp.b_out",
        ]
    names += ["lnf.g", "lnf.b"]
    return names


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + _GELU_A * z**3)))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (z + _GELU_A * z**3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * z**2)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


@dataclass
class ForwardPass:
    logits: np.ndarray  # (T, V)
    hidden: np.ndarray  # (L+1, T, d); [0] is the embedding-layer output
    cache: dict


class TinyLM:
    """Desk-scale causal transformer over byte tokens."""

    def __init__(self, config: LMConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, V = config.hidden_dim, config.vocab_size
        p: dict[str, np.ndarray] = {
            "wte": rng.normal(0.0, 0.02, (V, d)),
            "wpe": rng.normal(0.0, 0.02, (config.context_len, d)),
        }
        for i in range(config.n_layers):
            p[f"h{i}.ln1.g"] = np.ones(d)
            p[f"h{i}.ln1.b"] = np.zeros(d)
            p[f"h{i}.attn.w_qkv"] = rng.normal(0.0, 0.02, (d, 3 * d))
            p[f"h{i}.attn.b_qkv"] = np.zeros(3 * d)
            p[f"h{i}.attn.w_out"] = rng.normal(0.0, 0.02, (d, d))
            p[f"h{i}.attn.b_out"] = np.zeros(d)
            p[f"h{i}.ln2.g"] = np.ones(d)
            p[f"h{i}.ln2.b"] = np.zeros(d)
            p[f"h{i}.mlp.w_fc"] = rng.normal(0.0, 0.02, (d, 4 * d))
            p[f"h{i}.mlp.b_fc"] = np.zeros(4 * d)
            p[f"h{i}.mlp.w_out"] = rng.normal(0.0, 0.02, (4 * d, d))
            p[f"h{i}.mlp.b_out"] = np.zeros(d)
        p["lnf.g"] = np.ones(d)
        p["lnf.b"] = np.zeros(d)
        self.params = p

    def num_params(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def _ids_array(self, tokens: TokenStream | Sequence[int]) -> np.ndarray:
        ids = np.asarray(tokens.ids if isinstance(tokens, TokenStream) else tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token stream must be a non-empty 1-D sequence")
        if ids.size > self.config.context_len:
            raise ValueError(
                f"sequence of {ids.size} tokens exceeds context_len {self.config.context_len}"
            )
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        return ids

    def forward(self, tokens: TokenStream | Sequence[int]) -> ForwardPass:
        """Full pass returning logits and all L+1 hidden-state matrices."""
        cfg = self.config
        p = self.params
        ids = self._ids_array(tokens)
        T, d, H = ids.size, cfg.hidden_dim, cfg.n_heads
        hd = d // H
        scale = 1.0 / math.sqrt(hd)

        x = p["wte"][ids] + p["wpe"][:T]
        hidden = np.empty((cfg.n_layers + 1, T, d), dtype=x.dtype)
        hidden[0] = x
        causal = np.tril(np.ones((T, T), dtype=bool))

        blocks = []
        for i in range(cfg.n_layers):
            a, ln1_cache = _layer_norm(x, p[f"h{i}.ln1.g"], p[f"h{i}.ln1.b"])
            qkv = a @ p[f"h{i}.attn.w_qkv"] + p[f"h{i}.attn.b_qkv"]
            q, k, v = (
                part.reshape(T, H, hd).transpose(1, 0, 2) for part in np.split(qkv, 3, axis=1)
            )
            att = (q @ k.transpose(0, 2, 1)) * scale
            att = np.where(causal, att, -np.inf)
            att = att - att.max(axis=-1, keepdims=True)
            expa = np.exp(att)
            probs = expa / expa.sum(axis=-1, keepdims=True)
            ctx = (probs @ v).transpose(1, 0, 2).reshape(T, d)
            o = ctx @ p[f"h{i}.attn.w_out"] + p[f"h{i}.attn.b_out"]
            x1 = x + o

            m, ln2_cache = _layer_norm(x1, p[f"h{i}.ln2.g"], p[f"h{i}.ln2.b"])
            z = m @ p[f"h{i}.mlp.w_fc"] + p[f"h{i}.mlp.b_fc"]
            f = _gelu(z)
            u = f @ p[f"h{i}.mlp.w_out"] + p[f"h{i}.mlp.b_out"]
            x = x1 + u
            hidden[i + 1] = x
            blocks.append(
                {"ln1": ln1_cache, "a": a, "q": q, "k": k, "v": v, "probs": probs,
                 "ctx": ctx, "ln2": ln2_cache, "m": m, "z": z, "f": f}
            )

        hf, lnf_cache = _layer_norm(x, p["lnf.g"], p["lnf.b"])
        logits = hf @ p["wte"].T
        cache = {"ids": ids, "blocks": blocks, "lnf": lnf_cache, "hf": hf, "scale": scale}
        return ForwardPass(logits, hidden, cache)

    def backward(self, fwd: ForwardPass, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss wrt every parameter, given dloss/dlogits."""
        cfg = self.config
        p = self.params
        cache = fwd.cache
        ids = cache["ids"]
        T, d, H = ids.size, cfg.hidden_dim, cfg.n_heads
        hd = d // H
        scale = cache["scale"]

        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        grads["wte"] += dlogits.T @ cache["hf"]
        dhf = dlogits @ p["wte"]
        dx, dg, db = _layer_norm_backward(dhf, cache["lnf"])
        grads["lnf.g"] += dg
        grads["lnf.b"] += db

        for i in reversed(range(cfg.n_layers)):
            blk = cache["blocks"][i]
            # MLP residual branch
            du = dx
            grads[f"h{i}.mlp.w_out"] += blk["f"].T @ du
            grads[f"h{i}.mlp.b_out"] += du.sum(axis=0)
            dz = (du @ p[f"h{i}.mlp.w_out"].T) * _gelu_grad(blk["z"])
            grads[f"h{i}.mlp.w_fc"] += blk["m"].T @ dz
            grads[f"h{i}.mlp.b_fc"] += dz.sum(axis=0)
            dm = dz @ p[f"h{i}.mlp.w_fc"].T
            dx1, dg, db = _layer_norm_backward(dm, blk["ln2"])
            grads[f"h{i}.ln2.g"] += dg
            grads[f"h{i}.ln2.b"] += db
            dx1 = dx1 + dx

            # attention residual branch
            do = dx1
            grads[f"h{i}.attn.w_out"] += blk["ctx"].T @ do
            grads[f"h{i}.attn.b_out"] += do.sum(axis=0)
            dctx = (do @ p[f"h{i}.attn.w_out"].T).reshape(T, H, hd).transpose(1, 0, 2)
            probs, q, k, v = blk["probs"], blk["q"], blk["k"], blk["v"]
            dprobs = dctx @ v.transpose(0, 2, 1)
            dv = probs.transpose(0, 2, 1) @ dctx
            datt = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dq = (datt @ k) * scale
            dk = (datt.transpose(0, 2, 1) @ q) * scale
            dqkv = np.concatenate(
                [part.transpose(1, 0, 2).reshape(T, d) for part in (dq, dk, dv)], axis=1
            )
            grads[f"h{i}.attn.w_qkv"] += blk["a"].T @ dqkv
            grads[f"h{i}.attn.b_qkv"] += dqkv.sum(axis=0)
            da = dqkv @ p[f"h{i}.attn.w_qkv"].T
            dx0, dg, db = _layer_norm_backward(da, blk["ln1"])
            grads[f"h{i}.ln1.g"] += dg
            grads[f"h{i}.ln1.b"] += db
            dx = dx0 + dx1

        grads["wpe"][:T] += dx
        np.add.at(grads["wte"], ids, dx)
        return grads


def _ntp_loss_raw(logits: np.ndarray, ids: np.ndarray):
    # dtype-preserving core so finite differences can run in extended precision
    T = ids.size
    rows = logits[: T - 1]
    m = rows.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=-1))
    picked = rows[np.arange(T - 1), ids[1:]]
    return (lse - picked).sum()


def ntp_loss(logits: np.ndarray, tokens: TokenStream | Sequence[int]) -> float:
    """Summed negative log-likelihood of each token given its prefix.

    Position t's logits score token t+1; nothing is predicted for the final
    position, so a stream of T tokens contributes T-1 terms (no averaging).
    """
    ids = np.asarray(tokens.ids if isinstance(tokens, TokenStream) else tokens, dtype=np.int64)
    if ids.size < 2:
        raise ValueError("need at least 2 tokens to score next-token prediction")
    return float(_ntp_loss_raw(logits, ids))


def _loss_grad_logits(logits: np.ndarray, ids: np.ndarray) -> tuple[float, np.ndarray]:
    T = ids.size
    rows = logits[: T - 1]
    m = rows.max(axis=-1, keepdims=True)
    ex = np.exp(rows - m)
    Z = ex.sum(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(Z[:, 0])
    picked = rows[np.arange(T - 1), ids[1:]]
    loss = float((lse - picked).sum())
    dlogits = np.zeros_like(logits)
    dlogits[: T - 1] = ex / Z
    dlogits[np.arange(T - 1), ids[1:]] -= 1.0
    return loss, dlogits


def loss_and_grads(model: TinyLM, tokens: TokenStream | Sequence[int]):
    """(loss, n_predicted, grads) for one token stream."""
    fwd = model.forward(tokens)
    ids = fwd.cache["ids"]
    if ids.size < 2:
        raise ValueError("need at least 2 tokens to score next-token prediction")
    loss, dlogits = _loss_grad_logits(fwd.logits, ids)
    return loss, ids.size - 1, model.backward(fwd, dlogits)


def fd_gradient(
    model: TinyLM,
    tokens: TokenStream | Sequence[int],
    name: str,
    fd_step: float = 1e-4,
) -> np.ndarray:
    """Plain central-difference gradient for one named parameter array."""
    ids = model._ids_array(tokens)
    arr = model.params[name]
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + fd_step
        lp = _ntp_loss_raw(model.forward(tokens).logits, ids)
        flat[j] = orig - fd_step
        lm = _ntp_loss_raw(model.forward(tokens).logits, ids)
        flat[j] = orig
        out[j] = (lp - lm) / (2.0 * fd_step)
    return out.reshape(arr.shape)


def grad_check(
    model: TinyLM, tokens: TokenStream | Sequence[int], fd_step: float = 1e-4
) -> float:
    """Max deviation of analytic gradients from central finite differences.

    The differences run in extended precision with one Richardson refinement
    (steps h and h/2), so the comparison is not polluted by the h^2 truncation
    of the plain stencil. Per-element error is relative, except where both
    gradients are below 1e-8 in magnitude, where it is absolute.
    """
    loss0, _, grads = loss_and_grads(model, tokens)
    del loss0
    ids = model._ids_array(tokens)
    originals = model.params
    work = {k: v.astype(np.longdouble) for k, v in originals.items()}
    h_full = np.longdouble(fd_step)
    h_half = h_full / 2
    worst = 0.0
    try:
        model.params = work
        for name in param_order(model.config):
            flat = work[name].reshape(-1)
            ana_flat = grads[name].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                diffs = []
                for h in (h_full, h_half):
                    flat[j] = orig + h
                    lp = _ntp_loss_raw(model.forward(tokens).logits, ids)
                    flat[j] = orig - h
                    lm = _ntp_loss_raw(model.forward(tokens).logits, ids)
                    diffs.append((lp - lm) / (2 * h))
                flat[j] = orig
                fd = float((4 * diffs[1] - diffs[0]) / 3)
                a = ana_flat[j]
                denom = max(abs(a), abs(fd))
                err = abs(a - fd) if denom < 1e-8 else abs(a - fd) / denom
                worst = max(worst, err)
    finally:
        model.params = originals
    return worst


@dataclass
class StepRecord:
    step: int
    loss: float
    per_token_loss: float
    lr: float


@dataclass
class TrainResult:
    model: TinyLM
    history: list[StepRecord]


def _lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))


def train(model: TinyLM, documents: Iterable[str], cfg: TrainConfig) -> TrainResult:
    """AdamW fine-tuning over the document corpus; deterministic given cfg.seed.

    Documents are tokenized once, truncated to the context length, and visited
    in a freshly shuffled order each epoch. batch_size > 1 sums the per-document
    losses of consecutive documents into one optimizer step.
    """
    streams = []
    for text in documents:
        stream = tokenize(text).truncate(model.config.context_len)
        if len(stream) < 2:
            log.warning("[train] skipping empty document")
            continue
        streams.append(stream)
    if not streams:
        raise ValueError("corpus has no trainable documents")

    n = len(streams)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    history: list[StepRecord] = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss_sum = 0.0
            pred_sum = 0
            grad_sum: dict[str, np.ndarray] | None = None
            for idx in batch:
                loss, n_pred, grads = loss_and_grads(model, streams[idx])
                loss_sum += loss
                pred_sum += n_pred
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for k in grad_sum:
                        grad_sum[k] += grads[k]
            assert grad_sum is not None
            if not math.isfinite(loss_sum):
                raise TrainingDiverged(step, loss_sum)

            lr = _lr_at(step, total_steps, cfg)
            step += 1
            b1, b2 = cfg.adam_beta1, cfg.adam_beta2
            bc1 = 1.0 - b1**step
            bc2 = 1.0 - b2**step
            for k, param in model.params.items():
                g = grad_sum[k]
                m_state[k] = b1 * m_state[k] + (1.0 - b1) * g
                v_state[k] = b2 * v_state[k] + (1.0 - b2) * g * g
                update = (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + cfg.adam_epsilon)
                param -= lr * (update + cfg.weight_decay * param)
            history.append(StepRecord(step, loss_sum, loss_sum / pred_sum, lr))
    return TrainResult(model, history)


def save_history_csv(history: list[StepRecord], path: Path | str) -> None:
    lines = ["step,loss,per_token_loss,lr"]
    lines += [f"{r.step},{r.loss!r},{r.per_token_loss!r},{r.lr!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_MAGIC = b"TLM1"
_HEADER = struct.Struct("<4sHHiiiiiq")  # magic, version, pad, L, d, heads, T_max, V, seed


def _write_checkpoint(model: TinyLM, out) -> None:
    cfg = model.config
    out.write(
        _HEADER.pack(
            _MAGIC, 1, 0, cfg.n_layers, cfg.hidden_dim, cfg.n_heads,
            cfg.context_len, cfg.vocab_size, cfg.seed,
        )
    )
    for name in param_order(cfg):
        out.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def checkpoint_bytes(model: TinyLM) -> bytes:
    buf = BytesIO()
    _write_checkpoint(model, buf)
    return buf.getvalue()


def save_checkpoint(model: TinyLM, path: Path | str) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: Path | str) -> TinyLM:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, _, L, d, heads, T_max, V, seed = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = LMConfig(L, d, heads, T_max, V, seed)
    model = TinyLM(config)
    offset = _HEADER.size
    for name in param_order(config):
        shape = model.params[name].shape
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {name!r}")
        model.params[name] = (
            np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model


def generic_text_sample() -> str:
    """Small bundled plain-text sample used to build the no-fine-tuning baseline."""
    from importlib.resources import files

    return (files("es2emb") / "data" / "generic_pretrain.txt").read_text(encoding="utf-8")


def pretrain_generic(config: LMConfig, cfg: TrainConfig) -> TrainResult:
    """Train a fresh model on the bundled generic text (paragraph = document)."""
    paragraphs = [p.strip() for p in generic_text_sample().split("\n\n") if p.strip()]
    return train(TinyLM(config), paragraphs, cfg)
