"""The dual-anchoring agent: causal encoder plus action, progress and world-model heads."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .grammar import Instruction, prefix_text, token_vocab, tokenize
from .worldsim import MAX_RANGE, InputError, NavAction, Observation

TIME_SCALE = 0.01


@dataclass(frozen=True)
class PolicyConfig:
    d_llm: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_attn: int = 32
    d_sam: int = 16
    H: int = 8
    W: int = 8
    history: int = 8
    max_instr_len: int = 64
    num_rays: int = 24
    num_categories: int = 16
    k_max: int = 8
    mlp_ratio: int = 2
    max_range: float = MAX_RANGE

    @property
    def obs_dim(self) -> int:
        return self.num_rays * (1 + self.num_categories) + 1

    @property
    def max_len(self) -> int:
        return self.max_instr_len + self.history

    def to_dict(self) -> dict:
        return asdict(self)


def obs_features(obs: Observation, t: int, cfg: PolicyConfig) -> np.ndarray:
    """depth / R_max per ray, one-hot category per ray, and a scaled time index."""
    n, c = cfg.num_rays, cfg.num_categories
    out = np.zeros(cfg.obs_dim, dtype=np.float32)
    out[:n] = np.asarray(obs.depth, dtype=np.float64) / cfg.max_range
    cats = np.asarray(obs.category)
    hit = np.nonzero(cats >= 0)[0]
    out[n + hit * c + cats[hit]] = 1.0
    out[-1] = t * TIME_SCALE
    return out


class HistoryContext:
    """Instruction tokens plus a ring buffer of the most recent observation features."""

    def __init__(self, instruction: Instruction | str, cfg: PolicyConfig):
        text = instruction.text if isinstance(instruction, Instruction) else instruction
        self.instruction = instruction
        self.tokens = tokenize(text)
        self.cfg = cfg
        self.slots: deque = deque(maxlen=cfg.history)

    def push(self, t: int, obs: Observation | np.ndarray) -> None:
        if self.slots and t <= self.slots[-1][0]:
            raise InputError(f"time index {t} does not follow {self.slots[-1][0]}")
        feat = obs if isinstance(obs, np.ndarray) else obs_features(obs, t, self.cfg)
        self.slots.append((t, feat))

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self.slots]

    def __len__(self) -> int:
        return len(self.slots)


@dataclass
class EncoderBatch:
    """Left-padded token layout: [pad ...][instruction tokens][observation slots]."""

    tokens: np.ndarray
    instr_pos: np.ndarray
    is_instr: np.ndarray
    is_obs: np.ndarray
    slot: np.ndarray
    obs_feat: np.ndarray
    valid: np.ndarray
    K: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.tokens.shape


def make_batch(token_lists, obs_lists, cfg: PolicyConfig, K=None) -> EncoderBatch:
    B = len(token_lists)
    for toks, obs in zip(token_lists, obs_lists):
        if len(toks) > cfg.max_instr_len or len(obs) > cfg.history:
            raise InputError(f"sequence of {len(toks)} tokens + {len(obs)} frames exceeds "
                             f"{cfg.max_instr_len} + {cfg.history}")
        if len(obs) == 0:
            raise InputError("history is empty")
    N = max(len(t) + len(o) for t, o in zip(token_lists, obs_lists))
    tokens = np.zeros((B, N), np.int64)
    instr_pos = np.zeros((B, N), np.int64)
    is_instr = np.zeros((B, N), bool)
    is_obs = np.zeros((B, N), bool)
    slot = np.zeros((B, N), np.int64)
    obs_feat = np.zeros((B, N, cfg.obs_dim), np.float32)
    valid = np.zeros((B, N), bool)
    for b, (toks, obs) in enumerate(zip(token_lists, obs_lists)):
        L, h = len(toks), len(obs)
        start = N - L - h
        tokens[b, start:start + L] = toks
        instr_pos[b, start:start + L] = np.arange(L)
        is_instr[b, start:start + L] = True
        is_obs[b, start + L:] = True
        # slot 0 is the current frame
        slot[b, start + L:] = np.arange(h)[::-1]
        obs_feat[b, start + L:] = np.asarray(obs, dtype=np.float32)
        valid[b, start:] = True
    K = None if K is None else np.asarray(K, dtype=np.int64)
    return EncoderBatch(tokens, instr_pos, is_instr, is_obs, slot, obs_feat, valid, K)


def init_params(cfg: PolicyConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, da = cfg.d_llm, cfg.d_attn
    dt = dc.default_dtype()

    def normal(shape, std=0.02):
        return dc.parameter(rng.normal(0.0, std, shape).astype(dt))

    def const(shape, v):
        return dc.parameter(np.full(shape, v, dtype=dt))

    p = {
        "tok_emb": normal((len(token_vocab()), d)),
        "pos_emb": normal((cfg.max_instr_len, d)),
        "slot_emb": normal((cfg.history, d)),
        "obs_W": normal((cfg.obs_dim, d), 1.0 / math.sqrt(cfg.obs_dim)),
        "obs_b": const((d,), 0.0),
    }
    hidden = cfg.mlp_ratio * d
    for l in range(cfg.n_layers):
        p[f"l{l}.ln1_g"] = const((d,), 1.0)
        p[f"l{l}.ln1_b"] = const((d,), 0.0)
        for w in ("Wq", "Wk", "Wv"):
            p[f"l{l}.{w}"] = normal((d, d), 1.0 / math.sqrt(d))
        p[f"l{l}.Wo"] = normal((d, d), 0.5 / math.sqrt(d))
        p[f"l{l}.ln2_g"] = const((d,), 1.0)
        p[f"l{l}.ln2_b"] = const((d,), 0.0)
        p[f"l{l}.W1"] = normal((d, hidden), 1.0 / math.sqrt(d))
        p[f"l{l}.b1"] = const((hidden,), 0.0)
        p[f"l{l}.W2"] = normal((hidden, d), 0.5 / math.sqrt(hidden))
        p[f"l{l}.b2"] = const((d,), 0.0)
    p["lnf_g"] = const((d,), 1.0)
    p["lnf_b"] = const((d,), 0.0)
    p["W_a"] = normal((d, 4), 0.02)
    p["W_p"] = normal((d, cfg.k_max + 1), 0.02)
    p["W_in"] = normal((d, da), 1.0 / math.sqrt(d))
    p["wm_ln_g"] = const((da,), 1.0)
    p["wm_ln_b"] = const((da,), 0.0)
    p["Q_spa"] = normal((cfg.H * cfg.W, da), 1.0 / math.sqrt(da))
    p["W_out"] = normal((da, cfg.d_sam), 0.1 / math.sqrt(da))
    for k, v in p.items():
        v.name = k
    return p


def params_from_arrays(arrays: dict, dtype=None) -> dict[str, Tensor]:
    dtype = dtype or dc.default_dtype()
    return {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def _attention_mask(valid: np.ndarray, causal: bool = True) -> np.ndarray:
    B, N = valid.shape
    allowed = valid[:, None, :].repeat(N, axis=1)
    if causal:
        allowed &= np.tril(np.ones((N, N), bool))[None]
    allowed |= np.eye(N, dtype=bool)[None]
    return np.where(allowed, 0.0, dc.NEG_INF)[:, None, :, :]


def encode(batch: EncoderBatch, params: dict, cfg: PolicyConfig) -> Tensor:
    """Causal transformer over [instruction tokens | observation slots] -> (B, N, d_llm)."""
    B, N = batch.shape
    d, h = cfg.d_llm, cfg.n_heads
    dk = d // h
    dt = params["tok_emb"].data.dtype
    instr_m = batch.is_instr[..., None].astype(dt)
    obs_m = batch.is_obs[..., None].astype(dt)
    x = dc.mul(dc.add(dc.embedding(params["tok_emb"], batch.tokens),
                      dc.embedding(params["pos_emb"], batch.instr_pos)), instr_m)
    obs_emb = dc.add(dc.add(dc.matmul(batch.obs_feat.astype(dt), params["obs_W"]), params["obs_b"]),
                     dc.embedding(params["slot_emb"], batch.slot))
    x = dc.add(x, dc.mul(obs_emb, obs_m))
    mask = _attention_mask(batch.valid).astype(dt)
    scale = 1.0 / math.sqrt(dk)
    for l in range(cfg.n_layers):
        pre = f"l{l}."
        hn = dc.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])

        def heads(w):
            return dc.transpose(dc.reshape(dc.matmul(hn, params[pre + w]), (B, N, h, dk)), (0, 2, 1, 3))
        q, k, v = heads("Wq"), heads("Wk"), heads("Wv")
        att = dc.softmax(dc.mul(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), scale), mask)
        ctx = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (B, N, d))
        x = dc.add(x, dc.matmul(ctx, params[pre + "Wo"]))
        hn = dc.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        ff = dc.gelu(dc.add(dc.matmul(hn, params[pre + "W1"]), params[pre + "b1"]))
        x = dc.add(x, dc.add(dc.matmul(ff, params[pre + "W2"]), params[pre + "b2"]))
    return dc.layer_norm(x, params["lnf_g"], params["lnf_b"])


def last_row(X: Tensor) -> Tensor:
    return dc.index(X, (slice(None), -1, slice(None)))


def action_logits(X: Tensor, params: dict) -> Tensor:
    return dc.matmul(last_row(X), params["W_a"])


def progress_mask(K, k_max: int, dtype=np.float32) -> np.ndarray:
    K = np.atleast_1d(np.asarray(K))
    idx = np.arange(k_max + 1)[None, :]
    return np.where(idx <= K[:, None], 0.0, dc.NEG_INF).astype(dtype)


def progress_logits(X: Tensor, params: dict) -> Tensor:
    """Unmasked boundary logits; apply progress_mask before decoding or scoring."""
    return dc.matmul(last_row(X), params["W_p"])


def wm_predict(X: Tensor, params: dict, cfg: PolicyConfig, valid: np.ndarray | None = None) -> Tensor:
    """Spatial-query cross-attention decoder -> (B, d_sam, H, W) feature maps.

    Queries attend to the normalized projection of X directly; there are no
    separate key or value projections.
    """
    B, N, _ = X.shape
    xh = dc.layer_norm(dc.matmul(X, params["W_in"]), params["wm_ln_g"], params["wm_ln_b"])
    scores = dc.mul(dc.matmul(params["Q_spa"], dc.transpose(xh, (0, 2, 1))), 1.0 / math.sqrt(cfg.d_attn))
    mask = None
    if valid is not None:
        mask = np.where(valid, 0.0, dc.NEG_INF).astype(X.data.dtype)[:, None, :]
    A = dc.softmax(scores, mask)
    Z = dc.matmul(A, xh)
    F = dc.matmul(Z, params["W_out"])
    return dc.reshape(dc.transpose(F, (0, 2, 1)), (B, cfg.d_sam, cfg.H, cfg.W))


def wm_attention(X: Tensor, params: dict, cfg: PolicyConfig, valid=None) -> np.ndarray:
    """The cross-attention weights used by wm_predict, for inspection."""
    xh = dc.layer_norm(dc.matmul(X, params["W_in"]), params["wm_ln_g"], params["wm_ln_b"])
    s = (params["Q_spa"].data @ np.swapaxes(xh.data, 1, 2)) / math.sqrt(cfg.d_attn)
    if valid is not None:
        s = s + np.where(valid, 0.0, dc.NEG_INF)[:, None, :]
    return dc.softmax(s).data


def wm_loss(F_t, target, weights=None) -> Tensor:
    return dc.mse(F_t, target, weights)


def retro_probe(F_t: np.ndarray, history_maps) -> tuple[np.ndarray, int]:
    """Cosine similarity of F_t with each history map (0 when a norm is 0) and its argmax."""
    f = np.asarray(F_t, dtype=np.float64).ravel()
    fn = np.linalg.norm(f)
    sims = []
    for m in history_maps:
        g = np.asarray(m, dtype=np.float64).ravel()
        if g.shape != f.shape:
            raise InputError("history map dims differ from the prediction")
        gn = np.linalg.norm(g)
        sims.append(0.0 if fn == 0 or gn == 0 else float(np.clip(f @ g / (fn * gn), -1.0, 1.0)))
    sims = np.array(sims)
    return sims, int(np.argmax(sims)) if len(sims) else -1


@dataclass
class PolicyOutput:
    X: np.ndarray
    action_logits: np.ndarray
    progress_logits: np.ndarray
    predicted_feature: np.ndarray


class Policy:
    """Parameters plus config; the convenience surface used by rollouts and the server."""

    def __init__(self, cfg: PolicyConfig, params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def forward(self, batch: EncoderBatch, with_wm: bool = True):
        X = encode(batch, self.params, self.cfg)
        a = action_logits(X, self.params)
        p = progress_logits(X, self.params)
        F = wm_predict(X, self.params, self.cfg, batch.valid) if with_wm else None
        return X, a, p, F

    def run(self, history: HistoryContext) -> PolicyOutput:
        instr = history.instruction
        K = instr.K if isinstance(instr, Instruction) else self.cfg.k_max
        batch = make_batch([history.tokens], [[f for _, f in history.slots]], self.cfg, [K])
        X, a, p, F = self.forward(batch)
        pl = p.data + progress_mask([K], self.cfg.k_max, p.data.dtype)
        return PolicyOutput(X.data[0], a.data[0], pl[0], F.data[0])

    def act_batch(self, histories) -> tuple[np.ndarray, np.ndarray]:
        """Greedy actions and boundary indices for several histories at once."""
        Ks = [h.instruction.K for h in histories]
        batch = make_batch([h.tokens for h in histories], [[f for _, f in h.slots] for h in histories],
                           self.cfg, Ks)
        X = encode(batch, self.params, self.cfg)
        a = action_logits(X, self.params).data
        p = progress_logits(X, self.params).data + progress_mask(Ks, self.cfg.k_max, X.data.dtype)
        return a.argmax(axis=1), p.argmax(axis=1)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def act(logits) -> NavAction:
    return NavAction(int(np.argmax(logits)))


def emit_progress(logits, instr: Instruction, k_max: int) -> tuple[int, str]:
    masked = np.asarray(logits, dtype=np.float64) + progress_mask([instr.K], k_max, np.float64)[0]
    k = int(np.argmax(masked))
    return k, prefix_text(instr, k)
