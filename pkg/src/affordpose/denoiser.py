"""Conditional x0-denoiser: residual MLP with FiLM modulation from
[time embedding | condition], trained with hand-written reverse-mode
gradients and Adam.

Row-vector convention throughout: ``h = x @ W + b``.
"""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .affordance import COND_DIM, ELEMENTS, VocabularyTable, encode_indices, init_embedding_tables
from .diffusion import POSE_DIM, make_schedule

log = logging.getLogger(__name__)

MAGIC = b"AFPW"
FORMAT_VERSION = 1
MIN_DATA_STD = 1e-2


class TrainingDivergedError(RuntimeError):
    def __init__(self, step):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 128
    blocks: int = 3
    time_dim: int = 32
    cond_dim: int = COND_DIM
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    steps: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    p_uncond: float = 0.1
    seed: int = 0
    lr_schedule: str = "cosine"   # or "constant"

    def __post_init__(self):
        if not (self.lr > 0 and self.eps > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("learning rate, eps and Adam betas out of range")
        if not 0 <= self.p_uncond < 1:
            raise ValueError("p_uncond must be in [0, 1)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


@dataclass(eq=False)
class DenoiserWeights:
    config: NetConfig
    vocab: VocabularyTable
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        sched = make_schedule(self.config.T, self.config.beta_start, self.config.beta_end)
        self._alpha_bar = sched.alpha_bar

    @property
    def tables(self):
        return {el: self.params[f"emb.{el}"] for el in ELEMENTS}

    def names(self):
        return list(self.params)

    def trainable(self):
        return [k for k in self.params if not k.startswith("pre.")]

    def copy(self):
        return DenoiserWeights(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    def as_float32_values(self):
        """Copy with every parameter rounded to the nearest float32."""
        return DenoiserWeights(self.config, self.vocab,
                               {k: v.astype(np.float32).astype(np.float64) for k, v in self.params.items()})

    def encode(self, indices):
        return encode_indices(indices, self.tables)

    @property
    def null_cond(self):
        return self.params["null_cond"]


def init_weights(vocab, config=NetConfig(), seed=0, data_mean=None, data_std=None):
    """Fan-in scaled init; output layer, FiLM condition rows and null token start at zero.

    ``data_mean`` / ``data_std`` (per pose entry) are frozen preconditioning
    statistics; with a zero output layer the network starts as the exact
    posterior mean of a diagonal Gaussian with those moments.
    """
    rng = np.random.default_rng(seed)
    H, E, C = config.hidden, config.time_dim, config.cond_dim
    p = {}
    p["pre.mean"] = np.zeros(POSE_DIM) if data_mean is None else np.asarray(data_mean, dtype=np.float64)
    p["pre.std"] = np.ones(POSE_DIM) if data_std is None else np.asarray(data_std, dtype=np.float64)
    if p["pre.mean"].shape != (POSE_DIM,) or p["pre.std"].shape != (POSE_DIM,) or np.any(p["pre.std"] <= 0):
        raise ValueError(f"data_mean/data_std must be ({POSE_DIM},) with positive std")
    p["in.W"] = rng.standard_normal((POSE_DIM, H)) * np.sqrt(2.0 / POSE_DIM)
    p["in.b"] = np.zeros(H)
    for i in range(config.blocks):
        p[f"b{i}.W1"] = rng.standard_normal((H, H)) * np.sqrt(2.0 / H)
        p[f"b{i}.b1"] = np.zeros(H)
        p[f"b{i}.W2"] = rng.standard_normal((H, H)) * np.sqrt(1.0 / H)
        p[f"b{i}.b2"] = np.zeros(H)
        Wf = np.zeros((E + C, 2 * H))
        Wf[:E] = rng.standard_normal((E, 2 * H)) * (0.1 / np.sqrt(E))
        p[f"b{i}.Wf"] = Wf
        p[f"b{i}.bf"] = np.zeros(2 * H)
    p["out.W"] = np.zeros((H, POSE_DIM))
    p["out.b"] = np.zeros(POSE_DIM)
    for el, table in init_embedding_tables(vocab, rng).items():
        p[f"emb.{el}"] = table
    p["null_cond"] = np.zeros(C)
    w = DenoiserWeights(config, vocab, p)
    return w.as_float32_values()


def time_embedding(t, dim):
    """Sinusoidal features; frequencies geometric from 1 to 1e4."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    scales = 1e4 ** (np.arange(half) / max(half - 1, 1))
    arg = t[:, None] / scales[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * s, s


def _forward(w, x, t, cond, keep=False):
    p, cfg = w.params, w.config
    H = cfg.hidden
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    z = np.concatenate([time_embedding(t, cfg.time_dim), cond], axis=1)
    ab = w._alpha_bar[t - 1][:, None]
    mu, sd = p["pre.mean"], p["pre.std"]
    var = ab * sd**2 + (1.0 - ab)
    centred = x - np.sqrt(ab) * mu
    c_skip = np.sqrt(ab) * sd**2 / var
    c_out = sd * np.sqrt((1.0 - ab) / var)
    u = centred / np.sqrt(var)
    h = u @ p["in.W"] + p["in.b"]
    cache = []
    for i in range(cfg.blocks):
        f = z @ p[f"b{i}.Wf"] + p[f"b{i}.bf"]
        gamma, beta = f[:, :H], f[:, H:]
        a1 = h @ p[f"b{i}.W1"] + p[f"b{i}.b1"]
        m = a1 * (1.0 + gamma) + beta
        s, sig = _silu(m)
        h_next = h + s @ p[f"b{i}.W2"] + p[f"b{i}.b2"]
        if keep:
            cache.append((h, a1, gamma, m, s, sig))
        h = h_next
    out = mu + c_skip * centred + c_out * (h @ p["out.W"] + p["out.b"])
    return out, (z, u, c_out, h, cache)


def _check_dims(w, x, cond):
    if x.shape[-1] != POSE_DIM:
        raise ValueError(f"pose vector must have {POSE_DIM} entries, got {x.shape[-1]}")
    if cond.shape[-1] != w.config.cond_dim:
        raise ValueError(f"condition must have {w.config.cond_dim} entries, got {cond.shape[-1]}")


def denoise(w, x_t, t, cond):
    """x0 estimate for one pose vector (45,) or a batch (N, 45)."""
    x = np.asarray(x_t, dtype=np.float64)
    c = np.asarray(cond, dtype=np.float64)
    _check_dims(w, x, c)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    c2 = np.broadcast_to(np.atleast_2d(c), (x2.shape[0], c.shape[-1]))
    tt = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (x2.shape[0],))
    if np.any(tt < 1) or np.any(tt > w.config.T):
        raise ValueError(f"diffusion step outside [1, {w.config.T}]")
    out, _ = _forward(w, x2, tt, c2)
    return out[0] if single else out


def draw_training_noise(rng, n, T, p_uncond):
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n, POSE_DIM))
    drop = rng.random(n) < p_uncond
    return t, eps, drop


def loss_and_grad(w, x0, cond_idx, sched, seed=0, p_uncond=0.0, draws=None):
    """Mean over the batch of ||denoise(q_sample(x0, t, eps), t, c) - x0||^2.

    ``cond_idx`` holds (N, 6) vocabulary indices; items drawn for condition
    dropout use the learned null token.  Returns (loss, grads) where grads
    mirrors ``w.params``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    cond_idx = np.atleast_2d(np.asarray(cond_idx, dtype=np.int64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if draws is None:
        draws = draw_training_noise(np.random.default_rng(seed), n, w.config.T, p_uncond)
    t, eps, drop = draws
    ab = sched.alpha_bar[t - 1][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    cond = w.encode(cond_idx)
    cond[drop] = w.null_cond

    out, (z, u, c_out, h_last, cache) = _forward(w, x_t, t, cond, keep=True)
    resid = out - x0
    loss = float(np.sum(resid**2) / n)
    if not np.isfinite(loss):
        raise TrainingDivergedError(-1)

    p, cfg = w.params, w.config
    H, E = cfg.hidden, cfg.time_dim
    g = {k: np.zeros_like(p[k]) for k in w.trainable()}
    dout = 2.0 * resid / n * c_out
    g["out.W"] = h_last.T @ dout
    g["out.b"] = dout.sum(axis=0)
    dh = dout @ p["out.W"].T
    dz = np.zeros_like(z)
    for i in reversed(range(cfg.blocks)):
        h_in, a1, gamma, m, s, sig = cache[i]
        g[f"b{i}.W2"] = s.T @ dh
        g[f"b{i}.b2"] = dh.sum(axis=0)
        ds = dh @ p[f"b{i}.W2"].T
        dm = ds * (sig * (1.0 + m * (1.0 - sig)))
        da1 = dm * (1.0 + gamma)
        df = np.concatenate([dm * a1, dm], axis=1)
        g[f"b{i}.Wf"] = z.T @ df
        g[f"b{i}.bf"] = df.sum(axis=0)
        dz += df @ p[f"b{i}.Wf"].T
        g[f"b{i}.W1"] = h_in.T @ da1
        g[f"b{i}.b1"] = da1.sum(axis=0)
        dh = dh + da1 @ p[f"b{i}.W1"].T
    g["in.W"] = u.T @ dh
    g["in.b"] = dh.sum(axis=0)

    dcond = dz[:, E:]
    g["null_cond"] = dcond[drop].sum(axis=0)
    kept = ~drop
    start = 0
    for j, el in enumerate(ELEMENTS):
        table = p[f"emb.{el}"]
        width = table.shape[1]
        np.add.at(g[f"emb.{el}"], cond_idx[kept, j], dcond[kept, start:start + width])
        start += width
    return loss, g


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for name in grads:  # fixed order keeps runs reproducible
            gr = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * gr
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * gr * gr
            params[name] -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def train(x0, cond_idx, cfg, sched, init=None, vocab=None, net=NetConfig(), log_every=500):
    """Adam loop over random minibatches.

    Returns ``(weights, losses)``; weights are rounded to float32 values so
    they survive the weights file bit-exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    cond_idx = np.asarray(cond_idx, dtype=np.int64)
    if len(x0) == 0:
        raise ValueError("training set is empty")
    if init is None:
        if vocab is None:
            raise ValueError("need either initial weights or a vocabulary")
        net = replace(net, T=sched.T, beta_start=sched.beta_start, beta_end=sched.beta_end)
        init = init_weights(vocab, net, seed=cfg.seed, data_mean=x0.mean(axis=0),
                            data_std=np.maximum(x0.std(axis=0), MIN_DATA_STD))
    w = init.copy()
    if cfg.steps == 0:
        return w, np.zeros(0)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(w.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    losses = np.empty(cfg.steps)
    bs = min(cfg.batch_size, len(x0))
    for step in range(cfg.steps):
        idx = rng.choice(len(x0), size=bs, replace=False)
        draws = draw_training_noise(rng, bs, sched.T, cfg.p_uncond)
        try:
            loss, grads = loss_and_grad(w, x0[idx], cond_idx[idx], sched, draws=draws)
        except TrainingDivergedError:
            raise TrainingDivergedError(step) from None
        losses[step] = loss
        if cfg.lr_schedule == "cosine":
            opt.lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / cfg.steps))
        opt.step(w.params, grads)
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(np.mean(losses[max(0, step - log_every + 1):step + 1])))
    return w.as_float32_values(), losses


# --------------------------------------------------------------------------
# weights file: MAGIC | u32 version | u32 header length | JSON header | f32 LE data
# --------------------------------------------------------------------------

def save_weights(w, path):
    header = {
        "config": w.config.__dict__,
        "vocab": w.vocab.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in w.params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for v in w.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_weights(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing parameter data")
    return DenoiserWeights(NetConfig(**header["config"]), VocabularyTable.from_dict(header["vocab"]), params)
