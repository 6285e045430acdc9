"""Toy pixel-space conditional DDPM standing in for a text-to-image model.

The noise predictor is three 3x3 conv layers (tanh hidden activations).  A
sinusoidal timestep embedding and a learned per-token embedding are summed
into a conditioning vector that enters each hidden layer as a per-channel
bias.  Images enter as [N, H, W, C] arrays in [0, 1].
"""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)

CLASS_TOKEN = "person"
INSTANCE_TOKEN = "sks"
CKPT_MAGIC = b"HFCK"


class TrainingError(RuntimeError):
    pass


# ---- schedule ------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule; arrays are indexed by ``t - 1`` for t = 1..T."""

    steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False, compare=False)
    alphas: np.ndarray = field(repr=False, compare=False)
    alpha_bars: np.ndarray = field(repr=False, compare=False)

    def alpha_bar(self, t) -> np.ndarray:
        return self.alpha_bars[np.asarray(t) - 1]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if steps < 2:
        raise ValueError(f"diffusion needs at least 2 steps, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps)
    alphas = 1.0 - betas
    return DiffusionSchedule(steps, float(beta_start), float(beta_end), betas, alphas, np.cumprod(alphas))


def forward_diffuse(x0, t, eps, sched: DiffusionSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one step per leading-axis item.  Works on arrays
    and, for gradient flow, on Tensors.
    """
    x0_shape = x0.shape
    if np.shape(eps) != x0_shape:
        raise ValueError(f"noise shape {np.shape(eps)} does not match image shape {x0_shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.steps):
        raise ValueError(f"timestep outside 1..{sched.steps}")
    ab = sched.alpha_bar(t)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (len(x0_shape) - 1))
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if isinstance(x0, Tensor):
        return tc.add(tc.mul(x0, np.sqrt(ab)), np.sqrt(1.0 - ab) * eps_arr)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps_arr


# ---- model ---------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    hidden: int = 16
    embed_dim: int = 16
    vocab: tuple[str, ...] = (CLASS_TOKEN, INSTANCE_TOKEN)
    coord_channels: bool = True
    # terminal-state mean: with a short schedule abar_T is far from 0
    prior_mean: float = 0.5
    init_seed: int = 0

    @property
    def in_channels(self) -> int:
        return self.channels + (2 if self.coord_channels else 0)

    def token_id(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise KeyError(f"unknown conditioning token {token!r}; vocabulary is {list(self.vocab)}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab"] = list(self.vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab"] = tuple(d["vocab"])
        return cls(**d)


PARAM_ORDER = (
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b",
    "time.w", "time.b", "token.emb", "cond2.w",
)


@dataclass
class SurrogateModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    role: str = "pretrained"
    step: int = 0

    def copy(self, role: str | None = None) -> "SurrogateModel":
        return SurrogateModel(
            self.config, {k: v.copy() for k, v in self.params.items()}, role or self.role, self.step
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def init_model(config: ModelConfig = ModelConfig(), role: str = "pretrained") -> SurrogateModel:
    rng = np.random.default_rng(config.init_seed)
    c, h, e = config.channels, config.hidden, config.embed_dim

    def he(shape, fan_in, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)

    params = {
        "conv1.w": he((h, config.in_channels, 3, 3), 9 * config.in_channels),
        "conv1.b": np.zeros(h),
        "conv2.w": he((h, h, 3, 3), 9 * h),
        "conv2.b": np.zeros(h),
        # near-zero head: an untrained model predicts ~0 noise
        "conv3.w": he((c, h, 3, 3), 9 * h, gain=1e-3),
        "conv3.b": np.zeros(c),
        "time.w": he((e, h), e),
        "time.b": np.zeros(h),
        "token.emb": rng.normal(0.0, 0.1, size=(len(config.vocab), h)),
        "cond2.w": he((h, h), h),
    }
    return SurrogateModel(config, params, role)


def time_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _onehot(ids, n) -> np.ndarray:
    ids = np.atleast_1d(ids)
    out = np.zeros((ids.size, n))
    out[np.arange(ids.size), ids] = 1.0
    return out


def coord_grid(n: int, h: int, w: int) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, h)
    xs = np.linspace(-1.0, 1.0, w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.broadcast_to(np.stack([xx, yy])[None], (n, 2, h, w))


def predict_noise(p: dict[str, Tensor], config: ModelConfig, x_t: Tensor, t, token_ids) -> Tensor:
    """eps_theta(x_t, t, c) on a [N, C, H, W] batch."""
    inp = x_t
    if config.coord_channels:
        n, _, h, w = x_t.shape
        inp = tc.concat([x_t, coord_grid(n, h, w)], axis=1)
    h1 = tc.conv2d(inp, p["conv1.w"])
    temb = time_embedding(t, config.embed_dim)
    cond = tc.add(tc.matmul(temb, p["time.w"]), p["time.b"])
    cond = tc.add(cond, tc.matmul(_onehot(token_ids, len(config.vocab)), p["token.emb"]))
    h1 = tc.tanh(tc.add_channel_bias(tc.add_channel_bias(h1, p["conv1.b"]), cond))
    h2 = tc.conv2d(h1, p["conv2.w"])
    h2 = tc.add_channel_bias(tc.add_channel_bias(h2, p["conv2.b"]), tc.matmul(cond, p["cond2.w"]))
    h2 = tc.tanh(h2)
    return tc.add_channel_bias(tc.conv2d(h2, p["conv3.w"]), p["conv3.b"])


def _nchw(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected [N, H, W, C] images, got shape {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def draw_noise(rng: np.random.Generator, sched: DiffusionSchedule, shape) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-sample timesteps, then unit Gaussian noise, in that order."""
    t = rng.integers(1, sched.steps + 1, size=shape[0])
    eps = rng.standard_normal(shape)
    return t, eps


def _cond_loss_tensor(p, config, sched, x0: Tensor, token: str, t, eps) -> Tensor:
    ids = np.full(x0.shape[0], config.token_id(token))
    x_t = forward_diffuse(x0, t, eps, sched)
    diff = tc.sub(eps, predict_noise(p, config, x_t, t, ids))
    return tc.mean_all(tc.square(diff))


@dataclass
class LossResult:
    loss: float
    param_grads: dict[str, np.ndarray] | None = None
    input_grad: np.ndarray | None = None  # [N, H, W, C], same layout as the input images


def _as_tensors(model: SurrogateModel) -> dict[str, Tensor]:
    return {k: Tensor(v, name=k) for k, v in model.params.items()}


def _check_token(model: SurrogateModel, token: str) -> None:
    model.config.token_id(token)


def loss_cond(model: SurrogateModel, sched: DiffusionSchedule, x0, token: str, rng: np.random.Generator,
              *, grad_params: bool = False, grad_input: bool = False) -> LossResult:
    """Single-draw estimate of ||eps - eps_theta(x_t, t, c)||^2 / (N*H*W*C).

    The timestep(s) and noise come from ``rng``; a batch of images gets
    one independent (t, eps) draw per image.
    """
    _check_token(model, token)
    x = _nchw(x0)
    t, eps = draw_noise(rng, sched, x.shape)
    return _loss_with_draw(model, sched, x, token, t, eps, grad_params, grad_input)


def _loss_with_draw(model, sched, x, token, t, eps, grad_params, grad_input) -> LossResult:
    p = _as_tensors(model)
    x_t = Tensor(x)
    if not (grad_params or grad_input):
        return LossResult(_cond_loss_tensor(p, model.config, sched, x_t, token, t, eps).item())
    with GradTape() as tape:
        tape.watch(x_t, *p.values())
        loss = _cond_loss_tensor(p, model.config, sched, x_t, token, t, eps)
    grads = tape.backward(loss)
    return LossResult(
        loss.item(),
        {k: grads[v] for k, v in p.items()} if grad_params else None,
        _nhwc(grads[x_t]) if grad_input else None,
    )


def input_grad(model: SurrogateModel, sched: DiffusionSchedule, x_adv, token: str,
               rng: np.random.Generator) -> np.ndarray:
    """Gradient of loss_cond with respect to the input image(s)."""
    single = np.ndim(x_adv) == 3
    g = loss_cond(model, sched, x_adv, token, rng, grad_input=True).input_grad
    return g[0] if single else g


def loss_db(model: SurrogateModel, sched: DiffusionSchedule, x, prior_images, rng: np.random.Generator,
            lambda_prior: float = 1.0, *, grad_params: bool = False, grad_input: bool = False) -> LossResult:
    """Instance reconstruction loss plus weighted class-prior preservation loss.

    The prior term does not depend on ``x``, so the input gradient is the
    instance term's.
    """
    inst = loss_cond(model, sched, x, INSTANCE_TOKEN, rng, grad_params=grad_params, grad_input=grad_input)
    if lambda_prior == 0.0:
        return inst
    if prior_images is None or len(prior_images) == 0:
        log.warning("empty prior set: skipping the prior-preservation term")
        return inst
    prior_images = np.asarray(prior_images)
    n = _nchw(x).shape[0]
    idx = rng.integers(0, len(prior_images), size=n)
    prior = loss_cond(model, sched, prior_images[idx], CLASS_TOKEN, rng, grad_params=grad_params)
    total = inst.loss + lambda_prior * prior.loss
    if not grad_params:
        return LossResult(total, None, inst.input_grad)
    grads = {k: inst.param_grads[k] + lambda_prior * prior.param_grads[k] for k in inst.param_grads}
    return LossResult(total, grads, inst.input_grad)


# ---- optimisation --------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 300
    lambda_prior: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError(f"invalid training config {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError(f"invalid optimizer moments in {self}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    count: int = 0

    @classmethod
    def zeros_like(cls, model: SurrogateModel) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in model.params.items()},
                   {k: np.zeros_like(a) for k, a in model.params.items()})

    def copy(self) -> "AdamState":
        return copy.deepcopy(self)


def adam_update(model: SurrogateModel, grads: dict[str, np.ndarray], state: AdamState,
                cfg: TrainConfig) -> tuple[SurrogateModel, AdamState]:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r} at step {model.step}")
    count = state.count + 1
    m, v, params = {}, {}, {}
    for k, w in model.params.items():
        g = grads[k]
        m[k] = cfg.beta1 * state.m[k] + (1 - cfg.beta1) * g
        v[k] = cfg.beta2 * state.v[k] + (1 - cfg.beta2) * g * g
        mhat = m[k] / (1 - cfg.beta1 ** count)
        vhat = v[k] / (1 - cfg.beta2 ** count)
        params[k] = w - cfg.lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    new = SurrogateModel(model.config, params, model.role, model.step + 1)
    return new, AdamState(m, v, count)


def finetune_step(model: SurrogateModel, state: AdamState, batch, prior_images, cfg: TrainConfig,
                  sched: DiffusionSchedule, rng: np.random.Generator) -> tuple[SurrogateModel, AdamState, float]:
    """One Adam step on loss_db averaged over ``batch``."""
    if len(batch) == 0:
        raise ValueError("finetune_step needs a nonempty batch")
    res = loss_db(model, sched, batch, prior_images, rng, cfg.lambda_prior, grad_params=True)
    new, new_state = adam_update(model, res.param_grads, state, cfg)
    return new, new_state, res.loss


def train_base(images, cfg: TrainConfig, sched: DiffusionSchedule,
               model_config: ModelConfig = ModelConfig()) -> tuple[SurrogateModel, list[float]]:
    """Train the class-conditional base model on ``images`` [M, H, W, C]."""
    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    model = init_model(model_config, role="pretrained")
    state = AdamState.zeros_like(model)
    history = []
    for _ in range(cfg.steps):
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        res = loss_cond(model, sched, images[idx], CLASS_TOKEN, rng, grad_params=True)
        model, state = adam_update(model, res.param_grads, state, cfg)
        history.append(res.loss)
    return model, history


def personalize(base: SurrogateModel, images, prior_images, cfg: TrainConfig,
                sched: DiffusionSchedule) -> tuple[SurrogateModel, list[float]]:
    """DreamBooth-style fine-tune of ``base`` on ``images`` with the instance token."""
    rng = np.random.default_rng(cfg.seed)
    model = base.copy(role="personalized")
    model.step = 0
    state = AdamState.zeros_like(model)
    images = np.asarray(images, dtype=np.float64)
    history = []
    for _ in range(cfg.steps):
        model, state, loss = finetune_step(model, state, images, prior_images, cfg, sched, rng)
        history.append(loss)
    return model, history


def _reverse(model: SurrogateModel, sched: DiffusionSchedule, x: np.ndarray, t_start: int, token: str,
             rng: np.random.Generator) -> np.ndarray:
    """Ancestral DDPM steps t_start..1 on an [N, C, H, W] batch."""
    p = _as_tensors(model)
    ids = np.full(x.shape[0], model.config.token_id(token))
    for t in range(t_start, 0, -1):
        eps_hat = predict_noise(p, model.config, Tensor(x), np.full(x.shape[0], t), ids).data
        beta, alpha, ab = sched.betas[t - 1], sched.alphas[t - 1], sched.alpha_bars[t - 1]
        x = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            # posterior variance beta~_t; beta_t leaves visibly more grain at this scale
            var = beta * (1.0 - sched.alpha_bars[t - 2]) / (1.0 - ab)
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
    return x


def sample(model: SurrogateModel, sched: DiffusionSchedule, token: str, seed: int, n: int = 1,
           size: int = 32) -> np.ndarray:
    """Draw ``n`` images [n, H, W, C] by ancestral sampling.

    The chain starts from the terminal marginal N(sqrt(abar_T) * prior_mean,
    1 - abar_T) rather than N(0, 1): the default schedule leaves abar_T ~ 0.36.
    """
    _check_token(model, token)
    rng = np.random.default_rng(seed)
    shape = (n, model.config.channels, size, size)
    ab_T = sched.alpha_bars[-1]
    x = np.sqrt(ab_T) * model.config.prior_mean + np.sqrt(1.0 - ab_T) * rng.standard_normal(shape)
    x = _reverse(model, sched, x, sched.steps, token, rng)
    return np.clip(_nhwc(x), 0.0, 1.0)


def diffuse_and_denoise(model: SurrogateModel, sched: DiffusionSchedule, images, t_star: int, seed: int,
                        token: str = CLASS_TOKEN) -> np.ndarray:
    """Noise ``images`` to step t_star, then run the reverse chain back to 0."""
    if not 1 <= t_star <= sched.steps:
        raise ValueError(f"t* must lie in 1..{sched.steps}, got {t_star}")
    rng = np.random.default_rng(seed)
    x0 = _nchw(images)
    x = forward_diffuse(x0, t_star, rng.standard_normal(x0.shape), sched)
    x = _reverse(model, sched, x, t_star, token, rng)
    return np.clip(_nhwc(x), 0.0, 1.0)


# ---- checkpoints ---------------------------------------------------------

def checkpoint_bytes(model: SurrogateModel, sched: DiffusionSchedule | None = None,
                     extra: dict | None = None) -> bytes:
    """HFCK container: magic, u32 header length, JSON header, then one HFT1 tensor per parameter."""
    header = {
        "config": model.config.to_dict(),
        "role": model.role,
        "step": model.step,
        "params": list(PARAM_ORDER),
        "schedule": sched.to_dict() if sched is not None else None,
        **(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = b"".join(tc.tensor_to_bytes(model.params[k]) for k in PARAM_ORDER)
    return CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body


def checkpoint_from_bytes(buf: bytes, source: str = "<bytes>") -> tuple[SurrogateModel, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{source}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen])
    pos = 8 + hlen
    params = {}
    for name in header["params"]:
        params[name], pos = tc.tensor_from_bytes(buf, pos)
    if pos != len(buf):
        raise ValueError(f"{source}: trailing bytes after checkpoint payload")
    model = SurrogateModel(ModelConfig.from_dict(header["config"]), params, header["role"], header["step"])
    return model, header


def save_checkpoint(model: SurrogateModel, path, sched: DiffusionSchedule | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, sched, extra))


def load_checkpoint(path) -> tuple[SurrogateModel, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path))
