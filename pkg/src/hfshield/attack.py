"""Alternating surrogate/perturbation learning with an edge-masked, two-level L-inf budget."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .diffusion import (
    INSTANCE_TOKEN,
    AdamState,
    DiffusionSchedule,
    SurrogateModel,
    TrainConfig,
    finetune_step,
    input_grad,
)
from .freq_mask import build_mask


@dataclass(frozen=True)
class AttackConfig:
    eta: float = 0.01
    eta_mask: float = 0.5
    eta_unit: float | None = None  # defaults to eta / 5
    ratio: float = 0.03
    steps: int = 50
    mask_mode: str = "edge"  # "edge" or "full" (m == 1 everywhere)
    signed: bool = True
    laplacian_neighbors: int = 4
    surrogate: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, batch_size=4))
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errs = []
        if not 0.0 <= self.eta <= self.eta_mask <= 1.0:
            errs.append(f"need 0 <= eta <= eta_mask <= 1 (eta={self.eta}, eta_mask={self.eta_mask})")
        unit = self.step_size
        if self.eta > 0 and not 0.0 < unit <= self.eta:
            errs.append(f"need 0 < eta_unit <= eta (eta_unit={unit}, eta={self.eta})")
        if self.steps < 1:
            errs.append(f"attack steps must be >= 1, got {self.steps}")
        if self.mask_mode not in ("edge", "full"):
            errs.append(f"mask_mode must be 'edge' or 'full', got {self.mask_mode!r}")
        if self.mask_mode == "edge" and not 0.0 < self.ratio < 1.0:
            errs.append(f"mask ratio must lie in (0, 1), got {self.ratio}")
        return errs

    @property
    def step_size(self) -> float:
        return self.eta / 5.0 if self.eta_unit is None else self.eta_unit

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_unit"] = self.step_size
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "surrogate" in d and isinstance(d["surrogate"], dict):
            d["surrogate"] = TrainConfig(**d["surrogate"])
        return cls(**d)


@dataclass
class ProtectedSet:
    originals: np.ndarray  # [N, H, W, C]
    masks: np.ndarray  # [N, H, W] in {0, 1}
    deltas: np.ndarray  # [N, H, W, C]
    references: np.ndarray
    surrogate: SurrogateModel
    last_tmp: SurrogateModel
    trace: list[dict]

    @property
    def adversarial(self) -> np.ndarray:
        return self.originals + self.deltas


def pgd_step(delta: np.ndarray, grad: np.ndarray, eta_unit: float) -> np.ndarray:
    if delta.shape != grad.shape:
        raise ValueError(f"perturbation {delta.shape} and gradient {grad.shape} differ in shape")
    return delta + eta_unit * np.sign(grad)


def budget_map(mask: np.ndarray, eta: float, eta_mask: float) -> np.ndarray:
    """Per-pixel L-inf budget [..., H, W, 1], broadcastable over channels."""
    return np.where(np.asarray(mask)[..., None] > 0, eta_mask, eta)


def clamp_masked(delta: np.ndarray, mask: np.ndarray, eta: float, eta_mask: float, x: np.ndarray,
                 signed: bool = True) -> np.ndarray:
    """Clip |delta| to eta off-mask and eta_mask on-mask, then keep x + delta in [0, 1]."""
    if not 0.0 <= eta <= eta_mask <= 1.0:
        raise ValueError(f"need 0 <= eta <= eta_mask <= 1, got eta={eta}, eta_mask={eta_mask}")
    b = budget_map(mask, eta, eta_mask)
    d = np.clip(delta, -b if signed else 0.0, b)
    return np.clip(x + d, 0.0, 1.0) - x


def uniform_budget_equivalent(eta: float, eta_mask: float, ratio: float) -> float:
    """Mean |delta| of a fully saturated masked perturbation."""
    return (1.0 - ratio) * eta + ratio * eta_mask


def masks_for(originals: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.mask_mode == "full":
        return np.ones(originals.shape[:3], dtype=np.uint8)
    return np.stack([build_mask(img, cfg.ratio, cfg.laplacian_neighbors) for img in originals])


def budget_violations(delta: np.ndarray, x: np.ndarray, mask: np.ndarray, eta: float, eta_mask: float,
                      tol: float = 1e-12) -> int:
    """Count elements breaking the per-region budget or the [0, 1] range."""
    b = np.broadcast_to(budget_map(mask, eta, eta_mask), delta.shape)
    over = np.abs(delta) > b + tol
    out_of_range = ((x + delta) < -tol) | ((x + delta) > 1.0 + tol)
    return int(np.count_nonzero(over | out_of_range))


def aspl(originals, references, cfg: AttackConfig, base: SurrogateModel, sched: DiffusionSchedule,
         prior_images=None, masks: np.ndarray | None = None,
         callback: Callable[[int, np.ndarray], None] | None = None) -> ProtectedSet:
    """Run the alternating attack on one identity's images.

    Each iteration: fine-tune a copy of the surrogate one step on the
    references, take one signed-gradient ascent step on every image against
    that copy, clamp to the masked budget, then advance the surrogate one
    step on the current adversarial images.  ``callback(it, deltas)`` sees
    the perturbations after every clamp.
    """
    x = np.asarray(originals, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    if len(x) == 0 or len(refs) == 0:
        raise ValueError("aspl needs nonempty originals and references")
    if masks is None:
        masks = masks_for(x, cfg)
    rng = np.random.default_rng(cfg.seed)
    tcfg = cfg.surrogate

    delta = np.zeros_like(x)
    surrogate = base.copy(role="surrogate")
    state = AdamState.zeros_like(surrogate)
    tmp = surrogate
    trace = []
    for it in range(1, cfg.steps + 1):
        tmp, _, ref_loss = finetune_step(surrogate, state.copy(), refs, prior_images, tcfg, sched, rng)
        tmp.role = "temporary"
        g = input_grad(tmp, sched, x + delta, INSTANCE_TOKEN, rng)
        delta = clamp_masked(pgd_step(delta, g, cfg.step_size), masks, cfg.eta, cfg.eta_mask, x, cfg.signed)
        if callback is not None:
            callback(it, delta)
        surrogate, state, adv_loss = finetune_step(surrogate, state, x + delta, prior_images, tcfg, sched, rng)
        trace.append({
            "iteration": it,
            "ref_loss_db": ref_loss,
            "adv_loss_db": adv_loss,
            "mean_abs_delta": float(np.abs(delta).mean()),
            "max_abs_delta": float(np.abs(delta).max()),
        })
    return ProtectedSet(x, masks, delta, refs, surrogate, tmp, trace)
