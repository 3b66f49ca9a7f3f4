"""Toy end-to-end trainer.

Each step samples a window of one intra frame plus a short rollout of
inter frames, runs the full coding pipeline with quantization relaxed
to additive uniform noise, and minimizes sum_t(lambda * MSE_t +
bits_t / pixels) by Adam. The rollout buffer carries live tensors, so
gradients flow through stored features and composed flows across the
whole window (motion estimation itself is integer block matching and
enters as a constant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codec import encode_sequence, reference_flows
from .errors import BnvcError, UsageError
from .metrics import psnr as psnr_metric
from .model import LAMBDA_VALUES, CodecModel
from .motion import estimate_motion
from .policies import DuplicationPolicy, pad_references
from .tensor import Tensor, mean_all, warp_bilinear

__all__ = [
    "TrainingConfig",
    "TrainingLog",
    "TrainingDiverged",
    "Adam",
    "train_toy",
    "evaluate_coding",
    "per_frame_distortion",
]


class TrainingDiverged(BnvcError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite training loss at step {step} (value {value})")
        self.step = step


class Adam:
    """Standard Adam with optional global-norm gradient clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(total)
        if norm > max_norm > 0.0:
            scale = max_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class TrainingConfig:
    lambda_index: int = 2
    steps: int = 2000
    seed: int = 0
    policy: DuplicationPolicy = DuplicationPolicy.NEAR
    rollout: int = 4
    lr: float = 1e-3
    clip_norm: float = 10.0

    def __post_init__(self):
        if not 0 <= self.lambda_index <= 3:
            raise UsageError(f"lambda index must be in 0..3, got {self.lambda_index}")
        if self.steps < 0 or self.rollout < 1:
            raise UsageError("steps must be >= 0 and rollout >= 1")

    @property
    def lam(self) -> float:
        return LAMBDA_VALUES[self.lambda_index]


@dataclass
class TrainingLog:
    entries: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float, bpp: float, mse: float) -> None:
        self.entries.append({"step": step, "loss": loss, "bpp": bpp, "mse": mse})

    def smoothed_loss(self, window: int = 100) -> list[float]:
        losses = [e["loss"] for e in self.entries]
        return [float(np.mean(losses[max(0, i - window + 1) : i + 1])) for i in range(len(losses))]

    def window_mean(self, start: int, stop: int) -> float:
        vals = [e["loss"] for e in self.entries[start:stop]]
        return float(np.mean(vals))

    def to_csv(self) -> str:
        lines = ["step,loss,bpp,mse"]
        for e in self.entries:
            lines.append(f"{e['step']},{e['loss']:.10g},{e['bpp']:.10g},{e['mse']:.10g}")
        return "\n".join(lines) + "\n"


@dataclass
class _RolloutEntry:
    x_rec: Tensor
    feature: Tensor
    flow: Optional[Tensor]
    index: int


def _noise(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(-0.5, 0.5, size=shape))


def rollout_loss(
    model: CodecModel,
    window: np.ndarray,
    rng: np.random.Generator,
    lam: float,
    policy: DuplicationPolicy,
) -> tuple[Tensor, float, float]:
    """Training loss over one window: frame 0 intra, the rest inter.

    Returns (loss tensor, mean inter-frame bpp, mean inter-frame MSE).
    """
    n_frames = window.shape[0]
    h, w = int(window.shape[2]), int(window.shape[3])
    lhw = model.latent_hw(h, w)
    block = 8 if (h % 8 == 0 and w % 8 == 0) else 4
    pixel_scale = 1.0 / 255.0

    x0 = Tensor(window[0].astype(np.float64) * pixel_scale)
    buffer: list[_RolloutEntry] = [_RolloutEntry(x0, model.extract_feature(x0), None, 0)]

    total: Optional[Tensor] = None
    bits_sum = 0.0
    mse_sum = 0.0
    inv_pixels = Tensor(1.0 / (h * w))
    lam_t = Tensor(float(lam))
    for t in range(1, n_frames):
        x = Tensor(window[t].astype(np.float64) * pixel_scale)
        newest = buffer[-1]
        flow_np = estimate_motion(x.data, newest.x_rec.data, block=block)

        y_v = model.mv_analyze(Tensor(flow_np))
        z_v = model.mv_hyper_analyze(y_v)
        z_v_noisy = z_v + _noise(rng, z_v.shape)
        rate = model.factorized_rate_bits(z_v_noisy, "mv")
        mean_v, scale_v = model.mv_hyper_synthesize(z_v_noisy, lhw)
        y_v_noisy = y_v + _noise(rng, y_v.shape)
        rate = rate + model.gaussian_rate_bits(y_v_noisy, mean_v, scale_v)
        v_hat = model.mv_synthesize(y_v_noisy, (h, w))

        refs = pad_references(buffer, model.config.n_ref, policy)
        flows = reference_flows(refs, v_hat)  # type: ignore[arg-type]
        warped = [warp_bilinear(ref.feature, fl) for ref, fl in zip(refs, flows)]
        ctx = model.fusion(warped)

        y = model.ctx_analyze(x, ctx)
        z = model.ctx_hyper_analyze(y)
        z_noisy = z + _noise(rng, z.shape)
        rate = rate + model.factorized_rate_bits(z_noisy, "ctx")
        mean_c, scale_c = model.ctx_hyper_synthesize(z_noisy, ctx, lhw)
        y_noisy = y + _noise(rng, y.shape)
        rate = rate + model.gaussian_rate_bits(y_noisy, mean_c, scale_c)

        f_hat = model.ctx_synthesize(y_noisy, ctx, (h, w))
        x_hat, feature = model.generate_frame(f_hat, ctx.c0)
        diff = x - x_hat
        dist = mean_all(diff * diff)

        loss_t = lam_t * dist + rate * inv_pixels
        total = loss_t if total is None else total + loss_t
        bits_sum += float(rate.data)
        mse_sum += float(dist.data)

        buffer.append(_RolloutEntry(x_hat, feature, v_hat, t))
        if len(buffer) > model.config.n_ref:
            buffer = buffer[-model.config.n_ref :]

    n_inter = n_frames - 1
    return total, bits_sum / (n_inter * h * w), mse_sum / n_inter


def train_toy(model: CodecModel, dataset: Sequence[np.ndarray], config: TrainingConfig) -> TrainingLog:
    """Train in place; fixed seed gives a bit-reproducible log.

    steps=0 returns immediately with the weights untouched. A non-finite
    loss aborts with TrainingDiverged carrying the step index.
    """
    log = TrainingLog()
    if config.steps == 0:
        return log
    if not dataset:
        raise UsageError("training dataset is empty")
    for seq in dataset:
        if seq.shape[0] < config.rollout + 1:
            raise UsageError(
                f"sequences must hold at least rollout+1={config.rollout + 1} frames, got {seq.shape[0]}"
            )
    rng = np.random.default_rng(config.seed)
    params = model.store.tensors()
    model.store.set_requires_grad(True)
    opt = Adam(params, lr=config.lr)
    try:
        for step in range(config.steps):
            seq = dataset[int(rng.integers(len(dataset)))]
            start = int(rng.integers(0, seq.shape[0] - config.rollout))
            window = seq[start : start + config.rollout + 1]
            loss, bpp, mse = rollout_loss(model, window, rng, config.lam, config.policy)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                raise TrainingDiverged(step, loss_val)
            opt.zero_grad()
            loss.backward()
            opt.clip_global_norm(config.clip_norm)
            opt.step()
            model.store.mark_dirty()
            log.add(step, loss_val, bpp, mse)
    finally:
        opt.zero_grad()
        model.store.set_requires_grad(False)
    return log


def evaluate_coding(
    model: CodecModel,
    sequences: Sequence[np.ndarray],
    lambda_index: int,
    policy: DuplicationPolicy = DuplicationPolicy.NEAR,
    intra_period: int = 32,
) -> dict:
    """Real (integer, entropy-coded) evaluation on held-out sequences.

    Returns mean bpp, mean inter-frame MSE (in [0,1]^2 units), the
    rate-distortion objective lambda*MSE + bpp, and mean inter PSNR.
    """
    lam = LAMBDA_VALUES[lambda_index]
    bpps, mses, psnrs = [], [], []
    for seq in sequences:
        data, stats, recons = encode_sequence(seq, model, policy, lambda_index, intra_period)
        p_idx = [i for i, t in enumerate(stats.frame_types) if t == "P"]
        err = (seq[p_idx].astype(np.float64) - recons[p_idx].astype(np.float64)) / 255.0
        mses.append(float(np.mean(err * err)))
        bpps.append(stats.bpp)
        psnrs.append(stats.mean_p_frame_psnr)
    mean_bpp = float(np.mean(bpps))
    mean_mse = float(np.mean(mses))
    return {
        "bpp": mean_bpp,
        "mse": mean_mse,
        "objective": lam * mean_mse + mean_bpp,
        "psnr": float(np.mean(psnrs)),
        "lambda": lam,
    }


def per_frame_distortion(
    model: CodecModel,
    seq: np.ndarray,
    policy: DuplicationPolicy,
    n_inter: int = 3,
) -> list[float]:
    """MSE of the first `n_inter` inter frames after one intra frame."""
    window = seq[: n_inter + 1]
    _, _, recons = encode_sequence(window, model, policy, lambda_index=2, intra_period=n_inter + 1)
    out = []
    for i in range(1, n_inter + 1):
        err = (window[i].astype(np.float64) - recons[i].astype(np.float64)) / 255.0
        out.append(float(np.mean(err * err)))
    return out
