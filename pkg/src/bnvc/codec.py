"""Coding sessions: decoded-frame buffer, reference handling, and the
frame/sequence encode-decode pipeline.

The encoder reconstructs every inter frame through exactly the float
operations the decoder will run on the decoded symbols, so encoder and
decoder buffers hold bit-identical pixels, features, and flows at every
time step (drift-free by construction, asserted by tests).

Per inter frame: motion is estimated against the newest decoded frame
and coded by the motion autoencoder; the reference list is padded by
the duplication policy; each reference's stored feature is warped by a
cumulative flow obtained by composing stored decoded flows (duplicates
reuse their source's flow); the fusion front-end produces the context
pyramid; the contextual autoencoder codes the frame conditioned on it;
the frame generator emits the reconstruction plus the feature stored
for future references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bitstream import (
    FRAME_TYPE_INTER,
    FRAME_TYPE_INTRA,
    BitstreamReader,
    BitstreamWriter,
    FrameChunk,
    StreamHeader,
)
from .entropy import (
    build_gaussian_cdf_rows,
    build_logistic_cdf_rows,
    range_decode,
    range_encode,
    row_support_bounds,
)
from .errors import CorruptStreamError, UsageError
from .metrics import psnr
from .model import CodecModel
from .motion import compose_flows, estimate_motion
from .policies import DuplicationPolicy, pad_references
from .tensor import Tensor, no_grad, warp_bilinear

__all__ = [
    "Frame",
    "DecodedBuffer",
    "build_reference_set",
    "reference_flows",
    "intra_frame",
    "encode_mv",
    "decode_mv",
    "encode_frame",
    "decode_frame",
    "encode_sequence",
    "decode_sequence",
    "EncodeStats",
]


@dataclass
class Frame:
    """One decoded picture: 8-bit pixels, stored feature, decoded flow."""

    pixels: np.ndarray
    index: int
    feature: Optional[Tensor] = None
    flow: Optional[Tensor] = None

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise UsageError(f"frame pixels must be uint8 (3, H, W), got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


class DecodedBuffer:
    """Ring of the most recent decoded frames, oldest to newest."""

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise UsageError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._frames: list[Frame] = []

    def push(self, frame: Frame) -> None:
        if self._frames and frame.index <= self._frames[-1].index:
            raise UsageError(
                f"frame indices must increase: got {frame.index} after {self._frames[-1].index}"
            )
        self._frames.append(frame)
        if len(self._frames) > self.capacity:
            self._frames = self._frames[-self.capacity :]

    def clear(self) -> None:
        self._frames = []

    def frames(self) -> list[Frame]:
        return list(self._frames)

    @property
    def newest(self) -> Frame:
        if not self._frames:
            raise UsageError("decoded buffer is empty")
        return self._frames[-1]

    def __len__(self) -> int:
        return len(self._frames)


def build_reference_set(dpb: DecodedBuffer, n: int, policy: DuplicationPolicy) -> list[Frame]:
    """The n references for the next frame, duplicated per `policy`."""
    return pad_references(dpb.frames(), n, policy)


def reference_flows(refs: list[Frame], newest_flow: Tensor) -> list[Tensor]:
    """Cumulative current-to-reference flows, oldest to newest.

    The newest reference uses the just-decoded flow directly; each older
    distinct reference chains one more stored flow through composition;
    duplicated entries reuse the duplicated frame's cumulative flow.
    """
    n = len(refs)
    flows: list[Optional[Tensor]] = [None] * n
    flows[n - 1] = newest_flow
    for i in range(n - 2, -1, -1):
        if refs[i].index == refs[i + 1].index:
            flows[i] = flows[i + 1]
            continue
        if refs[i].index != refs[i + 1].index - 1:
            raise UsageError(
                f"reference indices must be consecutive, got {refs[i].index} before {refs[i + 1].index}"
            )
        step = refs[i + 1].flow
        if step is None:
            step = Tensor(np.zeros_like(newest_flow.data))
        flows[i] = compose_flows(flows[i + 1], step)
    return flows  # type: ignore[return-value]


def ensure_feature(model: CodecModel, frame: Frame) -> Tensor:
    """The frame's stored feature, extracting and caching it if missing."""
    if frame.feature is None:
        frame.feature = model.extract_feature(_pixels_to_tensor(frame.pixels))
    return frame.feature


def intra_frame(model: CodecModel, pixels: np.ndarray, index: int) -> Frame:
    """Losslessly stored frame; its feature comes from the extractor."""
    with no_grad():
        frame = Frame(np.ascontiguousarray(pixels), index)
        ensure_feature(model, frame)
    return frame


def _pixels_to_tensor(pixels: np.ndarray) -> Tensor:
    return Tensor(pixels.astype(np.float64) / 255.0)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values * 255.0), 0.0, 255.0).astype(np.uint8)


def _block_size(h: int, w: int) -> int:
    return 8 if (h % 8 == 0 and w % 8 == 0) else 4


# -- latent coding helpers ----------------------------------------------------

def _factorized_encode(model: CodecModel, which: str, z: Tensor) -> tuple[np.ndarray, bytes]:
    loc, scale = model.prior_params(which)
    shape = z.shape
    locs = np.broadcast_to(loc.data, shape).ravel()
    scales = np.broadcast_to(scale.data, shape).ravel()
    lo, hi = row_support_bounds(locs, scales)
    sym = np.clip(np.rint(z.data.ravel()), lo, hi).astype(np.int64)
    payload = range_encode(sym, build_logistic_cdf_rows(locs, scales))
    return sym.reshape(shape), payload


def _factorized_decode(model: CodecModel, which: str, payload: bytes, shape: tuple[int, ...]) -> np.ndarray:
    loc, scale = model.prior_params(which)
    locs = np.broadcast_to(loc.data, shape).ravel()
    scales = np.broadcast_to(scale.data, shape).ravel()
    sym = range_decode(payload, build_logistic_cdf_rows(locs, scales), int(np.prod(shape)))
    return np.asarray(sym, dtype=np.int64).reshape(shape)


def _gaussian_encode(y: Tensor, mean: Tensor, scale: Tensor) -> tuple[np.ndarray, bytes]:
    resid = y.data - mean.data
    scales = scale.data.ravel()
    zeros = np.zeros_like(scales)
    lo, hi = row_support_bounds(zeros, scales)
    sym = np.clip(np.rint(resid.ravel()), lo, hi).astype(np.int64)
    payload = range_encode(sym, build_gaussian_cdf_rows(zeros, scales))
    return sym.reshape(y.shape), payload


def _gaussian_decode(payload: bytes, mean_shape: tuple[int, ...], scale: Tensor) -> np.ndarray:
    scales = scale.data.ravel()
    zeros = np.zeros_like(scales)
    sym = range_decode(payload, build_gaussian_cdf_rows(zeros, scales), scales.size)
    return np.asarray(sym, dtype=np.int64).reshape(mean_shape)


# -- motion coding --------------------------------------------------------------

def encode_mv(model: CodecModel, flow: np.ndarray, frame_hw: tuple[int, int]) -> tuple[tuple[bytes, bytes], Tensor]:
    """Code a motion field; returns ((hyper, main) payloads, decoded flow)."""
    with no_grad():
        lhw = model.latent_hw(*frame_hw)
        y = model.mv_analyze(Tensor(np.asarray(flow, dtype=np.float64)))
        z = model.mv_hyper_analyze(y)
        z_sym, hyper_payload = _factorized_encode(model, "mv", z)
        mean, scale = model.mv_hyper_synthesize(Tensor(z_sym.astype(np.float64)), lhw)
        y_sym, main_payload = _gaussian_encode(y, mean, scale)
        v_hat = model.mv_synthesize(Tensor(y_sym.astype(np.float64) + mean.data), frame_hw)
    return (hyper_payload, main_payload), v_hat


def decode_mv(model: CodecModel, payloads: tuple[bytes, bytes], frame_hw: tuple[int, int]) -> Tensor:
    with no_grad():
        h, w = frame_hw
        lh, lw = model.latent_hw(h, w)
        zh, zw = model.hyper_hw(h, w)
        hyper_payload, main_payload = payloads
        z_sym = _factorized_decode(model, "mv", hyper_payload, (model.config.mv_hyper, zh, zw))
        mean, scale = model.mv_hyper_synthesize(Tensor(z_sym.astype(np.float64)), (lh, lw))
        y_sym = _gaussian_decode(main_payload, mean.shape, scale)
        return model.mv_synthesize(Tensor(y_sym.astype(np.float64) + mean.data), frame_hw)


# -- frame coding -----------------------------------------------------------------

def _build_context(model: CodecModel, dpb: DecodedBuffer, policy: DuplicationPolicy, v_hat: Tensor):
    refs = build_reference_set(dpb, model.config.n_ref, policy)
    flows = reference_flows(refs, v_hat)
    warped = [warp_bilinear(ensure_feature(model, ref), fl) for ref, fl in zip(refs, flows)]
    return model.fusion(warped)


def _reconstruct_inter(model: CodecModel, ctx, mean: Tensor, y_sym: np.ndarray, frame_hw, index: int, v_hat: Tensor) -> Frame:
    y_hat = Tensor(y_sym.astype(np.float64) + mean.data)
    f_hat = model.ctx_synthesize(y_hat, ctx, frame_hw)
    x_hat, feature = model.generate_frame(f_hat, ctx.c0)
    return Frame(_to_uint8(x_hat.data), index, feature=feature, flow=v_hat)


def encode_frame(
    pixels: np.ndarray,
    index: int,
    dpb: DecodedBuffer,
    model: CodecModel,
    policy: DuplicationPolicy,
) -> tuple[FrameChunk, Frame]:
    """Code one inter frame against the decoded buffer state."""
    with no_grad():
        h, w = int(pixels.shape[1]), int(pixels.shape[2])
        lhw = model.latent_hw(h, w)
        newest = dpb.newest
        if newest.hw != (h, w):
            raise UsageError(f"frame size {h}x{w} does not match references {newest.hw}")
        flow = estimate_motion(
            pixels.astype(np.float64) / 255.0,
            newest.pixels.astype(np.float64) / 255.0,
            block=_block_size(h, w),
        )
        (mv_hyper, mv_main), v_hat = encode_mv(model, flow, (h, w))
        ctx = _build_context(model, dpb, policy, v_hat)
        x = _pixels_to_tensor(pixels)
        y = model.ctx_analyze(x, ctx)
        z = model.ctx_hyper_analyze(y)
        z_sym, ctx_hyper = _factorized_encode(model, "ctx", z)
        mean, scale = model.ctx_hyper_synthesize(Tensor(z_sym.astype(np.float64)), ctx, lhw)
        y_sym, ctx_main = _gaussian_encode(y, mean, scale)
        recon = _reconstruct_inter(model, ctx, mean, y_sym, (h, w), index, v_hat)
    return FrameChunk(mv_hyper, mv_main, ctx_hyper, ctx_main), recon


def decode_frame(
    chunk: FrameChunk,
    index: int,
    dpb: DecodedBuffer,
    model: CodecModel,
    policy: DuplicationPolicy,
    frame_hw: tuple[int, int],
) -> Frame:
    """Mirror of encode_frame; requires the encoder's buffer state."""
    with no_grad():
        h, w = frame_hw
        lhw = model.latent_hw(h, w)
        zh, zw = model.hyper_hw(h, w)
        v_hat = decode_mv(model, (chunk.mv_hyper, chunk.mv_main), (h, w))
        ctx = _build_context(model, dpb, policy, v_hat)
        z_sym = _factorized_decode(model, "ctx", chunk.ctx_hyper, (model.config.ctx_hyper, zh, zw))
        mean, scale = model.ctx_hyper_synthesize(Tensor(z_sym.astype(np.float64)), ctx, lhw)
        y_sym = _gaussian_decode(chunk.ctx_main, mean.shape, scale)
        return _reconstruct_inter(model, ctx, mean, y_sym, (h, w), index, v_hat)


# -- sequence coding ------------------------------------------------------------------

@dataclass
class EncodeStats:
    """Rate/quality accounting for one encoded sequence."""

    width: int
    height: int
    n_frames: int
    total_bits: int
    frame_bits: list[int] = field(default_factory=list)
    frame_psnr: list[float] = field(default_factory=list)
    frame_types: list[str] = field(default_factory=list)

    @property
    def bpp(self) -> float:
        return self.total_bits / (self.n_frames * self.width * self.height)

    @property
    def mean_p_frame_psnr(self) -> float:
        vals = [p for p, t in zip(self.frame_psnr, self.frame_types) if t == "P"]
        return float(np.mean(vals)) if vals else math.inf


def encode_sequence(
    frames: np.ndarray,
    model: CodecModel,
    policy: DuplicationPolicy = DuplicationPolicy.NEAR,
    lambda_index: int = 2,
    intra_period: int = 32,
) -> tuple[bytes, EncodeStats, np.ndarray]:
    """Encode uint8 frames (N, 3, H, W); returns (stream, stats, recons)."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3 or frames.dtype != np.uint8:
        raise UsageError(f"sequence must be uint8 (N, 3, H, W), got {frames.dtype} {frames.shape}")
    n, _, h, w = frames.shape
    model.latent_hw(h, w)  # validates divisibility
    if not 0 <= lambda_index <= 3:
        raise UsageError(f"lambda index must be in 0..3, got {lambda_index}")
    if intra_period < 1:
        raise UsageError(f"intra period must be >= 1, got {intra_period}")

    weights_hash = model.prepare_for_coding()
    header = StreamHeader(
        width=w,
        height=h,
        n_ref=model.config.n_ref,
        policy_wire=policy.wire_value,
        fusion_wire=model.config.fusion.wire_value,
        intra_period=intra_period,
        lambda_index=lambda_index,
        weights_hash=weights_hash,
    )
    writer = BitstreamWriter(header)
    dpb = DecodedBuffer(capacity=model.config.n_ref)
    recons = np.empty_like(frames)
    types: list[str] = []
    psnrs: list[float] = []
    for i in range(n):
        if i % intra_period == 0:
            writer.add_intra(frames[i].tobytes())
            dpb.clear()
            frame = intra_frame(model, frames[i], i)
            types.append("I")
        else:
            chunk, frame = encode_frame(frames[i], i, dpb, model, policy)
            writer.add_inter(chunk)
            types.append("P")
        dpb.push(frame)
        recons[i] = frame.pixels
        psnrs.append(psnr(frames[i], frame.pixels))
    data = writer.getvalue()
    stats = EncodeStats(
        width=w,
        height=h,
        n_frames=n,
        total_bits=8 * len(data),
        frame_bits=list(writer.frame_bits),
        frame_psnr=psnrs,
        frame_types=types,
    )
    return data, stats, recons


def decode_sequence(
    data: bytes,
    model: CodecModel,
    expected_policy: Optional[DuplicationPolicy] = None,
) -> tuple[np.ndarray, StreamHeader]:
    """Decode a bitstream; refuses mismatched weights/config/policy."""
    reader = BitstreamReader(data)
    header = reader.header
    weights_hash = model.prepare_for_coding()
    if header.weights_hash != weights_hash:
        raise UsageError(
            f"weights hash mismatch: stream was coded with {header.weights_hash:016x}, "
            f"model is {weights_hash:016x}"
        )
    if header.fusion_wire != model.config.fusion.wire_value:
        raise UsageError("fusion mode recorded in the stream does not match this model")
    if header.n_ref != model.config.n_ref:
        raise UsageError(
            f"stream uses {header.n_ref} references, model is built for {model.config.n_ref}"
        )
    policy = DuplicationPolicy.from_wire(header.policy_wire)
    if expected_policy is not None and expected_policy is not policy:
        raise UsageError(
            f"stream header says policy {policy.value!r}, refusing requested {expected_policy.value!r}"
        )
    h, w = header.height, header.width
    model.latent_hw(h, w)
    dpb = DecodedBuffer(capacity=model.config.n_ref)
    out: list[np.ndarray] = []
    index = 0
    while not reader.at_end():
        ftype, record = reader.next_record()
        if ftype == FRAME_TYPE_INTRA:
            pixels = np.frombuffer(record, dtype=np.uint8).reshape(3, h, w).copy()
            dpb.clear()
            frame = intra_frame(model, pixels, index)
        elif ftype == FRAME_TYPE_INTER:
            if len(dpb) == 0:
                raise CorruptStreamError("inter record with an empty decoded buffer")
            frame = decode_frame(record, index, dpb, model, policy, (h, w))
        else:  # pragma: no cover - reader already rejects unknown types
            raise CorruptStreamError(f"unknown record type {ftype}")
        dpb.push(frame)
        out.append(frame.pixels)
        index += 1
    if not out:
        raise CorruptStreamError("stream holds no frame records")
    return np.stack(out), header
