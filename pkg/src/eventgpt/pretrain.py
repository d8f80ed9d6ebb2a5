"""Backbone warm-start run before the three alignment stages.

The staged schedule assumes a pretrained vision encoder and a pretrained
language model. At toy scale both are produced here from freshly sampled
scenes and the training conversations:

* the encoder learns shape category, object centre and velocity through
  throwaway linear heads. Its inputs are rendered frames (filled or outlined)
  and differences of two renders one bin width apart, split by sign the way
  event polarities are;
* the language model learns the conversation text behind a stand-in visual
  prefix laid out like the aggregated one. With ``lm_corpus="context"`` the
  ``S`` spatial slots spell the shape name and each of the ``N_w`` per-bin
  slots holds a fixed linear code of that bin's object centre and the
  velocity, so the frozen model already reads facts from prefix positions
  and the projector only has to learn to write them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import model as M
from . import tensor as T
from .model import ModelConfig, ModelParams
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .sim import SHAPES, SceneSpec, SimConfig, render_intensity, sample_scene, shape_mask, vqa_turn
from .tensor import Tensor
from .tokenizer import TokenSequence, tokenize
from .data import SampleSource, image_caption

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    encoder_steps: int = 3000
    encoder_batch: int = 32
    encoder_lr: float = 1e-3
    motion_fraction: float = 0.5
    outline_fraction: float = 0.5
    position_weight: float = 1.0
    velocity_weight: float = 5.0
    lm_steps: int = 600
    lm_batch: int = 8
    lm_lr: float = 1e-3
    lm_corpus: str = "context"
    code_scale: float = 0.25
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PretrainConfig":
        return cls(**d)


def _outline(mask: np.ndarray) -> np.ndarray:
    e = np.zeros(mask.shape)
    m = mask.astype(float)
    e[:-1] += np.abs(np.diff(m, axis=0))
    e[:, :-1] += np.abs(np.diff(m, axis=1))
    return np.minimum(e, 1.0)


def _unit(pos: tuple[float, float], side: int) -> np.ndarray:
    """Pixel coordinates -> [-1, 1]."""
    return np.array(pos) / (side - 1) * 2.0 - 1.0


def motion_target(spec: SceneSpec, side: int) -> np.ndarray:
    """Velocity in frame widths per second."""
    return np.array(spec.velocity) / side


def difference_frame(spec: SceneSpec, t0: float, t1: float) -> np.ndarray:
    """Polarity-split threshold crossings between two renders, scaled like a normalised bin."""
    d = np.log(render_intensity(spec, t1)) - np.log(render_intensity(spec, t0))
    counts = np.floor(np.abs(d) / spec.contrast_threshold)
    frame = np.stack([counts * (d > 0), counts * (d < 0)])
    return frame / max(1.0, frame.max())


def shape_frame(
    rng: np.random.Generator, cfg: ModelConfig, sim: SimConfig, pc: PretrainConfig
) -> tuple[np.ndarray, int, np.ndarray, np.ndarray]:
    """A random two-channel training input with its shape index, centre and velocity targets.

    Motion inputs difference two renders one bin width apart; still inputs
    (filled or outlined) carry zero velocity.
    """
    spec = sample_scene(rng, 0, sim)
    label = SHAPES.index(spec.shape)
    side = cfg.image_side
    if rng.random() < pc.motion_fraction:
        width = spec.duration / cfg.num_bins
        t0 = float(rng.uniform(0, spec.duration - width))
        centre = _unit(spec.position(t0 + width / 2), side)
        return difference_frame(spec, t0, t0 + width), label, centre, motion_target(spec, side)
    t = float(rng.uniform(0, spec.duration))
    cx, cy = spec.position(t)
    centre = _unit((cx, cy), side)
    still = np.zeros(2)
    if rng.random() >= pc.outline_fraction:
        return np.repeat(render_intensity(spec, t)[None], cfg.channels, axis=0), label, centre, still
    h, w = spec.resolution
    edge = _outline(shape_mask(spec.shape, spec.size, cx, cy, h, w))
    frame = np.zeros((cfg.channels,) + edge.shape)
    which = int(rng.integers(cfg.channels + 1))
    if which < cfg.channels:
        frame[which] = edge
    else:
        frame[:] = edge
    return frame, label, centre, still


@dataclass
class WarmStartLog:
    losses: list[float]
    wall_time: float


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    err = T.add(pred, Tensor(-target))
    return T.scale(T.sum_all(T.mul(err, err)), 1.0 / len(target))


def pretrain_encoder(params: ModelParams, cfg: ModelConfig, pc: PretrainConfig) -> WarmStartLog:
    """Shape classification plus centre and velocity regression from mean-pooled encoder tokens."""
    side = cfg.image_side
    # clip length scales with the frame so every speed class fits on small sensors
    sim = SimConfig(resolution=(side, side), size_range=(0.22 * side, 0.34 * side), duration=500_000 * side // 64)
    rng = np.random.default_rng([pc.seed, 0xC11B])
    heads = {"_cls": Tensor(np.zeros((cfg.enc_dim, len(SHAPES))), requires_grad=True),
             "_pos": Tensor(np.zeros((cfg.enc_dim, 2)), requires_grad=True),
             "_vel": Tensor(np.zeros((cfg.enc_dim, 2)), requires_grad=True)}
    state = OptimizerState(lr=pc.encoder_lr)
    names = M.iter_param_names(params, ["encoder"])
    losses = []
    t0 = time.perf_counter()
    for step in range(pc.encoder_steps):
        frames, labels, centres, vels = zip(*(shape_frame(rng, cfg, sim, pc) for _ in range(pc.encoder_batch)))
        b = len(frames)
        params.zero_grad()
        for h in heads.values():
            h.grad = None
        z = M.encode_bins_batch(np.stack(frames)[:, None], params, cfg)
        pooled = T.mean_over_axis(T.reshape(z, (b, cfg.num_patches, cfg.enc_dim)), 1)
        ce = T.cross_entropy_with_logits(T.matmul(pooled, heads["_cls"]), np.array(labels), np.ones(b, bool))
        pos = _mse(T.matmul(pooled, heads["_pos"]), np.stack(centres))
        vel = _mse(T.matmul(pooled, heads["_vel"]), np.stack(vels))
        loss = T.add(T.add(ce, T.scale(pos, pc.position_weight)), T.scale(vel, pc.velocity_weight))
        loss.backward()
        grads = {n: params[n].grad for n in names}
        grads.update({k: h.grad for k, h in heads.items()})
        grads, _ = clip_grad_norm(grads, 1.0)
        adamw_step({**params.tensors, **heads}, grads, state)
        losses.append(loss.item())
        if step % 200 == 0:
            log.info("encoder warm-start step %d loss %.4f (ce %.4f)", step, losses[-1], ce.item())
    params.zero_grad()
    return WarmStartLog(losses, time.perf_counter() - t0)


def slot_code(cfg: ModelConfig, seed: int, scale: float = 0.25) -> np.ndarray:
    """Fixed ``[4, D_llm]`` basis; a per-bin slot holds ``(x, y, vx, vy) @ code``."""
    rng = np.random.default_rng([seed, 0x905])
    return rng.standard_normal((4, cfg.lm_dim)) * scale


def bin_targets(gt, cfg: ModelConfig) -> np.ndarray:
    """``[N_w, 4]``: object centre in [-1, 1] at the middle of each bin, then the velocity."""
    spec = gt.spec
    times = (np.arange(cfg.num_bins) + 0.5) * spec.duration / cfg.num_bins
    centres = np.stack([_unit(spec.position(t), cfg.image_side) for t in times])
    return np.c_[centres, np.tile(motion_target(spec, cfg.image_side), (cfg.num_bins, 1))]


@dataclass
class _LMExample:
    chars: list[int]              # ids for the spatial slots
    targets: np.ndarray | None    # [N_w, 4] for the per-bin slots, None on the image path
    prompt: TokenSequence
    answer: TokenSequence


def lm_corpus(source: SampleSource, kind: str, cfg: ModelConfig) -> dict[int, list[_LMExample]]:
    """Warm-start examples keyed by prefix length.

    Slots mirror the aggregated prefix: ``S`` spatial slots carry the shape
    name as text, the ``N_w`` per-bin slots carry centre and velocity through
    a fixed linear code. The image caption sees ``S`` slots only. With
    ``kind="plain"`` all slots are blank.
    """
    s = cfg.num_patches
    blank = tokenize(" " * s).ids
    pools: dict[int, list[_LMExample]] = {s: [], cfg.prefix_len: []}
    for rec in source.records:
        gt = rec.ground_truth
        chars = tokenize(gt.shape[:s].ljust(s)).ids if kind == "context" else blank
        targets = bin_targets(gt, cfg) if kind == "context" else np.zeros((cfg.num_bins, 4))
        turns = [(rec.conversations[0]["text"], rec.conversations[1]["text"])]
        turns += [tuple(t["text"] for t in vqa_turn(gt, a)) for a in ("shape", "direction", "speed")]
        for q, a in turns:
            pools[cfg.prefix_len].append(_LMExample(chars, targets, tokenize(q), tokenize(a, supervised=True)))
        q, a = image_caption(rec)
        pools[s].append(_LMExample(chars, None, tokenize(q), tokenize(a, supervised=True)))
    return pools


def _prefix(examples: list[_LMExample], params: ModelParams, code: np.ndarray) -> Tensor:
    chars = T.embedding_gather(params["lm.tok_embed"], np.array([e.chars for e in examples]))
    if examples[0].targets is None:
        return chars
    bins = Tensor(np.stack([e.targets @ code for e in examples]))
    return T.concat([chars, bins], axis=1)


def pretrain_lm(params: ModelParams, cfg: ModelConfig, source: SampleSource, pc: PretrainConfig) -> WarmStartLog:
    if pc.lm_corpus not in ("plain", "context"):
        raise ValueError(f"lm_corpus must be 'plain' or 'context', got {pc.lm_corpus!r}")
    pools = lm_corpus(source, pc.lm_corpus, cfg)
    code = slot_code(cfg, pc.seed, pc.code_scale)
    ks = sorted(pools)
    weights = np.array([len(pools[k]) for k in ks], dtype=float)
    rng = np.random.default_rng([pc.seed, 0x11A])
    state = OptimizerState(lr=pc.lm_lr)
    names = M.iter_param_names(params, ["lm"])
    losses = []
    t0 = time.perf_counter()
    for step in range(pc.lm_steps):
        pool = pools[ks[int(rng.choice(len(ks), p=weights / weights.sum()))]]
        batch = [pool[i] for i in rng.integers(len(pool), size=pc.lm_batch)]
        params.zero_grad()
        prefix = _prefix(batch, params, code)
        seq = M.assemble_batch(prefix, [e.prompt for e in batch], [e.answer for e in batch], params, cfg)
        loss = M.sequence_loss(seq, params, cfg)
        loss.backward()
        grads, _ = clip_grad_norm({n: params[n].grad for n in names if params[n].grad is not None}, 1.0)
        adamw_step(params.tensors, grads, state)
        losses.append(loss.item())
        if step % 100 == 0:
            log.info("lm warm-start step %d loss %.4f", step, losses[-1])
    params.zero_grad()
    return WarmStartLog(losses, time.perf_counter() - t0)
