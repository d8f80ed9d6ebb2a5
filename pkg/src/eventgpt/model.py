"""Toy-scale event-language model.

Data flow for a clip binned into ``T`` windows::

    grid [T, 2, H, W] -> encoder -> Z [T, S, D] -> aggregate -> [(S + T), D]
        -> projector (D -> D_h -> D_llm) -> adapter (D_llm -> D_llm)
        -> prefix of the causal LM sequence

Everything batched carries a leading batch axis; the single-sample helpers
(:func:`encode_bins`, :func:`aggregate`, :func:`assemble_sequence`) wrap the
batched ones.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .events import VoxelGrid
from .tensor import DimensionError, Tensor
from .tokenizer import BOS, EOS, EVENT, VOCAB_SIZE, TokenSequence, detokenize, tokenize

MODULES = ("encoder", "projector", "adapter", "lm")


class LengthError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 64
    patch: int = 16
    channels: int = 2
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    proj_hidden: int = 128
    lm_dim: int = 128
    lm_depth: int = 4
    lm_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 160
    num_bins: int = 5
    pooling: str = "mean"
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_side % self.patch:
            raise ValueError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if self.enc_dim % self.enc_heads or self.lm_dim % self.lm_heads:
            raise ValueError("model widths must be divisible by their head counts")
        if self.pooling not in ("mean", "max"):
            raise ValueError(f"pooling must be 'mean' or 'max', got {self.pooling!r}")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def prefix_len(self) -> int:
        return self.num_bins + self.num_patches

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


TINY = ModelConfig(image_side=32, patch=8, enc_dim=16, enc_depth=1, enc_heads=2, proj_hidden=32,
                   lm_dim=32, lm_depth=2, lm_heads=2, max_seq_len=96, num_bins=3)


# ---------------------------------------------------------------- parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class ModelParams:
    """Named parameters, addressed by dotted names such as ``projector.w1``."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(sorted(tensors.items()))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @staticmethod
    def module_of(name: str) -> str:
        return name.split(".", 1)[0]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        return cls({k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k)
                    for k, v in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.to_arrays().items()})

    def round_to_float32(self) -> None:
        """Snap every value to the nearest float32 so checkpoints round-trip exactly."""
        for t in self.tensors.values():
            t.data = t.data.astype(np.float32).astype(np.float64)

    def param_hash(self, name: str) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.tensors[name].data).tobytes()).hexdigest()

    def module_hashes(self) -> dict[str, str]:
        out = {}
        for mod in MODULES:
            h = hashlib.sha256()
            for name in self.tensors:
                if self.module_of(name) == mod:
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
            out[mod] = h.hexdigest()
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng([seed, 0xE7])
        std = cfg.init_std
        p: dict[str, np.ndarray] = {}

        def blocks(prefix: str, d: int, depth: int):
            h = d * cfg.mlp_ratio
            for i in range(depth):
                b = f"{prefix}.blocks.{i}"
                p[f"{b}.ln1.g"] = np.ones(d)
                p[f"{b}.ln1.b"] = np.zeros(d)
                p[f"{b}.attn.wqkv"] = _trunc_normal(rng, (d, 3 * d), std)
                p[f"{b}.attn.bqkv"] = np.zeros(3 * d)
                p[f"{b}.attn.wo"] = _trunc_normal(rng, (d, d), std)
                p[f"{b}.attn.bo"] = np.zeros(d)
                p[f"{b}.ln2.g"] = np.ones(d)
                p[f"{b}.ln2.b"] = np.zeros(d)
                p[f"{b}.mlp.w1"] = _trunc_normal(rng, (d, h), std)
                p[f"{b}.mlp.b1"] = np.zeros(h)
                p[f"{b}.mlp.w2"] = _trunc_normal(rng, (h, d), std)
                p[f"{b}.mlp.b2"] = np.zeros(d)
            p[f"{prefix}.ln_f.g"] = np.ones(d)
            p[f"{prefix}.ln_f.b"] = np.zeros(d)

        d, dl = cfg.enc_dim, cfg.lm_dim
        p["encoder.patch.w"] = _trunc_normal(rng, (cfg.patch * cfg.patch * cfg.channels, d), std)
        p["encoder.patch.b"] = np.zeros(d)
        p["encoder.pos"] = _trunc_normal(rng, (cfg.num_patches, d), std)
        blocks("encoder", d, cfg.enc_depth)
        p["projector.w1"] = _trunc_normal(rng, (d, cfg.proj_hidden), std)
        p["projector.b1"] = np.zeros(cfg.proj_hidden)
        p["projector.w2"] = _trunc_normal(rng, (cfg.proj_hidden, dl), std)
        p["projector.b2"] = np.zeros(dl)
        p["adapter.w"] = np.eye(dl)
        p["adapter.b"] = np.zeros(dl)
        p["lm.tok_embed"] = _trunc_normal(rng, (cfg.vocab_size, dl), std)
        p["lm.pos"] = _trunc_normal(rng, (cfg.max_seq_len, dl), std)
        blocks("lm", dl, cfg.lm_depth)
        p["lm.head.w"] = _trunc_normal(rng, (dl, cfg.vocab_size), std)
        params = cls.from_arrays(p)
        params.round_to_float32()
        return params


# ---------------------------------------------------------------- building blocks


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, b) if b is not None else y


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e30), k=1)
        _MASKS[n] = m
    return m


def attention(x: Tensor, params: ModelParams, prefix: str, heads: int, causal: bool) -> Tensor:
    n, l, d = x.shape
    dh = d // heads
    qkv = linear(x, params[f"{prefix}.wqkv"], params[f"{prefix}.bqkv"])
    qkv = T.transpose(T.reshape(qkv, (n, l, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (T.slice_(qkv, i) for i in range(3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        scores = T.add(scores, Tensor(causal_mask(l)))
    att = T.matmul(T.softmax(scores, axis=-1), v)
    out = T.reshape(T.transpose(att, (0, 2, 1, 3)), (n, l, d))
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def block(x: Tensor, params: ModelParams, prefix: str, heads: int, causal: bool) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = T.add(x, attention(h, params, f"{prefix}.attn", heads, causal))
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = linear(T.gelu(linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])),
               params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return T.add(x, h)


# ---------------------------------------------------------------- event branch


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``[N, C, H, W]`` -> ``[N, S, P*P*C]`` with patches in row-major order."""
    n, c, h, w = frames.shape
    x = frames.reshape(n, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(n, (h // patch) * (w // patch), patch * patch * c)


def encode_bins_batch(grids: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """``[B, T, C, H, W]`` grids -> ``Z`` of shape ``[B, T, S, D]``; weights shared over bins."""
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 5 or grids.shape[2:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise DimensionError(
            f"grid shape {grids.shape[1:]} does not match (T, {cfg.channels}, {cfg.image_side}, {cfg.image_side})"
        )
    b, t = grids.shape[:2]
    s, d = cfg.num_patches, cfg.enc_dim
    x = Tensor(patchify(grids.reshape(b * t, *grids.shape[2:]), cfg.patch))
    x = linear(x, params["encoder.patch.w"], params["encoder.patch.b"])
    x = T.add(x, params["encoder.pos"])
    for i in range(cfg.enc_depth):
        x = block(x, params, f"encoder.blocks.{i}", cfg.enc_heads, causal=False)
    x = T.layer_norm(x, params["encoder.ln_f.g"], params["encoder.ln_f.b"])
    return T.reshape(x, (b, t, s, d))


def encode_bins(grid: VoxelGrid | np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    z = encode_bins_batch(data[None], params, cfg)
    return T.reshape(z, z.shape[1:])


def _pool(x: Tensor, axis: int, how: str) -> Tensor:
    return T.mean_over_axis(x, axis) if how == "mean" else T.max_over_axis(x, axis)


def aggregate(z: Tensor, pooling: str = "mean") -> Tensor:
    """``[T, S, D]`` -> ``[(S + T), D]``: pool over time (S rows) then over space (T rows)."""
    if z.ndim != 3:
        raise DimensionError(f"aggregate expects a rank-3 [T, S, D] tensor, got shape {z.shape}")
    return T.concat([_pool(z, 0, pooling), _pool(z, 1, pooling)], axis=0)


def aggregate_batch(z: Tensor, pooling: str = "mean") -> Tensor:
    if z.ndim != 4:
        raise DimensionError(f"aggregate_batch expects [B, T, S, D], got shape {z.shape}")
    return T.concat([_pool(z, 1, pooling), _pool(z, 2, pooling)], axis=1)


def project_and_adapt(e: Tensor, params: ModelParams, use_adapter: bool) -> Tensor:
    """Two-layer MLP projector into LM width, optionally followed by the linear adapter."""
    h = T.gelu(linear(e, params["projector.w1"], params["projector.b1"]))
    out = linear(h, params["projector.w2"], params["projector.b2"])
    if use_adapter:
        out = linear(out, params["adapter.w"], params["adapter.b"])
    return out


def event_prefix(
    grids: np.ndarray,
    params: ModelParams,
    cfg: ModelConfig,
    use_aggregator: bool = True,
    use_adapter: bool = True,
) -> Tensor:
    """LM-width prefix tokens ``[B, K, D_llm]`` for a batch of grids.

    Without the aggregator the per-bin tokens are flattened, which for the
    single-bin image path gives ``K = S``.
    """
    z = encode_bins_batch(grids, params, cfg)
    b, t, s, d = z.shape
    e = aggregate_batch(z, cfg.pooling) if use_aggregator else T.reshape(z, (b, t * s, d))
    return project_and_adapt(e, params, use_adapter)


def image_to_grid(image: np.ndarray, channels: int = 2) -> np.ndarray:
    """Intensity frame -> single-bin grid ``[1, C, H, W]`` with the frame copied into each channel."""
    return np.repeat(np.asarray(image, dtype=np.float64)[None, None], channels, axis=1)


# ---------------------------------------------------------------- sequences


@dataclass
class AssembledBatch:
    embedded: Tensor          # [B, L, D_llm]
    ids: np.ndarray           # [B, L]; -1 marks event-prefix slots
    supervised: np.ndarray    # [B, L] bool; true on answer tokens and the closing <eos>
    lengths: np.ndarray       # [B] real (unpadded) lengths


def _head_ids(k: int) -> list[int]:
    return [BOS, EVENT] if k > 0 else [BOS]


def assemble_batch(
    prefix: Tensor | None,
    prompts: Sequence[TokenSequence],
    answers: Sequence[TokenSequence | None] | None,
    params: ModelParams,
    cfg: ModelConfig,
) -> AssembledBatch:
    """Lay out ``<bos> [<event> prefix] prompt [answer <eos>]`` per row, right-padded with ``<eos>``."""
    b = len(prompts)
    answers = list(answers) if answers is not None else [None] * b
    k = 0 if prefix is None else prefix.shape[1]
    if prefix is not None and prefix.shape[0] != b:
        raise DimensionError(f"prefix batch {prefix.shape[0]} != {b} prompts")
    head = _head_ids(k)
    texts, sups = [], []
    for pr, an in zip(prompts, answers):
        ids = list(pr.ids)
        sup = [False] * len(ids)
        if an is not None:
            ids += list(an.ids) + [EOS]
            sup += [True] * (len(an.ids) + 1)
        texts.append(ids)
        sups.append(sup)
    lengths = np.array([len(head) + k + len(t) for t in texts])
    if lengths.max() > cfg.max_seq_len:
        raise LengthError(f"sequence of {int(lengths.max())} tokens exceeds the budget of {cfg.max_seq_len}")
    lt = max(len(t) for t in texts)
    text_ids = np.full((b, lt), EOS, dtype=np.int64)
    text_sup = np.zeros((b, lt), dtype=bool)
    for i, (t, s) in enumerate(zip(texts, sups)):
        text_ids[i, :len(t)] = t
        text_sup[i, :len(s)] = s
    table = params["lm.tok_embed"]
    head_arr = np.tile(np.array(head, dtype=np.int64), (b, 1))
    parts = [T.embedding_gather(table, head_arr)]
    if k:
        parts.append(prefix)
    if lt:
        parts.append(T.embedding_gather(table, text_ids))
    embedded = T.concat(parts, axis=1) if len(parts) > 1 else parts[0]
    ids = np.concatenate([head_arr, np.full((b, k), -1, dtype=np.int64), text_ids], axis=1)
    sup = np.concatenate([np.zeros((b, len(head) + k), dtype=bool), text_sup], axis=1)
    return AssembledBatch(embedded, ids, sup, lengths)


def assemble_sequence(
    event_tokens: Tensor | None,
    prompt: TokenSequence,
    answer: TokenSequence | None,
    params: ModelParams,
    cfg: ModelConfig,
) -> AssembledBatch:
    """Single-row :func:`assemble_batch`; ``event_tokens`` is ``[K, D_llm]`` or ``None``."""
    prefix = None
    if event_tokens is not None and event_tokens.shape[0] > 0:
        prefix = T.reshape(event_tokens, (1,) + event_tokens.shape)
    return assemble_batch(prefix, [prompt], [answer], params, cfg)


def forward_logits(embedded: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Causal LM over ``[B, L, D_llm]`` (or ``[L, D_llm]``) embeddings -> logits of the same rank."""
    single = embedded.ndim == 2
    x = T.reshape(embedded, (1,) + embedded.shape) if single else embedded
    l = x.shape[1]
    if l > cfg.max_seq_len:
        raise LengthError(f"sequence of {l} tokens exceeds the budget of {cfg.max_seq_len}")
    x = T.add(x, T.slice_(params["lm.pos"], slice(0, l)))
    for i in range(cfg.lm_depth):
        x = block(x, params, f"lm.blocks.{i}", cfg.lm_heads, causal=True)
        if not np.isfinite(x.data).all():
            raise NumericError(f"non-finite activations after LM layer {i}")
    x = T.layer_norm(x, params["lm.ln_f.g"], params["lm.ln_f.b"])
    logits = T.matmul(x, params["lm.head.w"])
    if not np.isfinite(logits.data).all():
        raise NumericError(f"non-finite logits at output head (layer {cfg.lm_depth})")
    return T.reshape(logits, logits.shape[1:]) if single else logits


def sequence_loss(batch: AssembledBatch, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Mean over rows of the masked next-token cross-entropy on supervised tokens."""
    logits = forward_logits(batch.embedded, params, cfg)
    l = logits.shape[1]
    pred = T.slice_(logits, (slice(None), slice(0, l - 1)))
    targets = np.where(batch.ids[:, 1:] >= 0, batch.ids[:, 1:], 0)
    return T.cross_entropy_with_logits(pred, targets, batch.supervised[:, 1:])


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class GenerationConfig:
    max_new: int = 48
    temperature: float = 0.0
    seed: int = 0


def generate_batch(
    prefix: Tensor | None,
    prompt: str,
    params: ModelParams,
    cfg: ModelConfig,
    gen: GenerationConfig = GenerationConfig(),
) -> list[str]:
    """Decode one answer per prefix row for a shared prompt; greedy at temperature 0."""
    b = 1 if prefix is None else prefix.shape[0]
    k = 0 if prefix is None else prefix.shape[1]
    rng = np.random.default_rng(gen.seed)
    prompt_ids = tokenize(prompt).ids
    out: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    with T.no_grad():
        for _ in range(gen.max_new):
            prompts = [TokenSequence(prompt_ids + o) for o in out]
            if len(_head_ids(k)) + k + len(prompts[0]) > cfg.max_seq_len:
                break
            batch = assemble_batch(prefix, prompts, None, params, cfg)
            logits = forward_logits(batch.embedded, params, cfg).data[:, -1, :]
            if gen.temperature == 0:
                nxt = logits.argmax(axis=-1)
            else:
                z = logits / gen.temperature
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                nxt = np.array([rng.choice(p.shape[-1], p=row) for row in p])
            for i in range(b):
                if done[i]:
                    out[i].append(EOS)
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                out[i].append(int(nxt[i]))
            if done.all():
                break
    texts = []
    for o in out:
        if EOS in o:
            o = o[:o.index(EOS)]
        texts.append(detokenize(o, skip_special=True))
    return texts


def generate(
    grid: VoxelGrid | np.ndarray | None,
    prompt: str,
    params: ModelParams,
    cfg: ModelConfig,
    gen: GenerationConfig = GenerationConfig(),
    use_aggregator: bool = True,
    use_adapter: bool = True,
) -> str:
    """Answer ``prompt`` about one (already normalised) grid."""
    prefix = None
    if grid is not None:
        data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
        with T.no_grad():
            prefix = event_prefix(data[None], params, cfg, use_aggregator, use_adapter)
    return generate_batch(prefix, prompt, params, cfg, gen)[0]


def iter_param_names(params: ModelParams, prefixes: Iterable[str]) -> list[str]:
    prefixes = tuple(prefixes)
    return [n for n in params.names() if any(n == p or n.startswith(p + ".") for p in prefixes)]
