"""Staged training: freeze masks, the per-stage loop, the three-stage pipeline and the N_w sweep."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Sample, SampleSource
from .evaluation import evaluate
from .model import ModelConfig, ModelParams, NumericError
from .optim import NonFiniteError, OptimizerState, adamw_step, clip_grad_norm
from .pretrain import PretrainConfig, pretrain_encoder, pretrain_lm
from .tensor import DegenerateBatchError, Tensor

log = logging.getLogger(__name__)

STAGE_TRAINABLE = {1: ("projector",), 2: ("adapter",), 3: ("encoder", "projector", "adapter", "lm")}
STAGE_LR = {1: 2e-4, 2: 2e-4, 3: 2e-5}


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageConfig:
    """One training stage: 1 aligns the projector on image frames, 2 aligns the
    adapter on event grids, 3 tunes everything on event conversations."""

    stage: int
    manifest: str = ""
    lr: float | None = None
    batch_size: int = 8
    max_steps: int = 100
    seed: int = 0
    trainable: tuple[str, ...] | None = None
    use_adapter: bool | None = None
    use_aggregator: bool | None = None
    allow_override: bool = False
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    schedule: str = "constant"

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ConfigError(f"stage must be one of {sorted(STAGE_TRAINABLE)}, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_LR[self.stage]
        if self.trainable is None:
            self.trainable = STAGE_TRAINABLE[self.stage]
        self.trainable = tuple(self.trainable)
        if self.use_adapter is None:
            self.use_adapter = self.stage >= 2
        if self.use_aggregator is None:
            self.use_aggregator = self.stage >= 2
        if not self.allow_override and set(self.trainable) != set(STAGE_TRAINABLE[self.stage]):
            raise ConfigError(
                f"stage {self.stage} must train {sorted(STAGE_TRAINABLE[self.stage])}, got {sorted(self.trainable)}"
                " (set allow_override to change)"
            )
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StageConfig":
        d = dict(d)
        if "trainable" in d and d["trainable"] is not None:
            d["trainable"] = tuple(d["trainable"])
        return cls(**d)

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant" or self.max_steps <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / (self.max_steps - 1)))


@dataclass
class TrainReport:
    stage: int
    losses: list[float] = field(default_factory=list)
    final_loss: float | None = None
    wall_time: float = 0.0
    hashes_before: dict[str, str] = field(default_factory=dict)
    hashes_after: dict[str, str] = field(default_factory=dict)
    trainable: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def changed_modules(self) -> set[str]:
        return {m for m in self.hashes_before if self.hashes_before[m] != self.hashes_after.get(m)}


# ---------------------------------------------------------------- freeze masks


def build_freeze_mask(cfg: StageConfig, params: ModelParams) -> dict[str, bool]:
    """True for every parameter whose dotted name starts with a trainable prefix."""
    names = params.names()
    for prefix in cfg.trainable:
        if not M.iter_param_names(params, [prefix]):
            valid = sorted({n.split(".")[0] for n in names})
            raise ConfigError(f"trainable prefix {prefix!r} matches no parameter; valid prefixes: {valid}")
    chosen = set(M.iter_param_names(params, cfg.trainable))
    return {n: n in chosen for n in names}


def loss_on_samples(
    samples: Sequence[Sample],
    params: ModelParams,
    cfg: ModelConfig,
    use_aggregator: bool,
    use_adapter: bool,
) -> Tensor:
    """Mean over samples of the per-sequence masked cross-entropy."""
    if not samples:
        raise DegenerateBatchError("empty batch")
    if samples[0].grid is None:
        prefix = None
    else:
        grids = np.stack([s.grid for s in samples])
        prefix = M.event_prefix(grids, params, cfg, use_aggregator, use_adapter)
    batch = M.assemble_batch(prefix, [s.prompt for s in samples], [s.answer for s in samples], params, cfg)
    return M.sequence_loss(batch, params, cfg)


def loss_on_batch(
    records: Sequence[int],
    source: SampleSource,
    params: ModelParams,
    stage: StageConfig | int,
) -> Tensor:
    """Loss over the records at ``records`` (indices into ``source``) as seen by ``stage``."""
    st = stage if isinstance(stage, StageConfig) else StageConfig(stage)
    samples = [source.sample(i, st.stage) for i in records]
    return loss_on_samples(samples, params, source.cfg, st.use_aggregator, st.use_adapter)


# ---------------------------------------------------------------- training


def _batch_order(n: int, batch: int, steps: int, seed: int, stage: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, stage, 0xBA7C])
    idx: list[int] = []
    out = []
    for _ in range(steps):
        while len(idx) < batch:
            idx.extend(rng.permutation(n).tolist())
        out.append(np.array(idx[:batch]))
        idx = idx[batch:]
    return out


def train_stage(
    cfg: StageConfig,
    params: ModelParams,
    model_cfg: ModelConfig,
    source: SampleSource | None = None,
    abort_dir: str | os.PathLike | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run ``cfg.max_steps`` AdamW steps on the parameters the stage unfreezes.

    ``params`` is updated in place and returned. Frozen parameters are never
    handed to the optimizer, so they keep their exact bytes. On a non-finite
    loss the last good parameters are written to ``abort_dir`` (if given) and
    :class:`NonFiniteError` is raised naming the step.
    """
    mask = build_freeze_mask(cfg, params)
    report = TrainReport(cfg.stage, hashes_before=params.module_hashes(),
                         trainable=[n for n, m in mask.items() if m])
    t0 = time.perf_counter()
    if cfg.max_steps > 0:
        if source is None:
            source = SampleSource(cfg.manifest, model_cfg)
        if len(source) == 0:
            raise DegenerateBatchError(f"{cfg.manifest}: no records")
        state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        train_names = [n for n, m in mask.items() if m]
        for step, idx in enumerate(_batch_order(len(source), cfg.batch_size, cfg.max_steps, cfg.seed, cfg.stage)):
            params.zero_grad()
            try:
                loss = loss_on_batch(idx, source, params, cfg)
                value = loss.item()
                cause = None
            except NumericError as exc:
                value, cause = math.nan, exc
            if not math.isfinite(value):
                if abort_dir is not None:
                    save_checkpoint(abort_dir, params.to_arrays(), {"aborted_at_step": step})
                raise NonFiniteError(f"non-finite loss at step {step} of stage {cfg.stage}") from cause
            loss.backward()
            grads = {n: params[n].grad for n in train_names if params[n].grad is not None}
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
            state.lr = cfg.lr_at(step)
            adamw_step(params.tensors, grads, state)
            report.losses.append(value)
            if step % 50 == 0:
                log.info("stage %d step %d loss %.4f", cfg.stage, step, value)
        params.zero_grad()
    report.final_loss = report.losses[-1] if report.losses else None
    report.wall_time = time.perf_counter() - t0
    report.hashes_after = params.module_hashes()
    return params, report


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineConfig:
    """Model shape, initial seed, optional backbone warm-start and the three stages.

    ``warm_start`` stands in for the pretrained vision encoder and language
    model; it runs once on the stage-1 manifest before stage 1 and is saved
    as its own checkpoint. ``None`` starts stage 1 from random weights.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    stages: list[StageConfig] = field(default_factory=list)
    init_seed: int = 0
    warm_start: PretrainConfig | None = field(default_factory=PretrainConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "init_seed": self.init_seed,
                "warm_start": None if self.warm_start is None else self.warm_start.to_dict(),
                "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        ws = d.get("warm_start", {})
        return cls(ModelConfig.from_dict(d.get("model", {})),
                   [StageConfig.from_dict(s) for s in d.get("stages", [])],
                   int(d.get("init_seed", 0)),
                   None if ws is None else PretrainConfig.from_dict(ws))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def default_stages(train_manifest: str, seed: int = 0, scale: float = 1.0, batch_size: int = 8) -> list[StageConfig]:
    """Desk-scale budgets at the stage learning rates 2e-4 / 2e-4 / 2e-5."""

    def n(steps):
        return max(1, int(round(steps * scale)))

    return [
        StageConfig(1, train_manifest, max_steps=n(400), batch_size=batch_size, seed=seed),
        StageConfig(2, train_manifest, max_steps=n(400), batch_size=batch_size, seed=seed),
        StageConfig(3, train_manifest, max_steps=n(800), batch_size=batch_size, seed=seed),
    ]


def default_pipeline(train_manifest: str, seed: int = 0, scale: float = 1.0,
                     model: ModelConfig | None = None) -> PipelineConfig:
    ws = PretrainConfig(seed=seed)
    ws.encoder_steps = max(1, int(round(ws.encoder_steps * scale)))
    ws.lm_steps = max(1, int(round(ws.lm_steps * scale)))
    return PipelineConfig(model or ModelConfig(), default_stages(train_manifest, seed, scale), seed, ws)


def save_model(directory: str | os.PathLike, params: ModelParams, cfg: ModelConfig, extra: Mapping | None = None) -> Path:
    d = save_checkpoint(directory, params.to_arrays(), extra)
    (Path(directory) / "config.json").write_text(cfg.to_json())
    return d


def load_model(directory: str | os.PathLike) -> tuple[ModelParams, ModelConfig]:
    d = Path(directory)
    try:
        cfg = ModelConfig.from_dict(json.loads((d / "config.json").read_text()))
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{d / 'config.json'}: {exc}") from exc
    arrays = load_checkpoint(d)
    expected = ModelParams.init(cfg, 0)
    if set(arrays) != set(expected.names()):
        missing = sorted(set(expected.names()) - set(arrays))
        extra = sorted(set(arrays) - set(expected.names()))
        raise ConfigError(f"{d}: checkpoint does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, a in arrays.items():
        if a.shape != expected[name].shape:
            raise ConfigError(f"{d}: {name} has shape {a.shape}, config implies {expected[name].shape}")
    return ModelParams.from_arrays(arrays), cfg


def run_warm_start(
    params: ModelParams, cfg: ModelConfig, source: SampleSource, pc: PretrainConfig
) -> TrainReport:
    """Encoder then language-model warm-start; the projector and adapter stay at init."""
    report = TrainReport(0, hashes_before=params.module_hashes(),
                         trainable=M.iter_param_names(params, ["encoder", "lm"]))
    enc = pretrain_encoder(params, cfg, pc)
    lm = pretrain_lm(params, cfg, source, pc)
    params.round_to_float32()
    report.losses = enc.losses + lm.losses
    report.final_loss = report.losses[-1] if report.losses else None
    report.wall_time = enc.wall_time + lm.wall_time
    report.hashes_after = params.module_hashes()
    return report


def run_pipeline(
    pipeline: PipelineConfig,
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
    start_stage: int | None = None,
) -> tuple[ModelParams, list[TrainReport]]:
    """Run the stages in order, checkpointing to ``out_dir/stage{k}`` after each.

    Fresh runs save ``init`` and, when configured, ``warm_start`` first. With
    ``resume_from``, parameters come from that checkpoint and only stages
    numbered ``>= start_stage`` run. Parameters are snapped to float32 at every
    stage boundary, so a resumed run sees exactly the values the chained run did.
    """
    out = Path(out_dir)
    stages = list(pipeline.stages)
    if [s.stage for s in stages] != sorted({s.stage for s in stages}):
        raise ConfigError(f"stages must be distinct and in increasing order, got {[s.stage for s in stages]}")
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline.model
    if resume_from is not None:
        params, saved = load_model(resume_from)
        if saved != cfg:
            raise ConfigError(f"{resume_from}: model config differs from the pipeline's")
        stages = [s for s in stages if start_stage is None or s.stage >= start_stage]
    else:
        params = ModelParams.init(cfg, pipeline.init_seed)
        save_model(out / "init", params, cfg)
    (out / "pipeline.json").write_text(json.dumps(pipeline.to_dict(), indent=1, sort_keys=True))
    reports = []
    sources: dict[str, SampleSource] = {}

    def source_for(manifest: str) -> SampleSource:
        if manifest not in sources:
            sources[manifest] = SampleSource(manifest, cfg)
        return sources[manifest]

    if resume_from is None and pipeline.warm_start is not None and stages:
        try:
            rep = run_warm_start(params, cfg, source_for(stages[0].manifest), pipeline.warm_start)
        except Exception as exc:  # noqa: BLE001 - rewrapped with the stage id
            raise StageFailure(0, exc) from exc
        save_model(out / "warm_start", params, cfg, {"stage": 0})
        (out / "warm_start_report.json").write_text(json.dumps(rep.to_dict()))
        reports.append(rep)
    for st in stages:
        try:
            src = source_for(st.manifest) if st.max_steps > 0 else None
            params, rep = train_stage(st, params, cfg, src, abort_dir=out / f"stage{st.stage}.aborted")
        except Exception as exc:  # noqa: BLE001 - rewrapped with the stage id
            raise StageFailure(st.stage, exc) from exc
        params.round_to_float32()
        rep.hashes_after = params.module_hashes()
        save_model(out / f"stage{st.stage}", params, cfg, {"stage": st.stage})
        (out / f"stage{st.stage}_report.json").write_text(json.dumps(rep.to_dict()))
        reports.append(rep)
    return params, reports


# ---------------------------------------------------------------- N_w sweep


SWEEP_COLUMNS = ("caption", "reasoning", "vqa", "vqa_shape", "vqa_direction", "vqa_speed")


@dataclass
class SweepCell:
    num_bins: int
    config_hash: str
    metrics: dict | None = None
    error: str | None = None
    wall_time: float = 0.0


def config_diff(a: Mapping, b: Mapping, prefix: str = "") -> list[str]:
    """Dotted paths at which two nested config dicts differ."""
    out = []
    for k in sorted(set(a) | set(b)):
        path = f"{prefix}{k}"
        va, vb = a.get(k), b.get(k)
        if isinstance(va, Mapping) and isinstance(vb, Mapping):
            out += config_diff(va, vb, path + ".")
        elif isinstance(va, list) and isinstance(vb, list) and len(va) == len(vb) and \
                all(isinstance(x, Mapping) for x in va + vb):
            for i, (x, y) in enumerate(zip(va, vb)):
                out += config_diff(x, y, f"{path}.{i}.")
        elif va != vb:
            out.append(path)
    return out


def _sweep_cell(v: int, base: PipelineConfig, out_dir: str, eval_manifest: str) -> SweepCell:
    pipe = replace(base, model=replace(base.model, num_bins=v))
    cell = SweepCell(v, pipe.config_hash())
    t0 = time.perf_counter()
    try:
        params, _ = run_pipeline(pipe, Path(out_dir) / f"nw{v}")
        report = evaluate(params, pipe.model, eval_manifest)
        cell.metrics = report.to_dict()
    except Exception as exc:  # noqa: BLE001 - recorded per cell, sweep continues
        log.exception("N_w=%d failed", v)
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.wall_time = time.perf_counter() - t0
    return cell


def sweep_nw(
    values: Sequence[int],
    base: PipelineConfig,
    out_dir: str | os.PathLike,
    eval_manifest: str | os.PathLike,
    workers: int = 1,
) -> list[SweepCell]:
    """Full pipeline plus evaluation per ``N_w``; writes ``sweep.json`` and ``sweep.tsv``.

    Cells share every seed and budget, so configs differ only in
    ``model.num_bins``. A failing cell is recorded and the sweep moves on.
    """
    if not values or any(int(v) < 1 for v in values):
        raise ConfigError(f"N_w values must all be >= 1, got {list(values)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = [(int(v), base, str(out), str(eval_manifest)) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, *zip(*args)))
    else:
        cells = [_sweep_cell(*a) for a in args]
    (out / "sweep.json").write_text(json.dumps([asdict(c) for c in cells], indent=1, sort_keys=True))
    (out / "sweep.tsv").write_text(sweep_table(cells))
    return cells


def sweep_table(cells: Sequence[SweepCell]) -> str:
    """Rows per N_w, exact-match columns per task, plus status."""
    lines = ["\t".join(("N_w",) + SWEEP_COLUMNS + ("status",))]
    for c in cells:
        vals = []
        for col in SWEEP_COLUMNS:
            m = (c.metrics or {}).get(col)
            vals.append("-" if m is None else f"{m['exact_match']:.4f}")
        lines.append("\t".join([str(c.num_bins)] + vals + ["ok" if c.error is None else f"failed: {c.error}"]))
    return "\n".join(lines) + "\n"
