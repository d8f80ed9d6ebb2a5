"""Manifest records as model inputs: event grids, stage-1 image frames and text."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import model as M
from .events import bin_events, normalize_grid, read_stream
from .model import ModelConfig
from .sim import DatasetRecord, read_manifest, render_intensity
from .tokenizer import TokenSequence, tokenize


@dataclass
class Sample:
    grid: np.ndarray | None      # [T, C, H, W] model input, or None for text-only
    prompt: TokenSequence
    answer: TokenSequence


def image_caption(record: DatasetRecord) -> tuple[str, str]:
    return "Describe the image.", f"A {record.meta['shape']}."


class SampleSource:
    """Turns manifest records into model inputs for a given stage, caching grids."""

    def __init__(self, manifest: str | os.PathLike, model_cfg: ModelConfig):
        self.manifest = Path(manifest)
        self.root = self.manifest.parent
        self.records = read_manifest(self.manifest)
        self.cfg = model_cfg
        self._events: dict[str, np.ndarray] = {}
        self._images: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    def event_grid(self, rec: DatasetRecord) -> np.ndarray:
        g = self._events.get(rec.id)
        if g is None:
            g = load_event_grid(self.root / rec.events, rec.meta, self.cfg).astype(np.float32)
            self._events[rec.id] = g
        return g

    def image_grid(self, rec: DatasetRecord) -> np.ndarray:
        g = self._images.get(rec.id)
        if g is None:
            spec = rec.ground_truth.spec
            img = render_intensity(spec, spec.duration / 2)
            g = M.image_to_grid(img, self.cfg.channels).astype(np.float32)
            self._images[rec.id] = g
        return g

    def sample(self, i: int, stage: int) -> Sample:
        rec = self.records[i]
        if stage == 1:
            q, a = image_caption(rec)
            return Sample(self.image_grid(rec), tokenize(q), tokenize(a, supervised=True))
        conv = rec.conversations
        q, a = conv[0]["text"], conv[1]["text"]
        return Sample(self.event_grid(rec), tokenize(q), tokenize(a, supervised=True))


def load_event_grid(path: str | os.PathLike, meta: Mapping, cfg: ModelConfig) -> np.ndarray:
    """Read an event file and bin its full clip into a normalised ``[N_w, 2, H, W]`` grid."""
    s = read_stream(path)
    if (s.height, s.width) != (cfg.image_side, cfg.image_side):
        raise M.DimensionError(
            f"{path}: sensor {s.width}x{s.height} does not match model input side {cfg.image_side}"
        )
    return normalize_grid(bin_events(s, 0, int(meta["duration"]), cfg.num_bins)).data
