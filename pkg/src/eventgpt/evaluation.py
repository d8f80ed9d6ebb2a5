"""Closed-vocabulary metrics and an optional external judge client."""

from __future__ import annotations

import json
import logging
import math
import os
import re
import string
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .model import GenerationConfig, ModelConfig, ModelParams
from .sim import DatasetRecord, vqa_turn
from .tensor import no_grad
from .tokenizer import tokenize
from .data import Sample, SampleSource

log = logging.getLogger(__name__)

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


class InputError(ValueError):
    pass


class JudgeError(RuntimeError):
    pass


def normalize_answer(s: str) -> str:
    """Lower-case, drop punctuation and articles, collapse whitespace."""
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match_qa(predictions: Sequence[str], references: Sequence[str]) -> float:
    if len(predictions) != len(references):
        raise InputError(f"{len(predictions)} predictions vs {len(references)} references")
    if not predictions:
        raise InputError("no predictions to score")
    hits = sum(normalize_answer(p) == normalize_answer(r) for p, r in zip(predictions, references))
    return hits / len(predictions)


@dataclass
class TaskMetrics:
    exact_match: float
    token_accuracy: float
    perplexity: float
    n: int
    judge_mean: float | None = None


@dataclass
class MetricReport:
    tasks: dict[str, TaskMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: asdict(v) for k, v in sorted(self.tasks.items())}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


# ---------------------------------------------------------------- teacher-forced metrics


def _teacher_forced(samples, params, cfg, use_aggregator=True, use_adapter=True):
    """Per-sample (correct count, supervised count, summed NLL) over answer tokens."""
    out = []
    with no_grad():
        for s in samples:
            prefix = None
            if s.grid is not None:
                prefix = M.event_prefix(s.grid[None].astype(np.float64), params, cfg, use_aggregator, use_adapter)
            b = M.assemble_batch(prefix, [s.prompt], [s.answer], params, cfg)
            logits = M.forward_logits(b.embedded, params, cfg).data[0, :-1]
            tgt = b.ids[0, 1:]
            m = b.supervised[0, 1:]
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll = -logp[m, tgt[m]]
            correct = (logits[m].argmax(axis=-1) == tgt[m]).sum()
            out.append((int(correct), int(m.sum()), float(nll.sum())))
    return out


def token_accuracy(samples, params: ModelParams, cfg: ModelConfig) -> float:
    if not samples:
        raise InputError("empty dataset")
    stats = _teacher_forced(samples, params, cfg)
    return sum(c for c, _, _ in stats) / sum(n for _, n, _ in stats)


def perplexity(samples, params: ModelParams, cfg: ModelConfig) -> float:
    """exp of the mean per-sequence masked loss, i.e. exp(loss_on_batch) over the same samples."""
    if not samples:
        raise InputError("empty dataset")
    stats = _teacher_forced(samples, params, cfg)
    return math.exp(float(np.mean([nll / n for _, n, nll in stats])))


# ---------------------------------------------------------------- probing


PROBES = ("shape", "direction", "speed")


def probe_answers(
    records: Sequence[DatasetRecord],
    source: SampleSource,
    params: ModelParams,
    cfg: ModelConfig,
    attribute: str,
    batch_size: int = 16,
) -> tuple[list[str], list[str]]:
    """Greedy answers to the ``attribute`` question for every record, with references."""
    preds, refs = [], []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        grids = np.stack([source.event_grid(r) for r in chunk]).astype(np.float64)
        turn = [vqa_turn(r.ground_truth, attribute) for r in chunk]
        with no_grad():
            prefix = M.event_prefix(grids, params, cfg)
        preds += M.generate_batch(prefix, turn[0][0]["text"], params, cfg, GenerationConfig(max_new=24))
        refs += [t[1]["text"] for t in turn]
    return preds, refs


def _greedy_answers(records, source, params, cfg, batch_size=16) -> list[str]:
    """Greedy answers to each record's own first user turn, batched by identical prompts."""
    out: dict[int, str] = {}
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.conversations[0]["text"], []).append(i)
    for prompt, idx in groups.items():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            grids = np.stack([source.event_grid(records[i]) for i in chunk]).astype(np.float64)
            with no_grad():
                prefix = M.event_prefix(grids, params, cfg)
            answers = M.generate_batch(prefix, prompt, params, cfg, GenerationConfig(max_new=64))
            out.update(zip(chunk, answers))
    return [out[i] for i in range(len(records))]


TASK_TEMPLATE = {"caption": "dc", "reasoning": "cr", "vqa": "vqa"}


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    manifest: str | os.PathLike,
    probes: Sequence[str] = PROBES,
    judge: "JudgeConfig | None" = None,
) -> MetricReport:
    """Metrics over a held-out manifest.

    Each task entry scores the records' own conversations: greedy exact match
    plus teacher-forced token accuracy and perplexity. Each
    ``vqa_<attribute>`` entry asks that attribute's question about every clip.
    With ``judge`` set, every task entry also gets the mean judge score of its
    greedy answers.
    """
    source = SampleSource(manifest, cfg)
    if not len(source):
        raise InputError(f"{manifest}: no records")
    report = MetricReport()
    by_task: dict[str, list[int]] = {}
    for i, r in enumerate(source.records):
        by_task.setdefault(r.task, []).append(i)
    for task, idx in sorted(by_task.items()):
        recs = [source.records[i] for i in idx]
        preds = _greedy_answers(recs, source, params, cfg)
        refs = [r.conversations[1]["text"] for r in recs]
        stats = _teacher_forced([source.sample(i, 3) for i in idx], params, cfg)
        acc = sum(c for c, _, _ in stats) / sum(n for _, n, _ in stats)
        ppl = math.exp(float(np.mean([nll / n for _, n, nll in stats])))
        m = TaskMetrics(exact_match_qa(preds, refs), acc, ppl, len(idx))
        if judge is not None:
            jc = JudgeConfig(**{**asdict(judge), "template": TASK_TEMPLATE[task]})
            items = [(r.conversations[0]["text"], ref, pred) for r, ref, pred in zip(recs, refs, preds)]
            m.judge_mean = float(np.mean(judge_many(jc, items)))
        report.tasks[task] = m
    for attr in probes:
        preds, refs = probe_answers(source.records, source, params, cfg, attr)
        samples = []
        for r in source.records:
            q, a = (t["text"] for t in vqa_turn(r.ground_truth, attr))
            samples.append(Sample(source.event_grid(r), tokenize(q), tokenize(a, supervised=True)))
        stats = _teacher_forced(samples, params, cfg)
        acc = sum(c for c, _, _ in stats) / sum(n for _, n, _ in stats)
        ppl = math.exp(float(np.mean([nll / n for _, n, nll in stats])))
        report.tasks[f"vqa_{attr}"] = TaskMetrics(exact_match_qa(preds, refs), acc, ppl, len(preds))
    return report


# ---------------------------------------------------------------- external judge


JUDGE_URL_ENV = "EVENTGPT_JUDGE_URL"
JUDGE_KEY_ENV = "EVENTGPT_JUDGE_KEY"

_RUBRIC = {
    "dc": "Rate how accurately and completely the description captures the key elements of the scene "
          "(objects, motion, notable details) compared with the reference description.",
    "cr": "Rate the logical coherence and correctness of the reasoning in the answer, and whether its "
          "conclusion is consistent with the reference answer.",
    "vqa": "Rate how precisely the answer responds to the question, judged against the reference answer.",
}

TEMPLATES = {
    tid: (
        "You are grading answers produced by a model that watches event-camera clips. "
        f"{rubric} Reply with a single integer from 1 (poor) to 5 (excellent).",
        "Question: {question}\nReference answer: {reference}\nModel answer: {prediction}\nScore:",
    )
    for tid, rubric in _RUBRIC.items()
}

_SCORE = re.compile(r"(?<![0-9])([1-5])(?![0-9])")


@dataclass
class JudgeConfig:
    url: str
    model: str = "judge"
    api_key: str = ""
    template: str = "vqa"
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 2
    backoff: float = 0.5

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise JudgeError(f"unknown template {self.template!r}; expected one of {sorted(TEMPLATES)}")
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise JudgeError("max_retries must be >= 0 and max_in_flight >= 1")

    @classmethod
    def from_env(cls, template: str = "vqa", **kw) -> "JudgeConfig":
        url = kw.pop("url", None) or os.environ.get(JUDGE_URL_ENV)
        if not url:
            raise JudgeError(f"no judge endpoint: set {JUDGE_URL_ENV}")
        return cls(url=url, api_key=os.environ.get(JUDGE_KEY_ENV, ""), template=template, **kw)

    def __repr__(self) -> str:
        return f"JudgeConfig(url={self.url!r}, model={self.model!r}, template={self.template!r}, api_key=<redacted>)"


def parse_score(reply: str) -> int:
    m = _SCORE.search(reply)
    if m is None:
        raise JudgeError(f"no score in 1..5 found in judge reply {reply[:80]!r}")
    return int(m.group(1))


def _post(cfg: JudgeConfig, body: dict) -> str:
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    log.info("judge request to %s (Authorization: %s): %s", cfg.url,
             "<redacted>" if cfg.api_key else "none", json.dumps(body))
    req = urllib.request.Request(cfg.url, data=json.dumps(body).encode(), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=cfg.timeout) as resp:
        raw = resp.read().decode("utf-8")
    log.info("judge response: %s", raw)
    data = json.loads(raw)
    try:
        return data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise JudgeError(f"malformed judge response: {raw[:120]!r}") from exc


def judge_score(
    cfg: JudgeConfig,
    question: str,
    reference: str,
    prediction: str,
    transport: Callable[[JudgeConfig, dict], str] = _post,
) -> int:
    """Score one answer 1..5 with the configured endpoint; raises :class:`JudgeError` rather than guess."""
    system, user = TEMPLATES[cfg.template]
    body = {"model": cfg.model, "messages": [
        {"role": "system", "content": system},
        {"role": "user", "content": user.format(question=question, reference=reference, prediction=prediction)},
    ]}
    last: Exception | None = None
    for attempt in range(cfg.max_retries + 1):
        if attempt:
            time.sleep(cfg.backoff * 2 ** (attempt - 1))
        try:
            return parse_score(transport(cfg, body))
        except (urllib.error.URLError, OSError, ValueError, JudgeError) as exc:
            last = exc
            log.warning("judge attempt %d/%d failed: %s", attempt + 1, cfg.max_retries + 1, exc)
    raise JudgeError(f"judge failed after {cfg.max_retries + 1} attempts: {last}") from last


def judge_many(
    cfg: JudgeConfig,
    items: Sequence[tuple[str, str, str]],
    transport: Callable[[JudgeConfig, dict], str] = _post,
) -> list[int]:
    """Scores for ``(question, reference, prediction)`` triples, at most ``max_in_flight`` at a time."""
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        return list(pool.map(lambda it: judge_score(cfg, *it, transport=transport), items))
