"""``eventgpt`` command line: simulate, train, chat, eval, render, gradcheck.

Option precedence is built-in defaults, then the ``--config`` JSON file,
then explicit flags. Every config file is checked against the subcommand's
schema (print it with ``--print-schema``) before anything is written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import model as M
from .checkpoint import CheckpointError
from .evaluation import JudgeConfig, JudgeError, evaluate
from .events import EventFormatError, InvalidWindowError, bin_events, normalize_grid, read_stream, render_frame, write_pgm
from .gradcheck import end_to_end_check, run_op_suite
from .model import GenerationConfig, LengthError, ModelConfig, NumericError
from .optim import NonFiniteError
from .pretrain import PretrainConfig
from .sim import SimConfig, generate_dataset
from .tensor import DimensionError
from .training import ConfigError, PipelineConfig, StageConfig, StageFailure, default_pipeline, load_model, run_pipeline, save_model, train_stage

log = logging.getLogger("eventgpt")

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_NUMERIC = 6
EXIT_JUDGE = 7
EXIT_GRADCHECK = 8
EXIT_INTERNAL = 1

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string"}
_BOOL = {"type": "boolean"}


def _obj(props: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


def _fields_schema(cls, overrides: dict | None = None) -> dict:
    kinds = {"int": _INT, "float": _NUM, "str": _STR, "bool": _BOOL}
    props = {}
    for f in fields(cls):
        t = str(f.type).replace("typing.", "")
        props[f.name] = (overrides or {}).get(f.name) or kinds.get(t, {})
    return _obj(props)


_MODEL = _fields_schema(ModelConfig, {"pooling": {"enum": ["mean", "max"]}})
_WARM = _fields_schema(PretrainConfig, {"lm_corpus": {"enum": ["plain", "context"]}})
_STAGE = _obj({
    "stage": {"enum": [1, 2, 3]}, "manifest": _STR, "lr": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": {"type": "integer", "minimum": 1}, "max_steps": {"type": "integer", "minimum": 0},
    "seed": _INT, "trainable": {"type": "array", "items": _STR}, "use_adapter": _BOOL,
    "use_aggregator": _BOOL, "allow_override": _BOOL, "grad_clip": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0}, "schedule": {"enum": ["constant", "cosine"]},
}, ["stage"])
_SIM = _obj({
    "resolution": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 2, "maxItems": 2},
    "duration": {"type": "integer", "minimum": 1}, "render_rate": {"type": "number", "exclusiveMinimum": 0},
    "contrast_threshold": {"type": "number", "exclusiveMinimum": 0},
    "size_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 2, "maxItems": 2},
    "task_weights": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
    "noise_rate_hz": {"type": "number", "minimum": 0},
})
_JUDGE = _obj({"url": _STR, "model": _STR, "timeout": {"type": "number", "exclusiveMinimum": 0},
               "max_retries": {"type": "integer", "minimum": 0}, "max_in_flight": {"type": "integer", "minimum": 1},
               "backoff": {"type": "number", "minimum": 0}})
_COMMON = {"schema_version": {"const": SCHEMA_VERSION}, "seed": _INT, "out": _STR, "verbose": _INT}

SCHEMAS = {
    "simulate": _obj({**_COMMON, "n": {"type": "integer", "minimum": 1},
                      "split_ratios": {"type": "array", "items": {"type": "number", "minimum": 0},
                                       "minItems": 3, "maxItems": 3},
                      "sim": _SIM}),
    "train": _obj({**_COMMON, "manifest": _STR, "stage": {"enum": [1, 2, 3]}, "pipeline": _BOOL,
                   "checkpoint": _STR, "steps": {"type": "integer", "minimum": 0},
                   "scale": {"type": "number", "exclusiveMinimum": 0}, "model": _MODEL,
                   "warm_start": {"oneOf": [{"type": "null"}, _WARM]},
                   "stages": {"type": "array", "items": _STAGE, "maxItems": 3}}),
    "chat": _obj({**_COMMON, "checkpoint": _STR, "events": _STR, "temperature": {"type": "number", "minimum": 0},
                  "max_new": {"type": "integer", "minimum": 1}, "t0": {"type": "integer", "minimum": 0},
                  "t1": {"type": "integer", "minimum": 1}, "prompt": {"type": "array", "items": _STR}}),
    "eval": _obj({**_COMMON, "checkpoint": _STR, "manifest": _STR, "judge": _BOOL, "judge_config": _JUDGE,
                  "probes": {"type": "array", "items": {"enum": ["shape", "direction", "speed"]}}}),
    "render": _obj({**_COMMON, "events": _STR, "t0": {"type": "integer", "minimum": 0},
                    "t1": {"type": "integer", "minimum": 1}, "name": _STR}),
    "gradcheck": _obj({**_COMMON, "instances": {"type": "integer", "minimum": 1}}),
}

DEFAULTS = {
    "simulate": {"n": 100, "seed": 0, "split_ratios": [0.8, 0.1, 0.1], "sim": {}},
    "train": {"seed": 0, "scale": 1.0},
    "chat": {"seed": 0, "temperature": 0.0, "max_new": 48, "t0": 0},
    "eval": {"seed": 0, "judge": False},
    "render": {"name": "frame.pgm"},
    "gradcheck": {"seed": 0, "instances": 20},
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; explicit flags override its values")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=None)
    common.add_argument("--print-schema", action="store_true", help="print the config schema and exit")

    p = argparse.ArgumentParser(prog="eventgpt", description="Event-camera language model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a simulated dataset")
    s.add_argument("--n", type=int, default=None)

    s = sub.add_parser("train", parents=[common], help="train one stage or the full pipeline")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--stage", type=int, choices=(1, 2, 3), default=None)
    g.add_argument("--pipeline", action="store_true", default=None)
    s.add_argument("--manifest", default=None, help="training manifest (JSONL)")
    s.add_argument("--checkpoint", default=None, help="starting checkpoint for --stage")
    s.add_argument("--steps", type=int, default=None, help="override max_steps of every stage")
    s.add_argument("--scale", type=float, default=None, help="multiply the default step budgets")

    s = sub.add_parser("chat", parents=[common], help="ask questions about an event file")
    s.add_argument("checkpoint", nargs="?", default=None)
    s.add_argument("events", nargs="?", default=None)
    s.add_argument("--temperature", type=float, default=None)
    s.add_argument("--max-new", dest="max_new", type=int, default=None)
    s.add_argument("--t0", type=int, default=None)
    s.add_argument("--t1", type=int, default=None, help="window end (default: last event)")
    s.add_argument("--prompt", action="append", default=None, help="ask without reading stdin (repeatable)")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    s.add_argument("checkpoint", nargs="?", default=None)
    s.add_argument("manifest", nargs="?", default=None)
    s.add_argument("--judge", action="store_true", default=None,
                   help="also score answers with the endpoint in EVENTGPT_JUDGE_URL")

    s = sub.add_parser("render", parents=[common], help="render a polarity frame as PGM")
    s.add_argument("events", nargs="?", default=None)
    s.add_argument("--t0", type=int, default=None)
    s.add_argument("--t1", type=int, default=None)
    s.add_argument("--name", default=None, help="file name inside --out (default frame.pgm)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--instances", type=int, default=None)
    return p


def _validate(doc, command: str, where: str) -> None:
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, f"{where}: field {path}: {exc.message}") from None


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags, validating before returning."""
    opts = dict(DEFAULTS[args.command])
    if args.config:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise CliError(EXIT_MISSING, f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"{path}: invalid JSON: {exc}") from None
        _validate(doc, args.command, str(path))
        opts.update(doc)
    skip = {"command", "config", "print_schema"}
    opts.update({k: v for k, v in vars(args).items() if k not in skip and v is not None})
    _validate(opts, args.command, "options")
    return opts


def _need(opts: dict, *keys: str) -> None:
    for k in keys:
        if opts.get(k) in (None, ""):
            raise CliError(EXIT_USAGE, f"missing required option {k!r}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_simulate(opts: dict) -> int:
    _need(opts, "out")
    sim = dict(opts.get("sim", {}))
    for k in ("resolution", "size_range"):
        if k in sim:
            sim[k] = tuple(sim[k])
    try:
        cfg = SimConfig(**sim)
        paths = generate_dataset(opts["n"], opts["seed"], opts["out"], tuple(opts["split_ratios"]), cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def _pipeline_from(opts: dict) -> PipelineConfig:
    model = ModelConfig.from_dict(opts.get("model", {}))
    base = default_pipeline(opts["manifest"], opts["seed"], opts["scale"], model)
    if "warm_start" in opts:
        ws = opts["warm_start"]
        base.warm_start = None if ws is None else PretrainConfig(**{**base.warm_start.to_dict(), **ws})
    by_stage = {s["stage"]: s for s in opts.get("stages", [])}
    stages = []
    for st in base.stages:
        d = {**st.to_dict(), **by_stage.get(st.stage, {})}
        if "trainable" not in by_stage.get(st.stage, {}):
            d["trainable"] = None
        if "lr" not in by_stage.get(st.stage, {}):
            d["lr"] = None
        if opts.get("steps") is not None:
            d["max_steps"] = opts["steps"]
        stages.append(StageConfig.from_dict(d))
    base.stages = stages
    if base.warm_start is not None:
        base.warm_start.seed = opts["seed"]
    return base


def cmd_train(opts: dict) -> int:
    _need(opts, "out", "manifest")
    _existing(opts["manifest"], "manifest")
    if not opts.get("pipeline") and opts.get("stage") is None:
        raise CliError(EXIT_USAGE, "choose --stage 1|2|3 or --pipeline")
    try:
        pipe = _pipeline_from(opts)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = Path(opts["out"])
    if opts.get("pipeline"):
        _, reports = run_pipeline(pipe, out)
        for r in reports:
            print(f"stage {r.stage}: final loss {r.final_loss:.4f}, changed {sorted(r.changed_modules())}")
        print(f"final checkpoint: {out / 'stage3'}")
        return EXIT_OK
    st = next(s for s in pipe.stages if s.stage == opts["stage"])
    if opts.get("checkpoint"):
        params, cfg = load_model(_existing(opts["checkpoint"], "checkpoint"))
    else:
        cfg = pipe.model
        params = M.ModelParams.init(cfg, opts["seed"])
    params, rep = train_stage(st, params, cfg, abort_dir=out / f"stage{st.stage}.aborted")
    params.round_to_float32()
    rep.hashes_after = params.module_hashes()
    save_model(out / f"stage{st.stage}", params, cfg, {"stage": st.stage})
    (out / f"stage{st.stage}_report.json").write_text(json.dumps(rep.to_dict()))
    print(f"stage {st.stage}: final loss {rep.final_loss}, changed {sorted(rep.changed_modules())}")
    return EXIT_OK


def _chat_grid(opts: dict, cfg: ModelConfig):
    stream = read_stream(_existing(opts["events"], "events file"))
    if (stream.height, stream.width) != (cfg.image_side, cfg.image_side):
        raise CliError(EXIT_FORMAT, f"{opts['events']}: sensor {stream.width}x{stream.height} does not match "
                                    f"the model input side {cfg.image_side}")
    t0 = opts["t0"]
    t1 = opts.get("t1") or max(stream.duration, t0 + 1)
    raw = bin_events(stream, t0, t1, cfg.num_bins)
    return raw, normalize_grid(raw)


def cmd_chat(opts: dict, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    _need(opts, "checkpoint", "events")
    params, cfg = load_model(_existing(opts["checkpoint"], "checkpoint"))
    raw, grid = _chat_grid(opts, cfg)
    s, t = cfg.num_patches, cfg.num_bins
    print(f"event prefix: {s + t} tokens ({s} spatial + {t} temporal)", file=stdout)
    counts = raw.data.sum(axis=(1, 2, 3)).astype(int)
    cover = (raw.data.sum(axis=1) > 0).mean(axis=(1, 2))
    occ = ", ".join(f"bin {i}: {c} events / {f:.1%} px" for i, (c, f) in enumerate(zip(counts, cover)))
    print(f"bin occupancy: {occ}", file=stdout)
    with M.T.no_grad():
        prefix = M.event_prefix(grid.data[None], params, cfg)
    prompts = opts.get("prompt")
    turn = 0

    def answer(q: str) -> None:
        gen = GenerationConfig(max_new=opts["max_new"], temperature=opts["temperature"], seed=opts["seed"] + turn)
        print(f"assistant: {M.generate_batch(prefix, q, params, cfg, gen)[0]}", file=stdout, flush=True)

    if prompts:
        for q in prompts:
            print(f"user: {q}", file=stdout)
            answer(q)
            turn += 1
        return EXIT_OK
    while True:
        print("> ", end="", file=stdout, flush=True)
        line = stdin.readline()
        if not line or line.strip() in ("exit", "quit"):
            break
        if line.strip():
            answer(line.strip())
            turn += 1
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    _need(opts, "checkpoint", "manifest", "out")
    params, cfg = load_model(_existing(opts["checkpoint"], "checkpoint"))
    _existing(opts["manifest"], "manifest")
    judge = None
    if opts.get("judge"):
        judge = JudgeConfig.from_env("vqa", **opts.get("judge_config", {}))
    kw = {"probes": tuple(opts["probes"])} if "probes" in opts else {}
    report = evaluate(params, cfg, opts["manifest"], judge=judge, **kw)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_render(opts: dict) -> int:
    _need(opts, "events", "t0", "t1", "out")
    stream = read_stream(_existing(opts["events"], "events file"))
    img = render_frame(stream, opts["t0"], opts["t1"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / opts["name"], img)
    print(out / opts["name"])
    return EXIT_OK


def cmd_gradcheck(opts: dict) -> int:
    results = run_op_suite(opts["seed"], opts["instances"])
    worst_e2e, ok_e2e = end_to_end_check(opts["seed"], opts["instances"])
    ok = ok_e2e and all(passed for _, _, passed in results.values())
    for name, (err, tol, passed) in results.items():
        print(f"{'PASS' if passed else 'FAIL'} {name:<24} max rel err {err:.2e} (tol {tol:.0e})")
    print(f"{'PASS' if ok_e2e else 'FAIL'} {'end_to_end_loss':<24} max rel err {worst_e2e:.2e} (tol 1e-04)")
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        rows = {k: {"max_rel_error": e, "tolerance": t, "passed": p} for k, (e, t, p) in results.items()}
        rows["end_to_end_loss"] = {"max_rel_error": worst_e2e, "tolerance": 1e-4, "passed": ok_e2e}
        (out / "gradcheck.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    return EXIT_OK if ok else EXIT_GRADCHECK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "chat": cmd_chat, "eval": cmd_eval,
            "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_schema:
        print(json.dumps(SCHEMAS[args.command], indent=1, sort_keys=True))
        return EXIT_OK
    try:
        opts = resolve(args)
        level = logging.WARNING - 10 * int(opts.get("verbose") or 0)
        logging.basicConfig(level=max(level, logging.DEBUG), format="%(asctime)s %(name)s %(message)s")
        np.seterr(over="ignore")
        return COMMANDS[args.command](opts)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, LengthError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (EventFormatError, CheckpointError, InvalidWindowError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (StageFailure, NonFiniteError, NumericError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except JudgeError as exc:
        print(f"judge error: {exc}", file=sys.stderr)
        return EXIT_JUDGE


if __name__ == "__main__":
    sys.exit(main())
