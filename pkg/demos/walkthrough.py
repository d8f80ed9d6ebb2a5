"""End-to-end tour on a tiny configuration: simulate, inspect, train, chat.

Runs in a few seconds on one core. Models trained here are far too small to
answer well; the point is to see every piece wired together. For the
desk-scale run use ``eventgpt train --pipeline`` with the default model.

    python3 demos/walkthrough.py [workdir]
"""

import sys
import tempfile
from pathlib import Path


from eventgpt import model as M
from eventgpt.data import SampleSource
from eventgpt.evaluation import evaluate
from eventgpt.events import bin_events, read_stream, render_frame, write_pgm
from eventgpt.model import TINY
from eventgpt.pretrain import PretrainConfig
from eventgpt.sim import SimConfig, generate_dataset, read_manifest
from eventgpt.training import PipelineConfig, StageConfig, run_pipeline


def main(work: Path) -> None:
    # 1. a small 32x32 dataset so the tiny model can read it
    sim = SimConfig(resolution=(32, 32), size_range=(8.0, 10.0), duration=200_000)
    paths = generate_dataset(40, seed=3, out_dir=work / "data", cfg=sim)
    rec = read_manifest(paths["train"])[0]
    print(f"record {rec.id}: task={rec.task}")
    for turn in rec.conversations:
        print(f"  {turn['role']}: {turn['text']}")

    # 2. the raw events, a rendered frame and the per-bin counts the encoder sees
    stream = read_stream(work / "data" / rec.events)
    print(f"{len(stream)} events over {stream.duration} us")
    write_pgm(work / "frame.pgm", render_frame(stream, 0, stream.duration))
    grid = bin_events(stream, 0, stream.duration, TINY.num_bins)
    print("events per bin:", grid.data.sum(axis=(1, 2, 3)).astype(int).tolist())

    # 3. warm-start plus the three stages, a handful of steps each
    stages = [StageConfig(k, str(paths["train"]), max_steps=20, batch_size=4) for k in (1, 2, 3)]
    warm = PretrainConfig(encoder_steps=20, encoder_batch=8, lm_steps=20, lm_batch=4)
    params, reports = run_pipeline(PipelineConfig(TINY, stages, 0, warm), work / "run")
    for r in reports:
        name = "warm-start" if r.stage == 0 else f"stage {r.stage}"
        print(f"{name}: loss {r.losses[0]:.3f} -> {r.final_loss:.3f}, changed {sorted(r.changed_modules())}")

    # 4. ask about a held-out clip
    source = SampleSource(paths["test"], TINY)
    clip = source.records[0]
    for q in ("What shape is moving?", "Which direction is the object moving?"):
        print(f"Q: {q}\nA: {M.generate(source.event_grid(clip), q, params, TINY)}")
    print(f"truth: {clip.ground_truth.shape}, {clip.ground_truth.direction}")

    # 5. held-out metrics
    print(evaluate(params, TINY, paths["test"]).to_json())


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="eventgpt-")))
