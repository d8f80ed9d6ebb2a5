import json
import math
from dataclasses import replace

import numpy as np
import pytest

from eventgpt import model as M
from eventgpt.checkpoint import load_checkpoint
from eventgpt.data import SampleSource
from eventgpt.model import TINY, ModelParams
from eventgpt.optim import NonFiniteError
from eventgpt.pretrain import PretrainConfig
from eventgpt.sim import SimConfig, generate_dataset
from eventgpt.tokenizer import VOCAB_SIZE
from eventgpt.training import (
    STAGE_TRAINABLE, ConfigError, PipelineConfig, StageConfig, StageFailure, SweepCell, build_freeze_mask,
    config_diff, default_stages, load_model, loss_on_batch, run_pipeline, save_model, sweep_nw, sweep_table,
    train_stage,
)

TINY_SIM = SimConfig(resolution=(32, 32), size_range=(8.0, 10.0), duration=200_000)
TINY_WARM = PretrainConfig(encoder_steps=3, encoder_batch=4, lm_steps=3, lm_batch=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return generate_dataset(24, 5, tmp_path_factory.mktemp("data"), cfg=TINY_SIM)


@pytest.fixture(scope="module")
def source(data):
    return SampleSource(data["train"], TINY)


def tiny_pipeline(manifest, steps=3, warm=TINY_WARM, seed=0):
    stages = [StageConfig(k, str(manifest), max_steps=steps, batch_size=2, seed=seed) for k in (1, 2, 3)]
    return PipelineConfig(TINY, stages, seed, warm)


def test_default_freeze_masks_follow_stage_table():
    p = ModelParams.init(TINY, 0)
    for stage, modules in STAGE_TRAINABLE.items():
        mask = build_freeze_mask(StageConfig(stage), p)
        assert {n.split(".")[0] for n, m in mask.items() if m} == set(modules)


def test_stage_learning_rates():
    assert [StageConfig(k).lr for k in (1, 2, 3)] == [2e-4, 2e-4, 2e-5]


def test_unknown_prefix_lists_valid_ones():
    cfg = StageConfig(1, trainable=("projektor",), allow_override=True)
    with pytest.raises(ConfigError, match="projektor.*adapter"):
        build_freeze_mask(cfg, ModelParams.init(TINY, 0))


def test_overriding_trainable_set_requires_opt_in():
    with pytest.raises(ConfigError, match="allow_override"):
        StageConfig(1, trainable=("projector", "lm"))
    assert StageConfig(1, trainable=("projector", "lm"), allow_override=True).trainable == ("projector", "lm")


@pytest.mark.parametrize("bad", [dict(stage=0), dict(stage=4), dict(stage=1, lr=0.0), dict(stage=1, batch_size=0),
                                 dict(stage=1, max_steps=-1), dict(stage=1, schedule="step")])
def test_invalid_stage_configs(bad):
    with pytest.raises(ConfigError):
        StageConfig(**bad)


def test_zero_steps_changes_nothing(source):
    p = ModelParams.init(TINY, 0)
    before = p.module_hashes()
    p, rep = train_stage(StageConfig(3, max_steps=0), p, TINY, source)
    assert rep.losses == [] and rep.final_loss is None
    assert p.module_hashes() == before


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_each_stage_changes_exactly_its_modules(source, stage):
    p = ModelParams.init(TINY, 0)
    p, rep = train_stage(StageConfig(stage, max_steps=2, batch_size=2), p, TINY, source)
    assert rep.changed_modules() == set(STAGE_TRAINABLE[stage])


def test_optimizer_never_sees_frozen_parameters(source, monkeypatch):
    seen = []
    import eventgpt.training as tr
    real = tr.adamw_step

    def spy(params, grads, state):
        seen.append(set(grads))
        return real(params, grads, state)

    monkeypatch.setattr(tr, "adamw_step", spy)
    train_stage(StageConfig(2, max_steps=2, batch_size=2), ModelParams.init(TINY, 0), TINY, source)
    assert seen and all(names == {"adapter.w", "adapter.b"} for names in seen)


def test_training_is_deterministic(source):
    runs = []
    for _ in range(2):
        p, rep = train_stage(StageConfig(3, max_steps=3, batch_size=2, seed=4), ModelParams.init(TINY, 2), TINY, source)
        runs.append((p.to_arrays(), rep.losses))
    (a, la), (b, lb) = runs
    assert la == lb
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_initial_loss_near_uniform(source):
    p = ModelParams.init(TINY, 0)
    for stage in (1, 3):
        loss = loss_on_batch(range(8), source, p, stage).item()
        assert abs(loss - math.log(VOCAB_SIZE)) < 0.5


def test_duplicated_batch_has_same_loss(source):
    p = ModelParams.init(TINY, 0)
    one = loss_on_batch([3], source, p, 3).item()
    assert loss_on_batch([3, 3, 3], source, p, 3).item() == pytest.approx(one, abs=1e-12)


def test_single_record_overfit(source, tmp_path):
    from eventgpt.evaluation import perplexity, token_accuracy
    one = SampleSource(source.manifest, TINY)
    one.records = one.records[:1]
    p, rep = train_stage(StageConfig(3, lr=3e-3, batch_size=1, max_steps=300), ModelParams.init(TINY, 0), TINY, one)
    assert rep.losses[-1] < 0.05
    rec = one.records[0]
    q, a = (c["text"] for c in rec.conversations)
    assert M.generate(one.event_grid(rec), q, p, TINY) == a
    samples = [one.sample(0, 3)]
    assert token_accuracy(samples, p, TINY) == 1.0
    assert perplexity(samples, p, TINY) < 1.05


def test_non_finite_loss_aborts_and_saves_last_good(source, tmp_path):
    p = ModelParams.init(TINY, 0)
    p["lm.head.w"].data[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="step 0 of stage 3"):
        train_stage(StageConfig(3, max_steps=2, batch_size=2), p, TINY, source, abort_dir=tmp_path / "abort")
    saved = load_checkpoint(tmp_path / "abort")
    assert set(saved) == set(p.names())


def test_pipeline_checkpoints_and_freeze_contract(data, tmp_path):
    params, reports = run_pipeline(tiny_pipeline(data["train"]), tmp_path)
    for name in ("init", "warm_start", "stage1", "stage2", "stage3"):
        assert (tmp_path / name / "config.json").exists()
    assert [r.stage for r in reports] == [0, 1, 2, 3]
    assert reports[0].changed_modules() == {"encoder", "lm"}
    for r in reports[1:]:
        assert r.changed_modules() == set(STAGE_TRAINABLE[r.stage])
    p3, cfg = load_model(tmp_path / "stage3")
    assert cfg == TINY and p3.module_hashes() == params.module_hashes()
    json.loads((tmp_path / "stage2_report.json").read_text())


def test_resumed_run_matches_chained_run(data, tmp_path):
    pipe = tiny_pipeline(data["train"])
    full, _ = run_pipeline(pipe, tmp_path / "a")
    resumed, reports = run_pipeline(pipe, tmp_path / "b", resume_from=tmp_path / "a" / "stage1", start_stage=2)
    assert [r.stage for r in reports] == [2, 3]
    a, b = full.to_arrays(), resumed.to_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_failure_in_stage_two_keeps_stage_one(data, tmp_path):
    pipe = tiny_pipeline(data["train"], warm=None)
    pipe.stages[1] = replace(pipe.stages[1], manifest=str(tmp_path / "missing.jsonl"))
    with pytest.raises(StageFailure) as info:
        run_pipeline(pipe, tmp_path / "run")
    assert info.value.stage == 2
    p, _ = load_model(tmp_path / "run" / "stage1")
    assert set(p.names()) == set(ModelParams.init(TINY, 0).names())
    assert not (tmp_path / "run" / "stage2").exists()


def test_pipeline_rejects_out_of_order_stages(data, tmp_path):
    pipe = tiny_pipeline(data["train"])
    pipe.stages = pipe.stages[::-1]
    with pytest.raises(ConfigError, match="increasing"):
        run_pipeline(pipe, tmp_path)


def test_pipeline_config_round_trip(data):
    pipe = tiny_pipeline(data["train"])
    again = PipelineConfig.from_dict(json.loads(json.dumps(pipe.to_dict())))
    assert again.to_dict() == pipe.to_dict() and again.config_hash() == pipe.config_hash()
    assert config_diff(pipe.to_dict(), replace(pipe, model=replace(TINY, num_bins=7)).to_dict()) == ["model.num_bins"]


def test_save_load_round_trip_and_mismatch(tmp_path):
    p = ModelParams.init(TINY, 3)
    save_model(tmp_path / "m", p, TINY)
    q, cfg = load_model(tmp_path / "m")
    assert cfg == TINY and q.module_hashes() == p.module_hashes()
    (tmp_path / "m" / "config.json").write_text(replace(TINY, lm_dim=16, lm_heads=2).to_json())
    with pytest.raises(ConfigError, match="shape"):
        load_model(tmp_path / "m")


def test_default_stage_budgets_scale():
    full = default_stages("m.jsonl")
    half = default_stages("m.jsonl", scale=0.5)
    assert [s.max_steps for s in half] == [round(s.max_steps / 2) for s in full]
    assert all(s.max_steps >= 1 for s in default_stages("m.jsonl", scale=1e-6))


def test_sweep_cells_differ_only_in_num_bins(data, tmp_path):
    base = tiny_pipeline(data["train"], steps=1)
    cells = sweep_nw([1, 3], base, tmp_path, data["test"])
    assert [c.error for c in cells] == [None, None]
    cfgs = [json.loads((tmp_path / f"nw{v}" / "pipeline.json").read_text()) for v in (1, 3)]
    assert config_diff(*cfgs) == ["model.num_bins"]
    rows = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert rows[0].split("\t")[0] == "N_w" and len(rows) == 3
    assert all(r.endswith("ok") for r in rows[1:])


def test_sweep_records_failing_cell_and_continues(data, tmp_path):
    base = tiny_pipeline(data["train"], steps=1, warm=None)
    base.stages[2] = replace(base.stages[2], manifest=str(tmp_path / "nope.jsonl"))
    cells = sweep_nw([2], base, tmp_path, data["test"])
    assert cells[0].error is not None and "StageFailure" in cells[0].error
    assert "failed" in sweep_table(cells)
    with pytest.raises(ConfigError):
        sweep_nw([0], base, tmp_path, data["test"])


def test_sweep_table_formats_missing_metrics():
    table = sweep_table([SweepCell(5, "h", {"caption": {"exact_match": 0.5}})])
    assert table.splitlines()[1].split("\t")[:3] == ["5", "0.5000", "-"]
