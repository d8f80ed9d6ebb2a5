import numpy as np
import pytest

from eventgpt.data import SampleSource
from eventgpt.model import TINY, ModelParams
from eventgpt.pretrain import (
    PretrainConfig, bin_targets, difference_frame, lm_corpus, pretrain_encoder, pretrain_lm, shape_frame, slot_code,
)
from eventgpt.sim import SHAPES, SceneSpec, SimConfig, generate_dataset, simulate_events
from eventgpt.events import bin_events, normalize_grid
from eventgpt.tokenizer import detokenize

SIM = SimConfig(resolution=(32, 32), size_range=(8.0, 10.0), duration=200_000)


@pytest.fixture(scope="module")
def source(tmp_path_factory):
    paths = generate_dataset(12, 4, tmp_path_factory.mktemp("d"), cfg=SIM)
    return SampleSource(paths["train"], TINY)


def test_difference_frame_matches_simulated_bin():
    spec = SceneSpec("square", 12.0, (40.0, 0.0), (20.0, 30.0))
    frame = difference_frame(spec, 100_000, 200_000)
    grid = normalize_grid(bin_events(simulate_events(spec), 100_000, 200_000, 1)).data[0]
    # a bright square moving east: new pixels brighten on its leading (east) side
    assert frame[0].any() and frame[1].any()
    lead_x = np.nonzero(frame[0])[1].mean()
    trail_x = np.nonzero(frame[1])[1].mean()
    assert lead_x > trail_x
    assert frame.min() >= 0 and frame.max() == 1.0
    assert np.array_equal(frame > 0, grid > 0)


def test_still_frames_have_zero_velocity_and_motion_frames_do_not():
    rng = np.random.default_rng(0)
    still = [shape_frame(rng, TINY, SIM, PretrainConfig(motion_fraction=0.0)) for _ in range(10)]
    moving = [shape_frame(rng, TINY, SIM, PretrainConfig(motion_fraction=1.0)) for _ in range(10)]
    for frame, label, centre, vel in still + moving:
        assert frame.shape == (TINY.channels, TINY.image_side, TINY.image_side)
        assert 0 <= label < len(SHAPES) and np.all(np.abs(centre) <= 1.0)
    assert all(not v.any() for *_, v in still)
    assert all(v.any() for *_, v in moving)


def test_bin_targets_follow_the_trajectory(source):
    gt = source.records[0].ground_truth
    t = bin_targets(gt, TINY)
    assert t.shape == (TINY.num_bins, 4)
    vx, vy = gt.spec.velocity
    step = np.diff(t[:, :2], axis=0)
    assert np.allclose(step, step[0]) and np.all(np.sign(step[0]) == np.sign([vx, vy]))
    assert np.allclose(t[:, 2:], np.array([vx, vy]) / TINY.image_side)


def test_slot_code_is_seeded():
    assert slot_code(TINY, 1).shape == (4, TINY.lm_dim)
    assert np.array_equal(slot_code(TINY, 1), slot_code(TINY, 1))
    assert not np.array_equal(slot_code(TINY, 1), slot_code(TINY, 2))


def test_lm_corpus_layout(source):
    pools = lm_corpus(source, "context", TINY)
    s, k = TINY.num_patches, TINY.prefix_len
    assert set(pools) == {s, k}
    assert len(pools[s]) == len(source) and len(pools[k]) == 4 * len(source)
    ex = pools[s][0]
    assert ex.targets is None and detokenize(ex.chars).strip() == source.records[0].ground_truth.shape[:s]
    plain = lm_corpus(source, "plain", TINY)
    assert all(not e.targets.any() and detokenize(e.chars).strip() == "" for e in plain[k])


def test_warm_start_touches_only_its_backbone(source):
    p = ModelParams.init(TINY, 0)
    before = p.module_hashes()
    pc = PretrainConfig(encoder_steps=2, encoder_batch=4, lm_steps=2, lm_batch=2)
    pretrain_encoder(p, TINY, pc)
    after_enc = p.module_hashes()
    assert {m for m in before if before[m] != after_enc[m]} == {"encoder"}
    pretrain_lm(p, TINY, source, pc)
    after_lm = p.module_hashes()
    assert {m for m in after_enc if after_enc[m] != after_lm[m]} == {"lm"}


def test_warm_start_is_deterministic(source):
    pc = PretrainConfig(encoder_steps=2, encoder_batch=4, lm_steps=2, lm_batch=2, seed=3)
    runs = []
    for _ in range(2):
        p = ModelParams.init(TINY, 0)
        pretrain_encoder(p, TINY, pc)
        pretrain_lm(p, TINY, source, pc)
        runs.append(p.module_hashes())
    assert runs[0] == runs[1]


def test_unknown_corpus_kind(source):
    with pytest.raises(ValueError, match="lm_corpus"):
        pretrain_lm(ModelParams.init(TINY, 0), TINY, source, PretrainConfig(lm_corpus="novel"))
