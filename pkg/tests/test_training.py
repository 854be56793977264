import collections

import numpy as np
import pytest
import torch

from nlvehicle.losses import LossWeights
from nlvehicle.model import EncoderConfig, Vocab
from nlvehicle.training import (
    METRIC_COLUMNS,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    build_model,
    fit,
    load_checkpoint,
    make_optimizer,
    prepare_pool,
    read_metrics,
    sample_batch,
    save_checkpoint,
    train_step,
)

ENC = EncoderConfig(image_size=16, hidden_dim=32, visual_widths=(4, 8), text_dim=16, text_heads=2)


@pytest.fixture(scope="module")
def pool(small_scene):
    return prepare_pool(small_scene.manifest, small_scene.root, 16, use_augmented=False)


@pytest.fixture(scope="module")
def vocab(pool):
    return Vocab.build(s for g in pool.sentences for s in g)


def _enc(pool, vocab, **kw):
    return EncoderConfig(**{**ENC.to_dict(), "vocab_size": len(vocab), "num_tracks": pool.num_classes, **kw})


def _params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_pool_contents(pool, small_scene):
    assert pool.track_ids == small_scene.manifest.track_ids()
    assert pool.motions.shape == (8, 3, 16, 16)
    assert all(c.shape[1:] == (3, 16, 16) for c in pool.crops)
    assert pool.class_index == list(range(8))


def test_pool_motion_cache(small_scene, tmp_path, pool):
    a = prepare_pool(small_scene.manifest, small_scene.root, 16, use_augmented=False, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.npy"))) == 8
    b = prepare_pool(small_scene.manifest, small_scene.root, 16, use_augmented=False, cache_dir=tmp_path)
    assert torch.equal(a.motions, b.motions) and torch.equal(a.motions, pool.motions)


def test_batch_covers_all_tracks(pool):
    batch = sample_batch(pool, 8, np.random.default_rng(0))
    assert sorted(s.track_id for s in batch) == pool.track_ids
    with pytest.raises(ValueError):
        sample_batch(pool, 9, np.random.default_rng(0))


def test_batch_deterministic(pool):
    a = sample_batch(pool, 4, np.random.default_rng(5))
    b = sample_batch(pool, 4, np.random.default_rng(5))
    assert [(s.track_id, s.sentence) for s in a] == [(s.track_id, s.sentence) for s in b]
    assert all(torch.equal(x.crop, y.crop) for x, y in zip(a, b))


def test_sentence_frequency_monte_carlo(pool):
    rng = np.random.default_rng(11)
    counts = collections.defaultdict(collections.Counter)
    for _ in range(1000):
        for s in sample_batch(pool, 8, rng):
            counts[s.track_id][s.sentence] += 1
    for i, tid in enumerate(pool.track_ids):
        total = sum(counts[tid].values())
        for sent in pool.sentences[i]:
            assert abs(counts[tid][sent] / total - 1 / 3) <= 0.05


def test_merged_duplicates_never_share_batch(small_scene):
    from nlvehicle.dataset import DatasetManifest, DescriptionGroup

    m = small_scene.manifest
    ids = m.track_ids()
    desc = dict(m.descriptions)
    desc[ids[1]] = DescriptionGroup(ids[1], m.descriptions[ids[0]].sentences)
    dup = DatasetManifest(m.tracks, desc)
    p = prepare_pool(dup, small_scene.root, 16, use_augmented=False, merge_duplicates=True)
    assert p.num_classes == 7 and p.class_index[0] == p.class_index[1]
    rng = np.random.default_rng(0)
    for _ in range(50):
        labels = [s.class_index for s in sample_batch(p, 7, rng)]
        assert len(set(labels)) == 7


def _step_setup(pool, vocab, seed=0, **kw):
    model = build_model(_enc(pool, vocab, **kw), seed)
    cfg = TrainConfig(lr=1e-2, warmup_steps=0)
    return model, make_optimizer(model, cfg)


def test_zero_weights_leave_parameters(pool, vocab):
    model, opt = _step_setup(pool, vocab)
    before = {k: p.detach().clone() for k, p in model.named_parameters()}
    zero = LossWeights(levels={"local": 0, "global": 0, "fusion": 0}, instance=0)
    log = train_step(model, opt, sample_batch(pool, 4, np.random.default_rng(0)), vocab, zero)
    assert log["total"] == 0.0
    assert all(torch.equal(p, before[k]) for k, p in model.named_parameters())


def test_identical_steps_identical_params(pool, vocab):
    results = []
    for _ in range(2):
        model, opt = _step_setup(pool, vocab, seed=3)
        rng = np.random.default_rng(1)
        for _ in range(2):
            train_step(model, opt, sample_batch(pool, 4, rng), vocab, LossWeights())
        results.append(_params(model))
    assert _same(*results)


def test_frozen_text_through_training(pool, vocab):
    model, opt = _step_setup(pool, vocab, text_encoder_mode="frozen")
    before = {k: v.clone() for k, v in model.text_backbone.state_dict().items()}
    tau0 = float(model.tau.detach())
    rng = np.random.default_rng(2)
    for _ in range(5):
        train_step(model, opt, sample_batch(pool, 4, rng), vocab, LossWeights())
    assert all(torch.equal(v, before[k]) for k, v in model.text_backbone.state_dict().items())
    assert float(model.tau.detach()) != tau0


def test_non_finite_loss_rejected(pool, vocab):
    model, opt = _step_setup(pool, vocab)
    with torch.no_grad():
        model.w_shared.weight.fill_(float("nan"))
    before = {k: p.detach().clone() for k, p in model.named_parameters()}
    with pytest.raises(NonFiniteLossError) as info:
        train_step(model, opt, sample_batch(pool, 4, np.random.default_rng(0)), vocab, LossWeights())
    assert "l_instance" in str(info.value)
    assert all(torch.allclose(p, before[k], rtol=0, atol=0, equal_nan=True) for k, p in model.named_parameters())


def test_loss_decreases_on_micro_dataset(pool, vocab, tmp_path):
    from nlvehicle.training import METRIC_COLUMNS

    cfg = TrainConfig(batch_size=4, epochs=100, lr=2e-3, warmup_steps=5)
    fit(cfg, ENC, pool, vocab, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 200 and list(rows[0]) == list(METRIC_COLUMNS)
    total = lambda r: r["l_local"] + r["l_global"] + r["l_fusion"] + r["l_instance"]  # noqa: E731
    first = np.mean([total(r) for r in rows[:10]])
    last = np.mean([total(r) for r in rows[-10:]])
    assert last < first


def test_zero_epochs_checkpoint_is_init(pool, vocab, tmp_path):
    cfg = TrainConfig(batch_size=4, epochs=0, seed=7)
    state = fit(cfg, ENC, pool, vocab, tmp_path)
    init = build_model(state.model.config, 7)
    assert state.step == 0
    assert _same(_params(load_checkpoint(tmp_path / "checkpoint.pt").model), _params(init))


def test_checkpoint_roundtrip(pool, vocab, tmp_path):
    cfg = TrainConfig(batch_size=4, epochs=2)
    state = fit(cfg, ENC, pool, vocab, tmp_path)
    back = load_checkpoint(tmp_path / "checkpoint.pt")
    assert _same(_params(state.model), _params(back.model))
    assert torch.equal(back.model.log_tau, state.model.log_tau)
    assert back.vocab.itos == vocab.itos and back.class_names == pool.class_names
    assert back.step == state.step == 4
    assert back.train_config == cfg


def test_truncated_and_foreign_checkpoints(pool, vocab, tmp_path):
    state = TrainState(build_model(_enc(pool, vocab), 0), vocab, pool.class_names)
    save_checkpoint(state, tmp_path / "c.pt")
    data = (tmp_path / "c.pt").read_bytes()
    (tmp_path / "cut.pt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.pt")
    torch.save({"schema": "other/9"}, tmp_path / "old.pt")
    with pytest.raises(CheckpointError, match="schema"):
        load_checkpoint(tmp_path / "old.pt")
    payload = torch.load(tmp_path / "c.pt", weights_only=False)
    payload["encoder_config"]["embed_dim"] = 256
    torch.save(payload, tmp_path / "dim.pt")
    with pytest.raises(CheckpointError, match="512"):
        load_checkpoint(tmp_path / "dim.pt")


def test_resume_matches_uninterrupted(pool, vocab, tmp_path):
    cfg = TrainConfig(batch_size=4, epochs=5, seed=2)
    full = fit(cfg, ENC, pool, vocab, tmp_path / "full")
    fit(cfg, ENC, pool, vocab, tmp_path / "part", stop_after=4)
    resumed = fit(cfg, ENC, pool, vocab, tmp_path / "part", resume=True)
    assert resumed.step == full.step == 10
    assert _same(_params(full.model), _params(resumed.model))
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_metrics_log_deterministic(pool, vocab, tmp_path):
    cfg = TrainConfig(batch_size=4, epochs=3, seed=4)
    fit(cfg, ENC, pool, vocab, tmp_path / "a")
    fit(cfg, ENC, pool, vocab, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)


@pytest.mark.parametrize(
    "kw",
    [dict(optimizer="lbfgs"), dict(text_lr_multiplier=0.0), dict(text_lr_multiplier=1.5), dict(batch_size=0)],
)
def test_bad_train_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1, weights=LossWeights(barlow=1.0))


def test_barlow_training_runs(pool, vocab, tmp_path):
    cfg = TrainConfig(batch_size=4, epochs=1, weights=LossWeights(barlow=0.1))
    fit(cfg, ENC, pool, vocab, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert all(r["l_barlow"] > 0 for r in rows)
