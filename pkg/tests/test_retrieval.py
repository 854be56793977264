import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from nlvehicle.dataset import DescriptionGroup
from nlvehicle.model import EncoderConfig, Vocab
from nlvehicle.motion import VideoCache, crop_vehicle, render_motion_image, resize
from nlvehicle.retrieval import (
    GalleryEmbedding,
    QueryEmbedding,
    RankedList,
    embed_gallery,
    embed_query,
    embed_sentences,
    embed_track,
    ensemble_scores,
    load_embeddings,
    mrr,
    rank,
    rank_all,
    rank_scores,
    read_submission,
    sample_box_indices,
    save_embeddings,
    score_matrix,
    write_submission,
)
from nlvehicle.training import build_model, image_to_tensor

from oracles import cosine_matrix, reciprocal_rank_mean


@pytest.fixture(scope="module")
def setup(small_scene):
    sentences = [s for g in small_scene.manifest.descriptions.values() for s in g.sentences]
    vocab = Vocab.build(sentences)
    enc = EncoderConfig(image_size=16, hidden_dim=32, visual_widths=(4, 8), text_dim=16, text_heads=2, vocab_size=len(vocab), num_tracks=8)
    return build_model(enc, 0).eval(), vocab


def _unit(rng, n, d=512):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.mark.parametrize("n,k,expect", [(1, 8, [0]), (5, 8, [0, 1, 2, 3, 4]), (15, 3, [0, 7, 14]), (9, None, list(range(9)))])
def test_sample_box_indices(n, k, expect):
    assert sample_box_indices(n, k) == expect


def test_embed_track_matches_loop(setup, small_scene):
    model, _ = setup
    videos = VideoCache(small_scene.root)
    track = small_scene.manifest.tracks[small_scene.manifest.track_ids()[2]]
    frames, bg = videos.track_frames(track), videos.background(track)
    g = embed_track(model, track, frames, bg, num_frames=4, stride=4)
    motion = image_to_tensor(resize(render_motion_image(bg, frames, track, 4).image, 16, 16))[None]
    acc = np.zeros(512)
    picks = sample_box_indices(len(track.boxes), 4)
    with torch.no_grad():
        for i in picks:
            b = track.boxes[i]
            crop = image_to_tensor(crop_vehicle(frames[b.frame_index], b, 16))[None]
            acc += model.dual_stream_forward(crop, motion).z_fusion[0].double().numpy()
    acc /= len(picks)
    assert np.abs(g.vector - acc / np.linalg.norm(acc)).max() <= 1e-6
    assert abs(np.linalg.norm(g.vector) - 1) <= 1e-6


def test_single_box_track(setup, small_scene):
    from nlvehicle.dataset import TrackRecord

    model, _ = setup
    videos = VideoCache(small_scene.root)
    full = small_scene.manifest.tracks["t0"]
    one = TrackRecord("t0", full.video_id, full.boxes[:1], full.frames[:1])
    frames = videos.track_frames(one)
    g = embed_track(model, one, frames, videos.background(full))
    motion = image_to_tensor(resize(render_motion_image(videos.background(full), frames, one).image, 16, 16))[None]
    crop = image_to_tensor(crop_vehicle(frames[one.boxes[0].frame_index], one.boxes[0], 16))[None]
    with torch.no_grad():
        z = model.dual_stream_forward(crop, motion).z_fusion[0].double().numpy()
    assert np.abs(g.vector - z / np.linalg.norm(z)).max() <= 1e-6
    # pre-normalization of a single frame changes nothing
    assert np.abs(embed_track(model, one, frames, videos.background(full), normalize="pre").vector - g.vector).max() <= 1e-9
    with pytest.raises(ValueError):
        embed_track(model, one, frames, videos.background(full), normalize="max")


def test_embed_query(setup):
    model, vocab = setup
    s = "A red sedan goes straight."
    single = embed_sentences(model, [s], vocab)[0]
    same = embed_query(model, DescriptionGroup("q", (s, s, s)), vocab)
    assert np.abs(same.vector - single / np.linalg.norm(single)).max() <= 1e-6
    sents = ("A red sedan turns left.", "The red sedan turns right.", "Red sedan stops.")
    q = embed_query(model, DescriptionGroup("q", sents), vocab)
    z = embed_sentences(model, list(sents), vocab)
    mean = sum(z[i] for i in range(3)) / 3
    assert np.abs(q.vector - mean / np.linalg.norm(mean)).max() <= 1e-6
    perm = embed_query(model, DescriptionGroup("q", sents[::-1]), vocab)
    assert np.abs(perm.vector - q.vector).max() <= 1e-6


def test_embed_gallery_unit_norm(setup, small_scene):
    model, _ = setup
    gallery = embed_gallery(model, small_scene.manifest, small_scene.root)
    assert [g.track_id for g in gallery] == small_scene.manifest.track_ids()
    assert all(abs(np.linalg.norm(g.vector) - 1) <= 1e-6 and g.vector.shape == (512,) for g in gallery)


def test_rank_examples():
    rng = np.random.default_rng(0)
    v = _unit(rng, 1)[0]
    assert rank(QueryEmbedding("q", v), [GalleryEmbedding("only", v)]).track_ids == ["only"]
    E = np.eye(512)
    gallery = [GalleryEmbedding(f"t{i}", E[i]) for i in range(4)]
    assert rank(QueryEmbedding("q", E[2]), gallery).track_ids[0] == "t2"
    with pytest.raises(ValueError):
        rank(QueryEmbedding("q", v), [])


@pytest.mark.parametrize("seed", range(10))
def test_rank_brute_force(seed):
    rng = np.random.default_rng(seed)
    G = _unit(rng, 8, 16)
    q = _unit(rng, 1, 16)[0]
    ids = [f"t{i}" for i in rng.permutation(8)]
    got = rank(QueryEmbedding("q", q), [GalleryEmbedding(i, g) for i, g in zip(ids, G)]).track_ids
    cos = cosine_matrix(q[None], G)[0]
    # O(n^2) oracle: count how many tracks beat each one
    position = {}
    for a in range(8):
        better = sum(1 for b in range(8) if cos[b] > cos[a] or (cos[b] == cos[a] and ids[b] < ids[a]))
        position[better] = ids[a]
    assert got == [position[k] for k in range(8)]


def test_tie_break_ascending_id():
    assert rank_scores("q", np.array([0.5, 0.9, 0.5, 0.9]), ["d", "c", "b", "a"]).track_ids == ["a", "c", "b", "d"]


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=20), st.integers(-6, 6))
def test_rank_is_permutation_and_scale_invariant(scores, k):
    # power-of-two scaling is exact, so no ties appear or vanish
    ids = [f"t{i:02d}" for i in range(len(scores))]
    a = rank_scores("q", np.array(scores), ids).track_ids
    assert sorted(a) == ids
    assert rank_scores("q", np.array(scores) * 2.0**k, ids).track_ids == a


def test_mrr_examples():
    lists = [RankedList(f"q{i}", ["a", "b", "c", "d"]) for i in range(3)]
    assert mrr(lists, {"q0": "a", "q1": "a", "q2": "a"}).mrr == 1.0
    rep = mrr(lists, {"q0": "a", "q1": "b", "q2": "d"}, exact=True)
    assert rep.mrr == Fraction(7, 12) and rep.ranks == {"q0": 1, "q1": 2, "q2": 4}
    with pytest.raises(KeyError, match="q2"):
        mrr(lists, {"q0": "a", "q1": "a"})
    with pytest.raises(KeyError, match="zz"):
        mrr(lists[:1], {"q0": "zz"})


def test_mrr_all_permutations_of_five():
    items = ["a", "b", "c", "d", "e"]
    perms = list(itertools.permutations(items))
    assert len(perms) == 120
    lists = [RankedList(f"q{k:03d}", list(p)) for k, p in enumerate(perms)]
    truth = {rl.query_id: "c" for rl in lists}
    for rl in lists:
        single = mrr([rl], truth, exact=True).mrr
        assert single == Fraction(1, rl.track_ids.index("c") + 1)
    assert mrr(lists, truth, exact=True).mrr == reciprocal_rank_mean({rl.query_id: rl.track_ids for rl in lists}, truth)
    # every position equally often: mean of 1/r over r = 1..5
    assert mrr(lists, truth, exact=True).mrr == sum(Fraction(1, r) for r in range(1, 6)) / 5


@given(st.lists(st.integers(1, 10), min_size=1, max_size=6), st.data())
def test_mrr_monotone(ranks, data):
    ids = [f"t{i}" for i in range(10)]
    lists, truth = [], {}
    for k, r in enumerate(ranks):
        lists.append(RankedList(f"q{k}", ids))
        truth[f"q{k}"] = ids[r - 1]
    base = mrr(lists, truth, exact=True).mrr
    assert 0 < base <= 1 and (base == 1) == all(r == 1 for r in ranks)
    k = data.draw(st.integers(0, len(ranks) - 1))
    if ranks[k] < 10:
        worse = dict(truth)
        worse[f"q{k}"] = ids[ranks[k]]
        assert mrr(lists, worse, exact=True).mrr < base


def test_ensemble_single_and_identical():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(4, 6))
    E = ensemble_scores([S], [1.0])
    assert np.array_equal(np.argsort(-E, axis=1, kind="stable"), np.argsort(-S, axis=1, kind="stable"))
    assert np.allclose(E.min(1), 0) and np.allclose(E.max(1), 1)
    assert np.array_equal(ensemble_scores([S, S], [0.3, 0.7]).argmax(1), S.argmax(1))


def test_ensemble_hand_computed():
    A = np.array([[0.9, 0.5, 0.1], [0.2, 0.4, 0.6]])
    B = np.array([[0.0, 1.0, 0.5], [3.0, 1.0, 2.0]])
    # row-normalized A: [1, .5, 0], [0, .5, 1]; B: [0, 1, .5], [1, 0, .5]
    # weights (1, 3): ([1,.5,0] + 3[0,1,.5]) / 4 = [.25, .875, .375]
    expect = np.array([[0.25, 0.875, 0.375], [0.75, 0.125, 0.625]])
    E = ensemble_scores([A, B], [1.0, 3.0])
    assert np.abs(E - expect).max() <= 1e-12
    assert rank_all(E, ["q0", "q1"], ["x", "y", "z"])[0].track_ids == ["y", "z", "x"]
    assert rank_all(E, ["q0", "q1"], ["x", "y", "z"])[1].track_ids == ["x", "z", "y"]


def test_ensemble_errors_and_constant_rows():
    with pytest.raises(ValueError):
        ensemble_scores([np.zeros((2, 3)), np.zeros((2, 4))], [1, 1])
    with pytest.raises(ValueError):
        ensemble_scores([np.zeros((2, 3))], [1, 1])
    with pytest.raises(ValueError):
        ensemble_scores([np.zeros((2, 3))], [0.0])
    assert not ensemble_scores([np.ones((2, 3))], [1]).any()


def test_submission_roundtrip(tmp_path):
    write_submission([RankedList("q", ["b", "a"])], tmp_path / "one.json")
    assert json.loads((tmp_path / "one.json").read_text()) == {"q": ["b", "a"]}
    lists = [RankedList("q2", ["x", "y"]), RankedList("q10", ["y", "x"]), RankedList("q1", ["x", "y"])]
    write_submission(lists, tmp_path / "s.json")
    text = (tmp_path / "s.json").read_text()
    assert text.index('"q1"') < text.index('"q10"') < text.index('"q2"')
    back = read_submission(tmp_path / "s.json")
    assert sorted(back, key=lambda r: r.query_id) == sorted(lists, key=lambda r: r.query_id)
    write_submission(lists[::-1], tmp_path / "s2.json")
    assert (tmp_path / "s2.json").read_bytes() == (tmp_path / "s.json").read_bytes()


def test_embedding_archive(tmp_path):
    rng = np.random.default_rng(4)
    g = [GalleryEmbedding(f"t{i}", v) for i, v in enumerate(_unit(rng, 3))]
    q = [QueryEmbedding(f"q{i}", v) for i, v in enumerate(_unit(rng, 2))]
    save_embeddings(tmp_path / "e.npz", g, q)
    g2, q2, header = load_embeddings(tmp_path / "e.npz")
    assert header == {"dim": 512, "normalized": True, "schema": "nlvehicle-embeddings/1"}
    assert [x.track_id for x in g2] == ["t0", "t1", "t2"]
    assert all(np.array_equal(a.vector, b.vector) for a, b in zip(g + q, g2 + q2))
    assert np.abs(score_matrix(q2, g2) - cosine_matrix(np.stack([x.vector for x in q]), np.stack([x.vector for x in g]))).max() <= 1e-12
