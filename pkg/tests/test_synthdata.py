import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moviekit import synthdata as sd
from moviekit.videoedit import frame_consistency


def test_vocab_fixed():
    assert [sd.VOCAB[i][0] for i in range(1, 9)] == [
        "recolor-red", "recolor-blue", "invert", "add-border", "brighten", "darken", "swap-channels", "blur",
    ]
    assert sd.instruction_id("invert") == 3
    with pytest.raises(KeyError):
        sd.instruction_id(42)
    with pytest.raises(KeyError):
        sd.instruction_id("sharpen")


def test_invert_definition():
    t = sd.gen_triplet(np.random.default_rng(3), "invert")
    assert np.array_equal(t.edited, 1.0 - t.source)


def test_recolor_red_reference():
    img = sd.gen_triplet(np.random.default_rng(11), "recolor-red").source
    # independent per-pixel loop
    ref = np.empty_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            r, g, b = img[i, j]
            lum = 0.299 * r + 0.587 * g + 0.114 * b
            ref[i, j] = (min(1.0, 0.4 + 0.6 * lum), 0.25 * lum, 0.25 * lum)
    np.testing.assert_allclose(sd.apply_instruction(img, "recolor-red"), ref, rtol=0, atol=1e-15)


def test_border_and_swap():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    out = sd.apply_instruction(img, "add-border")
    assert np.all(out[:4] == 1) and np.all(out[:, -4:] == 1)
    assert np.array_equal(out[4:-4, 4:-4], img[4:-4, 4:-4])
    assert np.array_equal(sd.apply_instruction(img, "swap-channels")[..., 0], img[..., 2])


def test_null_has_no_transform():
    with pytest.raises(ValueError):
        sd.apply_instruction(np.zeros((8, 8, 3)), 0)
    with pytest.raises(ValueError):
        sd.gen_triplet(np.random.default_rng(0), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(sd.EDIT_IDS))
def test_closure_and_determinism(seed, iid):
    a = sd.gen_triplet(np.random.default_rng(seed), iid)
    b = sd.gen_triplet(np.random.default_rng(seed), iid)
    assert np.array_equal(a.source, b.source) and np.array_equal(a.edited, b.edited)
    assert np.array_equal(sd.apply_instruction(a.source, a.instruction_id), a.edited)
    assert a.source.shape == (64, 64, 3)
    assert a.source.min() >= 0 and a.source.max() <= 1 and a.edited.min() >= 0 and a.edited.max() <= 1


def test_brighten_darken_monotone_in_strength():
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    mags = [np.abs(sd.brighten(img, s) - img).mean() for s in (0.1, 0.3, 0.5, 0.9)]
    assert np.all(np.diff(mags) > 0)
    mags = [np.abs(sd.darken(img, s) - img).mean() for s in (0.1, 0.3, 0.5, 0.9)]
    assert np.all(np.diff(mags) > 0)


def test_video_properties():
    src, edt = sd.gen_video(np.random.default_rng(4), 12, "blur")
    assert len(src) == len(edt) == 12
    for f, g in zip(src.frames, edt.frames):
        assert np.array_equal(sd.apply_instruction(f, "blur"), g)
    deltas = [np.abs(a - b).mean() for a, b in zip(src.frames, src.frames[1:])]
    assert max(deltas) < 0.2
    assert frame_consistency(src) > 0.9
    with pytest.raises(ValueError):
        sd.gen_video(np.random.default_rng(0), 0, "blur")


def test_single_frame_video_is_a_triplet_pair():
    src, edt = sd.gen_video(np.random.default_rng(9), 1, "invert")
    assert len(src) == 1 and np.array_equal(edt.frames[0], 1 - src.frames[0])


def test_clip_validation():
    with pytest.raises(ValueError):
        sd.VideoClip([])
    with pytest.raises(ValueError):
        sd.VideoClip([np.zeros((10, 16, 3))])
    with pytest.raises(ValueError):
        sd.VideoClip([np.zeros((16, 16, 3)), np.zeros((8, 16, 3))])


def test_instruction_embeddings():
    null = sd.encode_instruction(0)
    assert null.shape == (sd.TOKENS, sd.EMBED_DIM)
    assert np.array_equal(null, sd.encode_instruction("null"))
    embs = [sd.encode_instruction(i) for i in sd.VOCAB]
    for i in range(len(embs)):
        assert np.array_equal(embs[i], sd.encode_instruction(i))
        for j in range(i + 1, len(embs)):
            assert np.linalg.norm(embs[i] - embs[j]) > 0
    with pytest.raises(KeyError):
        sd.encode_instruction(99)


def test_corpus_roundtrip_and_manifest_hash(tmp_path):
    m1 = sd.write_corpus(tmp_path / "a", 5, 6)
    m2 = sd.write_corpus(tmp_path / "b", 5, 6)
    assert m1.read_bytes() == m2.read_bytes()
    trip = sd.read_corpus(tmp_path / "a")
    ref = sd.make_triplets(5, 6)
    assert [t.instruction_id for t in trip] == [t.instruction_id for t in ref]
    assert np.abs(trip[0].source - ref[0].source).max() <= 0.5 / 255 + 1e-12


def test_split_seeds_disjoint():
    seen = set()
    for s in range(50):
        tr, va = sd.split_seeds(s)
        assert tr != va and tr not in seen and va not in seen
        seen.update((tr, va))
