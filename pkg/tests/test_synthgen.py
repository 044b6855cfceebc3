import numpy as np
import pytest

from motionguide import io
from motionguide.synthgen import (
    CLASS_IDS,
    KINDS,
    ClipParams,
    MotionTruth,
    TrajectoryError,
    gen_clip,
    gen_dataset,
    read_dataset,
    write_dataset,
)


def test_static_frames_identical():
    clip, truth = gen_clip("static", seed=3)
    assert all(np.array_equal(clip.data[0], fr) for fr in clip.data)
    assert not truth.displacements.any()


def test_translate_track():
    _, truth = gen_clip("translate", ClipParams(velocity=(1, 0)), seed=0)
    x0 = truth.track[0, 0]
    np.testing.assert_array_equal(truth.track[:, 0], x0 + np.arange(8))
    assert (truth.track[:, 1] == truth.track[0, 1]).all()
    assert truth.track.shape == (8, 2)


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic_and_in_range(kind):
    a, _ = gen_clip(kind, seed=9)
    b, _ = gen_clip(kind, seed=9)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.shape == (8, 1, 32, 32)
    assert a.data.min() >= -1.0 and a.data.max() <= 1.0
    assert a.motion_class == CLASS_IDS[kind]


def test_different_seeds_different_textures():
    assert not np.array_equal(gen_clip("pan", seed=1)[0].data, gen_clip("pan", seed=2)[0].data)


def test_out_of_frame():
    with pytest.raises(TrajectoryError):
        gen_clip("translate", ClipParams(velocity=(4, 0), square=10), seed=0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_clip("zoom")


@pytest.mark.parametrize("kind,v", [("pan", (2, 0)), ("pan", (-1, 2)), ("translate", (1, -2))])
def test_truth_consistency(kind, v):
    clip, truth = gen_clip(kind, ClipParams(velocity=v), seed=4)
    cum = truth.cumulative
    f0 = clip.data[0, 0]
    for t in range(1, 8):
        dx, dy = cum[t]
        ft = clip.data[t, 0]
        if kind == "pan":
            # whole frame moves: compare the overlap
            ys, xs = slice(max(0, dy), 32 + min(0, dy)), slice(max(0, dx), 32 + min(0, dx))
            ys0, xs0 = slice(max(0, -dy), 32 + min(0, -dy)), slice(max(0, -dx), 32 + min(0, -dx))
            assert np.array_equal(ft[ys, xs], f0[ys0, xs0])
        else:
            # object region: the square moved by the cumulative displacement
            x, y = (truth.track[0] - 4.5).astype(int)
            assert np.array_equal(ft[y + dy:y + dy + 10, x + dx:x + dx + 10], f0[y:y + 10, x:x + 10])


def test_truth_text_round_trip():
    _, truth = gen_clip("pan", ClipParams(velocity=(-2, 1)), seed=0)
    text = truth.to_text()
    assert text.splitlines()[1] == "1 -2 1"
    np.testing.assert_array_equal(MotionTruth.from_text(text).displacements, truth.displacements)


def test_dataset_balanced(tmp_path):
    items = gen_dataset(3, seed=1)
    assert len(items) == 12
    assert sorted(c.motion_class for c, _ in items) == sorted(list(CLASS_IDS.values()) * 3)
    write_dataset(tmp_path, items)
    back = read_dataset(tmp_path)
    assert [c.clip_id for c, _ in back] == [c.clip_id for c, _ in items]
    assert all(np.array_equal(a.data, b.data) for (a, _), (b, _) in zip(items, back))
    first = (tmp_path / "manifest.txt").read_text().splitlines()[0].split()
    assert first[1] == str(items[0][0].motion_class) and first[3].endswith(".truth.txt")


def test_dataset_empty(tmp_path):
    assert gen_dataset(0) == []
    write_dataset(tmp_path, [])
    assert (tmp_path / "manifest.txt").read_text() == ""
    assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.txt"]
