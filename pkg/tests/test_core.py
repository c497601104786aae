from collections import deque

import numpy as np
import pytest
import torch

from idtrack.core import (
    SPECIAL,
    TrackerState,
    TrajectoryWindow,
    acquire_label,
    attach_special,
    expire_stale,
    form_tracklet,
    new_dictionary,
    prune,
    push_observation,
)
from idtrack.errors import CapacityError, ConfigError, DimensionError, StateError


def test_dictionary_shapes():
    assert tuple(new_dictionary(50, 256).words.shape) == (51, 256)
    d = new_dictionary(1, 1)
    assert tuple(d.words.shape) == (2, 1)
    assert d.special_index == 1
    assert d.words.requires_grad


def test_dictionary_deterministic_and_scaled():
    a, b = new_dictionary(40, 64, 0.5, seed=3), new_dictionary(40, 64, 0.5, seed=3)
    assert torch.equal(a.words, b.words)
    assert not torch.equal(a.words, new_dictionary(40, 64, 0.5, seed=4).words)
    assert abs(float(a.words.detach().std()) - 0.5) < 0.05


@pytest.mark.parametrize("K,C", [(0, 4), (4, 0)])
def test_dictionary_bad_sizes(K, C):
    with pytest.raises(ConfigError):
        new_dictionary(K, C)


def test_lookup_maps_special():
    d = new_dictionary(3, 2, seed=1)
    out = d.lookup(torch.tensor([1, 3, SPECIAL]))
    assert torch.equal(out, d.words[[0, 2, 3]])
    with pytest.raises(StateError):
        d.word(4)


def test_form_tracklet():
    tr = form_tracklet(torch.zeros(256), torch.zeros(256), 0, 1)
    assert tr.vector.shape == (512,) and not tr.vector.any()
    e1, e2 = torch.eye(3)[0], torch.eye(3)[1]
    tr = form_tracklet(e1, e2, 5, 2)
    assert tr.vector.tolist() == [1, 0, 0, 0, 1, 0]
    assert torch.equal(tr.feature, e1) and torch.equal(tr.word, e2)
    with pytest.raises(DimensionError):
        form_tracklet(torch.zeros(3), torch.zeros(4), 0, 1)


def test_attach_special_tracks_parameter():
    d = new_dictionary(4, 3, 0.1, seed=0)
    tr = attach_special(torch.zeros(3), d, 2)
    assert tr.source_label == SPECIAL
    assert not tr.feature.any() and torch.equal(tr.word, d.words[4])
    opt = torch.optim.SGD(d.parameters(), lr=1.0)
    d.special.sum().backward()
    opt.step()
    tr2 = attach_special(torch.zeros(3), d, 2)
    assert torch.allclose(tr2.word, tr.word - 1.0)
    with pytest.raises(DimensionError):
        attach_special(torch.zeros(4), d, 0)


def _tr(frame, label=1):
    return form_tracklet(torch.tensor([float(frame)]), torch.tensor([float(label)]), frame, label)


def test_window_arithmetic():
    w = TrajectoryWindow(span=2)
    w.open(1)
    for f in (1, 2, 3):
        prune(w, f + 1)
        push_observation(w, 1, _tr(f))
    prune(w, 4, 2)
    assert [t.frame_index for t in w.tracks[1]] == [2, 3]
    empty = TrajectoryWindow(span=3)
    prune(empty, 10)
    assert empty.is_empty()


def test_window_errors():
    w = TrajectoryWindow(span=3, time=2)
    with pytest.raises(StateError):
        w.push(5, _tr(1, 5))
    w.open(5)
    with pytest.raises(StateError):
        w.push(5, _tr(0, 5))
    with pytest.raises(StateError):
        w.open(5)
    with pytest.raises(StateError):
        w.prune(1)
    with pytest.raises(StateError):
        prune(w, 3, 7)


def test_window_shadow_fuzz():
    rng = np.random.default_rng(0)
    span = 4
    w = TrajectoryWindow(span)
    shadow: dict[int, list[int]] = {}
    t = 0
    for _ in range(1000):
        op = rng.integers(4)
        if op == 0:
            t += int(rng.integers(1, 3))
            w.prune(t)
            shadow = {k: [f for f in v if f >= t - span] for k, v in shadow.items()}
        elif op == 1:
            label = int(rng.integers(1, 6))
            if label not in shadow:
                w.open(label)
                shadow[label] = []
        elif op == 2 and shadow and t > 0:
            label = int(rng.choice(sorted(shadow)))
            if not shadow[label] or shadow[label][-1] < t - 1:
                w.push(label, _tr(t - 1, label))
                shadow[label].append(t - 1)
        elif op == 3 and shadow:
            label = int(rng.choice(sorted(shadow)))
            w.close(label)
            del shadow[label]
        assert {k: [tr.frame_index for tr in v] for k, v in w.tracks.items()} == shadow
        for label, hist in w.tracks.items():
            frames = [tr.frame_index for tr in hist]
            assert all(t - span <= f <= t - 1 for f in frames)
            assert frames == sorted(set(frames))
        vecs, times, labels = w.memory()
        assert len(times) == len(w)


def test_acquire_sequence_and_capacity():
    s = TrackerState(K=2)
    assert acquire_label(s) == 1 and acquire_label(s) == 2
    with pytest.raises(CapacityError):
        acquire_label(s)


def test_recycling_issues_new_external_id():
    s = TrackerState(K=2, miss_tolerance=0)
    a, b = acquire_label(s, 0), acquire_label(s, 0)
    ids = {s.external_id(a), s.external_id(b)}
    assert expire_stale(s, None, 1) == [1, 2]
    c = acquire_label(s, 2)
    assert c == 1 and s.generation[1] == 2
    assert s.external_id(c) not in ids and s.external_id(c) == 3


def test_expire_rule():
    s = TrackerState(K=3, miss_tolerance=30)
    a = acquire_label(s, 0)
    b = acquire_label(s, 0)
    s.touch(b, 31)
    assert expire_stale(s, None, 30) == []
    assert expire_stale(s, None, 31) == [a]
    assert s.active_labels == {b}


def test_acquire_expire_shadow_fuzz():
    rng = np.random.default_rng(1)
    K, tol = 5, 3
    s = TrackerState(K, tol)
    w = TrajectoryWindow(4)
    active, free, last, fresh, next_ext, issued = set(), deque(), {}, 1, 1, []
    for t in range(1000):
        w.prune(t)
        for _ in range(int(rng.integers(0, 3))):
            if len(active) == K:
                with pytest.raises(CapacityError):
                    acquire_label(s, t)
                continue
            got = acquire_label(s, t)
            w.open(got)
            if fresh <= K:
                want, fresh = fresh, fresh + 1
            else:
                want = free.popleft()
            assert got == want
            active.add(want)
            last[want] = t
            assert s.external_id(got) == next_ext
            issued.append(next_ext)
            next_ext += 1
        for label in sorted(active):
            if rng.random() < 0.4:
                s.touch(label, t)
                last[label] = t
        released = expire_stale(s, w, t)
        want_released = sorted(k for k in active if t - last[k] > tol)
        assert released == want_released
        for k in want_released:
            active.remove(k)
            free.append(k)
            del last[k]
            assert k not in w.tracks
        assert s.active_labels == active
        assert list(s.free_labels) == list(free)
        assert active.isdisjoint(s.free_labels)
    assert issued == sorted(set(issued))
