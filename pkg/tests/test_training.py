import dataclasses
import math

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from idtrack import training
from idtrack.decoder import DecoderConfig, IDPredictor
from idtrack.errors import CapacityError, ConfigError, NumericError
from idtrack.scene import SceneConfig, generate_corpus, generate_sequence
from idtrack.training import (
    Clip,
    ClipWindow,
    TrainConfig,
    assign_training_labels,
    augment_occlusion,
    augment_swap,
    build_window,
    contra_objective,
    id_loss,
    id_targets,
    learning_rate_at,
    load_model,
    reid_objective,
    sample_clip,
    total_loss,
    train,
)

from conftest import SMALL_SCENE, make_frame, random_clip_tensors, tiny_config

SEQ = generate_sequence(dataclasses.replace(SMALL_SCENE, num_frames=80))


def test_clip_length_and_consecutive():
    rng = np.random.default_rng(0)
    clip = sample_clip(SEQ, 19, (1, 4), rng)
    assert clip.num_frames == 20
    clip = sample_clip(SEQ, 5, (1, 1), rng)
    assert clip.interval == 1 and np.all(np.diff(clip.frame_indices) == 1)


def test_interval_distribution_uniform():
    rng = np.random.default_rng(1)
    counts = np.zeros(4)
    for _ in range(1000):
        clip = sample_clip(SEQ, 19, (1, 4), rng)
        counts[clip.interval - 1] += 1
        assert np.all(np.diff(clip.frame_indices) == clip.interval)
    assert chisquare(counts).pvalue > 0.01


def test_short_sequences():
    rng = np.random.default_rng(0)
    short = generate_sequence(dataclasses.replace(SMALL_SCENE, num_frames=5))
    assert sample_clip([short], 19, (1, 4), rng) is None
    clip = sample_clip(generate_sequence(dataclasses.replace(SMALL_SCENE, num_frames=25)), 19, (1, 4), rng)
    assert clip.interval == 1


def _clip_with_tracks(n_tracks, n_frames=3):
    frames = [make_frame(np.eye(n_tracks, 4), [0.9] * n_tracks, np.arange(1, n_tracks + 1)) for _ in range(n_frames)]
    return Clip("x", list(range(n_frames)), frames, 1)


def test_label_assignment():
    rng = np.random.default_rng(0)
    assert assign_training_labels(_clip_with_tracks(1), 1, rng) == {1: 1}
    with pytest.raises(CapacityError):
        assign_training_labels(_clip_with_tracks(3), 2, rng)


def test_labels_injective_and_uniform():
    rng = np.random.default_rng(2)
    K, n = 6, 10_000
    clip = _clip_with_tracks(4)
    counts = np.zeros(K)
    for _ in range(n):
        labels = assign_training_labels(clip, K, rng)
        values = list(labels.values())
        assert len(set(values)) == 4 and all(1 <= v <= K for v in values)
        counts[labels[1] - 1] += 1
    p = 1 / K
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def _big_window(n_frames, per_frame, seed=0):
    rng = np.random.default_rng(seed)
    times = np.repeat(np.arange(n_frames), per_frame)
    ids = np.tile(np.arange(1, per_frame + 1), n_frames)
    return ClipWindow(times, ids, ids.copy(), rng.normal(size=(len(ids), 4)).astype(np.float32))


def test_occlusion_rates():
    w = _big_window(1000, 100)
    rng = np.random.default_rng(3)
    assert len(augment_occlusion(w, 0.0, rng)) == len(w)
    assert len(augment_occlusion(w, 1.0, rng)) == 0
    kept = augment_occlusion(w, 0.5, rng)
    assert abs(1 - len(kept) / len(w) - 0.5) < 0.005


def test_swap_rates_and_halves():
    rng = np.random.default_rng(4)
    w = _big_window(100_000, 2)
    same = augment_swap(w, 0.0, rng)
    assert np.array_equal(same.word_labels, w.word_labels)
    out = augment_swap(w, 0.5, rng)
    assert abs(len(out.swapped_frames) / 100_000 - 0.5) < 0.005
    assert np.array_equal(out.features, w.features) and np.array_equal(out.track_ids, w.track_ids)
    changed = np.unique(out.times[out.word_labels != w.word_labels])
    assert changed.tolist() == sorted(out.swapped_frames)
    # single-token frames are never eligible
    lone = augment_swap(_big_window(50, 1), 1.0, rng)
    assert lone.swapped_frames == []


def test_forced_swap_exchanges_words_only():
    model = IDPredictor(tiny_config())
    w = _big_window(1, 2)
    out = augment_swap(w, 1.0, np.random.default_rng(0))
    assert out.word_labels.tolist() == [2, 1]
    before = model.memory_tokens(torch.as_tensor(w.features), torch.as_tensor(w.word_labels))
    after = model.memory_tokens(torch.as_tensor(out.features), torch.as_tensor(out.word_labels))
    assert torch.equal(before[:, :4], after[:, :4])
    assert torch.equal(before[0, 4:], after[1, 4:]) and torch.equal(before[1, 4:], after[0, 4:])


def test_id_targets():
    K = 10
    frames = [make_frame(np.eye(2, 4), [0.9, 0.9], [1, 2]), make_frame(np.eye(3, 4), [0.9, 0.9, 0.9], [1, 2, 3])]
    frames[1] = make_frame(np.eye(4, 4), [0.9] * 4, [1, 2, 3, -1])
    clip = Clip("x", [0, 1], frames, 1)
    labels = {1: 7, 2: 3, 3: 9}
    window = build_window(clip, labels)
    # label 7 -> column 6; newborn 3 -> special column K; the false positive is skipped
    assert id_targets(clip, 1, labels, window, K).tolist() == [6, 2, K]
    empty = augment_occlusion(window, 1.0, np.random.default_rng(0))
    assert id_targets(clip, 1, labels, empty, K).tolist() == [K, K, K]
    assert id_targets(clip, 1, labels, empty, K, supervise_newborns=False).tolist() == [-100] * 3


def test_id_loss_values():
    for n in (3, 51):
        assert abs(float(id_loss(torch.zeros(4, n, dtype=torch.float64), torch.zeros(4, dtype=torch.long))) - math.log(n)) < 1e-9
    logits = torch.full((2, 5), 0.0, dtype=torch.float64)
    logits[0, 1] = logits[1, 4] = 20.0
    assert float(id_loss(logits, torch.tensor([1, 4]))) < 1e-8
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, 5, 4)
    ref = 0.0
    for row, t in zip(x, y):
        m = max(row)
        ref += m + math.log(sum(math.exp(v - m) for v in row)) - row[t]
    ref /= 4
    assert abs(float(id_loss(torch.as_tensor(x), torch.as_tensor(y))) - ref) < 1e-10
    # ignored rows don't count
    y2 = torch.as_tensor(np.r_[y, -100])
    x2 = torch.as_tensor(np.r_[x, rng.normal(size=(1, 5))])
    assert abs(float(id_loss(x2, y2)) - ref) < 1e-10


def test_id_loss_empty_warns(caplog):
    assert float(id_loss(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))) == 0.0
    assert "no supervised" in caplog.text


def test_total_loss():
    cfg = TrainConfig()
    assert (cfg.lambda_cls, cfg.lambda_L1, cfg.lambda_giou, cfg.lambda_id) == (2.0, 5.0, 2.0, 1.0)
    assert total_loss({"cls": 0.0, "L1": 0.0, "giou": 0.0, "id": 0.0}, cfg) == 0.0
    assert total_loss({"id": 0.7}, cfg) == pytest.approx(0.7)
    assert total_loss({"cls": 1.0, "L1": 1.0, "giou": 1.0, "id": 1.0}, cfg) == pytest.approx(10.0)
    with pytest.raises(ConfigError):
        total_loss({"id": 1.0}, {"id": -1.0})


def test_contra_closed_form():
    a = torch.tensor([1.0, 0.0], dtype=torch.float64)
    b = torch.tensor([0.6, 0.8], dtype=torch.float64)
    s = 0.6
    feats = torch.stack([a, a, b])
    loss = contra_objective(feats, [0, 0, 1], temperature=1.0, frames=[0, 1, 1])
    assert abs(float(loss) + math.log(math.e / (math.e + math.exp(s)))) < 1e-12


def test_contra_no_positive(caplog):
    loss = contra_objective(torch.eye(3), [0, 1, 2])
    assert float(loss) == 0.0 and "no positive" in caplog.text


def test_reid_objective():
    assert float(reid_objective(torch.randn(5, 1), torch.zeros(5, dtype=torch.long))) == pytest.approx(0.0, abs=1e-12)
    x, y = torch.randn(6, 4), torch.randint(0, 4, (6,))
    assert torch.equal(reid_objective(x, y), id_loss(x, y))


def test_loss_invariant_under_relabeling():
    m = IDPredictor(tiny_config())
    ct, clip = random_clip_tensors(7, T=4)
    K = 4
    perm = np.random.default_rng(0).permutation(K) + 1  # label k -> perm[k-1]
    pm = IDPredictor(tiny_config())
    pm.load_state_dict(m.state_dict())
    with torch.no_grad():
        for k in range(1, K + 1):
            pm.dictionary.words[perm[k - 1] - 1] = m.dictionary.words[k - 1]
            pm.decoder.head.weight[perm[k - 1] - 1] = m.decoder.head.weight[k - 1]
            pm.decoder.head.bias[perm[k - 1] - 1] = m.decoder.head.bias[k - 1]
    relabel = torch.as_tensor(np.r_[0, perm])
    col = torch.as_tensor(np.r_[perm - 1, K])
    loss = id_loss(m.parallel_forward(ct.query_features, ct.query_times, ct.memory_features, ct.memory_labels, ct.memory_times), ct.targets)
    targets = torch.where(ct.targets >= 0, col[ct.targets.clamp(min=0)], ct.targets)
    ploss = id_loss(pm.parallel_forward(ct.query_features, ct.query_times, ct.memory_features, relabel[ct.memory_labels], ct.memory_times), targets)
    assert abs(loss.item() - ploss.item()) < 1e-6


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1e-2, lr_drop_epochs=(2, 4))
    assert [learning_rate_at(cfg, e) for e in range(5)] == pytest.approx([1e-2, 1e-2, 1e-3, 1e-3, 1e-4])


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(T=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lambda_occ=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(objective="other").validate()
    with pytest.raises(ConfigError):
        train(generate_corpus(SMALL_SCENE, 1, 0), TrainConfig(T=5), tiny_config(max_rel_offset=3))


SMALL_TRAIN = TrainConfig(T=4, epochs=2, batch_size=2, learning_rate=3e-3, seed=1)
SMALL_DEC = tiny_config(feature_dim=16, num_ids=8, max_rel_offset=4)


def test_zero_epochs_checkpoint_is_init(tmp_path):
    corpus = generate_corpus(SMALL_SCENE, 2, 0)
    res = train(corpus, dataclasses.replace(SMALL_TRAIN, epochs=0), SMALL_DEC, out_dir=tmp_path)
    model, meta, _ = load_model(res.checkpoint)
    init = IDPredictor(SMALL_DEC)
    for k, v in init.state_dict().items():
        assert torch.equal(model.state_dict()[k], v)
    assert meta["step"] == 0 and meta["optimizer"]["name"] == "adamw"


def test_deterministic_checkpoints(tmp_path):
    corpus = generate_corpus(SMALL_SCENE, 3, 0)
    a = train(corpus, SMALL_TRAIN, SMALL_DEC, out_dir=tmp_path / "a")
    b = train(corpus, SMALL_TRAIN, SMALL_DEC, out_dir=tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert (tmp_path / "a/metrics.log").read_bytes() == (tmp_path / "b/metrics.log").read_bytes()


def test_metrics_log_format(tmp_path):
    corpus = generate_corpus(SMALL_SCENE, 3, 0)
    res = train(corpus, SMALL_TRAIN, SMALL_DEC, out_dir=tmp_path)
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == res.steps == 4
    for i, line in enumerate(lines, 1):
        step, loss, lr, gn = line.split()
        assert int(step) == i and float(loss) >= 0 and float(lr) == 3e-3 and math.isfinite(float(gn))


def test_resume_continues_steps(tmp_path):
    corpus = generate_corpus(SMALL_SCENE, 3, 0)
    first = train(corpus, SMALL_TRAIN, SMALL_DEC, out_dir=tmp_path)
    train(corpus, dataclasses.replace(SMALL_TRAIN, epochs=4), SMALL_DEC, out_dir=tmp_path, resume=first.checkpoint)
    steps = [int(line.split()[0]) for line in (tmp_path / "metrics.log").read_text().splitlines()]
    assert steps == list(range(1, 9))
    _, meta, tensors = load_model(tmp_path / "checkpoint.bin")
    assert meta["step"] == 8 and any(k.startswith("optim.") for k in tensors)


def test_divergence_names_last_checkpoint(tmp_path, monkeypatch):
    corpus = generate_corpus(SMALL_SCENE, 3, 0)
    real = training._batch_loss
    calls = {"n": 0}

    def flaky(model, clips):
        calls["n"] += 1
        loss = real(model, clips)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(training, "_batch_loss", flaky)
    with pytest.raises(NumericError) as err:
        train(corpus, dataclasses.replace(SMALL_TRAIN, checkpoint_every=1), SMALL_DEC, out_dir=tmp_path)
    assert "ckpt_2.bin" in str(err.value)
    assert (tmp_path / "ckpt_2.bin").exists()


def test_overfit_single_sequence():
    # one sequence, four clips of it per step
    seq = generate_sequence(SceneConfig(num_frames=40, max_objects=4, feature_dim=16, seed=2))
    cfg = TrainConfig(T=5, epochs=200, batch_size=4, learning_rate=3e-3, lambda_occ=0.0, lambda_sw=0.0, seed=0)
    dec = DecoderConfig(feature_dim=16, num_ids=8, num_layers=1, num_heads=2, max_rel_offset=5, init_sigma=0.5)
    res = train([seq] * 4, cfg, dec)
    assert res.steps == 200
    assert np.mean(res.losses[-20:]) < 0.05


@pytest.mark.parametrize("objective", ["re_id", "contra"])
def test_embedding_objectives_train(objective, tmp_path):
    corpus = generate_corpus(SMALL_SCENE, 3, 0)
    cfg = dataclasses.replace(SMALL_TRAIN, objective=objective, enhance_layers=1)
    res = train(corpus, cfg, SMALL_DEC, out_dir=tmp_path)
    assert all(math.isfinite(v) for v in res.losses)
    model, meta, _ = load_model(res.checkpoint)
    assert meta["kind"] == objective
    assert model.embed(np.zeros((3, 16), np.float32)).shape == (3, 16)
