import math

import numpy as np
import pytest
import torch

from conftest import random_track
from dircformer import probes
from dircformer.data import collate, make_batches
from dircformer.errors import ConfigError, DatasetError, ModeError, NonFiniteLossError
from dircformer.model import CLASSIFIER, N_CONTEXT, ForwardOutput, checkpoint_bytes, save_checkpoint
from dircformer.toy import simulate_fixed
from dircformer.training import (TrainConfig, _lr_at, accuracy, fast_generative_loss, finetune_classifier,
                                 generative_loss, train_classifier, train_generative)


def _batch(tokenizer, rng, n=3, hits=(4, 7, 2)):
    tracks = [random_track(rng, h, tokenizer=tokenizer) for h in hits[:n]]
    return tracks, make_batches(tracks, tokenizer, batch_size=n)[0]


def test_uniform_logits_give_log_vocab(tokenizer, rng):
    _, batch = _batch(tokenizer, rng)
    b, width = batch.spatial.shape
    out = ForwardOutput(spatial_logits=torch.zeros(b, width + N_CONTEXT, 6148, dtype=torch.float64),
                        time_logits=torch.zeros(b, width + N_CONTEXT, 5924, dtype=torch.float64))
    loss = generative_loss(out, batch)
    assert loss.space.item() == pytest.approx(math.log(6148), abs=1e-6)
    assert loss.time.item() == pytest.approx(math.log(5924), abs=1e-6)
    weighted = generative_loss(out, batch, lambda_space=0.5, lambda_time=2.0)
    assert weighted.total.item() == pytest.approx(0.5 * math.log(6148) + 2 * math.log(5924), abs=1e-6)
    assert loss.n_targets == (4 + 1) + (7 + 1) + (2 + 1)  # every hit plus EOS


def test_one_hot_logits_give_zero_loss(tokenizer, rng):
    _, batch = _batch(tokenizer, rng)
    b, width = batch.spatial.shape
    sl = torch.zeros(b, width + N_CONTEXT, 6148, dtype=torch.float64)
    tl = torch.zeros(b, width + N_CONTEXT, 5924, dtype=torch.float64)
    for i in range(b):
        for j in range(width - 1):
            sl[i, N_CONTEXT + j, batch.spatial[i, j + 1]] = 200.0
            tl[i, N_CONTEXT + j, batch.time[i, j + 1]] = 200.0
    loss = generative_loss(ForwardOutput(spatial_logits=sl, time_logits=tl), batch)
    assert loss.total.item() == pytest.approx(0.0, abs=1e-12)


def test_fast_loss_matches_full_loss(tokenizer, rng):
    model = probes.tiny_model(d_model=16, seed=3)
    _, batch = _batch(tokenizer, rng)
    full = generative_loss(model.forward_generative(batch.spatial, batch.time, batch.momentum, batch.theta,
                                                    batch.token_mask), batch)
    fast = fast_generative_loss(model, batch)
    assert fast.total.item() == pytest.approx(full.total.item(), rel=1e-12)


def test_padding_does_not_change_loss(tokenizer, rng):
    model = probes.tiny_model(d_model=16, seed=3)
    tracks, batch = _batch(tokenizer, rng)
    pairs = [tokenizer.encode(t) for t in tracks]
    wide = collate(pairs, tokenizer, pad_to=batch.spatial.shape[1] + 9)
    a = fast_generative_loss(model, batch).total.item()
    b = fast_generative_loss(model, wide).total.item()
    assert a == pytest.approx(b, rel=1e-12)


def test_loss_rejects_fully_masked_batch(tokenizer):
    model = probes.tiny_model()
    batch = make_batches([random_track(np.random.default_rng(0), 2)], tokenizer, 1)[0]
    batch.loss_mask[:] = False
    with pytest.raises(DatasetError):
        fast_generative_loss(model, batch)


def test_lr_schedule():
    cfg = TrainConfig(lr=1e-3, schedule="cosine", warmup_iters=10, max_iters=110, min_lr_ratio=0.1)
    assert _lr_at(cfg, 0) == pytest.approx(1e-4)
    assert _lr_at(cfg, 9) == pytest.approx(1e-3)
    assert _lr_at(cfg, 10) == pytest.approx(1e-3)
    assert _lr_at(cfg, 60) == pytest.approx(1e-3 * (0.1 + 0.9 * 0.5))
    assert _lr_at(cfg, 110) == pytest.approx(1e-4)
    assert _lr_at(TrainConfig(lr=2e-3), 500) == 2e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_space=-1)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="linear")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = TrainConfig(lr=1e-2, batch_size=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_overfits_small_set(tokenizer, pion_tracks):
    tracks = pion_tracks[:10]
    model = probes.tiny_model(d_model=32, n_heads=2, dtype=torch.float32, seed=0)
    cfg = TrainConfig(lr=5e-3, batch_size=10, max_iters=150, eval_every=0, weight_decay=0.0)
    _, log = train_generative(tracks, model, cfg, tokenizer)
    assert log.loss_total[-1] < 0.5 * log.loss_total[0]


def test_training_is_deterministic(tokenizer, pion_tracks):
    cfg = TrainConfig(lr=1e-3, batch_size=8, max_iters=6, eval_every=0, seed=4)
    runs = []
    for _ in range(2):
        model = probes.tiny_model(dtype=torch.float32, seed=1)
        _, log = train_generative(pion_tracks[:40], model, cfg, tokenizer)
        runs.append((checkpoint_bytes(model), log.loss_total))
    assert runs[0] == runs[1]


def test_generative_training_guards(tokenizer, pion_tracks, kaon_tracks):
    cfg = TrainConfig(max_iters=1)
    with pytest.raises(ConfigError):
        train_generative(pion_tracks[:4] + kaon_tracks[:4], probes.tiny_model(), cfg, tokenizer)
    with pytest.raises(DatasetError):
        train_generative([], probes.tiny_model(), cfg, tokenizer)
    with pytest.raises(ModeError):
        train_generative(pion_tracks[:4], probes.tiny_model(mode=CLASSIFIER), cfg, tokenizer)


def test_nonfinite_loss_dumps_batch(tokenizer, pion_tracks, tmp_path):
    model = probes.tiny_model(dtype=torch.float32)
    with torch.no_grad():
        model.time_head.bias[0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_generative(pion_tracks[:8], model, TrainConfig(max_iters=3, batch_size=4), tokenizer,
                         out_dir=tmp_path)
    dump = np.load(info.value.dump_path)
    assert dump["spatial"].shape[0] == 4


def test_checkpoint_every(tokenizer, pion_tracks, tmp_path):
    cfg = TrainConfig(max_iters=4, batch_size=4, checkpoint_every=2, eval_every=0)
    train_generative(pion_tracks[:8], probes.tiny_model(dtype=torch.float32), cfg, tokenizer, out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.ckpt")) == ["ckpt_0000002.ckpt", "ckpt_0000004.ckpt"]


def test_classifier_learns_and_logs_accuracy(tokenizer):
    # at 1.2 GeV/c the kaon ring is much smaller and dimmer: an easy, learnable split
    pions = simulate_fixed("pion", 1.2, 60.0, 150, seed=1)
    kaons = simulate_fixed("kaon", 1.2, 60.0, 150, seed=2)
    train, val = pions[:100] + kaons[:100], pions[100:] + kaons[100:]
    model = probes.tiny_model(d_model=32, mode=CLASSIFIER, dtype=torch.float32, seed=0)
    cfg = TrainConfig(lr=3e-3, batch_size=32, max_iters=120, eval_every=60)
    _, log = train_classifier(model, train, cfg, val, tokenizer)
    assert log.eval_iteration == [60, 120] and len(log.accuracy) == 2
    assert accuracy(model, val, tokenizer) > 0.6


def test_classifier_needs_both_classes(tokenizer, pion_tracks):
    with pytest.raises(DatasetError):
        train_classifier(probes.tiny_model(mode=CLASSIFIER), pion_tracks[:10], TrainConfig(max_iters=1), None,
                         tokenizer)


def test_finetune_freeze_and_source_untouched(tokenizer, pion_tracks, kaon_tracks, tmp_path):
    gen = probes.tiny_model(dtype=torch.float32, seed=5)
    path = save_checkpoint(gen, tmp_path / "gen.ckpt")
    before = path.read_bytes()
    cfg = TrainConfig(max_iters=3, batch_size=8, freeze_embeddings=True)
    clf, _ = finetune_classifier(path, pion_tracks[:20] + kaon_tracks[:20], cfg, tokenizer=tokenizer)
    assert path.read_bytes() == before
    assert torch.equal(clf.spatial_embedding.data[:-1], gen.spatial_embedding.data[:-1])
    assert not torch.equal(clf.cmhca.attn.q.weight, gen.cmhca.attn.q.weight)
