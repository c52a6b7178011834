"""Acceptance gate: one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. The end-to-end overfit criterion trains a channel-reduced model on a
synthetic 20-speaker corpus and is the long pole (several minutes).
"""

import dataclasses
import sys
import time

import numpy as np
import pytest

from yvec import aggregator, analysis, audio, cli, encoder, evaluator, trainer
from yvec import numerics as nm
from yvec.model import SpeakerNet
from fdcheck import assert_grads_match
from test_evaluator import brute_force_eer, brute_force_mindcf
from conftest import tiny_model, tiny_train_cfg


def _verdict(n: int, description: str) -> None:
    # bypass pytest capture so the verdict line shows in any run mode
    print(f"\n[ACCEPTANCE {n:02d}] PASS - {description}", file=sys.__stdout__)
    print(f"[ACCEPTANCE {n:02d}] PASS - {description}")


def t64(data, requires_grad=False):
    return nm.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def _scalarized(opfn, rng):
    """Fixed random projection of an op's output to a scalar loss.

    The projection weights are drawn once so repeated builds evaluate the
    same function (a requirement for finite differencing).
    """
    w = nm.Tensor(rng.uniform(0.5, 1.5, size=opfn().shape))
    return lambda: nm.tsum(nm.mul(opfn(), w))


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_01_gradient_suite():
    started = time.time()
    n_shapes = 20

    for i in range(n_shapes):
        rng = np.random.default_rng([1, i])
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        dilation = int(rng.integers(1, 3))
        length = int(rng.integers((k - 1) * dilation + 1, 24))
        x = t64(rng.uniform(-1, 1, (cin, length)), requires_grad=True)
        w = t64(rng.uniform(-1, 1, (cout, cin, k)), requires_grad=True)
        b = t64(rng.uniform(-1, 1, cout), requires_grad=True)
        assert_grads_match(
            _scalarized(lambda: nm.conv1d_valid(x, w, b, stride=stride,
                                                dilation=dilation), rng), [x, w, b])

    for i in range(n_shapes):
        rng = np.random.default_rng([2, i])
        c = int(rng.integers(1, 4))
        window = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 4))
        length = int(rng.integers(window, 20))
        x = t64(rng.uniform(-1, 1, (c, length)), requires_grad=True)
        assert_grads_match(_scalarized(lambda: nm.maxpool1d(x, window, stride), rng), [x])

    for i in range(n_shapes):
        rng = np.random.default_rng([3, i])
        x = t64(rng.uniform(-1, 1, (int(rng.integers(1, 6)), int(rng.integers(1, 9)))),
                requires_grad=True)
        assert_grads_match(_scalarized(lambda: nm.avgpool_time(x), rng), [x])

    for i in range(n_shapes):
        rng = np.random.default_rng([4, i])
        f, t = int(rng.integers(2, 7)), int(rng.integers(1, 7))
        x = t64(rng.uniform(-1, 1, (f, t)), requires_grad=True)
        g = t64(rng.uniform(0.5, 1.5, f), requires_grad=True)
        b = t64(rng.uniform(-0.5, 0.5, f), requires_grad=True)
        assert_grads_match(
            _scalarized(lambda: nm.layer_norm_channels(x, g, b), rng), [x, g, b])

    for i in range(n_shapes):
        rng = np.random.default_rng([5, i])
        din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        w = t64(rng.uniform(-1, 1, (dout, din)), requires_grad=True)
        b = t64(rng.uniform(-1, 1, dout), requires_grad=True)
        if i % 2 == 0:
            x = t64(rng.uniform(-1, 1, din), requires_grad=True)
        else:
            x = t64(rng.uniform(-1, 1, (int(rng.integers(1, 5)), din)), requires_grad=True)
        assert_grads_match(_scalarized(lambda: nm.linear_affine(x, w, b), rng), [x, w, b])

    for op_idx, op in enumerate([nm.relu,
                                 lambda t: nm.leaky_relu(t, 0.2),
                                 nm.sigmoid]):
        for i in range(n_shapes):
            rng = np.random.default_rng([6, op_idx, i])
            x = t64(rng.uniform(-2, 2, int(rng.integers(2, 20))), requires_grad=True)
            assert_grads_match(_scalarized(lambda: op(x), rng), [x])

    for i in range(n_shapes):
        rng = np.random.default_rng([7, i])
        f, t = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        x = t64(rng.uniform(-1, 1, (f, t)), requires_grad=True)
        w1 = t64(rng.uniform(-1, 1, (f, f)), requires_grad=True)
        b1 = t64(rng.uniform(-1, 1, f), requires_grad=True)
        assert_grads_match(
            _scalarized(lambda: encoder.recalibrate_frequency(x, w1, b1), rng),
            [x, w1, b1])
        w2 = t64(rng.uniform(-1, 1, (f, 1)), requires_grad=True)
        b2 = t64(rng.uniform(-1, 1, 1), requires_grad=True)
        assert_grads_match(
            _scalarized(lambda: encoder.recalibrate_time(x, w2, b2), rng),
            [x, w2, b2])

    for i in range(n_shapes):
        rng = np.random.default_rng([8, i])
        d, t = int(rng.integers(1, 5)), int(rng.integers(2, 8))
        x = t64(rng.uniform(-1, 1, (d, t)), requires_grad=True)
        assert_grads_match(_scalarized(lambda: aggregator.stat_pool(x), rng), [x])

    am = aggregator.AmSoftmaxConfig(scale=30.0, margin=0.35)
    for i in range(n_shapes):
        rng = np.random.default_rng([9, i])
        batch, dim = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        classes = int(rng.integers(2, 6))
        feats = t64(rng.uniform(-1, 1, (batch, dim)), requires_grad=True)
        weights = t64(rng.uniform(-1, 1, (classes, dim)), requires_grad=True)
        labels = rng.integers(0, classes, size=batch)
        assert_grads_match(
            lambda: aggregator.am_softmax_loss(feats, labels, weights, am),
            [feats, weights])

    elapsed = time.time() - started
    assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s, budget is 2 min"
    _verdict(1, f"finite-difference checks on >=20 shapes per op in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. shape chain


def test_criterion_02_shape_chain():
    cfg = encoder.get_preset("yvector-5")
    params = encoder.init_encoder_params(cfg, np.random.default_rng(0))
    wave = nm.Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 62400)).astype(np.float32))

    branch_lengths = []
    for i, b in enumerate(cfg.branches):
        h = nm.conv1d_valid(wave, params[f"branch{i}.filter.w"],
                            params[f"branch{i}.filter.b"], stride=b.stride)
        h = nm.conv1d_valid(h, params[f"branch{i}.dm.w"], params[f"branch{i}.dm.b"],
                            stride=b.dm_stride)
        branch_lengths.append(h.shape[-1])
    assert branch_lengths == [3465, 3464, 3461]

    concat = encoder.multi_scale_filter(wave, cfg, params)
    assert concat.shape == (512, 3461)

    h = concat
    ds_lengths = []
    for j in range(3):
        h = encoder.downsample_block(h, cfg, params, j)
        ds_lengths.append(h.shape[-1])
    assert ds_lengths == [1729, 864, 431]

    aggregated = encoder.encode(wave, cfg, params)
    assert aggregated.shape == (1536, 431)

    tdnn_cfg = aggregator.TdnnConfig(n_classes=20)
    agg_params = aggregator.init_aggregator_params(tdnn_cfg, 1536, np.random.default_rng(2))
    frames = aggregator.tdnn_forward(aggregated, tdnn_cfg, agg_params)
    assert frames.shape == (1500, 417)

    pooled = aggregator.stat_pool(frames)
    assert pooled.shape == (3000,)

    emb = aggregator.embed_extract(pooled, tdnn_cfg, agg_params)
    assert emb.vector.shape == (512,)
    _verdict(2, "62400 samples -> 3465/3464/3461 -> 512x3461 -> 1729/864/431 "
                "-> 1536x431 -> 417 frames -> 3000 -> 512")


# ---------------------------------------------------------------------------
# 3. structural invariants


def test_criterion_03_structural_invariants():
    cfg = encoder.get_preset("yvector-5")
    products = [b.stride * b.dm_stride for b in cfg.branches]
    assert products == [18, 18, 18]
    assert [b.dm_channels for b in cfg.branches] == [160, 160, 192]
    assert cfg.concat_channels == 512
    for b in cfg.branches:
        assert b.stride / b.kernel == 0.5
    _verdict(3, "stride products 18/18/18, concat 512 = 160+160+192, "
                "first-layer kernel/stride ratio 0.5")


# ---------------------------------------------------------------------------
# 4. tf-SE boundedness


def test_criterion_04_tfse_boundedness():
    rng = np.random.default_rng(44)
    for _ in range(1000):
        f = int(rng.integers(1, 7))
        t = int(rng.integers(1, 9))
        x = rng.uniform(-4, 4, size=(f, t))
        w1 = rng.uniform(-4, 4, size=(f, f))
        b1 = rng.uniform(-4, 4, size=f)
        w2 = rng.uniform(-4, 4, size=(f, 1))
        b2 = rng.uniform(-4, 4, size=1)
        y1 = encoder.recalibrate_frequency(t64(x), t64(w1), t64(b1)).data
        y2 = encoder.recalibrate_time(t64(x), t64(w2), t64(b2)).data
        assert (np.abs(y1) <= np.abs(x)).all()
        assert (np.abs(y2) <= np.abs(x)).all()

    x = rng.uniform(-3, 3, size=(5, 6))
    half_f = encoder.recalibrate_frequency(t64(x), t64(np.zeros((5, 5))),
                                           t64(np.zeros(5))).data
    half_t = encoder.recalibrate_time(t64(x), t64(np.zeros((5, 1))),
                                      t64(np.zeros(1))).data
    assert np.array_equal(half_f, 0.5 * x)
    assert np.array_equal(half_t, 0.5 * x)
    _verdict(4, "|out| <= |in| over 1000 draws; zero-parameter gates halve exactly")


# ---------------------------------------------------------------------------
# 5. scoring oracles


def test_criterion_05_scoring_oracles():
    rng = np.random.default_rng(55)
    checked = 0
    while checked < 200:
        n = int(rng.integers(4, 51))
        scores = np.round(rng.uniform(-1, 1, size=n), 3)
        labels = rng.integers(0, 2, size=n).astype(bool)
        if labels.all() or not labels.any():
            continue
        s = evaluator.TrialScoreSet(scores, labels)
        eer, _ = evaluator.compute_eer(s)
        assert abs(eer - brute_force_eer(scores, labels)) < 1e-9
        dcf, _ = evaluator.compute_mindcf(s)
        assert abs(dcf - brute_force_mindcf(scores, labels)) < 1e-9
        for transform in (np.exp, lambda v: 5.0 * v - 2.0):
            mapped, _ = evaluator.compute_eer(
                evaluator.TrialScoreSet(transform(scores), labels))
            assert mapped == pytest.approx(eer, abs=1e-12)
        checked += 1

    def ss(targets, nontargets):
        return evaluator.TrialScoreSet(
            np.array(list(targets) + list(nontargets), dtype=float),
            np.array([True] * len(targets) + [False] * len(nontargets)))

    assert evaluator.compute_eer(ss([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert evaluator.compute_eer(ss([0.8, 0.2], [0.7, 0.1]))[0] == 0.5
    assert evaluator.compute_eer(ss([0.1], [0.9]))[0] == 1.0
    assert evaluator.compute_mindcf(ss([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert evaluator.compute_mindcf(ss([0.5, 0.5], [0.5, 0.5]))[0] == 1.0
    assert evaluator.compute_mindcf(ss([0.8, 0.2], [0.7, 0.1]))[0] == pytest.approx(0.5, abs=1e-12)
    _verdict(5, "sweep == brute force on 200 sets; worked EER 0/0.5/1 and "
                "minDCF 0/1/0.5 exact; monotone-transform invariant")


# ---------------------------------------------------------------------------
# 6. CFR checks


def test_criterion_06_cfr_checks():
    impulse = analysis.cfr([np.array([1.0])])
    assert np.abs(impulse.cfr_linear - 1.0 / np.sqrt(129.0)).max() < 1e-12

    rng = np.random.default_rng(66)
    filters = [rng.uniform(-1, 1, size=16) for _ in range(8)]
    base = analysis.cfr(filters)
    scaled = analysis.cfr([f * g for f, g in zip(filters, rng.uniform(0.01, 50.0, 8))])
    assert np.abs(scaled.cfr_linear - base.cfr_linear).max() < 1e-9

    for split in [1, 3, 5]:
        union = analysis.cfr(filters)
        parts = analysis.cfr(filters[:split]).cfr_linear + \
            analysis.cfr(filters[split:]).cfr_linear
        assert np.allclose(union.cfr_linear, parts, rtol=1e-13, atol=1e-13)

    n = np.arange(256)
    for bin_idx in [8, 25, 60, 100]:
        tone = np.cos(2 * np.pi * bin_idx * n / 256)
        assert int(np.argmax(analysis.dft_magnitude_256(tone))) == bin_idx
    _verdict(6, "impulse CFR = 1/sqrt(129) within 1e-12; scaling invariance 1e-9; "
                "additivity exact; pure tones peak at their bins")


# ---------------------------------------------------------------------------
# 7. end-to-end overfit (the long pole)


@pytest.fixture(scope="session")
def acceptance_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_corpus")
    manifest = audio.synth_corpus_generate(root, n_speakers=20, utts_per_speaker=20,
                                           duration_s=5.0, seed=20200526)
    return root, manifest


def test_criterion_07_end_to_end_overfit(acceptance_corpus):
    started = time.time()
    root, manifest = acceptance_corpus

    train_ids = [r.utterance_id for r in manifest.records
                 if int(r.utterance_id[-7:-4]) < 15]
    held_ids = [r.utterance_id for r in manifest.records
                if int(r.utterance_id[-7:-4]) >= 15]
    corpus = audio.load_corpus(manifest, train_ids)

    enc_cfg = encoder.scale_widths(encoder.get_preset("yvector-5"), 0.25)
    tdnn_cfg = dataclasses.replace(aggregator.TdnnConfig(n_classes=20).scaled(0.25),
                                   n_classes=20)
    net = SpeakerNet(enc_cfg, tdnn_cfg, seed=1)
    # desk-scale overrides: the margin loss needs the smaller step size at
    # this width; 0.5 s crops keep a step under a second on a few cores
    cfg = trainer.TrainConfig(lr0=1e-4, epochs=40, batch_size=32, crop_seconds=0.5,
                              utterances_per_epoch=320, seed=1)
    vels = trainer.init_velocities(net)
    steps = 0
    final_accuracy = 0.0
    for epoch in range(cfg.epochs):
        m = trainer.train_epoch(net, corpus, cfg, epoch, vels)
        steps += m.n_batches
        final_accuracy = m.accuracy
        if epoch % 5 == 0 or final_accuracy >= 0.95:
            print(f"  [overfit] epoch {epoch}: loss {m.mean_loss:.3f} "
                  f"acc {m.accuracy:.3f} ({steps} steps)")
        if final_accuracy >= 0.99 and epoch >= 10:
            break
    assert steps <= 2000, f"used {steps} steps"
    assert final_accuracy >= 0.95, f"final training accuracy {final_accuracy:.3f}"

    embeddings = {}
    for start in range(0, len(held_ids), 25):
        chunk = held_ids[start:start + 25]
        waves = []
        for uid in chunk:
            u = audio.normalize_by_max(audio.read_wav_pcm16(root / uid))
            waves.append(audio.center_crop(u.samples, audio.DEFAULT_CROP_SAMPLES))
        for uid, vec in zip(chunk, net.embed_batch(np.stack(waves))):
            embeddings[uid] = aggregator.SpeakerEmbedding(vec, uid)

    trials = audio.make_trial_list(manifest, 500, seed=99, utterance_ids=held_ids)
    assert len(trials) == 500
    s = evaluator.score_trials(trials, embeddings)
    eer, _ = evaluator.compute_eer(s)
    assert eer <= 0.05, f"held-out EER {eer:.4f}"
    ci_low, ci_high = evaluator.bootstrap_eer_ci(s, n_resamples=1000, seed=5)
    assert ci_low - 1e-12 <= eer <= ci_high + 1e-12

    elapsed = time.time() - started
    assert elapsed < 1800.0, f"overfit run took {elapsed:.0f}s, budget 30 min"
    _verdict(7, f"train acc {final_accuracy:.3f} in {steps} steps; held-out EER "
                f"{eer:.4f} in CI [{ci_low:.4f}, {ci_high:.4f}]; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. ablation / scale harness


def test_criterion_08_ablation_harness(session_toy_corpus):
    corpus = session_toy_corpus
    flatness = {}
    for preset in encoder.PRESET_NAMES:
        enc_cfg = encoder.get_preset(preset)
        tdnn_cfg = aggregator.TdnnConfig(n_classes=corpus.n_classes)
        net = SpeakerNet(enc_cfg, tdnn_cfg, seed=2)
        cfg = trainer.TrainConfig(lr0=1e-4, epochs=1, batch_size=4,
                                  crop_seconds=0.25, utterances_per_epoch=8, seed=2)
        metrics = trainer.train_epoch(net, corpus, cfg, 0, trainer.init_velocities(net))
        assert np.isfinite(metrics.mean_loss)
        emb = net.embed_batch(np.stack([u.samples[:4000]
                                        for u in corpus.utterances[:2]]))
        assert emb.shape == (2, tdnn_cfg.embed_dim)
        assert np.isfinite(emb).all()
        results = analysis.encoder_cfrs(net.enc_cfg, net.enc_params)
        stats = analysis.flatness_stats(results[-1])
        flatness[preset] = stats
        print(f"  [preset {preset}] pooled CFR: stddev {stats.stddev_db:.2f} dB, "
              f"peak-mean {stats.peak_minus_mean_db:.2f} dB, "
              f"argmax {stats.argmax_hz:.0f} Hz")

    # informational echo of the flatness comparison: multi-scale banks are
    # reported against the single-scale ones, but toy training cannot
    # guarantee the learned-filter behavior, so this is not pass/fail
    multi = flatness["multi-32"].stddev_db
    singles = {name: flatness[name].stddev_db
               for name in ("single-low", "single-mid", "single-high")}
    print(f"  [info] multi-32 pooled stddev {multi:.2f} dB vs singles "
          + ", ".join(f"{k}={v:.2f}" for k, v in singles.items())
          + f"; multi-scale fluctuation {'<' if multi < min(singles.values()) else '>='}"
            " 5 dB target is informational only")
    _verdict(8, "all 9 presets train, embed, and emit CFR flatness stats "
                "without shape errors")


# ---------------------------------------------------------------------------
# 9. reproducibility


def test_criterion_09_reproducibility(tmp_path, session_toy_corpus, monkeypatch):
    monkeypatch.setenv("YVEC_STRICT_DETERMINISM", "1")

    corpus_dir = tmp_path / "corpus"
    audio.synth_corpus_generate(corpus_dir, n_speakers=3, utts_per_speaker=3,
                                duration_s=0.6, seed=13)
    flags = ["--preset", "yvector-5", "--width-scale", "0.05", "--epochs", "2",
             "--batch-size", "4", "--crop-seconds", "0.16", "--utts-per-epoch", "8",
             "--lr0", "0.0001", "--seed", "21"]
    out = tmp_path / "run"
    outs = []
    for _ in range(2):  # same out dir so the embedded config snapshots agree
        assert cli.main(["train", "--corpus", str(corpus_dir / "manifest.json"),
                         "--out", str(out)] + flags) == 0
        outs.append((out / "checkpoint.yvec").read_bytes())
    assert outs[0] == outs[1], "same-seed strict-mode runs differ"

    ckpt = trainer.checkpoint_load(out / "checkpoint.yvec")
    resaved = tmp_path / "resaved.yvec"
    trainer.checkpoint_save(resaved, ckpt.build_model(), ckpt.velocities,
                            epoch=ckpt.epoch, config_snapshot=ckpt.config_snapshot,
                            seed=ckpt.seed)
    assert resaved.read_bytes() == outs[0], "checkpoint round trip not bit-exact"

    # resumed run matches an unbroken run step for step (10 steps = 5 epochs)
    cfg = tiny_train_cfg(epochs=6, utterances_per_epoch=8, batch_size=4, seed=31)
    losses_cont = []
    net_a = tiny_model(session_toy_corpus.n_classes, seed=31)
    vels_a = trainer.init_velocities(net_a)
    for e in range(6):
        trainer.train_epoch(net_a, session_toy_corpus, cfg, e, vels_a,
                            log_fn=lambda r: losses_cont.append(r["loss"]))

    net_b = tiny_model(session_toy_corpus.n_classes, seed=31)
    vels_b = trainer.init_velocities(net_b)
    trainer.train_epoch(net_b, session_toy_corpus, cfg, 0, vels_b)
    ckpt_path = tmp_path / "resume.yvec"
    trainer.checkpoint_save(ckpt_path, net_b, vels_b, epoch=1, seed=31)
    loaded = trainer.checkpoint_load(ckpt_path)
    net_c = loaded.build_model()
    vels_c = dict(loaded.velocities)
    losses_resumed = []
    for e in range(1, 6):
        trainer.train_epoch(net_c, session_toy_corpus, cfg, e, vels_c,
                            log_fn=lambda r: losses_resumed.append(r["loss"]))
    assert len(losses_resumed) == 10
    assert losses_cont[2:] == losses_resumed, "resumed steps diverge from unbroken run"
    for (name, pa), (_, pc) in zip(net_a.named_parameters(), net_c.named_parameters()):
        assert np.array_equal(pa.data, pc.data), name
    _verdict(9, "bit-identical same-seed checkpoints; bit-exact round trip; "
                "resume matches unbroken run for 10 steps")


# ---------------------------------------------------------------------------
# 10. learning-rate schedule


def test_criterion_10_lr_schedule():
    cfg = trainer.TrainConfig()
    assert trainer.lr_at_epoch(cfg, 0) == 0.01
    assert trainer.lr_at_epoch(cfg, 59) == 0.01
    assert trainer.lr_at_epoch(cfg, 60) == 0.005
    assert trainer.lr_at_epoch(cfg, 120) == 0.0025
    _verdict(10, "lr at epochs 0/59/60/120 is 0.01/0.01/0.005/0.0025 exactly")
