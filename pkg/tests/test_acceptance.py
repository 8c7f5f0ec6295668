"""Acceptance suite: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``. The training criteria
(collapse and regularizer monotonicity) train seven desk-scale models and take
several minutes on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from conftest import tiny_config
from test_evaluation import brute_eer, brute_min_dcf, random_set
from test_objective import toy_batch, toy_pair

from rdino import numerics as nx
from rdino.augment import AugmentPolicy, NoiseBank, add_noise_at_snr, multicrop, shuffle_features, spec_augment
from rdino.evaluation import (
    EmbeddingFileError,
    ScoreSet,
    eer,
    extract_embedding,
    load_embeddings,
    make_trials,
    min_dcf,
    save_embeddings,
    score_trials,
    synthetic_benchmark,
    write_scores,
)
from rdino.features import FeatureFileError, FeatureMatrix, Waveform, load_features, save_features, synth_corpus
from rdino.model import HeadConfig
from rdino.objective import ce_pairs, cross_correlation, dino_ce, diversity_loss, redundancy_loss, total_loss
from rdino.trainer import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


# -- gradient fidelity ---------------------------------------------------


def test_gradient_fidelity(report):
    start = time.perf_counter()
    pair = toy_pair(seed=4, perturb=0.05)
    batch = toy_batch(b=4, seed=5)
    names = sorted(pair.student)

    def fn(*leaves):
        return total_loss(batch, pair, lam=0.3, student_params=dict(zip(names, leaves))).root

    errors = nx.gradcheck(fn, [pair.student[k] for k in names], h=1e-6)
    elapsed = time.perf_counter() - start
    worst, where = max(zip(errors, names))
    ok = worst < 1e-4 and elapsed < 60
    assert report("gradient fidelity", ok, f"max rel err {worst:.2e} at {where}, {elapsed:.1f}s on the toy config")


# -- loss-term unit oracles ----------------------------------------------


def _loss_oracles():
    checks = {}
    checks["pairs == 10"] = len(ce_pairs(2, 4)) == 10
    checks["ce uniform K=4"] = abs(dino_ce(np.full((2, 2, 4), 0.25), np.log(np.full((6, 2, 4), 0.25))).item() - math.log(4)) < 1e-12
    t = np.zeros((2, 1, 2))
    t[..., 0] = 1
    checks["ce one-hot p=0.5"] = abs(dino_ce(t, np.log(np.full((6, 1, 2), 0.5))).item() - 0.6931) < 1e-4
    z = np.ones((4, 3))
    checks["dr identical rows"] = abs(diversity_loss(z, z, 1e-4).item() - 1.98) < 1e-12
    w = np.array([[0.0, 0.0], [3.0, -3.0]])
    checks["dr inactive"] = diversity_loss(w, w).item() == 0.0
    a, b = np.array([[0.0], [2.0]]), np.array([[0.0], [1.0]])
    checks["dr var=1"] = abs(diversity_loss(a, a, 0.0).item()) < 1e-15
    checks["dr var=0.25"] = abs(diversity_loss(b, b, 0.0).item() - 1.0) < 1e-15
    q = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 3)))[0]
    checks["cc orthogonal"] = np.allclose(cross_correlation(q, q).data, np.eye(3), atol=1e-9)
    r = 1 / math.sqrt(2)
    c = cross_correlation(np.eye(2), np.array([[1.0, 1.0], [1.0, -1.0]])).data
    checks["cc 2x2"] = np.allclose(c, [[r, r], [r, -r]], atol=1e-10)
    rng = np.random.default_rng(1)
    checks["cc bound"] = all(
        np.all(np.abs(cross_correlation(rng.normal(size=(8, 5)), rng.normal(size=(8, 5))).data) <= 1 + 1e-6) for _ in range(50)
    )
    checks["rer identity"] = redundancy_loss(np.eye(3)).item() == 0.0
    checks["rer ones d=3"] = redundancy_loss(np.ones((3, 3))).item() == 6.0
    checks["rer hand"] = abs(redundancy_loss(np.array([[1, 0.5], [-0.5, 1]])).item() - 0.5) < 1e-15
    checks["rer <= d(d-1)"] = all(
        0 <= redundancy_loss(cross_correlation(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))).item() <= 12 for _ in range(50)
    )
    return checks


def test_loss_term_oracles(report):
    checks = _loss_oracles()
    failed = [k for k, v in checks.items() if not v]
    assert report("loss-term unit oracles", not failed, f"{len(checks) - len(failed)}/{len(checks)} oracles" + (f"; failed {failed}" if failed else ""))


# -- collapse A/B and regularizer monotonicity ---------------------------

_RUNS: dict = {}


def desk_run(**kw):
    """Train a desk-config model on the 20x10 synthetic corpus and score the held-out list (cached)."""
    key = tuple(sorted(kw.items()))
    if key not in _RUNS:
        cfg = TrainConfig(**kw)
        start = time.perf_counter()
        res = train(cfg)
        elapsed = time.perf_counter() - start
        last = [r.mean_std for e, r in res.history if e == cfg.epochs - 1]
        bench = synthetic_benchmark(res.pair)
        _RUNS[key] = dict(std=float(np.mean(last)), eer=bench.eer, seconds=elapsed, bench=bench)
    return _RUNS[key]


@pytest.mark.slow
def test_collapse_a_b(report):
    a = desk_run(lam=0.0, centering=False, ema_m=0.0, seed=0)
    b = desk_run(lam=0.3, seed=0)
    checks = {
        "A std < 0.01": a["std"] < 0.01,
        "B std > 0.1": b["std"] > 0.1,
        "B EER < 20%": b["eer"] < 0.20,
        "runtime < 15 min": max(a["seconds"], b["seconds"]) < 900,
    }
    detail = (
        f"A std {a['std']:.2e}, B std {b['std']:.2e}, B EER {100 * b['eer']:.1f}%, "
        f"A EER {100 * a['eer']:.1f}%, runs {a['seconds']:.0f}s/{b['seconds']:.0f}s; "
        + ", ".join(f"{k} {'ok' if v else 'NO'}" for k, v in checks.items())
    )
    assert report("collapse A/B", all(checks.values()), detail)


@pytest.mark.slow
def test_regularizer_monotonicity(report):
    seeds = (0, 1, 2)
    reg = [desk_run(lam=0.3, seed=s)["eer"] for s in seeds]
    base = [desk_run(lam=0.0, seed=s)["eer"] for s in seeds]
    ok = np.mean(reg) < np.mean(base)
    detail = (
        f"mean EER lam=0.3 {100 * np.mean(reg):.2f}% vs lam=0 {100 * np.mean(base):.2f}% "
        f"(per seed {[round(100 * e, 1) for e in reg]} vs {[round(100 * e, 1) for e in base]})"
    )
    assert report("regularizer monotonicity", ok, detail)


# -- metric oracles ------------------------------------------------------


def test_metric_oracles(report):
    mismatches, worst = 0, 0.0
    for seed in range(100):
        s, l = random_set(seed)
        ss = ScoreSet(s, l)
        mismatches += eer(ss) != brute_eer(list(s), list(l))
        mismatches += min_dcf(ss) != brute_min_dcf(list(s), list(l))
        worst = max(worst, min_dcf(ss))
    ok = mismatches == 0 and worst <= 1.0
    assert report("metric oracles", ok, f"{mismatches} mismatches over 100 sets, max minDCF {worst:.4f}")


# -- determinism ---------------------------------------------------------


def _pipeline(out):
    cfg = tiny_config(seed=11)
    res = train(cfg, out_dir=out)
    corpus = synth_corpus(3, 3, 1.0, 21)
    ids = {f"u{i}": spk for i, (spk, _) in enumerate(corpus)}
    emb = {uid: extract_embedding(w, res.pair) for uid, (_, w) in zip(ids, corpus)}
    save_embeddings(emb, out / "emb.bin")
    trials = make_trials(ids, 5, 5, seed=0)
    ss = score_trials(trials, emb)
    write_scores(trials, ss, out / "scores.txt")
    metrics = f"{eer(ss)!r} {min_dcf(ss)!r}"
    return res.checkpoint.read_bytes(), (out / "emb.bin").read_bytes(), (out / "scores.txt").read_bytes(), metrics


def test_determinism(report, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    names = ("checkpoint", "embeddings", "scores", "metrics")
    diff = [n for n, x, y in zip(names, a, b) if x != y]
    assert report("determinism", not diff, "bit-identical " + ", ".join(names) if not diff else f"differs: {diff}")


# -- format round-trips --------------------------------------------------


def _raises(exc, fn):
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def test_format_round_trips(report, tmp_path):
    checks = {}
    cfg = tiny_config()
    rng = np.random.default_rng(0)
    res = train(tiny_config(epochs=1, warmup_epochs=0), out_dir=tmp_path / "run")
    ck = tmp_path / "run/final.ckpt"
    pair, opt, _ = load_checkpoint(ck)
    save_checkpoint(pair, opt, cfg, tmp_path / "again.ckpt")
    p2, o2, _ = load_checkpoint(tmp_path / "again.ckpt")
    checks["checkpoint"] = (
        all(np.array_equal(res.pair.student[k], p2.student[k]) and np.array_equal(res.pair.teacher[k], p2.teacher[k]) for k in pair.student)
        and all(np.array_equal(res.opt.velocity[k], o2.velocity[k]) for k in pair.student)
        and np.array_equal(res.pair.center, p2.center)
        and o2.step == res.opt.step
    )
    feat = rng.standard_normal((17, 80)).astype(np.float32)
    save_features(FeatureMatrix(feat), tmp_path / "f.feat")
    checks["feature cache"] = np.array_equal(load_features(tmp_path / "f.feat").frames, feat)
    emb = {f"x{i}": rng.standard_normal(16).astype(np.float32) for i in range(4)}
    save_embeddings(emb, tmp_path / "e.bin")
    back = load_embeddings(tmp_path / "e.bin")
    checks["embeddings"] = list(back) == list(emb) and all(np.array_equal(back[k], emb[k]) for k in emb)

    raw = ck.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-1])
    checks["ckpt truncated"] = _raises(CheckpointTruncatedError, lambda: load_checkpoint(tmp_path / "trunc.ckpt"))
    (tmp_path / "ver.ckpt").write_bytes(raw.replace(b"RDINO-CKPT v1", b"RDINO-CKPT v9", 1))
    checks["ckpt version"] = _raises(CheckpointVersionError, lambda: load_checkpoint(tmp_path / "ver.ckpt"))
    other = tiny_config(head=HeadConfig(hidden=(32, 32), tap_dim=48, bottleneck=16, out_dim=64))
    checks["ckpt shape"] = _raises(CheckpointShapeError, lambda: load_checkpoint(ck, other))
    (tmp_path / "bad.feat").write_bytes((tmp_path / "f.feat").read_bytes()[:-2])
    checks["feat truncated"] = _raises(FeatureFileError, lambda: load_features(tmp_path / "bad.feat"))
    (tmp_path / "bad.bin").write_bytes((tmp_path / "e.bin").read_bytes()[:-2])
    checks["emb truncated"] = _raises(EmbeddingFileError, lambda: load_embeddings(tmp_path / "bad.bin"))
    failed = [k for k, v in checks.items() if not v]
    assert report("format round-trips", not failed, f"{len(checks) - len(failed)}/{len(checks)} checks" + (f"; failed {failed}" if failed else ""))


# -- augmentation contracts ----------------------------------------------


def test_augmentation_contracts(report):
    rng = np.random.default_rng(0)
    clean = synth_corpus(1, 1, 2.0, 3)[0][1]
    bank = NoiseBank(0, seconds=2.0, n_babble=2)
    snr_err = 0.0
    for snr in (0, 5, 10, 15):
        for _ in range(5):
            noise = bank.draw(len(clean), rng)
            mixed = add_noise_at_snr(clean, noise, snr).samples
            measured = 10 * math.log10(np.mean(clean.samples**2) / np.mean((mixed - clean.samples) ** 2))
            snr_err = max(snr_err, abs(measured - snr))
    x = rng.standard_normal((200, 80)) + 10
    rows = cols = 0
    for seed in range(1000):
        z = spec_augment(FeatureMatrix(x), np.random.default_rng(seed)).frames == 0
        rows, cols = max(rows, z.all(axis=1).sum()), max(cols, z.all(axis=0).sum())
    multiset_ok = True
    for t, seed in itertools.product((7, 50, 51, 133, 400), range(5)):
        m = rng.standard_normal((t, 4))
        out = shuffle_features(FeatureMatrix(m), np.random.default_rng(seed)).frames
        multiset_ok &= sorted(map(tuple, out)) == sorted(map(tuple, m))
    shapes = set()
    for strategy, secs in itertools.product(("wav", "spec", "shuffle", "none"), (2.5, 4.0, 6.0)):
        w = Waveform(rng.uniform(-0.5, 0.5, int(secs * 16000)))
        vs = multicrop(w, AugmentPolicy(strategy=strategy), rng, bank)
        shapes.add((len(vs.globals), len(vs.locals)))
    ok = snr_err <= 0.1 and rows <= 15 and cols <= 6 and multiset_ok and shapes == {(2, 4)}
    detail = f"max SNR err {snr_err:.2e} dB, max masked rows/cols {rows}/{cols}, shuffle multiset {'ok' if multiset_ok else 'BROKEN'}, view counts {sorted(shapes)}"
    assert report("augmentation contracts", ok, detail)
