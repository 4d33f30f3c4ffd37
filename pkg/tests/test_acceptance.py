"""
Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the terminal summary.

Criteria 6-9 share one desk-scale pipeline driven through the command line:
a 600-image bilingual corpus (400 train / 100 val / 100 test, 12 concepts),
an English model on the first half of the training images and a Japanese
model on the second half, the val images as unseen pivots and the test
images as the retrieval pool.
"""

import json
import time

import numpy as np
import pytest

from vgs import data as D
from vgs import model as M
from vgs import numcore as nc
from vgs import retrieval as R
from vgs.analysis import find_peaks
from vgs.cli import main
from vgs.numcore import make_rng

import oracles
from conftest import ACCEPTANCE, perturbed_params, random_batch, tiny_config

SYNTH = {"n_concepts": 12, "n_images": 600, "splits": {"train": 400, "val": 100, "test": 100}}
SYNTH_SEED = 1
MODEL_SEEDS = (0, 1, 2)
DESK = ["--embed-dim", 32, "--conv-channels", 32, "--gru-layers", 2, "--attention-layers", "1,2",
        "--batch-size", 32, "--lr", 1e-3, "--epochs", 20, "--threads", 1]
POOL = 100


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def run(*argv):
    code = main([str(a) for a in argv])
    assert code == 0, f"vgs {argv[0]} exited with {code}"


# ---------------------------------------------------------------------------
# 1-5: properties against oracles
# ---------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst, failures = 0.0, []
    for seed in range(20):
        config = tiny_config(embed_dim=4, gru_hidden=4, image_dim=6, mfcc_dim=4)
        params = perturbed_params(config, seed)
        feats, images = random_batch(config, 3, seed, t_range=(9, 12))

        def f(ps):
            loss, grads = M.loss_and_grads(ps, config, feats, images)
            ps.set_grads(grads)
            return loss

        rep = nc.grad_check(f, params, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failures.append((seed, str(rep)))
    elapsed = time.perf_counter() - t0
    ok = not failures and worst <= 1e-4 and elapsed < 60
    record(1, ok, f"20 seeds, max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok, failures


def test_criterion_2_loss_contract():
    solved = M.hinge_loss_from_distances(np.array([[0.1, 0.9], [0.9, 0.1]]), 0.2)[0]
    inverted = M.hinge_loss_from_distances(np.array([[0.9, 0.1], [0.1, 0.9]]), 0.2)[0]
    rng = make_rng(2, "loss")
    worst_neg, worst_perm = 0.0, 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 12)), int(rng.integers(2, 9))
        U = nc.l2_normalize(rng.normal(size=(n, d)))
        I = nc.l2_normalize(rng.normal(size=(n, d)))
        margin = float(rng.uniform(0.0, 1.0))
        loss = M.batch_loss(U, I, margin)
        perm = rng.permutation(n)
        permuted = M.batch_loss(U[perm], I[perm], margin)
        worst_neg = min(worst_neg, loss)
        worst_perm = max(worst_perm, abs(loss - permuted) / max(1.0, abs(loss)))
    ok = solved == 0.0 and inverted == 4.0 and worst_neg >= 0.0 and worst_perm <= 1e-12
    record(2, ok, f"solved {solved}, inverted {inverted}; 200 batches: min loss {worst_neg}, "
                  f"max permutation change {worst_perm:.1e}")
    assert ok


def test_criterion_3_peak_oracle():
    rng = make_rng(3, "peaks")
    mismatches, plateaus = [], 0
    for k in range(1000):
        n = int(rng.integers(1, 201))
        if k % 3 == 0:
            x = rng.dirichlet(np.ones(n))
        else:
            # quantized probability vectors carry runs of equal values
            levels = int(rng.integers(2, 8))
            x = np.floor(rng.random(n) * levels) + 1.0
            x = x / x.sum()
        plateaus += oracles.has_plateau(x)
        got = find_peaks(x).tolist()
        if got != oracles.peaks(x):
            mismatches.append(k)
    ok = not mismatches and plateaus >= 100
    record(3, ok, f"1000 vectors (lengths 1-200), {plateaus} with plateaus, {len(mismatches)} mismatches")
    assert ok, mismatches[:10]


def test_criterion_4_ranking_oracle():
    rng = make_rng(4, "ranking")
    mismatches, monotone = 0, True
    for trial in range(100):
        n_img = int(rng.integers(1, 201))
        n_q = int(rng.integers(1, 60))
        d = int(rng.integers(2, 6))
        U = nc.l2_normalize(rng.normal(size=(n_q, d)))
        I = nc.l2_normalize(rng.normal(size=(n_img, d)))
        if trial % 4 == 0:
            I = np.round(I, 1)  # exact ties exercise the index tie-break
        gold = rng.integers(0, n_img, size=n_q)
        res = R.rank_images(U, I, gold)
        D_ = oracles.cosine_distances(U.tolist(), I.tolist())
        expect = [oracles.rank(D_[q], int(gold[q])) for q in range(n_q)]
        mismatches += res.ranks.tolist() != expect
        mismatches += (res.r1, res.r5, res.r10) != oracles.recalls(expect)
        mismatches += res.median_rank != oracles.median(expect)
        monotone &= res.r1 <= res.r5 <= res.r10

        pool, P = int(rng.integers(1, 41)), int(rng.integers(1, 9))
        src = rng.uniform(0, 2, size=(pool, P))
        tgt = rng.uniform(0, 2, size=(pool, P))
        pairing = rng.permutation(pool)
        xres = R.crosslingual_rank(R.PivotIndex(list(range(P)), src, tgt), pairing)
        S = oracles.crosslingual_scores(src.tolist(), tgt.tolist())
        xexpect = [oracles.rank(S[a], int(pairing[a])) for a in range(pool)]
        mismatches += xres.ranks.tolist() != xexpect
        mismatches += (xres.r1, xres.r5, xres.r10) != oracles.recalls(xexpect)
        mismatches += xres.median_rank != oracles.median(xexpect)
        monotone &= xres.r1 <= xres.r5 <= xres.r10
    ok = mismatches == 0 and monotone
    record(4, ok, f"100 trials (pools <= 200) x 2 rankers, {mismatches} mismatches, monotone recalls {monotone}")
    assert ok


def test_criterion_5_chance():
    t0 = time.perf_counter()
    medians = []
    for seed in range(5):
        rng = make_rng(seed, "chance")
        U = nc.l2_normalize(rng.normal(size=(5000, 32)))
        I = nc.l2_normalize(rng.normal(size=(5000, 32)))
        medians.append(R.rank_images(U, I, np.arange(5000)).median_rank)
    rng = make_rng(5, "chance-xl")
    n_img, P = 1000, 100
    ids = [f"img{i}" for i in range(n_img) for _ in range(5)]
    pivots = [nc.l2_normalize(rng.normal(size=(P, 32))) for _ in range(2)]
    src = M.distance_matrix(nc.l2_normalize(rng.normal(size=(len(ids), 32))), pivots[0])
    tgt = M.distance_matrix(nc.l2_normalize(rng.normal(size=(len(ids), 32))), pivots[1])
    xl = R.subsample_eval(R.PivotIndex(list(range(P)), src, tgt), ids, ids, n_trials=10, pool=1000, seed=5)
    elapsed = time.perf_counter() - t0
    ok = all(2300 <= m <= 2700 for m in medians) and 0.0 <= xl.r1 <= 0.004 and elapsed < 120
    record(5, ok, f"5000-pool medians {[round(m, 1) for m in medians]} (need [2300, 2700]); "
                  f"1000-pool cross-lingual R@1 {xl.r1:.4f} (need <= 0.004), median {xl.median_rank:.1f}; "
                  f"{elapsed:.1f}s (limit 120s)")
    assert ok


# ---------------------------------------------------------------------------
# 6-9: desk-scale pipeline
# ---------------------------------------------------------------------------

def pipeline(root, seeds=(MODEL_SEEDS[0],)):
    """Synthesize, train, evaluate, analyze and run cross-lingual retrieval; returns timings."""
    t = {}
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(json.dumps(SYNTH))
    corpus = root / "corpus"
    t0 = time.perf_counter()
    run("synth", "--spec", root / "spec.json", "--seed", SYNTH_SEED, "--out", corpus)
    t["synth"] = time.perf_counter() - t0
    for seed in seeds:
        t0 = time.perf_counter()
        run("train", "--manifest", corpus / "en" / "train.jsonl", "--half", "first", "--seed", seed,
            "--out", root / f"en_s{seed}", *DESK)
        t[f"train_en_s{seed}"] = time.perf_counter() - t0
        run("analyze", "--checkpoint", root / f"en_s{seed}" / "model.vgsc",
            "--manifest", corpus / "en" / "test.jsonl", "--train-manifest", corpus / "en" / "train.jsonl",
            "--seed", seed, "--threads", 1, "--out", root / f"analysis_en_s{seed}")
    s0 = seeds[0]
    t0 = time.perf_counter()
    run("eval", "--checkpoint", root / f"en_s{s0}" / "model.vgsc", "--manifest", corpus / "en" / "test.jsonl",
        "--threads", 1, "--out", root / "eval_en")
    t["eval"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run("train", "--manifest", corpus / "ja" / "train.jsonl", "--half", "second", "--seed", s0,
        "--out", root / f"ja_s{s0}", *DESK)
    t["train_ja"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run("xlingual", "--src-checkpoint", root / f"en_s{s0}" / "model.vgsc",
        "--tgt-checkpoint", root / f"ja_s{s0}" / "model.vgsc",
        "--src-manifest", corpus / "en" / "test.jsonl", "--tgt-manifest", corpus / "ja" / "test.jsonl",
        "--pivot-manifest", corpus / "en" / "val.jsonl",
        "--src-train-manifest", corpus / "en" / "train.jsonl", "--src-half", "first",
        "--tgt-train-manifest", corpus / "ja" / "train.jsonl", "--tgt-half", "second",
        "--trials", 10, "--pool", POOL, "--names", "en,ja", "--seed", s0, "--threads", 1,
        "--out", root / "xlingual")
    t["xlingual"] = time.perf_counter() - t0
    return t


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    timings = pipeline(root / "run1", MODEL_SEEDS)
    return root, timings


def test_criterion_6_grounding(desk):
    root, t = desk
    m = json.loads((root / "run1" / "eval_en" / "metrics.json").read_text())["speech->image"]
    chance = 10 / m["pool_size"]
    manifest = D.load_manifest(root / "run1" / "corpus" / "en" / "train.jsonl")
    elapsed = t["synth"] + t[f"train_en_s{MODEL_SEEDS[0]}"] + t["eval"]
    ok = m["pool_size"] == POOL and m["R@10"] >= 5 * chance and elapsed <= 15 * 60
    record(6, ok, f"{len(manifest.image_ids())} train images x 5 captions, 12 concepts, 20 epochs: test R@10 "
                  f"{m['R@10']:.3f} vs 5x chance {5 * chance:.2f} (pool {m['pool_size']}), "
                  f"median rank {m['median_rank']}; {elapsed:.0f}s")
    assert ok


def test_criterion_7_noun_bias(desk):
    root, _ = desk
    rows, passes = [], 0
    for seed in MODEL_SEEDS:
        report = json.loads((root / "run1" / f"analysis_en_s{seed}" / "report.json").read_text())
        obs = report["observed"]["percentages"]["NOUN"]
        base = report["baseline"]["percentages"]["NOUN"]
        ratio = obs / base if base > 0 else float("inf")
        passes += ratio >= 1.2
        rows.append(f"seed {seed}: {obs:.1f}% vs {base:.1f}% (x{ratio:.2f})")
    ok = passes >= 2
    record(7, ok, f"NOUN under peaks vs baseline, {passes}/3 seeds >= x1.2: " + "; ".join(rows))
    assert ok


def test_criterion_8_crosslingual(desk):
    root, t = desk
    metrics = json.loads((root / "run1" / "xlingual" / "metrics.json").read_text())
    corpus = root / "run1" / "corpus"
    pivots = D.load_manifest(corpus / "en" / "val.jsonl").image_ids()
    seen = set(D.split_half(D.load_manifest(corpus / "en" / "train.jsonl"), "first").image_ids()) | \
        set(D.split_half(D.load_manifest(corpus / "ja" / "train.jsonl"), "second").image_ids())
    chance = (POOL + 1) / 2
    ok = len(pivots) >= 100 and not seen & set(pivots)
    parts = []
    for direction in ("en->ja", "ja->en"):
        m = metrics[direction]
        ok &= m["pool_size"] == POOL and m["median_rank"] <= 0.5 * chance
        parts.append(f"{direction} median {m['median_rank']:.2f} R@10 {m['R@10']:.3f}")
    elapsed = t[f"train_en_s{MODEL_SEEDS[0]}"] + t["train_ja"] + t["xlingual"]
    ok &= elapsed <= 30 * 60
    record(8, ok, f"{len(pivots)} unseen pivots, pool {POOL}: " + "; ".join(parts) +
                  f" (need <= {0.5 * chance:.2f}); {elapsed:.0f}s")
    assert ok


def _strip_wall_time(path):
    return [{k: v for k, v in json.loads(line).items() if k != "wall_time_s"}
            for line in path.read_text().splitlines()]


def test_criterion_9_reproducibility(desk):
    root, _ = desk
    pipeline(root / "run2", (MODEL_SEEDS[0],))
    a, b = root / "run1", root / "run2"
    s0 = MODEL_SEEDS[0]
    skip = ("resolved_config.json",)
    compared = {
        "corpus": D.tree_digest(a / "corpus", skip) == D.tree_digest(b / "corpus", skip),
        "trainlogs": all(_strip_wall_time(a / d / "trainlog.jsonl") == _strip_wall_time(b / d / "trainlog.jsonl")
                         for d in (f"en_s{s0}", f"ja_s{s0}")),
    }
    files = [f"en_s{s0}/model.vgsc", f"ja_s{s0}/model.vgsc", "eval_en/metrics.json", "eval_en/metrics.csv",
             "xlingual/metrics.json", "xlingual/metrics.csv"]
    files += [f"analysis_en_s{s0}/{n}" for n in ("report.json", "pos.csv", "words.csv", "quartiles.csv",
                                                 "attention.json")]
    for f in files:
        compared[f] = (a / f).read_bytes() == (b / f).read_bytes()
    differing = [k for k, same in compared.items() if not same]
    ok = not differing
    record(9, ok, f"serial rerun: {len(compared)} artifacts compared (checkpoints, metrics, analysis reports), "
                  f"{len(differing)} differ {differing}")
    assert ok


# ---------------------------------------------------------------------------
# 10: formats
# ---------------------------------------------------------------------------

def test_criterion_10_round_trips(tmp_path, small_corpus):
    results = {}
    # checkpoint
    config = tiny_config()
    M.save_checkpoint(tmp_path / "a.vgsc", perturbed_params(config, 1), config,
                      {"adam.step": np.array([3.0])})
    params, cfg, extra = M.load_checkpoint(tmp_path / "a.vgsc")
    M.save_checkpoint(tmp_path / "b.vgsc", params, cfg, extra)
    results["checkpoint"] = (tmp_path / "a.vgsc").read_bytes() == (tmp_path / "b.vgsc").read_bytes()
    # manifest (synthetic split plus its image index)
    root, _ = small_corpus
    m = D.load_manifest(root / "en" / "test.jsonl")
    D.save_manifest(m, tmp_path / "m1" / "test.jsonl")
    D.save_manifest(D.load_manifest(tmp_path / "m1" / "test.jsonl"), tmp_path / "m2" / "test.jsonl")
    results["manifest"] = all((tmp_path / "m1" / n).read_bytes() == (tmp_path / "m2" / n).read_bytes()
                              for n in ("test.jsonl", "images.json"))
    results["manifest-source"] = (root / "en" / "test.jsonl").read_bytes() == \
        (tmp_path / "m1" / "test.jsonl").read_bytes()
    # features
    x = make_rng(10).normal(size=(7, 13)).astype(np.float32)
    D.write_features(tmp_path / "a.vgsf", x)
    D.write_features(tmp_path / "b.vgsf", D.load_features(tmp_path / "a.vgsf"))
    results["features"] = (tmp_path / "a.vgsf").read_bytes() == (tmp_path / "b.vgsf").read_bytes()
    ok = all(results.values())
    record(10, ok, "write->read->write byte-identical: " + ", ".join(f"{k} {v}" for k, v in results.items()))
    assert ok
