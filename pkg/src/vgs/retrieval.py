"""
Retrieval evaluation: speech->image ranking and image-pivot speech->speech ranking.

Ranks are 1-based. Ties on distance are broken by candidate index, so the
gold item's rank is 1 + #{closer candidates} + #{equally close candidates
with a smaller index}.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_features
from .model import distance_matrix
from .numcore import make_rng

CHUNK = 256


@dataclass
class RankingResult:
    ranks: np.ndarray
    pool_size: int
    r1: float
    r5: float
    r10: float
    median_rank: float

    @classmethod
    def from_ranks(cls, ranks, pool_size: int) -> "RankingResult":
        ranks = np.asarray(ranks, dtype=np.int64)
        if ranks.size == 0:
            raise ValueError("no queries to score")
        if ranks.min() < 1 or ranks.max() > pool_size:
            raise ValueError(f"ranks must lie in [1, {pool_size}]")
        return cls(ranks, pool_size,
                   float(np.mean(ranks <= 1)), float(np.mean(ranks <= 5)), float(np.mean(ranks <= 10)),
                   float(np.median(ranks)))

    def metrics(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "median_rank": self.median_rank,
                "n_queries": int(self.ranks.size), "pool_size": int(self.pool_size)}


def gold_ranks(D: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """Rank of D[q, gold[q]] within row q (ascending, ties by index)."""
    n, m = D.shape
    rows = np.arange(n)
    dg = D[rows, gold][:, None]
    before = np.arange(m)[None, :] < gold[:, None]
    return 1 + np.sum(D < dg, axis=1) + np.sum((D == dg) & before, axis=1)


def _chunked(n: int, fn, threads: int = 1) -> list:
    spans = [(s, min(s + CHUNK, n)) for s in range(0, n, CHUNK)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(lambda sp: fn(*sp), spans))
    return [fn(*sp) for sp in spans]


def rank_images(utterances: np.ndarray, images: np.ndarray, gold, threads: int = 1) -> RankingResult:
    """
    utterances: (n, d) unit vectors; images: (m, d) unit vectors;
    gold: (n,) index of each query's image in ``images``.
    """
    U = np.asarray(utterances, dtype=np.float64)
    I = np.asarray(images, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != (U.shape[0],):
        raise ValueError(f"gold has shape {gold.shape}, expected ({U.shape[0]},)")
    if gold.size and (gold.min() < 0 or gold.max() >= I.shape[0]):
        raise KeyError("gold image index missing from the pool")
    parts = _chunked(U.shape[0], lambda s, e: gold_ranks(distance_matrix(U[s:e], I), gold[s:e]), threads)
    return RankingResult.from_ranks(np.concatenate(parts), I.shape[0])


def gold_indices(query_image_ids, pool_image_ids) -> np.ndarray:
    pos = {img: k for k, img in enumerate(pool_image_ids)}
    missing = [i for i in query_image_ids if i not in pos]
    if missing:
        raise KeyError(f"gold image(s) missing from pool: {missing[:5]}")
    return np.array([pos[i] for i in query_image_ids], dtype=np.int64)


# ---------------------------------------------------------------------------
# Cross-lingual pivot retrieval
# ---------------------------------------------------------------------------

AGGREGATORS = {
    "min": lambda t: t.min(axis=-1),
    "sum": lambda t: t.sum(axis=-1),
    "mean": lambda t: t.mean(axis=-1),
}


@dataclass
class PivotIndex:
    pivot_ids: list[str]
    src: np.ndarray          # (n_src, P): d_src(u_src, pivot)
    tgt: np.ndarray          # (n_tgt, P): d_tgt(u_tgt, pivot)

    @classmethod
    def build(cls, pivot_ids, src_utts, src_pivots, tgt_utts, tgt_pivots) -> "PivotIndex":
        """Each side's distances live in that model's own embedding space."""
        return cls(list(pivot_ids), distance_matrix(np.asarray(src_utts), np.asarray(src_pivots)),
                   distance_matrix(np.asarray(tgt_utts), np.asarray(tgt_pivots)))

    def swapped(self) -> "PivotIndex":
        return PivotIndex(self.pivot_ids, self.tgt, self.src)


def check_pivots_unseen(pivot_ids, *seen_image_sets) -> None:
    pivots = set(pivot_ids)
    for seen in seen_image_sets:
        overlap = pivots & set(seen)
        if overlap:
            raise ValueError(f"{len(overlap)} pivot images were seen in training, e.g. {sorted(overlap)[:3]}")


def crosslingual_scores(src: np.ndarray, tgt: np.ndarray, aggregator: str = "min",
                        threads: int = 1) -> np.ndarray:
    """score[a, b] = agg_p (src[a, p] + tgt[b, p])."""
    if src.shape[1] == 0:
        raise ValueError("empty pivot set")
    if src.shape[1] != tgt.shape[1]:
        raise ValueError(f"pivot counts differ: {src.shape[1]} vs {tgt.shape[1]}")
    agg = AGGREGATORS[aggregator]
    # keep each (rows, n_tgt, P) block near 4M doubles
    step = max(1, 4_000_000 // (tgt.shape[0] * src.shape[1]))

    def block(s, e):
        return np.concatenate([agg(src[a:min(a + step, e), None, :] + tgt[None, :, :])
                               for a in range(s, e, step)], axis=0)

    return np.concatenate(_chunked(src.shape[0], block, threads), axis=0)


def crosslingual_rank(index: PivotIndex, gold, aggregator: str = "min", threads: int = 1) -> RankingResult:
    """Rank target utterances for every source utterance; ``gold[a]`` is the target index paired with ``a``."""
    gold = np.asarray(gold, dtype=np.int64)
    S = crosslingual_scores(index.src, index.tgt, aggregator, threads)
    return RankingResult.from_ranks(gold_ranks(S, gold), S.shape[1])


@dataclass
class AveragedResult:
    r1: float
    r5: float
    r10: float
    median_rank: float
    pool_size: int
    trials: list[RankingResult] = field(default_factory=list)

    def metrics(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "median_rank": self.median_rank,
                "pool_size": self.pool_size, "n_trials": len(self.trials)}


def average_results(results: list[RankingResult]) -> AveragedResult:
    return AveragedResult(float(np.mean([r.r1 for r in results])), float(np.mean([r.r5 for r in results])),
                          float(np.mean([r.r10 for r in results])),
                          float(np.mean([r.median_rank for r in results])),
                          results[0].pool_size, list(results))


def subsample_eval(index: PivotIndex, src_image_ids, tgt_image_ids, n_trials: int = 10, pool: int = 1000,
                   seed: int = 0, aggregator: str = "min", dump_dir=None, threads: int = 1) -> AveragedResult:
    """
    Repeatedly draw ``pool`` images, keep one random source and one random
    target caption per image, and rank within that pool. Metrics are the mean
    over trials. With ``dump_dir``, each trial's score matrix is written as
    ``trial_XX.vgsf`` alongside ``trial_XX.json`` (chosen rows).
    """
    src_by_img: dict[str, list[int]] = {}
    for k, img in enumerate(src_image_ids):
        src_by_img.setdefault(img, []).append(k)
    tgt_by_img: dict[str, list[int]] = {}
    for k, img in enumerate(tgt_image_ids):
        tgt_by_img.setdefault(img, []).append(k)
    common = sorted(set(src_by_img) & set(tgt_by_img))
    if len(common) < pool:
        raise ValueError(f"only {len(common)} images have captions on both sides; pool of {pool} requested")
    rng = make_rng(seed, "subsample_eval")
    results = []
    for trial in range(n_trials):
        imgs = [common[j] for j in np.sort(rng.choice(len(common), size=pool, replace=False))]
        src_rows = np.array([src_by_img[i][int(rng.integers(len(src_by_img[i])))] for i in imgs])
        tgt_rows = np.array([tgt_by_img[i][int(rng.integers(len(tgt_by_img[i])))] for i in imgs])
        sub = PivotIndex(index.pivot_ids, index.src[src_rows], index.tgt[tgt_rows])
        S = crosslingual_scores(sub.src, sub.tgt, aggregator, threads)
        res = RankingResult.from_ranks(gold_ranks(S, np.arange(pool)), pool)
        results.append(res)
        if dump_dir is not None:
            d = Path(dump_dir)
            d.mkdir(parents=True, exist_ok=True)
            write_features(d / f"trial_{trial:02d}.vgsf", S)
            (d / f"trial_{trial:02d}.json").write_text(json.dumps(
                {"images": imgs, "src_rows": src_rows.tolist(), "tgt_rows": tgt_rows.tolist()}) + "\n")
    return average_results(results)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["direction", "R@1", "R@5", "R@10", "median_rank"]


def write_metrics(out_dir, rows: dict[str, dict], stem: str = "metrics") -> None:
    """rows: direction -> metrics dict. Writes ``<stem>.json`` and ``<stem>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for direction, m in rows.items():
            w.writerow([direction] + [repr(float(m[c])) for c in METRIC_COLUMNS[1:]])
