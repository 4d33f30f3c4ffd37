"""
Attention forensics.

Peaks of an utterance's attention weights are mapped back to signal time
through the convolution's receptive field, attached to the forced-aligned
word whose span contains them, and aggregated into part-of-speech, word and
within-word position statistics. A random baseline draws ``50 * p`` encoder
steps per utterance (``p`` = detected peaks) and runs them through the same
assignment.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .data import UPOS_TAGS, Manifest, TokenSpan
from .numcore import make_rng

QUARTILES = ("Beginning", "MiddleBeg", "MiddleEnd", "End")
BASELINE_FACTOR = 50


class AnalysisError(ValueError):
    pass


@dataclass
class PeakConfig:
    rel_threshold: float = 0.6
    min_separation: int = 1
    layer: int | None = None

    def __post_init__(self):
        if not 0 < self.rel_threshold <= 1:
            raise ValueError(f"PeakConfig.rel_threshold must be in (0, 1], got {self.rel_threshold}")
        if self.min_separation < 1:
            raise ValueError(f"PeakConfig.min_separation must be >= 1, got {self.min_separation}")


@dataclass
class Peak:
    encoder_step: int
    weight: float
    center_time_s: float = 0.0
    word: TokenSpan | None = None
    quartile: str | None = None

    def to_json(self) -> dict:
        d = {"encoder_step": self.encoder_step, "weight": self.weight, "center_time_s": self.center_time_s,
             "word": None, "upos": None, "quartile": self.quartile}
        if self.word is not None:
            d["word"] = self.word.surface
            d["upos"] = self.word.upos
        return d


# ---------------------------------------------------------------------------
# Peak detection
# ---------------------------------------------------------------------------

def local_maxima(x: np.ndarray) -> np.ndarray:
    """
    Indices of local maxima from the sign changes of the first difference.

    A run of equal values flanked by strictly smaller neighbours yields its
    center index (lower middle for even runs). Runs touching either end
    count only when they are a single sample strictly above its neighbour.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.size
    if T < 2:
        return np.zeros(0, dtype=np.int64)
    dx = np.diff(x)
    out = []
    if dx[0] < 0:
        out.append(0)
    # sign of the last non-zero difference before each position
    i = 0
    while i < T - 1:
        if dx[i] > 0:
            j = i + 1
            while j < T - 1 and dx[j] == 0:
                j += 1
            # rising into index i+1, flat through j, then dx[j] decides
            if j < T - 1 and dx[j] < 0:
                out.append((i + 1 + j) // 2)
            i = j
        else:
            i += 1
    if dx[-1] > 0:
        out.append(T - 1)
    return np.array(sorted(out), dtype=np.int64)


def find_peaks(alpha, config: PeakConfig = PeakConfig()) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0:
        raise AnalysisError("cannot detect peaks in an empty attention vector")
    cand = local_maxima(alpha)
    if cand.size == 0:
        return cand
    w = alpha[cand]
    cand = cand[w >= config.rel_threshold * w.max()]
    if config.min_separation > 1 and cand.size > 1:
        order = sorted(cand.tolist(), key=lambda i: (-alpha[i], i))
        kept: list[int] = []
        for i in order:
            if all(abs(i - k) >= config.min_separation for k in kept):
                kept.append(i)
        cand = np.array(sorted(kept), dtype=np.int64)
    return cand


def step_to_time(encoder_step: int, config: M.ModelConfig) -> float:
    """Center of the step's receptive field, in seconds."""
    center = encoder_step * config.conv_stride + (config.conv_kernel - 1) / 2.0
    return center * config.frame_hop_ms / 1000.0


def detect_peaks(alpha, config: PeakConfig = PeakConfig(), model_config: M.ModelConfig | None = None) -> list[Peak]:
    """Peaks in time order; ``center_time_s`` is filled when ``model_config`` is given."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return [Peak(int(i), float(alpha[i]), step_to_time(int(i), model_config) if model_config else 0.0)
            for i in find_peaks(alpha, config)]


# ---------------------------------------------------------------------------
# Assignment to words
# ---------------------------------------------------------------------------

def quartile_of(t: float, start: float, end: float) -> str:
    r = (t - start) / (end - start)
    return QUARTILES[min(3, max(0, int(np.floor(r * 4))))]


def find_token(t: float, tokens: list[TokenSpan]) -> TokenSpan | None:
    starts = [tok.start_s for tok in tokens]
    k = int(np.searchsorted(starts, t, side="right")) - 1
    if k >= 0 and tokens[k].start_s <= t < tokens[k].end_s:
        return tokens[k]
    return None


def assign_peaks(peaks: list[Peak], tokens: list[TokenSpan]) -> list[Peak]:
    """Attach the containing word and within-word quartile; peaks in silence stay unassigned."""
    out = []
    for p in peaks:
        tok = find_token(p.center_time_s, tokens)
        if tok is None:
            out.append(replace(p, word=None, quartile=None))
        else:
            out.append(replace(p, word=tok, quartile=quartile_of(p.center_time_s, tok.start_s, tok.end_s)))
    return out


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------

@dataclass
class PosDistribution:
    counts: dict[str, int]
    percentages: dict[str, float]
    total: int
    n_unassigned: int
    word_counts: dict[str, int] = field(default_factory=dict)
    word_pct: dict[str, float] = field(default_factory=dict)
    ref_pct: dict[str, float] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.total + self.n_unassigned

    def word_table(self, top: int | None = None) -> list[tuple[str, float, float]]:
        """(word, peak freq %, training-set ref freq %) sorted by peak freq, then word."""
        rows = sorted(self.word_pct.items(), key=lambda kv: (-kv[1], kv[0]))
        if top is not None:
            rows = rows[:top]
        return [(w, pct, self.ref_pct.get(w, 0.0)) for w, pct in rows]

    def to_json(self) -> dict:
        return {"counts": self.counts, "percentages": self.percentages, "total": self.total,
                "n_unassigned": self.n_unassigned,
                "words": [{"word": w, "peak_freq_pct": a, "ref_freq_pct": b} for w, a, b in self.word_table()]}


def reference_frequencies(tokens: list[list[TokenSpan]]) -> dict[str, float]:
    """Percentage of each surface form among all given tokens."""
    c = Counter(t.surface for toks in tokens for t in toks)
    n = sum(c.values())
    return {w: 100.0 * k / n for w, k in c.items()} if n else {}


def _distribution(peak_lists, ref_pct=None) -> PosDistribution:
    counts = Counter()
    words = Counter()
    unassigned = 0
    for peaks in peak_lists:
        for p in peaks:
            if p.word is None:
                unassigned += 1
            else:
                counts[p.word.upos] += 1
                words[p.word.surface] += 1
    total = sum(counts.values())
    if total == 0:
        raise AnalysisError("no peaks fall on a word; distribution undefined")
    full = {tag: int(counts.get(tag, 0)) for tag in UPOS_TAGS}
    pct = {tag: 100.0 * k / total for tag, k in full.items()}
    wpct = {w: 100.0 * k / total for w, k in words.items()}
    return PosDistribution(full, pct, total, unassigned, dict(words), wpct, dict(ref_pct or {}))


def pos_observed(peak_lists: list[list[Peak]], train_tokens: list[list[TokenSpan]] | None = None) -> PosDistribution:
    """POS and word distribution of assigned peaks; reference word frequencies come from ``train_tokens``."""
    return _distribution(peak_lists, reference_frequencies(train_tokens) if train_tokens else None)


def sample_baseline_peaks(encoder_len: int, n_true: int, tokens: list[TokenSpan], config: M.ModelConfig,
                          rng: np.random.Generator) -> list[Peak]:
    n = BASELINE_FACTOR * n_true
    if n == 0:
        return []
    steps = rng.integers(0, encoder_len, size=n)
    peaks = [Peak(int(s), 1.0, step_to_time(int(s), config)) for s in steps]
    return assign_peaks(peaks, tokens)


def pos_baseline(utterances: list[tuple[str, int, int, list[TokenSpan]]], config: M.ModelConfig,
                 seed: int) -> PosDistribution:
    """
    utterances: (caption_id, encoder_len, n_true_peaks, tokens). Each
    utterance draws from its own stream derived from ``seed`` and its id.
    """
    lists = [sample_baseline_peaks(T, p, toks, config, make_rng(seed, "baseline", cid))
             for cid, T, p, toks in utterances]
    return _distribution(lists)


def quartile_table(peak_lists: list[list[Peak]]) -> dict[str, float]:
    c = Counter(p.quartile for peaks in peak_lists for p in peaks if p.word is not None)
    n = sum(c.values())
    if n == 0:
        raise AnalysisError("no peaks fall on a word; quartile table undefined")
    return {q: 100.0 * c.get(q, 0) / n for q in QUARTILES}


# ---------------------------------------------------------------------------
# Corpus pipeline
# ---------------------------------------------------------------------------

@dataclass
class UtteranceAttention:
    caption_id: str
    alpha: np.ndarray
    peaks: list[Peak]

    def to_json(self) -> dict:
        return {"caption_id": self.caption_id, "alpha": self.alpha.tolist(),
                "peak_steps": [p.encoder_step for p in self.peaks],
                "peaks": [p.to_json() for p in self.peaks]}


@dataclass
class AnalysisResult:
    utterances: list[UtteranceAttention]
    observed: PosDistribution
    baseline: PosDistribution
    quartiles: dict[str, float]
    layer: int


def attention_peaks(params, config: M.ModelConfig, manifest: Manifest, peak_cfg: PeakConfig,
                    threads: int = 1) -> list[UtteranceAttention]:
    layer = peak_cfg.layer or config.top_layer
    if layer not in config.attention_after_layers:
        raise AnalysisError(f"no attention head after layer {layer}; heads: {config.attention_after_layers}")
    feats = [manifest.utterance_features(r) for r in manifest.records]
    encoded = M.encode_utterances(feats, params, config, threads=threads)
    out = []
    for rec, enc in zip(manifest.records, encoded):
        alpha = enc.attention[layer]
        peaks = assign_peaks(detect_peaks(alpha, peak_cfg, config), rec.tokens)
        out.append(UtteranceAttention(rec.caption_id, alpha, peaks))
    return out


def analyze(params, config: M.ModelConfig, manifest: Manifest, peak_cfg: PeakConfig, seed: int,
            train_tokens: list[list[TokenSpan]] | None = None, threads: int = 1) -> AnalysisResult:
    utts = attention_peaks(params, config, manifest, peak_cfg, threads)
    observed = pos_observed([u.peaks for u in utts], train_tokens)
    baseline = pos_baseline([(u.caption_id, u.alpha.size, len(u.peaks), rec.tokens)
                             for u, rec in zip(utts, manifest.records)], config, seed)
    return AnalysisResult(utts, observed, baseline, quartile_table([u.peaks for u in utts]),
                          peak_cfg.layer or config.top_layer)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_reports(result: AnalysisResult, out_dir, glosses: dict[str, str] | None = None,
                  top_words: int | None = 10) -> None:
    """JSON report plus CSV tables: focused words, within-word position, POS observed vs baseline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    glosses = glosses or {}
    report = {"layer": result.layer, "observed": result.observed.to_json(),
              "baseline": result.baseline.to_json(), "quartiles": result.quartiles,
              "n_utterances": len(result.utterances),
              "n_peaks": sum(len(u.peaks) for u in result.utterances)}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                     encoding="utf-8")
    with open(out / "words.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["word", "gloss", "peak_freq_pct", "ref_freq_pct"])
        for word, a, b in result.observed.word_table(top_words):
            w.writerow([word, glosses.get(word, ""), _fmt(a), _fmt(b)])
    with open(out / "quartiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(QUARTILES))
        w.writerow([_fmt(result.quartiles[q]) for q in QUARTILES])
    with open(out / "pos.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["upos", "observed_pct", "baseline_pct"])
        for tag in UPOS_TAGS:
            w.writerow([tag, _fmt(result.observed.percentages[tag]), _fmt(result.baseline.percentages[tag])])
    write_attention_export(result.utterances, out / "attention.json")


def write_attention_export(utts: list[UtteranceAttention], path) -> None:
    Path(path).write_text(json.dumps([u.to_json() for u in utts], ensure_ascii=False) + "\n", encoding="utf-8")
