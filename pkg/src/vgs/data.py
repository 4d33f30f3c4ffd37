"""
Corpus model and on-disk formats.

Features ("VGSF"): magic ``VGSF``, u32 version, u32 rows, u32 cols, then
rows*cols little-endian float32 values in row-major order. A feature
reference is a path, optionally suffixed with ``#row`` to select one row of
a matrix file (used for image feature banks).

Manifests are JSON-lines files, one caption per line, next to an
``images.json`` index mapping image ids to feature references. Relative
references resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import DTYPE, make_rng

VGSF_MAGIC = b"VGSF"
VGSF_VERSION = 1
IMAGES_INDEX = "images.json"

# 12-category universal tagset ("." is punctuation)
UPOS_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "PRON", "DET", "ADP", "NUM", "CONJ", "PRT", ".", "X")


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# VGSF feature files
# ---------------------------------------------------------------------------

def features_bytes(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] == 0:
        raise FormatError(f"feature matrix must be 2-D with at least one row, got shape {m.shape}")
    head = VGSF_MAGIC + struct.pack("<III", VGSF_VERSION, m.shape[0], m.shape[1])
    return head + np.ascontiguousarray(m, dtype="<f4").tobytes()


def write_features(path, matrix) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(features_bytes(matrix))


def parse_features(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 16 or buf[:4] != VGSF_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}, expected {VGSF_MAGIC!r}")
    version, rows, cols = struct.unpack("<III", buf[4:16])
    if version != VGSF_VERSION:
        raise FormatError(f"{source}: unsupported VGSF version {version}")
    if rows == 0:
        raise FormatError(f"{source}: feature file has zero rows")
    expected = 16 + 4 * rows * cols
    if len(buf) != expected:
        raise FormatError(f"{source}: expected {expected} bytes for {rows}x{cols} payload, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(rows, cols).astype(DTYPE)


_feature_cache: dict = {}


def _read_matrix(path: Path) -> np.ndarray:
    st = path.stat()
    key = (str(path.resolve()), st.st_mtime_ns, st.st_size)
    m = _feature_cache.get(key)
    if m is None:
        m = parse_features(path.read_bytes(), str(path))
        if m.shape[0] > 1:
            # only multi-row banks are worth keeping around
            _feature_cache[key] = m
    return m


def resolve_ref(ref: str, base=None) -> tuple[Path, int | None]:
    path, _, row = str(ref).partition("#")
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = Path(base) / p
    return p, (int(row) if row else None)


def load_features(feature_ref, base=None) -> np.ndarray:
    """Read a VGSF reference; returns (rows, cols) float64, or (1, cols) for a ``#row`` reference."""
    path, row = resolve_ref(feature_ref, base)
    m = _read_matrix(path)
    if row is None:
        return m
    if not 0 <= row < m.shape[0]:
        raise FormatError(f"{path}: row {row} out of range for {m.shape[0]} rows")
    return m[row:row + 1]


# ---------------------------------------------------------------------------
# Universal POS mapping
# ---------------------------------------------------------------------------

_PENN = {
    "NN": "NOUN", "NNS": "NOUN", "NP": "NOUN", "NPS": "NOUN", "NNP": "NOUN", "NNPS": "NOUN",
    "VB": "VERB", "VBD": "VERB", "VBG": "VERB", "VBN": "VERB", "VBP": "VERB", "VBZ": "VERB",
    "VH": "VERB", "VHD": "VERB", "VHG": "VERB", "VHN": "VERB", "VHP": "VERB", "VHZ": "VERB",
    "VV": "VERB", "VVD": "VERB", "VVG": "VERB", "VVN": "VERB", "VVP": "VERB", "VVZ": "VERB",
    "MD": "VERB",
    "JJ": "ADJ", "JJR": "ADJ", "JJS": "ADJ",
    "RB": "ADV", "RBR": "ADV", "RBS": "ADV", "WRB": "ADV",
    "PP": "PRON", "PP$": "PRON", "PRP": "PRON", "PRP$": "PRON", "WP": "PRON", "WP$": "PRON", "EX": "DET",
    "DT": "DET", "PDT": "DET", "WDT": "DET",
    "IN": "ADP", "IN/that": "ADP",
    "CD": "NUM",
    "CC": "CONJ",
    "RP": "PRT", "TO": "PRT", "POS": "PRT",
    "SENT": ".", ",": ".", ":": ".", "(": ".", ")": ".", "``": ".", "''": ".", "#": ".", "$": ".",
    "FW": "X", "LS": "X", "SYM": "X", "UH": "X",
}

_KYTEA = {
    "名詞": "NOUN", "代名詞": "PRON", "動詞": "VERB", "助動詞": "VERB", "語尾": "VERB",
    "形容詞": "ADJ", "形状詞": "ADJ", "連体詞": "DET", "副詞": "ADV", "接続詞": "CONJ",
    "助詞": "PRT", "接頭辞": "X", "接尾辞": "NOUN", "感動詞": "X", "記号": ".", "補助記号": ".",
    "空白": ".", "英単語": "NOUN", "言いよどみ": "X", "web誤脱": "X",
    # romanized labels
    "TAIL": "VERB", "N": "NOUN", "V": "VERB", "P": "PRT", "AUX": "VERB", "ADJ": "ADJ",
}

_SCHEMES: dict[str, dict[str, str]] = {
    "treetagger-en": _PENN,
    "kytea-ja": _KYTEA,
    "upos": {t: t for t in UPOS_TAGS},
}


class UnknownTagError(KeyError):
    def __init__(self, tag: str, scheme: str):
        self.tag = tag
        self.scheme = scheme
        super().__init__(f"tag {tag!r} has no Universal POS mapping in scheme {scheme!r}")

    def __str__(self):
        return self.args[0]


def register_scheme(name: str, table: dict[str, str]) -> None:
    bad = {k: v for k, v in table.items() if v not in UPOS_TAGS}
    if bad:
        raise ValueError(f"scheme {name!r} maps to non-UPOS tags: {bad}")
    _SCHEMES[name] = dict(table)


def load_scheme(name: str, path) -> None:
    """Register a user mapping table from a JSON object {tagger_tag: upos}."""
    register_scheme(name, json.loads(Path(path).read_text(encoding="utf-8")))


def map_upos(tagger_tag: str, scheme: str) -> str:
    if scheme not in _SCHEMES:
        raise KeyError(f"unknown tagging scheme {scheme!r}; known: {sorted(_SCHEMES)}")
    try:
        return _SCHEMES[scheme][tagger_tag]
    except KeyError:
        raise UnknownTagError(tagger_tag, scheme) from None


# ---------------------------------------------------------------------------
# Corpus records
# ---------------------------------------------------------------------------

@dataclass
class TokenSpan:
    surface: str
    start_s: float
    end_s: float
    upos: str

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise ManifestError(f"token {self.surface!r}: need 0 <= start < end, got [{self.start_s}, {self.end_s}]")
        if self.upos not in UPOS_TAGS:
            raise ManifestError(f"token {self.surface!r}: {self.upos!r} is not a Universal POS tag")


@dataclass
class CaptionRecord:
    caption_id: str
    image_id: str
    language: str
    feature_ref: str
    n_frames: int
    tokens: list[TokenSpan] = field(default_factory=list)

    def validate(self, frame_hop_ms: float = 10.0) -> None:
        if self.n_frames < 1:
            raise ManifestError(f"{self.caption_id}: n_frames must be >= 1")
        prev_end = 0.0
        for t in self.tokens:
            if t.start_s < prev_end:
                raise ManifestError(f"{self.caption_id}: token {t.surface!r} at {t.start_s}s overlaps or is out of order")
            prev_end = t.end_s
        hop = frame_hop_ms / 1000.0
        if self.tokens and prev_end > (self.n_frames + 1) * hop + 1e-9:
            raise ManifestError(f"{self.caption_id}: tokens end at {prev_end}s beyond {self.n_frames} frames")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "CaptionRecord":
        toks = [TokenSpan(**t) for t in d.get("tokens", [])]
        return cls(caption_id=d["caption_id"], image_id=d["image_id"], language=d["language"],
                   feature_ref=d["feature_ref"], n_frames=int(d["n_frames"]), tokens=toks)


@dataclass
class Manifest:
    split: str
    records: list[CaptionRecord]
    images: dict[str, str]
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def image_ids(self) -> list[str]:
        """Distinct image ids in first-appearance order."""
        return list(dict.fromkeys(r.image_id for r in self.records))

    def utterance_features(self, rec: CaptionRecord) -> np.ndarray:
        m = load_features(rec.feature_ref, self.root)
        if m.shape[0] != rec.n_frames:
            raise ManifestError(f"{rec.caption_id}: feature file has {m.shape[0]} rows, record says {rec.n_frames}")
        return m

    def image_features(self, image_ids) -> np.ndarray:
        return np.concatenate([load_features(self.images[i], self.root) for i in image_ids], axis=0)

    def subset(self, keep) -> "Manifest":
        return Manifest(self.split, [r for r in self.records if keep(r)], self.images, self.root)


def _manifest_lines(records) -> str:
    return "".join(json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True) + "\n" for r in records)


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_manifest_lines(manifest.records), encoding="utf-8")
    index = path.parent / IMAGES_INDEX
    index.write_text(json.dumps(manifest.images, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_manifest(path, frame_hop_ms: float = 10.0) -> Manifest:
    path = Path(path)
    index = path.parent / IMAGES_INDEX
    images = json.loads(index.read_text(encoding="utf-8")) if index.exists() else {}
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = CaptionRecord.from_json(json.loads(line))
            except ManifestError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: malformed record ({e})") from None
            rec.validate(frame_hop_ms)
            if rec.caption_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate caption_id {rec.caption_id}")
            if rec.image_id not in images:
                raise ManifestError(f"{path}:{lineno}: caption {rec.caption_id} has unresolved image_id {rec.image_id}")
            seen.add(rec.caption_id)
            records.append(rec)
    return Manifest(path.stem, records, images, path.parent)


def check_disjoint(manifests: list[Manifest]) -> None:
    owner: dict[str, str] = {}
    for m in manifests:
        for img in m.image_ids():
            if owner.setdefault(img, m.split) != m.split:
                raise ManifestError(f"image {img} appears in splits {owner[img]!r} and {m.split!r}")


def split_half(manifest: Manifest, half: str) -> Manifest:
    """First or second half of the manifest's images (in first-appearance order)."""
    ids = manifest.image_ids()
    cut = len(ids) // 2
    chosen = set(ids[:cut] if half == "first" else ids[cut:]) if half in ("first", "second") else None
    if chosen is None:
        raise ValueError(f"half must be 'first' or 'second', got {half!r}")
    sub = manifest.subset(lambda r: r.image_id in chosen)
    sub.split = f"{manifest.split}-{half}"
    return sub


@dataclass
class PairedData:
    """Features materialized for training or evaluation."""
    caption_ids: list[str]
    image_ids: list[str]
    feats: list[np.ndarray]
    image_feats: np.ndarray          # one row per caption
    tokens: list[list[TokenSpan]]

    def __len__(self):
        return len(self.caption_ids)


def load_pairs(manifest: Manifest) -> PairedData:
    recs = manifest.records
    feats = [manifest.utterance_features(r) for r in recs]
    img = manifest.image_features([r.image_id for r in recs]) if recs else np.zeros((0, 0))
    return PairedData([r.caption_id for r in recs], [r.image_id for r in recs], feats, img,
                      [r.tokens for r in recs])


# ---------------------------------------------------------------------------
# Synthetic bilingual corpus
# ---------------------------------------------------------------------------

_EN_CONCEPTS = ["toilet", "baseball", "train", "giraffe", "skateboard", "sign", "kitchen", "frisbee",
                "cake", "pizza", "zebra", "dog", "cat", "bus", "horse", "clock", "umbrella", "elephant",
                "surfboard", "bench", "kite", "laptop", "bear", "airplane"]
_JA_CONCEPTS = ["toire", "yakyu:", "densha", "kirin", "suke:tobo:do", "hyoshiki", "daidokoro", "furisubi:",
                "ke:ki", "piza", "shimauma", "inu", "neko", "basu", "uma", "tokei", "kasa", "zo:",
                "sa:fubo:do", "benchi", "tako", "pasokon", "kuma", "hiko:ki"]


@dataclass
class LanguageSpec:
    name: str
    templates: list[list[str]]
    function_words: dict[str, str]
    concept_words: list[str] | None = None
    noun_frames: list[int] = field(default_factory=lambda: [10, 16])
    function_frames: list[int] = field(default_factory=lambda: [5, 9])
    noise_sigma: float = 0.3


def english_like() -> LanguageSpec:
    return LanguageSpec(
        name="en",
        templates=[
            ["DET", "ADJ", "NOUN", "VERB"],
            ["DET", "NOUN", "VERB", "ADP", "DET", "ADJ"],
            ["DET", "NOUN", "VERB", "ADP", "DET", "NOUN"],
            ["DET", "ADJ", "NOUN", "CONJ", "DET", "NOUN"],
            ["DET", "NOUN", "CONJ", "DET", "NOUN", "ADP", "DET", "NOUN"],
            ["DET", "NOUN", "VERB", "ADP", "DET", "NOUN", "CONJ", "NOUN"],
        ],
        function_words={"a": "DET", "the": "DET", "some": "DET", "two": "NUM",
                        "on": "ADP", "with": "ADP", "in": "ADP", "near": "ADP", "by": "ADP",
                        "sitting": "VERB", "standing": "VERB", "is": "VERB", "holding": "VERB", "lying": "VERB",
                        "small": "ADJ", "large": "ADJ", "white": "ADJ", "red": "ADJ", "and": "CONJ"},
        concept_words=list(_EN_CONCEPTS),
    )


def japanese_like() -> LanguageSpec:
    return LanguageSpec(
        name="ja",
        templates=[
            ["NOUN", "PRT", "VERB"],
            ["ADJ", "NOUN", "PRT", "VERB"],
            ["NOUN", "PRT", "NOUN", "PRT", "VERB"],
            ["NOUN", "PRT", "ADJ", "NOUN", "PRT", "VERB"],
            ["NOUN", "PRT", "NOUN", "PRT", "NOUN", "PRT", "VERB"],
            ["NOUN", "PRT", "NOUN", "PRT", "VERB", "NOUN", "PRT", "VERB"],
        ],
        function_words={"ga": "PRT", "no": "PRT", "o": "PRT", "ni": "PRT", "de": "PRT", "to": "PRT",
                        "wa": "PRT", "iru": "VERB", "aru": "VERB", "shiteiru": "VERB", "tabeteiru": "VERB",
                        "chiisai": "ADJ", "ookii": "ADJ", "shiroi": "ADJ"},
        concept_words=list(_JA_CONCEPTS),
    )


@dataclass
class SynthSpec:
    n_concepts: int = 12
    n_images: int = 100
    captions_per_image: int = 5
    image_dim: int = 64
    mfcc_dim: int = 13
    concepts_per_image: list[int] = field(default_factory=lambda: [1, 3])
    image_noise: float = 0.5
    splits: dict[str, int] | None = None
    languages: list[LanguageSpec] = field(default_factory=lambda: [english_like(), japanese_like()])
    seed: int = 0

    def __post_init__(self):
        self.languages = [lang if isinstance(lang, LanguageSpec) else LanguageSpec(**lang)
                          for lang in self.languages]
        if self.splits is None:
            n_val = self.n_images // 10
            n_test = self.n_images // 10
            self.splits = {"train": self.n_images - n_val - n_test, "val": n_val, "test": n_test}
        self.validate()

    def validate(self) -> None:
        if self.n_concepts < 2:
            raise ValueError(f"SynthSpec.n_concepts must be >= 2, got {self.n_concepts}")
        for name in ("n_images", "captions_per_image", "image_dim", "mfcc_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1, got {getattr(self, name)}")
        lo, hi = self.concepts_per_image
        if not 1 <= lo <= hi <= self.n_concepts:
            raise ValueError(f"SynthSpec.concepts_per_image must satisfy 1 <= lo <= hi <= n_concepts, got {[lo, hi]}")
        if sum(self.splits.values()) != self.n_images or any(v < 0 for v in self.splits.values()):
            raise ValueError(f"SynthSpec.splits {self.splits} must be non-negative and sum to n_images={self.n_images}")
        if not self.languages:
            raise ValueError("SynthSpec.languages must not be empty")
        if len({lang.name for lang in self.languages}) != len(self.languages):
            raise ValueError("SynthSpec.languages names must be distinct")
        for lang in self.languages:
            for rng_name in ("noun_frames", "function_frames"):
                a, b = getattr(lang, rng_name)
                if a < 2 or b < a:
                    raise ValueError(f"SynthSpec.languages[{lang.name}].{rng_name} must satisfy 2 <= lo <= hi, got {[a, b]}")
            counts = {sum(s == "NOUN" for s in t) for t in lang.templates}
            missing = set(range(lo, hi + 1)) - counts
            if missing:
                raise ValueError(f"SynthSpec.languages[{lang.name}].templates lack templates with {sorted(missing)} NOUN slots")
            tags = set(lang.function_words.values())
            for t in lang.templates:
                for slot in t:
                    if slot != "NOUN" and slot not in tags:
                        raise ValueError(f"SynthSpec.languages[{lang.name}]: no function word tagged {slot}")
            if lang.concept_words is not None and len(lang.concept_words) < self.n_concepts:
                lang.concept_words = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**d)


def _concept_names(lang: LanguageSpec, n: int) -> list[str]:
    if lang.concept_words is not None:
        return list(lang.concept_words[:n])
    return [f"{lang.name}_c{k}" for k in range(n)]


def generate_synthetic(spec: SynthSpec, out_dir, frame_hop_ms: float = 10.0) -> dict[str, dict[str, Manifest]]:
    """
    Write a comparable bilingual corpus under ``out_dir``.

    Layout: ``images.vgsf`` (one row per image), and per language
    ``<lang>/images.json``, ``<lang>/<split>.jsonl``, ``<lang>/feats/*.vgsf``.
    Returns {language: {split: Manifest}}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hop = frame_hop_ms / 1000.0

    rng = make_rng(spec.seed, "synth", "images")
    concept_emb = rng.normal(0.0, 1.0, size=(spec.n_concepts, spec.image_dim))
    lo, hi = spec.concepts_per_image
    image_concepts = []
    image_vecs = np.empty((spec.n_images, spec.image_dim))
    for i in range(spec.n_images):
        k = int(rng.integers(lo, hi + 1))
        cs = sorted(int(c) for c in rng.choice(spec.n_concepts, size=k, replace=False))
        image_concepts.append(cs)
        image_vecs[i] = concept_emb[cs].sum(axis=0) + rng.normal(0.0, spec.image_noise, size=spec.image_dim)
    write_features(out / "images.vgsf", image_vecs)
    image_ids = [f"img{i:05d}" for i in range(spec.n_images)]
    split_of = []
    for name, count in spec.splits.items():
        split_of.extend([name] * count)

    result: dict[str, dict[str, Manifest]] = {}
    for lang in spec.languages:
        lrng = make_rng(spec.seed, "synth", "lang", lang.name)
        concepts = _concept_names(lang, spec.n_concepts)
        fwords = sorted(lang.function_words)
        by_tag: dict[str, list[str]] = {}
        for w in fwords:
            by_tag.setdefault(lang.function_words[w], []).append(w)
        # fixed acoustic template per word type
        acoustic = {}
        for w in concepts:
            n = int(lrng.integers(lang.noun_frames[0], lang.noun_frames[1] + 1))
            acoustic[w] = lrng.normal(0.0, 1.0, size=(n, spec.mfcc_dim))
        for w in fwords:
            n = int(lrng.integers(lang.function_frames[0], lang.function_frames[1] + 1))
            acoustic[w] = lrng.normal(0.0, 1.0, size=(n, spec.mfcc_dim))
        templates_by_count: dict[int, list[list[str]]] = {}
        for t in lang.templates:
            templates_by_count.setdefault(sum(s == "NOUN" for s in t), []).append(t)

        ldir = out / lang.name
        images_index = {img: f"../images.vgsf#{i}" for i, img in enumerate(image_ids)}
        records: dict[str, list[CaptionRecord]] = {name: [] for name in spec.splits}
        for i, img in enumerate(image_ids):
            for j in range(spec.captions_per_image):
                cands = templates_by_count[len(image_concepts[i])]
                tmpl = cands[int(lrng.integers(len(cands)))]
                nouns = [concepts[c] for c in lrng.permutation(image_concepts[i])]
                words = []
                for slot in tmpl:
                    if slot == "NOUN":
                        words.append((nouns.pop(0), "NOUN"))
                    else:
                        opts = by_tag[slot]
                        words.append((opts[int(lrng.integers(len(opts)))], slot))
                frames = np.concatenate([acoustic[w] for w, _ in words], axis=0)
                frames = frames + lrng.normal(0.0, lang.noise_sigma, size=frames.shape)
                tokens, pos = [], 0
                for w, tag in words:
                    n = acoustic[w].shape[0]
                    tokens.append(TokenSpan(w, round(pos * hop, 6), round((pos + n) * hop, 6), tag))
                    pos += n
                cid = f"{lang.name}-{img}-{j}"
                ref = f"feats/{cid}.vgsf"
                write_features(ldir / ref, frames)
                records[split_of[i]].append(CaptionRecord(cid, img, lang.name, ref, frames.shape[0], tokens))
        result[lang.name] = {}
        for name, recs in records.items():
            m = Manifest(name, recs, images_index, ldir)
            save_manifest(m, ldir / f"{name}.jsonl")
            result[lang.name][name] = m
    meta = {"spec": spec.to_dict(), "image_concepts": {img: cs for img, cs in zip(image_ids, image_concepts)}}
    (out / "synth_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return result


def tree_digest(root, exclude: tuple[str, ...] = ()) -> str:
    """sha256 over relative paths and bytes of every file under ``root`` (sorted), skipping names in ``exclude``."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            if fn in exclude:
                continue
            p = Path(dirpath) / fn
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
