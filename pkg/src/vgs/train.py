"""Mini-batch Adam training of the speech/image model."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .data import PairedData
from .numcore import DTYPE, ParamSet, make_rng
from .retrieval import gold_indices, rank_images

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.vgsc"
TRAINLOG_NAME = "trainlog.jsonl"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 2e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 5
    grad_clip_norm: float | None = 2.0
    exclude_same_image: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.epochs < 1:
            raise ValueError(f"TrainConfig.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"TrainConfig.batch_size must be >= 2, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"TrainConfig.learning_rate must be >= 0, got {self.learning_rate}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError(f"TrainConfig.grad_clip_norm must be positive, got {self.grad_clip_norm}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls({p.name: np.zeros_like(p.value) for p in params},
                   {p.name: np.zeros_like(p.value) for p in params}, 0)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    clip_grads(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.adam_betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        g = grads[p.name]
        if g.shape != p.shape:
            raise ValueError(f"adam: grad for {p.name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def epoch_batches(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch; a trailing batch with fewer than 2 pairs is dropped."""
    order = make_rng(cfg.seed, "shuffle", epoch).permutation(n) if cfg.shuffle else np.arange(n)
    batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def validation_metrics(params: ParamSet, config: M.ModelConfig, data: PairedData, threads: int = 1) -> dict:
    pool = list(dict.fromkeys(data.image_ids))
    first = {img: k for k, img in reversed(list(enumerate(data.image_ids)))}
    img_vecs = M.encode_images(data.image_feats[[first[i] for i in pool]], params)
    utts = M.encode_utterances(data.feats, params, config, threads=threads)
    res = rank_images(np.stack([u.vector for u in utts]), img_vecs, gold_indices(data.image_ids, pool))
    return res.metrics()


def _train_extra(state: AdamState, epoch: int) -> dict[str, np.ndarray]:
    extra = {}
    for name in state.m:
        extra[f"adam.m.{name}"] = state.m[name]
        extra[f"adam.v.{name}"] = state.v[name]
    extra["adam.step"] = np.array([state.step], dtype=DTYPE)
    extra["train.epoch"] = np.array([epoch], dtype=DTYPE)
    return extra


def save_training_checkpoint(path, params: ParamSet, config: M.ModelConfig, state: AdamState, epoch: int) -> None:
    M.save_checkpoint(path, params, config, _train_extra(state, epoch))


def load_training_checkpoint(path):
    """Returns (params, config, AdamState, completed epochs)."""
    params, config, extra = M.load_checkpoint(path)
    state = AdamState.zeros(params)
    if "adam.step" in extra:
        for p in params:
            state.m[p.name] = extra[f"adam.m.{p.name}"].copy()
            state.v[p.name] = extra[f"adam.v.{p.name}"].copy()
        state.step = int(extra["adam.step"][0])
    epoch = int(extra["train.epoch"][0]) if "train.epoch" in extra else 0
    return params, config, state, epoch


def train(params: ParamSet, config: M.ModelConfig, data: PairedData, cfg: TrainConfig,
          val: PairedData | None = None, out_dir=None, state: AdamState | None = None,
          start_epoch: int = 0, threads: int = 1) -> tuple[ParamSet, list[dict]]:
    """
    Train in place for epochs ``start_epoch+1 .. cfg.epochs``.

    When ``out_dir`` is given, one JSON line per epoch is appended to
    ``trainlog.jsonl`` and checkpoints (with optimizer state) are written to
    ``model.vgsc`` every ``checkpoint_every`` epochs and at the end.
    """
    if len(data) < 2:
        raise TrainingError("training needs at least 2 pairs")
    state = state or AdamState.zeros(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records = []
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for bi, idx in enumerate(epoch_batches(len(data), cfg, epoch)):
            feats = [data.feats[k] for k in idx]
            ids = [data.image_ids[k] for k in idx]
            loss, grads = M.loss_and_grads(params, config, feats, data.image_feats[idx],
                                           ids if cfg.exclude_same_image else None, threads=threads)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss/gradient at epoch {epoch}, batch {bi} "
                                    f"(captions {[data.caption_ids[k] for k in idx][:4]}...)")
            adam_step(params, grads, state, cfg)
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan")}
        if val is not None and len(val):
            vm = validation_metrics(params, config, val, threads)
            rec.update({"val_R@1": vm["R@1"], "val_R@5": vm["R@5"], "val_R@10": vm["R@10"],
                        "val_median_rank": vm["median_rank"]})
        rec["wall_time_s"] = round(time.perf_counter() - t0, 3)
        records.append(rec)
        log.info("epoch %d loss %.4f %s", epoch, rec["train_loss"],
                 f"val r10 {rec['val_R@10']:.3f} medr {rec['val_median_rank']:.1f}" if "val_R@10" in rec else "")
        if out is not None:
            with open(out / TRAINLOG_NAME, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if epoch == cfg.epochs or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0):
                save_training_checkpoint(out / CHECKPOINT_NAME, params, config, state, epoch)
    return params, records


def read_trainlog(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
