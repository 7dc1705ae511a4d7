"""Contrastive training loop for the mapping networks."""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import SignalRecord, sample_caption, signal_matrix
from .losses import MODALITIES, effective_alpha, total_loss
from .mapping import MapperCheckpoint, VaeMapper, checkpoint_from_mapper, embed_signals, kl_divergence, map_signal
from .retrieval import CandidatePool, retrieval_report

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimizer and objective settings.

    ``selection_split`` names the split whose fMRI-to-image mean recall picks
    the saved epoch.  Selecting on the test split reproduces the published
    protocol but is optimistic; point it at a validation split when one exists.
    """

    alpha: float = 0.5
    tau1: float = 0.03
    tau2: float = 0.1
    batch_size: int = 640
    lr: float = 4.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 3.0
    epochs: int = 300
    patience: int = 50
    seed: int = 0
    modality: str = "V&T"
    kl_weight: float = 0.001
    selection_split: str | None = "test"

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Sweep results per dataset / mapper; list entries are per subject in dataset order.
PUBLISHED_SETTINGS = {
    ("god", "linear"): {"batch_size": 400, "weight_decay": [2.0] * 5, "tau1": [0.05] * 5, "tau2": [0.1] * 5},
    ("god", "vae"): {"batch_size": 400, "weight_decay": [2.0] * 5, "tau1": [0.05] * 5,
                     "tau2": [0.01, 0.1, 0.01, 0.1, 0.1]},
    ("nsd", "linear"): {"batch_size": 640, "weight_decay": [3.0] * 4, "tau1": [0.03] * 4, "tau2": [0.1] * 4},
    ("nsd", "vae"): {"batch_size": 640, "weight_decay": [35.0, 25.0, 35.0, 25.0], "tau1": [0.01] * 4,
                     "tau2": [0.05, 0.01, 0.01, 0.01]},
}


def published_preset(dataset: str, mapper: str, subject_index: int, **overrides) -> TrainConfig:
    """Published hyperparameters for subject ``subject_index`` (0-based, dataset order)."""
    s = PUBLISHED_SETTINGS[(dataset.lower(), mapper.lower())]
    cfg = {
        "batch_size": s["batch_size"],
        "weight_decay": s["weight_decay"][subject_index],
        "tau1": s["tau1"][subject_index],
        "tau2": s["tau2"][subject_index],
        "alpha": 0.5,
    }
    cfg.update(overrides)
    return TrainConfig(**cfg)


@dataclass
class TrainResult:
    mapper: torch.nn.Module
    checkpoint: MapperCheckpoint
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float | None = None


def _embedding_table(provider, keys: Sequence[str], modality: str) -> dict[str, torch.Tensor]:
    uniq = list(dict.fromkeys(keys))
    embed = provider.embed_images if modality == "image" else provider.embed_texts
    mat = torch.tensor(np.array(embed(uniq), dtype=np.float32))
    return {k: mat[i] for i, k in enumerate(uniq)}


def image_pool(records: Sequence[SignalRecord], provider) -> CandidatePool:
    keys = list(dict.fromkeys(r.image_ref for r in records))
    return CandidatePool(provider.embed_images(keys), keys, provider.space_id)


def text_pool(records: Sequence[SignalRecord], provider) -> CandidatePool:
    """One candidate caption (the first) per stimulus."""
    keys = list(dict.fromkeys(r.captions[0] for r in records))
    return CandidatePool(provider.embed_texts(keys), keys, provider.space_id)


def selection_metric(mapper, records: Sequence[SignalRecord], pool: CandidatePool) -> float:
    queries = embed_signals(mapper, signal_matrix(records))
    return retrieval_report(queries, [r.image_ref for r in records], pool)["mean_recall"]


def train(
    mapper: torch.nn.Module,
    train_records: Sequence[SignalRecord],
    image_provider,
    text_provider,
    config: TrainConfig,
    selection_records: Sequence[SignalRecord] | None = None,
    stats=None,
    log_path: str | os.PathLike | None = None,
) -> TrainResult:
    """Train ``mapper`` in place and return the best-epoch checkpoint.

    ``train_records`` must already be standardized; ``stats`` (if given) is
    stored in the checkpoint so inference can apply the same transform.
    """
    alpha = effective_alpha(config.alpha, config.modality)
    is_vae = isinstance(mapper, VaeMapper)
    if is_vae and not mapper.decoder.frozen:
        raise TrainingError("VAE mapper decoder must be pretrained and frozen before encoder training")
    params = [p for p in mapper.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("mapper has no trainable parameters")

    signals = torch.as_tensor(signal_matrix(train_records), dtype=torch.float32)
    n = signals.shape[0]
    images = texts = None
    if alpha > 0:
        table = _embedding_table(image_provider, [r.image_ref for r in train_records], "image")
        images = torch.stack([table[r.image_ref] for r in train_records])
    if alpha < 1:
        caption_table = _embedding_table(text_provider, [c for r in train_records for c in r.captions], "text")

    gen = torch.Generator().manual_seed(config.seed)
    caption_rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps,
                            weight_decay=config.weight_decay)

    pool = image_pool(selection_records, image_provider) if selection_records else None
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None

    def record(entry):
        history.append(entry)
        if log_fh:
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()

    try:
        metric = selection_metric(mapper, selection_records, pool) if pool else None
        record({"epoch": 0, "loss": None, "L_FI": None, "L_FT": None, "selection_metric": metric})
        best_state = copy.deepcopy(mapper.state_dict())
        best_epoch, best_metric, stale = 0, metric, 0
        step = 0
        for epoch in range(1, config.epochs + 1):
            if alpha < 1:
                texts = torch.stack([caption_table[sample_caption(r, caption_rng)] for r in train_records])
            perm = torch.randperm(n, generator=gen)
            sums = {"loss": 0.0, "L_FI": 0.0, "L_FT": 0.0}
            batches = 0
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                if len(idx) < 2:
                    continue
                f, latent = map_signal(mapper, signals[idx], "train", gen, return_latent=True)
                loss, l_fi, l_ft = total_loss(
                    f,
                    images[idx] if images is not None else None,
                    texts[idx] if texts is not None else None,
                    alpha, config.tau1, config.tau2, config.modality,
                )
                if is_vae and config.kl_weight:
                    loss = loss + config.kl_weight * kl_divergence(*latent).mean()
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                batches += 1
                sums["loss"] += loss.item()
                sums["L_FI"] += l_fi.item() if l_fi is not None else 0.0
                sums["L_FT"] += l_ft.item() if l_ft is not None else 0.0
            if batches == 0:
                raise TrainingError("no batch of at least two records; reduce batch_size or add data")
            metric = selection_metric(mapper, selection_records, pool) if pool else None
            record({
                "epoch": epoch,
                "loss": sums["loss"] / batches,
                "L_FI": sums["L_FI"] / batches if alpha > 0 else None,
                "L_FT": sums["L_FT"] / batches if alpha < 1 else None,
                "selection_metric": metric,
            })
            if pool is None or metric > best_metric:
                best_state = copy.deepcopy(mapper.state_dict())
                best_epoch, best_metric, stale = epoch, metric, 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()

    mapper.load_state_dict(best_state)
    meta = {
        "train_config": asdict(config),
        "best_epoch": best_epoch,
        "selection_metric": best_metric,
        "selection_split": config.selection_split if pool else None,
        "epochs_run": history[-1]["epoch"],
    }
    ckpt = checkpoint_from_mapper(mapper, getattr(image_provider, "space_id", ""), stats, meta)
    return TrainResult(mapper, ckpt, history, best_epoch, best_metric)
