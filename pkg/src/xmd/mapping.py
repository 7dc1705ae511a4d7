"""Signal-to-embedding mapping networks: a single affine layer and a VAE.

The VAE variant reuses a decoder that was pretrained (together with an
auxiliary embedding encoder) to reconstruct image embeddings from a latent
code; only the signal encoder is trained afterwards.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

ACTIVATIONS = {"gelu": nn.GELU, "tanh": nn.Tanh, "silu": nn.SiLU, "softplus": nn.Softplus}

CKPT_MAGIC = b"XMDCKPT\0"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sII")


class CheckpointError(RuntimeError):
    pass


def _scaled_normal(gen: torch.Generator, out_dim: int, in_dim: int) -> torch.Tensor:
    return torch.randn(out_dim, in_dim, generator=gen, dtype=torch.float32) / math.sqrt(in_dim)


def _affine(gen: torch.Generator, in_dim: int, out_dim: int) -> nn.Linear:
    layer = nn.Linear(in_dim, out_dim)
    with torch.no_grad():
        layer.weight.copy_(_scaled_normal(gen, out_dim, in_dim))
        layer.bias.zero_()
    return layer


def _as_batch(x, expected: int) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(x, dtype=torch.float32)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != expected:
        raise ValueError(f"expected input of length {expected}, got shape {tuple(x.shape)}")
    return x, single


# --------------------------------------------------------------------------
# Linear
# --------------------------------------------------------------------------


class LinearMapper(nn.Module):
    kind = "linear"

    def __init__(self, voxel_count: int, dimension: int, seed: int = 0):
        super().__init__()
        self.voxel_count = voxel_count
        self.dimension = dimension
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(_scaled_normal(gen, dimension, voxel_count))
        self.bias = nn.Parameter(torch.zeros(dimension))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.weight.T + self.bias

    def config(self) -> dict:
        return {"voxel_count": self.voxel_count, "dimension": self.dimension, "seed": self.seed}


def linear_forward(mapper: LinearMapper, signal) -> torch.Tensor:
    x, single = _as_batch(signal, mapper.voxel_count)
    out = mapper(x)
    return out[0] if single else out


# --------------------------------------------------------------------------
# VAE
# --------------------------------------------------------------------------


class GaussianEncoder(nn.Module):
    """input -> hidden -> (mu, logvar) heads."""

    def __init__(self, in_dim: int, hidden: int, latent_dim: int, activation: str, gen: torch.Generator):
        super().__init__()
        self.body = nn.Sequential(_affine(gen, in_dim, hidden), ACTIVATIONS[activation]())
        self.mu = _affine(gen, hidden, latent_dim)
        self.logvar = _affine(gen, hidden, latent_dim)

    def forward(self, x):
        h = self.body(x)
        return self.mu(h), self.logvar(h)


class EmbeddingDecoder(nn.Module):
    """latent -> hidden -> embedding."""

    def __init__(self, latent_dim: int, hidden: int, dimension: int, activation: str, gen: torch.Generator):
        super().__init__()
        self.net = nn.Sequential(
            _affine(gen, latent_dim, hidden), ACTIVATIONS[activation](), _affine(gen, hidden, dimension)
        )
        self.frozen = False

    def forward(self, z):
        return self.net(z)

    def freeze(self) -> "EmbeddingDecoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self


@dataclass
class VaeConfig:
    latent_dim: int = 512
    hidden: int = 2048
    activation: str = "gelu"
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class VaeMapper(nn.Module):
    kind = "vae"

    def __init__(self, voxel_count: int, dimension: int, config: VaeConfig | None = None,
                 decoder: EmbeddingDecoder | None = None):
        super().__init__()
        self.voxel_count = voxel_count
        self.dimension = dimension
        self.vae_config = config or VaeConfig()
        c = self.vae_config
        gen = torch.Generator().manual_seed(c.seed)
        self.encoder = GaussianEncoder(voxel_count, c.hidden, c.latent_dim, c.activation, gen)
        if decoder is None:
            decoder = EmbeddingDecoder(c.latent_dim, c.hidden, dimension, c.activation, gen)
        self.decoder = decoder

    @property
    def latent_dim(self) -> int:
        return self.vae_config.latent_dim

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        mu, _ = self.encode(x)
        return self.decode(mu)

    def config(self) -> dict:
        return {"voxel_count": self.voxel_count, "dimension": self.dimension, **asdict(self.vae_config)}


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None,
                   noise: torch.Tensor | None = None) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * n with n standard normal (or the supplied ``noise``)."""
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * noise


def kl_divergence(mu, logvar) -> torch.Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis."""
    mu = torch.as_tensor(mu)
    logvar = torch.as_tensor(logvar)
    # expm1 keeps the per-dim term nonnegative when logvar is tiny
    return 0.5 * (torch.expm1(logvar) - logvar + mu**2).sum(dim=-1)


def vae_encode(mapper: VaeMapper, signal):
    x, single = _as_batch(signal, mapper.voxel_count)
    mu, logvar = mapper.encode(x)
    return (mu[0], logvar[0]) if single else (mu, logvar)


def vae_decode(mapper: VaeMapper, z) -> torch.Tensor:
    return mapper.decode(torch.as_tensor(z, dtype=torch.float32))


def map_signal(mapper: nn.Module, signal, mode: str = "infer", generator: torch.Generator | None = None,
               return_latent: bool = False):
    """Map signals to the joint space.

    Linear mappers ignore ``mode``.  A VAE decodes a reparameterized sample in
    ``train`` mode and the latent mean in ``infer`` mode.  With
    ``return_latent`` a VAE also returns ``(mu, logvar)``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x, single = _as_batch(signal, mapper.voxel_count)
    latent = None
    if isinstance(mapper, VaeMapper):
        mu, logvar = mapper.encode(x)
        z = reparameterize(mu, logvar, generator) if mode == "train" else mu
        out = mapper.decode(z)
        latent = (mu, logvar)
    else:
        out = mapper(x)
    if single:
        out = out[0]
    if return_latent:
        return out, latent
    return out


def embed_signals(mapper: nn.Module, signals) -> np.ndarray:
    with torch.no_grad():
        return map_signal(mapper, np.atleast_2d(signals), "infer").double().numpy()


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Decoder pretraining
# --------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    latent_dim: int = 512
    hidden: int = 2048
    activation: str = "gelu"
    epochs: int = 50
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    kl_weight: float = 0.001
    seed: int = 0


@dataclass
class PretrainResult:
    decoder: EmbeddingDecoder
    visual_encoder: GaussianEncoder
    history: list[dict] = field(default_factory=list)


def reconstruction_objective(recon: torch.Tensor, target: torch.Tensor, mu: torch.Tensor,
                             logvar: torch.Tensor, kl_weight: float):
    """Mean cosine distance plus ``kl_weight`` times the mean KL term."""
    recon_loss = (1.0 - F.cosine_similarity(recon, target, dim=1)).mean()
    kl = kl_divergence(mu, logvar).mean()
    return recon_loss + kl_weight * kl, recon_loss, kl


def pretrain_decoder(image_embeddings, config: PretrainConfig | None = None) -> PretrainResult:
    """Fit decoder + auxiliary embedding encoder on unpaired image embeddings, then freeze the decoder."""
    c = config or PretrainConfig()
    data = torch.tensor(np.array(image_embeddings, dtype=np.float32))
    n, dim = data.shape
    if n < c.batch_size:
        raise ValueError(f"pretraining needs at least batch_size={c.batch_size} embeddings, got {n}")
    gen = torch.Generator().manual_seed(c.seed)
    encoder = GaussianEncoder(dim, c.hidden, c.latent_dim, c.activation, gen)
    decoder = EmbeddingDecoder(c.latent_dim, c.hidden, dim, c.activation, gen)
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=c.lr, weight_decay=c.weight_decay)
    history = []
    for epoch in range(1, c.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        totals = np.zeros(3)
        batches = 0
        for start in range(0, n - c.batch_size + 1, c.batch_size):
            batch = data[perm[start:start + c.batch_size]]
            mu, logvar = encoder(batch)
            recon = decoder(reparameterize(mu, logvar, gen))
            loss, rec, kl = reconstruction_objective(recon, batch, mu, logvar, c.kl_weight)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {batches}: recon={rec.item()}, kl={kl.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += (loss.item(), rec.item(), kl.item())
            batches += 1
        totals /= max(batches, 1)
        history.append({"epoch": epoch, "loss": totals[0], "recon": totals[1], "kl": totals[2]})
        log.debug("pretrain epoch %d loss %.5f", epoch, totals[0])
    return PretrainResult(decoder.freeze(), encoder, history)


def reconstruction_cosine(result: PretrainResult, embeddings) -> np.ndarray:
    x = torch.tensor(np.array(embeddings, dtype=np.float32))
    with torch.no_grad():
        mu, _ = result.visual_encoder(x)
        return F.cosine_similarity(result.decoder(mu), x, dim=1).double().numpy()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class MapperCheckpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    space_id: str = ""
    metadata: dict = field(default_factory=dict)

    def build(self) -> nn.Module:
        cfg = dict(self.config)
        if self.kind == "linear":
            mapper = LinearMapper(cfg["voxel_count"], cfg["dimension"], cfg.get("seed", 0))
        elif self.kind == "vae":
            vae = VaeConfig(cfg["latent_dim"], cfg["hidden"], cfg["activation"], cfg.get("seed", 0))
            mapper = VaeMapper(cfg["voxel_count"], cfg["dimension"], vae)
        else:
            raise CheckpointError(f"unknown mapper kind {self.kind!r}")
        state = {k[len("mapper."):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                 if k.startswith("mapper.")}
        mapper.load_state_dict(state)
        if self.kind == "vae":
            mapper.decoder.freeze()
        return mapper

    def standardizer(self):
        from .data import VoxelStats

        if "standardizer.mean" not in self.tensors:
            return None
        return VoxelStats(self.tensors["standardizer.mean"], self.tensors["standardizer.std"])


def checkpoint_from_mapper(mapper: nn.Module, space_id: str = "", stats=None,
                           metadata: Mapping[str, Any] | None = None) -> MapperCheckpoint:
    tensors = {f"mapper.{k}": v.detach().cpu().numpy().astype("<f4") for k, v in mapper.state_dict().items()}
    if stats is not None:
        tensors["standardizer.mean"] = np.asarray(stats.mean, dtype="<f8")
        tensors["standardizer.std"] = np.asarray(stats.std, dtype="<f8")
    return MapperCheckpoint(mapper.kind, mapper.config(), tensors, space_id, dict(metadata or {}))


def save_checkpoint(path: str | os.PathLike, ckpt: MapperCheckpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, entries = [], []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        arr = arr.astype(dtype)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(arr.tobytes())
    header = json.dumps({
        "kind": ckpt.kind,
        "config": ckpt.config,
        "space_id": ckpt.space_id,
        "tensors": entries,
        "metadata": ckpt.metadata,
    }).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, voxel_count: int | None = None) -> MapperCheckpoint:
    data = Path(path).read_bytes()
    try:
        magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a mapper checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    offset = _CKPT_HEAD.size
    try:
        header = json.loads(data[offset:offset + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    offset += hlen
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(e["shape"]).copy()
        offset += nbytes
    ckpt = MapperCheckpoint(header["kind"], header["config"], tensors, header.get("space_id", ""),
                            header.get("metadata", {}))
    if voxel_count is not None and ckpt.config["voxel_count"] != voxel_count:
        raise ValueError(
            f"checkpoint expects {ckpt.config['voxel_count']} voxels, manifest declares {voxel_count}"
        )
    return ckpt
