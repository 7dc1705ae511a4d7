"""Synthetic benchmark with known ground-truth geometry.

Every item has a latent direction ``z`` on the unit sphere, clustered around
one of ``n_classes`` anchors.  Image and text embeddings are opposite
half-angle rotations of ``z`` (so the two views sit at cosine ``agreement``
before noise), each with its own isotropic noise; every caption gets a fresh
text-noise draw.  Signals are ``W_true @ image_embedding`` plus Gaussian
noise of scale ``noise_sigma``.

For the toy reconstruction path each image also has a state vector ``x``
with ``embedder @ x == image_embedding``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SignalRecord, write_manifest
from .embeddings import EmbeddingCache, TableProvider, normalize, save_cache
from .retrieval import PROMPT_TEMPLATES, fill_templates


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 1000
    n_test: int = 200
    voxels: int = 512
    D: int = 64
    noise_sigma: float = 0.05
    n_classes: int = 50
    seed: int = 0
    agreement: float = 0.9
    image_noise: float = 0.3
    text_noise: float = 1.0
    prompt_noise: float = 0.3
    class_spread: float = 1.0
    captions_per_item: int = 2
    test_repeats: int = 1
    state_dim: int = 96

    def __post_init__(self):
        for name in ("n_train", "n_test", "voxels", "D", "n_classes", "captions_per_item", "test_repeats"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not -1.0 <= self.agreement <= 1.0:
            raise ValueError("agreement is a cosine and must lie in [-1, 1]")
        if self.state_dim < self.D:
            raise ValueError("state_dim must be >= D so image embeddings are reachable")


@dataclass
class SyntheticBundle:
    spec: SyntheticSpec
    splits: dict[str, list[SignalRecord]]
    image_table: dict[str, np.ndarray]
    text_table: dict[str, np.ndarray]
    class_names: list[str]
    templates: list[str]
    image_states: dict[str, np.ndarray]
    embedder: np.ndarray
    w_true: np.ndarray = field(repr=False, default=None)

    @property
    def space_id(self) -> str:
        return f"synthetic/d{self.spec.D}/s{self.spec.seed}"

    def provider(self) -> TableProvider:
        return TableProvider(self.image_table, self.text_table, self.space_id)

    def write(self, out_dir) -> dict[str, Path]:
        """Write manifest, caches, class/template lists and provider configs into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"manifest": write_manifest(out / "manifest.json", "synthetic", f"seed{self.spec.seed}", self.splits)}

        def cache(name, table, space_id):
            keys = tuple(table)
            mat = np.stack([table[k] for k in keys]) if keys else np.zeros((0, self.spec.D))
            paths[name] = out / f"{name}.xmdc"
            save_cache(paths[name], EmbeddingCache(keys, mat, space_id))

        cache("image_embeddings", self.image_table, self.space_id)
        cache("text_embeddings", self.text_table, self.space_id)
        cache("image_states", self.image_states, f"{self.space_id}/states")
        # prior pool for noised-image init: training images only, so test stimuli never seed their own chain
        train_refs = dict.fromkeys(r.image_ref for r in self.splits["train"])
        cache("prior_embeddings", {k: self.image_table[k] for k in train_refs}, self.space_id)
        paths["embedder"] = out / "embedder.npy"
        np.save(paths["embedder"], self.embedder)
        paths["classes"] = out / "classes.txt"
        paths["classes"].write_text("\n".join(self.class_names) + "\n")
        paths["templates"] = out / "templates.txt"
        paths["templates"].write_text("\n".join(self.templates) + "\n")
        paths["provider"] = out / "provider.json"
        paths["provider"].write_text(json.dumps({
            "kind": "cache", "dimension": self.spec.D,
            "cache_path": "image_embeddings.xmdc", "text_cache_path": "text_embeddings.xmdc",
        }, indent=1))
        paths["spec"] = out / "synthetic_spec.json"
        paths["spec"].write_text(json.dumps(asdict(self.spec), indent=1))
        return paths


def plane_rotation(basis: np.ndarray, angle: float) -> np.ndarray:
    """Rotate by ``angle`` inside each consecutive basis plane (an odd last axis is fixed)."""
    d = basis.shape[0]
    j = np.zeros((d, d))
    for k in range(0, d - 1, 2):
        j[k, k + 1], j[k + 1, k] = -1.0, 1.0
    fixed = np.zeros((d, d))
    if d % 2:
        fixed[-1, -1] = 1.0
    inner = np.cos(angle) * (np.eye(d) - fixed) + np.sin(angle) * j + fixed
    return basis @ inner @ basis.T


def generate_synthetic(spec: SyntheticSpec) -> SyntheticBundle:
    rng = np.random.default_rng(spec.seed)
    d = spec.D
    n = spec.n_train + spec.n_test

    anchors = normalize(rng.standard_normal((spec.n_classes, d)))
    labels = rng.integers(spec.n_classes, size=n)
    z = normalize(anchors[labels] + spec.class_spread * rng.standard_normal((n, d)) / np.sqrt(d))

    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    half = np.arccos(spec.agreement) / 2.0
    rot_image, rot_text = plane_rotation(basis, half), plane_rotation(basis, -half)

    image = normalize(z @ rot_image.T + spec.image_noise * rng.standard_normal((n, d)) / np.sqrt(d))
    captions = normalize(
        (z @ rot_text.T)[:, None, :]
        + spec.text_noise * rng.standard_normal((n, spec.captions_per_item, d)) / np.sqrt(d)
    )

    w_true = rng.standard_normal((spec.voxels, d)) / np.sqrt(d)

    embedder = rng.standard_normal((d, spec.state_dim)) / np.sqrt(spec.state_dim)
    pinv = np.linalg.pinv(embedder)
    null_proj = np.eye(spec.state_dim) - pinv @ embedder
    states = image @ pinv.T + rng.standard_normal((n, spec.state_dim)) @ null_proj.T

    class_names = [f"class{c:03d}" for c in range(spec.n_classes)]
    templates = list(PROMPT_TEMPLATES)
    text_table: dict[str, np.ndarray] = {}
    for c, name in enumerate(class_names):
        prompts = fill_templates(name, templates)
        centre = anchors[c] @ rot_text.T
        noise = spec.prompt_noise * rng.standard_normal((len(prompts), d)) / np.sqrt(d)
        for p, e in zip(prompts, normalize(centre + noise)):
            text_table[p] = e

    image_table, image_states = {}, {}
    splits: dict[str, list[SignalRecord]] = {"train": [], "test": []}
    for i in range(n):
        split = "train" if i < spec.n_train else "test"
        sid = f"{split}{i:05d}"
        ref = f"synthetic://image/{sid}"
        caps = tuple(f"{sid} caption {k}" for k in range(spec.captions_per_item))
        image_table[ref] = image[i]
        image_states[ref] = states[i]
        for cap, e in zip(caps, captions[i]):
            text_table[cap] = e
        repeats = 1 if split == "train" else spec.test_repeats
        for rep in range(repeats):
            signal = w_true @ image[i] + spec.noise_sigma * rng.standard_normal(spec.voxels)
            splits[split].append(SignalRecord(sid, signal, ref, caps, class_names[labels[i]], rep))

    return SyntheticBundle(spec, splits, image_table, text_table, class_names, templates, image_states,
                           embedder, w_true)
