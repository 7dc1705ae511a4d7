"""End-to-end experiment runner: ingest -> train -> retrieve/classify/reconstruct -> evaluate."""
from __future__ import annotations

import copy
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from . import data as data_mod
from .diffusion import (
    Guidance,
    GuidanceConfig,
    GuidanceTarget,
    LinearEmbedder,
    gaussian_init,
    make_schedule,
    sample,
    select_init_image,
    toy_gaussian_predictor,
)
from .embeddings import EmbeddingCache, ProviderConfig, load_plugin, make_provider, read_cache, save_cache
from .evaluation import build_report, config_digest, two_way_identification
from .mapping import (
    LinearMapper,
    PretrainConfig,
    VaeConfig,
    VaeMapper,
    embed_signals,
    pretrain_decoder,
    save_checkpoint,
)
from .retrieval import PROMPT_TEMPLATES, CandidatePool, build_class_weights, classification_report, retrieval_report
from .training import TrainConfig, image_pool, text_pool, train

log = logging.getLogger(__name__)

PATH_KEYS = {"manifest", "output_dir", "cache_path", "text_cache_path", "classes", "templates", "embedder",
             "eval_embedder", "prior_cache", "prior_states", "pretrain_cache"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except FileNotFoundError as exc:
        raise StageError(name, f"missing file: {exc.filename or exc}") from exc
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def _resolve_paths(node: Any, base: Path) -> Any:
    if isinstance(node, Mapping):
        out = {}
        for k, v in node.items():
            if k in PATH_KEYS and isinstance(v, str):
                out[k] = str((base / os.path.expandvars(v)).resolve())
            else:
                out[k] = _resolve_paths(v, base)
        return out
    if isinstance(node, list):
        return [_resolve_paths(v, base) for v in node]
    return node


@dataclass
class ExperimentConfig:
    doc: dict

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(_resolve_paths(doc, path.parent))

    @classmethod
    def from_dict(cls, doc: Mapping, base: str | Path = ".") -> "ExperimentConfig":
        return cls(_resolve_paths(copy.deepcopy(dict(doc)), Path(base)))

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    @property
    def output_dir(self) -> Path:
        return Path(self.doc["output_dir"])

    def digest(self) -> str:
        # where the run is written does not change what it computes
        return config_digest({k: v for k, v in self.doc.items() if k != "output_dir"})


def _read_lines(path) -> list[str]:
    return [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]


def build_mapper(mapper_cfg: Mapping, voxel_count: int, dimension: int, image_embeddings, seed: int):
    kind = mapper_cfg.get("kind", "linear")
    if kind == "linear":
        return LinearMapper(voxel_count, dimension, seed=mapper_cfg.get("seed", seed)), None
    if kind != "vae":
        raise ValueError(f"unknown mapper kind {kind!r}")
    vae = VaeConfig(mapper_cfg.get("latent_dim", 512), mapper_cfg.get("hidden", 2048),
                    mapper_cfg.get("activation", "gelu"), mapper_cfg.get("seed", seed))
    pre = PretrainConfig(latent_dim=vae.latent_dim, hidden=vae.hidden, activation=vae.activation,
                         **{"seed": seed, **mapper_cfg.get("pretrain", {})})
    result = pretrain_decoder(image_embeddings, pre)
    return VaeMapper(voxel_count, dimension, vae, decoder=result.decoder), result


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def run_pipeline(config: ExperimentConfig) -> Path:
    """Execute every configured stage; returns the experiment directory."""
    torch.set_num_threads(int(config.doc.get("threads", 1)))
    cfg = config.doc
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    seed = config.seed
    timings = {}
    tasks = cfg.get("tasks", {})

    t0 = time.perf_counter()
    with stage("ingest"):
        manifest = data_mod.load_manifest(cfg["manifest"])
        train_raw = data_mod.average_repeats(manifest.split("train"))
        eval_split = tasks.get("retrieval", {}).get("split", "test")
        stats = data_mod.fit_standardizer(train_raw)
        train_records = [data_mod.apply_standardizer(r, stats) for r in train_raw]
        eval_records = [data_mod.apply_standardizer(r, stats) for r in data_mod.average_repeats(manifest.split(eval_split))]
    timings["ingest"] = time.perf_counter() - t0

    with stage("providers"):
        provider = make_provider(ProviderConfig.from_dict(cfg["providers"]["train"]))

    t0 = time.perf_counter()
    with stage("train"):
        tc = dict(cfg.get("train", {}))
        tc.setdefault("seed", seed)
        train_cfg = TrainConfig.from_dict(tc)
        mapper_cfg = cfg.get("mapper", {"kind": "linear"})
        if mapper_cfg.get("kind", "linear") == "vae":
            if mapper_cfg.get("pretrain_cache"):
                corpus = read_cache(mapper_cfg["pretrain_cache"], provider.dimension).matrix
            else:
                corpus = provider.embed_images(list(dict.fromkeys(r.image_ref for r in train_records)))
        else:
            corpus = None
        mapper, _ = build_mapper(mapper_cfg, manifest.voxel_count, provider.dimension, corpus, seed)
        selection = None
        if train_cfg.selection_split:
            selection = [data_mod.apply_standardizer(r, stats)
                         for r in data_mod.average_repeats(manifest.split(train_cfg.selection_split))]
        result = train(mapper, train_records, provider, provider, train_cfg, selection, stats,
                       log_path=out / "train_log.jsonl")
        result.checkpoint.metadata["config_digest"] = digest
        save_checkpoint(out / "mapper.ckpt", result.checkpoint)
        mapper = result.mapper
        queries = embed_signals(mapper, data_mod.signal_matrix(eval_records))
    timings["train"] = time.perf_counter() - t0

    retrieval = classification = identification = None
    if "retrieval" in tasks:
        with stage("retrieve"):
            retrieval = {}
            targets = tasks["retrieval"].get("targets", ["image", "text"])
            if "image" in targets:
                retrieval["image"] = retrieval_report(queries, [r.image_ref for r in eval_records],
                                                      image_pool(eval_records, provider))
            if "text" in targets:
                retrieval["text"] = retrieval_report(queries, [r.captions[0] for r in eval_records],
                                                     text_pool(eval_records, provider))

    if "classification" in tasks:
        with stage("classify"):
            task = tasks["classification"]
            classes = _read_lines(task["classes"])
            templates = _read_lines(task["templates"]) if task.get("templates") else list(PROMPT_TEMPLATES)
            weights = build_class_weights(classes, templates, provider)
            labels = [r.category for r in eval_records]
            if any(l is None for l in labels):
                raise ValueError(f"split {eval_split!r} has records without a category")
            classification = classification_report(queries, labels, weights, tuple(task.get("ks", (1, 5))),
                                                   [r.stimulus_id for r in eval_records])

    gen_embeddings = None
    t0 = time.perf_counter()
    if "reconstruction" in tasks:
        with stage("reconstruct"):
            gen_embeddings, embedder, gt_states = _reconstruct(tasks["reconstruction"], queries, eval_records, seed, out,
                                                                   digest)
    timings["reconstruct"] = time.perf_counter() - t0

    if "identification" in tasks:
        with stage("evaluate"):
            if gen_embeddings is None:
                raise ValueError("identification requires the reconstruction task")
            task = tasks["identification"]
            trials = task.get("trials", 50)
            gt = provider.embed_images([r.image_ref for r in eval_records])
            own = list(range(len(eval_records)))
            identification = {
                provider.space_id: two_way_identification(gen_embeddings, gt, gt, trials,
                                                          np.random.default_rng(seed), own).to_dict()
            }
            if task.get("eval_embedder"):
                if gt_states is None:
                    raise ValueError("eval_embedder needs reconstruction.prior_states for ground-truth states")
                ev = LinearEmbedder(np.load(task["eval_embedder"]), "eval")
                states = np.load(out / "generated_states.npy")
                ev_gen, ev_gt = ev.to_numpy(states), ev.to_numpy(gt_states)
                identification["eval"] = two_way_identification(ev_gen, ev_gt, ev_gt, trials,
                                                                 np.random.default_rng(seed), own).to_dict()

    with stage("report"):
        run_meta = {
            "seed": seed,
            "manifest": manifest.name,
            "subject_id": manifest.subject_id,
            "space_id": provider.space_id,
            "mapper": mapper.kind,
            "best_epoch": result.best_epoch,
            "selection_metric": result.best_metric,
        }
        report = build_report(retrieval, classification, identification, run_meta,
                              config={k: v for k, v in cfg.items() if k != "output_dir"})
        _write_json(out / "metrics.json", report)
        _write_json(out / "run_info.json", {"config_digest": digest, "config": cfg, "timings_s": timings})
    return out


def _reconstruct(task: Mapping, queries: np.ndarray, records, seed: int, out: Path, digest: str = ""):
    embedder = LinearEmbedder(np.load(task["embedder"]), "synthetic-linear")
    schedule = make_schedule(task.get("steps", 1000), task.get("beta_start", 1e-4), task.get("beta_end", 0.02))
    predictor_spec = task.get("predictor", "toy")
    if predictor_spec == "toy":
        predictor = toy_gaussian_predictor(schedule, (embedder.state_dim,))
    else:
        predictor = load_plugin(predictor_spec)(schedule=schedule)
    gcfg = GuidanceConfig(s=task.get("scale", 1000.0), init=task.get("init", "gaussian"),
                          t_start_fraction=task.get("t_start_fraction", 0.5),
                          sigma_rule=task.get("sigma_rule", "beta"))
    guidance = Guidance(GuidanceTarget(torch.as_tensor(queries), embedder), gcfg)
    gen = torch.Generator().manual_seed(seed)
    prior_states = read_cache(task["prior_states"]) if task.get("prior_states") else None
    if gcfg.init == "noised_image":
        if prior_states is None or not task.get("prior_cache"):
            raise ValueError("noised_image init needs prior_cache and prior_states")
        pool = CandidatePool.from_cache(read_cache(task["prior_cache"], queries.shape[1]))
        init = select_init_image(queries, pool, lambda k: prior_states.lookup([k])[0], schedule,
                                 gcfg.t_start_fraction, gen)
    else:
        init = gaussian_init((len(records), embedder.state_dim), schedule, gen)
    result = sample(predictor, schedule, guidance, init, gen)
    states = result.x.numpy()
    np.save(out / "generated_states.npy", states.astype(np.float32))
    keys = tuple(r.image_ref for r in records)
    save_cache(out / "generated_states.xmdc", EmbeddingCache(keys, states, "generated/states"))
    gen_emb = embedder.to_numpy(states)
    save_cache(out / "generated_embeddings.xmdc", EmbeddingCache(keys, gen_emb, embedder.space_id))
    _write_json(out / "reconstruction_log.json", {
        "config_digest": digest,
        "seed": seed,
        "t_start": result.t_start,
        "prior_keys": init.keys,
        "steps": [{"step": s["step"], "guidance_loss": float(np.mean(s["guidance_loss"]))} for s in result.guidance_loss],
        "final_guidance_loss": float(result.final_loss.mean()),
    })
    gt_states = prior_states.lookup(keys) if prior_states is not None else None
    return gen_emb, embedder, gt_states
