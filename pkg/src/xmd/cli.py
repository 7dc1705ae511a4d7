"""Command-line entry point (``xmd <command> ...``).

Every command exits 0 on success; failures print ``[stage] message`` to
stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .embeddings import (
    EmbeddingCache,
    ProviderConfig,
    load_plugin,
    make_provider,
    read_cache,
    save_cache,
    write_cache,
)

log = logging.getLogger("xmd")


class CommandError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def default_cache_dir() -> Path:
    return Path(os.environ.get("XMD_CACHE_DIR", Path.home() / ".cache" / "xmd"))


def _load_split(manifest_path, split, stats=None):
    manifest = data_mod.load_manifest(manifest_path)
    records = data_mod.average_repeats(manifest.split(split))
    if stats is not None:
        records = [data_mod.apply_standardizer(r, stats) for r in records]
    return manifest, records


def _provider(path):
    if path is None:
        raise ValueError("a provider config (--provider) is required")
    return make_provider(ProviderConfig.from_file(path))


def _load_mapper(ckpt_path, voxel_count):
    from .mapping import load_checkpoint

    ckpt = load_checkpoint(ckpt_path, voxel_count)
    return ckpt, ckpt.build(), ckpt.standardizer()


def _write_json(path, doc):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_ingest(args):
    manifest = data_mod.load_manifest(args.manifest)
    summary = {
        "name": manifest.name,
        "subject_id": manifest.subject_id,
        "voxel_count": manifest.voxel_count,
        "splits": {
            s: {"records": len(r), "stimuli": len({x.stimulus_id for x in r})} for s, r in manifest.splits.items()
        },
    }
    if args.out:
        _write_json(args.out, summary)
    print(json.dumps(summary, indent=1))


def cmd_embed_cache(args):
    manifest = data_mod.load_manifest(args.manifest)
    records = manifest.split(args.split)
    if args.modality == "image":
        items = [r.image_ref for r in records]
    else:
        items = [c for r in records for c in r.captions]
    cache = write_cache(items, _provider(args.provider), args.out, args.modality)
    print(f"wrote {cache.count} x {cache.dimension} {args.modality} embeddings to {args.out}")


def cmd_pretrain_vae(args):
    from .mapping import PretrainConfig, VaeConfig, VaeMapper, checkpoint_from_mapper, pretrain_decoder, \
        reconstruction_cosine, save_checkpoint

    cache = read_cache(args.cache)
    cfg = PretrainConfig(**json.loads(Path(args.config).read_text())) if args.config else PretrainConfig()
    result = pretrain_decoder(cache.matrix, cfg)
    host = VaeMapper(1, cache.dimension, VaeConfig(cfg.latent_dim, cfg.hidden, cfg.activation, cfg.seed),
                     decoder=result.decoder)
    meta = {"pretrain_config": cfg.__dict__, "history": result.history,
            "train_reconstruction_cosine": float(reconstruction_cosine(result, cache.matrix).mean())}
    save_checkpoint(args.out, checkpoint_from_mapper(host, cache.space_id, metadata=meta))
    print(json.dumps({"out": args.out, "reconstruction_cosine": meta["train_reconstruction_cosine"]}))


def cmd_train(args):
    from .mapping import LinearMapper, VaeMapper, load_checkpoint, save_checkpoint
    from .training import TrainConfig, train

    manifest = data_mod.load_manifest(args.manifest)
    train_raw = data_mod.average_repeats(manifest.split("train"))
    stats = data_mod.fit_standardizer(train_raw)
    records = [data_mod.apply_standardizer(r, stats) for r in train_raw]
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    doc["modality"] = args.modality
    cfg = TrainConfig.from_dict(doc)
    provider = _provider(args.provider)
    if args.mapper == "linear":
        mapper = LinearMapper(manifest.voxel_count, provider.dimension, cfg.seed)
    else:
        if not args.decoder:
            raise ValueError("--decoder (output of pretrain-vae) is required for the vae mapper")
        dec = load_checkpoint(args.decoder).build()
        mapper = VaeMapper(manifest.voxel_count, provider.dimension, dec.vae_config, decoder=dec.decoder)
    selection = None
    if cfg.selection_split:
        selection = [data_mod.apply_standardizer(r, stats)
                     for r in data_mod.average_repeats(manifest.split(cfg.selection_split))]
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    result = train(mapper, records, provider, provider, cfg, selection, stats, log_path)
    save_checkpoint(out, result.checkpoint)
    print(json.dumps({"out": str(out), "best_epoch": result.best_epoch, "selection_metric": result.best_metric}))


def cmd_retrieve(args):
    from .mapping import embed_signals
    from .retrieval import retrieval_report
    from .training import image_pool, text_pool

    manifest = data_mod.load_manifest(args.manifest)
    ckpt, mapper, stats = _load_mapper(args.ckpt, manifest.voxel_count)
    _, records = _load_split(args.manifest, args.split, stats)
    provider = _provider(args.provider)
    queries = embed_signals(mapper, data_mod.signal_matrix(records))
    if args.target == "image":
        report = retrieval_report(queries, [r.image_ref for r in records], image_pool(records, provider))
    else:
        report = retrieval_report(queries, [r.captions[0] for r in records], text_pool(records, provider))
    _write_json(args.report, report)
    print(json.dumps({k: v for k, v in report.items() if k != "per_query_rank"}))


def cmd_classify(args):
    from .mapping import embed_signals
    from .retrieval import PROMPT_TEMPLATES, build_class_weights, classification_report, load_external_class_weights

    manifest = data_mod.load_manifest(args.manifest)
    ckpt, mapper, stats = _load_mapper(args.ckpt, manifest.voxel_count)
    _, records = _load_split(args.manifest, args.split, stats)
    if args.class_weights:
        weights = load_external_class_weights(args.class_weights)
    else:
        classes = [c.strip() for c in Path(args.classes).read_text().splitlines() if c.strip()]
        templates = ([t.strip() for t in Path(args.templates).read_text().splitlines() if t.strip()]
                     if args.templates else list(PROMPT_TEMPLATES))
        weights = build_class_weights(classes, templates, _provider(args.provider))
    queries = embed_signals(mapper, data_mod.signal_matrix(records))
    report = classification_report(queries, [r.category for r in records], weights, (1, 5),
                                   [r.stimulus_id for r in records])
    _write_json(args.report, report)
    print(json.dumps({k: v for k, v in report.items() if k != "per_item"}))


def cmd_reconstruct(args):
    from .diffusion import (Guidance, GuidanceConfig, GuidanceTarget, LinearEmbedder, gaussian_init, make_schedule,
                            sample, select_init_image, toy_gaussian_predictor)
    from .mapping import embed_signals
    from .retrieval import CandidatePool

    manifest = data_mod.load_manifest(args.manifest)
    ckpt, mapper, stats = _load_mapper(args.ckpt, manifest.voxel_count)
    _, records = _load_split(args.manifest, args.split, stats)
    queries = embed_signals(mapper, data_mod.signal_matrix(records))
    embedder = LinearEmbedder(np.load(args.embedder), "linear")
    schedule = make_schedule(args.steps, args.beta_start, args.beta_end)
    if args.predictor == "toy":
        predictor = toy_gaussian_predictor(schedule, (embedder.state_dim,))
    else:
        predictor = load_plugin(args.predictor)(schedule=schedule)
    init_kind = args.init.replace("-", "_")
    gcfg = GuidanceConfig(s=args.scale, init=init_kind, t_start_fraction=args.t_start_fraction)
    guidance = Guidance(GuidanceTarget(torch.as_tensor(queries), embedder), gcfg)
    gen = torch.Generator().manual_seed(args.seed)
    if init_kind == "noised_image":
        if not (args.prior_cache and args.prior_states):
            raise ValueError("--init noised-image needs --prior-cache and --prior-states")
        pool = CandidatePool.from_cache(read_cache(args.prior_cache, queries.shape[1]))
        states = read_cache(args.prior_states)
        init = select_init_image(queries, pool, lambda k: states.lookup([k])[0], schedule,
                                 gcfg.t_start_fraction, gen)
    else:
        init = gaussian_init((len(records), embedder.state_dim), schedule, gen)
    result = sample(predictor, schedule, guidance, init, gen)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x = result.x.numpy()
    keys = tuple(r.image_ref for r in records)
    save_cache(out / "generated_states.xmdc", EmbeddingCache(keys, x, "generated/states"))
    save_cache(out / "generated_embeddings.xmdc", EmbeddingCache(keys, embedder.to_numpy(x), embedder.space_id))
    for r, row in zip(records, x):
        row.astype("<f4").tofile(out / f"{r.stimulus_id}.f32")
    _write_json(out / "log.json", [
        {"step": s["step"], "guidance_loss": float(np.mean(s["guidance_loss"]))} for s in result.guidance_loss
    ])
    print(json.dumps({"out": str(out), "items": len(records), "final_guidance_loss": float(result.final_loss.mean())}))


def cmd_evaluate(args):
    from .evaluation import build_report, two_way_identification

    gen = read_cache(args.gen_cache)
    gt = read_cache(args.gt_cache, gen.dimension)
    distractors = read_cache(args.distractors, gen.dimension)
    keys = list(gen.keys)
    exclude = [distractors.index.get(k) for k in keys]
    result = two_way_identification(gen.lookup(keys), gt.lookup(keys), distractors.matrix, args.trials,
                                    np.random.default_rng(args.seed), exclude)
    report = build_report(identification={gt.space_id: result},
                          run={"seed": args.seed, "gen_cache": str(args.gen_cache), "trials": args.trials},
                          path=args.report)
    print(json.dumps({"percent_correct": report["identification"][gt.space_id]["percent_correct"]}))


def cmd_synth_gen(args):
    from dataclasses import fields

    from .synthetic import SyntheticSpec, generate_synthetic

    doc = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for f in fields(SyntheticSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    paths = generate_synthetic(SyntheticSpec(**doc)).write(args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))


def cmd_report(args):
    from .evaluation import build_report

    blocks = {"retrieval": None, "classification": None, "identification": None}
    for spec in args.inputs:
        kind, _, rest = spec.partition("=")
        name, _, path = rest.rpartition(":") if ":" in rest else ("", "", rest)
        doc = json.loads(Path(path).read_text())
        if kind == "classification":
            blocks["classification"] = doc
        elif kind in ("retrieval", "identification"):
            if "identification" in doc and "schema_version" in doc:
                doc = next(iter(doc["identification"].values()))
            blocks[kind] = {**(blocks[kind] or {}), (name or "default"): doc}
        else:
            raise ValueError(f"unknown block kind {kind!r} (use retrieval|classification|identification)")
    run = json.loads(Path(args.run).read_text()) if args.run else {}
    build_report(**blocks, run=run, config=run, path=args.out)
    print(f"wrote {args.out}")


def cmd_run(args):
    from .pipeline import ExperimentConfig, run_pipeline

    out = run_pipeline(ExperimentConfig.from_file(args.config))
    print(json.dumps({"experiment_dir": str(out)}))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmd", description="Signal-to-embedding alignment toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a manifest and summarize it")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("embed-cache", help="embed a split's images or captions into a cache file")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--modality", choices=["image", "text"], required=True)
    s.add_argument("--provider", required=True, help="provider config JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed_cache)

    s = sub.add_parser("pretrain-vae", help="pretrain and freeze a VAE decoder on an image-embedding cache")
    s.add_argument("--cache", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_vae)

    s = sub.add_parser("train", help="train a mapping network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mapper", choices=["linear", "vae"], default="linear")
    s.add_argument("--modality", choices=["V", "T", "V&T"], default="V&T")
    s.add_argument("--config", help="train config JSON")
    s.add_argument("--provider", required=True)
    s.add_argument("--decoder", help="pretrained decoder checkpoint (vae only)")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("retrieve", help="fMRI-to-image/text retrieval")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--target", choices=["image", "text"], default="image")
    s.add_argument("--provider", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("classify", help="zero-shot classification with prompt ensembles")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--classes")
    s.add_argument("--templates")
    s.add_argument("--class-weights", help="externally prepared class weights (.npz)")
    s.add_argument("--provider")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("reconstruct", help="embedding-guided diffusion sampling")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--init", choices=["gaussian", "noised-image"], default="gaussian")
    s.add_argument("--prior-cache")
    s.add_argument("--prior-states")
    s.add_argument("--embedder", required=True, help="linear embedder matrix (.npy)")
    s.add_argument("--predictor", default="toy", help="'toy' or module:factory")
    s.add_argument("--scale", type=float, default=1000.0)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--beta-start", type=float, default=1e-4)
    s.add_argument("--beta-end", type=float, default=0.02)
    s.add_argument("--t-start-fraction", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="2-way identification of generated embeddings")
    s.add_argument("--gen-cache", required=True)
    s.add_argument("--gt-cache", required=True)
    s.add_argument("--distractors", required=True)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth-gen", help="generate a synthetic benchmark directory")
    s.add_argument("--spec", help="SyntheticSpec JSON")
    for name, typ in [("n_train", int), ("n_test", int), ("voxels", int), ("D", int), ("noise_sigma", float),
                      ("n_classes", int), ("seed", int), ("agreement", float), ("test_repeats", int)]:
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("report", help="merge metric blocks into one validated report")
    s.add_argument("inputs", nargs="+", help="kind=[name:]path, kind in retrieval|classification|identification")
    s.add_argument("--run", help="run metadata JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="run a full experiment from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        stage = getattr(exc, "stage", args.command)
        msg = str(exc)
        if not msg.startswith("["):
            msg = f"[{stage}] {type(exc).__name__}: {msg}"
        print(msg, file=sys.stderr)
        if args.verbose:
            raise
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
