"""brainit command line: synth, cluster, train, reconstruct, transfer, evaluate, ablate, dip-invert."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import __version__
from .bit import load_checkpoint, predict, save_checkpoint
from .config import config_hash, render, validate_config
from .data import (FmriSample, ImageRecord, SubjectRegistry, SyntheticConfig, SyntheticEncoder, load_dataset,
                   make_synthetic_dataset, random_image, save_dataset, split_pairs)
from .dip import dip_invert
from .errors import CapabilityError, ConfigurationError
from .generation import BrainITModels
from .metrics import EXTRA_COLUMNS, TABLE_COLUMNS, MetricReport, evaluate
from .pipeline import (ToyConfig, ablate, cluster, enrichment_pool, fit_joint, fit_lowlevel, fit_semantic,
                       make_backend, pretrain_backend, reconstruct, subject_voxels, toy_backbone,
                       toy_extractor, toy_layout)
from .plotting import loss_curve, metric_bars, recon_grid
from .transfer import TransferConfig, adapt_subject
from .training import conv_targets, semantic_targets
from .v2c import V2CMapping

log = logging.getLogger("brainit")

ROOT_ENV = "BRAINIT_ROOT"
LATEST = "LATEST"


# ---------------------------------------------------------------------------
# artifact store and manifests


class Store:
    """Stage directories content-addressed by config hash, with a LATEST pointer per stage."""

    def __init__(self, root):
        self.root = Path(root)

    def stage_dir(self, stage: str, cfg: dict) -> Path:
        h = config_hash(cfg)[:16]
        path = self.root / stage / h
        if path.exists():
            shutil.rmtree(path)
        path.mkdir(parents=True)
        (self.root / stage / LATEST).write_text(h + "\n")
        return path

    def latest(self, stage: str) -> Path:
        ptr = self.root / stage / LATEST
        if not ptr.exists():
            raise ConfigurationError(f"no {stage} artifact under {self.root}; run that stage first")
        return self.root / stage / ptr.read_text().strip()

    def resolve(self, given, *stages) -> Path:
        if given:
            path = Path(given)
            if not path.exists():
                raise ConfigurationError(f"{path} does not exist")
            return path
        for stage in stages:
            if (self.root / stage / LATEST).exists():
                return self.latest(stage)
        raise ConfigurationError(f"no {' or '.join(stages)} artifact under {self.root}; run that stage first")


def _versions():
    return {"brainit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def write_manifest(out: Path, args, cfg: dict, inputs: dict, started: float):
    outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "run.json")
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": {"seed": cfg.get("seed", args.seed)},
        "versions": _versions(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": outputs,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# configuration


def _raw_config(args) -> dict:
    if not args.config:
        return {}
    validate_config(args.config)
    return yaml.safe_load(Path(args.config).read_text()) or {}


def toy_config(args, synth: dict | None = None) -> ToyConfig:
    """Toy preset, overlaid with keys set explicitly in --config and then with CLI flags."""
    if not args.toy:
        log.warning("no pretrained backbones are bundled; using toy backbones (pass --toy to silence)")
    raw = _raw_config(args)
    cfg = ToyConfig()
    if synth:
        cfg = replace(cfg, synth=SyntheticConfig(**synth))
    dip = {k[4:]: v for k, v in raw.items() if k.startswith("dip_")}
    if dip:
        cfg = replace(cfg, dip=replace(cfg.dip, **dip))
    gen = {"total_steps": raw.get("steps", cfg.generation.total_steps),
           "start_step": raw.get("start", cfg.generation.start_step),
           "refine": raw.get("refine", cfg.generation.refine)}
    cfg = replace(cfg, generation=replace(cfg.generation, **gen))
    for key in ("k", "clustering", "enrichment", "seed"):
        if key in raw:
            cfg = replace(cfg, **{key: raw[key]})
    if "n_voxels_sample" in raw:
        cfg = replace(cfg, n_voxels_sample=raw["n_voxels_sample"])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, generation=replace(cfg.generation, seed=args.seed))
    if args.n_voxels_sample is not None:
        cfg = replace(cfg, n_voxels_sample=args.n_voxels_sample)
    if getattr(args, "quick", False):
        cfg = quick(cfg)
    return cfg


def quick(cfg: ToyConfig) -> ToyConfig:
    """Smoke-test scale: a handful of epochs and DIP steps."""
    return replace(cfg, semantic_epochs=3, lowlevel_epochs=3, stage2_epochs=1, backend_epochs=5,
                   n_unlabeled=min(cfg.n_unlabeled, 100), warmup_epochs=1,
                   dip=replace(cfg.dip, iterations=30))


# ---------------------------------------------------------------------------
# loading helpers


def load_data(store: Store, given=None):
    path = store.resolve(given, "data")
    pairs, manifest = load_dataset(path)
    encoder = SyntheticEncoder.load(path / "encoder.npz")
    unl = np.load(path / "unlabeled.npy")
    unlabeled = [ImageRecord(f"unlabeled-{i:05d}", im) for i, im in enumerate(unl)]
    return path, pairs, manifest, encoder, unlabeled


def base_pairs(pairs, manifest):
    """Pairs of subjects used for base training (the held-out subject excluded)."""
    hold = set(manifest.get("holdout", []))
    return [p for p in pairs if p[0].subject_id not in hold]


def load_backend(cfg: ToyConfig, path: Path):
    backend = make_backend(cfg)
    backend.trainable_module().load_state_dict(torch.load(path / "backend.pt"))
    return backend


def _save_png(pixels, path):
    Image.fromarray((np.clip(pixels, 0, 1) * 255).round().astype(np.uint8)).save(path)


def _load_images(path: Path) -> np.ndarray:
    path = Path(path)
    if path.is_file():
        return np.load(path)
    for name in ("recon.npy", "gt.npy", "images.npy"):
        if (path / name).exists():
            return np.load(path / name)
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise ConfigurationError(f"no images (.npy or .png) in {path}")
    return np.stack([np.asarray(Image.open(p).convert("RGB"), np.float64) / 255.0 for p in pngs])


def _write_report(rows: dict, path: Path, title: str, meta: dict | None = None):
    """JSON rows -> report.json, a CSV next to it and a bar chart."""
    path.parent.mkdir(parents=True, exist_ok=True)
    # rows keep their table order; meta is sorted
    payload = {"rows": rows, "meta": json.loads(json.dumps(meta or {}, sort_keys=True))}
    path.write_text(json.dumps(payload, indent=1) + "\n")
    metrics = list(next(iter(rows.values())))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting"] + metrics)
        for name, vals in rows.items():
            w.writerow([name] + [f"{vals[m]:.6f}" for m in metrics])
    metric_bars(rows, path.with_suffix(".png"), title)


# ---------------------------------------------------------------------------
# commands


def cmd_validate_config(args, store):
    cfg = validate_config(args.path)
    sys.stdout.write(render(cfg))
    return 0


def cmd_synth(args, store):
    started = time.time()
    seed = 0 if args.seed is None else args.seed
    synth = SyntheticConfig(image_size=args.image_size, n_subjects=args.subjects, n_voxels=args.voxels,
                            noise=args.noise, n_pairs=args.pairs, n_test=args.test, seed=seed)
    holdout = sorted(args.holdout or [])
    bad = [h for h in holdout if not 1 <= h <= args.subjects]
    if bad:
        raise ConfigurationError(f"holdout subjects {bad} outside 1..{args.subjects}")
    cfg = {"synth": synth.__dict__, "holdout": holdout, "unlabeled": args.unlabeled}
    out = store.stage_dir("data", cfg)
    pairs, encoder = make_synthetic_dataset(synth)
    save_dataset(out, pairs, {"synth": synth.__dict__, "holdout": holdout})
    encoder.save(out / "encoder.npz")
    rng = np.random.default_rng([seed, 7])
    unl = np.stack([random_image(rng, args.image_size) for _ in range(args.unlabeled)]).astype(np.float32) \
        if args.unlabeled else np.zeros((0, args.image_size, args.image_size, 3), np.float32)
    np.save(out / "unlabeled.npy", unl)
    write_manifest(out, args, cfg, {}, started)
    print(out)
    return 0


def cmd_cluster(args, store):
    started = time.time()
    data, pairs, manifest, encoder, _ = load_data(store, args.data)
    cfg = toy_config(args, manifest["synth"])
    if args.k is not None:
        cfg = replace(cfg, k=args.k)
    if args.mode is not None:
        cfg = replace(cfg, clustering=args.mode)
    hold = set(manifest.get("holdout", []))
    subjects = [s for s in encoder.subjects if s not in hold]
    sub_enc = SyntheticEncoder({s: encoder.weights[s] for s in subjects}, {s: encoder.biases[s] for s in subjects},
                               {s: encoder.embeddings[s] for s in subjects}, encoder.feature_size,
                               {s: encoder.coords[s] for s in subjects if s in encoder.coords})
    run = {"data": data.name, "k": cfg.k, "mode": cfg.clustering, "seed": cfg.seed}
    out = store.stage_dir("v2c", run)
    v2c = cluster(sub_enc, cfg)
    v2c.save(out)
    write_manifest(out, args, run, {"data": data}, started)
    sizes = {str(s): np.bincount(a, minlength=v2c.k).tolist() for s, a in v2c.assignments.items()}
    print(json.dumps({"dir": str(out), "cluster_sizes": sizes}))
    return 0


def _train_inputs(args, store):
    data, pairs, manifest, encoder, unlabeled = load_data(store, args.data)
    v2c_dir = store.resolve(args.v2c, "v2c")
    v2c = V2CMapping.load(v2c_dir)
    cfg = toy_config(args, manifest["synth"])
    cfg = replace(cfg, k=v2c.k)
    train = split_pairs(base_pairs(pairs, manifest), "train")
    if not cfg.enrichment:
        unlabeled = []
    pool = enrichment_pool(cfg, encoder, subject_voxels(train), unlabeled)
    images = [im for _, im in train] + list(unlabeled)
    return data, v2c_dir, v2c, cfg, train, pool, images


def cmd_train(args, store):
    started = time.time()
    data, v2c_dir, v2c, cfg, train, pool, images = _train_inputs(args, store)
    if args.epochs is not None:
        key = {"semantic": "semantic_epochs" if args.stage == 1 else "stage2_epochs",
               "lowlevel": "lowlevel_epochs"}[args.head]
        cfg = replace(cfg, **{key: args.epochs})
    if args.lr is not None:
        cfg = replace(cfg, **({"lowlevel_lr": args.lr} if args.head == "lowlevel" else {"lr": args.lr}))
    if args.head == "lowlevel" and args.stage != 1:
        raise ConfigurationError("the low-level head has a single training stage")
    inputs = {"data": data, "v2c": v2c_dir}
    if args.head == "semantic" and args.stage == 2:
        init = store.resolve(args.init, "train-semantic-s1")
        inputs["init"] = init
    run = {"head": args.head, "stage": args.stage, "data": data.name, "v2c": v2c_dir.name,
           "init": inputs.get("init", Path("")).name, "toy": cfg.to_dict()}
    stage_name = "train-lowlevel" if args.head == "lowlevel" else f"train-semantic-s{args.stage}"
    out = store.stage_dir(stage_name, run)
    torch.manual_seed(cfg.seed)
    history = {}
    if args.head == "lowlevel":
        bit, history["lowlevel"] = fit_lowlevel(cfg, train, v2c, images, pool)
    elif args.stage == 1:
        backend = make_backend(cfg)
        history["backend"] = pretrain_backend(backend, images, toy_backbone(cfg), cfg).history
        bit, history["semantic"] = fit_semantic(cfg, train, v2c, images, pool)
        torch.save(backend.trainable_module().state_dict(), out / "backend.pt")
    else:
        bit, _ = load_checkpoint(inputs["init"] / "bit")
        backend = load_backend(cfg, inputs["init"])
        history["stage2"] = fit_joint(cfg, bit, backend, train, v2c, pool)
        torch.save(backend.trainable_module().state_dict(), out / "backend.pt")
    save_checkpoint(bit, out / "bit", {"head": args.head, "stage": args.stage})
    (out / "toy_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    _write_history(history, out)
    write_manifest(out, args, run, inputs, started)
    print(out)
    return 0


def _write_history(history: dict, out: Path):
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "epoch", "train_loss", "val_loss", "lr"])
        for phase, rows in history.items():
            for r in rows:
                w.writerow([phase, r["epoch"], f"{r['train_loss']:.6g}", f"{r['val_loss']:.6g}", f"{r['lr']:.6g}"])


def _toy_from(path: Path) -> ToyConfig:
    return ToyConfig.from_dict(json.loads((path / "toy_config.json").read_text()))


def cmd_reconstruct(args, store):
    started = time.time()
    data, pairs, manifest, encoder, _ = load_data(store, args.data)
    v2c_dir = store.resolve(args.v2c, "v2c")
    v2c = V2CMapping.load(v2c_dir)
    sem_dir = store.resolve(args.semantic, "train-semantic-s2", "train-semantic-s1") \
        if args.mode in ("dual", "semantic") else None
    low_dir = store.resolve(args.lowlevel, "train-lowlevel") if args.mode in ("dual", "lowlevel") else None
    cfg = toy_config(args, manifest["synth"])
    gen = replace(cfg.generation, total_steps=args.steps if args.steps is not None else cfg.generation.total_steps,
                  start_step=args.start if args.start is not None else cfg.generation.start_step,
                  refine=args.refine or cfg.generation.refine, seed=cfg.seed)
    dip = cfg.dip if args.dip_iterations is None else replace(cfg.dip, iterations=args.dip_iterations)

    if args.input:
        acts = np.load(args.input).astype(np.float32)
        if acts.ndim == 1:
            acts = acts[None]
        if args.subject is None:
            raise ConfigurationError("--input needs --subject")
        samples = [FmriSample(args.subject, a, f"input-{i:05d}", "labeled", "test") for i, a in enumerate(acts)]
        SubjectRegistry({args.subject: v2c.assignments.get(args.subject, np.zeros(0)).shape[0]}).check(samples[0])
        gts = None
    else:
        test = split_pairs(pairs, "test")
        if args.subject is None:
            test = base_pairs(test, manifest)
        else:
            test = [p for p in test if p[0].subject_id == args.subject]
        if args.limit:
            test = test[:args.limit]
        samples = [s for s, _ in test]
        gts = np.stack([im.pixels for _, im in test])
    unknown = sorted({s.subject_id for s in samples} - set(v2c.assignments))
    if unknown:
        raise ConfigurationError(f"no cluster assignment for subjects {unknown}; pass --v2c from a transfer run")

    semantic = load_checkpoint(sem_dir / "bit")[0] if sem_dir else None
    lowlevel = load_checkpoint(low_dir / "bit")[0] if low_dir else None
    backend = load_backend(cfg, sem_dir) if sem_dir else make_backend(cfg)
    models = BrainITModels(v2c, semantic, lowlevel, toy_extractor(cfg), toy_layout(cfg), dip)
    run = {"mode": args.mode, "generation": gen.to_dict(), "dip": dip.to_dict(), "data": data.name,
           "v2c": v2c_dir.name, "semantic": sem_dir.name if sem_dir else None,
           "lowlevel": low_dir.name if low_dir else None, "input": str(args.input),
           "subject": args.subject, "limit": args.limit}
    out = Path(args.out) if args.out else store.stage_dir("recon", run)
    out.mkdir(parents=True, exist_ok=True)
    low = None
    if args.mode in ("dual", "lowlevel"):
        tokens = predict(lowlevel, samples, v2c).float()
        if args.save_tokens:
            np.save(out / "lowlevel_tokens.npy", tokens.numpy())
        low = dip_invert(tokens, models.extractor, models.layout, dip, seed=gen.seed).images
    rec = reconstruct(samples, models, backend, args.mode, gen, lowlevel=low)
    np.save(out / "recon.npy", rec)
    png = out / "png"
    png.mkdir(exist_ok=True)
    for i, (s, im) in enumerate(zip(samples, rec)):
        _save_png(im, png / f"{i:05d}_subj{s.subject_id}_{s.image_id}.png")
    if gts is not None:
        np.save(out / "gt.npy", gts)
        recon_grid({"ground truth": gts, args.mode: rec}, out / "grid.png")
    (out / "samples.json").write_text(json.dumps(
        [{"subject": s.subject_id, "image_id": s.image_id} for s in samples], indent=1) + "\n")
    provenance = {**run, "checkpoints": {"semantic": str(sem_dir), "lowlevel": str(low_dir), "v2c": str(v2c_dir)},
                  "seeds": {"generation": gen.seed, "dip": gen.seed}}
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, default=str) + "\n")
    write_manifest(out, args, run, {"data": data, "v2c": v2c_dir, "semantic": sem_dir, "lowlevel": low_dir},
                   started)
    print(out)
    return 0


def _metric_list(spec: str):
    if spec == "all":
        return "all"
    names = [m.strip() for m in spec.split(",") if m.strip()]
    lookup = {m.lower(): m for m in TABLE_COLUMNS + EXTRA_COLUMNS}
    bad = [m for m in names if m.lower() not in lookup]
    if bad:
        raise ConfigurationError(f"unknown metrics {bad}; choose from {TABLE_COLUMNS + EXTRA_COLUMNS}")
    return [lookup[m.lower()] for m in names]


def cmd_evaluate(args, store):
    recon = _load_images(args.recon)
    gt = _load_images(args.gt)
    metrics = _metric_list(args.metrics)
    seed = 0 if args.seed is None else args.seed
    samples_file = Path(args.recon) / "samples.json" if Path(args.recon).is_dir() else None
    groups = {"all": np.arange(len(recon))}
    if samples_file and samples_file.exists():
        subj = [s["subject"] for s in json.loads(samples_file.read_text())]
        groups = {f"subject {s}": np.flatnonzero(np.asarray(subj) == s) for s in sorted(set(subj))}
    reports = {g: evaluate(recon[idx], gt[idx], metrics, toy=True, seed=seed) for g, idx in groups.items()}
    keys = list(next(iter(reports.values())).values)
    mean = {k: float(np.mean([r.values[k] for r in reports.values()])) for k in keys}
    report = MetricReport(mean, {"n_images": int(len(recon)), "seed": seed,
                                 "extractors": next(iter(reports.values())).meta["extractors"],
                                 "groups": {g: r.values for g, r in reports.items()}})
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path)
    rows = {g: r.values for g, r in reports.items()}
    if len(rows) > 1:
        rows["mean"] = mean
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group"] + keys)
        for g, vals in rows.items():
            w.writerow([g] + [f"{vals[k]:.6f}" for k in keys])
    metric_bars(rows, path.with_suffix(".png"), "metrics")
    print(report.to_json())
    return 0


def cmd_ablate(args, store):
    started = time.time()
    cfg = toy_config(args)
    synth = replace(cfg.synth, n_pairs=args.pairs or cfg.synth.n_pairs, n_test=args.test or cfg.synth.n_test,
                    seed=cfg.seed)
    cfg = replace(cfg, synth=synth)
    ks = [int(k) for k in args.k.split(",")] if args.k else [8, 32, 128]
    run = {"study": args.study, "k": ks, "toy": cfg.to_dict()}
    out = Path(args.out) if args.out else store.stage_dir("ablate", run)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate(args.study, cfg, ks, _metric_list(args.metrics))
    table = {name: rep.values for name, rep in rows.items()}
    _write_report(table, out / "report.json", f"ablation: {args.study}",
                  {"study": args.study, "seed": cfg.seed, "n_test": synth.n_test})
    write_manifest(out, args, run, {}, started)
    print(json.dumps(table, indent=1, sort_keys=True))
    return 0


def cmd_transfer(args, store):
    started = time.time()
    data, pairs, manifest, _, unlabeled = load_data(store, args.data)
    enc_path = Path(args.encoder) if args.encoder else data
    encoder = SyntheticEncoder.load(enc_path / "encoder.npz" if enc_path.is_dir() else enc_path)
    v2c_dir = store.resolve(args.v2c, "v2c")
    v2c = V2CMapping.load(v2c_dir)
    heads = {}
    if args.base:
        base = Path(args.base)
        if (base / "bit").exists():
            heads["lowlevel" if "lowlevel" in base.parent.name else "semantic"] = base
        for head in ("semantic", "lowlevel"):
            if (base / head / "bit").exists():
                heads[head] = base / head
        if not heads:
            raise ConfigurationError(f"{base} holds no checkpoint")
    else:
        heads = {"semantic": store.resolve(None, "train-semantic-s2", "train-semantic-s1"),
                 "lowlevel": store.resolve(None, "train-lowlevel")}
    cfg = toy_config(args, manifest["synth"])
    new = [p for p in split_pairs(pairs, "train") if p[0].subject_id == args.subject]
    if not new:
        raise ConfigurationError(f"no training pairs for subject {args.subject} in {data}")
    tcfg = TransferConfig(minutes=args.minutes, enrichment=not args.no_enrichment, seed=cfg.seed,
                          train_backend=args.train_backend,
                          stages=tuple(s for s in ("semantic", "joint", "lowlevel") if s not in args.skip))
    models = {h: load_checkpoint(p / "bit")[0] for h, p in heads.items()}
    images = [im for _, im in new] + (list(unlabeled) if tcfg.enrichment else [])
    targets = {"semantic": semantic_targets(images, toy_backbone(cfg)),
               "lowlevel": conv_targets(images, toy_extractor(cfg), toy_layout(cfg))}
    backend = load_backend(cfg, heads["semantic"]) if "semantic" in heads and "joint" in tcfg.stages else None
    sched = {"semantic": cfg.schedule(args.epochs or cfg.semantic_epochs),
             "joint": cfg.schedule(1, lr=cfg.lr * 0.1, warmup_epochs=0, batch_size=16, grad_accum=4),
             "lowlevel": cfg.schedule(args.epochs or cfg.lowlevel_epochs, lr=cfg.lowlevel_lr)}
    run = {"subject": args.subject, "transfer": tcfg.to_dict(), "base": {h: str(p) for h, p in heads.items()},
           "data": data.name, "v2c": v2c_dir.name, "epochs": args.epochs}
    out = store.stage_dir("transfer", run)
    res = adapt_subject(models, new, encoder, v2c, tcfg, targets, toy_layout(cfg), backend,
                        unlabeled if tcfg.enrichment else (), sched)
    for head in ("semantic", "lowlevel"):
        model = getattr(res, head)
        if model is not None:
            (out / head).mkdir()
            save_checkpoint(model, out / head / "bit", {"head": head, "transfer_subject": args.subject})
            if head == "semantic":
                shutil.copy(heads["semantic"] / "backend.pt", out / head / "backend.pt")
    v2c.assignments = {**v2c.assignments, args.subject: res.assignment}
    v2c.save(out / "v2c")
    _write_history(res.histories, out)
    (out / "summary.json").write_text(json.dumps({"subject": args.subject, "n_samples": res.n_samples,
                                                  "budget_minutes": args.minutes}, indent=1) + "\n")
    write_manifest(out, args, run, {"data": data, "encoder": enc_path, "v2c": v2c_dir, **heads}, started)
    print(out)
    return 0


def cmd_dip_invert(args, store):
    started = time.time()
    tokens = torch.as_tensor(np.load(args.features), dtype=torch.float32)
    if tokens.dim() == 2:
        tokens = tokens[None]
    size = args.image_size
    cfg = toy_config(args, {**SyntheticConfig().__dict__, "image_size": size})
    dip = cfg.dip if args.iterations is None else replace(cfg.dip, iterations=args.iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = dip_invert(tokens, toy_extractor(cfg), toy_layout(cfg), dip, seed=cfg.seed, log_every=args.log_every)
    np.save(out / "images.npy", res.images)
    for i, im in enumerate(res.images):
        _save_png(im, out / f"{i:05d}.png")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for step, loss in res.loss_trace:
            w.writerow([step, f"{loss:.8g}"])
    steps, losses = zip(*res.loss_trace)
    loss_curve(steps, losses, out / "loss_trace.png")
    write_manifest(out, args, {"dip": dip.to_dict(), "features": str(args.features)}, {"features": args.features},
                   started)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _globals(suppress: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the subcommand.

    The subcommand copy defaults to SUPPRESS so it never overwrites a value
    given before the subcommand.
    """
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--toy", action="store_true", default=d(False), help="use stub backbones (no pretrained assets)")
    g.add_argument("--seed", type=int, default=d(None))
    g.add_argument("--n-voxels-sample", type=int, default=d(None), help="voxels drawn per sample per step")
    g.add_argument("--root", default=d(None), help=f"artifact root (default ${ROOT_ENV} or ./brainit-runs)")
    g.add_argument("--config", default=d(None), help="flat YAML run config")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _globals(True)
    p = argparse.ArgumentParser(prog="brainit", description=__doc__, parents=[_globals(False)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate-config", parents=[common], help="check a config file and echo it normalized")
    s.add_argument("path")

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic fMRI/image dataset")
    s.add_argument("--pairs", type=int, default=200)
    s.add_argument("--test", type=int, default=50)
    s.add_argument("--voxels", type=int, default=512)
    s.add_argument("--subjects", type=int, default=2)
    s.add_argument("--holdout", type=int, nargs="*", help="subjects kept out of base training")
    s.add_argument("--image-size", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--unlabeled", type=int, default=1000, help="extra images for enrichment")

    s = sub.add_parser("cluster", parents=[common], help="fit the shared voxel-to-cluster mapping")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--mode", choices=["functional", "anatomical"], default=None)
    s.add_argument("--data", default=None)

    s = sub.add_parser("train", parents=[common], help="train one head")
    s.add_argument("--head", choices=["semantic", "lowlevel"], required=True)
    s.add_argument("--stage", type=int, choices=[1, 2], default=1)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--v2c", default=None)
    s.add_argument("--init", default=None, help="stage-1 run to continue from (stage 2)")
    s.add_argument("--quick", action="store_true", help="smoke-test epochs")

    s = sub.add_parser("reconstruct", parents=[common], help="generate images from fMRI")
    s.add_argument("--input", default=None, help="(N, V) .npy activations; default: dataset test split")
    s.add_argument("--subject", type=int, default=None)
    s.add_argument("--mode", choices=["dual", "semantic", "lowlevel"], default="dual")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--start", type=int, default=None)
    s.add_argument("--refine", action="store_true")
    s.add_argument("--dip-iterations", type=int, default=None)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--save-tokens", action="store_true", help="also write predicted low-level tokens")
    s.add_argument("--data", default=None)
    s.add_argument("--v2c", default=None)
    s.add_argument("--semantic", default=None)
    s.add_argument("--lowlevel", default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--quick", action="store_true")

    s = sub.add_parser("transfer", parents=[common], help="adapt trained heads to a new subject")
    s.add_argument("--subject", type=int, required=True)
    s.add_argument("--minutes", type=float, default=None, help="data budget (30 samples per minute)")
    s.add_argument("--base", default=None, help="checkpoint dir (or dir with semantic/ and lowlevel/)")
    s.add_argument("--encoder", default=None, help="encoder.npz or its directory")
    s.add_argument("--no-enrichment", action="store_true")
    s.add_argument("--train-backend", action="store_true", help="also update the denoiser in joint training")
    s.add_argument("--skip", nargs="*", default=[], choices=["semantic", "joint", "lowlevel"])
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--v2c", default=None)
    s.add_argument("--quick", action="store_true")

    s = sub.add_parser("evaluate", parents=[common], help="score reconstructions against ground truth")
    s.add_argument("--recon", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metrics", default="all")
    s.add_argument("--report", required=True)

    s = sub.add_parser("ablate", parents=[common], help="toy ablation studies")
    s.add_argument("--study", choices=["clusters", "branches", "enrichment", "clustering"], required=True)
    s.add_argument("--k", default=None, help="comma-separated cluster counts")
    s.add_argument("--metrics", default="all")
    s.add_argument("--pairs", type=int, default=None)
    s.add_argument("--test", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--quick", action="store_true")

    s = sub.add_parser("dip-invert", parents=[common], help="invert low-level tokens to images")
    s.add_argument("--features", required=True, help="(N, tokens, dim) .npy in the toy layout")
    s.add_argument("--out", required=True)
    s.add_argument("--image-size", type=int, default=16)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--log-every", type=int, default=10)
    return p


COMMANDS = {
    "validate-config": cmd_validate_config, "synth": cmd_synth, "cluster": cmd_cluster, "train": cmd_train,
    "reconstruct": cmd_reconstruct, "transfer": cmd_transfer, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "dip-invert": cmd_dip_invert,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = None if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    store = Store(args.root or os.environ.get(ROOT_ENV, "brainit-runs"))
    try:
        return COMMANDS[args.command](args, store)
    except (ConfigurationError, CapabilityError, ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"brainit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
