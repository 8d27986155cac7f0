"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line in the terminal summary."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import brainit.pipeline as pipeline_mod
import brainit.training as training_mod
from brainit.bit import named_tensors, predict
from brainit.cli import main
from brainit.data import ImageRecord, SyntheticConfig, make_synthetic_dataset, random_image, split_pairs
from brainit.diffusion import ToyDiffusionBackend
from brainit.dip import DipConfig, DipGenerator, dip_invert, feature_loss, feature_rel_l2, upsample_for_diffusion
from brainit.features import (ConvTokenLayout, ToyConvExtractor, extract_conv_tokens, to_tensor, tokens_from_maps,
                              untokenize)
from brainit.generation import BrainITModels, GenerationConfig, dual_branch_generate
from brainit.metrics import TABLE_COLUMNS, pixcorr, ssim_color, ssim_gray, two_way_from_features
from brainit.pipeline import (ToyConfig, cluster, lowlevel_bit, make_backend, run_toy_pipeline, semantic_bit,
                              toy_backbone, toy_extractor, toy_layout)
from brainit.training import TrainSchedule, conv_targets, infonce_loss, semantic_targets
from brainit.transfer import TransferConfig, adapt_subject
from brainit.v2c import GmmConfig, fit_v2c
from oracles import central_fd, linear_closed_form, rel_error, two_way_brute
from test_cross_transformer import _model as cross_model
from test_tokenizer import _instance, loop_tokens

pytestmark = pytest.mark.acceptance

# frozen from the reference inversion run (112 px, width 16, lr 5e-3, 2000 iterations, seed 0)
DIP_PIXCORR_REF = 0.9966


def _param_fd_error(loss, p):
    """Relative error between autograd and central differences for one parameter tensor."""
    p.grad = None
    loss().backward()
    analytic = p.grad.clone()

    def f(x):
        with torch.no_grad():
            old = p.data.clone()
            p.data.copy_(x)
            out = loss()
            p.data.copy_(old)
        return out
    return rel_error(analytic, central_fd(f, p.data))


# ---------------------------------------------------------------- 1

def test_criterion_01_tokenizer_loop_oracle(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        tok, acts, idx, assign = _instance(seed)
        with torch.no_grad():
            got = tok(acts, idx, assign, [1])[0].numpy()
        worst = max(worst, np.abs(got - loop_tokens(tok, acts, idx, assign)).max())
    dt = time.perf_counter() - t0
    criterion(1, worst < 1e-6 and dt < 10, f"200 instances, max abs err {worst:.2e} (< 1e-6), {dt:.1f} s (< 10 s)")


# ---------------------------------------------------------------- 2

def test_criterion_02_cross_cluster_isolation(criterion):
    worst, n, h = 0.0, 0, 1e-4
    seed = 5000
    while n < 50:
        tok, acts, idx, assign = _instance(seed, n=24)
        seed += 1
        if assign.unique().numel() < 2:
            continue
        n += 1
        for v in range(acts.shape[1]):
            up, down = acts.clone(), acts.clone()
            up[0, v] += h
            down[0, v] -= h
            with torch.no_grad():
                diff = (tok(up, idx, assign, [1]) - tok(down, idx, assign, [1]))[0] / (2 * h)
            others = [c for c in range(tok.k) if c != int(assign[0, v])]
            worst = max(worst, diff[others].abs().max().item())
    criterion(2, worst < 1e-12, f"{n} instances, max off-cluster sensitivity {worst:.1e} (< 1e-12)")


# ---------------------------------------------------------------- 3

def test_criterion_03_gradient_checks(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    errs = {}

    tok, acts, idx, assign = _instance(3, v_max=6, k_max=3, d_max=4, n=8)
    probe = torch.as_tensor(rng.normal(size=(1, tok.k, tok.d)))
    tok_loss = lambda a=acts: (tok(a, idx, assign, [1]) * probe).sum()
    a = acts.clone().requires_grad_(True)
    tok_loss(a).backward()
    errs["tokenizer/activations"] = rel_error(a.grad, central_fd(lambda x: tok_loss(x).detach(), acts))
    for name, p in (("voxel_emb", tok.voxel_emb["subj1"]), ("cluster_emb", tok.cluster_emb),
                    ("to_q", tok.to_q.weight), ("to_v", tok.to_v.weight)):
        errs[f"tokenizer/{name}"] = _param_fd_error(tok_loss, p)

    model = cross_model(blocks=1, d=4, d_out=3, q=2)
    tokens = torch.as_tensor(rng.normal(size=(1, 3, 4)))
    probe = torch.as_tensor(rng.normal(size=(1, 2, 3)))
    t = tokens.clone().requires_grad_(True)
    (model(t) * probe).sum().backward()
    errs["cross/tokens"] = rel_error(t.grad, central_fd(lambda x: (model(x) * probe).sum().detach(), tokens))
    params = dict(model.named_parameters())
    for name in ("queries", "blocks.0.self_attn.to_k.weight", "blocks.0.cross_attn.to_v.weight", "proj.weight"):
        errs[f"cross/{name}"] = _param_fd_error(lambda: (model(tokens) * probe).sum(), params[name])

    p, tg = torch.as_tensor(rng.normal(size=(4, 8))), torch.as_tensor(rng.normal(size=(4, 8)))
    x = p.clone().requires_grad_(True)
    infonce_loss(x, tg).backward()
    errs["infonce/pred"] = rel_error(x.grad, central_fd(lambda y: infonce_loss(y, tg), p))
    y = tg.clone().requires_grad_(True)
    infonce_loss(p, y).backward()
    errs["infonce/target"] = rel_error(y.grad, central_fd(lambda z: infonce_loss(p, z), tg))

    ext = ToyConvExtractor((2, 3, 3, 3, 3), 16, seed=1, dtype=torch.float64)
    with torch.no_grad():
        target = ext(to_tensor(rng.uniform(size=(1, 16, 16, 3)), dtype=torch.float64))
    img = torch.as_tensor(rng.uniform(0.2, 0.8, size=(1, 3, 16, 16)))
    dip_loss = lambda im: feature_loss(ext(im), target, [1.0] * 5).sum()
    im = img.clone().requires_grad_(True)
    dip_loss(im).backward()
    coords = rng.choice(img.numel(), 60, replace=False)
    fd = central_fd(dip_loss, img, coords=coords)
    errs["dip/image"] = rel_error(im.grad.reshape(-1)[coords], fd.reshape(-1)[coords])
    gen = DipGenerator(1, DipConfig(in_channels=2, width=3, iterations=1), seed=0).double()
    z = torch.as_tensor(rng.normal(size=(1, 2, 16, 16))) * 0.1
    errs["dip/generator"] = _param_fd_error(lambda: dip_loss(gen(z)), gen.inp.weight)

    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    criterion(3, errs[worst] < 1e-3 and dt < 60,
              f"{len(errs)} gradient checks, worst {worst} rel err {errs[worst]:.1e} (< 1e-3), {dt:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 4

def test_criterion_04_canonical_layout(criterion):
    layout = ConvTokenLayout.canonical()
    counts = layout.token_counts
    gen = torch.Generator().manual_seed(4)
    maps = [torch.randn(1, l.channels, l.grid, l.grid, generator=gen, dtype=torch.float64) for l in layout.layers]
    tokens = tokens_from_maps(maps, layout)
    back = untokenize(tokens, layout)
    padded = {tokens[:, o:o + n].shape[-1] for o, n in zip(layout.offsets(), counts)}
    exact = [i for i, l in enumerate(layout.layers) if torch.equal(back[i], maps[i])]
    nonoverlap = [i for i, l in enumerate(layout.layers) if l.merge != "2x2-overlap"]
    ok = (counts == [3136, 3025, 784, 196, 49] and padded == {512} and tokens.shape[1] == sum(counts)
          and set(nonoverlap) <= set(exact))
    criterion(4, ok, f"counts {counts}, padded dims {sorted(padded)}, exact roundtrip on layers {exact} "
                     f"(non-overlapping {nonoverlap})")


# ---------------------------------------------------------------- 5

def test_criterion_05_dip_self_inversion(criterion):
    t0 = time.perf_counter()
    ext = ToyConvExtractor(input_size=112, seed=0)
    layout = ConvTokenLayout.for_extractor(ext.channels, 112, 512)
    src = random_image(np.random.default_rng(3), 112)
    tokens = extract_conv_tokens([src], ext, layout)
    res = dip_invert(tokens, ext, layout, DipConfig(width=16, iterations=2000, lr=5e-3), seed=0, log_every=100)
    dt = time.perf_counter() - t0
    with torch.no_grad():
        maps = ext(to_tensor([src], 112, torch.float32))
    rel = float(feature_rel_l2(res.images, maps, ext)[0])
    pc = pixcorr(res.images, src[None])
    lo = 0.9 * DIP_PIXCORR_REF
    ok = rel < 0.1 and abs(pc - DIP_PIXCORR_REF) <= 0.1 * DIP_PIXCORR_REF and dt < 300
    criterion(5, ok, f"feature rel L2 {rel:.4f} (< 0.1), PixCorr {pc:.4f} (ref {DIP_PIXCORR_REF}, >= {lo:.4f}), "
                     f"{dt:.0f} s (< 300 s)")


# ---------------------------------------------------------------- 6

def test_criterion_06_dual_branch_degenerate(criterion):
    cfg = ToyConfig(synth=SyntheticConfig(n_subjects=2, n_voxels=48, n_pairs=10, n_test=4, seed=6), k=4, d=16,
                    heads=2, blocks=1)
    pairs, enc = make_synthetic_dataset(cfg.synth)
    v2c = cluster(enc, cfg)
    nv = {s: 48 for s in enc.subjects}
    models = BrainITModels(v2c, semantic_bit(cfg, nv), lowlevel_bit(cfg, nv), toy_extractor(cfg), toy_layout(cfg))
    samples = [s for s, _ in split_pairs(pairs, "test")]
    low = np.random.default_rng(6).uniform(size=(len(samples), 8, 8, 3))

    out = dual_branch_generate(samples, models, ToyDiffusionBackend.identity(), GenerationConfig(noise_scale=0.0),
                               lowlevel=low)
    exact = np.array_equal(np.stack([r.pixels for r in out]), upsample_for_diffusion(low, 16))

    backend = ToyDiffusionBackend.linear(lam=0.4, seed=6)
    gen = GenerationConfig(seed=11)
    got = np.stack([r.pixels for r in dual_branch_generate(samples, models, backend, gen, lowlevel=low)])
    cond = predict(models.semantic, samples, v2c).double()
    start = upsample_for_diffusion(low, 16).transpose(0, 3, 1, 2)
    noise = np.stack([np.random.default_rng([11, i]).standard_normal((3, 16, 16)) for i in range(len(samples))])
    err = np.abs(got - linear_closed_form(backend, cond, start, gen, noise)).max()
    criterion(6, exact and err < 1e-10, f"identity backend bit-exact: {exact}, linear closed-form max err "
                                        f"{err:.1e} (< 1e-10)")


# ---------------------------------------------------------------- 7

def test_criterion_07_transfer_freeze(criterion, monkeypatch):
    cfg = ToyConfig(synth=SyntheticConfig(n_subjects=3, n_voxels=48, n_pairs=24, n_test=2, embed_dim=16, seed=7),
                    k=4, d=16, heads=2, blocks=1)
    pairs, enc = make_synthetic_dataset(cfg.synth)
    v2c = fit_v2c({s: enc.voxel_embeddings(s) for s in (1, 2)}, GmmConfig(k=4))
    base = {"semantic": semantic_bit(cfg, {1: 48, 2: 48}), "lowlevel": lowlevel_bit(cfg, {1: 48, 2: 48})}
    train = split_pairs(pairs, "train")
    unl = [ImageRecord(f"u{i}", np.random.default_rng(i).uniform(size=(16, 16, 3))) for i in range(4)]
    images = [i for _, i in train] + unl
    targets = {"semantic": semantic_targets(images, toy_backbone(cfg)),
               "lowlevel": conv_targets(images, toy_extractor(cfg), toy_layout(cfg))}
    new = [(s, i) for s, i in train if s.subject_id == 3]
    before = {h: named_tensors(m) for h, m in base.items()}
    backend = make_backend(cfg)
    den_before = {n: t.clone() for n, t in backend.denoiser.state_dict().items()}

    # independent per-step audit wrapped around the training loop
    audit = {"steps": 0, "leaks": 0}
    real_fit = training_mod.fit

    def audited_fit(model, params, *args, **kw):
        modules = [m for m in (model if isinstance(model, (list, tuple)) else [model]) if m is not None]
        hook = kw.pop("step_hook", None) if "step_hook" in kw else (args[-1] if len(args) == 7 else None)
        if len(args) == 7:
            args = args[:-1]

        def step_hook(epoch, step):
            for m in modules:
                for name, p in m.named_parameters():
                    if name == "tokenizer.voxel_emb.subj3":
                        continue
                    audit["leaks"] += int(p.grad is not None and bool((p.grad != 0).any()))
            audit["steps"] += 1
            if hook:
                hook(epoch, step)
        return real_fit(model, params, *args, step_hook=step_hook, **kw)
    monkeypatch.setattr(training_mod, "fit", audited_fit)

    kw = dict(epochs=2, lr=1e-2, warmup_epochs=0, batch_size=8, n_voxels_sample=48)
    sched = {"semantic": TrainSchedule(**kw), "lowlevel": TrainSchedule(**kw),
             "joint": TrainSchedule(**{**kw, "grad_accum": 2})}
    res = adapt_subject(base, new, enc, v2c, TransferConfig(), targets=targets, layout=toy_layout(cfg),
                        backend=backend, unlabeled=unl, schedules=sched)
    changed = []
    for head, model in (("semantic", res.semantic), ("lowlevel", res.lowlevel)):
        after = named_tensors(model)
        changed += [f"{head}/{n}" for n, t in before[head].items() if not torch.equal(after[n], t)]
        changed += [f"{head}/{n}" for n in set(after) - set(before[head]) - {"voxel_emb/subj3"}]
    changed += [f"denoiser/{n}" for n, t in backend.denoiser.state_dict().items() if not torch.equal(den_before[n], t)]
    ok = not changed and audit["steps"] > 0 and audit["leaks"] == 0
    criterion(7, ok, f"{len(changed)} frozen tensors changed, {audit['leaks']} nonzero frozen grads over "
                     f"{audit['steps']} audited steps")


# ---------------------------------------------------------------- 8

def test_criterion_08_toy_end_to_end(criterion):
    t0 = time.perf_counter()
    cfg = ToyConfig()
    assert (cfg.synth.n_pairs, cfg.synth.n_test, cfg.synth.image_size, cfg.synth.n_voxels, cfg.k) == \
        (200, 50, 16, 512, 8)
    out = run_toy_pipeline(cfg, baseline=True)
    dt = time.perf_counter() - t0
    dual, base = out["reports"]["dual"].values, out["reports"]["untrained"].values
    ok = dual["CLIP"] > 0.75 and dual["PixCorr"] > base["PixCorr"] and dt < 900
    criterion(8, ok, f"two-way (toy semantic) {dual['CLIP']:.3f} (> 0.75), PixCorr {dual['PixCorr']:.3f} "
                     f"vs untrained {base['PixCorr']:.3f}, {dt:.0f} s (< 900 s)")


# ---------------------------------------------------------------- 9

def test_criterion_09_metric_oracles(criterion):
    rng = np.random.default_rng(9)
    mism = 0
    for _ in range(100):
        n, d = rng.integers(2, 12), rng.integers(2, 20)
        r, g = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        mism += abs(two_way_from_features(r, g) - two_way_brute(r, g)) > 1e-12
    null = np.mean([two_way_from_features(rng.normal(size=(8, 16)), rng.normal(size=(8, 16)))
                    for _ in range(10_000)])
    img = rng.uniform(size=(3, 16, 16, 3))
    ident = (pixcorr(img, img), ssim_gray(img, img), ssim_color(img, img))
    ok = mism == 0 and abs(null - 0.5) <= 0.02 and ident == (1.0, 1.0, 1.0)
    criterion(9, ok, f"{mism}/100 brute-force mismatches, null {null:.4f} (0.50 +- 0.02), "
                     f"identity pixcorr/ssim/ssim-color {ident}")


# ---------------------------------------------------------------- 10

def _cli(root, *argv):
    return main(["--root", str(root), "--toy", *argv])


def _rows(out):
    return json.loads((Path(out) / "report.json").read_text())["rows"]


def test_criterion_10_ablation_harness(criterion, tmp_path, monkeypatch):
    calls = []
    real_pool = pipeline_mod.enrichment_pool

    def spy(cfg, encoder, subjects, unlabeled):
        calls.append(len(unlabeled))
        return real_pool(cfg, encoder, subjects, unlabeled)
    monkeypatch.setattr(pipeline_mod, "enrichment_pool", spy)

    problems = []
    for study, extra in (("clusters", ["--k", "8,32,128"]), ("branches", []), ("enrichment", [])):
        out = tmp_path / study
        code = _cli(tmp_path / "root", "ablate", "--study", study, *extra, "--quick", "--out", str(out))
        if code != 0:
            problems.append(f"{study} exit {code}")
            continue
        if not all((out / f"report.{ext}").exists() for ext in ("json", "csv", "png")):
            problems.append(f"{study} missing report files")
        rows = _rows(out)
        expect = {"clusters": ["K=8", "K=32", "K=128"],
                  "branches": ["Low-Level only", "Semantic only", "Combined"],
                  "enrichment": ["without external images", "with external images"]}[study]
        if list(rows) != expect:
            problems.append(f"{study} rows {list(rows)}")
        if any(not set(TABLE_COLUMNS) <= set(v) for v in rows.values()):
            problems.append(f"{study} missing table columns")
        if any(not np.isfinite(x) for v in rows.values() for x in v.values()):
            problems.append(f"{study} non-finite values")
    # clusters 3 runs, branches 1, enrichment 2: the last two calls carry the toggle
    toggled = len(calls) == 6 and calls[-2] == 0 and calls[-1] > 0
    if not toggled:
        problems.append(f"enrichment pool sizes {calls}")
    criterion(10, not problems, "clusters K=8/32/128, branches triple, enrichment toggle "
                                f"(unlabeled {calls[-2:]}): " + ("; ".join(problems) or "all reports well formed"))


# ---------------------------------------------------------------- 11

def _cli_pipeline(root):
    steps = [("synth", "--pairs", "30", "--test", "6", "--voxels", "64", "--unlabeled", "20"),
             ("cluster", "--k", "4"),
             ("train", "--head", "lowlevel", "--quick"),
             ("train", "--head", "semantic", "--stage", "1", "--quick"),
             ("train", "--head", "semantic", "--stage", "2", "--quick"),
             ("reconstruct", "--quick", "--out", str(root / "recon"))]
    for argv in steps:
        assert _cli(root, "--seed", "3", *argv) == 0, argv
    assert _cli(root, "evaluate", "--recon", str(root / "recon"), "--gt", str(root / "recon" / "gt.npy"),
                "--report", str(root / "eval" / "report.json")) == 0
    return root


def test_criterion_11_determinism(criterion, tmp_path):
    a = _cli_pipeline(tmp_path / "a")
    b = _cli_pipeline(tmp_path / "b")
    files = ["recon/recon.npy", "eval/report.json", "eval/report.csv", "eval/report.png"]
    same = {f: (a / f).read_bytes() == (b / f).read_bytes() for f in files}
    criterion(11, all(same.values()), "two CLI runs in separate roots: "
                                      + ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))
