"""Acceptance gate: one test per criterion, each reporting a single pass/fail line.

Criteria 4 and 5 train desk-scale models on one CPU core (roughly half an hour
together); trained models are shared between them through a session cache.
"""
import csv
import time

import numpy as np
import pytest
import torch

from umri import physics
from umri.cli import main
from umri.config import RunConfig, set_deterministic
from umri.data import build_manifest, dumps_volume, loads_volume, make_sample
from umri.metrics import ssim, ssim_loss
from umri.denoiser import DenoiserConfig, FoundationDenoiser
from umri.nn import (ModelWeights, NormUNet, VisionTransformer, VitConfig, bilinear_resize,
                     conv2d, depthwise_separable_conv, instance_norm, layer_norm)
from umri.nn.vit import Block
from umri.nn.weights import dumps_weights, loads_weights
from umri.recon import SmeConfig, UnrolledRecon, cascade_step, reconstruct
from umri.train import predict, stack_samples, train

from conftest import ACCEPTANCE, ACCEPTANCE_NOTES, dft2c_oracle, mask_oracle
from gradcheck import check_grads, fd_grad

# desk training protocol shared by criteria 4 and 5
DESK_EPOCHS = 3
OOD_EPOCHS = 6
SEEDS = range(5)
OOD_CELLS = [(r, cf, fam) for fam in "BC" for r in (4, 8) for cf in (0.08, 0.04)]


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = line
    print(line)


# 1 ---------------------------------------------------------------------------

def test_criterion_1_physics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for h, w in [(8, 8), (7, 9), (16, 12), (5, 5)]:
        for _ in range(5):
            x = torch.from_numpy(rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w)))
            y = torch.from_numpy(rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w)))
            a, b = complex(rng.standard_normal(), rng.standard_normal()), complex(rng.standard_normal(), 0.3)
            kx = physics.fft2c(x)
            nx = float(torch.linalg.vector_norm(x))
            worst = max(worst,
                        float(torch.linalg.vector_norm(physics.ifft2c(kx) - x)) / nx,
                        abs(float(torch.linalg.vector_norm(kx)) - nx) / nx,
                        float(torch.linalg.vector_norm(physics.fft2c(a * x + b * y) - a * kx - b * physics.fft2c(y)))
                        / float(torch.linalg.vector_norm(a * kx + b * physics.fft2c(y))),
                        float(np.abs(kx.numpy() - dft2c_oracle(x.numpy())).max()) / nx)
    # adjoint identity <A x, k> = <x, A^H k> with A = M F E
    for coils, r in [(2, 4), (4, 2), (3, 8)]:
        mask = physics.make_equispaced_mask(16, r, acs_lines=4)
        sens = physics.normalize_sensitivities(
            torch.from_numpy(rng.standard_normal((coils, 16, 16)) + 1j * rng.standard_normal((coils, 16, 16))))
        x = torch.from_numpy(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)))
        k = torch.from_numpy(rng.standard_normal((coils, 16, 16)) + 1j * rng.standard_normal((coils, 16, 16)))
        lhs = torch.vdot(physics.forward_operator(x, sens, mask).flatten(), k.flatten())
        rhs = torch.vdot(x.flatten(), physics.adjoint_operator(k, sens, mask).flatten())
        worst = max(worst, abs(complex(lhs - rhs)) / abs(complex(lhs)))
        # reduce(expand(x)) = x on the support of normalized maps
        worst = max(worst, float((physics.reduce(physics.expand(x, sens), sens) - x).abs().max()))
    mismatches = 0
    for width in (16, 33, 64, 100, 192):
        for r in (1, 2, 4, 8):
            for acs in (1, 3, 8, 24):
                if acs > width:
                    continue
                m = physics.make_equispaced_mask(width, r, acs_lines=acs)
                mismatches += list(m.sampled_indices()) != mask_oracle(width, r, acs)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and mismatches == 0 and elapsed < 10
    record(1, "physics", ok, f"max relative error {worst:.2e}, mask mismatches {mismatches}, {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def _leaf(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape)).requires_grad_(True)


def _probe(rng, like):
    return torch.from_numpy(rng.standard_normal(tuple(like.shape)))


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    torch.manual_seed(1)
    errors = {}

    x, w, b = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    p = _probe(rng, conv2d(x, w, b, 2, 1))
    errors["conv2d"] = check_grads(lambda: (conv2d(x, w, b, 2, 1) * p).sum(), {"x": x, "w": w, "b": b})
    dw, pw = _leaf(rng, 3, 1, 3, 3), _leaf(rng, 5, 3, 1, 1)
    p = _probe(rng, depthwise_separable_conv(x, dw, pw))
    errors["depthwise_separable"] = check_grads(lambda: (depthwise_separable_conv(x, dw, pw) * p).sum(),
                                                {"x": x, "dw": dw, "pw": pw})
    g, bb = _leaf(rng, 3), _leaf(rng, 3)
    p = _probe(rng, x)
    errors["instance_norm"] = check_grads(lambda: (instance_norm(x, g, bb) * p).sum(), {"x": x, "g": g, "b": bb})
    t, lg, lb = _leaf(rng, 2, 5, 8), _leaf(rng, 8), _leaf(rng, 8)
    p = _probe(rng, t)
    errors["layer_norm"] = check_grads(lambda: (layer_norm(t, lg, lb) * p).sum(), {"t": t, "g": lg, "b": lb})
    p = torch.from_numpy(rng.standard_normal((2, 3, 9, 11)))
    errors["bilinear_resize"] = check_grads(lambda: (bilinear_resize(x, 9, 11) * p).sum(), {"x": x})
    block = Block(8, 2, 2.0).double()
    p = _probe(rng, t)
    errors["vit_block"] = check_grads(lambda: (block(t) * p).sum(),
                                      {"t": t, **dict(block.named_parameters())}, max_coords=12)
    enc = VisionTransformer(VitConfig(input_size=16, patch_size=4, embed_dim=8, num_layers=6, num_heads=2)).double()
    img = _leaf(rng, 1, 3, 16, 16)
    p = torch.from_numpy(rng.standard_normal((1, 17, 8)))
    errors["vit_encoder"] = check_grads(lambda: sum((z * p).sum() for z in enc.forward_layers(img)),
                                        {"img": img, "patch": enc.patch_embed.weight})
    net = NormUNet(2, 2, 4, 2).double()
    torch.nn.init.normal_(net.unet.head.weight)
    u = _leaf(rng, 1, 2, 8, 8)
    p = _probe(rng, u)
    errors["unet"] = check_grads(lambda: (net(u) * p).sum(),
                                 {"u": u, "head": net.unet.head.weight, "conv": net.unet.down[1].layers[0].weight})
    target = torch.from_numpy(rng.random((1, 16, 16)))
    recon = torch.from_numpy(rng.random((1, 16, 16))).requires_grad_(True)
    errors["ssim_loss"] = check_grads(lambda: ssim_loss(recon, target), {"recon": recon}, max_coords=64)

    den = FoundationDenoiser(DenoiserConfig(
        encoder=VitConfig(input_size=32, patch_size=8, embed_dim=16, num_layers=6, num_heads=2),
        working_size=32)).double()
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for name, prm in den.named_parameters():
            if prm.requires_grad and "norm" not in name:
                prm.copy_(torch.randn(prm.shape, generator=gen, dtype=prm.dtype) * 0.3)
    z = torch.from_numpy(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)))
    # ReLU kinks make a 1e-6 step the safer central difference for the full denoiser
    errors["denoiser"] = check_grads(lambda: (den(z).abs() ** 2).sum(),
                                     {"fusion": den.fusion.logits, "refine": den.stages[1].refine.weight,
                                      "skip": den.skip_proj[0].weight, "input": den.input_skip.weight,
                                      "head": den.head.weight}, h=1e-6, max_coords=12)

    class Gain(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.g = torch.nn.Parameter(torch.tensor([0.1, -0.05], dtype=torch.float64))

        def forward(self, v):
            return v * torch.complex(self.g[0], self.g[1])

    model = UnrolledRecon(Gain, 2, False, SmeConfig(2, 4)).double()
    with torch.no_grad():
        model.mu.copy_(torch.tensor([0.8, 1.3]))
    img = make_sample("A", 0, 16, 2).kspace.astype(np.complex128)
    full = torch.from_numpy(img)
    mask = physics.make_equispaced_mask(16, 4, acs_lines=4)
    k = physics.apply_mask(full, mask)
    tgt = physics.rss(physics.ifft2c(full))
    fn = lambda: ssim_loss(model(k, mask), tgt)  # noqa: E731
    grad, = torch.autograd.grad(fn(), [model.mu])
    idx, num = fd_grad(fn, model.mu)
    mu_err = float(np.abs(grad.numpy()[idx] - num).max() / np.abs(num).max())

    elapsed = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = max(errors.values()) < 1e-4 and mu_err < 1e-3 and elapsed < 300
    record(2, "gradients", ok, f"{len(errors)} layer checks, worst {worst_name} {errors[worst_name]:.1e}; "
                              f"d/dmu {mu_err:.1e}; {elapsed:.0f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_cascade_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    coils, n = 3, 16
    mask = physics.make_equispaced_mask(n, 4, acs_lines=4)
    sens = physics.normalize_sensitivities(
        torch.from_numpy(rng.standard_normal((coils, n, n)) + 1j * rng.standard_normal((coils, n, n))))
    zero = lambda v: torch.zeros_like(v)  # noqa: E731
    sampled = torch.from_numpy(mask.columns.astype(bool))
    worst = 0.0
    for mu in (0.1, 0.5, 1.0, 1.5, 1.9):
        k_t = torch.from_numpy(rng.standard_normal((coils, n, n)) + 1j * rng.standard_normal((coils, n, n)))
        k_tilde = physics.apply_mask(
            torch.from_numpy(rng.standard_normal((coils, n, n)) + 1j * rng.standard_normal((coils, n, n))), mask)
        out = cascade_step(k_t, k_tilde, mask, mu, sens, zero)
        before = float(torch.linalg.vector_norm((k_t - k_tilde)[..., sampled]))
        after = float(torch.linalg.vector_norm((out - k_tilde)[..., sampled]))
        worst = max(worst, abs(after - abs(1 - mu) * before) / before)
    sample = make_sample("C", 1, 32, 4)
    full = torch.from_numpy(sample.kspace.astype(np.complex128))
    model = UnrolledRecon(lambda: torch.nn.Identity(), 1, sme_cfg=SmeConfig(2, 4)).double()
    model.denoisers[0] = type("Zero", (torch.nn.Module,), {"forward": lambda self, v: torch.zeros_like(v)})()
    rec = reconstruct(full, physics.make_equispaced_mask(32, 1, acs_lines=4), model)
    truth = physics.rss(physics.ifft2c(full))
    rel = float(torch.linalg.vector_norm(rec - truth) / torch.linalg.vector_norm(truth))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and rel < 1e-6 and elapsed < 10
    record(3, "cascade algebra", ok, f"contraction deviation {worst:.1e}, full-mask relative error {rel:.1e}, "
                                    f"{elapsed:.1f}s")
    assert ok


# 4 and 5 ---------------------------------------------------------------------

_CACHE: dict = {}


def desk_data():
    """Default family-A split plus the OOD test sets, from the default run config."""
    if "data" not in _CACHE:
        cfg = RunConfig()
        man = build_manifest({cfg.family: cfg.count}, cfg.fractions, cfg.data_seed)
        ood = build_manifest({f: cfg.ood_count for f in cfg.ood_families}, (0.0, 0.0, 1.0), cfg.data_seed)

        def load(entries):
            return [make_sample(e.family, e.seed, cfg.size, cfg.coils, cfg.noise_std, e.sample_id) for e in entries]

        _CACHE["data"] = {
            "train": load(man.split("train")), "val": load(man.split("val")), "test": load(man.split("test")),
            "B": load([e for e in ood.entries if e.family == "B"]),
            "C": load([e for e in ood.entries if e.family == "C"]),
        }
    return _CACHE["data"]


def trained(variant: str, acceleration: int, seed: int, epochs: int):
    key = (variant, acceleration, seed, epochs)
    if key not in _CACHE:
        set_deterministic(True)
        cfg = RunConfig(variant=variant, acceleration=acceleration, seed=seed, epochs=epochs)
        d = desk_data()
        model = cfg.build_model()
        best, _ = train(model, d["train"], d["val"], cfg.mask(), cfg.schedule())
        best.assign_to(model)
        model.eval()
        _CACHE[key] = model
    return _CACHE[key]


def cell_ssim(model, samples, mask) -> tuple[float, float]:
    k, targets = stack_samples(samples, mask)
    t = targets.numpy()
    rec = predict(model, k, mask).numpy()
    zf = physics.zero_filled(k).numpy()
    return (float(np.mean([ssim(r, y) for r, y in zip(rec, t)])),
            float(np.mean([ssim(z, y) for z, y in zip(zf, t)])))


@pytest.mark.slow
def test_criterion_4_desk_training():
    t0 = time.perf_counter()
    d = desk_data()
    assert (len(d["train"]), len(d["val"]), len(d["test"])) == (200, 40, 80)
    mask = RunConfig().mask()
    assert mask.acs_count == 8
    margins = []
    for seed in SEEDS:
        model = trained("vit-fusion", 4, seed, DESK_EPOCHS)
        ours, base = cell_ssim(model, d["test"], mask)
        margins.append(ours - base)
    wins = sum(m >= 0.05 for m in margins)
    elapsed = time.perf_counter() - t0
    ok = wins >= 4
    record(4, "desk training", ok, f"{wins}/5 seeds reach +0.05 over zero-filled "
                                  f"(margins {', '.join(f'{m:+.3f}' for m in margins)}); "
                                  f"{DESK_EPOCHS} epochs, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_5_ood_trend():
    t0 = time.perf_counter()
    d = desk_data()
    failures = []
    lines = []
    for variant in ("vit-fusion", "baseline-cnn"):
        for r in (4, 8):
            model = trained(variant, r, 0, OOD_EPOCHS)
            for rr, cf, fam in OOD_CELLS:
                if rr != r:
                    continue
                mask = physics.make_equispaced_mask(64, r, center_fraction=cf)
                ours, base = cell_ssim(model, d[fam], mask)
                lines.append(f"  {variant:12s} {fam} R={r} cf={cf:<4} acs={mask.acs_count} "
                             f"zero-filled {base:.4f} model {ours:.4f} delta {ours - base:+.4f}")
                if ours <= base:
                    failures.append(f"{variant}/{fam}/R{r}/cf{cf}")
    ACCEPTANCE_NOTES.append("OOD SSIM deltas (model minus zero-filled):")
    ACCEPTANCE_NOTES.extend(lines)
    print("\n".join(lines))
    elapsed = time.perf_counter() - t0
    ok = not failures
    record(5, "OOD trend", ok, (f"all {len(lines)} cells beat zero-filled" if ok else
                                f"{len(failures)}/{len(lines)} cells at or below zero-filled: {', '.join(failures)}")
           + f"; {elapsed / 60:.1f} min")
    assert ok


# 6 ---------------------------------------------------------------------------

PIPELINE_CFG = """
[data]
size = 32
coils = 2
count = 12
fractions = 0.5, 0.25, 0.25
ood_families = B, C
ood_count = 2

[model]
cascades = 2
sme_pools = 2
sme_chans = 4

[mask]
acs = lines=4

[train]
epochs = 2
batch_size = 3

[eval]
grid = 4:lines=4:A, 4:cf=0.08:B, 8:cf=0.04:C

[run]
deterministic = true
"""


def _pipeline(root) -> dict[str, bytes]:
    cfg = root / "run.ini"
    root.mkdir(parents=True)
    cfg.write_text(PIPELINE_CFG)
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    assert main(["eval", "--checkpoint", str(root / "run" / "best.umriw"), "--data", str(root / "data"),
                 "--out", str(root / "eval.csv")]) == 0
    return {name: p.read_bytes() for name, p in [("manifest.csv", root / "data" / "manifest.csv"),
                                                  ("train_log.csv", root / "run" / "train_log.csv"),
                                                  ("eval.csv", root / "eval.csv")]}


def test_criterion_6_determinism(tmp_path):
    a = _pipeline(tmp_path / "first")
    b = _pipeline(tmp_path / "second")
    same = [name for name in a if a[name] == b[name]]
    rows = list(csv.DictReader(a["eval.csv"].decode().splitlines()))
    ok = len(same) == len(a) and len(rows) > 0
    record(6, "determinism", ok, f"{len(same)}/{len(a)} CSVs bitwise identical across two full pipeline runs "
                                f"({len(rows)} eval rows)")
    assert ok


# 7 ---------------------------------------------------------------------------

def _random_weights(rng) -> ModelWeights:
    tensors, frozen = {}, []
    for i in range(int(rng.integers(1, 6))):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(0, 4))))
        dtype = torch.float32 if rng.random() < 0.5 else torch.float64
        path = f"m{i}.{'ü' * int(rng.integers(0, 2))}w{int(rng.integers(0, 99))}"
        tensors[path] = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
        if rng.random() < 0.3:
            frozen.append(path)
    w = ModelWeights(tensors, frozen)
    if rng.random() < 0.5:
        p = next(iter(tensors))
        w.moments[p] = (torch.randn_like(tensors[p]), torch.rand_like(tensors[p]))
        w.step = int(rng.integers(1, 10_000))
    return w


def test_criterion_7_serialization():
    rng = np.random.default_rng(7)
    failures = 0
    for _ in range(1000):
        w = _random_weights(rng)
        raw = dumps_weights(w)
        back = loads_weights(raw)
        failures += dumps_weights(back) != raw or back.frozen != w.frozen or any(
            back.tensors[k].dtype != v.dtype or back.tensors[k].numpy().tobytes() != v.numpy().tobytes()
            for k, v in w.tensors.items())
        shape = tuple(int(s) for s in rng.integers(1, 6, size=3))
        dtype = np.complex64 if rng.random() < 0.5 else np.complex128
        k = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)).astype(dtype)
        meta = {"family": str(rng.choice(list("ABC"))), "seed": int(rng.integers(0, 2**31)),
                "noise_std": float(rng.random())}
        vol, m = loads_volume(dumps_volume(k, meta))
        failures += vol.dtype != k.dtype or vol.tobytes() != k.tobytes() or m != meta
    ok = failures == 0
    record(7, "serialization", ok, f"1000 weight and 1000 volume round trips, {failures} failures")
    assert ok
