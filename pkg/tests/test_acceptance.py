"""End-to-end acceptance checks; each prints one PASS/FAIL line in the terminal summary.

Training criteria use the desk model sizes and run for several minutes in total.
"""

import math
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from refprior import gradsuite, harness, imageio
from refprior.checkpoint import decode_checkpoint, encode_checkpoint
from refprior.errors import FormatError
from refprior.harness import CHECKPOINT_NAME, TrainConfig
from refprior.metrics import psnr, ssim
from refprior.prior import encode_prior, prior_map
from refprior.rng import stream
from refprior.synthesis import DatasetManifest, DegradationSchedule, build_dataset, generate_sources, procedural_reflection, procedural_transmission

from test_prior import brute_force_map

pytestmark = pytest.mark.slow

C5_SEEDS = range(5)
C5_STEPS = 300
C6_SEEDS = range(3)
C6_STEPS = 1000


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    """64 training and 16 held-out validation pairs from disjoint source seeds."""
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for name, count, seed in (("train", 64, 1), ("val", 16, 2)):
        generate_sources(root / f"{name}_T", count, 56, seed, "T")
        generate_sources(root / f"{name}_R", count, 56, seed + 100, "R")
        out[name] = build_dataset(root / f"{name}_T", root / f"{name}_R", DegradationSchedule(), root / name, seed=seed)
    return out


def test_c1_gradient_suite(report_criterion):
    start = time.perf_counter()
    results = gradsuite.run_suite(trials=20)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and elapsed < 120 and all(r.trials >= 20 for r in results)
    detail = (
        f"{len(results)} cases x 20 trials, worst {worst.name} {worst.max_rel_error:.2e} < {gradsuite.TOLERANCE:g} "
        f"(eps {gradsuite.EPS:g}, denominator floor {gradsuite.FLOOR:g}), {elapsed:.0f}s < 120s"
    )
    if failed:
        detail += f"; failed {failed}"
    assert report_criterion(1, ok, detail)


def test_c2_prior_oracle(report_criterion):
    worst = 0.0
    identity_err = 0.0
    in_range = True
    for k in range(100):
        rng = stream(0, "acceptance", "prior", k)
        t, r = procedural_transmission(rng, 56), procedural_reflection(rng, 56)
        for grid in (1, 7, 14, 28):
            p = prior_map(t, r, grid)
            worst = max(worst, float(np.abs(p - brute_force_map(t, r, grid)).max()))
            identity_err = max(identity_err, float(np.abs(p + prior_map(r, t, grid) - 1.0).max()))
            identity_err = max(identity_err, float(np.abs(prior_map(3.7 * t, 3.7 * r, grid) - p).max()))
            in_range &= bool(np.all((p >= 0) & (p <= 1)))
    ok = worst < 1e-12 and identity_err < 1e-12 and in_range
    assert report_criterion(2, ok, f"100 pairs, grids 1/7/14/28: max |map - brute force| {worst:.1e}; complement/scale identities {identity_err:.1e}; range [0,1] {in_range}")


def test_c3_encoding(report_criterion):
    rng = stream(0, "acceptance", "encoding")
    p = rng.uniform(0, 1, (28, 28))
    p[0, :4] = (0.0, 1.0, 0.5, 1e-9)
    dim = 64
    e = encode_prior(p, dim)
    direct = np.empty_like(e)
    for idx in np.ndindex(p.shape):
        for i in range(dim // 2):
            angle = float(p[idx]) / 10000.0 ** (2 * i / dim)
            direct[idx + (2 * i,)] = math.sin(angle)
            direct[idx + (2 * i + 1,)] = math.cos(angle)
    err = float(np.abs(e - direct).max())
    unit = float(np.abs(e[..., 0::2] ** 2 + e[..., 1::2] ** 2 - 1.0).max())
    assert report_criterion(3, err < 1e-9 and unit < 1e-9, f"784 patches x 32 frequencies: max |encode - direct| {err:.1e}, max |sin^2+cos^2-1| {unit:.1e}")


def test_c4_overfit(desk_data, report_criterion):
    subset = DatasetManifest(desk_data["train"].records[:8], desk_data["train"].root)
    start = time.perf_counter()
    result = harness.train_prrn(subset, TrainConfig(seed=0, steps=500, prior_mode="truth", grid=7), None, harness.DESK_PRRN)
    elapsed = time.perf_counter() - start
    gain = result["final_train_psnr"] - result["initial_train_psnr"]
    ok = gain >= 6.0 and elapsed < 600
    assert report_criterion(
        4, ok,
        f"8 pairs, 500 steps: train PSNR {result['initial_train_psnr']:.2f} -> {result['final_train_psnr']:.2f} dB "
        f"(gain {gain:.2f} >= 6), {elapsed:.0f}s < 600s",
    )


def test_c5_truth_prior_benefit(desk_data, report_criterion):
    scores = {"truth": [], "zero": []}
    for seed in C5_SEEDS:
        for mode in scores:
            cfg = TrainConfig(seed=seed, steps=C5_STEPS, prior_mode=mode, grid=7)
            model = harness.train_prrn(desk_data["train"], cfg, None, harness.DESK_PRRN)["model"]
            scores[mode].append(harness.evaluate(desk_data["val"], model, mode).aggregate()["psnr_db"])
    truth, zero = np.mean(scores["truth"]), np.mean(scores["zero"])
    diffs = " ".join(f"{a - b:+.2f}" for a, b in zip(scores["truth"], scores["zero"]))
    ok = truth - zero >= 0.3
    assert report_criterion(
        5, ok,
        f"{len(C5_SEEDS)} seeds x {C5_STEPS} steps, 16 val pairs: truth {truth:.3f} dB vs zero {zero:.3f} dB "
        f"(margin {truth - zero:.3f} >= 0.3; per seed {diffs})",
    )


def test_c6_rpen_learnability(desk_data, report_criterion):
    init1, init7, fin1, fin7 = [], [], [], []
    for seed in C6_SEEDS:
        cfg = TrainConfig(seed=seed, steps=C6_STEPS, log_every=C6_STEPS)
        r = harness.train_rpen(desk_data["train"], cfg, None, harness.DESK_RPEN, desk_data["val"])
        init1.append(r["initial_val"]["ppe_grid1"])
        init7.append(r["initial_val"]["ppe_grid7"])
        fin1.append(r["final_val"]["ppe_grid1"])
        fin7.append(r["final_val"]["ppe_grid7"])
    i1, i7, f1, f7 = (float(np.mean(v)) for v in (init1, init7, fin1, fin7))
    ok = f1 < f7 and f1 <= 0.5 * i1 and f7 <= 0.5 * i7
    assert report_criterion(
        6, ok,
        f"3 seeds x {C6_STEPS} steps, 64 pairs: val ppe grid1 {i1:.1f} -> {f1:.1f} ({1 - f1 / i1:.0%} lower), "
        f"grid7 {i7:.1f} -> {f7:.1f} ({1 - f7 / i7:.0%} lower); grid1 < grid7 {f1 < f7}",
    )


def test_c7_metrics(report_criterion):
    rng = stream(0, "acceptance", "metrics")
    base = rng.uniform(0.2, 0.8, (56, 56, 3))
    closed = max(abs(psnr(base, base + 0.1) - 20.0), abs(psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) - 20.0))
    self_sim = abs(ssim(base, base) - 1.0)
    ref_err = 0.0
    for _ in range(20):
        a = rng.uniform(size=(56, 56, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=-1)
        ref_err = max(ref_err, abs(ssim(a, b) - ref))
    ok = closed < 1e-9 and self_sim < 1e-9 and ref_err < 1e-4
    assert report_criterion(7, ok, f"|PSNR(uniform 0.1) - 20| {closed:.1e}; |SSIM(x,x) - 1| {self_sim:.1e}; max |SSIM - skimage| over 20 pairs {ref_err:.1e} < 1e-4")


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "refprior", *map(str, args)], capture_output=True, text=True)


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c8_determinism_and_formats(tmp_path, report_criterion):
    run = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        shutil.rmtree(run, ignore_errors=True)
        steps = ["--steps", "20", "--batch-size", "4", "--log-every", "10"]
        codes = [
            _cli("synth", "--out", run / "ds", "--seed", 4, "--procedural", 8).returncode,
            _cli("train-rpen", "--manifest", run / "ds", "--out", run / "rpen", "--seed", 4, *steps).returncode,
            _cli("train-prrn", "--manifest", run / "ds", "--out", run / "prrn", "--seed", 4, "--prior-mode", f"rpen:{run / 'rpen' / CHECKPOINT_NAME}", *steps).returncode,
            _cli("infer", "--image", run / "ds" / "images" / "00000_I.ppm", "--prrn", run / "prrn" / CHECKPOINT_NAME,
                 "--rpen", run / "rpen" / CHECKPOINT_NAME, "--out", run / "out.ppm", "--heatmap", run / "prior.pgm").returncode,
        ]
        assert codes == [0, 0, 0, 0]
        snapshots.append(_snapshot(run))
    identical = snapshots[0] == snapshots[1]

    ckpt = (run / "prrn" / CHECKPOINT_NAME).read_bytes()
    round_trip = encode_checkpoint(*decode_checkpoint(ckpt)) == ckpt

    errors = []
    ppm = (run / "out.ppm").read_bytes()
    for label, blob, kind in (
        ("ppm truncated", ppm[:-5], "ppm"),
        ("ppm bad magic", b"P3" + ppm[2:], "ppm"),
        ("checkpoint truncated", ckpt[:-5], "ckpt"),
        ("checkpoint bad version", ckpt[:4] + b"\x09\x00\x00\x00" + ckpt[8:], "ckpt"),
        ("checkpoint trailing", ckpt + b"\x00", "ckpt"),
    ):
        try:
            imageio.decode(blob) if kind == "ppm" else decode_checkpoint(blob)
            errors.append(f"{label}: accepted")
        except FormatError as exc:
            if exc.offset is None:
                errors.append(f"{label}: no offset")
    bad = tmp_path / "bad.rprn"
    bad.write_bytes(ckpt[:-5])
    exit_code = _cli("infer", "--image", run / "out.ppm", "--prrn", bad, "--rpen", bad, "--out", tmp_path / "x.ppm").returncode
    if exit_code != 2:
        errors.append(f"cli exit {exit_code} for a corrupt checkpoint")

    ok = identical and round_trip and not errors
    detail = (
        f"synth/train-rpen/train-prrn/infer twice: {len(snapshots[0])} files byte-identical {identical}; "
        f"checkpoint round trip {round_trip}; 5 malformed inputs -> FormatError with offset, CLI exit 2"
    )
    if errors:
        detail += f"; problems {errors}"
    assert report_criterion(8, ok, detail)
