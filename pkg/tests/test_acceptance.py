"""Acceptance gate: nine go/no-go checks with one printed line each.

Every check prints "[criterion N] label: PASS/FAIL (detail)" through the
capture plug so the verdicts are visible in a normal pytest run. Oracles are
re-implemented here from first principles (loop DFT, hand recurrence, full
sort, textbook entropy) so the gate does not trust the unit-test helpers.
"""

import json
import math
import time

import numpy as np

from u2cllie import cli
from u2cllie import engine as en
from u2cllie.causal import SsmParams, init_ssm, select_neighbors, ssm_scan_1d
from u2cllie.engine import Params, Tensor
from u2cllie.g2af import G2afParams, frequency_bands, init_g2af
from u2cllie.gradcheck import check_entropy_diagnostic, run_gradcheck
from u2cllie.image_io import Image, make_synthetic_dataset, save_image
from u2cllie.network import (ModelConfig, TrainerConfig, build_model,
                             evaluate, forward, load_checkpoint,
                             save_checkpoint, toy_config, train_toy)
from u2cllie.uad import entropy_map


def announce(capsys, number, label, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number}] {label}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {number} {label}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient oracle suite


def test_criterion_1_gradient_suite(capsys):
    start = time.perf_counter()
    report = run_gradcheck(module="all", seed=0, tol=1e-3)
    elapsed = time.perf_counter() - start
    worst = report["worst"]
    ok = report["pass"] and elapsed < 300.0
    announce(capsys, 1, "gradient oracle suite", ok,
             f"worst {worst['param']} err {worst['error']:.2e} <= 1e-3, "
             f"{elapsed:.1f}s < 300s")


# ---------------------------------------------------------------------------
# 2. entropy bounds


def test_criterion_2_entropy_bounds(capsys):
    rng = np.random.default_rng(0)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        c = int(rng.integers(2, 9))
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        x = rng.normal(0.0, 3.0, size=(1, c, h, w))
        e = entropy_map(Tensor(x)).map.data
        lo, hi = min(lo, e.min()), max(hi, e.max())
    bounds_ok = lo >= 0.0 and hi <= 1.0

    uniform_err = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 9))
        base = rng.normal(size=(1, 1, 4, 4))
        x = np.broadcast_to(base, (1, c, 4, 4)).copy()
        e = entropy_map(Tensor(x)).map.data
        uniform_err = max(uniform_err, float(np.abs(e - 1.0).max()))

    peak_max = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 9))
        x = np.zeros((1, c, 4, 4))
        x[0, rng.integers(c)] = 20.0
        e = entropy_map(Tensor(x)).map.data
        peak_max = max(peak_max, float(e.max()))

    ok = bounds_ok and uniform_err <= 1e-5 and peak_max < 1e-3
    announce(capsys, 2, "entropy bounds", ok,
             f"range [{lo:.4f}, {hi:.4f}] in [0,1], uniform err "
             f"{uniform_err:.1e} <= 1e-5, one-hot max {peak_max:.1e} < 1e-3")


# ---------------------------------------------------------------------------
# 3. frequency oracle


def _loop_dft2(x):
    h, w = x.shape
    re = np.zeros((h, w))
    im = np.zeros((h, w))
    for u in range(h):
        for v in range(w):
            sr = si = 0.0
            for i in range(h):
                for j in range(w):
                    ang = -2.0 * math.pi * (u * i / h + v * j / w)
                    sr += x[i, j] * math.cos(ang)
                    si += x[i, j] * math.sin(ang)
            re[u, v] = sr
            im[u, v] = si
    shift = lambda s: np.roll(np.roll(s, h // 2, axis=0), w // 2, axis=1)
    return shift(re), shift(im)


def _loop_idft2(re, im):
    h, w = re.shape
    re = np.roll(np.roll(re, -(h // 2), axis=0), -(w // 2), axis=1)
    im = np.roll(np.roll(im, -(h // 2), axis=0), -(w // 2), axis=1)
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for u in range(h):
                for v in range(w):
                    ang = 2.0 * math.pi * (u * i / h + v * j / w)
                    s += re[u, v] * math.cos(ang) - im[u, v] * math.sin(ang)
            out[i, j] = s / (h * w)
    return out


def test_criterion_3_frequency_oracle(capsys):
    cfg = G2afParams(channels=2)
    arrays = init_g2af(cfg, np.random.default_rng(0))
    band_err = 0.0
    for h, w in ((4, 4), (5, 7)):
        x = np.random.default_rng(h * w).normal(size=(1, 2, h, w))
        bands = frequency_bands(Tensor(x), Params(arrays), cfg)

        spec = [_loop_dft2(x[0, c]) for c in range(2)]
        mag = np.stack([np.sqrt(r * r + i * i) for r, i in spec])
        mod = float(np.mean(1.0 / (1.0 + np.exp(-mag))))
        ys = np.linspace(-1, 1, h) if h > 1 else np.zeros(1)
        xs = np.linspace(-1, 1, w) if w > 1 else np.zeros(1)
        d2 = ys[:, None] ** 2 + xs[None, :] ** 2
        for band, r_init in (("low", cfg.r_low_init), ("high", cfg.r_high_init)):
            r = r_init * mod
            mask = np.exp(-d2 / (2.0 * r * r + 1e-6))
            for c in range(2):
                want = _loop_idft2(spec[c][0] * mask, spec[c][1] * mask)
                got = bands[band].data[0, c]
                band_err = max(band_err, float(np.abs(got - want).max()))

    round_err = 0.0
    rng = np.random.default_rng(1)
    for h in range(1, 17):
        for w in range(1, 17):
            x = rng.normal(size=(1, 1, h, w))
            back = en.ifft2(en.fft2(Tensor(x)))
            round_err = max(round_err, float(np.abs(back.data - x).max()))

    ok = band_err < 1e-4 and round_err < 1e-4
    announce(capsys, 3, "frequency oracle", ok,
             f"band split vs loop DFT err {band_err:.1e} < 1e-4, "
             f"roundtrip err {round_err:.1e} < 1e-4 on all shapes to 16x16")


# ---------------------------------------------------------------------------
# 4. recurrence and selection oracles


def test_criterion_4_recurrence_and_selection(capsys):
    scan_err = 0.0
    for steps in (1, 2, 3, 4):
        for direction in range(4):
            for dim in (1, 3, 5):
                seed = steps * 100 + direction * 10 + dim
                cfg = SsmParams(dim=dim)
                arrays = init_ssm(cfg, np.random.default_rng(seed))
                arrays["ssm.tau"] = np.random.default_rng(seed + 1).normal(
                    0, 0.3, size=(4, dim)).astype(np.float32)
                seq = np.random.default_rng(seed + 2).normal(
                    size=(steps, dim)).astype(np.float32)
                got = ssm_scan_1d(Tensor(seq), Params(arrays), cfg, direction).data

                a = np.tanh(arrays["ssm.a_raw"].astype(np.float64))
                bb = arrays["ssm.b"].astype(np.float64)
                cc = arrays["ssm.c"].astype(np.float64)
                dd = arrays["ssm.d"].astype(np.float64)
                tau = arrays["ssm.tau"][direction].astype(np.float64)
                hstate = np.zeros(dim)
                for t in range(steps):
                    u = seq[t].astype(np.float64) + tau
                    hstate = a * hstate + bb * u
                    scan_err = max(scan_err, float(np.abs(
                        got[t] - (cc * hstate + dd * u)).max()))

    select_ok = True
    rng = np.random.default_rng(7)
    for _ in range(100):
        f = rng.normal(size=(1, 3, 6, 6)).astype(np.float32)
        got = select_neighbors(f, patch=5, k=8)
        padded = np.pad(f, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
        for i in range(6):
            for j in range(6):
                mid = f[0, :, i, j]
                dists = []
                for di in range(5):
                    for dj in range(5):
                        if di * 5 + dj == 12:
                            continue
                        diff = padded[0, :, i + di, j + dj] - mid
                        dists.append(np.sqrt((diff * diff).sum()))
                dists = np.asarray(dists, dtype=np.float32)
                dists = dists / (dists.max() + 1e-6)
                want = sorted(range(24), key=lambda q: (dists[q], q))[:8]
                if not np.array_equal(got[0, :, i, j], want):
                    select_ok = False
    ties = select_neighbors(np.full((1, 3, 4, 4), 0.5, np.float32), patch=5, k=8)
    tie_ok = np.array_equal(
        ties, np.broadcast_to(np.arange(8)[None, :, None, None], ties.shape))

    ok = scan_err < 1e-6 and select_ok and tie_ok
    announce(capsys, 4, "recurrence/selection oracles", ok,
             f"scan vs hand-unrolled err {scan_err:.1e} < 1e-6 (T<=4), "
             f"top-k match on 100 inputs: {select_ok}, tie-breaks: {tie_ok}")


# ---------------------------------------------------------------------------
# 5. entropy-scale diagnostic


def test_criterion_5_entropy_diagnostic(capsys):
    start = time.perf_counter()
    report = check_entropy_diagnostic(seed=0)
    elapsed = time.perf_counter() - start
    ratios = ", ".join(f"{k}->{v:.4f}" for k, v in report["ratios"].items())
    ok = (report["scale_zero_exact"] and report["linear_within_5pct"]
          and elapsed < 60.0)
    announce(capsys, 5, "entropy-scale diagnostic", ok,
             f"scale-0 grads exactly zero: {report['scale_zero_exact']}, "
             f"ratios [{ratios}] linear within 5%, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 6. toy training descent


def test_criterion_6_training_descent(capsys):
    start = time.perf_counter()
    dataset = make_synthetic_dataset(count=16, extent=32, seed=0)
    model = build_model(toy_config())
    history = train_toy(model, dataset, TrainerConfig())
    elapsed = time.perf_counter() - start
    first = history[0].total
    final = float(np.mean([r.total for r in history[-20:]]))
    ratio = final / first
    gain = evaluate(model, dataset)["psnr_gain"]
    ok = ratio <= 0.5 and gain >= 2.0 and elapsed < 900.0
    announce(capsys, 6, "toy training descent", ok,
             f"loss {first:.4f} -> {final:.4f} (ratio {ratio:.3f} <= 0.5), "
             f"psnr gain {gain:+.2f} dB >= +2 dB, {elapsed:.0f}s < 900s")


# ---------------------------------------------------------------------------
# 7. ablation monotonicity


def test_criterion_7_ablation_monotonicity(capsys):
    start = time.perf_counter()
    pairs = make_synthetic_dataset(count=16, extent=32, seed=0)
    rows = cli.run_ablation(toy_config(), TrainerConfig(), pairs)
    elapsed = time.perf_counter() - start
    loss = {r["variant"]: r["final_loss"] for r in rows}
    singles = ("len", "neco", "uad", "asc")
    full_ok = all(loss["full"] <= loss[s] * 1.05 for s in singles)
    single_ok = all(loss[s] <= loss["baseline"] * 1.05 for s in singles)
    table = " ".join(f"{k}={v:.4f}" for k, v in loss.items())
    ok = full_ok and single_ok and elapsed < 7200.0
    announce(capsys, 7, "ablation monotonicity", ok,
             f"{table}; full <= singles: {full_ok}, "
             f"singles <= baseline (5% slack): {single_ok}, {elapsed:.0f}s < 2h")


# ---------------------------------------------------------------------------
# 8. determinism and persistence


def test_criterion_8_determinism_and_persistence(capsys, tmp_path):
    def run(*argv):
        code = cli.main(list(argv))
        out = capsys.readouterr().out
        assert code == 0, argv
        return out

    src = tmp_path / "bright"
    src.mkdir()
    rng = np.random.default_rng(11)
    for i in range(2):
        arr = rng.uniform(0.3, 1.0, size=(3, 16, 16)).astype(np.float32)
        save_image(Image.from_float(arr), src / f"img{i}.png")

    repeats_ok = True
    data = tmp_path / "pairs"
    ckpt = tmp_path / "model.ckpt"
    checks = []
    for _ in range(2):
        stdout = run("synth", "--input-dir", str(src), "--output-dir", str(data))
        stdout += run("train", "--manifest", str(data / "manifest.json"),
                      "--output", str(ckpt), "--toy", "--steps", "5",
                      "--crop", "16")
        stdout += run("enhance", "--input", str(data / "img0_low.png"),
                      "--output", str(tmp_path / "out.png"),
                      "--checkpoint", str(ckpt))
        stdout += run("metrics", "--pred", str(tmp_path / "out.png"),
                      "--ref", str(data / "img0_high.png"))
        stdout += run("gradcheck", "--module", "len", "--json")
        stdout += run("diagnose", "--toy")
        stdout += run("print-config")
        checks.append((stdout, ckpt.read_bytes(),
                       (tmp_path / "out.png").read_bytes(),
                       (data / "manifest.json").read_bytes()))
    repeats_ok = checks[0] == checks[1]

    model = build_model(toy_config())
    train_toy(model, make_synthetic_dataset(count=2, extent=16, seed=0),
              TrainerConfig(steps=3, crop=16))
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    arrays_ok = all(np.array_equal(model.arrays[k], loaded.arrays[k])
                    for k in model.arrays)
    x = Tensor(np.random.default_rng(12).uniform(
        0, 1, size=(1, 3, 16, 16)).astype(np.float32))
    forward_ok = np.array_equal(forward(model, x).data, forward(loaded, x).data)
    bytes_ok = p1.read_bytes() == p2.read_bytes()

    ok = repeats_ok and arrays_ok and forward_ok and bytes_ok
    announce(capsys, 8, "determinism & persistence", ok,
             f"subcommand reruns byte-identical: {repeats_ok}, checkpoint "
             f"round-trip arrays/forward/bytes identical: "
             f"{arrays_ok}/{forward_ok}/{bytes_ok}")


# ---------------------------------------------------------------------------
# 9. footprint report


def test_criterion_9_footprint(capsys):
    model = build_model(ModelConfig())
    count = model.param_count()
    ok = 200_000 <= count <= 1_000_000
    announce(capsys, 9, "footprint report", ok,
             f"default config parameter count {count:,} in [200,000, 1,000,000]")
