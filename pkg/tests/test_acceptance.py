"""End-to-end acceptance gate.

Each test covers one release criterion and prints a single PASS/FAIL line.
The training criteria run a small synthetic dataset (3 shape families x 64
blocks of 1024 points) on a single CPU; the whole module takes tens of
minutes. Run it with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import norm

from cotpcc.cloud import DatasetSpec, PointCloud, fps, synth_dataset
from cotpcc.codec import (
    Bitstream,
    DigestMismatchError,
    EntropyModels,
    decode_bitstream,
    encode_bitstream,
    quantize_latent,
)
from cotpcc.entropy import FactorizedModel, QuantizerConfig, rate_estimate
from cotpcc.losses import LossWeights
from cotpcc.metrics import chamfer_l2
from cotpcc.training import (
    TrainConfig,
    compress_cloud,
    decompress_cloud,
    evaluate_cloud,
    fit,
    init_state,
    load_checkpoint,
    save_checkpoint,
)

import test_entropy
import test_losses
import test_nets


def _report(name: str, ok: bool, detail: str = ""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Shared toy dataset and short matched training runs


@pytest.fixture(scope="module")
def dataset():
    spec = DatasetSpec(
        points_per_block=1024, seed=11, n_blocks=192,
        shapes=("sphere", "box", "torus"), nonuniformity=0.8,
    )
    return synth_dataset(spec)


def _toy_config(sampler="learned", lam=0.01, max_steps=300, seed=0) -> TrainConfig:
    return TrainConfig(
        epochs=1000, learning_rate=1e-4, batch_size=4,
        weights=LossWeights(beta=100.0, gamma=0.001, lam=lam),
        ratios=(0.5, 0.5, 0.5), seed=seed, max_steps=max_steps,
        sampler=sampler, k_nn=8,
    )


def _aggregate(state, clouds):
    reports = [evaluate_cloud(state, c, seed=0) for c in clouds]
    return (
        float(np.mean([r.bpp for r in reports])),
        float(np.mean([r.cd for r in reports])),
        float(np.mean([r.psnr_db for r in reports])),
    )


@pytest.fixture(scope="module")
def long_runs(dataset, tmp_path_factory):
    """The pinned 2000-step run plus a matched FPS arm.

    The learned-sampler run serves both the toy-training criterion (via its
    step log) and the ablation; the FPS run is its matched twin.
    """
    logdir = tmp_path_factory.mktemp("long_runs")
    out = {}
    for sampler in ("learned", "fps"):
        config = _toy_config(sampler=sampler, max_steps=2000)
        state = init_state(config)
        log_path = logdir / f"{sampler}.jsonl"
        t0 = time.monotonic()
        fit(dataset, config, state=state, log_path=log_path)
        elapsed = time.monotonic() - t0
        rows = [json.loads(line) for line in log_path.read_text().splitlines()]
        out[sampler] = {
            "state": state, "rows": rows, "elapsed": elapsed,
            "agg": _aggregate(state, dataset[::4]),
        }
    return out


@pytest.fixture(scope="module")
def rd_runs(dataset):
    """Matched short-budget learned runs across the rate-weight sweep."""
    eval_clouds = dataset[::4]
    out = {}
    for lam in (0.01, 0.1, 1.0):
        config = _toy_config(lam=lam)
        state = init_state(config)
        fit(dataset, config, state=state)
        out[lam] = {"state": state, "agg": _aggregate(state, eval_clouds)}
    return out


# ---------------------------------------------------------------------------
# Criterion 1: metric oracles


def test_criterion_metric_oracles():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n_a = int(rng.integers(2, 129))
        n_b = int(rng.integers(2, 129))
        a = rng.uniform(-1, 1, (n_a, 3))
        b = rng.uniform(-1, 1, (n_b, 3))
        d2 = ((a[:, None] - b[None]) ** 2).sum(-1)
        brute = d2.min(axis=1).mean() + d2.min(axis=0).mean()
        got = chamfer_l2(a, b)
        worst = max(worst, abs(got - brute) / max(abs(brute), 1e-300))
    chamfer_ok = worst <= 1e-9

    fps_mismatches = 0
    for trial in range(100):
        n = int(rng.integers(2, 257))
        m = int(rng.integers(1, n + 1))
        pts = rng.uniform(-1, 1, (n, 3))
        start = int(rng.integers(0, n))
        got = fps(PointCloud(pts), m, start_index=start)
        # independent greedy re-simulation from the full distance matrix
        d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
        sel = [start]
        for _ in range(m - 1):
            dmin = d2[:, sel].min(axis=1)
            dmin[sel] = -np.inf
            sel.append(int(np.argmax(dmin)))
        if not np.array_equal(got, np.array(sel)):
            fps_mismatches += 1
    elapsed = time.monotonic() - t0
    ok = chamfer_ok and fps_mismatches == 0 and elapsed < 60
    _report(
        "metric oracles", ok,
        f"chamfer worst rel err {worst:.2e} (<=1e-9), fps mismatches "
        f"{fps_mismatches}/100, {elapsed:.1f}s (<60s)",
    )


# ---------------------------------------------------------------------------
# Criterion 2: gradient checks


def test_criterion_gradient_checks():
    t0 = time.monotonic()
    test_nets.test_disc_input_gradcheck()
    test_nets.test_decoder_parameter_gradcheck()
    test_losses.test_generator_full_pipeline_gradcheck()
    elapsed = time.monotonic() - t0
    _report(
        "gradient checks", elapsed < 300,
        f"critic input-grad, decoder param-grad, and full generator-objective "
        f"FD checks passed in {elapsed:.1f}s (<300s)",
    )


# ---------------------------------------------------------------------------
# Criterion 3: entropy model and codec


def test_criterion_entropy_codec():
    t0 = time.monotonic()

    # uniform-4 alphabet: rate must land within 0.02 bits of 2.0
    torch.manual_seed(0)
    z = torch.tensor([-2.0, -1.0, 0.0, 1.0]).repeat(64).unsqueeze(0)
    m = test_entropy._fit(FactorizedModel(1), z)
    with torch.no_grad():
        uniform_bits = rate_estimate(z, m, 1.0).item() / z.shape[1]
    uniform_ok = abs(uniform_bits - 2.0) <= 0.02

    # discretized Gaussian: within 0.1 bits of the integrated entropy
    k = np.arange(-30, 31)
    p = norm.cdf(k + 0.5) - norm.cdf(k - 0.5)
    oracle = float(-(p * np.log2(np.maximum(p, 1e-300))).sum())
    torch.manual_seed(0)
    g = np.random.default_rng(0).standard_normal(20_000)
    zg = torch.tensor(np.rint(g), dtype=torch.float32).unsqueeze(0)
    mg = test_entropy._fit(FactorizedModel(1), zg, steps=800, lr=0.05)
    with torch.no_grad():
        gauss_bits = rate_estimate(zg, mg, 1.0).item() / zg.shape[1]
    gauss_ok = abs(gauss_bits - oracle) <= 0.1

    # 100 random latents: serialized round trip must be bit-exact
    roundtrip_fail = 0
    torch.manual_seed(0)
    models = EntropyModels(4)
    config = QuantizerConfig()
    rng = np.random.default_rng(0)
    for i in range(100):
        latent = test_entropy._random_latent(rng, wild=(i % 10 == 0))
        bs = encode_bitstream(latent, models, config)
        dec = decode_bitstream(Bitstream.from_bytes(bs.to_bytes()), models, config)
        q_coords, q_feats, _ = quantize_latent(latent, models, config)
        if not (
            np.array_equal(dec.q_coords, q_coords)
            and np.array_equal(dec.q_feats, q_feats)
        ):
            roundtrip_fail += 1

    # measured payload within 2% + 64 bits of the differentiable estimate
    try:
        test_entropy.test_codec_bits_match_rate_estimate()
        payload_ok = True
    except AssertionError:
        payload_ok = False

    elapsed = time.monotonic() - t0
    ok = (
        uniform_ok and gauss_ok and roundtrip_fail == 0 and payload_ok
        and elapsed < 300
    )
    _report(
        "entropy and codec", ok,
        f"uniform-4 {uniform_bits:.4f} bits (2.0±0.02), gaussian "
        f"{gauss_bits:.4f} vs oracle {oracle:.4f} (±0.1), round-trip "
        f"failures {roundtrip_fail}/100, payload within 2%+64 bits: "
        f"{payload_ok}, {elapsed:.1f}s (<300s)",
    )


# ---------------------------------------------------------------------------
# Criterion 4: pipeline toy training


def test_criterion_toy_training(long_runs):
    rows = long_runs["learned"]["rows"]
    elapsed = long_runs["learned"]["elapsed"]
    assert len(rows) == 2000
    cds = [r["cost_c"] for r in rows]
    finite = all(
        math.isfinite(v)
        for r in rows
        for key, v in r.items()
        if key != "step"
    )
    first = cds[0]
    final_ma = float(np.mean(cds[-50:]))
    ok = finite and final_ma <= 0.5 * first and elapsed <= 1800
    _report(
        "toy training", ok,
        f"moving-average chamfer {final_ma:.5f} vs step-0 {first:.5f} "
        f"(ratio {final_ma / first:.3f} <= 0.5), all losses finite: {finite}, "
        f"{elapsed:.0f}s (<=1800s)",
    )


# ---------------------------------------------------------------------------
# Criterion 5: sampler ablation direction


def test_criterion_ablation_direction(long_runs):
    fps_bpp, fps_cd, fps_psnr = long_runs["fps"]["agg"]
    l_bpp, l_cd, l_psnr = long_runs["learned"]["agg"]
    wins = sum([l_bpp < fps_bpp, l_cd < fps_cd, l_psnr > fps_psnr])
    _report(
        "ablation direction", wins >= 2,
        f"learned ({l_bpp:.4f}, {l_cd * 1e3:.4f}, {l_psnr:.3f}) vs fps "
        f"({fps_bpp:.4f}, {fps_cd * 1e3:.4f}, {fps_psnr:.3f}) on "
        f"(bpp, cd_e3, psnr): learned wins {wins}/3 (>=2)",
    )


# ---------------------------------------------------------------------------
# Criterion 6: RD trend over lambda


def test_criterion_rd_trend(rd_runs):
    pts = {lam: rd_runs[lam]["agg"] for lam in (0.01, 0.1, 1.0)}
    pairs = [(0.01, 0.1), (0.1, 1.0), (0.01, 1.0)]
    bpp_ok = sum(pts[hi][0] <= pts[lo][0] for lo, hi in pairs)
    cd_ok = sum(pts[hi][1] >= pts[lo][1] for lo, hi in pairs)
    detail = ", ".join(
        f"lam={lam:g}: bpp={pts[lam][0]:.4f} cd_e3={pts[lam][1] * 1e3:.4f}"
        for lam in (0.01, 0.1, 1.0)
    )
    _report(
        "rd trend", bpp_ok >= 2 and cd_ok >= 2,
        f"{detail}; bpp non-increasing {bpp_ok}/3 pairs, cd non-decreasing "
        f"{cd_ok}/3 pairs (>=2 each)",
    )


# ---------------------------------------------------------------------------
# Criterion 7: determinism and persistence


def test_criterion_determinism_persistence(rd_runs, tmp_path):
    # seeded reruns reproduce 100 training steps log-for-log
    spec = DatasetSpec(points_per_block=128, seed=4, n_blocks=16)
    small = synth_dataset(spec)
    logs = []
    for name in ("a.jsonl", "b.jsonl"):
        config = TrainConfig(
            epochs=1000, batch_size=4, seed=5, max_steps=100,
            k_nn=4, width=8, disc_width=8, decoder_width=8, latent_dim=4,
        )
        fit(small, config, log_path=tmp_path / name)
        logs.append((tmp_path / name).read_text())
    logs_ok = logs[0] == logs[1] and len(logs[0].splitlines()) == 100

    # checkpoint save/load reproduces the forward pass bit-identically
    state = rd_runs[0.01]["state"]
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(state, ckpt)
    loaded = load_checkpoint(ckpt)
    cloud = synth_dataset(DatasetSpec(points_per_block=1024, seed=9, n_blocks=1))[0]
    bs_a = compress_cloud(state, cloud, seed=0)
    bs_b = compress_cloud(loaded, cloud, seed=0)
    ckpt_ok = bs_a.to_bytes() == bs_b.to_bytes()

    # bitstreams decode bit-exactly and reject model-digest mismatches
    rec_a = decompress_cloud(state, bs_a)
    rec_b = decompress_cloud(loaded, bs_b)
    stream_ok = np.array_equal(rec_a, rec_b)
    other = rd_runs[0.1]["state"]
    try:
        decompress_cloud(other, bs_a)
        reject_ok = False
    except DigestMismatchError:
        reject_ok = True

    ok = logs_ok and ckpt_ok and stream_ok and reject_ok
    _report(
        "determinism and persistence", ok,
        f"100-step log replay identical: {logs_ok}, checkpoint round trip "
        f"bit-identical: {ckpt_ok}, decode bit-exact: {stream_ok}, digest "
        f"mismatch rejected: {reject_ok}",
    )
