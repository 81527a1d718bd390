"""End-to-end acceptance checks, one test per criterion.

Each test writes a single ``C<k> PASS|FAIL: ...`` line to the terminal and
then asserts. The learning criteria (6-8, 10) share one stage cache, so
encoders and 0.5 Hz decoders are trained once per seed.
"""
import dataclasses
import itertools
import json
import time

import numpy as np
import pytest
import torch
from scipy import stats

from vidrecon import decoder as dec
from vidrecon import encoder as enc
from vidrecon import evaluation as ev
from vidrecon import features as fe
from vidrecon import preprocess as pp
from vidrecon import simulator as sim
from vidrecon import ssl_data as sd
from vidrecon.config import ExperimentConfig
from vidrecon.decoder import DecoderLossWeights, DecoderModel, LossStacks
from vidrecon.pipeline import Pipeline, run_ablation_matrix, run_pipeline

from gradcheck import check_param_grads

SEEDS = (0, 1, 2)
SHAPE = (8, 8, 3)
RESULTS: dict[str, str] = {}


@pytest.fixture
def report(request):
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(key, ok, detail):
        line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
        RESULTS[key] = line
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        else:
            print(line)
        return ok
    return emit


# --------------------------------------------------------------------------
# 1. Loss identities
# --------------------------------------------------------------------------

def _manual_frame_loss(x, xh, stacks, w):
    """L_s + L_a recomputed directly from the proxy feature maps."""
    a = torch.as_tensor(x).permute(2, 0, 1)[None].double()
    b = torch.as_tensor(xh).permute(2, 0, 1)[None].double()
    ls = sum(((p - q) ** 2).mean() for p, q in zip(stacks.spatial(a), stacks.spatial(b)))
    z = torch.zeros_like(a)
    la = sum(((p - q) ** 2).mean() for p, q in
             zip(stacks.motion(torch.cat([a, z], 1)), stacks.motion(torch.cat([b, z], 1))))
    return float(w.spatial * ls + w.action * la)


def test_c1_loss_identities(report):
    rng = np.random.default_rng(0)
    stacks = LossStacks(fe.make_extractor(fe.spatial_spec(input_shape=SHAPE)).double(),
                        fe.make_extractor(fe.motion_spec(input_shape=SHAPE)).double())
    w = DecoderLossWeights()
    errs = {}
    # encoder loss on the two-element example and at r = r_hat
    errs["encoder_example"] = abs(float(enc.encoder_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]))) -
                              (np.sqrt(2) + 0.5))
    r = np.array([0.3, -1.2])
    errs["encoder_zero"] = abs(float(enc.encoder_loss(r, r)))
    # frame loss against a direct recomputation, and zero on identical frames
    x, xh = rng.random(SHAPE), rng.random(SHAPE)
    got = float(dec.loss_supervised_frame(torch.as_tensor(x), torch.as_tensor(xh), stacks, w))
    errs["frame_value"] = abs(got - _manual_frame_loss(x, xh, stacks, w))
    errs["frame_zero"] = abs(float(dec.loss_supervised_frame(torch.as_tensor(x), torch.as_tensor(x), stacks, w)))
    # the cycle loss is the frame loss on (v_mid, D(E(v)))
    e = enc.EncoderModel(6, 4, SHAPE, conv_channels=4, seed=0).double().freeze()
    d = DecoderModel(6, "rate_0p5hz", 1, SHAPE, width=4, seed=0).double()
    clip = torch.as_tensor(rng.random((1, 4, *SHAPE)))
    with torch.no_grad():
        xh3 = d(e(clip))[0, 0]
        cyc = float(dec.loss_cycle(e, d, clip, stacks, w))
    errs["cycle_value"] = abs(cyc - _manual_frame_loss(clip[0, 2].numpy(), xh3.numpy(), stacks, w))
    # HFR supervised loss: sum of per-frame losses; zero on identical triples
    f3, g3 = rng.random((3, *SHAPE)), rng.random((3, *SHAPE))
    per = sum(_manual_frame_loss(f3[i], g3[i], stacks, w) for i in range(3))
    errs["hfr_value"] = abs(float(dec.loss_supervised_hfr(torch.as_tensor(f3), torch.as_tensor(g3), stacks, w)) - per)
    errs["hfr_zero"] = abs(float(dec.loss_supervised_hfr(torch.as_tensor(f3), torch.as_tensor(f3), stacks, w)))
    # consistency on a two-pixel frame: ||(3, 4)|| = 5
    a5 = torch.zeros((1, 2, 1), dtype=torch.float64)
    b5 = torch.tensor([[[3.0], [4.0]]], dtype=torch.float64)
    errs["consistency_value"] = abs(float(dec.loss_recon_consistency(a5, b5)) - 5.0)
    errs["consistency_zero"] = abs(float(dec.loss_recon_consistency(b5, b5)))
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-6
    report("C1", ok, f"{len(errs)} identities, worst abs error {errs[worst]:.2e} ({worst}); tol 1e-6")
    assert ok, errs


# --------------------------------------------------------------------------
# 2. Gradient correctness
# --------------------------------------------------------------------------

def test_c2_gradients(report):
    t0 = time.time()
    rng = np.random.default_rng(1)
    stacks = LossStacks(fe.make_extractor(fe.spatial_spec(input_shape=SHAPE)).double(),
                        fe.make_extractor(fe.motion_spec(input_shape=SHAPE)).double())
    w = DecoderLossWeights.hfr()
    e = enc.EncoderModel(6, 4, SHAPE, conv_channels=4, seed=0).double()
    clips = torch.as_tensor(rng.random((3, 4, *SHAPE)))
    r_true = torch.as_tensor(rng.standard_normal((3, 6)))
    d1 = DecoderModel(6, "rate_0p5hz", 1, SHAPE, width=4, seed=1).double()
    d3 = DecoderModel(6, "hfr", 3, SHAPE, width=4, seed=2).double()
    r1 = torch.as_tensor(rng.standard_normal((2, 6)))
    r2 = torch.as_tensor(rng.standard_normal((2, 12)))
    r3 = torch.as_tensor(rng.standard_normal((2, 3, 6)))
    x1 = torch.as_tensor(rng.random((2, *SHAPE)))
    x3 = torch.as_tensor(rng.random((2, 3, *SHAPE)))
    frozen = enc.EncoderModel(6, 4, SHAPE, conv_channels=4, seed=3).double().freeze()
    pair = sd.OverlapPair(sim.VideoClip(rng.random((8, *SHAPE)), 2.0), 4)
    prior = dec.TemporalPriorNet(seed=0).double()
    for p in prior.parameters():
        p.requires_grad_(False)
    d32 = DecoderModel(6, "hfr", 3, (32, 32, 3), width=4, seed=4).double()
    v32 = torch.as_tensor(rng.random((1, 3, 32, 32, 3)))
    r32 = torch.as_tensor(rng.standard_normal((1, 12)))

    def cons():
        a = d3(torch.cat([r3[:, 0], r3[:, 1]], 1))
        b = d3(torch.cat([r3[:, 1], r3[:, 2]], 1))
        return dec.loss_recon_consistency(a[:, -1], b[:, 0])

    terms = {
        "encoder": (lambda: enc.encoder_loss(r_true, e(clips)), e),
        "supervised frame": (lambda: dec.loss_supervised_frame(x1, d1(r1)[:, 0], stacks, w), d1),
        "regularization": (lambda: dec.regularization(d1(r1), d1, w), d1),
        "cycle": (lambda: dec.loss_cycle(frozen, d1, clips[:2], stacks, w), d1),
        "supervised hfr": (lambda: dec.loss_supervised_hfr(x3, d3(r2), stacks, w), d3),
        "cycle hfr": (lambda: dec.loss_cycle_hfr(frozen, d3, pair, stacks, w), d3),
        "consistency": (cons, d3),
        "temporal prior": (lambda: dec.loss_temporal_prior(prior, v32, d32(r32)), d32),
    }
    worst = {}
    for name, (fn, model) in terms.items():
        errs = check_param_grads(fn, dict(model.named_parameters()))
        worst[name] = max(errs.values())
    # the readout also at the coarser step named in the contract
    ro = {"readout.weight": e.readout.weight, "readout.bias": e.readout.bias}
    worst["encoder readout @1e-4"] = max(check_param_grads(terms["encoder"][0], ro, step=1e-4).values())
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and time.time() - t0 < 120
    report("C2", ok, f"{len(worst)} loss terms, max relative error {worst[top]:.2e} ({top}); "
                     f"{time.time() - t0:.0f} s")
    assert ok, worst


# --------------------------------------------------------------------------
# 3. Alignment recovery
# --------------------------------------------------------------------------

def test_c3_alignment_recovery(report):
    """Ten trials cycling delays 0-4. Each trial draws a training set the size
    of the default benchmark (18 x 48 s) and a fresh subject; the noisy
    version adds per-voxel noise with the signal's standard deviation."""
    t0 = time.time()
    cfg = sim.BenchmarkConfig()
    fn = fe.grid_pooled_fn(fe.make_extractor(fe.spatial_spec()), 1, 4)
    hrf = sim.canonical_hrf()
    rows = []
    for trial in range(10):
        delay = trial % 5
        videos = [sim.generate_segment(cfg.scene, cfg.train_segment_s, cfg.train_mean_shot_s,
                                       seed=100 * trial + s) for s in range(cfg.n_train_segments)]
        subject = sim.make_subject(64, delay_trs=delay, noise_sigma=0.0, seed=trial)
        clean = [sim.noiseless_response(subject, v) for v in videos]
        noise_rng = np.random.default_rng(trial)
        noisy = [c + c.std(0) * noise_rng.standard_normal(c.shape) for c in clean]
        shifts = range(-1, 7)
        a = pp.find_temporal_alignment([sim.FmriSeries(c) for c in clean], videos, shifts, fn, hrf=hrf)
        b = pp.find_temporal_alignment([sim.FmriSeries(c) for c in noisy], videos, shifts, fn, hrf=hrf)
        rows.append((delay, a.best_shift_trs, b.best_shift_trs))
    exact = sum(d == a for d, a, _ in rows)
    near = sum(abs(d - b) <= 1 for d, _, b in rows)
    ok = exact == 10 and near == 10
    report("C3", ok, f"noise-free exact {exact}/10, SNR~1 within 1 TR {near}/10 "
                     f"(delay, clean, noisy) = {rows}; {time.time() - t0:.0f} s")
    assert ok, rows


# --------------------------------------------------------------------------
# 4. Statistics oracles
# --------------------------------------------------------------------------

def _brute_rank_sum_p(a, b):
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    n1 = len(a)
    e = n1 * (len(pooled) + 1) / 2
    w = ranks[:n1].sum()
    sums = [ranks[list(c)].sum() for c in itertools.combinations(range(len(pooled)), n1)]
    return np.mean([abs(s - e) >= abs(w - e) - 1e-9 for s in sums])


def _brute_signed_rank_p(d):
    d = d[d != 0]
    r = stats.rankdata(np.abs(d))
    e = r.sum() / 2
    w = r[d > 0].sum()
    sums = [sum(r[i] for i in range(len(d)) if s[i]) for s in itertools.product([0, 1], repeat=len(d))]
    return np.mean([abs(s - e) >= abs(w - e) - 1e-9 for s in sums])


def test_c4_statistics_oracles(report):
    t0 = time.time()
    rng = np.random.default_rng(4)
    # permutation p-value: the count of null values >= r, by brute force
    y = rng.standard_normal((48, 5))
    x = y + 2 * rng.standard_normal((48, 5))
    null = ev.permutation_null(y, x, 300, 6, seed=1)
    r = np.array([stats.pearsonr(y[:, i], x[:, i])[0] for i in range(5)])
    counts = np.array([sum(1 for v in null[:, i] if v >= r[i] - 1e-12) for i in range(5)])
    brute = np.where(counts == 0, 1 / 301, counts / 300)
    perm_ok = np.allclose(ev.block_permutation_pvalues(y, x, 300, 6, seed=1), brute)
    # Benjamini-Hochberg, worked by hand: thresholds 0.0125, 0.025, 0.0375, 0.05
    bh_ok = ev.fdr_bh([0.01, 0.02, 0.04, 0.5], 0.05).tolist() == [True, True, False, False] and \
        ev.fdr_bh([0.03, 0.031, 0.032, 0.033], 0.05).tolist() == [True] * 4
    # exact Wilcoxon branches vs enumeration, every n <= 8 (ties included)
    mismatches = 0
    cases = 0
    for n in range(2, 9):
        for rep in range(3):
            g = np.random.default_rng(100 * n + rep)
            d = g.integers(-4, 5, n).astype(float)
            if not d.any():
                d[0] = 1
            cases += 1
            mismatches += not np.isclose(ev.wilcoxon_signed_rank(d).pvalue, _brute_signed_rank_p(d))
            n1 = int(g.integers(1, n)) if n > 2 else 1
            vals = g.integers(0, 5, n).astype(float)
            if np.ptp(vals) == 0:
                vals[0] += 1
            a, b = vals[:n1], vals[n1:]
            cases += 1
            mismatches += not np.isclose(ev.wilcoxon_rank_sums(a, b).pvalue, _brute_rank_sum_p(a, b))
    # empirical FDR of permutation + BH on signal-free data
    fractions = []
    for trial in range(20):
        g = np.random.default_rng(1000 + trial)
        rep = ev.significance_report(g.standard_normal((96, 64)), g.standard_normal((96, 64)),
                                     n_perm=1000, block_len=10, alpha=0.05, seed=trial)
        fractions.append(rep.significant.mean())
    fdr = float(np.mean(fractions))
    ok = perm_ok and bh_ok and mismatches == 0 and fdr <= 0.05 + 0.03
    report("C4", ok, f"p-value count matches brute force: {perm_ok}; BH hand examples: {bh_ok}; "
                     f"exact Wilcoxon mismatches {mismatches}/{cases}; null FDR {fdr:.3f} "
                     f"(limit 0.08); {time.time() - t0:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 5. Identification calibration
# --------------------------------------------------------------------------

def test_c5_identification_calibration(report):
    t0 = time.time()
    rng = np.random.default_rng(5)
    stack = fe.make_extractor(fe.eval_spec())
    video = rng.random((1600, 32, 32, 3)).astype(np.float32)
    pool = ev.build_distractor_pool(video, 4, 1, 8.0)
    gt = video[:800]  # 200 consecutive clips of 4 frames
    times = np.arange(800) / 8.0
    perfect = ev.identification_test(gt, gt, pool, stack, n=100, m=4, seed=0, gt_times=times)
    noise = rng.random((800, 32, 32, 3)).astype(np.float32)
    rand = ev.identification_test(noise, gt, pool, stack, n=100, m=4, seed=1, gt_times=times)
    mean_rank = float(np.mean(rand.ranks))
    ok = (set(perfect.ranks) == {1} and len(rand.ranks) == 200 and abs(mean_rank - 50.5) <= 5)
    report("C5", ok, f"perfect: all {len(perfect.ranks)} ranks = 1: {set(perfect.ranks) == {1}}; "
                     f"random: mean rank {mean_rank:.2f} over {len(rand.ranks)} clips "
                     f"(50.5 +/- 5); {time.time() - t0:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 6-8 and 10: learning criteria on the default benchmark
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def base_config(accept_root):
    return ExperimentConfig(output_dir=str(accept_root / "runs"), cache_dir=str(accept_root / "cache"))


@pytest.fixture(scope="session")
def ablation_05(base_config):
    t0 = time.time()
    cfg = base_config.replace(
        decoder=dataclasses.replace(base_config.decoder, train_hfr=False),
        output_dir=base_config.output_dir + "/c6")
    table = run_ablation_matrix(cfg, ["full", "supervised_only"], SEEDS)
    return table, time.time() - t0


@pytest.fixture(scope="session")
def ablation_hfr(base_config, ablation_05):
    t0 = time.time()
    cfg = base_config.replace(output_dir=base_config.output_dir + "/c78")
    table = run_ablation_matrix(cfg, ["full", "no_consistency", "interp_baseline"], SEEDS)
    return table, time.time() - t0


def _row(table, arm):
    return next(r for r in table["rows"] if r["arm"] == arm)


def test_c6_self_supervision_benefit(report, ablation_05):
    table, secs = ablation_05
    full, sup = _row(table, "full"), _row(table, "supervised_only")
    f_seed = full["rate_0p5hz"]["per_seed_mean_rank"]
    s_seed = sup["rate_0p5hz"]["per_seed_mean_rank"]
    wins = sum(f < s for f, s in zip(f_seed, s_seed))
    rs = sup["rate_0p5hz"]["vs_reference"]["rank_sums"]
    better = full["rate_0p5hz"]["mean_rank"] < sup["rate_0p5hz"]["mean_rank"]
    ok = wins >= 2 and rs["pvalue"] < 0.05 and better
    report("C6", ok, f"mean rank per seed full {np.round(f_seed, 2).tolist()} vs supervised-only "
                     f"{np.round(s_seed, 2).tolist()}; full wins {wins}/3; pooled rank-sums "
                     f"p = {rs['pvalue']:.4g}; {secs / 60:.1f} min")
    assert ok


def test_c7_reconstruction_consistency(report, ablation_hfr):
    table, secs = ablation_hfr
    full = _row(table, "full")["overlap_discrepancy"]
    nr = _row(table, "no_consistency")["overlap_discrepancy"]
    reduction = 1 - full["mean"] / nr["mean"]
    ok = reduction >= 0.20
    report("C7", ok, f"overlap discrepancy full {full['mean']:.3f} "
                     f"(per seed {np.round(full['per_seed'], 3).tolist()}) vs no-consistency "
                     f"{nr['mean']:.3f} ({np.round(nr['per_seed'], 3).tolist()}); reduction "
                     f"{100 * reduction:.0f}% (need 20%); {secs / 60:.1f} min")
    assert ok


def test_c8_hfr_vs_interpolation(report, ablation_hfr):
    table, _ = ablation_hfr
    full = _row(table, "full")["hfr_mid"]["per_seed_mean_rank"]
    interp = _row(table, "interp_baseline")["hfr_mid"]["per_seed_mean_rank"]
    wins = sum(f < i for f, i in zip(full, interp))
    ok = wins >= 2
    report("C8", ok, f"middle-frame mean rank HFR {np.round(full, 2).tolist()} vs interpolation "
                     f"{np.round(interp, 2).tolist()}; HFR wins {wins}/3")
    assert ok


# --------------------------------------------------------------------------
# 9. Encoder significance
# --------------------------------------------------------------------------

def test_c9_encoder_significance(report, accept_root):
    t0 = time.time()
    fractions = {}
    for name, gain, noise in (("strong", 1.0, 0.1), ("null", 0.0, 0.5)):
        b = dataclasses.replace(sim.BenchmarkConfig(), n_train_segments=8, signal_gain=gain,
                                noise_sigma=noise)
        cfg = ExperimentConfig(benchmark=b, output_dir=str(accept_root / f"c9_{name}"))
        p = Pipeline(cfg)
        p.run("significance")
        sig = json.loads((p.d_sig / "significance.json").read_text())
        fractions[name] = (sig["n_significant"], len(sig["significant"]))
    strong = fractions["strong"][0] / fractions["strong"][1]
    null = fractions["null"][0] / fractions["null"][1]
    ok = strong >= 0.95 and null <= 0.08
    report("C9", ok, f"strong signal {fractions['strong'][0]} (out of {fractions['strong'][1]}) "
                     f"significant; signal-free {fractions['null'][0]} (out of {fractions['null'][1]}); "
                     f"{time.time() - t0:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 10. Determinism
# --------------------------------------------------------------------------

def test_c10_determinism(report, base_config, ablation_hfr, accept_root):
    """A second full run (own cache, own output) against the full-arm seed-0
    run of the ablation matrix."""
    t0 = time.time()
    first = accept_root / "runs" / "c78" / "ablation" / "full" / "seed0" / "metrics.json"
    cfg = base_config.replace(output_dir=str(accept_root / "rerun"), cache_dir=str(accept_root / "cache_rerun"))
    run_pipeline(cfg)
    second = accept_root / "rerun" / "metrics.json"
    same = first.read_bytes() == second.read_bytes()
    ok = same and (accept_root / "rerun" / "report" / "report.md").exists()
    report("C10", ok, f"metrics.json byte-identical across two independent full runs: {same}; "
                      f"{time.time() - t0:.0f} s")
    assert ok
