"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

The desk-scale reproduction trains 15 models (5 seeds x 3 configurations)
and takes roughly 15-20 minutes on one CPU core; deselect with ``-m "not slow"``.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mcsv.data import (
    DEFAULT_SNR_RANGES,
    AugmentPolicy,
    UtteranceStore,
    generate_corpus,
    mix_at_snr,
    random_speaker,
    read_manifest,
    rms,
    synthesize_utterance,
)
from mcsv.evaluation import ScoreSet, compute_eer, compute_min_dcf, evaluate, make_trials
from mcsv.features import FeatureMatrix, Waveform, frame_signal, instance_normalize, log_mel
from mcsv.losscheck import DEFAULT_CASES, loss_gradcheck, random_batch, reference_loss
from mcsv.losses import LossConfig, LossVariant, MarginSchedule, ScheduleKind, compute_loss, margin_at, pair_index_sets
from mcsv.model import EmbeddingNet, ModelConfig
from mcsv.train import TrainConfig, train
from test_evaluation import brute_eer, brute_min_dcf

SEEDS = (0, 1, 2, 3, 4)
TRAIN_SPEAKERS, TEST_SPEAKERS = 32, 8
RESULTS_PATH = os.environ.get("MCSV_ACCEPTANCE_JSON")


def report(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_gradient_correctness():
    rng = np.random.default_rng(20240)
    worst, worst_strict = {}, {}
    for variant, m in DEFAULT_CASES:
        cfg = LossConfig(variant, tau=0.02, margin=m)
        key = f"{variant.value}(m={m})"
        worst[key] = worst_strict[key] = 0.0
        for _ in range(20):
            n, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
            Z, Zp = random_batch(rng, n, d)
            worst[key] = max(worst[key], loss_gradcheck(Z, Zp, cfg))
            worst_strict[key] = max(worst_strict[key], loss_gradcheck(Z, Zp, cfg, strict=True))
    top = max(worst.values())
    passed = top < 1e-5
    report("gradient correctness", passed,
           f"max rel err {top:.2e} over 6 variant/margin cases x 20 batches (tol 1e-5); "
           f"without FD roundoff allowance {max(worst_strict.values()):.2e}")
    assert passed, worst


# ---------------------------------------------------------------------------
# 2. oracle equivalence


def test_oracle_equivalence():
    rng = np.random.default_rng(7)
    err = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 17)), int(rng.integers(2, 17))
        Z, Zp = random_batch(rng, n, d)
        for variant, m in DEFAULT_CASES:
            vec = compute_loss(Z, Zp, LossConfig(variant, tau=0.02, margin=m)).loss
            err = max(err, abs(vec - reference_loss(Z, Zp, variant, 0.02, m)))
    counts_ok = True
    for n in range(2, 17):
        partner, negatives = pair_index_sets(n)
        counts_ok &= len(partner) == 2 * n and all(len(a) == 2 * (n - 1) for a in negatives)
    passed = err < 1e-10 and counts_ok
    report("oracle equivalence", passed,
           f"max |vectorized - enumeration| {err:.2e} over 100 batches x 6 cases (tol 1e-10); "
           f"pair counts 2N / 2(N-1) for N=2..16: {'ok' if counts_ok else 'WRONG'}")
    assert passed


# ---------------------------------------------------------------------------
# 3. reduction identities


def test_reduction_identities():
    rng = np.random.default_rng(3)
    am_err = aam_err = 0.0
    for _ in range(100):
        Z, Zp = random_batch(rng, int(rng.integers(2, 17)), int(rng.integers(2, 17)))
        snt = compute_loss(Z, Zp, LossConfig(LossVariant.SNT_XENT)).loss
        am_err = max(am_err, abs(compute_loss(Z, Zp, LossConfig(LossVariant.SNT_XENT_AM, margin=0.0)).loss - snt))
        aam_err = max(aam_err, abs(compute_loss(Z, Zp, LossConfig(LossVariant.SNT_XENT_AAM, margin=0.0)).loss - snt))
    sched = MarginSchedule(ScheduleKind.COSINE_RAMP, total_steps=1000, final_margin=0.4)
    ends = (margin_at(0, sched), margin_at(500, sched), margin_at(999, sched))
    ends_ok = ends == (0.0, 0.4, 0.4)
    passed = am_err < 1e-12 and aam_err < 1e-9 and ends_ok
    report("reduction identities", passed,
           f"|AM(0)-SNT| {am_err:.1e} (tol 1e-12), |AAM(0)-SNT| {aam_err:.1e} (tol 1e-9), "
           f"schedule m(0), m(T/2), m(T-1) = {ends}")
    assert passed


# ---------------------------------------------------------------------------
# 4. metric oracles


def test_metric_oracles():
    rng = np.random.default_rng(11)
    eer_err = dcf_err = 0.0
    for k in range(1000):
        n = int(rng.integers(2, 80))
        scores = rng.uniform(-1, 1, n)
        if k % 2:
            scores = np.round(scores, 1)  # ties
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[:2] = [True, False]
        s = ScoreSet.from_arrays(scores, labels)
        tar, non = list(scores[labels]), list(scores[~labels])
        eer_err = max(eer_err, abs(compute_eer(s)[0] - brute_eer(tar, non)))
        dcf_err = max(dcf_err, abs(compute_min_dcf(s)[0] - brute_min_dcf(tar, non)))
    hand = compute_eer(ScoreSet.from_arrays([0.9, 0.8, 0.4, 0.6, 0.3, 0.1], [1, 1, 1, 0, 0, 0]))[0]
    passed = eer_err < 1e-12 and dcf_err < 1e-12 and abs(hand - 1 / 3) < 1e-15
    report("metric oracles", passed,
           f"1000 random sets vs brute-force sweep: max EER diff {eer_err:.1e}, max minDCF diff {dcf_err:.1e}; "
           f"hand case EER {hand:.6f} (expected 1/3)")
    assert passed


# ---------------------------------------------------------------------------
# 5. DSP


def test_dsp():
    rng = np.random.default_rng(5)
    snr_err = 0.0
    for lo, hi in DEFAULT_SNR_RANGES.values():
        for snr in np.linspace(lo, hi, 25):
            s = Waveform(rng.standard_normal(int(rng.integers(400, 20000))) * rng.uniform(0.01, 5))
            noise = Waveform(rng.standard_normal(int(rng.integers(100, 20000))) * rng.uniform(0.01, 5))
            out = mix_at_snr(s, noise, float(snr))
            snr_err = max(snr_err, abs(20 * math.log10(rms(s.samples) / rms(out.samples - s.samples)) - snr))
    frames_ok = True
    for length in (400, 401, 559, 560, 561, 16000, 32000, 80000):
        got = frame_signal(Waveform(np.zeros(length))).shape[0]
        frames_ok &= got == (length - 400) // 160 + 1
    # the output variance of a coefficient is exactly v / (v + 1e-5); the 1e-4
    # band around 1 is reachable only for input variance v >= ~0.1
    mean_err = var_err = formula_err = 0.0
    low_var = total = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        raw = log_mel(frame_signal(Waveform(synthesize_utterance(random_speaker(r), 32000, r)))).values
        v_in = raw.var(axis=0)
        out = instance_normalize(FeatureMatrix(raw)).values
        v_out = out.var(axis=0)
        mean_err = max(mean_err, float(np.max(np.abs(out.mean(axis=0)))))
        formula_err = max(formula_err, float(np.max(np.abs(v_out - v_in / (v_in + 1e-5)))))
        reachable = v_in >= 0.1
        low_var += int(np.sum(~reachable))
        total += v_in.size
        var_err = max(var_err, float(np.max(np.abs(v_out[reachable] - 1))))
    x = rng.normal(3, 2, (300, 40))
    once = instance_normalize(FeatureMatrix(x)).values
    twice = instance_normalize(FeatureMatrix(once)).values
    idem = float(np.max(np.abs(twice - once) / np.maximum(1.0, np.abs(once))))
    passed = (snr_err < 1e-9 and frames_ok and mean_err < 1e-6 and var_err < 1e-4
              and formula_err < 1e-12 and idem < 1e-5)
    report("DSP", passed,
           f"max SNR error {snr_err:.1e} dB over [13,20]/[5,15]/[0,15] (tol 1e-9); framing count formula "
           f"{'exact' if frames_ok else 'WRONG'}; instance norm |mean| {mean_err:.1e} (tol 1e-6), "
           f"|var-1| {var_err:.1e} (tol 1e-4) where input var >= 0.1, var = v/(v+1e-5) to {formula_err:.0e} "
           f"on all coefficients ({low_var}/{total} below 0.1 cannot reach the 1e-4 band), "
           f"idempotence rel {idem:.1e} (tol 1e-5)")
    assert passed


# ---------------------------------------------------------------------------
# 6 + 7. desk-scale training runs


def _corpora(root: Path, seed: int):
    train_dir, test_dir = root / f"train{seed}", root / f"test{seed}"
    if not (train_dir / "manifest.csv").exists():
        generate_corpus(train_dir, TRAIN_SPEAKERS, 4, 5.0, seed=1000 + seed)
    if not (test_dir / "manifest.csv").exists():
        generate_corpus(test_dir, TEST_SPEAKERS, 8, 5.0, seed=2000 + seed)
    return train_dir, test_dir


def _eval(net, test_dir, trials, condition):
    scores, det, stats = evaluate(net, test_dir, trials, condition)
    return {"eer": det.eer, "min_dcf": det.min_dcf, "gap": stats.gap}


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    model = ModelConfig()
    configs = {
        "sntxent": (LossConfig(LossVariant.SNT_XENT), AugmentPolicy()),
        "sntxent_noaug": (LossConfig(LossVariant.SNT_XENT), AugmentPolicy(enabled=False)),
        "am0.4": (LossConfig(LossVariant.SNT_XENT_AM, margin=0.4), AugmentPolicy()),
    }
    results = {}
    start = time.time()
    for seed in SEEDS:
        train_dir, test_dir = _corpora(root, seed)
        store = UtteranceStore.from_corpus(train_dir)
        trials = make_trials(read_manifest(test_dir), np.random.default_rng(seed))
        untrained = EmbeddingNet(model, seed=seed)
        res = {"untrained": {c: _eval(untrained, test_dir, trials, c) for c in ("clean", "noisy")}}
        for name, (loss, policy) in configs.items():
            state = train(store, model, loss, policy, TrainConfig(seed=seed))
            res[name] = {c: _eval(state.net, test_dir, trials, c) for c in ("clean", "noisy")}
            res[name]["final_loss"] = state.metrics[-1]["loss"]
        results[seed] = res
    results["elapsed_sec"] = time.time() - start
    if RESULTS_PATH:
        Path(RESULTS_PATH).write_text(json.dumps(results, indent=2))
    return results


@pytest.mark.slow
def test_desk_a_trained_eer(desk_runs):
    trained = [desk_runs[s]["sntxent"]["clean"]["eer"] for s in SEEDS]
    base = [desk_runs[s]["untrained"]["clean"]["eer"] for s in SEEDS]
    med, med_base = float(np.median(trained)), float(np.median(base))
    passed = med < 0.15 and med < med_base
    report("desk (a) SNT-Xent EER", passed,
           f"median clean EER {100 * med:.2f}% (need < 15% and < untrained {100 * med_base:.2f}%); per seed "
           + ", ".join(f"{100 * t:.1f}/{100 * b:.1f}" for t, b in zip(trained, base))
           + f" (trained/untrained); desk runs took {desk_runs['elapsed_sec'] / 60:.1f} min")
    assert passed


@pytest.mark.slow
def test_desk_b_augmentation_ablation(desk_runs):
    aug = [desk_runs[s]["sntxent"]["noisy"]["eer"] for s in SEEDS]
    noaug = [desk_runs[s]["sntxent_noaug"]["noisy"]["eer"] for s in SEEDS]
    wins = sum(n > a for a, n in zip(aug, noaug))
    passed = wins >= 4
    report("desk (b) no-augmentation is worse on noisy trials", passed,
           f"{wins}/5 seeds (need >= 4); noisy EER aug/no-aug "
           + ", ".join(f"{100 * a:.1f}/{100 * n:.1f}" for a, n in zip(aug, noaug)))
    assert passed


@pytest.mark.slow
def test_desk_c_margin_widens_score_gap(desk_runs):
    snt = [desk_runs[s]["sntxent"]["clean"]["gap"] for s in SEEDS]
    am = [desk_runs[s]["am0.4"]["clean"]["gap"] for s in SEEDS]
    wins = sum(a >= b for a, b in zip(am, snt))
    passed = wins >= 4
    report("desk (c) AM(0.4) gap >= SNT-Xent gap", passed,
           f"{wins}/5 seeds (need >= 4); clean mean-score gap AM/SNT "
           + ", ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(am, snt)))
    assert passed


@pytest.mark.slow
def test_stability_monitoring(tmp_path):
    train_dir, _ = _corpora(tmp_path, 0)
    store = UtteranceStore.from_corpus(train_dir)
    runs = {}
    for name, loss in (("aam m=0.5", LossConfig(LossVariant.SNT_XENT_AAM, margin=0.5)),
                       ("sntxent", LossConfig(LossVariant.SNT_XENT))):
        try:
            state = train(store, ModelConfig(), loss, AugmentPolicy(), TrainConfig(epochs=20, seed=0),
                          out_dir=tmp_path / name.replace(" ", "_"))
        except Exception as exc:  # the criterion is precisely that nothing escapes
            report("stability monitoring", False, f"{name} training crashed: {exc!r}")
            raise
        runs[name] = [r["grad_maxnorm"] for r in state.metrics]
    aam = runs["aam m=0.5"]
    recorded = len(aam) == 20 and all(isinstance(g, float) for g in aam)
    growth = max(aam) / aam[0] if aam[0] > 0 else float("inf")
    ref_growth = max(runs["sntxent"]) / runs["sntxent"][0]
    report("stability monitoring", recorded,
           f"AAM m=0.5 ran 20 epochs, grad max-norm logged every epoch: first {aam[0]:.3g}, peak {max(aam):.3g} "
           f"(x{growth:.1f}); SNT-Xent peak/first x{ref_growth:.1f} (observation, not asserted)")
    assert recorded
