"""Acceptance criteria; each test reports one PASS/FAIL line (see the terminal summary)."""

import time

import numpy as np
import pytest

from nmpqat.analysis import (bit_report, epsilon_bound, gradient_check, loss_gap_trials,
                             uniform_quantizer_mse)
from nmpqat.cli import place_mid_band
from nmpqat.data import SplitSpec, fit_standardizer, split, standardize, synth_tabular
from nmpqat.io import dumps_model, load_model, save_model
from nmpqat.model import MlpModel, QuantMode
from nmpqat.quantizers import (activation_levels, quantize_activation, weight_codes,
                               weight_levels)
from nmpqat.training import ArchSpec, TrainConfig, train, train_seed
from test_quantizers import brute_nearest

ALL_MODES = ["full_precision", "nmp_weights_only", "nmp_weights_acts", "uniform(1)",
             "uniform(1.58)", "uniform(2)", "uniform(4)", "uniform(8)", "uniform(16)",
             "uniform(1,a4)", "uniform(4,a8)"]
PROTOCOL = TrainConfig(lr=1e-3, epochs=100, patience=20, batch_size=128, seeds=(0, 1, 2))


def prepared(kind, n=5000, d=16, seed=0):
    ds = synth_tabular(kind, n=n, d=d, seed=seed)
    tr, va, te = split(ds, SplitSpec(0.7, 0.15, 0.15, seed=0))
    stats = fit_standardizer(tr)
    return tuple(standardize(p, stats) for p in (tr, va, te))


def mean_bits(result, attr):
    return float(np.mean([getattr(bit_report(f), attr) for f in result.frozen.values()]))


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, detail = 0.0, []
    for mode in ALL_MODES:
        for task in ("regression", "classification"):
            k = 3 if task == "classification" else 1
            m = MlpModel.build(4, (8,), k, task, QuantMode.parse(mode, tau=0.025), rng=rng,
                               n_classes=k if k > 1 else None)
            place_mid_band(m, rng)
            x = rng.standard_normal((16, 4))
            y = rng.integers(0, 3, 16) if k > 1 else rng.standard_normal(16)
            m.init_alpha(x)
            rep = gradient_check(m, x, y)
            assert rep["W"].checked > 0 and rep["bias"].checked > 0
            err = max(r.max_rel_error for r in rep.values())
            if err > worst:
                worst, detail = err, [mode, task]
    elapsed = time.perf_counter() - t0
    criterion(1, worst < 1e-4 and elapsed < 30,
              f"max relative gradient error {worst:.2e} (worst: {'/'.join(detail) or '-'}) over "
              f"{len(ALL_MODES)} modes x 2 tasks, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_hard_forward_invariance(criterion):
    rng = np.random.default_rng(7)
    ok = True
    for mode in ALL_MODES:
        models = []
        for tau in (0.01, 0.05, 0.2):
            r = np.random.default_rng(99)
            m = MlpModel.build(8, (16, 16), 1, mode=QuantMode.parse(mode, tau=tau), rng=r)
            for layer in m.layers:
                if layer.s is not None:
                    layer.s[:] = r.uniform(0, 1, layer.d_out)
                if layer.s_act is not None:
                    layer.s_act[:] = r.uniform(0, 1, layer.d_out)
            m.init_alpha(r.standard_normal((64, 8)))
            models.append(m)
        frozen = models[0].freeze()
        for _ in range(100):
            x = rng.standard_normal((int(rng.integers(1, 50)), 8))
            outs = [m.forward(x)[0] for m in models] + [models[0].predict_raw(x),
                                                        frozen.predict_raw(x)]
            ok &= all(np.array_equal(outs[0], o) for o in outs[1:])
    criterion(2, ok, f"train/infer/frozen outputs bit-identical across tau in {{0.01, 0.05, 0.2}}, "
                     f"{len(ALL_MODES)} modes x 100 batches")


# 3 -------------------------------------------------------------------------

def test_criterion_3_quantizers(criterion):
    rng = np.random.default_rng(3)
    exact = True
    for bits in (1, 2, 4, 8, 16):
        w = rng.standard_normal((100, 100)) * 10 ** rng.uniform(-3, 3, size=100)
        codes, scale = weight_codes(w, bits)
        exact &= all(np.array_equal(codes[:, j] * scale[j],
                                    brute_nearest(w[:, j], weight_levels(bits, scale[j])))
                     for j in range(w.shape[1]))
    for bits in (4, 8, 16):
        z = rng.uniform(-1.0, 4.0, size=10_000)
        exact &= np.array_equal(quantize_activation(z, bits, 2.7),
                                brute_nearest(z, activation_levels(bits, 2.7)))

    mses = [uniform_quantizer_mse(b, 10**6, seed=b) for b in range(2, 9)]
    worst = max(m.rel_error for m in mses)
    ratios = {a.bits: a.mse / b.mse for a, b in zip(mses, mses[1:])}
    ratio_ok = all(3.5 <= ratios[b] <= 4.5 for b in (2, 4))
    criterion(3, exact and worst <= 0.05 and ratio_ok,
              f"oracle match {'exact' if exact else 'MISMATCH'}; MSE vs step^2/12 max deviation "
              f"{worst:.2%}; MSE(b)/MSE(b+1): "
              + ", ".join(f"b={b}: {r:.2f}" for b, r in ratios.items())
              + " (b=2 and b=4 required in [3.5, 4.5]; a symmetric grid gives "
              "((2^b-1)/(2^(b-1)-1))^2, i.e. 9.0 and 4.59)")


# 4 -------------------------------------------------------------------------

def test_criterion_4_initialization(criterion):
    ds = synth_tabular("regression_nonlinear", n=400, d=6, seed=4)
    tr, _, te = split(ds, SplitSpec(0.8, 0.0, 0.2))
    cfg = TrainConfig(epochs=1, patience=1, seeds=(0,))
    ok, n_w, n_a = True, 0, 0
    for seed in range(5):
        for hidden in ((16,), (32, 16, 8)):
            for acts in (False, True):
                run, _ = train_seed(ArchSpec(hidden, QuantMode.nmp(acts)), tr, te, cfg, seed)
                w = np.concatenate(run.history.initial_weight_bits)
                ok &= bool(np.all(w == 1.0))
                n_w += w.size
                a = [b for b in run.history.initial_act_bits if b is not None]
                if acts:
                    a = np.concatenate(a)
                    ok &= bool(np.all(a == 4.0)) and a.size == sum(hidden)
                    n_a += a.size
                else:
                    ok &= not a
    criterion(4, ok, f"epoch 0: {n_w} weight neurons all at 1 bit, {n_a} activation neurons all at 4 bits")


# 5 -------------------------------------------------------------------------

def test_criterion_5_loss_gap(criterion):
    t0 = time.perf_counter()
    trials = loss_gap_trials(100, seed=0, max_dim=10, bit_choices=(1, 2, 4, 8))
    elapsed = time.perf_counter() - t0
    n = sum(t.holds for t in trials)
    criterion(5, n == 100 and elapsed < 10,
              f"{n}/100 ridge instances satisfy gap <= (L/2) rho_emp^2, {elapsed:.2f}s")


# 6 -------------------------------------------------------------------------

def test_criterion_6_epsilon(criterion):
    rng = np.random.default_rng(6)
    ok = epsilon_bound(1.0, 2) == 1.0 / 48.0
    for _ in range(1000):
        s2, b = float(rng.uniform(0, 100)), int(rng.integers(1, 17))
        ok &= epsilon_bound(s2, b) == s2 / (3 * 4**b)
        ok &= epsilon_bound(s2, b) == 4 * epsilon_bound(s2, b + 1)
    criterion(6, ok, "eps(1, 2) = 1/48; eps = sigma2/(3*4^b) and eps(b) = 4 eps(b+1) exactly on 1000 draws")


# 7, 8 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def regression_runs():
    tr, va, te = prepared("regression_nonlinear")
    out = {}
    for mode in ("full_precision", "nmp_weights_only", "nmp_weights_acts", "uniform(1,a4)"):
        t0 = time.perf_counter()
        out[mode] = (train(ArchSpec((64,) * 4, QuantMode.parse(mode)), tr, te, PROTOCOL, va),
                     time.perf_counter() - t0)
    return out


def test_criterion_7_weights_only_trend(criterion, regression_runs):
    fp, t_fp = regression_runs["full_precision"]
    nmp, t_nmp = regression_runs["nmp_weights_only"]
    ratio = nmp.summary()["mse"]["mean"] / fp.summary()["mse"]["mean"]
    bits = mean_bits(nmp, "mean_weight_bits")
    criterion(7, ratio <= 1.1 and bits <= 3.0 and t_fp + t_nmp < 300,
              f"NMP weights-only test MSE {nmp.summary()['mse']['mean']:.4f} vs full precision "
              f"{fp.summary()['mse']['mean']:.4f} (ratio {ratio:.3f}, required <= 1.1); "
              f"mean weight bits {bits:.3f} (required <= 3.0); {t_fp + t_nmp:.0f}s")


def test_criterion_8_weights_acts_trend(criterion, regression_runs):
    fp_mse = regression_runs["full_precision"][0].summary()["mse"]["mean"]
    nmp = regression_runs["nmp_weights_acts"][0]
    uni = regression_runs["uniform(1,a4)"][0]
    ratio = nmp.summary()["mse"]["mean"] / fp_mse
    uni_ratio = uni.summary()["mse"]["mean"] / fp_mse
    act_bits = mean_bits(nmp, "mean_act_bits")
    criterion(8, ratio <= 1.5 and act_bits <= 6.0 and uni_ratio >= ratio,
              f"NMP weights+acts MSE ratio {ratio:.3f} (required <= 1.5), mean activation bits "
              f"{act_bits:.2f} (required <= 6); uniform(1,a4) ratio {uni_ratio:.3f} "
              f"(required >= NMP)")


# 9 -------------------------------------------------------------------------

def test_criterion_9_determinism_round_trip(criterion, tmp_path):
    ds = synth_tabular("regression_nonlinear", n=600, d=6, seed=9)
    tr, _, te = split(ds, SplitSpec(0.8, 0.0, 0.2))
    cfg = TrainConfig(lr=0.01, epochs=10, patience=10, seeds=(0,))
    ok = True
    for mode in ("full_precision", "nmp_weights_only", "nmp_weights_acts", "uniform(4)", "uniform(1.58,a8)"):
        arch = ArchSpec((16, 8), QuantMode.parse(mode))
        texts, models = [], []
        for _ in range(2):
            run, frozen = train_seed(arch, tr, te, cfg, 5)
            texts.append(dumps_model(frozen))
            models.append(frozen)
        ok &= texts[0] == texts[1]
        p = tmp_path / "m.json"
        save_model(models[0], p)
        loaded = load_model(p)
        ok &= dumps_model(loaded) == p.read_text()
        live = MlpModel.build(6, (16, 8), 1, mode=QuantMode.parse(mode), rng=np.random.default_rng(1))
        live.init_alpha(tr.features[:64])
        x = te.features
        ok &= np.array_equal(live.predict_raw(x), live.freeze().predict_raw(x))
        ok &= np.array_equal(loaded.predict_raw(x), models[0].predict_raw(x))
    criterion(9, ok, "same config+seed -> byte-identical model files; save/load/save byte-identical; "
                     "frozen inference bit-exact vs live, 5 modes")


# 10 ------------------------------------------------------------------------

def test_criterion_10_depth_sweep(criterion):
    tr, va, te = prepared("classification_moons")
    means, stds = [], []
    for depth in (1, 2, 3, 4):
        s = train(ArchSpec((64,) * depth, QuantMode.nmp(False)), tr, te, PROTOCOL, va).summary()
        means.append(s["accuracy"]["mean"])
        stds.append(s["accuracy"]["std"])
    # a drop counts only if it exceeds one std of the difference of the two means
    ok = all(means[k + 1] >= means[k] - np.hypot(stds[k], stds[k + 1]) for k in range(3))
    criterion(10, ok, "NMP accuracy by depth 1..4: "
              + ", ".join(f"{m:.4f}+-{s:.4f}" for m, s in zip(means, stds)))


# 11 ------------------------------------------------------------------------

def test_criterion_11_suite_time(criterion, request):
    # moved to the end of the session by conftest; measured from session start
    elapsed = time.time() - request.config._session_start
    criterion(11, elapsed < 600, f"suite elapsed {elapsed:.0f}s at the last acceptance test (< 600s)")
