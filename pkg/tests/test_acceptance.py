"""Acceptance criteria 1-9.

Each test appends one PASS/FAIL line to the terminal summary. The
synthetic-cohort criteria (5, 6, 7) share one set of cross-validation runs.
"""

import json
import math
import time

import numpy as np
import pytest

from hatcn import autodiff as ad
from hatcn.cli import main as cli_main
from hatcn.cli import run_baseline
from hatcn.data import SERIES_LENGTH, SynthConfig, generate_synthetic
from hatcn.explain import explain_sample, receptive_field_start, relevance_frequency
from hatcn.features import analyse
from hatcn.model import HatcnConfig, HatcnModel, forward
from hatcn.training import TrainConfig, cross_validate

from conftest import ACCEPTANCE_LINES, randomized_model
from oracles import triple_loop_frequency

# training budget for the synthetic cohort
CHANNELS = 8
KERNEL = 50
EPOCHS = 30
LR = 3e-3
BATCH = 32
MASTER_SEED = 0
FOLDS, REPEATS = 10, 5


def report(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _shift(x, lag):
    """x delayed by ``lag`` steps along the last axis with zero fill."""
    out = np.zeros_like(x)
    if lag < x.shape[-1]:
        out[..., lag:] = x[..., : x.shape[-1] - lag]
    return out


def _dependency_map(layers, kernel, steps, seed):
    """reach[i, t, j]: perturbing input j changes H_i[:, t] (shift-and-add convs, positive weights)."""
    rng = np.random.default_rng(seed)
    ws = [rng.uniform(0.5, 1.5, size=(2, 1 if i == 0 else 2, kernel)) for i in range(layers)]

    def stack(x):
        outs, h = [], x
        for i, w in enumerate(ws):
            acc = np.zeros((2, steps))
            for k in range(kernel):
                acc += w[:, :, k] @ _shift(h, k * 2**i)
            h = np.maximum(acc, 0.0)
            outs.append(h)
        return outs

    base = rng.uniform(1.0, 2.0, size=(1, steps))
    ref = stack(base)
    reach = np.zeros((layers, steps, steps), bool)
    for j in range(steps):
        x = base.copy()
        x[0, j] += 1.0
        for i, h in enumerate(stack(x)):
            reach[i, :, j] = np.any(h != ref[i], axis=0)
    return reach


class TestCriterion1GradientFidelity:
    def test_finite_differences(self):
        rng = np.random.default_rng(2024)
        started = time.perf_counter()
        worst = 0.0
        for _ in range(20):
            k, c, l, t = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 6)),
                          int(rng.integers(2, 33)))
            model = randomized_model(rng, k, c, l, t)
            x = rng.uniform(size=(3, t))
            y = rng.integers(0, 2, size=3).astype(float)
            loss = ad.bce_with_logits(forward(model, x).logits, y)
            for p in model.parameters():
                p.zero_grad()
            loss.backward()

            def f():
                return float(ad.bce_with_logits(forward(model, x).logits, y).value)

            for p in model.parameters():
                num = ad.numerical_gradient(f, p.value, step=1e-5)
                rel = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-8)
                worst = max(worst, float(rel.max()))
        elapsed = time.perf_counter() - started
        ok = worst < 1e-4 and elapsed < 60
        report(1, ok, f"20 configs, max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s")
        assert ok


class TestCriterion2ReceptiveField:
    def test_matches_perturbation_trace(self):
        started = time.perf_counter()
        checked = mismatches = 0
        for l in (2, 3, 7):
            for k in (1, 2, 3):
                reach = _dependency_map(k, l, 64, seed=l * 10 + k)
                for i in range(k):
                    for t in range(64):
                        hit = np.flatnonzero(reach[i, t])
                        expect = np.arange(receptive_field_start(t, i, l), t + 1)
                        checked += 1
                        mismatches += not np.array_equal(hit, expect)
        elapsed = time.perf_counter() - started
        ok = mismatches == 0 and elapsed < 60
        report(2, ok, f"{checked} (t, layer, l, K) cases, {mismatches} mismatches, {elapsed:.1f}s")
        assert ok


class TestCriterion3RelevanceFrequency:
    def test_matches_triple_loop(self):
        rng = np.random.default_rng(77)
        mismatches = 0
        for _ in range(100):
            steps = int(rng.integers(1, 65))
            kernel = int(rng.integers(2, 10))
            layers = int(rng.integers(1, 4))
            rl = sorted(rng.choice(layers, size=int(rng.integers(1, layers + 1)), replace=False).tolist())
            rt = [(i, int(t)) for i in rl for t in rng.choice(steps, size=int(rng.integers(1, steps + 1)), replace=False)]
            mismatches += not np.array_equal(relevance_frequency(rt, kernel, steps),
                                              triple_loop_frequency(rt, kernel, steps))
        report(3, mismatches == 0, f"100 random selections, {mismatches} mismatches")
        assert mismatches == 0


class TestCriterion4AttentionNormalization:
    def test_probability_vectors(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        negative = 0
        for n in range(1000):
            if n % 50 == 0:
                model = randomized_model(rng, int(rng.integers(1, 5)), int(rng.integers(1, 6)),
                                         int(rng.integers(2, 8)), int(rng.integers(1, 80)))
                for w in model.within_vectors + [model.across_vector]:
                    w.value = w.value * rng.uniform(0.1, 20.0)
            x = rng.uniform(size=model.config.input_length)
            tr = forward(model, x)
            for a in tr.within_weights + [tr.across_weights]:
                worst = max(worst, abs(float(a.sum()) - 1.0))
                negative += int(np.sum(a < 0))
        ok = worst <= 1e-9 and negative == 0
        report(4, ok, f"1000 passes, max |sum - 1| {worst:.1e}, {negative} negative entries")
        assert ok


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="module")
def cv_runs(cohort):
    model_cfg = HatcnConfig(2, CHANNELS, KERNEL, SERIES_LENGTH)
    out = {}
    for variant in ("hatcn", "tcn"):
        tcfg = TrainConfig(lr=LR, epochs=EPOCHS, batch_size=BATCH, variant=variant, depths=(2,))
        started = time.perf_counter()
        res = cross_validate(cohort, model_cfg, tcfg, FOLDS, REPEATS, MASTER_SEED,
                             keep_models=(variant == "hatcn"))
        out[variant] = (res, time.perf_counter() - started)
    return out


class TestCriterion5SyntheticClassification:
    def test_hatcn_and_baseline(self, cohort, cv_runs):
        res, seconds = cv_runs["hatcn"]
        s = res.depth_summary()[2]
        acc, f1 = s["accuracy"]["mean"], s["f1"]["mean"]
        _, base = run_baseline(cohort, FOLDS, MASTER_SEED)
        base_acc = base["summary"]["accuracy"]["mean"]
        ok = acc >= 0.90 and f1 >= 0.90 and base_acc >= 0.80 and seconds < 1800
        report(5, ok, (f"{len(cohort)} series, HA-TCN accuracy {acc:.4f} +/- {s['accuracy']['std']:.4f}, "
                       f"F1 {f1:.4f} over {REPEATS}x{FOLDS} CV ({seconds:.0f}s); "
                       f"margin baseline accuracy {base_acc:.4f}"))
        assert ok


class TestCriterion6ShallowAdvantage:
    def test_hatcn_beats_tcn_at_two_layers(self, cv_runs):
        ha = cv_runs["hatcn"][0]
        tcn = cv_runs["tcn"][0]
        assert [r.seed for r in ha.runs] == [r.seed for r in tcn.runs]
        a = ha.depth_summary()[2]["accuracy"]["mean"]
        b = tcn.depth_summary()[2]["accuracy"]["mean"]
        report(6, a > b, f"K=2 HA-TCN accuracy {a:.4f} vs TCN {b:.4f} (margin {a - b:+.4f})")
        assert a > b


class TestCriterion7Localization:
    def test_patient_segments_in_relaxation_window(self, cohort, cv_runs):
        res, _ = cv_runs["hatcn"]
        x = cohort.matrix()
        index = {sid: j for j, sid in enumerate(cohort.ids)}
        localized = total = 0
        curves = {0: [], 1: []}
        windows = {0: [], 1: []}
        for run in res.runs:
            model = HatcnModel(HatcnConfig(2, CHANNELS, KERNEL, SERIES_LENGTH), seed=None)
            model.load_state_dict(run.state)
            idx = [index[sid] for sid in run.test_ids]
            trace = forward(model, x[idx])
            for j, k in enumerate(idx):
                s = cohort.series[k]
                truth = cohort.truth[s.id]
                lo, hi = truth.start, min(truth.window_end, SERIES_LENGTH - 1)
                prof = explain_sample(trace, j, 0.10, 0.10, 0.10)
                curves[s.label].append(prof.freq)
                windows[s.label].append((lo, hi))
                correct = (trace.probability[j] >= 0.5) == (s.label == 1)
                if s.label != 1 or not correct:
                    continue
                mass = prof.segment_mass()
                inside = sum(int(prof.freq[max(a, lo):min(b, hi) + 1].sum()) for a, b in prof.segments)
                total += 1
                localized += mass > 0 and inside >= 0.6 * mass
        frac = localized / total
        peaks = {}
        for label in (0, 1):
            mean_curve = np.mean(curves[label], axis=0)
            w = np.array(windows[label])
            lo, hi = int(round(w[:, 0].mean())), int(round(w[:, 1].mean()))
            peak = int(np.argmax(mean_curve))
            peaks[label] = (peak, lo, hi, lo <= peak <= hi)
        ok = frac >= 0.80 and peaks[0][3] and peaks[1][3]
        report(7, ok, (f"{localized}/{total} correctly classified patient series localized ({frac:.3f}, need 0.80); "
                       f"class-mean peaks: patient {peaks[1][0]} in [{peaks[1][1]}, {peaks[1][2]}] {peaks[1][3]}, "
                       f"healthy {peaks[0][0]} in [{peaks[0][1]}, {peaks[0][2]}] {peaks[0][3]}"))
        assert ok


class TestCriterion8RT905ClosedForm:
    def test_exponential(self):
        errors = {}
        for tau in (10.0, 20.0, 40.0):
            t = np.arange(int(15 * tau))
            x = np.concatenate([np.linspace(0, 1, 30), np.ones(300), np.exp(-t / tau)])
            res = analyse(x)
            errors[tau] = abs(res.rt90_5 - tau * math.log(18)) / (tau * math.log(18))
        ok = all(e <= 0.02 for e in errors.values())
        detail = ", ".join(f"tau={t:g}: {e:.2e}" for t, e in errors.items())
        report(8, ok, f"relative error vs tau*ln18: {detail}")
        assert ok


class TestCriterion9Reproducibility:
    def test_cv_twice(self, tmp_path):
        cfg = tmp_path / "cv.cfg"
        cfg.write_text("patient_subjects = 6\nhealthy_subjects = 4\ntrials_per_subject = 3,3\n"
                       "channels = 3\nkernel = 10\nepochs = 3\nlr = 0.01\nfolds = 3\nrepeats = 2\nlayers = 1,2\n")
        codes = [
            cli_main(["cv", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path / "a")]),
            cli_main(["cv", "--config", str(cfg), "--seed", "11", "--jobs", "2", "--out", str(tmp_path / "b")]),
        ]
        a = (tmp_path / "a" / "metrics.json").read_bytes()
        b = (tmp_path / "b" / "metrics.json").read_bytes()
        ok = codes == [0, 0] and a == b and len(json.loads(a)["runs"]) == 12
        report(9, ok, f"two cv runs (serial and 2 workers), metrics.json identical: {a == b}")
        assert ok
