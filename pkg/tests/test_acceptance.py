"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Criteria 4-9 share one comparison over the shipped five-client benchmark
(three seeds) and one leave-one-out study; both are computed once per session.
"""

from __future__ import annotations

import math
import os

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pflfe import autograd as ag
from pflfe.autograd import ComputeGraph, Tensor
from pflfe.cli import DEFAULT_COMPARE, main
from pflfe.config import load_config
from pflfe.experiment import compare, domain_adaptation
from pflfe.features import VAR_FLOOR, kl_feature_divergence
from pflfe.gradcheck import gradient_suite
from pflfe.metrics import aggregate_metrics, events_to_target
from pflfe.objectives import lfe_loss, lfe_total_loss

pytestmark = pytest.mark.acceptance


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


@pytest.fixture(scope="session")
def bench_cfg():
    return load_config("bench5")


@pytest.fixture(scope="session")
def bench(bench_cfg):
    results = compare(bench_cfg, DEFAULT_COMPARE)
    by = {}
    for r in results:
        by.setdefault(r.protocol, {})[r.seed] = r
    return by


@pytest.fixture(scope="session")
def adapt_study(bench_cfg):
    return domain_adaptation(bench_cfg, ["pflfe", "fedavg"])


def _mean_final(runs):
    return float(np.mean([r.final.dice_acli for r in runs.values()]))


# 1 ---------------------------------------------------------------------------------------------

def test_criterion_01_metric_regression():
    column = [0.9661, 0.9185, 0.9317, 0.9381, 0.9300, 0.9002, 0.9661]
    acli, _, vdice = aggregate_metrics([[d] for d in column])
    ok = abs(acli - 0.9358) <= 5e-4 and abs(vdice - 0.0222) <= 5e-4
    report(1, ok, f"Dice_ACli={acli:.4f} (0.9358) VDice_ACli={vdice:.4f} (0.0222) tol 5e-4")


# 2 ---------------------------------------------------------------------------------------------

def test_criterion_02_gradient_suite():
    worst = gradient_suite(range(20), tolerance=1e-3)
    bad = {k: v for k, v in worst.items() if v > 1e-3}
    report(2, not bad, f"{len(worst) - len(bad)}/{len(worst)} cases within 1e-3 over 20 seeds; "
                       f"worst {max(worst.values()):.2e}" + (f"; failing {sorted(bad)}" if bad else ""))


# 3 ---------------------------------------------------------------------------------------------

def test_criterion_03_loss_identities():
    rng = np.random.default_rng(0)
    cos_err = scale_err = 0.0
    for _ in range(1000):
        o, t = rng.normal(size=16), rng.normal(size=16)
        cos = o @ t / (np.linalg.norm(o) * np.linalg.norm(t))
        value = lfe_loss(o, t).item()
        cos_err = max(cos_err, abs(value - (2 - 2 * cos)))
        a, b = rng.uniform(1e-2, 1e2, size=2)
        scale_err = max(scale_err, abs(lfe_loss(a * o, b * t).item() - value))

    online = Tensor(rng.normal(size=(4, 16)), requires_grad=True)
    target = Tensor(rng.normal(size=(4, 16)), requires_grad=True)
    g = ComputeGraph()
    with g:
        loss = lfe_loss(online, target)
    g.backward(loss, [online, target])
    stop_grad_exact = bool(np.all(target.grad == 0.0))

    v, tv, vp, tvp = (rng.normal(size=(4, 16)) for _ in range(4))
    swap_exact = lfe_total_loss(v, tv, vp, tvp).item() == lfe_total_loss(vp, tvp, v, tv).item()

    ok = cos_err <= 1e-10 and scale_err <= 1e-10 and stop_grad_exact and swap_exact
    report(3, ok, f"cosine err {cos_err:.1e}, scale err {scale_err:.1e}, target grad zero={stop_grad_exact}, "
                  f"swap exact={swap_exact}")


# 4 ---------------------------------------------------------------------------------------------

def test_criterion_04_communication(bench):
    details, ok = [], True
    for seed in sorted(bench["pflfe"]):
        full = bench["pflfe"][seed].ledger.total_bytes(segment="encoder")
        fc = bench["fc_pflfe"][seed].ledger.total_bytes(segment="encoder")
        dec = bench["decoupled_no_lfe"][seed].ledger.total_bytes(segment="encoder")
        local = bench["local_only"][seed].ledger.total_bytes()
        ok &= full == 2 * fc == 2 * dec > 0 and local == 0
        details.append(f"seed {seed}: {full}/{fc}/{dec}/{local}")
    report(4, ok, "bytes pflfe/fc/decoupled/local: " + "; ".join(details))


# 5 ---------------------------------------------------------------------------------------------

def test_criterion_05_personalization_ordering(bench):
    p, f, d = (_mean_final(bench[k]) for k in ("pflfe", "fedavg", "decoupled_no_lfe"))
    ok = p - f >= 0.03 and p - d >= 0.01
    report(5, ok, f"mean Dice_ACli pflfe={p:.4f} fedavg={f:.4f} (gap {p - f:+.4f}, need >= 0.03) "
                  f"decoupled_no_lfe={d:.4f} (gap {p - d:+.4f}, need >= 0.01)")


# 6 ---------------------------------------------------------------------------------------------

def test_criterion_06_fc_convergence(bench):
    wins, parts = 0, []
    for seed in sorted(bench["pflfe"]):
        e_full = events_to_target(bench["pflfe"][seed].records, 0.95)
        e_fc = events_to_target(bench["fc_pflfe"][seed].records, 0.95)
        wins += e_fc <= e_full
        parts.append(f"seed {seed}: fc {e_fc} vs pflfe {e_full} events")
    p, fc = _mean_final(bench["pflfe"]), _mean_final(bench["fc_pflfe"])
    ok = wins >= 2 and fc >= p - 0.03
    report(6, ok, "; ".join(parts) + f"; final fc={fc:.4f} pflfe={p:.4f} (need fc >= pflfe - 0.03)")


# 7 ---------------------------------------------------------------------------------------------

def test_criterion_07_drift_kl(bench):
    wins, parts = 0, []
    for seed in sorted(bench["pflfe"]):
        p = bench["pflfe"][seed].drift_kl
        d = bench["decoupled_no_lfe"][seed].drift_kl
        wins += p < d
        p_abs, d_abs = (kl_feature_divergence(bench[k][seed].features, floor=VAR_FLOOR, standardize=False)
                        for k in ("pflfe", "decoupled_no_lfe"))
        parts.append(f"seed {seed}: {p:.3f} vs {d:.3f} (absolute floor: {p_abs:.1f} vs {d_abs:.1f})")
    report(7, wins >= 2, f"drift KL pflfe vs decoupled_no_lfe, lower on {wins}/3 seeds: " + "; ".join(parts))


# 8 ---------------------------------------------------------------------------------------------

def test_criterion_08_non_iid(bench):
    deficits = [bench["local_only"][s].cross_deficit for s in sorted(bench["local_only"])]
    mean = float(np.mean(deficits))
    report(8, mean >= 0.15, f"local_only cross-client deficit mean {mean:.4f} (need >= 0.15), per seed "
                            + ", ".join(f"{d:.4f}" for d in deficits))


# 9 ---------------------------------------------------------------------------------------------

def test_criterion_09_domain_adaptation(adapt_study, bench_cfg):
    wins, parts = 0, []
    for seed in bench_cfg.seeds:
        p, f = adapt_study.mean_dice("pflfe", seed), adapt_study.mean_dice("fedavg", seed)
        wins += p > f
        parts.append(f"seed {seed}: {p:.4f} vs {f:.4f}")
    frozen = all(r.encoder_frozen for r in adapt_study.rows)
    excluded = all(r.excluded for r in adapt_study.rows)
    report(9, wins >= 2 and frozen and excluded,
           f"held-out Dice pflfe vs fedavg, better on {wins}/3 seeds ({'; '.join(parts)}); "
           f"encoder unchanged={frozen}, held-out excluded={excluded}")


# 10 --------------------------------------------------------------------------------------------

def test_criterion_10_determinism(tiny_config, tmp_path):
    outputs = {}
    for threads in (1, 4):
        for attempt in (0, 1):
            out = tmp_path / f"t{threads}_{attempt}"
            code = main(["-q", "compare", "--config", tiny_config, "--threads", str(threads), "--out", str(out)])
            assert code == 0
            outputs[(threads, attempt)] = {
                name: (out / name / "seed_3" / "metrics.csv").read_bytes() for name in DEFAULT_COMPARE
            }
    reference = outputs[(1, 0)]
    identical = all(o == reference for o in outputs.values())
    report(10, identical, f"metrics.csv byte-identical across 2 runs x threads {{1, 4}} for "
                          f"{len(DEFAULT_COMPARE)} protocols: {identical}")
