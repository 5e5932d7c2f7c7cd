"""Embedded verification battery: every check pits an implementation against
an independent oracle (finite differences, exhaustive scans) and reports one
pass/fail line. Deterministic under the given seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import losses as ls
from .memory import herd_select
from .metrics import ap, pr_curve
from .model import FAKE, LINFC, REAL, Model
from .seeding import substream


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_loss_gradients(seed: int, points: int = 10, tol: float = 1e-6) -> CheckResult:
    rng = substream(seed, "verify:grad")
    worst = 0.0

    def track(err):
        nonlocal worst
        worst = max(worst, err)

    for _ in range(points):
        targets = rng.integers(0, 4, size=3)
        track(dc.grad_check(lambda z: ls.multiclass_ce(z, targets), dc.Tensor(rng.normal(size=(3, 4)))))
        ybin = rng.integers(0, 2, size=4)
        track(dc.grad_check(lambda z: ls.binary_ce(z, ybin), dc.Tensor(rng.normal(size=(4, 1)))))
        old = rng.normal(size=(3, 4))
        mask = np.ones(4, dtype=bool)
        track(dc.grad_check(lambda z: ls.kd_kl(old, z, 2.0, mask), dc.Tensor(rng.normal(size=(3, 4)))))
        feats = rng.normal(size=(3, 4))
        track(dc.grad_check(lambda z: ls.kd_feature(feats, z), dc.Tensor(rng.normal(size=(3, 4)))))
        pol = np.array([REAL, FAKE, REAL, FAKE])
        for rule in ls.AGG_RULES:
            track(
                dc.grad_check(
                    lambda z: ls.mt_class_loss(z, dc.softmax(z, 1), targets, pol, 0.3, rule),
                    dc.Tensor(rng.normal(size=(3, 4))),
                )
            )
    return CheckResult("loss-gradient-suite", worst < tol, f"max rel err {worst:.3e}")


def check_herding_oracle(seed: int, trials: int = 20) -> CheckResult:
    rng = substream(seed, "verify:herd")
    for t in range(trials):
        n = int(rng.integers(2, 13))
        f = int(rng.integers(1, 5))
        feats = rng.normal(size=(n, f))
        m = int(rng.integers(1, n + 1))
        order = herd_select(feats, m)
        mu = feats.mean(axis=0)
        chosen: list[int] = []
        total = np.zeros(f)
        for k, picked in enumerate(order, start=1):
            best, best_dist = None, None
            for i in range(n):
                if i in chosen:
                    continue
                dist = float(np.linalg.norm(mu - (total + feats[i]) / k))
                if best_dist is None or dist < best_dist:
                    best, best_dist = i, dist
            if picked != best:
                return CheckResult("herding-greedy-oracle", False, f"trial {t}: step {k} picked {picked}, oracle {best}")
            chosen.append(picked)
            total += feats[picked]
    return CheckResult("herding-greedy-oracle", True, f"{trials} seeded sets, every greedy step optimal")


def check_ap_oracle(seed: int, trials: int = 200) -> CheckResult:
    rng = substream(seed, "verify:ap")
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 13))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.uniform(0, 1, size=n), 2)
        got = ap(pr_curve(scores, labels))
        pos = int((labels == 1).sum())
        points = []
        for t in sorted(set(scores.tolist()), reverse=True):
            tp = int(((scores >= t) & (labels == 1)).sum())
            fp = int(((scores >= t) & (labels == 0)).sum())
            points.append((tp / pos, tp / (tp + fp)))
        want, prev = 0.0, 0.0
        for r, p in points:
            want += (r - prev) * p
            prev = r
        worst = max(worst, abs(got - want))
    return CheckResult("ap-threshold-oracle", worst < 1e-12, f"max abs gap {worst:.3e}")


def check_aggregation_coincidence(seed: int, trials: int = 1000) -> CheckResult:
    rng = substream(seed, "verify:agg")
    pol_pair = np.array([REAL, FAKE])
    pol_many = np.array([REAL, FAKE, REAL, FAKE, FAKE])
    worst = 0.0
    for _ in range(trials):
        logits = rng.normal(size=2)
        acts = dc.np_softmax(logits)
        base = ls.aggregate(logits, acts, pol_pair, "sumlog")
        for rule in ("sumlogit", "max"):
            other = ls.aggregate(logits, acts, pol_pair, rule)
            worst = max(worst, abs(other[0] - base[0]), abs(other[1] - base[1]))
        wide = rng.normal(size=5)
        d_f, d_r = ls.aggregate(wide, dc.np_softmax(wide), pol_many, "sumlogit")
        worst = max(worst, abs(np.exp(d_f) + np.exp(d_r) - 1.0))
    return CheckResult("aggregation-coincidence", worst < 1e-12, f"max deviation {worst:.3e}")


def check_snapshot_immutability(seed: int) -> CheckResult:
    rng = substream(seed, "verify:snap")
    model = Model.build(6, LINFC, rng, hidden=(8,), feature_width=5)
    model.head.expand(1)
    model.sessions_trained = 1
    snap = model.snapshot()
    inputs = [rng.normal(size=(3, 6)) for _ in range(10)]
    before = [snap.forward(x)[1].data.copy() for x in inputs]
    for _ in range(100):
        for p in model.parameters():
            p.data = p.data + 0.01 * rng.normal(size=p.data.shape)
    for x, prior in zip(inputs, before):
        if not np.array_equal(snap.forward(x)[1].data, prior):
            return CheckResult("snapshot-immutability", False, "snapshot output drifted")
    return CheckResult("snapshot-immutability", True, "10 inputs bitwise stable over 100 updates")


def check_metric_bruteforce(seed: int, trials: int = 50) -> CheckResult:
    from .metrics import aa, af

    rng = substream(seed, "verify:metrics")
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        b = np.full((n, n), np.nan)
        for i in range(n):
            for j in range(i, n):
                b[i, j] = rng.uniform(0, 1)
        want_aa = sum(float(b[i, n - 1]) for i in range(n)) / n
        want_af = 0.0
        for i in range(n - 1):
            row = sum(float(b[i, j]) - float(b[i, i]) for j in range(i + 1, n))
            want_af += row / (n - 1 - i)
        want_af /= n - 1
        if aa(b) != want_aa or af(b) != want_af:
            return CheckResult("metric-bruteforce", False, "AA/AF mismatch against full recomputation")
    return CheckResult("metric-bruteforce", True, f"{trials} random matrices match exactly")


def run_battery(seed: int = 0) -> list[CheckResult]:
    return [
        check_loss_gradients(seed),
        check_herding_oracle(seed),
        check_ap_oracle(seed),
        check_aggregation_coincidence(seed),
        check_snapshot_immutability(seed),
        check_metric_bruteforce(seed),
    ]


def format_report(results: list[CheckResult]) -> str:
    lines = [
        f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} {r.detail}" for r in results
    ]
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
