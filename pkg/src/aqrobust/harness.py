"""Evaluation harness: attack-method x epsilon sweeps over a trained model.

A sweep picks correctly classified test samples, runs each attack at each
epsilon on each sample, and aggregates success rates, perturbation norms,
constraint-resolution counts, and timing.  Numeric outputs (grid.csv,
heatmap.csv, per-sample records) are byte-deterministic for a fixed seed;
wall-clock timings go to a separate timing.csv so the stable artifacts stay
reproducible.
"""

from __future__ import annotations

import csv
import json
import platform
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attacks as atk
from . import constraints as con
from . import mdp

DEFAULT_EPSILONS = (0.1, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0)
DEFAULT_METHODS = ("fgsm", "pgd", "bim", "cw", "deepfool", "autoattack")

# Masking regimes: FIXED_MASK freezes the question mask observed on the clean
# episode and perturbs within it; EPISODIC re-runs the questionnaire against
# the perturbed answers, letting the selector react.
FIXED_MASK = "fixed"
EPISODIC = "episodic"


@dataclass
class SweepConfig:
    methods: tuple = DEFAULT_METHODS
    epsilons: tuple = DEFAULT_EPSILONS
    n_samples: int = 200
    max_questions: int = 8
    mask_regime: str = FIXED_MASK
    seed: int = 0
    attack_overrides: dict = field(default_factory=dict)

    def attack_config(self, method, epsilon):
        kw = dict(self.attack_overrides.get(method, {}))
        return atk.AttackConfig(epsilon=float(epsilon), **kw)


@dataclass
class CellResult:
    """Aggregate for one (method, epsilon) grid cell."""

    method: str
    epsilon: float
    n: int
    successes: int
    mean_l2: float            # over successful samples; 0.0 if none
    mean_linf: float
    mean_confidence_drop: float
    resolutions: dict         # category -> count
    wall_time: float
    mean_iterations: float

    @property
    def success_rate(self):
        return self.successes / self.n if self.n else 0.0


def select_correct(bundle, X, y, n_samples, max_questions, seed):
    """Indices of up to n_samples correctly classified rows, plus their masks.

    Runs greedy clean episodes; the returned masks are the column masks at
    guess time.  Sampling among the correct rows is seeded.
    """
    states, m_cols, asked, probs = mdp.run_greedy_batch(bundle, X, max_questions)
    pred = np.argmax(probs, axis=1)
    correct = np.where(pred == np.asarray(y, int))[0]
    if correct.size == 0:
        raise ValueError("the model classifies no sample correctly")
    rng = np.random.default_rng(seed)
    if correct.size > n_samples:
        correct = np.sort(rng.choice(correct, size=n_samples, replace=False))
    return correct, m_cols[correct], probs[correct]


def _sample_rng(seed, method, epsilon, index):
    """Independent, reproducible stream per (method, epsilon, sample)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(method.encode()),
                                int(round(epsilon * 1e6)), int(index)]))


def run_cell(bundle, X, y, idx, masks, method, epsilon, config,
             schema=None, colmap=None, cset=None):
    """Attack every selected sample at one (method, epsilon) cell."""
    acfg = config.attack_config(method, epsilon)
    t0 = time.perf_counter()
    successes = 0
    l2s, linfs, drops, iters = [], [], [], []
    resolutions = {con.AUTOMATIC: 0, con.ITERATIVE: 0, con.IRRECONCILABLE: 0}
    records = []
    for i, mask in zip(idx, masks):
        ctx = atk.AttackContext(bundle.guesser, X[i], mask, int(y[i]),
                                schema=schema, colmap=colmap, cset=cset)
        if epsilon == 0.0:
            probs = ctx.probs(ctx.x_full)
            r = atk.AttackResult(
                method=method, x_adv=ctx.x_full.copy(),
                state_adv=ctx.state(ctx.x_full), success=False,
                probs_clean=probs, probs_adv=probs,
                delta=np.zeros_like(ctx.x_full), delta_l2=0.0, delta_linf=0.0,
                iterations=0, wall_time=0.0, epsilon=0.0)
        else:
            r = atk.run_attack(method, ctx, acfg)
            if config.mask_regime == EPISODIC and r.success:
                # let the question selector react to the perturbed answers
                _, _, _, probs = mdp.run_greedy_batch(
                    bundle, r.x_adv[None, :], config.max_questions)
                r.probs_adv = probs[0]
                r.success = int(np.argmax(probs[0])) != int(y[i])
        if r.success:
            successes += 1
            l2s.append(r.delta_l2)
            linfs.append(r.delta_linf)
        drops.append(float(r.probs_clean[int(y[i])] - r.probs_adv[int(y[i])]))
        iters.append(r.iterations)
        if r.resolution is not None:
            resolutions[r.resolution] += 1
        records.append({
            "sample": int(i), "success": bool(r.success),
            "delta_l2": r.delta_l2, "delta_linf": r.delta_linf,
            "resolution": r.resolution,
        })
    cell = CellResult(
        method=method, epsilon=float(epsilon), n=len(idx),
        successes=successes,
        mean_l2=float(np.mean(l2s)) if l2s else 0.0,
        mean_linf=float(np.mean(linfs)) if linfs else 0.0,
        mean_confidence_drop=float(np.mean(drops)) if drops else 0.0,
        resolutions=resolutions,
        wall_time=time.perf_counter() - t0,
        mean_iterations=float(np.mean(iters)) if iters else 0.0,
    )
    return cell, records


def run_sweep(bundle, X, y, config, schema=None, colmap=None, cset=None,
              progress=None):
    """Full grid.  Returns (cells, per-sample records, selected indices)."""
    idx, masks, _ = select_correct(bundle, np.asarray(X, float), y,
                                   config.n_samples, config.max_questions,
                                   config.seed)
    cells = []
    all_records = []
    for method in config.methods:
        for eps in config.epsilons:
            cell, recs = run_cell(bundle, X, y, idx, masks, method, eps,
                                  config, schema=schema, colmap=colmap,
                                  cset=cset)
            cells.append(cell)
            for r in recs:
                r.update(method=method, epsilon=float(eps))
            all_records.extend(recs)
            if progress is not None:
                progress(cell)
    return cells, all_records, idx


def flag_inversions(cells):
    """Success-rate decreases along increasing epsilon, per method.

    Returns a list of (method, eps_lo, eps_hi, drop) for every adjacent pair
    where the rate goes down.
    """
    by_method = {}
    for c in cells:
        by_method.setdefault(c.method, []).append(c)
    out = []
    for method, seq in by_method.items():
        seq = sorted(seq, key=lambda c: c.epsilon)
        for a, b in zip(seq, seq[1:]):
            if b.success_rate < a.success_rate:
                out.append((method, a.epsilon, b.epsilon,
                            a.success_rate - b.success_rate))
    return out


def write_grid_csv(cells, path):
    """Stable per-cell aggregates (no wall-clock fields)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "epsilon", "n", "successes", "success_rate",
                    "mean_l2", "mean_linf", "mean_confidence_drop",
                    "mean_iterations", "automatic", "iterative",
                    "irreconcilable"])
        for c in cells:
            w.writerow([
                c.method, f"{c.epsilon:g}", c.n, c.successes,
                f"{c.success_rate:.6f}", f"{c.mean_l2:.6f}",
                f"{c.mean_linf:.6f}", f"{c.mean_confidence_drop:.6f}",
                f"{c.mean_iterations:.2f}",
                c.resolutions.get(con.AUTOMATIC, 0),
                c.resolutions.get(con.ITERATIVE, 0),
                c.resolutions.get(con.IRRECONCILABLE, 0),
            ])


def write_timing_csv(cells, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "epsilon", "wall_time_s"])
        for c in cells:
            w.writerow([c.method, f"{c.epsilon:g}", f"{c.wall_time:.4f}"])


def write_heatmap_csv(cells, path):
    """Methods as rows, epsilons as columns, success rates as cells."""
    methods = list(dict.fromkeys(c.method for c in cells))
    epsilons = sorted({c.epsilon for c in cells})
    rate = {(c.method, c.epsilon): c.success_rate for c in cells}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"{e:g}" for e in epsilons])
        for m in methods:
            w.writerow([m] + [f"{rate.get((m, e), float('nan')):.6f}"
                              for e in epsilons])


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "epsilon", "sample", "success", "delta_l2",
                    "delta_linf", "resolution"])
        for r in records:
            w.writerow([r["method"], f"{r['epsilon']:g}", r["sample"],
                        int(r["success"]), f"{r['delta_l2']:.6f}",
                        f"{r['delta_linf']:.6f}", r["resolution"] or ""])


def environment_stamp():
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
    }


def write_report(cells, config, path, extra=None):
    """Human-oriented JSON report with config echo and environment stamp."""
    inversions = flag_inversions(cells)
    payload = {
        "config": {
            "methods": list(config.methods),
            "epsilons": [float(e) for e in config.epsilons],
            "n_samples": config.n_samples,
            "max_questions": config.max_questions,
            "mask_regime": config.mask_regime,
            "seed": config.seed,
        },
        "environment": environment_stamp(),
        "cells": [
            {
                "method": c.method, "epsilon": c.epsilon, "n": c.n,
                "success_rate": round(c.success_rate, 6),
                "mean_l2": round(c.mean_l2, 6),
                "resolutions": c.resolutions,
            }
            for c in cells
        ],
        "inversions": [
            {"method": m, "eps_lo": lo, "eps_hi": hi, "drop": round(d, 6)}
            for m, lo, hi, d in inversions
        ],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
