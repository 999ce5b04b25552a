"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected by conftest and printed in the terminal summary;
run with ``-s`` to also see them inline.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

import corpus
from charform.charsolve import detect_caustics, group_caustics, solve
from charform.cli import main
from charform.diagnose import FUNCTION, FUNCTIONAL, ReconstructedField, action_integral, closure_report, reconstruct_field
from charform.expr import eval_with_gradient, evaluate, parse
from charform.forms import DifferentialForm, Grid, commutator, exterior_derivative, line_integral
from polys import poly_text, polynomials


def report(record, label, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    record(label, ok, detail)
    assert ok, detail


def test_1_advection_oracle(acceptance):
    start = time.perf_counter()
    fan = corpus.fan_of(corpus.advection(rays=201, h=0.01))
    grid = Grid.from_bounds((0.0, 0.0), (1.0, 2.0), (64, 64))
    field = reconstruct_field(fan, grid)
    elapsed = time.perf_counter() - start
    ray_err = float(np.max(np.abs(fan.u - np.sin(fan.x[..., 1] - fan.x[..., 0]))))
    t, x = grid.mesh()
    grid_err = float(np.max(np.abs(field.u - np.sin(x - t))[field.valid]))
    ok = ray_err < 1e-8 and grid_err < 1e-4 and elapsed < 5.0 and field.valid.all()
    report(acceptance, "1 advection oracle", ok,
           f"ray err {ray_err:.2e} (<1e-8), grid err {grid_err:.2e} (<1e-4), {elapsed:.2f}s (<5s)")


def test_2_residual_closure(acceptance):
    worst = {}
    for name, prob in corpus.corpus(h=0.01).items():
        worst[name] = max(f.max_residual() for f in solve(prob))
    coarse = corpus.fan_of(corpus.oscillator(h=0.02)).max_residual()
    fine = corpus.fan_of(corpus.oscillator(h=0.01)).max_residual()
    ratio = coarse / fine
    # advection, eikonal and free streaming conserve F to roundoff for any h;
    # the oscillator is the corpus member whose residual is integration error
    ok = max(worst.values()) < 1e-8 and ratio >= 12
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(acceptance, "2 F residual", ok, f"max |F| {detail} (<1e-8); oscillator h 0.02->0.01 ratio {ratio:.1f} (>=12)")


def test_3_canonical_conservation(acceptance):
    fan = corpus.fan_of(corpus.oscillator(h=0.01, periods=10, rays=3))
    x, p = fan.x[..., 1], fan.p[..., 1]
    H = 0.5 * (x**2 + p**2)
    drift = float(np.max(np.abs(H - H[:, :1])))
    report(acceptance, "3 oscillator energy", drift < 1e-7, f"|dE| {drift:.2e} over 10 periods (<1e-7)")


def test_4_caustics(acceptance):
    fan = corpus.fan_of(corpus.quadratic(rays=101, h=0.01))
    groups = group_caustics(detect_caustics(fan), fan.h)
    t_star = groups[0]["s_star"] if len(groups) == 1 else float("nan")
    controls = [len(detect_caustics(corpus.fan_of(p))) for p in (corpus.advection(), corpus.quadratic(sign=+1))]
    ok = len(groups) == 1 and abs(t_star - 0.5) <= 0.005 and controls == [0, 0]
    report(acceptance, "4 caustics", ok, f"t* {t_star:.5f} (0.5 +- 1%), control caustics {controls} (none)")


def test_5_commutator(acceptance):
    grid = Grid.from_bounds((-1, -1), (1, 1), (33, 33))
    rot = commutator(DifferentialForm.one_form(["-x2", "x1"]), grid)
    x1, x2 = grid.mesh()
    rot_verdict = closure_report(ReconstructedField.from_arrays(grid, [-x2, x1])).classification
    exact = commutator(exterior_derivative(DifferentialForm.zero_form("sin(x1)*cos(x2)", 2)), grid)
    exact_verdict = closure_report(ReconstructedField.from_arrays(grid, list(exact_samples(grid)))).classification
    ratios = sampled_ratios()
    ok = (
        abs(rot.max_abs - 2) <= 1e-6 and rot_verdict == FUNCTIONAL
        and exact.max_abs < 1e-12 and exact_verdict == FUNCTION and min(ratios) >= 3
    )
    report(acceptance, "5 commutator", ok,
           f"rotational {rot.max_abs:.9f} {rot_verdict}; exact {exact.max_abs:.1e} {exact_verdict}; "
           f"refinement ratios {', '.join(f'{r:.2f}' for r in ratios)} (>=3)")


def exact_samples(grid):
    df = exterior_derivative(DifferentialForm.zero_form("sin(x1)*cos(x2)", 2)).sample(grid)
    return df[(0,)], df[(1,)]


def sampled_ratios():
    """Pre-caustic quadratic HJ momenta sampled on refining grids."""
    res = []
    for count in (17, 33, 65, 129):
        grid = Grid.from_bounds((0.0, -1.0), (0.25, 1.0), (count, count))
        t, x = grid.mesh()
        theta = DifferentialForm.from_samples(grid, 1, {(0,): -2 * x**2 / (1 - 2 * t) ** 2, (1,): -2 * x / (1 - 2 * t)})
        res.append(commutator(theta).max_abs)
    return [a / b for a, b in zip(res, res[1:])]


def random_coefficient(rng, n):
    atoms = ["x1*x2", "sin(x1)", "exp(x2/2)", "x3^2", "cos(x4)*x1", "x2*x3*x4"]
    usable = [a for a in atoms if all(f"x{k}" not in a for k in range(n + 1, 5))]
    return " + ".join(f"{rng.uniform(-2, 2)!r}*({a})" for a in rng.choice(usable, 3))


def test_6_form_algebra(acceptance):
    """d(d w) for random 0-forms (n = 2..4) and 1-forms (n = 3, 4; d of a 2-form on R^2 is undefined)."""
    rng = np.random.default_rng(2024)
    worst_dd = 0.0
    for n in (2, 3, 4):
        for degree in (0, 1):
            if degree + 2 > n:
                continue
            for _ in range(10):
                if degree == 0:
                    form = DifferentialForm.zero_form(random_coefficient(rng, n), n)
                else:
                    form = DifferentialForm.one_form([random_coefficient(rng, n) for _ in range(n)])
                dd = exterior_derivative(exterior_derivative(form))
                worst_dd = max([worst_dd] + [abs(v) for v in dd.at(rng.uniform(-1, 1, n)).values()])
    t = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    loop = np.stack([np.cos(t), np.sin(t)], axis=1)
    exact = abs(line_integral(exterior_derivative(DifferentialForm.zero_form("x1*x2", 2)), loop, closed=True))
    rot = line_integral(DifferentialForm.one_form(["-x2", "x1"]), loop, closed=True)
    ok = worst_dd < 1e-10 and exact < 1e-6 and abs(rot - 2 * math.pi) <= 1e-3
    report(acceptance, "6 form algebra", ok,
           f"max |dd| {worst_dd:.1e} (<1e-10); exact circulation {exact:.1e} (<1e-6); "
           f"rotational circulation - 2pi {rot - 2 * math.pi:.2e} (+-1e-3)")


def test_7_poincare_action(acceptance):
    fan = corpus.fan_of(corpus.oscillator(h=0.01, periods=1))
    du, action = action_integral(fan)
    err = float(np.max(np.abs(du - action)))
    report(acceptance, "7 action identity", err < 1e-6, f"|u(T)-u(0) - int L dt| {err:.2e} (<1e-6)")


AD_WORST = []


@settings(max_examples=100, deadline=None, derandomize=True)
@given(polynomials(), st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def _ad_instance(poly, point):
    names, terms = poly
    e = parse(poly_text(names, terms))
    b = dict(zip(names, point))
    _, grad = eval_with_gradient(e, b, names)
    h = 1e-6
    worst = 0.0
    for i, name in enumerate(names):
        up = evaluate(e, dict(b, **{name: b[name] + h})).value
        dn = evaluate(e, dict(b, **{name: b[name] - h})).value
        worst = max(worst, abs(grad[i] - (up - dn) / (2 * h)) / (1 + abs(grad[i])))
    AD_WORST.append(worst)


def test_8_ad_correctness(acceptance):
    AD_WORST.clear()
    _ad_instance()
    worst = max(AD_WORST)
    ok = len(AD_WORST) >= 100 and worst < 1e-6
    report(acceptance, "8 AD vs central difference", ok, f"{len(AD_WORST)} polynomials, worst rel err {worst:.1e} (<1e-6)")


def test_9_determinism(acceptance, tmp_path, capsys):
    raw = yaml.safe_load(open(corpus_config("advection")).read())
    raw["solver"]["rays"] = [601]
    cfg = tmp_path / "adv.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    outs = []
    for i, threads in enumerate((1, 1, 2, 4)):
        out = tmp_path / f"run{i}"
        code = main(["solve", "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
        assert code == 0
        outs.append(tuple((out / f).read_bytes() for f in ("fan.csv", "summary.json")))
    capsys.readouterr()
    ok = len(set(outs)) == 1 and json.loads(outs[0][1])["caustics"] == []
    report(acceptance, "9 determinism", ok, "fan.csv and summary.json identical across 4 runs (threads 1, 1, 2, 4)")


def corpus_config(name):
    return Path(__file__).resolve().parent.parent / "configs" / f"{name}.yaml"
