"""Experiment drivers behind ``lab run``.

Each driver takes a validated :class:`ExperimentConfig` and an output
directory, writes its CSV/JSON/SVG files there and returns an
:class:`Outcome`.  Substream layout: 0 data, 1 network init, 2 training or
simulation, 3+ secondary runs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, escape
from .config import ExperimentConfig
from .errors import DivergedError, EscapeNotObservedError
from .models import (binary_teacher_generate, double_well, linreg_generate, linreg_model, mlp_model,
                     nd_double_well, nd_quadratic_well)
from .numerics import RngStream, histogram, ks_distance, loglog_fit, sym_eig
from .plotting import ReferenceLine, Series, plot
from .sde import potential_path, thin
from .sgd import SgdConfig, run_sgd


@dataclass
class Outcome:
    metrics: dict
    headline: dict  # {"name", "value", "theory"}
    files: list = field(default_factory=list)
    theta: np.ndarray | None = None  # parameter vector the headline refers to


def theta_hash(theta) -> str | None:
    """SHA-256 of the little-endian float64 bytes of ``theta``."""
    if theta is None:
        return None
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()


def clean(v):
    """Plain JSON value: numpy scalars and arrays unwrapped, non-finite floats as null."""
    if isinstance(v, dict):
        return {str(k): clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [clean(x) for x in v]
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _dataset(cfg: ExperimentConfig, rng: RngStream):
    m = cfg.model
    if m.kind == "mlp":
        return binary_teacher_generate(m.d, m.n, rng.substream(0))
    return linreg_generate(m.d, m.n, rng.substream(0))


def _loss_model(cfg: ExperimentConfig, rng: RngStream):
    data = _dataset(cfg, rng)
    if cfg.model.kind == "mlp":
        widths = [cfg.model.d, *cfg.model.hidden, 1]
        return mlp_model(widths, cfg.model.activation, data, rng.substream(1))
    model = linreg_model(data)
    return model, np.zeros(model.param_dim)


def _sgd_config(cfg: ExperimentConfig, rng: RngStream, steps=None, record_every=None,
                record_noise=False) -> SgdConfig:
    o = cfg.optimizer
    return SgdConfig(eta=o.eta, batch_size=o.batch_size, steps=steps or o.steps,
                     record_every=record_every or o.record_every, rng=rng, record_noise=record_noise)


# ---------------------------------------------------------------- drivers

def gen_data(cfg: ExperimentConfig, out: Path) -> Outcome:
    data = _dataset(cfg, RngStream(cfg.seed))
    path = out / "dataset.csv"
    data.to_csv(path)
    mean = float(np.mean(data.labels))
    return Outcome(metrics={"n": data.n_samples, "d": data.dim, "label_mean": mean,
                            "label_var": float(np.var(data.labels))},
                   headline={"name": "label_mean", "value": mean, "theory": None},
                   files=[path.name])


def decoupling(cfg: ExperimentConfig, out: Path) -> Outcome:
    rng = RngStream(cfg.seed)
    model, theta = _loss_model(cfg, rng)
    checkpoints = sorted(set(cfg.analysis.checkpoints))
    rows, files, done = [], [], 0
    report = None
    for i, k in enumerate(checkpoints):
        if k > done:
            traj = run_sgd(model, _sgd_config(cfg, rng.substream(2).substream(i), steps=k - done,
                                              record_every=k - done), theta)
            if traj.diverged:
                raise DivergedError(f"training diverged before checkpoint {k}")
            theta, done = traj.final_params, k
        report = analysis.decoupling_check(theta, model, groups=cfg.analysis.groups)
        for tag, ev in (("exact", report.exact_eigenvalues), ("decoupled", report.decoupled_eigenvalues)):
            name = f"spectrum_{tag}_k{k}.csv"
            analysis.spectrum_to_csv(ev, out / name)
            files.append(name)
        rows.append((k, report.loss, report.overlap))
    _write_rows(out / "overlap.csv", ["k", "loss", "overlap"], rows)
    files.append("overlap.csv")

    # eigenvalue histograms at the last checkpoint, on a log10 axis
    pos_e = report.exact_eigenvalues[report.exact_eigenvalues > 0]
    pos_d = report.decoupled_eigenvalues[report.decoupled_eigenvalues > 0]
    lo = math.floor(np.log10(min(pos_e.min(), pos_d.min())))
    hi = math.ceil(np.log10(max(pos_e.max(), pos_d.max())))
    edges = np.linspace(lo, hi, 41)
    he = histogram(np.log10(pos_e), edges).counts
    hd = histogram(np.log10(pos_d), edges).counts
    centers = 0.5 * (edges[1:] + edges[:-1])
    _write_rows(out / "eigen_histogram.csv", ["log10_eigenvalue", "exact_count", "decoupled_count"],
                [(float(c), int(a), int(b)) for c, a, b in zip(centers, he, hd)])
    plot([Series(centers, he, "exact"), Series(centers, hd, "decoupled")], "histogram",
         out / "eigen_histogram.svg", bin_edges=edges, title=f"eigenvalues at k={checkpoints[-1]}",
         xlabel="log10 eigenvalue", ylabel="count")
    files += ["eigen_histogram.csv", "eigen_histogram.svg"]
    worst = max(r[2] for r in rows)
    return Outcome(metrics={"checkpoints": checkpoints, "overlap": [r[2] for r in rows],
                            "loss": [r[1] for r in rows], "max_overlap": worst,
                            "space": report.space, "groups": cfg.analysis.groups},
                   headline={"name": "max_overlap", "value": worst, "theory": 0.0}, files=files,
                   theta=theta)


def noise_scaling(cfg: ExperimentConfig, out: Path) -> Outcome:
    rng = RngStream(cfg.seed)
    model, theta = _loss_model(cfg, rng)
    steps = cfg.optimizer.steps
    every = max(1, steps // cfg.analysis.noise_points)
    traj = run_sgd(model, _sgd_config(cfg, rng.substream(2), record_every=every, record_noise=True), theta)
    traj.to_csv(out / "trajectory.csv")
    files = ["trajectory.csv"]
    if traj.diverged:
        raise DivergedError("training diverged; partial trajectory written")
    start = int(len(traj) * (1.0 - cfg.analysis.final_fraction))
    loss, noise = traj.losses[start:], traj.noise_strengths[start:]
    keep = (loss > 0) & (noise > 0)
    slope, intercept, r2 = loglog_fit(loss[keep], noise[keep])
    pos = (traj.losses > 0) & (traj.noise_strengths > 0)
    x, y = traj.losses[pos], traj.noise_strengths[pos]
    plot(Series(x, y, "SGD"), "loglog-scatter", out / "noise_vs_loss.svg",
         reference=ReferenceLine(1.0, float(loss[keep][-1]), float(noise[keep][-1]), "slope 1"),
         title="noise strength against loss", xlabel="loss", ylabel="noise strength")
    files.append("noise_vs_loss.svg")
    return Outcome(metrics={"slope": slope, "intercept": intercept, "r2": r2,
                            "final_loss": float(traj.losses[-1]), "points_fitted": int(keep.sum())},
                   headline={"name": "slope", "value": slope, "theory": 1.0}, files=files,
                   theta=traj.final_params)


def stationary_fit(cfg: ExperimentConfig, out: Path) -> Outcome:
    rng = RngStream(cfg.seed)
    model, _ = _loss_model(cfg, rng)
    center, loss_min = model.minimum()
    h_star = float(sym_eig(model.hessian()).eigenvalues[0])
    a, o = cfg.analysis, cfg.optimizer
    traj = run_sgd(model, _sgd_config(cfg, rng.substream(2)), center)
    if traj.diverged:
        raise DivergedError("SGD diverged")
    samples = thin(traj.params[1:, 0], burn_in=a.burn_in, every=1)
    fit = escape.fit_power_law(samples, model, bin_count=a.bins, quantile=a.quantile,
                               min_count=a.min_count)
    phi = escape.theory_phi(o.batch_size, o.eta, h_star)
    fit.to_json(out / "fit.json", cfg.model_dump())
    hist = histogram(samples, fit.bin_edges)
    loss_c = model.losses_at(hist.centers[:, None])
    dens = hist.counts / hist.widths
    _write_rows(out / "histogram.csv", ["theta", "loss", "count", "density"],
                [(float(c), float(l), int(n), float(d))
                 for c, l, n, d in zip(hist.centers, loss_c, hist.counts, dens)])
    used = hist.counts >= a.min_count
    plot(Series(loss_c[used], dens[used], "SGD samples"), "loglog-scatter", out / "histogram.svg",
         reference=ReferenceLine(-phi, float(loss_c[used][0]), float(dens[used][0]),
                                 f"theory slope {-phi:.3g}"),
         title="stationary density against loss", xlabel="loss", ylabel="count / bin width")
    return Outcome(metrics={"phi_hat": fit.phi_hat, "ci": list(fit.ci), "phi_theory": phi,
                            "h_star": h_star, "loss_min": loss_min, "samples": len(samples),
                            "bins_used": fit.bins_used},
                   headline={"name": "phi_hat", "value": fit.phi_hat, "theory": phi},
                   files=["fit.json", "histogram.csv", "histogram.svg"], theta=center)


def fpt(cfg: ExperimentConfig, out: Path) -> Outcome:
    rng = RngStream(cfg.seed)
    model, _ = _loss_model(cfg, rng)
    center, loss_min = model.minimum()
    a = cfg.analysis
    eff = analysis.effective_dimension(sym_eig(model.hessian()), a.eps_rel, a.eps_abs)
    h_star = float(np.mean(eff.kept))
    if cfg.optimizer is not None:
        eta, batch = cfg.optimizer.eta, cfg.optimizer.batch_size
        make = lambda i: _sgd_config(cfg, rng.substream(2).substream(i))  # noqa: E731
    else:
        s = cfg.sde
        eta, batch = s.eta, s.batch_size
        make = lambda i: escape.SdeEscapeConfig(  # noqa: E731
            s.process, s.dt, s.steps, rng.substream(2).substream(i), eta=s.eta, batch_size=s.batch_size,
            diffusion=s.diffusion, hessian_ref=model.hessian(), h_star=h_star)
    results = [escape.first_passage_times(model, make(i), center, c, a.runs, loss_min=loss_min,
                                          require_passage=False)
               for i, c in enumerate(a.thresholds)]
    rows = [(i, r.threshold_ratio, float(t), int(cen))
            for r in results for i, (t, cen) in enumerate(zip(r.times, r.censored))]
    _write_rows(out / "fpt.csv", ["run_id", "c", "t_p", "censored"], rows)
    summary = [r.summary() for r in results]
    _write_rows(out / "fpt_summary.csv", ["c", "runs", "censored", "mean_t_p", "stderr", "median_t_p"],
                [(s["c"], s["runs"], s["censored"], s["mean_t_p"], s["stderr"], s["median_t_p"])
                 for s in summary])
    files = ["fpt.csv", "fpt_summary.csv"]
    theory = batch / (eta * h_star) + 1.0 - eff.n / 2.0
    observed = [r for r in results if r.censored_count < r.runs]
    metrics = {"thresholds": list(a.thresholds), "summary": summary, "slope_theory": theory,
               "h_star": h_star, "n": eff.n, "eps_rel": a.eps_rel, "eps_abs": a.eps_abs,
               "loss_min": loss_min, "escape_model": "exponential (kappa = 1 / mean t_p)"}
    if len(observed) >= 2:
        slope, _, r2 = escape.passage_slope(observed)
        metrics.update(slope=slope, r2=r2)
        plot(Series([r.threshold_ratio for r in observed], [r.mean for r in observed], "mean t_p"),
             "loglog-scatter", out / "fpt.svg",
             reference=ReferenceLine(theory, observed[0].threshold_ratio, observed[0].mean,
                                     f"theory slope {theory:.3g}"),
             title="mean first-passage time", xlabel="c = L_threshold / L_min", ylabel="mean t_p")
        files.append("fpt.svg")
    outcome = Outcome(metrics=metrics,
                      headline={"name": "slope", "value": metrics.get("slope"), "theory": theory},
                      files=files, theta=center)
    if len(observed) < len(results):
        missing = [r.threshold_ratio for r in results if r.censored_count == r.runs]
        err = EscapeNotObservedError(f"no passages observed for c in {missing}")
        err.outcome = outcome
        raise err
    return outcome


def _escape_rates(cfg: ExperimentConfig, out: Path, build, rate_fn, exponent) -> Outcome:
    rng = RngStream(cfg.seed)
    s, a = cfg.sde, cfg.analysis
    rows, fpt_rows = [], []
    for i, c in enumerate(a.thresholds):
        pot = build(cfg.model.a * cfg.model.w ** 4 / (c - 1.0))
        geom = escape.EscapeGeometry.from_potential(pot)
        hess = pot.minimum().hessian
        conf = escape.SdeEscapeConfig(s.process, s.dt, s.steps, rng.substream(2).substream(i), eta=s.eta,
                                      batch_size=s.batch_size, diffusion=s.diffusion,
                                      hessian_ref=hess if pot.param_dim > 1 else None,
                                      h_star=geom.h_star)
        res = escape.first_passage_times(pot, conf, pot.minimum().location, geom.ratio, a.runs,
                                         target="cross")
        fpt_rows += [(j, geom.ratio, float(t), int(cen))
                     for j, (t, cen) in enumerate(zip(res.times, res.censored))]
        rate = escape.empirical_escape_rate(res)
        theory = rate_fn(geom, s.batch_size, s.eta)
        rows.append((geom.ratio, rate.rate, rate.stderr, theory, rate.rate / theory, rate.passages))
    _write_rows(out / "fpt.csv", ["run_id", "c", "t_p", "censored"], fpt_rows)
    _write_rows(out / "rates.csv", ["c", "kappa_hat", "stderr", "kappa_theory", "ratio", "passages"], rows)
    files = ["fpt.csv", "rates.csv"]
    h_star = 8.0 * cfg.model.a * cfg.model.w ** 2
    expo = exponent(s.batch_size / (s.eta * h_star))
    metrics = {"c": [r[0] for r in rows], "kappa_hat": [r[1] for r in rows],
               "kappa_theory": [r[3] for r in rows], "ratio": [r[4] for r in rows],
               "exponent_theory": expo, "time": "t = tau / L(theta*)", "target": "cross to mirrored minimum",
               "escape_model": "exponential (kappa = 1 / mean t_p)"}
    if len(rows) >= 2:
        slope, _, _ = loglog_fit([r[0] for r in rows], [r[1] for r in rows])
        metrics["exponent_hat"] = -slope
    plot([Series([r[0] for r in rows], [r[1] for r in rows], "simulation"),
          Series([r[0] for r in rows], [r[3] for r in rows], "formula")], "loglog-scatter",
         out / "rates.svg", reference=ReferenceLine(-expo, rows[0][0], rows[0][3], f"slope {-expo:.3g}"),
         title="escape rate", xlabel="c = L_saddle / L_min", ylabel="rate per unit t")
    files.append("rates.svg")
    worst = max(rows, key=lambda r: abs(math.log(r[4])))[4]
    return Outcome(metrics=metrics, headline={"name": "rate_ratio", "value": worst, "theory": 1.0},
                   files=files, theta=pot.minimum().location)


def kramers_1d(cfg: ExperimentConfig, out: Path) -> Outcome:
    m = cfg.model
    return _escape_rates(cfg, out, lambda off: double_well(m.a, m.w, off), escape.kramers_rate_1d,
                         lambda r: 0.5 + r)


def langer_nd(cfg: ExperimentConfig, out: Path) -> Outcome:
    m = cfg.model
    dim = len(m.transverse) + 1
    return _escape_rates(cfg, out, lambda off: nd_double_well(m.axis, m.a, m.w, off, m.transverse),
                         escape.langer_rate_multi, lambda r: r + 1.0 - dim / 2.0)


def sde_consistency(cfg: ExperimentConfig, out: Path) -> Outcome:
    rng = RngStream(cfg.seed)
    s, a, m = cfg.sde, cfg.analysis, cfg.model
    pot = nd_quadratic_well([m.curvature], m.offset)
    factor = math.sqrt(2.0 * s.eta / s.batch_size * m.curvature)
    common = dict(factor=factor, dt=s.dt, steps=s.steps, theta0=[0.0], record_every=s.record_every)
    t_run = potential_path(pot, drift_power=0.0, noise_power=0.5, rng=rng.substream(2), **common)
    tau_run = potential_path(pot, drift_power=1.0, noise_power=0.0, rng=rng.substream(3), **common)
    for name, run in (("t-process", t_run), ("tau-process", tau_run)):
        if run["status"] != "done":
            raise DivergedError(f"{name} stopped early: {run['status']}")
    t_samples = thin(t_run["records"][:, 0], a.burn_in, a.thin_every)
    tau_samples = thin(tau_run["records"][:, 0], a.burn_in, a.thin_every)
    weights = 1.0 / pot.loss(tau_samples[:, None])
    ks = ks_distance(t_samples, tau_samples, weights_b=weights)
    ks_raw = ks_distance(t_samples, tau_samples)
    lo, hi = np.quantile(t_samples, [0.005, 0.995])
    edges = np.linspace(lo, hi, a.bins + 1)
    ht = histogram(t_samples, edges)
    hw = histogram(tau_samples, edges, weights=weights)
    dt_ = ht.counts / (len(t_samples) * ht.widths)
    dw = hw.counts / (weights.sum() * hw.widths)
    _write_rows(out / "histograms.csv", ["theta", "t_density", "tau_reweighted_density"],
                [(float(c), float(x), float(y)) for c, x, y in zip(ht.centers, dt_, dw)])
    plot([Series(ht.centers, dt_, "t-process"), Series(ht.centers, dw, "tau-process / L")], "histogram",
         out / "histograms.svg", bin_edges=edges, title="time-change reweighting",
         xlabel="theta", ylabel="density")
    return Outcome(metrics={"ks_reweighted": ks, "ks_unweighted": ks_raw,
                            "samples_t": len(t_samples), "samples_tau": len(tau_samples),
                            "burn_in": a.burn_in, "thin_every": a.thin_every},
                   headline={"name": "ks_reweighted", "value": ks, "theory": 0.0},
                   files=["histograms.csv", "histograms.svg"], theta=pot.minimum().location)


DRIVERS = {
    "gen-data": gen_data,
    "decoupling": decoupling,
    "noise-scaling": noise_scaling,
    "stationary-fit": stationary_fit,
    "fpt": fpt,
    "kramers-1d": kramers_1d,
    "langer-nd": langer_nd,
    "sde-consistency": sde_consistency,
}
