"""Desk-scale experiment runners.

Each ``run_*`` function takes an :class:`~fklvi.config.ExperimentConfig` and
an output directory, writes its data files plus ``metrics.csv``,
``manifest.json`` and a README, and returns a summary dict. All randomness is
derived from the master seed via :func:`~fklvi.config.replicate_seed`, so a
rerun with the same config reproduces every numeric file bit-exactly.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from fklvi import evalrpt, expfam, kgf, ntk, objectives
from fklvi.config import ExperimentConfig, replicate_seed
from fklvi.evalrpt import MetricRecord
from fklvi.expfam import Family
from fklvi.genmodels import (
    ClusteringModel,
    ToyRotationModel,
    clustering_sample_joint,
    toy_posterior_moments,
    toy_sample_joint,
)
from fklvi.net import (
    ConcatEncoder,
    DeepSetEncoder,
    OutputMap,
    SetCenteredEncoder,
    TwoLayerNet,
    linearize,
)
from fklvi.runio import RunManifest, write_readme, write_table

log = logging.getLogger(__name__)

# sub-stream tags for replicate_seed
_INIT, _TRAIN, _EVAL, _DATA, _GRID = 1, 2, 3, 4, 5

VON_MISES_MAP = OutputMap(Family.VON_MISES)


def _map(fn, jobs, workers):
    """Ordered map over jobs, optionally in a process pool."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


class _Run:
    """Output directory, manifest and metric records for one experiment run."""

    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = config
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.records = []
        self.readme = {
            "manifest.json": "run record: config, config hash, version, seeds, timestamps, files",
            "metrics.csv": "metric records (metric,value,step,replicate,seed)",
            "config.yaml": "the fully resolved configuration used for this run",
        }
        self.manifest = RunManifest(config.experiment, config.digest(), config.to_dict())
        self.manifest.write(self.out)
        config.dump(self.out / "config.yaml")

    def metric(self, name, value, step=-1, replicate=-1, seed=-1):
        self.records.append(MetricRecord(name, float(value), int(step), int(replicate), int(seed)))

    def table(self, name, columns, rows, description):
        write_table(self.out / name, columns, rows)
        self.readme[name] = description
        self.manifest.files.append(name)

    def finish(self, title, status="complete"):
        evalrpt.write_metrics(self.out / "metrics.csv", self.records)
        self.manifest.files += ["metrics.csv", "config.yaml", "README.md"]
        write_readme(self.out, title, self.readme)
        self.manifest.finalize(self.out, status)


def _toy_model(section):
    return ToyRotationModel(**section)


def toy_sampler(model):
    def sampler(rng, batch):
        draw = toy_sample_joint(model, rng, size=batch)
        return draw.latents["theta"], draw.observation
    return sampler


# --------------------------------------------------------------------------
# toy-width-sweep


def _toy_job(job):
    settings, replicate, width = job
    model = _toy_model(settings["model"])
    master = settings["seed"]
    evalset = evalrpt.make_toy_evalset(model, settings["eval"]["n"],
                                       replicate_seed(master, replicate, _EVAL))
    init_seed = replicate_seed(master, replicate, _INIT, width)
    train_seed = replicate_seed(master, replicate, _TRAIN, width)
    net = TwoLayerNet.initialize(width, 2, 2, np.random.default_rng(init_seed))
    lin = linearize(net)
    tr = settings["train"]
    cfg = objectives.ForwardKLConfig(tr["batch_size"], tr["steps"], tr["base_lr"],
                                     tr["record_every"], tr["optimizer"])
    hooks = {"nll": lambda enc: evalrpt.heldout_nll(enc, VON_MISES_MAP, evalset)}
    sampler = toy_sampler(model)
    full = objectives.train_forward_kl(net, VON_MISES_MAP, sampler, cfg,
                                       np.random.default_rng(train_seed), hooks=hooks)
    linear = objectives.train_forward_kl(lin, VON_MISES_MAP, sampler, cfg,
                                         np.random.default_rng(train_seed), hooks=hooks)
    return {"width": width, "replicate": replicate, "seed": init_seed,
            "steps": full.steps, "full": full.metrics["nll"], "lin": linear.metrics["nll"]}


def _toy_baseline(settings, replicate):
    model = _toy_model(settings["model"])
    seed = replicate_seed(settings["seed"], replicate, _EVAL)
    evalset = evalrpt.make_toy_evalset(model, settings["eval"]["n"], seed)
    return seed, evalrpt.exact_posterior_nll(model, evalset)


def run_toy_width_sweep(config: ExperimentConfig, out_dir):
    s = config.settings
    run = _Run(config, out_dir)
    widths, reps = list(s["widths"]), s["replicates"]
    jobs = [(s, r, p) for r in range(reps) for p in widths]
    results = _map(_toy_job, jobs, s["workers"])

    curve_rows, gaps = [], {p: [] for p in widths}
    for res in results:
        p, r = res["width"], res["replicate"]
        run.manifest.seeds[f"replicate{r}_width{p}"] = res["seed"]
        for kind in ("full", "lin"):
            curve_rows += [(p, r, kind, st, v) for st, v in zip(res["steps"], res[kind])]
        step = res["steps"][-1]
        gap = abs(res["full"][-1] - res["lin"][-1])
        gaps[p].append(gap)
        run.metric("nll_full", res["full"][-1], step, r, res["seed"])
        run.metric("nll_lin", res["lin"][-1], step, r, res["seed"])
        run.metric("nll_gap", gap, step, r, res["seed"])
    baseline_rows = []
    for r in range(reps):
        seed, value = _toy_baseline(s, r)
        baseline_rows.append((r, seed, value))
        run.metric("nll_exact", value, -1, r, seed)
    median_gap = {p: float(np.median(gaps[p])) for p in widths}

    run.table("curves.csv", ["width", "replicate", "model", "step", "nll"], curve_rows,
              "held-out NLL vs step for the full network (full) and its linearization (lin)")
    run.table("baseline.csv", ["replicate", "eval_seed", "nll_exact"], baseline_rows,
              "exact-posterior NLL on each replicate's evaluation set (horizontal baseline)")
    run.table("summary.csv", ["width", "median_final_gap"],
              [(p, median_gap[p]) for p in widths],
              "median over replicates of |NLL_full - NLL_lin| at the final step")
    run.finish("toy-width-sweep: full network vs linearization")
    return {"median_gap": median_gap, "gaps": gaps, "results": results,
            "baseline": [b[2] for b in baseline_rows]}


# --------------------------------------------------------------------------
# clustering

PARAMETERIZATIONS = {"mean": Family.GAUSSIAN_MEAN, "natural": Family.GAUSSIAN_NATURAL}


def clustering_model(section):
    section = dict(section)
    section.pop("observed_s", None)
    return ClusteringModel(**section)


def clustering_encoder(family: Family, d, enc, rng):
    """Separate set-centred deep-set networks for S and for Z."""
    scale = enc["scale_mean"] if family is Family.GAUSSIAN_MEAN else np.asarray(enc["scale_natural"])

    def part(blocks):
        inner = DeepSetEncoder(1, blocks * family.q, rng, hidden=enc["hidden"],
                               element_depth=enc["element_depth"], head_depth=enc["head_depth"],
                               input_scale=enc["input_scale"], output_scale=np.tile(scale, blocks))
        return SetCenteredEncoder(inner, family, blocks)

    return ConcatEncoder([part(1), part(d)])


def clustering_sampler(model):
    def sampler(rng, batch):
        draw = clustering_sample_joint(model, rng, size=batch)
        return np.concatenate([draw.latents["s"][:, None], draw.latents["z"]], axis=1), draw.observation
    return sampler


def iwbo_objective(model, family, xs, K, n_mc):
    """Negative IWBO for one observed set, in the (loss, gradient) form used by ``train``."""
    X = xs[None]
    d = len(model.mu)

    def objective(encoder, rng):
        eta = encoder.forward(X)[0].reshape(d + 1, family.q)
        bound = objectives.iwbo_estimate(model, family, eta[0], family, eta[1:], xs, K, n_mc, rng)
        g = np.concatenate([bound.grad_eta_s[None], bound.grad_eta_z], axis=0)
        return -bound.value, encoder.backprop(X, -g.reshape(1, -1))

    return objective


def _clustering_job(job):
    settings, replicate, pname, objective = job
    family = PARAMETERIZATIONS[pname]
    model = clustering_model(settings["model"])
    master, d = settings["seed"], len(model.mu)
    data_seed = replicate_seed(master, replicate, _DATA)
    observed = clustering_sample_joint(model, np.random.default_rng(data_seed),
                                       s=settings["model"]["observed_s"])
    # both objectives start from the same network for a paired comparison
    p_index = list(PARAMETERIZATIONS).index(pname)
    init_seed = replicate_seed(master, replicate, _INIT, p_index)
    encoder = clustering_encoder(family, d, settings["encoder"], np.random.default_rng(init_seed))
    train_seed = replicate_seed(master, replicate, _TRAIN, p_index, 0 if objective == "fkl" else 1)
    rng = np.random.default_rng(train_seed)
    identity = OutputMap(family, identity=True)
    if objective == "fkl":
        f = settings["fkl"]
        obj = objectives.forward_kl_objective(identity, clustering_sampler(model), f["batch_size"])
    else:
        f = settings["elbo"]
        obj = iwbo_objective(model, family, observed.observation, f["K"], f["n_mc"])
    trace = objectives.train(encoder, obj, f["steps"], f["base_lr"], rng, record_every=f["steps"])
    eta = encoder.forward(observed.observation[None])[0].reshape(d + 1, family.q)
    rec = evalrpt.clustering_metrics(family, eta[0], family, eta[1:], observed.latents["z"])
    return {"replicate": replicate, "parameterization": pname, "objective": objective,
            "seed": init_seed, "data_seed": data_seed, "record": rec, "steps": f["steps"],
            "z_hat": expfam.mode(family, eta[1:]), "z_true": observed.latents["z"],
            "final_objective": trace.objective[-1]}


def run_clustering(config: ExperimentConfig, out_dir):
    s = config.settings
    run = _Run(config, out_dir)
    pnames = list(s["parameterizations"])
    jobs = [(s, r, p, o) for p in pnames for o in ("fkl", "elbo") for r in range(s["replicates"])]
    results = _map(_clustering_job, jobs, s["workers"])

    rows, groups = [], {}
    for res in results:
        key = (res["objective"], res["parameterization"])
        groups.setdefault(key, []).append(res["record"])
        rec, r = res["record"], res["replicate"]
        run.manifest.seeds[f"replicate{r}_{key[1]}"] = res["seed"]
        run.manifest.seeds[f"replicate{r}_data"] = res["data_seed"]
        rows.append((key[0], key[1], r, res["seed"], rec.mode_s, rec.l1, rec.ordered,
                     " ".join(repr(float(v)) for v in res["z_hat"]),
                     " ".join(repr(float(v)) for v in res["z_true"])))
        for name in ("mode_s", "l1", "ordered"):
            run.metric(f"{key[0]}/{key[1]}/{name}", getattr(rec, name), res["steps"], r, res["seed"])

    table, kde_rows, summary = [], [], {}
    for (obj, pname), recs in groups.items():
        l1 = np.array([x.l1 for x in recs])
        modes = np.array([x.mode_s for x in recs])
        grid, density = evalrpt.kde_modes(modes, n_grid=s["kde"]["n_grid"])
        peak = float(grid[np.argmax(density)])
        kde_rows += [(obj, pname, g, v) for g, v in zip(grid, density)]
        ordered = float(np.mean([x.ordered for x in recs]))
        summary[(obj, pname)] = {"mean_l1": float(l1.mean()), "ordered": ordered,
                                 "median_mode_s": float(np.median(modes)), "kde_peak_s": peak}
        table.append((obj, pname, len(recs), float(l1.mean()), float(l1.std(ddof=1) / np.sqrt(l1.size)),
                      ordered, float(np.median(modes)), peak))
        run.metric(f"{obj}/{pname}/kde_peak_s", peak)
    run.table("replicates.csv", ["objective", "parameterization", "replicate", "seed", "mode_s", "l1",
                                 "ordered", "z_hat", "z_true"], rows,
              "per-replicate point estimates; z vectors are space-separated")
    run.table("table.csv", ["objective", "parameterization", "replicates", "mean_l1", "se_l1",
                            "ordered_proportion", "median_mode_s", "kde_peak_s"], table,
              "aggregate l1 distance and ordered proportion per objective and parameterization")
    run.table("kde.csv", ["objective", "parameterization", "s", "density"], kde_rows,
              "Silverman-bandwidth KDE of the per-replicate modes of q(S)")
    run.finish("clustering: forward KL vs IWBO under label switching")
    return {"summary": summary, "results": results}


# --------------------------------------------------------------------------
# ntk-diagnostics


def _drift_job(job):
    settings, replicate, width = job
    d = settings["drift"]
    model = _toy_model(settings["model"])
    seed = replicate_seed(settings["seed"], replicate, _INIT, width)
    net = TwoLayerNet.initialize(width, 2, 2, np.random.default_rng(seed))
    cfg = objectives.ForwardKLConfig(d["batch_size"], d["steps"], d["base_lr"], d["record_every"],
                                     d["optimizer"])
    trace = objectives.train_forward_kl(
        net, VON_MISES_MAP, toy_sampler(model), cfg,
        np.random.default_rng(replicate_seed(settings["seed"], replicate, _TRAIN, width)),
        keep_snapshots=True)
    grid = ntk.unit_circle_grid(settings["grid_size"])
    curve, peak = ntk.kernel_drift([net.with_params(phi) for phi in trace.snapshots], grid)
    return width, replicate, seed, trace.steps, curve, peak


def mc_oracle_check(n_pairs, n_samples, seed):
    """Closed-form limiting kernel vs its Monte Carlo estimate on random unit pairs.

    Returns rows (pair, closed, mc, se, z) for the diagonal entry; off-diagonal
    entries are exactly zero in both evaluators.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_pairs):
        a, b = rng.uniform(0.0, 2.0 * np.pi, size=2)
        x, y = np.array([np.cos(a), np.sin(a)]), np.array([np.cos(b), np.sin(b)])
        closed = ntk.limiting_ntk(x, y, 1)[0, 0]
        mc, se = ntk.limiting_ntk_mc(x, y, 1, n_samples, rng, return_se=True)
        mc, se = mc[0, 0], se[0, 0]
        rows.append((i, closed, mc, se, abs(mc - closed) / se))
    return rows


def run_ntk_diagnostics(config: ExperimentConfig, out_dir):
    s = config.settings
    run = _Run(config, out_dir)
    master, reps = s["seed"], s["replicates"]
    grid = ntk.unit_circle_grid(s["grid_size"])
    limit = ntk.KernelField.limiting(2)

    mc_rows = mc_oracle_check(s["mc"]["pairs"], s["mc"]["samples"], replicate_seed(master, 0, _GRID))
    max_z = max(r[4] for r in mc_rows)
    run.table("mc_check.csv", ["pair", "closed_form", "mc", "mc_se", "abs_z"], mc_rows,
              "limiting kernel closed form vs Monte Carlo oracle on random unit-vector pairs")

    dist_rows, dist = [], {p: [] for p in s["widths"]}
    for p in s["widths"]:
        for r in range(reps):
            seed = replicate_seed(master, r, _INIT, p)
            net = TwoLayerNet.initialize(p, 2, 2, np.random.default_rng(seed))
            value = ntk.kernel_sup_distance(ntk.KernelField.empirical(net), limit, grid)
            dist[p].append(value)
            dist_rows.append((p, r, seed, value))
            run.metric("ntk_init_distance", value, 0, r, seed)
    median_dist = {p: float(np.median(v)) for p, v in dist.items()}
    run.table("init_distance.csv", ["width", "replicate", "seed", "sup_distance"], dist_rows,
              "sup-grid Frobenius distance between the empirical NTK at init and the limit")

    jobs = [(s, r, p) for p in s["drift"]["widths"] for r in range(reps)]
    drift_rows, drift = [], {p: [] for p in s["drift"]["widths"]}
    for p, r, seed, steps, curve, peak in _map(_drift_job, jobs, s["workers"]):
        drift[p].append(peak)
        drift_rows += [(p, r, st, v) for st, v in zip(steps, curve)]
        run.metric("ntk_drift", peak, steps[-1], r, seed)
    median_drift = {p: float(np.median(v)) for p, v in drift.items()}
    run.table("drift.csv", ["width", "replicate", "step", "drift"], drift_rows,
              "sup-grid distance of the NTK during training to its value at step 0")

    eig = ntk.gram_min_eigenvalue(limit, grid)
    run.metric("gram_min_eig", eig)
    run.table("gram.csv", ["kernel", "grid_size", "min_eigenvalue"], [("limiting", len(grid), eig)],
              "minimum eigenvalue of the limiting-kernel block Gram matrix on the grid")
    run.table("summary.csv", ["quantity", "width", "median"],
              [("init_distance", p, v) for p, v in median_dist.items()]
              + [("max_drift", p, v) for p, v in median_drift.items()],
              "medians over seeds")
    run.finish("ntk-diagnostics: deterministic initialization and lazy training")
    return {"median_distance": median_dist, "median_drift": median_drift, "min_eig": eig,
            "mc_max_z": max_z, "mc_rows": mc_rows, "distances": dist, "drifts": drift}


# --------------------------------------------------------------------------
# kgf-compare


def _kgf_job(job):
    settings, replicate, width, grid, moments, limit_traj = job
    fs = settings["flow"]
    spec = kgf.FlowSpec(fs["h"], fs["T"], fs["record_stride"])
    seed = replicate_seed(settings["seed"], replicate, _INIT, width)
    net = TwoLayerNet.initialize(width, 2, 2, np.random.default_rng(seed))
    f0 = kgf.GridFunction.zeros(grid, 2)
    emp = kgf.euler_flow(f0, moments, ntk.KernelField.empirical(net), VON_MISES_MAP, spec)
    par, _ = kgf.param_flow(net, moments, grid, VON_MISES_MAP, spec)
    return {"width": width, "replicate": replicate, "seed": seed, "empirical": emp, "param": par,
            "d_param_limit": kgf.trajectory_distance(par, limit_traj),
            "d_emp_limit": kgf.trajectory_distance(emp, limit_traj),
            "d_param_emp": kgf.trajectory_distance(par, emp)}


def run_kgf_compare(config: ExperimentConfig, out_dir):
    s = config.settings
    run = _Run(config, out_dir)
    model = _toy_model(s["model"])
    grid = kgf.toy_grid(s["grid"]["n"], s["grid"]["seed"])
    moments = toy_posterior_moments(model, grid)
    f_star = kgf.optimum(VON_MISES_MAP, grid, moments)
    l_star = kgf.empirical_loss(VON_MISES_MAP, f_star.values, moments)
    limit = ntk.KernelField.limiting(2)
    fs, ly = s["flow"], s["lyapunov"]
    spec = kgf.FlowSpec(fs["h"], fs["T"], fs["record_stride"])
    f0 = kgf.GridFunction.zeros(grid, 2)

    limit_traj = kgf.euler_flow(f0, moments, limit, VON_MISES_MAP, spec)
    long_spec = kgf.FlowSpec(fs["h"], ly["T"], fs["record_stride"])
    long_traj = kgf.euler_flow(f0, moments, limit, VON_MISES_MAP, long_spec)
    report = kgf.lyapunov_report(long_traj, f_star, moments, limit, VON_MISES_MAP,
                                 tol=ly["tol"], t_min=ly["t_min"])
    stationary = kgf.euler_flow(f_star, moments, limit, VON_MISES_MAP, kgf.FlowSpec(fs["h"], 1.0, 1))
    run.metric("kgf_delta0", report.delta0)
    for t, sub, env in report.rows():
        run.metric("kgf_suboptimality", sub, int(round(t / fs["h"])))
        if np.isfinite(env):
            run.metric("kgf_envelope", env, int(round(t / fs["h"])))
    run.table("lyapunov.csv", ["t", "suboptimality", "envelope"], list(report.rows()),
              "limiting-kernel flow: L(f_t) - L(f*) and the Delta_0 / t envelope")

    jobs = [(s, r, p, grid, moments, limit_traj) for p in s["widths"] for r in range(s["replicates"])]
    results = _map(_kgf_job, jobs, s["workers"])

    loss_rows = [("limiting", 0, -1, t, v) for t, v in zip(limit_traj.times, limit_traj.losses)]
    dist_rows, final = [], {p: [] for p in s["widths"]}
    param_loss = {p: [] for p in s["widths"]}
    for res in results:
        p, r = res["width"], res["replicate"]
        for name in ("empirical", "param"):
            tr = res[name]
            loss_rows += [(name, p, r, t, v) for t, v in zip(tr.times, tr.losses)]
        for pair in ("d_param_limit", "d_emp_limit", "d_param_emp"):
            dist_rows += [(p, r, pair, t, v) for t, v in zip(limit_traj.times, res[pair])]
        final[p].append(float(res["d_param_limit"][-1]))
        param_loss[p].append(float(res["param"].losses[-1]))
        run.metric("kgf_distance", res["d_param_limit"][-1], spec.n_steps, r, res["seed"])
        run.metric("kgf_loss", res["param"].losses[-1], spec.n_steps, r, res["seed"])
    run.table("losses.csv", ["flow", "width", "replicate", "t", "loss"],
              loss_rows + [("f_star", 0, -1, 0.0, l_star)],
              "empirical loss (up to a constant) along each flow; f_star row is the optimum")
    run.table("distances.csv", ["width", "replicate", "pair", "t", "distance"], dist_rows,
              "L2(P_hat) distances between flows at recorded times")
    median_final = {p: float(np.median(v)) for p, v in final.items()}
    run.table("summary.csv", ["width", "median_final_distance", "median_final_suboptimality"],
              [(p, median_final[p], float(np.median(param_loss[p])) - l_star) for p in s["widths"]],
              "medians over seeds at the final time T")
    run.finish("kgf-compare: kernel gradient flows vs parameter flow")
    return {"report": report, "l_star": l_star, "median_final_distance": median_final,
            "param_final_loss": {p: float(np.median(v)) for p, v in param_loss.items()},
            "limit_traj": limit_traj, "long_traj": long_traj,
            "stationary_change": float(stationary.step_changes.max()), "results": results}


# --------------------------------------------------------------------------
# estimator-audit


def frozen_loss(net: TwoLayerNet, theta, x, chunk=200_000):
    """Forward-KL Monte Carlo loss on a fixed sample (common random numbers)."""
    total = 0.0
    for start in range(0, theta.shape[0], chunk):
        eta = VON_MISES_MAP.apply(net.forward(x[start : start + chunk]))
        total += float(np.sum(expfam.log_density(Family.VON_MISES, eta, theta[start : start + chunk])))
    return -total / theta.shape[0]


def finite_difference_gradient(net: TwoLayerNet, theta, x, step):
    grad = np.empty(net.n_params)
    base = net.phi.copy()
    for k in range(net.n_params):
        net.phi[k] = base[k] + step
        up = frozen_loss(net, theta, x)
        net.phi[k] = base[k] - step
        down = frozen_loss(net, theta, x)
        net.phi[k] = base[k]
        grad[k] = (up - down) / (2.0 * step)
    return grad


def averaged_estimates(net, sampler, batch_size, n_estimates, rng):
    """Mean and elementwise standard error of ``n_estimates`` gradient estimates."""
    total = np.zeros(net.n_params)
    total_sq = np.zeros(net.n_params)
    for _ in range(n_estimates):
        g = objectives.fkl_gradient_estimate(net, VON_MISES_MAP, sampler, batch_size, rng)
        total += g
        total_sq += g * g
    mean = total / n_estimates
    var = (total_sq - n_estimates * mean * mean) / (n_estimates - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / n_estimates)


def audit_network(width, seed):
    """A two-layer net away from initialization: both layers random, so every
    coordinate of the gradient is generically nonzero."""
    rng = np.random.default_rng(seed)
    net = TwoLayerNet.initialize(width, 2, 2, rng)
    net.A[:] = rng.standard_normal(net.A.shape)
    return net


def run_estimator_audit(config: ExperimentConfig, out_dir):
    s = config.settings
    run = _Run(config, out_dir)
    model = _toy_model(s["model"])
    master = s["seed"]
    net_seed = replicate_seed(master, 0, _INIT)
    net = audit_network(s["width"], net_seed)
    run.manifest.seeds["network"] = net_seed

    oracle_seed = replicate_seed(master, 0, _DATA)
    frozen = toy_sample_joint(model, np.random.default_rng(oracle_seed), size=s["oracle_samples"])
    oracle = finite_difference_gradient(net, frozen.latents["theta"], frozen.observation, s["fd_step"])
    del frozen

    sampler = toy_sampler(model)
    estimates = {}
    for b in s["batch_sizes"]:
        seed = replicate_seed(master, 0, _TRAIN, b)
        run.manifest.seeds[f"estimates_B{b}"] = seed
        estimates[b] = averaged_estimates(net, sampler, b, s["n_estimates"], np.random.default_rng(seed))

    b0 = s["batch_sizes"][0]
    mean, se = estimates[b0]
    active = np.abs(oracle) > s["threshold"]
    within = np.abs(mean - oracle) <= s["z"] * se
    pass_fraction = float(np.mean(within[active])) if active.any() else float("nan")
    rel_err = np.abs(mean - oracle) / np.maximum(np.abs(oracle), 1e-300)

    columns = ["coord", "oracle", "active", "rel_err", "pass"]
    cols = [np.arange(net.n_params), oracle, active.astype(int), rel_err, within.astype(int)]
    for b in s["batch_sizes"]:
        columns += [f"mean_B{b}", f"se_B{b}"]
        cols += [estimates[b][0], estimates[b][1]]
    rows = list(zip(*cols))
    run.table("audit.csv", columns, rows,
              f"per-coordinate comparison of averaged estimates with the finite-difference "
              f"oracle; pass uses batch size {b0}")

    agreement = {}
    for b in s["batch_sizes"][1:]:
        m2, se2 = estimates[b]
        ok = np.abs(mean - m2) <= s["z"] * np.sqrt(se * se + se2 * se2)
        agreement[b] = float(np.mean(ok[active])) if active.any() else float("nan")
    run.metric("audit_pass_fraction", pass_fraction, replicate=0, seed=net_seed)
    run.metric("audit_n_coords", int(active.sum()), replicate=0, seed=net_seed)
    run.table("summary.csv", ["quantity", "value"],
              [("pass_fraction", pass_fraction), ("active_coords", int(active.sum())),
               ("median_rel_err", float(np.median(rel_err[active])) if active.any() else float("nan"))]
              + [(f"batch_agreement_B{b}", v) for b, v in agreement.items()],
              "audit summary")
    run.finish("estimator-audit: unbiasedness of the forward-KL gradient estimator")
    return {"pass_fraction": pass_fraction, "active": int(active.sum()), "oracle": oracle,
            "estimates": estimates, "agreement": agreement, "rel_err": rel_err}
