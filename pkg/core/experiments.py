# core/experiments.py
"""Experiment orchestration behind the CLI subcommands.

Every run directory holds:
  run.yaml          model metadata needed to rebuild the bank/embedding
  dataset.csv       the training data
  bank.json         the sampled frequencies
  checkpoint.json   the final ControlPath
  train_log.csv     step,loss,grad_sq_norm,v_norm,v_dist_init,eta
  train_lambda.csv  step,lambda_min_traj (only when lambda_min was tracked)
  pl_report.txt     key = value PL sidecar
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml
from loguru import logger

from core.config import ExperimentConfig
from core.data import Dataset, load_dataset, save_dataset, synth_dataset
from core.diagnostics import (PLReport, gram_matrix, init_condition, lambda_bounds, trajectory_bounds,
                              sweep_init_condition, trajectory_lambda_min, verify_pl_along_run,
                              write_report)
from core.embedding import build_embedding, min_q_for_separation
from core.errors import TrainingDivergedError
from core.flow import ControlPath, control_norm, empirical_risk, gradient, load_control, save_control
from core.kernels import KernelSpec, beta, derivatives_at_zero, eval_kernel, kappa, kernel_moment, kernel_values
from core.rff import load_bank, rff_kernel, sample_features, save_bank
from core.trainer import (TrainConfig, TrainLog, TrainStatus, TrainStep, gd_train, read_log_csv,
                          write_lambda_csv, write_log_csv)
from core.utils import ensure_dir, fmt17, make_rng, mean_std, nu_label, parse_nu

SweepParam = Literal["q", "q_int"]
SELFTEST_STREAM = 7
LOSS_MATCH_RTOL = 1e-9


def dataset_for(exp: ExperimentConfig, seed: int) -> Dataset:
    if exp.data_path:
        return load_dataset(exp.data_path)
    return synth_dataset(exp.n, exp.d, exp.d_out, exp.noise, seed)


# -------------------------
# train
# -------------------------
def save_run(log: TrainLog, data: Dataset, config: TrainConfig, out_dir: str | Path) -> Path:
    out = ensure_dir(out_dir)
    meta = {"q": config.q, "q_int": config.q_int, "nu": nu_label(config.nu), "L": config.L,
            "embedding": config.embedding, "seed": config.seed, "R": config.R,
            "kappa_bound": config.kappa_bound, "status": log.status.value}
    with open(out / "run.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(meta, f, sort_keys=False)
    save_dataset(data, out / "dataset.csv")
    save_bank(log.bank, out / "bank.json")
    save_control(log.control, out / "checkpoint.json")
    write_log_csv(log, out / "train_log.csv")
    if write_lambda_csv(log, out / "train_lambda.csv") is None:
        (out / "train_lambda.csv").unlink(missing_ok=True)
    if log.pl_report is not None:
        write_report(log.pl_report, out / "pl_report.txt")
    return out


def run_train(exp: ExperimentConfig) -> TrainLog:
    data = dataset_for(exp, exp.seed)
    try:
        log = gd_train(exp.train, data)
    except TrainingDivergedError as e:
        if e.log is not None and e.log.records:
            save_run(e.log, data, exp.train, exp.out_dir)
        raise
    out = save_run(log, data, exp.train, exp.out_dir)
    if exp.emit_svg:
        from core.plots import render_loss_curves
        steps = np.array([r.step for r in log.records])
        render_loss_curves({"loss": (steps, log.losses)}, out / "loss.svg", title="Empirical risk")
    return log


# -------------------------
# sweeps
# -------------------------
@dataclass(frozen=True)
class CellResult:
    value: int
    replicate: int
    seed: int
    status: str
    losses: Tuple[float, ...]
    error: Optional[str] = None

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def _run_cell(args) -> CellResult:
    value, replicate, seed, config, data, cell_dir = args
    try:
        log = gd_train(config, data)
        save_run(log, data, config, cell_dir)
        return CellResult(value, replicate, seed, log.status.value, tuple(float(x) for x in log.losses))
    except TrainingDivergedError as e:
        logger.warning(f"cell {value} / seed {seed} diverged: {e}")
        losses = tuple(float(r.loss) for r in e.log.records) if e.log is not None else ()
        return CellResult(value, replicate, seed, TrainStatus.DIVERGED.value, losses, str(e))


def sweep_cells(exp: ExperimentConfig, param: SweepParam) -> List[tuple]:
    values = exp.q_values if param == "q" else exp.q_int_values
    root = Path(exp.out_dir)
    cells = []
    for v in values:
        if param == "q":
            q, q_int = v, exp.q_int_factor * v
        else:
            q, q_int = exp.fixed_q, v
        for r in range(exp.replicates):
            seed = exp.seed + r
            data = dataset_for(exp, seed)
            config = exp.train.model_copy(update={"q": q, "q_int": q_int, "seed": seed})
            cells.append((v, r, seed, config, data, root / f"{param}_{v}" / f"seed_{seed}"))
    return cells


def _pad(losses: Sequence[float], n: int) -> List[float]:
    # converged runs keep their final loss for the remaining steps
    return list(losses) + [losses[-1]] * (n - len(losses))


def summarize_sweep(results: Sequence[CellResult]) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    by_value: Dict[int, List[CellResult]] = {}
    for res in sorted(results, key=lambda c: (c.value, c.replicate)):
        by_value.setdefault(res.value, []).append(res)
    out = {}
    for v, cells in by_value.items():
        ok = [c for c in cells if c.status != TrainStatus.DIVERGED.value and c.losses]
        if not ok:
            continue
        n = max(len(c.losses) for c in ok)
        out[v] = mean_std([_pad(c.losses, n) for c in ok])
    return out


def write_sweep_csv(summary: Dict[int, Tuple[np.ndarray, np.ndarray]], path: str | Path) -> Path:
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["param", "step", "mean_loss", "std_loss"])
        for v in sorted(summary):
            mean, std = summary[v]
            for k, (m, s) in enumerate(zip(mean, std)):
                w.writerow([v, k, fmt17(m), fmt17(s)])
    return p


def write_status_csv(results: Sequence[CellResult], path: str | Path) -> Path:
    p = Path(path)
    with open(p, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["param", "seed", "status", "final_loss", "error"])
        for c in sorted(results, key=lambda c: (c.value, c.replicate)):
            w.writerow([c.value, c.seed, c.status, fmt17(c.final_loss), c.error or ""])
    return p


def run_sweep(exp: ExperimentConfig, param: SweepParam) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    cells = sweep_cells(exp, param)
    logger.info(f"sweep over {param}: {len(cells)} cells on {exp.jobs} worker(s)")
    if exp.jobs > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    root = ensure_dir(exp.out_dir)
    summary = summarize_sweep(results)
    write_sweep_csv(summary, root / f"sweep_{param}.csv")
    write_status_csv(results, root / f"sweep_{param}_status.csv")
    for v, (mean, _) in sorted(summary.items()):
        logger.info(f"{param}={v}: mean final loss {mean[-1]:.6g}")
    if exp.emit_svg:
        from core.plots import render_loss_curves
        curves = {f"{param}={v}": (np.arange(len(m)), m) for v, (m, _) in sorted(summary.items())}
        render_loss_curves(curves, root / f"sweep_{param}.svg", title=f"Mean empirical risk, sweep over {param}")
    return summary


# -------------------------
# diagnose
# -------------------------
@dataclass
class DiagnoseResult:
    report: PLReport
    pl_upper_ok: Optional[bool]
    pl_lower_ok: Optional[bool]
    bounds_ok: Optional[bool]
    threshold_q: Optional[int] = None
    sweep_reports: Optional[List[PLReport]] = None
    predicted_q: Optional[int] = None
    steps_checked: int = 0

    def lines(self) -> List[str]:
        def flag(b):
            return "n/a" if b is None else ("PASS" if b else "FAIL")
        r = self.report
        out = [
            f"init condition: {flag(r.init_satisfied)} (lhs={r.init_lhs:.6g}, R={r.R:g}, mu={r.mu:.6g}, "
            f"{'certified' if r.certified else 'not certified'})",
            f"PL upper bound: {flag(self.pl_upper_ok)}",
            f"PL lower bound: {flag(self.pl_lower_ok)}",
            f"trajectory bounds: {flag(self.bounds_ok)}",
        ]
        if self.steps_checked:
            out[1] += f" ({self.steps_checked} step(s))"
            out[2] += f" ({self.steps_checked} step(s))"
        if self.sweep_reports is not None:
            found = self.threshold_q if self.threshold_q is not None else "none in sweep"
            predicted = self.predicted_q if self.predicted_q is not None else "none"
            out.append(f"q threshold: {found} (separation predicts {predicted})")
        return out


def load_run(run_dir: str | Path):
    d = Path(run_dir)
    meta = yaml.safe_load((d / "run.yaml").read_text(encoding="utf-8"))
    data = load_dataset(d / "dataset.csv")
    bank = load_bank(d / "bank.json", q=int(meta["q"]), q_int=int(meta["q_int"]))
    control = load_control(d / "checkpoint.json", bank=bank)
    pair = build_embedding(bank.q, data.d, data.d_out, meta["embedding"])
    return meta, data, bank, pair, control


def _logged_records(run_dir: Path, final: TrainStep) -> List[TrainStep]:
    """Logged steps of the run when they end at ``final``; otherwise just ``final``."""
    log_path = run_dir / "train_log.csv"
    if not log_path.exists():
        return [final]
    records = read_log_csv(log_path, run_dir / "train_lambda.csv").records
    if not records or not math.isclose(records[-1].loss, final.loss, rel_tol=LOSS_MATCH_RTOL, abs_tol=1e-300):
        logger.warning(f"{log_path} does not end at the checkpoint; checking the checkpoint alone")
        return [final]
    if records[-1].lambda_min_traj is None:
        records[-1].lambda_min_traj = final.lambda_min_traj
    return records


def diagnose_checkpoint(run_dir: str | Path, R: float) -> DiagnoseResult:
    from core.rff import empirical_kappa_hat
    meta, data, bank, pair, control = load_run(run_dir)
    spec = KernelSpec(parse_nu(meta["nu"]))
    res = gradient(control, bank, pair, data)
    kappa_hat = empirical_kappa_hat(bank, meta.get("kappa_bound", "quartic"))
    lam = trajectory_lambda_min(res.bundle, bank, steps=range(control.L))
    report = init_condition(data, pair, spec, kappa_hat, R, control_norm(control), res.loss, data.N,
                            empirical_lambda=lam)
    final = TrainStep(step=0, loss=res.loss, grad_sq_norm=float(np.sum(res.grad ** 2)) * control.L,
                      v_norm=control_norm(control), v_dist_init=0.0, eta=math.nan,
                      wallclock=math.nan, lambda_min_traj=lam)
    records = _logged_records(Path(run_dir), final)
    checks = verify_pl_along_run(TrainLog(records=records), report, slack_L=control.L)
    lower = [c.lower_ok for c in checks]
    bounds = trajectory_bounds(res.bundle, data, pair, control, kappa_hat)
    return DiagnoseResult(report=report, pl_upper_ok=all(c.upper_ok for c in checks),
                          pl_lower_ok=None if None in lower else all(lower),
                          bounds_ok=bounds.ok, steps_checked=len(checks))


def diagnose_sweep(exp: ExperimentConfig) -> DiagnoseResult:
    """Infinite-width sweep of the initialization condition over q (v0 = 0)."""
    data = dataset_for(exp, exp.seed)
    spec = exp.train.spec
    kap = kappa(spec)

    def loss0(q, pair):
        resid = data.inputs @ pair.BA.T - data.targets
        return float(np.sum(resid * resid) / (2 * data.N))

    found, reports = sweep_init_condition(data, spec, lambda q: kap, loss0, exp.diagnose_R,
                                          exp.diagnose_q_values, exp.diagnose_embedding)
    chosen = next((r for r in reports if r.init_satisfied), reports[-1])
    predicted = None
    if exp.diagnose_embedding == "canonical":
        predicted = min_q_for_separation(data.separation, data.d, beta(spec, data.N), kap, exp.diagnose_R)
        logger.info(f"separation {data.separation:.4g} predicts q >= {predicted}; sweep found {found}")
    return DiagnoseResult(report=chosen, pl_upper_ok=None, pl_lower_ok=None, bounds_ok=None,
                          threshold_q=found, sweep_reports=reports, predicted_q=predicted)


def run_diagnose(exp: ExperimentConfig) -> DiagnoseResult:
    out = ensure_dir(exp.out_dir)
    if exp.checkpoint:
        result = diagnose_checkpoint(exp.checkpoint, exp.diagnose_R)
    else:
        result = diagnose_sweep(exp)
        with open(out / "diagnose_sweep.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["q", "init_lhs", "init_satisfied", "mu", "certified"])
            for q, r in zip(sorted(exp.diagnose_q_values), result.sweep_reports):
                w.writerow([q, fmt17(r.init_lhs), int(r.init_satisfied), fmt17(r.mu), int(r.certified)])
    write_report(result.report, out / "pl_report.txt")
    return result


# -------------------------
# kernel self-test
# -------------------------
@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.detail}"


def _check_kappa_anchors() -> List[Check]:
    out = [Check("kappa_gaussian", abs(kappa(KernelSpec(math.inf)) - (2 + math.sqrt(3))) <= 1e-12,
                 f"kappa={fmt17(kappa(KernelSpec(math.inf)))}")]
    for nu in (3.0, 4.0, 10.0):
        got = derivatives_at_zero(KernelSpec(nu))
        want = (nu / (nu - 1), 3 * nu * nu / ((nu - 1) * (nu - 2)))
        out.append(Check(f"derivatives_nu={nu_label(nu)}", got == want, f"got={got}"))
    return out


def _check_moments(nu_values: Sequence[float], negative_control: bool) -> List[Check]:
    out = []
    n = 100_000
    for nu in nu_values:
        spec = KernelSpec(nu)
        bank = sample_features(2, n, spec, seed=0)
        # the negative control compares against the variance of a different kernel
        ref = KernelSpec(nu + 2.0) if negative_control and not spec.is_gaussian else spec
        target = kernel_moment(ref, 2) if not (negative_control and spec.is_gaussian) else 1.25
        m2, m4 = kernel_moment(spec, 2), kernel_moment(spec, 4)
        se = math.sqrt((m4 - m2 * m2) / n)
        var = np.mean(bank.omegas ** 2, axis=0)
        ok = bool(np.all(np.abs(var - target) <= 3 * se))
        out.append(Check(f"frequency_variance_nu={nu_label(nu)}", ok,
                         f"empirical={[fmt17(v) for v in var]} target={fmt17(target)} se={fmt17(se)}"))
    return out


def _check_beta(nu_values: Sequence[float]) -> List[Check]:
    out = []
    for nu in nu_values:
        spec = KernelSpec(nu)
        for N in (2, 50):
            b = beta(spec, N)
            err = abs(eval_kernel(spec, b) - 1 / (2 * N))
            out.append(Check(f"beta_root_nu={nu_label(nu)}_N={N}", err <= 1e-8, f"beta={fmt17(b)} err={err:.2e}"))
    b = beta(KernelSpec(math.inf), 2)
    out.append(Check("beta_gaussian_closed_form", abs(b - math.sqrt(2 * math.log(4))) <= 1e-6, f"beta={fmt17(b)}"))
    return out


def concentration_errors(spec: KernelSpec, q_int: int, n_pairs: int = 200, n_banks: int = 50,
                         q: int = 2, seed: int = 0) -> np.ndarray:
    """|k_hat - k| over random pairs with ||z - z'|| <= 5, for ``n_banks`` banks."""
    rng = make_rng(seed, SELFTEST_STREAM)
    z = rng.uniform(-5, 5, size=(n_pairs, q))
    u = rng.standard_normal((n_pairs, q))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(0, 5, size=n_pairs)
    zp = z + r[:, None] * u
    exact = kernel_values(spec, np.linalg.norm(z - zp, axis=1))
    errs = []
    for b in range(n_banks):
        bank = sample_features(q, q_int, spec, seed=seed + 1000 + b)
        est = np.array([rff_kernel(bank, z[i], zp[i]) for i in range(n_pairs)])
        errs.append(np.abs(est - exact))
    return np.concatenate(errs)


def _check_concentration(spec: KernelSpec) -> Check:
    lo = np.median(concentration_errors(spec, 1024))
    hi = np.median(concentration_errors(spec, 4096))
    ratio = lo / hi
    return Check(f"rff_concentration_nu={nu_label(spec.nu)}", 1.3 <= ratio <= 3.1,
                 f"median_1024={fmt17(lo)} median_4096={fmt17(hi)} ratio={ratio:.4f}")


def _check_diagonal_dominance(spec: KernelSpec, n_sets: int) -> Check:
    rng = make_rng(0, SELFTEST_STREAM + 1)
    worst = math.inf
    for N in (5, 10, 20):
        b = beta(spec, N)
        for _ in range(n_sets):
            pts = separated_points(rng, N, 2, b)
            worst = min(worst, lambda_bounds(gram_matrix(pts, spec))[0])
    return Check(f"diagonal_dominance_nu={nu_label(spec.nu)}", worst >= 0.5, f"min_lambda={fmt17(worst)}")


def separated_points(rng: np.random.Generator, N: int, dim: int, min_dist: float) -> np.ndarray:
    """Random points with pairwise distance >= min_dist (grid cells jittered inside their cell)."""
    side = math.ceil(N ** (1.0 / dim)) + 1
    cell = 2.0 * min_dist
    cells = rng.permutation(side ** dim)[:N]
    idx = np.stack(np.unravel_index(cells, (side,) * dim), axis=1).astype(float)
    jitter = rng.uniform(0, 0.5 * min_dist, size=(N, dim))
    return idx * cell + jitter


def _check_gradient_oracle(n_instances: int) -> Check:
    worst = 0.0
    spec = KernelSpec(3.0)
    for s in range(n_instances):
        rng = make_rng(s, SELFTEST_STREAM + 2)
        data = Dataset(inputs=rng.standard_normal((4, 2)), targets=rng.standard_normal((4, 2)))
        bank = sample_features(3, 8, spec, seed=s)
        pair = build_embedding(3, 2, 2, "block")
        control = ControlPath(0.3 * rng.standard_normal((5, 3, 16)))
        worst = max(worst, gradient_fd_error(control, bank, pair, data))
    return Check("gradient_oracle", worst <= 1e-5, f"max_rel_err={worst:.2e}")


def gradient_fd_error(control: ControlPath, bank, pair, data, h: float = 1e-5) -> float:
    """Max-norm relative error of the adjoint gradient against central differences."""
    grad = gradient(control, bank, pair, data).grad
    fd = np.empty_like(grad)
    w = control.weights
    for idx in np.ndindex(w.shape):
        plus, minus = w.copy(), w.copy()
        plus[idx] += h
        minus[idx] -= h
        fd[idx] = (empirical_risk(ControlPath(plus), bank, pair, data)
                   - empirical_risk(ControlPath(minus), bank, pair, data)) / (2 * h)
    scale = max(float(np.max(np.abs(fd))), 1e-300)
    return float(np.max(np.abs(grad - fd))) / scale


def run_kernel_selftest(exp: ExperimentConfig) -> List[Check]:
    specs = [KernelSpec(nu) for nu in exp.selftest_nu]
    checks = _check_kappa_anchors()
    checks += [Check(f"normalization_nu={nu_label(s.nu)}", abs(eval_kernel(s, 0.0) - 1.0) <= 1e-12, "k(0)=1")
               for s in specs]
    checks += _check_moments([s.nu for s in specs], exp.negative_control)
    checks += _check_beta([s.nu for s in specs])
    checks += [_check_diagonal_dominance(s, 10 if exp.selftest_fast else 100) for s in specs]
    checks.append(_check_gradient_oracle(2 if exp.selftest_fast else 20))
    if not exp.selftest_fast:
        checks += [_check_concentration(s) for s in specs if not s.is_gaussian]
    for c in checks:
        logger.debug(c.line())
    return checks
