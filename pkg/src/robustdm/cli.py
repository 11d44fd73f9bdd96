"""Batch command line: ``robustdm COMMAND --config run.toml [--out DIR] [--seed N] [--threads N]``.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure.
Outputs are written to a temporary directory next to the target and moved
into place only when the command succeeds.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import shutil
import sys
import tempfile
import warnings
from contextlib import nullcontext
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .config import RunConfig, load_config, resolve
from .ddc import DDCModel, DDCOptions, renewal_stationary, solve_ddc
from .errors import (ConfigError, DivergenceError, DomainEvaluationError, ModelSpecError, NonConvergenceError,
                     NumericalFailureError, RobustDMError)
from .fitting import EMOptions, run_em, tail_regularity_check
from .ident import MomentSpec, local_ident_matrix, rho_derivatives, underident_construct_check
from .learning import LearnOptions, LearnPrefs, SimplexGrid, regime_kernel, solve_v_learn
from .models import ARGModel, LGModel, MoEModel, RegimeModel, UtilityGrowth, load_model, read_series, save_model
from .numgrid import GaussHermiteRule, Grid
from .perturb import ShiftedModel, first_order_v, score_from_models
from .pricing import (GrowthSpec, chernoff_entropy, detection_error, realized_series, risk_free_rate,
                      strip_term_structure)
from .robust import (Preferences, SolverOptions, continuation_entropy, make_kernel, solve, solve_on_kernel,
                     subgradient_radius)

COMMANDS = ("solve", "series", "term", "perturb", "ident", "ddc", "learn", "fit")
SOLVER_ERRORS = (NonConvergenceError, DivergenceError, NumericalFailureError)


class SolverFailure(RuntimeError):
    pass


class InputError(ValueError):
    pass


# helpers ---------------------------------------------------------------------------

def _affine(sec) -> UtilityGrowth:
    return UtilityGrowth(sec.a0, sec.lambda0, sec.lambda1)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
        fh.write("\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else repr(float(c)) for c in row])
    path.write_text(buf.getvalue())


def _build_model(cfg: RunConfig, base: Path, out: Path):
    sec = cfg.model
    if sec is None:
        raise InputError("a [model] section is required for this command")
    try:
        if sec.type == "lg":
            return LGModel(sec.mu, sec.A, sec.sigma)
        if sec.type == "moe":
            return MoEModel(sec.weights, sec.means, sec.A, sec.Omega)
        if sec.type == "arg":
            return ARGModel(sec.c1, sec.c2, sec.c3)
        if sec.type == "file":
            return load_model(resolve(sec.path, base))
        _, _, data = read_series(resolve(sec.data, base))
        res = run_em(data, sec.K, EMOptions(sec.tol, sec.max_iter, sec.restarts, cfg.seed))
        save_model(res.model, out / "model.json")
        return res.model
    except (ModelSpecError, OSError, json.JSONDecodeError) as exc:
        raise InputError(str(exc)) from None


def _solver_options(cfg: RunConfig) -> SolverOptions:
    g = cfg.grid
    return SolverOptions(nodes=g.nodes, width=g.width, gh_order=g.gh_order, interp=g.interp, extrap=g.extrap,
                         tol=g.tol, max_iters=g.max_iters)


def _prefs(cfg: RunConfig) -> Preferences:
    return Preferences(cfg.preferences.beta, cfg.preferences.theta)


def _solved(cfg, base, out):
    model = _build_model(cfg, base, out)
    u = _affine(cfg.utility)
    sol = solve(model, _prefs(cfg), u, _solver_options(cfg))
    if not sol.report.converged:
        raise SolverFailure(f"value iteration stopped with residual {sol.report.residual:.3e}")
    return model, u, sol


def _meta(command: str, cfg: RunConfig, raw: dict, extra: dict | None = None) -> dict:
    doc = {
        "command": command,
        "config": raw,
        "resolved": cfg.model_dump(),
        "seed": cfg.seed,
        "tolerances": {"solver": cfg.grid.tol, "max_iters": cfg.grid.max_iters},
        "versions": {"robustdm": _version(), "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    doc.update(extra or {})
    return doc


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# commands ----------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig, base: Path, out: Path) -> dict:
    model, u, sol = _solved(cfg, base, out)
    dist = sol.distortion
    ent = continuation_entropy(dist, method=cfg.solve.entropy_method)
    sol.v.to_csv(out / "v.csv", "v")
    ent.gamma.to_csv(out / "gamma.csv", "gamma")
    report = {"solver": sol.report.to_dict(), "normalization_error": dist.normalization_error(),
              "entropy_recursion_residual": ent.recursion_residual}
    if sol.prefs.alpha != 0:
        report["subgradient_radius"] = subgradient_radius(dist)
        ch = chernoff_entropy(dist, cfg.pricing.s_grid)
        report["chernoff"] = ch.to_dict()
        report["detection"] = [detection_error(dist, T, cfg.pricing.detection_reps, [cfg.seed, T]).to_dict()
                               for T in cfg.pricing.detection_T]
    _write_json(out / "report.json", report)
    return {}


def cmd_series(cfg: RunConfig, base: Path, out: Path) -> dict:
    if cfg.series is None:
        raise InputError("the series command needs a [series] section")
    try:
        names, dates, data = read_series(resolve(cfg.series.data, base))
    except (ValueError, OSError) as exc:
        raise InputError(str(exc)) from None
    model, u, sol = _solved(cfg, base, out)
    gc = _affine(cfg.series.consumption) if cfg.series.consumption else u
    try:
        rs = realized_series(sol.distortion, data, gc, dates, cfg.solve.entropy_method)
    except (ValueError, DomainEvaluationError) as exc:
        raise InputError(str(exc)) from None
    _write_csv(out / "series.csv", ["date", "m", "spread_pct_pa", "gamma", "weight_entropy"], rs.rows())
    return {"columns": names}


def cmd_term(cfg: RunConfig, base: Path, out: Path) -> dict:
    if cfg.term is None:
        raise InputError("the term command needs a [term] section")
    model, u, sol = _solved(cfg, base, out)
    dist = sol.distortion
    gc = _affine(cfg.term.consumption) if cfg.term.consumption else u
    ts = strip_term_structure(dist, GrowthSpec(gc, _affine(cfg.term.earnings)), cfg.term.tau_max)
    states = np.atleast_2d(np.asarray(cfg.term.states if cfg.term.states else [model.stationary_mean], float))
    if states.shape[1] != sol.kernel.grid.dims:
        raise InputError("evaluation states must match the model dimension")
    labels = ["state_" + "_".join(f"{c:g}" for c in s) for s in states]
    for name, per in (("term.csv", True), ("term_cumulative.csv", False)):
        vals = ts.at(dist, states, per_period=per)
        _write_csv(out / name, ["horizon", *labels], ([str(h), *row] for h, row in zip(ts.horizons, vals)))
    rf = risk_free_rate(dist, gc)
    _write_csv(out / "risk_free.csv", ["state", "gross_rate"],
               ((lab, float(np.atleast_1d(rf(s[None, :]))[0])) for lab, s in zip(labels, states)))
    return {"evaluation_states": states}


def cmd_perturb(cfg: RunConfig, base: Path, out: Path) -> dict:
    if cfg.perturb is None:
        raise InputError("the perturb command needs a [perturb] section")
    model, u, sol = _solved(cfg, base, out)
    k = sol.kernel
    d = k.grid.dims
    direction = np.asarray(cfg.perturb.direction, dtype=float)
    slope = cfg.perturb.kind == "slope"
    if slope and not isinstance(model, LGModel):
        raise InputError("slope perturbations need an LG benchmark")
    if direction.size != (d * d if slope else d):
        raise InputError("perturbation direction does not match the model dimension")
    opts = _solver_options(cfg)
    rows, columns = [], {}
    for s in cfg.perturb.steps:
        try:
            alt = (LGModel(model.mu, model.A + s * direction.reshape(d, d), model.sigma) if slope
                   else ShiftedModel(model, s * direction))
        except ModelSpecError as exc:
            raise InputError(f"step {s}: {exc}") from None
        approx = first_order_v(sol.distortion, score_from_models(model, alt, k), cfg.perturb.terms)
        k_alt = make_kernel(alt, u, opts, grid=k.grid)
        v_alt, *_ = solve_on_kernel(k_alt, sol.prefs.alpha, sol.prefs.beta, opts)
        change = v_alt - sol.v.values
        remainder = float(np.max(np.abs(change - approx.values)))
        rows.append((s, float(np.max(np.abs(change))), float(np.max(np.abs(approx.values))), remainder,
                     remainder / s if s else 0.0))
        columns[f"first_order_{s:g}"] = approx.values
        columns[f"change_{s:g}"] = change
    _write_csv(out / "perturb.csv", ["step", "sup_change", "sup_first_order", "sup_remainder", "remainder_over_step"],
               rows)
    names = list(columns)
    _write_csv(out / "perturb_values.csv", [*k.grid.names, *names],
               ([*p, *(columns[n][i] for n in names)] for i, p in enumerate(k.grid.points)))
    return {}


def _asset_moments(cfg: RunConfig, u: UtilityGrowth) -> MomentSpec | None:
    sec = cfg.ident
    if not sec.assets:
        return None
    gc = _affine(sec.consumption) if sec.consumption else u
    rets = [_affine(a) for a in sec.assets]

    def g(x, x_next):
        return np.stack([np.exp(r(x, x_next) - gc(x, x_next)) for r in rets], axis=-1)

    return MomentSpec(g, len(rets))


def cmd_ident(cfg: RunConfig, base: Path, out: Path) -> dict:
    if cfg.ident is None:
        raise InputError("the ident command needs an [ident] section")
    model, u, sol = _solved(cfg, base, out)
    report: dict = {}
    moments = _asset_moments(cfg, u)
    if moments is not None:
        derivs = rho_derivatives(sol.distortion, moments)
        report["local"] = local_ident_matrix(model, derivs, sol.kernel.grid).to_dict()
        report["max_abs_rho"] = float(np.max(np.abs(derivs.rho)))
        cols = {}
        for j in range(moments.d_g):
            cols[f"d_alpha_{j}"] = derivs.d_alpha[:, j]
            cols[f"d_beta_{j}"] = derivs.d_beta[:, j]
        _write_csv(out / "rho_derivatives.csv", [*sol.kernel.grid.names, *cols],
                   ([*p, *(c[i] for c in cols.values())] for i, p in enumerate(sol.kernel.grid.points)))
    report["underidentification"] = [
        underident_construct_check(model, sol.prefs, u, t, _solver_options(cfg), sol.kernel).to_dict()
        for t in cfg.ident.theta_alt]
    _write_json(out / "ident.json", report)
    return {}


def _ddc_model(sec, cfg: RunConfig) -> DDCModel:
    try:
        if sec.actions is None:
            return DDCModel.finite(sec.utilities, [np.asarray(t, float) for t in sec.transitions], sec.beta)
        laws = [LGModel(a.law.mu, a.law.A, a.law.sigma) for a in sec.actions]
        if laws[0].dim != 1:
            raise InputError("continuous DDC actions are supported on a one-dimensional state")
        if sec.lower is not None:
            grid = Grid.uniform([sec.lower], [sec.upper], cfg.grid.nodes)
        else:
            grid = SolverOptions(nodes=cfg.grid.nodes, width=cfg.grid.width).make_grid(laws[0])
        utils = [(lambda pts, a=_affine(a.utility): a(pts, pts)) for a in sec.actions]
        return DDCModel.on_grid(grid, utils, laws, sec.beta, GaussHermiteRule(cfg.grid.gh_order))
    except ModelSpecError as exc:
        raise InputError(str(exc)) from None


def cmd_ddc(cfg: RunConfig, base: Path, out: Path) -> dict:
    sec = cfg.ddc
    if sec is None:
        raise InputError("the ddc command needs a [ddc] section")
    try:
        model = _ddc_model(sec, cfg)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    v, probs, rep = solve_ddc(model, DDCOptions(tol=min(cfg.grid.tol, 1e-11)))
    if not rep.converged:
        raise SolverFailure(f"DDC value iteration stopped with residual {rep.residual:.3e}")
    names = model.grid.names if model.grid is not None else ("state",)
    _write_csv(out / "v.csv", [*names, "v"], ([*p, val] for p, val in zip(model.points, v)))
    _write_csv(out / "ccp.csv", [*names, *(f"action_{d}" for d in range(model.D))],
               ([*p, *col] for p, col in zip(model.points, probs.T)))
    report = {"solver": rep.to_dict()}
    if sec.renewal_action is not None:
        if sec.renewal_action >= model.D:
            raise InputError("renewal_action is out of range")
        st = renewal_stationary(model, sec.renewal_action)
        report["stationary"] = {"doeblin_ok": st.doeblin_ok, "renewal_state_independent": st.renewal_state_independent,
                                "iterations": st.iterations}
        _write_csv(out / "stationary.csv", [*names, "density"], ([*p, d] for p, d in zip(model.points, st.density)))
    _write_json(out / "report.json", report)
    return {}


def cmd_learn(cfg: RunConfig, base: Path, out: Path) -> dict:
    sec = cfg.learn
    if sec is None:
        raise InputError("the learn command needs a [learn] section")
    try:
        rm = RegimeModel(sec.transition, sec.emission_means, sec.emission_covs)
    except ModelSpecError as exc:
        raise InputError(str(exc)) from None
    p = cfg.preferences
    prefs = LearnPrefs(p.beta, p.theta, np.inf if p.vartheta is None else p.vartheta)
    ua = _affine(sec.utility)
    coef = np.zeros(rm.obs_dim) if ua.lambda1 is None else ua.lambda1
    if coef.size != rm.obs_dim:
        raise InputError("learning utility coefficients must match the observation dimension")
    kernel = regime_kernel(rm, lambda phi: ua.a0 + phi @ coef, SimplexGrid(rm.N, sec.resolution),
                           GaussHermiteRule(sec.gh_order))
    vf, rep = solve_v_learn(kernel, prefs, LearnOptions(tol=sec.tol, max_iters=cfg.grid.max_iters))
    if not rep.converged:
        raise SolverFailure(f"learning iteration stopped with residual {rep.residual:.3e}")
    vf.to_csv(out / "v.csv", "v")
    _write_json(out / "report.json", {"solver": rep.to_dict()})
    return {}


def cmd_fit(cfg: RunConfig, base: Path, out: Path) -> dict:
    sec = cfg.model
    if sec is None or sec.type != "fit":
        raise InputError("the fit command needs a [model] section with type = \"fit\"")
    try:
        _, _, data = read_series(resolve(sec.data, base))
        res = run_em(data, sec.K, EMOptions(sec.tol, sec.max_iter, sec.restarts, cfg.seed))
    except (ValueError, OSError, ModelSpecError) as exc:
        raise InputError(str(exc)) from None
    save_model(res.model, out / "model.json")
    tail = tail_regularity_check(res.model, seed=cfg.seed)
    _write_json(out / "fit.json", {"loglik": list(res.loglik), "iterations": res.iterations,
                                   "restart": res.restart, "tail": tail.to_dict()})
    return {}


HANDLERS = {"solve": cmd_solve, "series": cmd_series, "term": cmd_term, "perturb": cmd_perturb,
            "ident": cmd_ident, "ddc": cmd_ddc, "learn": cmd_learn, "fit": cmd_fit}


# driver ------------------------------------------------------------------------------

def _publish(tmp: Path, out: Path) -> None:
    old = None
    if out.exists():
        old = Path(tempfile.mkdtemp(prefix=f".{out.name}.old-", dir=out.parent))
        os.replace(out, old / "prev")
    os.replace(tmp, out)
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def run(command: str, config_path, out: str | None = None, seed: int | None = None,
        threads: int | None = None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        cfg, raw = load_config(config_path)
        updates = {k: v for k, v in (("out", out), ("seed", seed), ("threads", threads)) if v is not None}
        if updates:
            cfg = RunConfig.model_validate({**cfg.model_dump(exclude_unset=True), **updates})
        if cfg.out is None:
            raise ConfigError("no output directory: pass --out or set out in the config")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    base = Path(config_path).resolve().parent
    target = resolve(cfg.out, Path.cwd()).resolve()
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    code = 0
    try:
        limiter = nullcontext()
        if cfg.threads is not None:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=cfg.threads)
        with limiter, warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            extra = HANDLERS[command](cfg, base, tmp)
        notes = sorted({str(w.message) for w in caught})
        for note in notes:
            print(f"warning: {note}", file=sys.stderr)
        _write_json(tmp / "meta.json", _meta(command, cfg, raw, {**extra, "warnings": notes}))
        _publish(tmp, target)
    except (ValueError, ConfigError, ModelSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except (SolverFailure, RobustDMError) + SOLVER_ERRORS as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        code = 2
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="robustdm", description="Robust continuation values and their outputs.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides the config)")
    parser.add_argument("--threads", type=int, help="thread limit for numerical libraries")
    args = parser.parse_args(argv)
    return run(args.command, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
