"""Command-line front end: configuration, run orchestration and report files.

Subcommands: certify, simulate, gain-search, ugas, equivalence.
Exit codes: 0 success, 1 failed certificate or divergent run, 2 configuration error.
"""

import argparse
import copy
import math
import os
import sys

import numpy as np
import tomli
import tomli_w

from .certify import (AssumptionError, CertReport, DependencyError, EtaBounds, check_corollary,
                      check_prop1, check_thm1, check_thm2, check_thm3, estimate_eta, gain_search)
from .controller import ConfigurationError, GainSet
from .models import FlexJointModel, ParameterError, flexjoint_to_chain, make_model
from .numerics import DimensionError
from .reference import ReferenceInvalidError, make_sinusoid_ref, make_static_ref, make_unforced_ref
from .simulate import (ClosedLoop, empirical_ugas, form_equivalence, run_closed_loop,
                       simulate_flexjoint, sphere_directions, summary, write_csv, write_json)

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {
        "name": "pendulum",     # pendulum | two_link | flexjoint_pendulum | flexjoint_two_link
        "params": {},           # constructor keywords (mass, length, a1, stiffness, ...)
        "friction": [],         # diagonal of F; empty means no friction
    },
    "reference": {
        "kind": "sinusoid",     # sinusoid | static | unforced
        "amplitudes": [0.5],
        "frequencies": [1.0],
        "phases": [0.0],
        "qd": [0.0],            # static
        "q0": [0.5],            # unforced
        "v0": [0.0],
        "horizon": 0.0,         # unforced; 0 covers the experiment automatically
        "h": 1e-4,
    },
    "controller": {
        "kind": "rd2",          # rd2 | rd2_ff | cascade
        "m": 0,
        "allow_assumption_violation": False,
    },
    "gains": {
        "source": "explicit",   # explicit | search | file
        "kp0": 50.0, "kd0": 20.0, "a0": 30.0, "b0": 30.0,
        "kp": [], "kd": [], "a": [], "b": [],
        "file": "",
        "target": "auto",       # auto | thm1 | thm2 | thm3 | prop1 | corollary
        "budget": 400,
        "cap": 0.0,             # clip searched gains to [1/cap, cap]; 0 means no cap
        "rigid": [],            # fixed (kp0, kd0, a0, b0) for the search; empty means search them
    },
    "eta": {
        "mode": "sampled",      # sampled | analytic | explicit
        "eta1": 0.0, "eta2": 0.0, "eta3": 0.0,
        "n_samples": 20000,
        "safety": 1.2,
    },
    "experiment": {
        "x0": [],               # initial error state; empty means radius * seeded unit direction
        "radius": 0.5,
        "t0": 0.0,
        "radii": [0.1, 1.0, 10.0],
        "n_phases": 8,
        "n_dirs": 8,
        "sigma": 1e-3,
        "period": 0.0,          # 0 uses the reference period (2 pi when aperiodic)
        "uniform_tol": 0.1,
        "fit_radius": 0.0,
        "equivalence_tol": 1e-7,
    },
    "numerics": {
        "h": 1e-3,
        "horizon": 10.0,
        "cap": 1e9,
        "record_every": 1,
        "backend": "auto",      # auto | kernel | python
    },
    "output": {
        "dir": "out",
    },
}

RIGID_KEYS = ("kp0", "kd0", "a0", "b0")
STAGE_KEYS = ("kp", "kd", "a", "b")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


CONFIG_ERRORS = (ConfigError, ConfigurationError, ParameterError, ReferenceInvalidError,
                 DependencyError, AssumptionError, DimensionError, tomli.TOMLDecodeError,
                 OSError)


# ------------------------------------------------------------ configuration

def _check_type(path, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if path[-1] in RIGID_KEYS and path[0] == "gains":
        ok = isinstance(value, (int, float, list)) and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"{'.'.join(path)}: expected {type(default).__name__}, got {value!r}")


def _merge(base, over, path=()):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown key {'.'.join(path + (k,))!r}")
        p = path + (k,)
        _check_type(p, base[k], v)
        if isinstance(base[k], dict) and p != ("model", "params"):
            out[k] = _merge(base[k], v, p)
        elif isinstance(base[k], float) and isinstance(v, int):
            out[k] = float(v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None):
    """Defaults merged with a TOML file and command-line overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        with open(path, "rb") as fh:
            cfg = _merge(cfg, tomli.load(fh))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        sec, _, name = key.rpartition(".")
        cfg = _merge(cfg, {sec: {name: value}} if sec else {name: value})
    if cfg["numerics"]["h"] <= 0 or cfg["numerics"]["horizon"] <= 0:
        raise ConfigError("numerics.h and numerics.horizon must be positive")
    if cfg["numerics"]["record_every"] < 1:
        raise ConfigError("numerics.record_every must be >= 1")
    return cfg


def dump_config(cfg):
    return tomli_w.dumps(cfg)


# ------------------------------------------------------------ construction

class Setup:
    """Objects resolved from a configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        mc = cfg["model"]
        try:
            model = make_model(mc["name"], **mc["params"])
        except TypeError as exc:
            raise ConfigError(f"model.params: {exc}") from exc
        self.flex = model if isinstance(model, FlexJointModel) else None
        if self.flex is not None:
            chain, self.imap = flexjoint_to_chain(self.flex)
            model = chain.base
        if mc["friction"]:
            model = model.with_friction(np.diag(np.broadcast_to(np.asarray(mc["friction"], float),
                                                               (model.n,))))
        self.model = model
        cc = cfg["controller"]
        self.controller = cc["kind"]
        self.m = cc["m"] if self.controller == "cascade" else 0
        if self.flex is not None and (self.controller != "cascade" or self.m != 2):
            raise ConfigError("flexible-joint models use the cascade controller with m = 2")
        self.ref = self._reference()
        self.k_delta = self.ref.k_delta
        self._eta = None

    def _reference(self):
        rc, n = self.cfg["reference"], self.model.n
        kind = rc["kind"]
        if kind == "sinusoid":
            return make_sinusoid_ref(_vec(rc["amplitudes"], n, "amplitudes"),
                                     _vec(rc["frequencies"], n, "frequencies"),
                                     _vec(rc["phases"], n, "phases"))
        if kind == "static":
            return make_static_ref(_vec(rc["qd"], n, "qd"))
        if kind == "unforced":
            horizon = rc["horizon"]
            if horizon <= 0:
                ex, nu = self.cfg["experiment"], self.cfg["numerics"]
                horizon = ex["t0"] + nu["horizon"] + max(ex["period"], 2 * math.pi) + 1.0
            base = self.model.with_friction(None) if self.model.friction is not None else self.model
            return make_unforced_ref(base, _vec(rc["q0"], n, "q0"), _vec(rc["v0"], n, "v0"),
                                     horizon, rc["h"])
        raise ConfigError(f"unknown reference kind {kind!r}")

    @property
    def target(self):
        t = self.cfg["gains"]["target"]
        if t != "auto":
            return t
        if self.m == 0:
            return "thm1"
        if self.flex is not None:
            return "corollary"
        return "thm2" if self.m == 1 else "thm3"

    def eta_for(self, gains):
        ec = self.cfg["eta"]
        if ec["mode"] == "explicit":
            return EtaBounds(ec["eta1"], ec["eta2"], ec["eta3"], "explicit")
        if ec["mode"] not in ("sampled", "analytic"):
            raise ConfigError(f"unknown eta mode {ec['mode']!r}")
        return estimate_eta(self.model, self.ref, gains, ec["n_samples"], self.cfg["seed"],
                            ec["safety"], ec["mode"])

    def gains(self):
        """(GainSet, stored eta or None) from the configured source."""
        gc = self.cfg["gains"]
        if gc["source"] == "explicit":
            g = GainSet(*(_gain(gc[k]) for k in RIGID_KEYS), *(tuple(gc[k]) for k in STAGE_KEYS))
            eta = None
        elif gc["source"] == "file":
            if not gc["file"]:
                raise ConfigError("gains.source = 'file' needs gains.file")
            g, eta = read_gains(gc["file"])
        else:
            raise ConfigError("gains.source must be 'explicit' or 'file' here; use gain-search")
        if g.m != self.m:
            raise ConfigError(f"gain set has {g.m} stages but the controller expects {self.m}")
        return g, eta

    def closed_loop(self, gains):
        return ClosedLoop(self.model, gains, self.ref, self.controller,
                          self.cfg["controller"]["allow_assumption_violation"])

    def x0(self, cl):
        ex = self.cfg["experiment"]
        if ex["x0"]:
            x0 = np.asarray(ex["x0"], float)
            if x0.size != cl.err_dim:
                raise ConfigError(f"experiment.x0 must have length {cl.err_dim}")
            return x0
        return ex["radius"] * sphere_directions(cl.err_dim, 1, self.cfg["seed"])[0]


def _vec(v, n, name):
    a = np.asarray(v, float)
    if a.size not in (1, n):
        raise ConfigError(f"reference.{name} must have 1 or {n} entries")
    return np.broadcast_to(a, (n,)).copy()


def _gain(v):
    return tuple(float(x) for x in v) if isinstance(v, list) else float(v)


def certify_gains(setup, gains, eta=None):
    """Certificate for the configured target; returns (CertReport, eta used)."""
    b, kd = setup.model.bounds, setup.k_delta
    target = setup.target
    if target == "thm1":
        return check_thm1(gains, b, kd), None
    if target == "corollary":
        return check_corollary(gains, b, kd), None
    eta = eta if eta is not None else setup.eta_for(gains)
    n = setup.model.n
    if target == "thm2":
        return check_thm2(gains, eta, b, kd), eta
    if target == "thm3":
        return check_thm3(gains, eta, b, kd, n), eta
    if target == "prop1":
        return check_prop1(gains, eta, b, kd, n), eta
    raise ConfigError(f"unknown certificate target {target!r}")


def read_gains(path):
    """(GainSet, EtaBounds or None) from a gains file."""
    import json
    with open(path) as fh:
        d = json.load(fh)
    try:
        g = GainSet.from_dict(d["gains"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed gains file {path}: {exc}") from exc
    eta = EtaBounds.from_dict(d["eta"]) if d.get("eta") else None
    return g, eta


def _report_dict(rep, target, eta):
    d = rep.to_dict()
    d["target"] = target
    d["eta"] = None if eta is None else eta.to_dict()
    return d


# ------------------------------------------------------------ commands

def _outdir(cfg):
    d = cfg["output"]["dir"]
    os.makedirs(d, exist_ok=True)
    return d


def cmd_certify(cfg):
    s = Setup(cfg)
    gains, eta = s.gains()
    rep, eta = certify_gains(s, gains, eta)
    write_json(_report_dict(rep, s.target, eta), os.path.join(_outdir(cfg), "cert_report.json"))
    for e in rep.entries:
        print(f"{'PASS' if e.passed else 'FAIL'} {e.cond_id} margin={e.margin:.6g}")
    return 0 if rep.overall else 1


def cmd_gain_search(cfg):
    s = Setup(cfg)
    gc = cfg["gains"]
    target = s.target
    rigid = tuple(gc["rigid"]) if gc["rigid"] else None
    if rigid is not None and len(rigid) != 4:
        raise ConfigError("gains.rigid must list kp0, kd0, a0, b0")
    budget = int(gc["budget"])
    search_target = "prop1" if target == "thm3" else target
    if budget <= 0:
        # no evaluations allowed: report the unit starting point as is
        r = rigid or (1.0, 1.0, 1.0, 1.0)
        g = GainSet(*r, (1.0,) * s.m, (1.0,) * s.m, (1.0,) * s.m, (1.0,) * s.m)
        rep, eta = certify_gains(s, g)
        rep.meta["evaluations"] = 0
    else:
        need_eta = search_target in ("thm2", "prop1")
        eta_fn = None
        if need_eta:
            cache = {}

            def eta_fn(rg):
                key = (rg.kp0, rg.kd0, rg.a0, rg.b0)
                if key not in cache:
                    cache[key] = s.eta_for(rg)
                return cache[key]
        g, rep = gain_search(s.model.bounds, s.k_delta, s.m, budget, eta_fn=eta_fn, rigid=rigid,
                             target=search_target, n=s.model.n, seed=cfg["seed"],
                             gain_cap=gc["cap"] if gc["cap"] > 0 else math.inf)
        eta = eta_fn(g.stage(0)) if need_eta else None
        if target == "thm3":
            rep = rep + certify_gains(s, g, eta)[0]
    d = {"gains": g.to_dict(), "eta": None if eta is None else eta.to_dict(),
         "certificate": _report_dict(rep, target, eta)}
    write_json(d, os.path.join(_outdir(cfg), "gains.json"))
    print(f"{'PASS' if rep.overall else 'FAIL'} target={target} "
          f"evaluations={rep.meta.get('evaluations', 0)}")
    return 0 if rep.overall else 1


def cmd_simulate(cfg):
    s = Setup(cfg)
    gains, _ = s.gains()
    cl = s.closed_loop(gains)
    nu, ex = cfg["numerics"], cfg["experiment"]
    tr = run_closed_loop(cl, s.x0(cl), ex["t0"], nu["horizon"], nu["h"],
                         record_every=nu["record_every"], cap=nu["cap"], backend=nu["backend"])
    out = _outdir(cfg)
    write_csv(tr, os.path.join(out, "trajectory.csv"))
    summ = summary(tr)
    summ["model"] = cfg["model"]["name"]
    write_json(summ, os.path.join(out, "summary.json"))
    print(f"{'DIVERGED' if tr.diverged else 'OK'} final |x| = {summ['final_norm']:.6g}")
    return 1 if tr.diverged else 0


def cmd_ugas(cfg):
    s = Setup(cfg)
    gains, _ = s.gains()
    cl = s.closed_loop(gains)
    nu, ex = cfg["numerics"], cfg["experiment"]
    rep = empirical_ugas(cl, tuple(ex["radii"]), ex["n_phases"], ex["n_dirs"], ex["sigma"],
                         nu["horizon"], nu["h"], cfg["seed"], ex["period"] or None,
                         nu["record_every"], ex["uniform_tol"],
                         fit_radius=ex["fit_radius"] or None)
    write_json(rep.to_dict(), os.path.join(_outdir(cfg), "ugas_report.json"))
    print(rep.verdict)
    return 0 if rep.verdict.startswith("consistent") else 1


def cmd_equivalence(cfg):
    s = Setup(cfg)
    if s.m < 1:
        raise ConfigError("equivalence compares chain forms and needs the cascade controller")
    gains, _ = s.gains()
    cl = s.closed_loop(gains)
    nu, ex = cfg["numerics"], cfg["experiment"]
    x0 = s.x0(cl)
    res = form_equivalence(gains, s.model, s.ref, x0, nu["horizon"], nu["h"], ex["t0"])
    gaps = [res["gap"]]
    if s.flex is not None:
        T, q1, q2 = simulate_flexjoint(s.flex, gains, s.ref, x0, nu["horizon"], nu["h"], ex["t0"])
        tr = run_closed_loop(cl, x0, ex["t0"], nu["horizon"], nu["h"], backend=nu["backend"])
        n = s.model.n
        xi1 = tr.raw[:, 3 * n:4 * n]
        gap = float(max(np.max(np.abs(tr.q - q1)), np.max(np.abs(xi1 @ s.imap.Kinv - q2))))
        res["flexjoint_gap"] = gap
        gaps.append(gap)
    res["tol"] = ex["equivalence_tol"]
    res["passed"] = bool(all(g <= ex["equivalence_tol"] for g in gaps))
    write_json(res, os.path.join(_outdir(cfg), "equivalence.json"))
    print(f"{'PASS' if res['passed'] else 'FAIL'} gap = {max(gaps):.3g}")
    return 0 if res["passed"] else 1


COMMANDS = {
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "gain-search": cmd_gain_search,
    "ugas": cmd_ugas,
    "equivalence": cmd_equivalence,
}


def build_parser():
    p = argparse.ArgumentParser(prog="eltrack", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration (all defaults explicit) and exit")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--h", type=float)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--print-config", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = {}
        if args.command:
            overrides = {"seed": args.seed, "output.dir": args.out, "numerics.h": args.h,
                         "numerics.horizon": args.horizon}
        cfg = load_config(getattr(args, "config", None), overrides)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        code = COMMANDS[args.command](cfg)
        with open(os.path.join(cfg["output"]["dir"], "config.toml"), "w") as fh:
            fh.write(dump_config(cfg))
        return code
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
