"""Command-line entry points.

    neuvec simulate | train | evaluate | fit-kernel | ingest | plan

Each command reads an optional JSON config (``--config``); flags override
config values.  Outputs are plain files and depend only on the config,
input files and seed.

Exit codes: 0 success, 1 usage/validation, 2 numerical failure, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import struct
import sys

import numpy as np

from . import dataio, nn, sim
from .errors import (CheckpointError, ConfigError, InsufficientNeighbors, MissingColumn, NeuVecError,
                     NonFiniteLoss, NotPositiveDefinite, ParseError, UnknownFamily)
from .kernels import FAMILIES, KernelSpec, table2_spec
from .linalg import Rng
from .optim import AdamWState, fit_kernel_params
from .vecchia import build_plan

log = logging.getLogger("neuvec")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
BATCH_MAGIC = b"NEUVECBT"
BATCH_VERSION = 1

DEFAULTS = {
    "seed": 0, "m": 30, "iters": 1000, "batch": 256, "preset": "desk", "n_batches": 100,
    "n_test": None, "methods": ["true"], "cap": 200, "split": 0.8, "fit_groups": 1024,
    "fit_iters": 150, "fit_lr": 0.05, "lr_start": 1e-3, "lr_end": 1e-5, "weight_decay": 1e-4,
    "clip_norm": None, "augmentation": "concat", "column_map": None, "lengthscales": None,
    "stop_iter": None, "resume": None, "checkpoint": None, "data": None, "curves": None,
    "kernel": None, "fitted": None,
}


class RunConfig(dict):
    """Merged configuration; missing required keys raise a named ``ConfigError``."""

    def require(self, key):
        val = self.get(key)
        if val is None:
            raise ConfigError(f"missing required config key {key!r}")
        return val


def scenario_spec(cfg):
    """Scenario kernel: explicit ``kernel`` block, else a named benchmark scenario."""
    if cfg.get("kernel"):
        return KernelSpec.from_dict(cfg["kernel"])
    name = cfg.require("scenario")
    matches = [f for f in FAMILIES if f.lower() == str(name).lower()]
    if not matches:
        raise UnknownFamily(f"unknown scenario {name!r}; expected one of {', '.join(FAMILIES)}")
    return table2_spec(matches[0])


# -- batch files -----------------------------------------------------------------

def save_batch(path, batch, meta):
    header = dict(meta, format_version=BATCH_VERSION, shape=list(batch.locs.shape))
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BATCH_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(np.ascontiguousarray(batch.locs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.y, dtype="<f8").tobytes())


def load_batch(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != BATCH_MAGIC:
        raise CheckpointError(f"{path}: not a batch file")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen])
    if header.get("format_version") != BATCH_VERSION:
        raise CheckpointError(f"{path}: unsupported batch format {header.get('format_version')}")
    B, n, d = header["shape"]
    off = 12 + hlen
    locs = np.frombuffer(raw, "<f8", B * n * d, off).reshape(B, n, d).astype(np.float64)
    y = np.frombuffer(raw, "<f8", B * n, off + 8 * B * n * d).reshape(B, n).astype(np.float64)
    return sim.TrainingBatch(locs, y), header


# -- commands --------------------------------------------------------------------

def cmd_simulate(cfg):
    spec = scenario_spec(cfg)
    m, n = int(cfg["m"]), int(cfg["n_batches"])
    if m < 1 or n < 1:
        raise ConfigError("m and n_batches must be >= 1")
    batch = sim.simulate_batch(spec, m, n, Rng(int(cfg["seed"])))
    out = cfg.require("out")
    save_batch(out, batch, {"scenario": spec.to_dict(), "m": m, "seed": int(cfg["seed"])})
    log.info("wrote %d groups of %d points to %s", n, m + 1, out)
    return out


def _train_config(cfg):
    return sim.TrainConfig(lr_start=float(cfg["lr_start"]), lr_end=float(cfg["lr_end"]),
                           weight_decay=float(cfg["weight_decay"]), clip_norm=cfg.get("clip_norm"))


def _state_to_extra(state):
    meta = {"step": state.step, "lr": state.lr, "betas": list(state.betas), "eps": state.eps,
            "weight_decay": state.weight_decay}
    arrays = {}
    if state.m is not None:
        for k, (mk, vk) in enumerate(zip(state.m, state.v)):
            arrays[f"adam.m.{k}"] = mk
            arrays[f"adam.v.{k}"] = vk
    return meta, arrays


def _state_from_extra(meta, arrays, n_params):
    state = AdamWState(lr=meta["lr"], betas=tuple(meta["betas"]), eps=meta["eps"],
                       weight_decay=meta["weight_decay"], step=meta["step"])
    if "adam.m.0" in arrays:
        state.m = [arrays[f"adam.m.{k}"] for k in range(n_params)]
        state.v = [arrays[f"adam.v.{k}"] for k in range(n_params)]
    return state


def cmd_train(cfg):
    out = cfg.require("out")
    iters, seed = int(cfg["iters"]), int(cfg["seed"])
    tcfg = _train_config(cfg)
    if cfg.get("data"):
        return _train_application(cfg, out, iters, seed, tcfg)
    spec = scenario_spec(cfg)
    m, batch = int(cfg["m"]), int(cfg["batch"])
    start, state = 0, None
    if cfg.get("resume"):
        model, extra, arrays = nn.load_checkpoint(cfg["resume"])
        if extra.get("m") != m or extra.get("total_iters") != iters:
            raise ConfigError("resume checkpoint was trained with different m/iters")
        start = int(extra["iteration"])
        state = _state_from_extra(extra["adam"], arrays, len(model.parameters()))
    else:
        model = nn.NeuVecModel(nn.preset_config(cfg["preset"], spec.d, cfg["augmentation"]), seed)
    stop = iters if cfg.get("stop_iter") is None else int(cfg["stop_iter"])
    res = sim.train(model, spec, m, iters, batch, tcfg, seed=seed, start_iter=start, stop_iter=stop,
                    state=state)
    meta, arrays = _state_to_extra(res.state)
    extra = {"iteration": res.next_iter, "total_iters": iters, "m": m, "batch": batch,
             "scenario": spec.to_dict(), "adam": meta}
    nn.save_checkpoint(out, model, extra, arrays)
    _write_losses(out + ".loss.tsv", start, res.losses)
    return out


def _write_losses(path, start, losses):
    with open(path, "w") as fh:
        fh.write("iter\tloss\tsmoothed\n")
        for k, (l, s) in enumerate(zip(losses, sim.smoothed(losses))):
            fh.write(f"{start + k}\t{l:.10g}\t{s:.10g}\n")


def _load_dataset(cfg):
    seed = int(cfg["seed"])
    ing = dataio.ingest_csv(cfg["data"], cfg.get("column_map"))
    records = dataio.subsample_per_float(ing.records, int(cfg["cap"]), Rng((seed, 11)))
    return dataio.build_dataset(records, float(cfg["split"]), Rng((seed, 12)), skipped=ing.skipped)


def _train_application(cfg, out, iters, seed, tcfg):
    ds = _load_dataset(cfg)
    m = int(cfg["m"])
    plans = dataio.build_application_plan(ds, m, cfg.get("lengthscales"))
    groups = dataio.plan_groups(ds, plans, m)
    model = nn.NeuVecModel(nn.preset_config(cfg["preset"], ds.X.shape[1], cfg["augmentation"],
                                            mean_net=True), seed)
    res = sim.train_on_groups(model, groups, iters, int(cfg["batch"]), tcfg, seed=seed)
    meta, arrays = _state_to_extra(res.state)
    nn.save_checkpoint(out, model, {"iteration": res.next_iter, "total_iters": iters, "m": m,
                                    "application": True, "adam": meta}, arrays)
    _write_losses(out + ".loss.tsv", 0, res.losses)
    return out


def cmd_evaluate(cfg):
    spec = scenario_spec(cfg)
    out = cfg.require("out")
    seed = int(cfg["seed"])
    ms = cfg["m"] if isinstance(cfg["m"], list) else [cfg["m"]]
    n_test = int(cfg["n_test"] or 10 * int(cfg["batch"]))
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = [s.strip() for s in methods.split(",") if s.strip()]
    known = {"true", "mt15", "neuvec"}
    bad = [mth for mth in methods if mth.lower() not in known]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; expected one of true, MT15, NeuVec")
    reports = []
    for m in ms:
        m = int(m)
        for mth in methods:
            key = mth.lower()
            if key == "true":
                reports.append(sim.evaluate(spec, spec, m, n_test, seed, method="True"))
            elif key == "mt15":
                if cfg.get("fitted"):
                    with open(cfg["fitted"]) as fh:
                        fitted = KernelSpec.from_dict(json.load(fh)["spec"])
                else:
                    fitted = sim.fit_baseline("MT15", spec, m, int(cfg["fit_groups"]), seed + 1,
                                              iters=int(cfg["fit_iters"]), lr=float(cfg["fit_lr"])).spec
                reports.append(sim.evaluate(fitted, spec, m, n_test, seed, method="MT15"))
            else:
                model, extra, _ = nn.load_checkpoint(cfg.require("checkpoint"))
                if extra.get("m") not in (None, m):
                    raise ConfigError(f"checkpoint trained at m={extra.get('m')}, evaluating m={m}")
                reports.append(sim.evaluate(model, spec, m, n_test, seed, method="NeuVec"))
    sim.write_reports(out, reports)
    if cfg.get("curves"):
        sim.write_curves(cfg["curves"], reports)
    return out


def cmd_fit_kernel(cfg):
    out = cfg.require("out")
    seed = int(cfg["seed"])
    family = cfg.get("family") or "MT15"
    if cfg.get("data"):
        ds = _load_dataset(cfg)
        tr = ds.train_idx
        years, fids = ds.years, ds.float_ids

        def eligible(t, c):
            return (years[tr[c]] == years[tr[t]]) & (fids[tr[c]] != fids[tr[t]])

        plan = build_plan(ds.X[tr], int(cfg["m"]), eligible=eligible)
        y = ds.y[tr]
        res = fit_kernel_params(family, (ds.X[tr], y - y.mean()), plan, iters=int(cfg["fit_iters"]),
                                lr=float(cfg["fit_lr"]))
    else:
        spec = scenario_spec(cfg)
        res = sim.fit_baseline(family, spec, int(cfg["m"]), int(cfg["fit_groups"]), seed,
                               iters=int(cfg["fit_iters"]), lr=float(cfg["fit_lr"]))
    with open(out, "w") as fh:
        json.dump({"spec": res.spec.to_dict(), "nll": res.nll, "initial_nll": res.initial_nll}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    return out


def cmd_ingest(cfg):
    cfg.require("data")
    out = cfg.require("out")
    ds = _load_dataset(cfg)
    ds.write_manifest(out)
    return out


def cmd_plan(cfg):
    cfg.require("data")
    out = cfg.require("out")
    ds = _load_dataset(cfg)
    plans = dataio.build_application_plan(ds, int(cfg["m"]), cfg.get("lengthscales"),
                                          strict=bool(cfg.get("strict", False)))
    with open(out, "w") as fh:
        for year, yp in plans.items():
            fh.write(f"# year {year} n_train {yp.n_train} flagged {len(yp.plan.flagged)}\n")
            for k, c in enumerate(yp.plan.neighbors):
                js = " ".join(str(int(j)) for j in yp.indices[yp.plan.order[c]])
                fh.write(f"{int(yp.indices[yp.plan.order[k]])}:{' ' + js if js else ''}\n")
    return out


COMMANDS = {
    "simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
    "fit-kernel": cmd_fit_kernel, "ingest": cmd_ingest, "plan": cmd_plan,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="neuvec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--scenario")
        p.add_argument("--m", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--preset", choices=["table1", "table4", "desk"])
        p.add_argument("--out")
        p.add_argument("--data", help="input CSV (ingest/plan/application training)")
        p.add_argument("--checkpoint", help="NeuVec checkpoint (evaluate)")
        p.add_argument("--resume", help="checkpoint to resume training from")
        p.add_argument("--stop-iter", dest="stop_iter", type=int)
        p.add_argument("--n-test", dest="n_test", type=int)
        p.add_argument("--n-batches", dest="n_batches", type=int)
        p.add_argument("--methods", help="comma list of true, MT15, NeuVec")
        p.add_argument("--curves", help="directory for per-m curve files")
        p.add_argument("--fitted", help="fit-kernel output to use as the MT15 baseline")
    return parser


def load_config(args):
    cfg = RunConfig(DEFAULTS)
    if args.config:
        with open(args.config) as fh:
            cfg.update(json.load(fh))
    for key, val in vars(args).items():
        if key in ("config", "command", "verbose") or val is None:
            continue
        cfg[key] = val
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg)
    except (ConfigError, UnknownFamily, MissingColumn, ParseError, CheckpointError,
            InsufficientNeighbors, ValueError, KeyError) as exc:
        print(f"neuvec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NotPositiveDefinite, ArithmeticError) as exc:
        print(f"neuvec {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"neuvec {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NeuVecError as exc:
        print(f"neuvec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
