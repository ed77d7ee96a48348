"""Command-line entry point: ``topoldm <subcommand> [options]``.

Option precedence is command-line flag, then ``--config`` JSON file, then
built-in default. Outputs default to ``$TOPOLDM_OUT/<subcommand>`` (``runs/``
when unset). Every run writes its resolved configuration and a log next to
its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, ShardFormatError, TopoLDMError, TrainingDivergedError

log = logging.getLogger("topoldm")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FILE, EXIT_FORMAT, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5
OUT_ENV = "TOPOLDM_OUT"


def _csv(cast):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [cast(v) for v in text]
        return [cast(v) for v in str(text).split(",") if v.strip()]
    return parse


# defaults per subcommand; every option below is looked up here when not given
DEFAULTS = {
    "gen": dict(n=2000, res=64, seed=0, out=None, normalize=True, threads=1, augment=""),
    "optimize": dict(problem_seed=0, res=64, volfrac=None, max_iters=200, r_min=2.0, out=None),
    "train-vae": dict(data=None, out=None, d=64, b1=0.075, b2=0.3, width=32, cond_width=None, steps=1000,
                      batch=32, lr=1e-4, wd=0.05, seed=0, f64=False, recon_mode="topology",
                      kl_reduction="mean", log_every=50),
    "train-ldm": dict(data=None, vae=None, out=None, steps=1000, T=200, hidden=256, depth=2, time_dim=64,
                      batch=32, lr=1e-4, wd=0.05, seed=0, f64=False, log_every=50),
    "sample": dict(vae=None, ldm=None, data=None, problem_seed=None, n=None, res=None, seed=0, out=None,
                   normalize=True, f64=False, threads=1),
    "evaluate": dict(generated=None, truth=None, out=None, bin_width=1.0),
    "grid": dict(data=None, out=None, d=[64, 128, 192, 256], b1=[0.075, 0.15, 0.3], b2=[0.1, 0.3], steps=200,
                 width=16, cond_width=8, batch=32, lr=1e-3, wd=0.05, seed=0, f64=False, limit=None),
    "plot": dict(data=None, report=None, out=None, n=16),
}


def _parser():
    p = argparse.ArgumentParser(prog="topoldm", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--threads", type=int, help="worker cap (default 1)")
        return sp

    g = add("gen", "generate a dataset shard of SIMP-optimized samples")
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--res", type=int, help="grid resolution (elements per side)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="shard path")
    g.add_argument("--normalize", action=argparse.BooleanOptionalAction, help="divide vm/SED by per-sample max")
    g.add_argument("--augment", help="comma list of rot90,rot180,rot270,mirror_lr,mirror_ud")

    o = add("optimize", "run SIMP on one sampled problem")
    o.add_argument("--problem-seed", dest="problem_seed", type=int)
    o.add_argument("--res", type=int)
    o.add_argument("--volfrac", type=float)
    o.add_argument("--max-iters", dest="max_iters", type=int)
    o.add_argument("--r-min", dest="r_min", type=float)
    o.add_argument("--out", help="shard path for the single record")

    v = add("train-vae", "train the dual-encoder VAE")
    v.add_argument("--data", help="training shard")
    v.add_argument("--out", help="checkpoint path")
    v.add_argument("--d", type=int, help="latent size")
    v.add_argument("--b1", type=float, help="KL weight")
    v.add_argument("--b2", type=float, help="auxiliary loss weight")
    v.add_argument("--width", type=int)
    v.add_argument("--cond-width", dest="cond_width", type=int)
    v.add_argument("--steps", type=int)
    v.add_argument("--batch", type=int)
    v.add_argument("--lr", type=float)
    v.add_argument("--wd", type=float)
    v.add_argument("--seed", type=int)
    v.add_argument("--f64", action=argparse.BooleanOptionalAction, help="64-bit compute")
    v.add_argument("--recon-mode", dest="recon_mode", choices=["topology", "all"])
    v.add_argument("--kl-reduction", dest="kl_reduction", choices=["mean", "sum"])
    v.add_argument("--log-every", dest="log_every", type=int)

    lz = add("train-ldm", "train the latent diffusion model on a frozen VAE")
    lz.add_argument("--data")
    lz.add_argument("--vae", help="VAE checkpoint")
    lz.add_argument("--out", help="checkpoint path")
    lz.add_argument("--steps", type=int)
    lz.add_argument("--T", type=int, help="diffusion steps")
    lz.add_argument("--hidden", type=int)
    lz.add_argument("--depth", type=int)
    lz.add_argument("--time-dim", dest="time_dim", type=int)
    lz.add_argument("--batch", type=int)
    lz.add_argument("--lr", type=float)
    lz.add_argument("--wd", type=float)
    lz.add_argument("--seed", type=int)
    lz.add_argument("--f64", action=argparse.BooleanOptionalAction)
    lz.add_argument("--log-every", dest="log_every", type=int)

    s = add("sample", "generate designs for given conditions")
    s.add_argument("--vae")
    s.add_argument("--ldm")
    s.add_argument("--data", help="shard whose conditions are used")
    s.add_argument("--problem-seed", dest="problem_seed", type=_csv(int), help="comma list of problem seeds")
    s.add_argument("--n", type=int, help="use the first n conditions")
    s.add_argument("--res", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output shard")
    s.add_argument("--normalize", action=argparse.BooleanOptionalAction)
    s.add_argument("--f64", action=argparse.BooleanOptionalAction)

    e = add("evaluate", "score generated designs against ground truth")
    e.add_argument("--generated", help="shard of generated designs")
    e.add_argument("--truth", help="ground-truth shard")
    e.add_argument("--out", help="report directory")
    e.add_argument("--bin-width", dest="bin_width", type=float)

    gr = add("grid", "VAE hyperparameter grid at toy scale")
    gr.add_argument("--data")
    gr.add_argument("--out", help="report directory")
    gr.add_argument("--d", type=_csv(int))
    gr.add_argument("--b1", type=_csv(float))
    gr.add_argument("--b2", type=_csv(float))
    gr.add_argument("--steps", type=int)
    gr.add_argument("--width", type=int)
    gr.add_argument("--cond-width", dest="cond_width", type=int)
    gr.add_argument("--batch", type=int)
    gr.add_argument("--lr", type=float)
    gr.add_argument("--wd", type=float)
    gr.add_argument("--seed", type=int)
    gr.add_argument("--f64", action=argparse.BooleanOptionalAction)
    gr.add_argument("--limit", type=int, help="use only the first N samples")

    pl_ = add("plot", "render designs from a shard or a report histogram")
    pl_.add_argument("--data", help="shard to render")
    pl_.add_argument("--report", help="evaluate output directory")
    pl_.add_argument("--out", help="image path")
    pl_.add_argument("--n", type=int)
    return p


def resolve(command, flags: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = dict(DEFAULTS[command])
    cfg.setdefault("threads", 1)
    path = flags.pop("config", None)
    if path:
        try:
            from_file = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()}
        unknown = sorted(set(from_file) - set(cfg))
        if unknown:
            raise UsageError(f"unknown option(s) in {path}: {', '.join(unknown)}")
        cfg.update(from_file)
    cfg.update(flags)
    if cfg.get("out") is None:
        root = Path(os.environ.get(OUT_ENV, "runs"))
        suffix = {"gen": "data.shard", "optimize": "optimized.shard", "train-vae": "vae.tckp",
                  "train-ldm": "ldm.tckp", "sample": "samples.shard", "plot": "plot.png"}.get(command, "")
        cfg["out"] = str(root / command / suffix) if suffix else str(root / command)
    return cfg


class UsageError(Exception):
    pass


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _exists(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _sidecars(out: Path, command, cfg):
    """Config and log paths for an output file or directory."""
    if command in ("evaluate", "grid"):
        out.mkdir(parents=True, exist_ok=True)
        return out / "config.json", out / "run.log"
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(str(out) + ".config.json"), Path(str(out) + ".log")


def _setup_logging(path):
    log.handlers.clear()
    log.setLevel(logging.INFO)
    fh = logging.FileHandler(path, mode="w", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(sh)


def _precision(cfg):
    from .autodiff.tensor import set_default_dtype

    set_default_dtype(np.float64 if cfg.get("f64") else np.float32)


# --- subcommands ------------------------------------------------------------------

def cmd_gen(cfg):
    from .dataset import augment_records, generate_records
    from .shards import write_shard

    recs = generate_records(cfg["n"], cfg["res"], cfg["seed"], cfg["normalize"], cfg["threads"],
                            progress=lambda k, n: log.info(f"sample {k}/{n}") if k % 50 == 0 or k == n else None)
    ops = _csv(str)(cfg["augment"]) if cfg["augment"] else []
    if ops:
        recs = augment_records(recs, tuple(ops))
    write_shard(cfg["out"], recs)
    log.info(f"wrote {len(recs)} records to {cfg['out']}")


def cmd_optimize(cfg):
    from dataclasses import replace

    from .problems import build_record, sample_problem
    from .shards import write_shard
    from .simp import OptimizerConfig

    prob = sample_problem(cfg["problem_seed"], cfg["res"])
    if cfg["volfrac"] is not None:
        prob = replace(prob, target_vf=float(cfg["volfrac"]))
    rec = build_record(prob, config=OptimizerConfig(max_iters=cfg["max_iters"], r_min=cfg["r_min"]), normalize=True)
    write_shard(cfg["out"], [rec])
    log.info(f"bc={prob.bc_set} load_elem={prob.load_element} angle={prob.load_angle:.4f} vf={prob.target_vf:.4f}")
    log.info(f"compliance={rec.gt_compliance:.6g} iterations={rec.meta['iterations']}")


def _load_channels(path):
    from .shards import read_rasters

    return read_rasters(_exists(path, "dataset"))


def cmd_train_vae(cfg):
    from .autodiff.tensor import get_default_dtype
    from .persistence import save_vae
    from .vae import DualVAE, TrainLog, VAEConfig, reconstruction_mse, train_vae

    _need(cfg, "data")
    _precision(cfg)
    X = _load_channels(cfg["data"]).astype(get_default_dtype())
    vcfg = VAEConfig(latent_dim=cfg["d"], resolution=X.shape[2], width=cfg["width"], cond_width=cfg["cond_width"],
                     beta1=cfg["b1"], beta2=cfg["b2"], lr=cfg["lr"], weight_decay=cfg["wd"],
                     batch_size=cfg["batch"], steps=cfg["steps"], seed=cfg["seed"], recon_mode=cfg["recon_mode"],
                     kl_reduction=cfg["kl_reduction"], log_every=cfg["log_every"])
    model = DualVAE(vcfg)
    header = next(TrainLog().lines())
    log.info(header)

    def cb(step, b):
        if step % cfg["log_every"] == 0 or step == vcfg.steps - 1:
            log.info(f"{step}\t{b.recon:.6g}\t{b.kl:.6g}\t{b.vf:.6g}\t{b.ld:.6g}\t{b.fm:.6g}\t{b.total:.6g}"
                     f"\t{b.fm_hard:.3g}\t{b.cond_recon:.6g}")

    _, tlog = train_vae(model, X, callback=cb)
    save_vae(cfg["out"], model)
    Path(str(cfg["out"]) + ".losses.tsv").write_text("\n".join(tlog.lines()) + "\n")
    log.info(f"reconstruction_mse={reconstruction_mse(model, X[:, :1]):.6g}")
    log.info(f"saved {cfg['out']}")


def _latents(vae, X):
    from .estimators import TopologyVAE

    est = TopologyVAE.from_model(vae)
    return est, est.transform(X), est.encode_conditions(X)


def cmd_train_ldm(cfg):
    from .autodiff.tensor import get_default_dtype
    from .diffusion import ConditionalLDM, LDMConfig, train_ldm
    from .persistence import load_vae, save_ldm

    _need(cfg, "data", "vae")
    _precision(cfg)
    X = _load_channels(cfg["data"]).astype(get_default_dtype())
    vae = load_vae(_exists(cfg["vae"], "VAE checkpoint"))
    _, z0, c = _latents(vae, X)
    lcfg = LDMConfig(T=cfg["T"], hidden=cfg["hidden"], depth=cfg["depth"], time_dim=cfg["time_dim"], lr=cfg["lr"],
                     weight_decay=cfg["wd"], batch_size=cfg["batch"], steps=cfg["steps"], seed=cfg["seed"])
    model = ConditionalLDM(z0.shape[1], lcfg, c.shape[1])
    model.fit_scaling(z0, c)
    log.info("step\tloss")

    def cb(step, loss):
        if step % cfg["log_every"] == 0 or step == lcfg.steps - 1:
            log.info(f"{step}\t{loss:.6g}")

    _, losses = train_ldm(model, z0, c, callback=cb)
    save_ldm(cfg["out"], model)
    Path(str(cfg["out"]) + ".losses.tsv").write_text("step\tloss\n" + "".join(f"{k}\t{v:.8g}\n" for k, v in enumerate(losses)))
    log.info(f"saved {cfg['out']}")


def _condition_records(cfg):
    from .dataset import records_from_array
    from .problems import SampleRecord, condition_channels, sample_problem
    from .shards import read_shard

    if cfg.get("data"):
        recs = read_shard(_exists(cfg["data"], "dataset"))
    elif cfg.get("problem_seed"):
        _need(cfg, "res")
        recs = []
        for s in cfg["problem_seed"]:
            prob = sample_problem(int(s), cfg["res"])
            cond = condition_channels(prob, normalize=cfg["normalize"])
            ch = np.concatenate([np.zeros((1,) + cond.shape[1:]), cond]).astype(np.float32)
            recs.append(SampleRecord(ch, prob, float("nan"), cfg["normalize"]))
    else:
        raise UsageError("sample needs --data or --problem-seed")
    if cfg.get("n"):
        recs = recs[: cfg["n"]]
    return recs, records_from_array


def cmd_sample(cfg):
    from .autodiff.tensor import get_default_dtype
    from .dataset import stack_channels
    from .estimators import LatentDiffusion, TopologyVAE
    from .persistence import load_ldm, load_vae
    from .shards import write_shard

    _need(cfg, "vae", "ldm")
    _precision(cfg)
    vae = TopologyVAE.from_model(load_vae(_exists(cfg["vae"], "VAE checkpoint")))
    ldm = LatentDiffusion.from_model(load_ldm(_exists(cfg["ldm"], "LDM checkpoint")))
    recs, rebuild = _condition_records(cfg)
    X = stack_channels(recs).astype(get_default_dtype())
    c = vae.encode_conditions(X)
    designs = vae.inverse_transform(ldm.predict(c, cfg["seed"]))
    out = X.copy()
    out[:, 0] = designs
    new = rebuild(out, recs)
    for r in new:
        r.meta.update({"vae": Path(cfg["vae"]).name, "ldm": Path(cfg["ldm"]).name, "sample_seed": cfg["seed"]})
    write_shard(cfg["out"], new)
    log.info(f"wrote {len(new)} generated designs to {cfg['out']}")


def cmd_evaluate(cfg):
    from .evaluation import evaluate, histogram, plot_histogram
    from .shards import read_shard

    _need(cfg, "generated", "truth")
    gen = read_shard(_exists(cfg["generated"], "generated shard"))
    truth = read_shard(_exists(cfg["truth"], "ground-truth shard"))
    if len(gen) > len(truth):
        raise UsageError(f"{len(gen)} generated designs but only {len(truth)} ground-truth records")
    truth = truth[: len(gen)]
    report = evaluate(np.stack([g.topology for g in gen]) if gen else np.zeros((0, 1, 1)), truth)
    out = Path(cfg["out"])
    (out / "report.tsv").write_text(report.table())
    (out / "summary.txt").write_text(report.text())
    hist = histogram(report.errors, cfg["bin_width"])
    (out / "histogram.tsv").write_text("bin\tcount\n" + "".join(f"{b}\t{c}\n" for b, c in hist.rows()))
    (out / "errors.tsv").write_text("index\tcompliance_error_%\n" + "".join(f"{k}\t{e:.8g}\n" for k, e in enumerate(report.errors)))
    plot_histogram(hist, out / "histogram.png")
    log.info(report.text().rstrip())


def cmd_grid(cfg):
    from .evaluation import beta_table, format_grid, grid_runner, latent_dim_table
    from .autodiff.tensor import get_default_dtype
    from .vae import VAEConfig

    _need(cfg, "data")
    _precision(cfg)
    X = _load_channels(cfg["data"]).astype(get_default_dtype())
    if cfg.get("limit"):
        X = X[: cfg["limit"]]
    base = VAEConfig(resolution=X.shape[2], width=cfg["width"], cond_width=cfg["cond_width"], lr=cfg["lr"],
                     weight_decay=cfg["wd"], batch_size=cfg["batch"], steps=cfg["steps"], seed=cfg["seed"])
    cells = grid_runner(X, cfg["d"], cfg["b1"], cfg["b2"], base,
                        progress=lambda c: log.info(f"cell D={c.latent_dim} b1={c.beta1:g} b2={c.beta2:g} {c.status}"))
    out = Path(cfg["out"])
    (out / "grid.tsv").write_text(format_grid(cells))
    (out / "latent_dim.tsv").write_text(latent_dim_table(cells))
    (out / "beta.tsv").write_text(beta_table(cells))
    failures = [c for c in cells if c.status != "ok"]
    if failures:
        (out / "failures.txt").write_text("".join(f"{c.latent_dim}\t{c.beta1}\t{c.beta2}\t{c.error}\n" for c in failures))
    log.info(format_grid(cells).rstrip())


def cmd_plot(cfg):
    from .evaluation import Histogram, plot_designs, plot_histogram
    from .shards import read_rasters

    if cfg.get("data"):
        X = read_rasters(_exists(cfg["data"], "dataset"))
        plot_designs(X[: cfg["n"], 0], cfg["out"])
    elif cfg.get("report"):
        path = Path(_exists(Path(cfg["report"]) / "histogram.tsv", "histogram table"))
        rows = [ln.split("\t") for ln in path.read_text().splitlines()[1:] if ln.strip()]
        counts = np.array([int(r[1]) for r in rows])
        edges = np.array([float(r[0].strip("[)").split(",")[0]) for r in rows[:-1]] + [float(rows[-1][0].lstrip(">"))])
        plot_histogram(Histogram(edges, counts, edges[-1]), cfg["out"])
    else:
        raise UsageError("plot needs --data or --report")
    log.info(f"wrote {cfg['out']}")


COMMANDS = {"gen": cmd_gen, "optimize": cmd_optimize, "train-vae": cmd_train_vae, "train-ldm": cmd_train_ldm,
            "sample": cmd_sample, "evaluate": cmd_evaluate, "grid": cmd_grid, "plot": cmd_plot}


def main(argv=None) -> int:
    from .autodiff.tensor import get_default_dtype, set_default_dtype

    dtype = get_default_dtype()
    parser = _parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        cfg = resolve(ns.command, flags)
        config_file, log_file = _sidecars(Path(cfg["out"]), ns.command, cfg)
        config_file.write_text(json.dumps({"command": ns.command, **cfg}, indent=2, sort_keys=True) + "\n")
        _setup_logging(log_file)
        COMMANDS[ns.command](cfg)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (ShardFormatError, CheckpointFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDivergedError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TopoLDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        set_default_dtype(dtype)
        for h in list(log.handlers):
            h.close()
            log.removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
