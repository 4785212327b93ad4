"""``lbvcnn`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 internal
invariant violation. ``--config FILE`` loads a JSON object whose keys are the
flag names (dashes or underscores); explicit flags win. ``LBV_THREADS`` caps
BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bank import generate_bank, load_bank, save_bank
from .errors import InvariantError, LbvError
from .tensor import load_tensor, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# command -> {option: default}; flags left unset fall back to config, then these
DEFAULTS = {
    "gen-bank": {"count": 64, "sparsity": 0.9, "seed": 0, "out": "bank.lbvb"},
    "synth-data": {"classes": 6, "per_class": 40, "seed": 0, "size": 64, "frames": 11,
                   "out": "data"},
    "train": {"data": None, "view": "xy", "bank": None, "folds": "10", "epochs": 50,
              "lr": 1e-3, "batch": 16, "seed": 0, "channels": 64, "augment": True,
              "out": "run"},
    "finetune": {"ckpts": None, "data": None, "epochs": 100, "lr": 1e-4, "momentum": 0.9,
                 "batch": 16, "seed": 0, "augment": True, "out": "joint"},
    "eval": {"ckpt": None, "data": None},
    "bench": {"shapes": None, "bank": None, "repeat": 3, "dtype": "float32", "seed": 0},
    "lbp-extract": {"data": None, "mode": "lbptop", "p": None, "r": 1.0, "L": 1,
                    "out": "descriptors"},
    "export-maps": {"ckpt": None, "input": None, "layer": 1, "channels": 6, "out": "maps"},
}


def build_parser():
    p = _Parser(prog="lbvcnn", description="Local binary volume CNN toolkit")
    p.add_argument("--config", help="JSON file with option defaults")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-bank", help="generate a ternary filter bank")
    g.add_argument("--count", type=int)
    g.add_argument("--sparsity", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    s = sub.add_parser("synth-data", help="write a synthetic motion dataset")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", dest="per_class", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--out")

    t = sub.add_parser("train", help="cross-validated subnet training")
    t.add_argument("--data")
    t.add_argument("--view", choices=("xy", "xt", "yt"))
    t.add_argument("--bank")
    t.add_argument("--folds", help="fold count or 'loso'")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--channels", type=int, help="width of every LBV block")
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--out")

    f = sub.add_parser("finetune", help="fuse three trained views and fine-tune")
    f.add_argument("--ckpts", nargs=3, metavar=("XY", "XT", "YT"))
    f.add_argument("--data")
    f.add_argument("--epochs", type=int)
    f.add_argument("--lr", type=float, help="default 1e-4; 1e-7 reproduces the original setting")
    f.add_argument("--momentum", type=float)
    f.add_argument("--batch", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    f.add_argument("--out")

    e = sub.add_parser("eval", help="evaluate a checkpoint or a training run")
    e.add_argument("--ckpt")
    e.add_argument("--data")

    b = sub.add_parser("bench", help="ternary kernel vs dense reference")
    b.add_argument("--shapes", help="JSON list of [N, C, D, H, W]")
    b.add_argument("--bank")
    b.add_argument("--repeat", type=int)
    b.add_argument("--dtype", choices=("float32", "float64"))
    b.add_argument("--seed", type=int)

    lx = sub.add_parser("lbp-extract", help="LBP / VLBP / LBP-TOP descriptors")
    lx.add_argument("--data")
    lx.add_argument("--mode", choices=("lbp", "vlbp", "lbptop"))
    lx.add_argument("--p", type=int)
    lx.add_argument("--r", type=float)
    lx.add_argument("--L", type=int)
    lx.add_argument("--out")

    x = sub.add_parser("export-maps", help="dump LBV block responses")
    x.add_argument("--ckpt")
    x.add_argument("--input", help="LBVT cuboid in XY-T layout")
    x.add_argument("--layer", type=int)
    x.add_argument("--channels", help="count N (first N) or comma list of indices")
    x.add_argument("--out")
    return p


def resolve(args):
    """Merge flags over config file over defaults."""
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    out = {}
    for key, default in DEFAULTS[args.command].items():
        val = getattr(args, key, None)
        out[key] = val if val is not None else cfg.get(key, default)
    return out


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-")
                                                                      for k in missing))


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# -- commands ----------------------------------------------------------------

def cmd_gen_bank(cfg):
    if cfg["count"] < 1:
        raise UsageError("--count must be >= 1")
    if not 0.0 <= cfg["sparsity"] <= 1.0:
        raise UsageError("--sparsity must be in [0, 1]")
    bank = generate_bank(cfg["count"], cfg["sparsity"], cfg["seed"])
    save_bank(bank, cfg["out"])
    _emit({"bank": cfg["out"], "id": bank.id, "count": bank.count,
           "nonzero_fraction": bank.nonzero_fraction()})
    return EXIT_OK


def cmd_synth_data(cfg):
    from .video import CLASS_PATTERNS, save_dataset, synth_dataset

    if not 2 <= cfg["classes"] <= len(CLASS_PATTERNS):
        raise UsageError(f"--classes must be in [2, {len(CLASS_PATTERNS)}]")
    if cfg["per_class"] < 1 or cfg["size"] < 4 or cfg["frames"] < 2:
        raise UsageError("--per-class >= 1, --size >= 4 and --frames >= 2 are required")
    ds = synth_dataset(cfg["classes"], cfg["per_class"], cfg["seed"], cfg["size"], cfg["frames"])
    save_dataset(ds, cfg["out"])
    balance = {name: int((ds.labels == i).sum()) for i, name in enumerate(ds.class_names)}
    _emit({"out": cfg["out"], "samples": len(ds), "class_balance": balance,
           "subjects": len(set(ds.subjects))})
    return EXIT_OK


def _splits(ds, folds):
    from .trainer import kfold_split, loso_split

    if str(folds) == "loso":
        return loso_split(ds)
    try:
        k = int(folds)
    except ValueError:
        raise UsageError(f"--folds must be an integer or 'loso', got {folds!r}") from None
    return kfold_split(ds, k)


def cmd_train(cfg):
    from .network import save_network
    from .trainer import cross_validated, evaluate, subnet_config, train_subnet
    from .video import load_dataset

    _require(cfg, "data", "bank")
    if cfg["epochs"] < 0 or cfg["batch"] < 1 or cfg["lr"] <= 0 or cfg["channels"] < 1:
        raise UsageError("need --epochs >= 0, --batch >= 1, --lr > 0, --channels >= 1")
    bank = load_bank(cfg["bank"])
    ds = load_dataset(cfg["data"])
    splits = _splits(ds.originals(), cfg["folds"])
    os.makedirs(cfg["out"], exist_ok=True)
    opt = subnet_config(epochs=cfg["epochs"], learning_rate=cfg["lr"], batch_size=cfg["batch"],
                        seed=cfg["seed"])
    plan = (cfg["channels"],) * 5
    results, folds = [], []
    with open(os.path.join(cfg["out"], "metrics.jsonl"), "w") as metrics:
        def log(line):
            metrics.write(line + "\n")

        for k, (train, test) in enumerate(splits):
            net, run = train_subnet(train, cfg["view"], bank, opt, None, plan,
                                    bool(cfg["augment"]), log=log)
            res = evaluate(net, test)
            results.append(res)
            path = os.path.join(cfg["out"], f"fold{k + 1:02d}.lbvn")
            save_network(net, path)
            folds.append({"fold": k + 1, "checkpoint": os.path.basename(path),
                          "accuracy": res.accuracy, "test_samples": len(test),
                          "confusion": res.confusion.tolist(), "wall_time": run.wall_time})
            _emit({"view": cfg["view"], "fold": k + 1, "accuracy": res.accuracy})
    acc, cm = cross_validated(results)
    report = {"kind": "subnet", "view": cfg["view"], "folds": str(cfg["folds"]),
              "data": os.path.abspath(cfg["data"]), "cv_accuracy": acc,
              "confusion": cm.tolist(), "fold_results": folds, "config": cfg}
    with open(os.path.join(cfg["out"], "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonable)
    _emit({"view": cfg["view"], "cv_accuracy": acc, "confusion": cm})
    return EXIT_OK


def _load_report(run_dir):
    path = os.path.join(run_dir, "report.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"{run_dir} has no report.json; pass a train --out directory") from None


def cmd_finetune(cfg):
    from .network import build_fusion, load_network, save_network
    from .tensor import Rng
    from .trainer import OptimConfig, cross_validated, evaluate, finetune_fused
    from .video import load_dataset

    _require(cfg, "ckpts")
    if cfg["epochs"] < 0 or cfg["batch"] < 1 or cfg["lr"] < 0:
        raise UsageError("need --epochs >= 0, --batch >= 1, --lr >= 0")
    reports = [_load_report(d) for d in cfg["ckpts"]]
    views = [r["view"] for r in reports]
    if views != ["xy", "xt", "yt"]:
        raise ValueError(f"checkpoints must be given in XY XT YT order, got {views}")
    if len({r["folds"] for r in reports}) != 1:
        raise ValueError("the three runs used different fold protocols")
    data = cfg["data"] or reports[0]["data"]
    ds = load_dataset(data)
    splits = _splits(ds.originals(), reports[0]["folds"])
    opt = OptimConfig(kind="sgd-momentum", learning_rate=cfg["lr"], momentum=cfg["momentum"],
                      batch_size=cfg["batch"], epochs=cfg["epochs"], seed=cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    results = []
    with open(os.path.join(cfg["out"], "metrics.jsonl"), "w") as metrics:
        for k, (train, test) in enumerate(splits):
            nets = [load_network(os.path.join(d, r["fold_results"][k]["checkpoint"]), "gemm")
                    for d, r in zip(cfg["ckpts"], reports)]
            fused = build_fusion(*nets, rng=Rng(cfg["seed"]).child(k), copy=False)
            finetune_fused(fused, train, opt, None, bool(cfg["augment"]),
                           log=lambda line: metrics.write(line + "\n"))
            res = evaluate(fused, test)
            results.append(res)
            save_network(fused, os.path.join(cfg["out"], f"fold{k + 1:02d}.lbvn"))
            _emit({"view": "joint", "fold": k + 1, "accuracy": res.accuracy})
    acc, cm = cross_validated(results)
    table = {f"LBVCNN-{r['view'].upper()}": r["cv_accuracy"] for r in reports}
    table["LBVCNN(joint)"] = acc
    with open(os.path.join(cfg["out"], "report.json"), "w") as fh:
        json.dump({"kind": "fusion", "folds": reports[0]["folds"], "data": os.path.abspath(data),
                   "cv_accuracy": acc, "confusion": cm.tolist(), "summary": table,
                   "config": cfg}, fh, indent=2, sort_keys=True, default=_jsonable)
    _emit({"summary": table, "confusion": cm})
    return EXIT_OK


def cmd_eval(cfg):
    from .network import load_network
    from .trainer import cross_validated, evaluate
    from .video import load_dataset

    _require(cfg, "ckpt")
    if os.path.isdir(cfg["ckpt"]):
        report = _load_report(cfg["ckpt"])
        ds = load_dataset(cfg["data"] or report["data"])
        splits = _splits(ds.originals(), report["folds"])
        results = []
        for (_, test), fr in zip(splits, report["fold_results"] if "fold_results" in report
                                 else _fold_files(cfg["ckpt"], len(splits))):
            net = load_network(os.path.join(cfg["ckpt"], fr["checkpoint"]), "gemm")
            results.append(evaluate(net, test))
        acc, cm = cross_validated(results)
    else:
        _require(cfg, "data")
        net = load_network(cfg["ckpt"], "gemm")
        res = evaluate(net, load_dataset(cfg["data"]).originals())
        acc, cm = res.accuracy, res.confusion
    pct = 100.0 * cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    _emit({"accuracy": acc, "confusion": cm, "confusion_percent": np.round(pct, 2)})
    return EXIT_OK


def _fold_files(run_dir, n):
    return [{"checkpoint": f"fold{k + 1:02d}.lbvn"} for k in range(n)]


def cmd_bench(cfg):
    from .experiment import DEFAULT_BENCH_SHAPES, bench_shape

    shapes = DEFAULT_BENCH_SHAPES
    if cfg["shapes"]:
        with open(cfg["shapes"]) as fh:
            shapes = json.load(fh)
        if not all(isinstance(s, list) and len(s) == 5 for s in shapes):
            raise ValueError("shapes file must hold a list of [N, C, D, H, W]")
    bank = load_bank(cfg["bank"]) if cfg["bank"] else generate_bank(seed=cfg["seed"])
    dtype = np.dtype(cfg["dtype"])
    rng = np.random.default_rng(cfg["seed"])
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for shape in shapes:
        row = bench_shape(tuple(int(v) for v in shape), bank, cfg["repeat"], dtype, rng)
        _emit(row)
        if row["ternary_ops"]["mul"] != 0:
            raise InvariantError(f"ternary stage performed multiplications for {shape}")
        if row["max_rel_deviation"] > tol:
            raise InvariantError(f"ternary stage deviates by {row['max_rel_deviation']} for {shape}")
    return EXIT_OK


def cmd_lbp_extract(cfg):
    from .lbp import lbp_histogram, lbp_top_descriptor, save_descriptor, vlbp_descriptor, Descriptor
    from .video import load_dataset

    _require(cfg, "data")
    mode = cfg["mode"]
    p = cfg["p"] if cfg["p"] is not None else (4 if mode == "vlbp" else 8)
    r = cfg["r"]
    if p < 1 or r <= 0:
        raise UsageError("--p must be >= 1 and --r > 0")
    if mode == "vlbp" and p > 6:
        raise UsageError("vlbp histograms have 2**(3p+2) bins; keep --p <= 6")
    ds = load_dataset(cfg["data"])
    os.makedirs(cfg["out"], exist_ok=True)
    dim = None
    for i, s in enumerate(ds.samples):
        if mode == "lbp":
            parts = [lbp_histogram(s.data[:, :, t], p, r) for t in range(s.data.shape[2])]
            desc = Descriptor(sum(d.bins for d in parts), parts[0].layout, parts[0].params)
        elif mode == "vlbp":
            desc = vlbp_descriptor(s.data, p, r, cfg["L"])
        else:
            desc = lbp_top_descriptor(s.data, p, r, r, r)
        dim = len(desc)
        save_descriptor(desc, os.path.join(cfg["out"], f"{i:05d}.lbvt"))
    _emit({"mode": mode, "p": p, "r": r, "samples": len(ds), "dimensionality": dim})
    return EXIT_OK


def _channel_list(spec, available):
    spec = str(spec)
    if "," in spec:
        chans = [int(c) for c in spec.split(",") if c.strip()]
    else:
        chans = list(range(min(int(spec), available)))
    if not chans or any(c < 0 or c >= available for c in chans):
        raise UsageError(f"channels must lie in [0, {available})")
    return chans


def write_pgm(path, img):
    """Binary 8-bit PGM."""
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def block_response(net, cuboid, layer):
    """Output of LBV block ``layer`` (1-based) for one XY-T cuboid, ``[C, D, H, W]``."""
    from .network import VIEW_PERMUTATIONS
    from .tensor import permute_axes

    nblocks = len(net.blocks())
    if not 1 <= layer <= nblocks:
        raise UsageError(f"--layer must be in [1, {nblocks}]")
    x = permute_axes(np.asarray(cuboid, dtype=np.float64), VIEW_PERMUTATIONS[net.spec.view])
    h = net._prepare(x.astype(net.fc.params["weight"].dtype))
    seen = 0
    for _, lay in net.body:
        h = lay.forward(h, False)
        if lay in net.blocks():
            seen += 1
            if seen == layer:
                return h[0]
    raise AssertionError("unreachable")


def cmd_export_maps(cfg):
    from .network import Subnet, load_network

    _require(cfg, "ckpt", "input")
    net = load_network(cfg["ckpt"])
    if not isinstance(net, Subnet):
        raise ValueError("export-maps expects a single-view checkpoint")
    maps = block_response(net, load_tensor(cfg["input"]), cfg["layer"])
    chans = _channel_list(cfg["channels"], maps.shape[0])
    os.makedirs(cfg["out"], exist_ok=True)
    sidecar = {"layer": cfg["layer"], "view": net.spec.view, "channels": {}}
    images = 0
    for c in chans:
        vol = maps[c]
        save_tensor(vol, os.path.join(cfg["out"], f"layer{cfg['layer']}_ch{c:02d}.lbvt"))
        lo, hi = float(vol.min()), float(vol.max())
        scaled = np.zeros(vol.shape) if hi == lo else (vol - lo) / (hi - lo)
        gray = np.round(scaled * 255).astype(np.uint8)
        for t in range(vol.shape[-1]):
            write_pgm(os.path.join(cfg["out"], f"layer{cfg['layer']}_ch{c:02d}_f{t:02d}.pgm"),
                      gray[..., t])
            images += 1
        sidecar["channels"][str(c)] = {"min": lo, "max": hi}
    with open(os.path.join(cfg["out"], "maps.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    _emit({"out": cfg["out"], "channels": chans, "images": images})
    return EXIT_OK


COMMANDS = {"gen-bank": cmd_gen_bank, "synth-data": cmd_synth_data, "train": cmd_train,
            "finetune": cmd_finetune, "eval": cmd_eval, "bench": cmd_bench,
            "lbp-extract": cmd_lbp_extract, "export-maps": cmd_export_maps}


def _thread_limit():
    n = os.environ.get("LBV_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg = resolve(args)
        print(json.dumps({"command": args.command, "config": cfg}, sort_keys=True),
              file=sys.stderr)
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (LbvError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
