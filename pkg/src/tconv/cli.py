"""``tconv`` command line: gen, train, eval, analyze, gradcheck, import2d, export.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
Every command writes ``run.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import analysis, plotting
from .affine import DomainError
from .checkpoint import load_checkpoint, save_bank, save_checkpoint
from .core import ContractError, EvaluationError, gradcheck, save_tsr, softmax_cross_entropy
from .data import APPEARANCE6, KINDS, MOTION6, load_dataset, make_appearance_dataset, make_motion_dataset, save_dataset
from .network import (DivergenceError, Model, TrainConfig, build_model, predict_logits, tinyt_spec, train,
                      transfer_2d)

log = logging.getLogger("tconv")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# ----------------------------------------------------------------------------
# run manifest


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, outputs: list[str],
                   started: float, extra: dict | None = None) -> Path:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "version": _version(),
        "inputs": inputs,
        "outputs": sorted(outputs),
        "wall_clock_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# commands


def _classes(value: str) -> tuple[str, ...]:
    if value == "motion6":
        return MOTION6
    if value == "appearance6":
        return APPEARANCE6
    kinds = tuple(k.strip() for k in value.split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or len(kinds) < 2:
        raise UsageError(f"--classes must be motion6, appearance6 or >= 2 of {','.join(KINDS)}")
    return kinds


def cmd_gen(args) -> int:
    started = time.time()
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    classes = _classes(args.classes)
    mags = {k: v for k, v in (("translate", args.translate), ("rotate", args.rotate), ("zoom", args.zoom))
            if v is not None}
    if classes == APPEARANCE6:
        clips = make_appearance_dataset(args.n, seed=args.seed, jitter=args.jitter, frames=args.frames,
                                        size=args.size)
    else:
        clips = make_motion_dataset(args.n, classes, seed=args.seed, jitter=args.jitter, frames=args.frames,
                                    size=args.size, magnitudes=mags)
    config = {"classes": args.classes, "n": args.n, "seed": args.seed, "jitter": args.jitter,
              "frames": args.frames, "size": args.size, "magnitudes": mags}
    out = Path(args.out)
    save_dataset(out, clips, classes, config)
    digest = file_hash(out / "manifest.json")
    log.info("wrote %d clips (%d classes) to %s", len(clips), len(classes), out)
    print(f"clips {len(clips)} classes {len(classes)} manifest sha256 {digest}")
    write_manifest(out, "gen", args, {}, ["manifest.json", "clips/"], started, {"manifest_sha256": digest})
    return EXIT_OK


def _param_counts(num_classes: int, in_channels: int) -> dict:
    n3t = build_model(tinyt_spec(num_classes, "3t", in_channels)).n_params()
    n3d = build_model(tinyt_spec(num_classes, "3d", in_channels)).n_params()
    return {"params_3t": n3t, "params_3d": n3d, "ratio_3t_3d": n3t / n3d}


def _write_loss(path: Path, curve: list[float], steps_per_epoch: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        for k, v in enumerate(curve):
            w.writerow([k, k // steps_per_epoch, repr(v)])


def cmd_train(args) -> int:
    started = time.time()
    if args.arch != "tinyt":
        raise UsageError(f"unknown --arch {args.arch!r}")
    X, y, manifest = load_dataset(args.data)
    classes = manifest["classes"]
    spec = tinyt_spec(len(classes), args.mode, X.shape[1], args.seed)
    if args.init == "import2d":
        if not args.bank:
            raise UsageError("--init import2d needs --bank <2D checkpoint>")
        if args.mode != "3t":
            raise UsageError("--init import2d only applies to --mode 3t")
        source, _ = load_checkpoint(args.bank)
        model = transfer_2d(source, spec)
    else:
        model = build_model(spec)
    config = TrainConfig(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size, epochs=args.epochs,
                         seed=args.seed, weight_decay=args.weight_decay, theta_lr_mult=args.theta_lr_mult)

    def progress(epoch, step, loss):
        log.info("epoch %d step %d loss %.4f", epoch, step, loss)

    curve = train(model, X, y, config, callback=progress)
    out = Path(args.out)
    train_state = {"config": vars(config), "steps": len(curve), "dataset": str(args.data), "classes": classes}
    save_checkpoint(out, model, train_state)
    steps_per_epoch = -(-len(X) // config.batch_size)
    _write_loss(out / "loss.csv", curve, steps_per_epoch)
    counts = _param_counts(len(classes), X.shape[1])
    acc = float((predict_logits(model, X).argmax(1) == y).mean())
    print(f"params 3t {counts['params_3t']} 3d {counts['params_3d']} ratio {counts['ratio_3t_3d']:.4f}")
    print(f"model params {model.n_params()} train accuracy {acc:.4f}")
    write_manifest(out, "train", args, {"data": str(args.data), "bank": args.bank},
                   ["bank.json", "thetas.csv", "state.json", "head.weight.tsr", "head.bias.tsr", "loss.csv"],
                   started, {**counts, "n_params": model.n_params(), "train_accuracy": acc})
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    X, y, manifest = load_dataset(args.data)
    if model.head.weight_.shape[1] != len(manifest["classes"]):
        raise UsageError("dataset class count does not match the checkpoint")
    pred = predict_logits(model, X).argmax(1)
    acc = float((pred == y).mean())
    k = len(manifest["classes"])
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + manifest["classes"])
        for name, row in zip(manifest["classes"], confusion):
            w.writerow([name] + row.tolist())
    print(f"accuracy {acc:.4f} on {len(y)} clips")
    write_manifest(out, "eval", args, {"checkpoint": str(args.checkpoint), "data": str(args.data)},
                   ["confusion.csv"], started, {"accuracy": acc})
    return EXIT_OK


def _channel_ref(model: Model, ref: str) -> tuple[str, int]:
    try:
        layer, ch = ref.rsplit(":", 1)
        ch = int(ch)
    except ValueError:
        raise UsageError(f"channel reference must look like layer:index, got {ref!r}") from None
    try:
        conv = model[layer]
    except KeyError:
        raise UsageError(f"unknown layer {layer!r}") from None
    n = None
    if conv.kind not in ("gap", "dense"):
        # relu layers keep the channel count of the conv before them
        for l in model.layers[: model.layers.index(conv) + 1]:
            if hasattr(l, "geometry"):
                n = l.geometry.c_out
    if n is None or not 0 <= ch < n:
        raise UsageError(f"unknown channel {ref!r}" + (f" ({layer} has {n} channels)" if n else ""))
    return layer, ch


def _write_matrix(path: Path, m: np.ndarray) -> None:
    np.savetxt(path, m, delimiter=",", fmt="%.17g")


def _write_trajectory(path: Path, traj: analysis.Trajectory, W: int, H: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x_px", "y_px", "rotation_deg_cw", "scale"])
        for k in range(len(traj.scale)):
            w.writerow([k, repr(float(traj.position[k, 0] * W)), repr(float(traj.position[k, 1] * H)),
                        repr(float(-np.degrees(traj.rotation[k]))), repr(float(traj.scale[k]))])


def _write_distributions(out: Path, dist: analysis.Distributions) -> list[str]:
    files = []
    for axis, table, label in (("scale", dist.scale, "s - 1"), ("rotation", dist.rotation, "rotation (deg, cw)")):
        e = dist.edges(axis)
        path = out / f"hist_{axis}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi"] + list(table))
            for i in range(dist.bins):
                w.writerow([repr(float(e[i])), repr(float(e[i + 1]))] + [int(table[m][i]) for m in table])
        plotting.plot_histograms(path, out / f"hist_{axis}.svg", label)
        files += [path.name, f"hist_{axis}.svg"]
    e = dist.edges("translation")
    path = out / "hist_translation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "count"])
        for m, grid in dist.translation.items():
            for ix in range(dist.bins):
                for iy in range(dist.bins):
                    w.writerow([m, ix, iy, repr(float(e[ix])), repr(float(e[ix + 1])),
                                repr(float(e[iy])), repr(float(e[iy + 1])), int(grid[ix, iy])])
    plotting.plot_translation(path, out / "hist_translation.svg")
    return files + [path.name, "hist_translation.svg"]


def cmd_analyze(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = list(args.checkpoint)
    models = {}
    for i, path in enumerate(checkpoints):
        label = args.labels[i] if args.labels and i < len(args.labels) else Path(path).name or f"model{i}"
        if label in models:
            label = f"{label}-{i}"
        models[label] = load_checkpoint(path)[0]
    main_label, model = next(iter(models.items()))
    outputs = []
    extra = {}

    # validate channel references before writing anything
    traj_refs = [_channel_ref(model, r) for r in args.trajectory]
    sal_refs = [_channel_ref(model, r) for r in args.saliency]
    act_refs = [_channel_ref(model, r) for r in args.actmax]

    records = {label: analysis.records_from_model(m) for label, m in models.items()}
    if not records[main_label]:
        raise UsageError("the checkpoint has no factorized layers to analyze")
    for label, recs in records.items():
        suffix = "" if label == main_label else f"_{label}"
        table = analysis.stats(recs)
        table.to_csv(out / f"stats{suffix}.csv")
        analysis.write_records_csv(out / f"records{suffix}.csv", recs)
        outputs += [f"stats{suffix}.csv", f"records{suffix}.csv"]
        print(f"[{label}]\n{table.format()}")
    outputs += _write_distributions(out, analysis.distributions(records))

    for layer, ch in traj_refs:
        conv = model[layer]
        if conv.kind != "conv3t":
            raise UsageError(f"{layer} has no temporal parameters")
        W, H = conv.geometry.kernel[1:]
        traj = analysis.trajectory(conv.thetas.data[ch])
        stem = f"trajectory_{layer}_{ch}"
        _write_trajectory(out / f"{stem}.csv", traj, W, H)
        plotting.plot_trajectory(out / f"{stem}.csv", out / f"{stem}.svg", f"{layer} channel {ch}")
        outputs += [f"{stem}.csv", f"{stem}.svg"]

    X = y = classes = None
    if args.data:
        X, y, manifest = load_dataset(args.data)
        classes = manifest["classes"]
    if sal_refs:
        if X is None:
            raise UsageError("--saliency needs --data")
        if not 0 <= args.clip < len(X):
            raise UsageError(f"--clip {args.clip} outside the dataset ({len(X)} clips)")
        for layer, ch in sal_refs:
            res = analysis.saliency(model, X[args.clip], layer, ch)
            stem = f"saliency_{layer}_{ch}"
            save_tsr(out / f"{stem}.tsr", res.gradient)
            _write_matrix(out / f"{stem}.csv", res.maps[res.frame])
            plotting.plot_heatmap(out / f"{stem}.csv", out / f"{stem}.svg", f"{layer}:{ch} frame {res.frame}")
            outputs += [f"{stem}.tsr", f"{stem}.csv", f"{stem}.svg"]
            extra.setdefault("saliency", {})[f"{layer}:{ch}"] = {"frame": res.frame, "activation": res.activation}
    for layer, ch in act_refs:
        frames = X.shape[2] if X is not None else args.frames
        size = X.shape[3] if X is not None else args.size
        res = analysis.activation_max(model, layer, ch, steps=args.actmax_steps, lr=args.actmax_lr,
                                      seed=args.seed, decay=args.actmax_decay, frames=frames, size=size)
        stem = f"actmax_{layer}_{ch}"
        _write_matrix(out / f"{stem}.csv", res.frame.sum(axis=0))
        with open(out / f"{stem}_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "activation"])
            w.writerows([k, repr(v)] for k, v in enumerate(res.trace))
        plotting.plot_heatmap(out / f"{stem}.csv", out / f"{stem}.svg", f"{layer}:{ch}", diverging=False)
        outputs += [f"{stem}.csv", f"{stem}_trace.csv", f"{stem}.svg"]
    if X is not None and any(c in analysis.TRANSLATIONS for c in classes):
        rep = analysis.motion_recovery(model, X, y, classes)
        with open(out / "recovery.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "agreement", "channels", "selectivity", "learned_translation"])
            for c in rep.agreement:
                w.writerow([c, repr(rep.agreement[c]), " ".join(map(str, rep.channels[c])),
                            " ".join(repr(v) for v in rep.selectivity[c]),
                            " ".join(repr(v) for v in rep.learned[c])])
        outputs.append("recovery.csv")
        extra["recovery"] = rep.agreement
        print("motion recovery " + " ".join(f"{c}={a:.2f}" for c, a in rep.agreement.items()))
    status = EXIT_OK
    if args.gradcheck:
        report = _gradcheck(args.mode, args.seed, args.jitter, args.h, args.tol, out)
        outputs.append("gradcheck.csv")
        extra["gradcheck"] = report
        status = EXIT_OK if report["failed"] == 0 else EXIT_NUMERIC
    write_manifest(out, "analyze", args, {"checkpoint": checkpoints, "data": args.data}, outputs, started, extra)
    return status


def _gradcheck(mode: str, seed: int, jitter: float, h: float, tol: float, out: Path,
               frames: int = 8, size: int = 12) -> dict:
    """Finite-difference check of every parameter of a fresh TinyT."""
    model = build_model(tinyt_spec(3, mode, 1, seed))
    rng = np.random.default_rng(seed)
    for layer in model.conv_layers:
        if layer.kind == "conv3t" and jitter:
            th = layer.thetas.data
            layer.thetas.data = th + rng.uniform(-jitter, jitter, size=th.shape)
    X = rng.uniform(0, 1, size=(2, 1, frames, size, size))
    y = np.array([0, 2])

    def loss():
        return softmax_cross_entropy(model.forward(X), y)

    entries = gradcheck(loss, model.params(), h=h, tol=tol)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "index", "analytic", "numeric", "rel_error", "flagged"])
        for e in entries:
            w.writerow([e.param, " ".join(map(str, e.index)), repr(e.analytic), repr(e.numeric),
                        repr(e.rel_error), int(e.flagged)])
    failed = sum(e.flagged for e in entries)
    worst = max((e.rel_error for e in entries), default=0.0)
    print(f"gradcheck {len(entries)} elements, {failed} above tol {tol:g}, max rel error {worst:.3e}")
    return {"elements": len(entries), "failed": failed, "max_rel_error": worst}


def cmd_gradcheck(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _gradcheck(args.mode, args.seed, args.jitter, args.h, args.tol, out, args.frames, args.size)
    write_manifest(out, "gradcheck", args, {}, ["gradcheck.csv"], started, report)
    return EXIT_OK if report["failed"] == 0 else EXIT_NUMERIC


def cmd_import2d(args) -> int:
    started = time.time()
    source, _ = load_checkpoint(args.source)
    if any(l.depth != 1 for l in source.conv_layers):
        raise UsageError(f"{args.source} is not a 2D (depth-1) model")
    spec = tinyt_spec(source.head.weight_.shape[1], "3t", source.spec.in_channels, args.seed)
    model = transfer_2d(source, spec)
    out = Path(args.out)
    save_checkpoint(out, model, {"imported_from": str(args.source)})
    print(f"imported {len(model.conv_layers)} layers; all temporal parameters at identity")
    write_manifest(out, "import2d", args, {"source": str(args.source)},
                   ["bank.json", "thetas.csv", "state.json", "head.weight.tsr", "head.bias.tsr"], started)
    return EXIT_OK


def cmd_export(args) -> int:
    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    save_bank(out, model)
    recs = analysis.records_from_model(model)
    with open(out / "thetas_display.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "filter", "step", "s", "rotation_deg_cw", "px_x", "px_y"])
        for r in recs:
            W, H = model[r.layer].geometry.kernel[1:]
            d = analysis.to_display(r, W, H)
            w.writerow([d.layer, d.filter, d.step, repr(d.s), repr(d.rotation), repr(d.px_x), repr(d.px_y)])
    print(f"exported {len(model.conv_layers)} layers to {out}")
    write_manifest(out, "export", args, {"checkpoint": str(args.checkpoint)},
                   ["bank.json", "thetas.csv", "thetas_display.csv"], started)
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tconv", description="Temporally factorized 3D convolution toolkit.")
    p.add_argument("--config", help="JSON file supplying any flag (flags on the command line win)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic clip dataset")
    g.add_argument("--classes", default="motion6", help="motion6, appearance6 or a comma list of motion kinds")
    g.add_argument("--n", type=int, default=600)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jitter", type=float, default=0.25)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=28)
    g.add_argument("--translate", type=float, default=None, help="px per frame")
    g.add_argument("--rotate", type=float, default=None, help="degrees per frame")
    g.add_argument("--zoom", type=float, default=None, help="percent per frame")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train TinyT on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--arch", default="tinyt")
    t.add_argument("--mode", default="3t", choices=["3t", "3d", "2d"])
    t.add_argument("--init", default="random", choices=["random", "import2d"])
    t.add_argument("--bank", help="2D checkpoint to import with --init import2d")
    defaults = TrainConfig()
    t.add_argument("--epochs", type=int, default=defaults.epochs)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--momentum", type=float, default=defaults.momentum)
    t.add_argument("--batch-size", type=int, default=defaults.batch_size)
    t.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    t.add_argument("--theta-lr-mult", type=float, default=defaults.theta_lr_mult)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="statistics, distributions, trajectories and probes")
    a.add_argument("--checkpoint", action="append", required=True,
                   help="repeat to compare models on shared histogram axes")
    a.add_argument("--labels", nargs="*", help="display names for the checkpoints")
    a.add_argument("--data", help="dataset for saliency and motion recovery")
    a.add_argument("--out", required=True)
    a.add_argument("--trajectory", action="append", default=[], metavar="LAYER:CH")
    a.add_argument("--saliency", action="append", default=[], metavar="LAYER:CH")
    a.add_argument("--actmax", action="append", default=[], metavar="LAYER:CH")
    a.add_argument("--clip", type=int, default=0, help="dataset clip used for saliency")
    a.add_argument("--actmax-steps", type=int, default=100)
    a.add_argument("--actmax-lr", type=float, default=0.05)
    a.add_argument("--actmax-decay", type=float, default=0.0)
    a.add_argument("--frames", type=int, default=8)
    a.add_argument("--size", type=int, default=28)
    a.add_argument("--seed", type=int, default=0)
    _gradcheck_flags(a)
    a.add_argument("--gradcheck", action="store_true", help="also finite-difference check a fresh TinyT")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of a fresh TinyT")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--frames", type=int, default=8)
    c.add_argument("--size", type=int, default=12)
    c.add_argument("--out", required=True)
    _gradcheck_flags(c)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("import2d", help="build a 3T checkpoint from a 2D one with identity temporal parameters")
    i.add_argument("--source", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_import2d)

    x = sub.add_parser("export", help="write a checkpoint's filter bank and readable parameter table")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_export)
    return p


def _gradcheck_flags(p) -> None:
    p.add_argument("--mode", default="3t", choices=["3t", "3d"])
    p.add_argument("--jitter", type=float, default=0.05,
                   help="perturb temporal parameters off identity by up to this much (0 = exact identity)")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)


def _config_path(argv) -> str | None:
    """``--config`` may appear before or after the subcommand."""
    for k, a in enumerate(argv):
        if a == "--config":
            if k + 1 >= len(argv):
                raise UsageError("--config needs a path")
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _strip_config(argv) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == "--config":
            skip = True
        elif not a.startswith("--config="):
            out.append(a)
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    try:
        loaded = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if isinstance(loaded, dict) and "command" in loaded and isinstance(loaded.get("config"), dict):
        loaded = loaded["config"]  # a previous run.json
    if not isinstance(loaded, dict):
        raise UsageError("config file must hold a JSON object")
    rest = _strip_config(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if a in subs), None)
    if command is None:
        raise UsageError("no subcommand given")
    sub = subs[command]
    known = {a.dest for a in sub._actions} | {"threads", "log_level", "command"}
    values = {k.replace("-", "_"): v for k, v in loaded.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"config file has unknown keys for {command}: {', '.join(unknown)}")
    values.pop("command", None)
    # file values act as defaults, so explicit flags still win
    for action in sub._actions:
        if action.dest in values:
            action.required = False
    sub.set_defaults(**{k: v for k, v in values.items() if k not in ("threads", "log_level")})
    parser.set_defaults(**{k: v for k, v in values.items() if k in ("threads", "log_level")})
    args = parser.parse_args(rest)
    args.config = path
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ContractError, DomainError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, EvaluationError, FloatingPointError) as exc:
        where = f" (layer {exc.layer})" if getattr(exc, "layer", None) else ""
        print(f"numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
