"""Command line: ``pseudorecur {train,eval,sweep,toy,rbm-baseline,timing}``.

Every option can also come from a plain ``key = value`` file passed with
``--config``; keys are the long flag names (``svm-c`` or ``svm_c``). Flags
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, outputs
from .dataset import OCCLUSION_LEVELS
from .memory import ConfigurationError
from .toy import ToyWorld, single_cluster_world

log = logging.getLogger("pseudorecur")

ON = {"on", "true", "yes", "1"}
OFF = {"off", "false", "no", "0"}


def on_off(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ON:
        return True
    if t in OFF:
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def listof(conv):
    def parse(text):
        try:
            return tuple(conv(t.strip()) for t in str(text).split(",") if t.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    parse.__name__ = f"list of {getattr(conv, '__name__', 'value')}"
    return parse


def _float(t: str) -> float:
    return float("inf") if t.lower() in ("inf", "infinity") else float(t)


def _lowpass(t: str) -> bool:
    if t == "box3":
        return True
    if t == "off":
        return False
    raise argparse.ArgumentTypeError("lowpass must be box3 or off")


def read_config(path: Path | str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--config", help="key = value file; command-line flags override it")
    g.add_argument("--artifacts", default="artifacts", help="artifact cache directory")
    g.add_argument("--out", help="output directory (default results/<command>)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    g.add_argument("--verbose", "-v", action="store_true")


def _data(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data-dir", default="data/cifar-10-batches-bin")
    g.add_argument("--profile", choices=sorted(harness.PROFILES), default="desk",
                   help="desk = 10k/2k images, full = 50k/10k")
    g.add_argument("--train-count", type=int)
    g.add_argument("--test-count", type=int)
    g.add_argument("--occlusion", type=listof(float), help="comma list of occluded area fractions")
    g.add_argument("--augment-levels", type=listof(float), default=harness.ExperimentSpec.augment_levels)
    g.add_argument("--augment", type=listof(on_off), default=(False,),
                   help="train the SVM bank on occlusion-augmented data (comma list of on/off)")
    g = p.add_argument_group("features")
    g.add_argument("--k", type=int, default=200, help="dictionary size")
    g.add_argument("--patch-size", type=int, default=6)
    g.add_argument("--patches-per-image", type=int, default=10)
    g.add_argument("--lowpass", type=_lowpass, default=True, help="box3 or off")
    g.add_argument("--store-h1", type=on_off, default=False, help="keep training Layer-1 maps (on/off)")
    g = p.add_argument_group("memory and classifiers")
    g.add_argument("--k2", type=listof(int), default=(50,), help="cluster centers per class")
    g.add_argument("--svm-c", type=float, default=harness.ExperimentSpec.svm_c)
    g.add_argument("--svm-epochs", type=int, default=harness.ExperimentSpec.svm_epochs)
    g = p.add_argument_group("feedback")
    g.add_argument("--baseline", type=listof(str), default=("feedforward", "feedback"))
    g.add_argument("--alpha", type=listof(_float), default=(0.5,))
    g.add_argument("--beta", type=listof(float), default=(0.0,))
    g.add_argument("--tau", type=listof(float), default=(0.0,))
    g.add_argument("--iterations", type=listof(int), default=(3,))
    g.add_argument("--scheme", type=listof(str), default=("wta",), help="wta, average or ncs")
    g.add_argument("--m", "--hypotheses", dest="m", type=listof(int), default=(3,))
    g.add_argument("--anneal", type=listof(on_off), default=(True,))
    g.add_argument("--layer1-feedback", action="store_true")
    g.add_argument("--ncs-average3", action="store_true")
    g.add_argument("--workers", type=int, default=1, help="grid points evaluated concurrently")
    g = p.add_argument_group("rbm")
    g.add_argument("--rbm-hidden", type=int, default=800)
    g.add_argument("--rbm-lr", type=float, default=0.1)
    g.add_argument("--rbm-batch", type=int, default=100)
    g.add_argument("--rbm-epochs", type=int, default=100)
    g.add_argument("--gibbs-epochs", type=listof(int), default=(0, 1, 5, 20))
    g.add_argument("--binary-readout", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudorecur", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "learn dictionary, store, memories and classifier banks",
        "eval": "evaluate grid points, optionally writing per-image trajectory logs",
        "sweep": "occlusion sweep over a parameter grid",
        "rbm-baseline": "Gibbs-correction baseline over Gibbs epochs and occlusion",
        "timing": "cost counters and wall time against K2",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        _data(p)
    sub.choices["eval"].add_argument("--trajectory-log", help="JSON-lines file for feedback trajectories")
    sub.choices["rbm-baseline"].set_defaults(baseline=("rbm",))
    sub.choices["timing"].set_defaults(baseline=("feedback",), k2=(10, 25, 50, 100), occlusion=(0.33,))
    sub.choices["timing"].add_argument("--repeats", type=int, default=3, help="timed runs per grid point (fastest kept)")

    p = sub.add_parser("toy", help="two-class 2-D imputation oracle")
    _common(p)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--distortions", type=listof(float), default=(0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0))
    p.add_argument("--alpha", type=listof(_float), default=(1.0, float("inf")))
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--world", choices=("two-cluster", "single-cluster"), default="two-cluster")
    p.add_argument("--separation", type=float, default=2.0, help="single-cluster world only")
    p.add_argument("--exact-step", type=float, default=0.05, help="grid spacing of the exact oracle")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {}
    for a in sub._actions:
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    values = {}
    for key, raw in read_config(args.config).items():
        a = actions.get(key)
        if a is None or a.dest in ("config", "help"):
            sub.error(f"unknown config key {key!r} in {args.config}")
        key = a.dest
        if isinstance(a, argparse._StoreTrueAction):
            try:
                values[key] = on_off(raw)
            except argparse.ArgumentTypeError as exc:
                sub.error(f"config key {key}: {exc}")
            continue
        try:
            v = a.type(raw) if a.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            sub.error(f"config key {key}: {exc}")
        if a.choices is not None and v not in a.choices:
            sub.error(f"config key {key}: {v!r} not in {sorted(a.choices)}")
        values[key] = v
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def spec_from_args(args: argparse.Namespace) -> harness.ExperimentSpec:
    train, test = harness.PROFILES[args.profile]
    return harness.ExperimentSpec(
        data_dir=args.data_dir,
        train_count=args.train_count or train,
        test_count=args.test_count or test,
        k=args.k,
        patch_size=args.patch_size,
        patches_per_image=args.patches_per_image,
        lowpass=args.lowpass,
        store_h1=args.store_h1,
        svm_c=args.svm_c,
        svm_epochs=args.svm_epochs,
        augment_levels=tuple(args.augment_levels),
        baselines=tuple(args.baseline),
        occlusion=tuple(args.occlusion) if args.occlusion is not None else OCCLUSION_LEVELS,
        augment=tuple(args.augment),
        k2=tuple(args.k2),
        alpha=tuple(args.alpha),
        beta=tuple(args.beta),
        tau=tuple(args.tau),
        iterations=tuple(args.iterations),
        scheme=tuple(args.scheme),
        m=tuple(args.m),
        anneal=tuple(args.anneal),
        layer1_feedback=args.layer1_feedback,
        ncs_average3=args.ncs_average3,
        gibbs_epochs=tuple(args.gibbs_epochs),
        rbm_hidden=args.rbm_hidden,
        rbm_lr=args.rbm_lr,
        rbm_batch=args.rbm_batch,
        rbm_epochs=args.rbm_epochs,
        binary_readout=args.binary_readout,
        seed=args.seed,
    )


def _echo(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def cmd_train(args, spec, out):
    bench = harness.Workbench(spec, args.artifacts, log.info)
    bench.dictionary()
    bench.store()
    for aug in spec.augment:
        bench.bank(aug)
    for k2 in spec.k2:
        bench.memory(k2)
    if "rbm" in spec.baselines:
        bench.rbm_model()
        bench.rbm_classifier()
    files = bench.artifact_files()
    _echo("\n".join(files) + "\n")
    return {"artifacts": files, "build_seconds": bench.timings}


def cmd_sweep(args, spec, out):
    bench = harness.Workbench(spec, args.artifacts, log.info)
    rows = harness.run_sweep(spec, args.artifacts, args.workers, bench=bench)
    outputs.emit_outputs(rows, out, not args.no_figures, echo=_echo)
    return {"artifacts": bench.artifact_files(), "build_seconds": bench.timings,
            "failed_points": sum(not r.ok for r in rows)}


def cmd_eval(args, spec, out):
    bench = harness.Workbench(spec, args.artifacts, log.info)
    points = harness.expand_grid(spec)
    bench.prepare(points)
    rows, n_logged = [], 0
    sink = open(args.trajectory_log, "w") if args.trajectory_log else None
    try:
        for p in points:
            row, logs = harness.evaluate_point(bench, p, with_logs=sink is not None)
            rows.append(row)
            log.info(harness._describe(row))
            if sink is not None and logs:
                y = bench.test_labels
                for i, tr in enumerate(logs):
                    for line in tr.to_lines(image=i, label=int(y[i]), occlusion=p.occlusion):
                        sink.write(line + "\n")
                n_logged += len(logs)
    finally:
        if sink is not None:
            sink.close()
    outputs.emit_outputs(rows, out, not args.no_figures, echo=_echo)
    return {"artifacts": bench.artifact_files(), "trajectories_logged": n_logged}


def cmd_timing(args, spec, out):
    rows = harness.timed_sweep(spec, args.artifacts, args.repeats, log.info)
    summary = harness.timing_report(rows)
    outputs.emit_outputs(rows, out, not args.no_figures, echo=_echo)
    outputs.emit_timing(summary, out, not args.no_figures)
    _echo(f"# linear fit of feedback time vs K2: slope={summary.slope:.3e} s, R^2={summary.r2:.4f}, "
          f"counters exact={summary.counters_exact}\n")
    return {"timing": summary.to_dict()}


def cmd_toy(args, out):
    if args.world == "single-cluster":
        world = single_cluster_world(args.separation, args.sigma)
    else:
        world = ToyWorld(sigma=args.sigma)
    rows = harness.run_toy(world, args.distortions, args.alpha, args.trials, args.seed, args.exact_step)
    outputs.emit_toy(rows, out, not args.no_figures, echo=_echo)
    return {"world": {"clusters": world.clusters.tolist(), "sigma": world.sigma, "axis": world.axis}}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except ConfigurationError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    out = Path(args.out or f"results/{args.command}")
    try:
        outputs.prepare_output_dir(out)
        if args.command == "toy":
            params = {k: v for k, v in vars(args).items()}
            extra = cmd_toy(args, out)
            seed = args.seed
        else:
            spec = spec_from_args(args)
            params = spec.to_dict()
            handler = {"train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval,
                       "rbm-baseline": cmd_sweep, "timing": cmd_timing}[args.command]
            extra = handler(args, spec, out)
            seed = spec.seed
    except (ConfigurationError, outputs.OutputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    params.update(artifacts=args.artifacts, out=str(out))
    outputs.write_manifest(out, args.command, json.loads(json.dumps(params, default=_jsonable)), seed, extra)
    return 0


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return str(v)


if __name__ == "__main__":
    sys.exit(main())
