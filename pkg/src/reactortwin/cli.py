"""Command-line gateway: data generation, twin training, assessment
studies, closed-loop runs and the operator service.

Every command is deterministic for fixed arguments and seed; reports
and stores are written atomically (temporary file, then rename) so a
failed invocation never leaves a truncated artifact behind.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .assessment import (confusion_study, classify_case, confusion_matrix,
                         coverage_study, target_loss_sweep)
from .episodes import (ActionBounds, FAMILY_BOXES, TRAIN_BOXES,
                       build_database, build_random_database,
                       build_scenario_database, load_store,
                       reference_scenario, scenario_family)
from .loop import DiscrepancyConfig, Timeline, TranscriptLog, run_closed_loop
from .network import TrainHyper, forward, train
from .plant import PlantConfig, ScenarioSpec
from .twins import TwinBundle, diagnosis_dataset, prognosis_dataset

FAMILY_CASES = {"case-a": "severe", "case-b": "indomain", "case-c": "mild"}

# Per-twin training recipe; flags override any single value.
TRAIN_DEFAULTS = {
    "diagnosis": dict(target_mse=1.5e-3, epochs=6000, lr=0.03,
                      batch=8192, lr_patience=60),
    "prognosis": dict(target_mse=5e-4, epochs=30000, lr=0.02,
                      batch=256, lr_patience=400),
}


def _data_root() -> str:
    return os.environ.get("REACTORTWIN_DATA_ROOT", ".")


def _resolve(path: str) -> str:
    if path is None or os.path.isabs(path):
        return path
    return os.path.join(_data_root(), path)


def _write_atomic(path: str, text: str) -> None:
    tmp = path + ".part"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_scenario(token: str, seed: int, config: PlantConfig) -> ScenarioSpec:
    """table2, case-a/b/c (seeded family sample) or literal w1:rate."""
    token = token.lower()
    if token == "table2":
        return reference_scenario(config.nominal_pump_speed)
    if token in FAMILY_CASES:
        return scenario_family(FAMILY_CASES[token], 1, seed,
                               config.nominal_pump_speed)[0]
    if ":" in token:
        w1, rate = (float(p) for p in token.split(":", 1))
        ramp = config.nominal_pump_speed * (1.0 - w1) / rate
        return ScenarioSpec.from_parts(w1, ramp, reference_scenario().t_acc,
                                       config.nominal_pump_speed)
    raise ValueError(f"unknown scenario {token!r} (use table2, case-a/b/c "
                     "or w1_end:rate)")


def _bounds(args) -> ActionBounds:
    return ActionBounds(args.w2_min, args.w2_max, args.trip_min, args.trip_max)


def cmd_gen_data(args) -> int:
    config = PlantConfig()
    bounds = _bounds(args)
    out = _resolve(args.out)
    if args.family == "table2":
        if args.random > 0:
            store = build_random_database(reference_scenario(), bounds,
                                          args.random, config, args.seed,
                                          out_dir=out, split=args.split)
        else:
            store = build_database(reference_scenario(), bounds, args.grid,
                                   config, out_dir=out, split=args.split)
    else:
        box = TRAIN_BOXES if args.family == "train" else FAMILY_BOXES[args.family]
        store = build_scenario_database(box, bounds, args.scenarios,
                                        args.actions, config, args.seed,
                                        out_dir=out, split=args.split,
                                        family=args.family)
    print(f"wrote {len(store.records)} episodes to {out}")
    return 0


def _train_hyper(args, twin: str) -> TrainHyper:
    d = TRAIN_DEFAULTS[twin]
    pick = lambda flag, key: d[key] if flag is None else flag
    return TrainHyper(target_mse=pick(args.target_mse, "target_mse"),
                      max_epochs=pick(args.epochs, "epochs"),
                      learn_rate=pick(args.lr, "lr"), seed=args.seed,
                      batch_size=pick(args.batch, "batch"),
                      lr_patience=pick(args.lr_patience, "lr_patience"),
                      alpha=args.weight_decay)


def cmd_train(args) -> int:
    config = PlantConfig()
    store = load_store(_resolve(args.db), config.nominal_pump_speed)
    if store.config_hash != config.config_hash():
        print("error: store was generated by a different plant config",
              file=sys.stderr)
        return 1
    out = _resolve(args.out)
    if os.path.exists(os.path.join(out, "bundle.txt")):
        bundle = TwinBundle.load(out)
        if bundle.config_hash != store.config_hash:
            print("error: bundle and store disagree on plant config",
                  file=sys.stderr)
            return 1
    else:
        bundle = TwinBundle(None, None, store.bounds or ActionBounds(),
                            config_hash=store.config_hash)
    hidden = [int(p) for p in args.layers.split(",")]

    if args.twin == "diagnosis":
        x, y, groups = diagnosis_dataset(store, row_stride=args.row_stride)
        layers = [x.shape[1]] + hidden + [1]
        model, report = train(x, y.reshape(-1, 1), layers,
                              _train_hyper(args, "diagnosis"), groups=groups)
        bundle.diagnosis = model
    else:
        if bundle.diagnosis is None:
            print("error: train the diagnosis twin first (prognosis features "
                  "come from diagnosed sensor series)", file=sys.stderr)
            return 1
        x, y, groups = prognosis_dataset(store, bundle.decision_delay,
                                         bundle.grad_spans,
                                         diagnosis=bundle.diagnosis)
        layers = [x.shape[1]] + hidden + [1]
        model, report = train(x, y.reshape(-1, 1), layers,
                              _train_hyper(args, "prognosis"), groups=groups)
        bundle.prognosis = model
    bundle.save(out)
    print(f"{args.twin}: epochs={report.epochs_used} "
          f"target_reached={report.target_reached} "
          f"train_rmse={report.train_rmse:.4g} val_rmse={report.val_rmse:.4g}")
    if not report.target_reached:
        print("warning: stopped at the epoch budget before the target loss",
              file=sys.stderr)
    return 0


def cmd_assess(args) -> int:
    config = PlantConfig()
    if args.study == "coverage":
        trainer = _coverage_trainer(args)
        tests = []
        for path in args.tests.split(","):
            path = path.strip()
            tests.append((os.path.basename(os.path.normpath(path)),
                          load_store(_resolve(path), config.nominal_pump_speed)))
        report = coverage_study(load_store(_resolve(args.train),
                                           config.nominal_pump_speed),
                                tests, trainer, row_stride=args.row_stride)
        text = report.to_csv()
    elif args.study == "confusion":
        if args.runs:
            text = _confusion_from_runs(_resolve(args.runs))
        else:
            bundle = TwinBundle.load(_resolve(args.bundle))
            specs = scenario_family(args.family, args.n, args.seed,
                                    config.nominal_pump_speed)
            study = confusion_study(bundle, specs, config)
            text = study.to_csv()
    else:
        store = load_store(_resolve(args.db), config.nominal_pump_speed)
        x, y, groups = diagnosis_dataset(store, row_stride=args.row_stride)
        tests = {}
        for path in args.tests.split(","):
            path = path.strip()
            ts = load_store(_resolve(path), config.nominal_pump_speed)
            tx, ty, _ = diagnosis_dataset(ts, row_stride=args.row_stride)
            tag = ("interpolated" if ts.family in ("table2", "train", "grid",
                                                   "random", "indomain")
                   else "extrapolated")
            tests[os.path.basename(os.path.normpath(path))] = (tx, ty, tag)
        targets = [float(v) for v in args.targets.split(",")]
        hyper = TrainHyper(max_epochs=args.epochs, learn_rate=args.lr,
                           seed=args.seed, batch_size=args.batch or 4096)
        result = target_loss_sweep(targets, x, y, groups, tests,
                                   [x.shape[1], 20, 20, 20, 1], hyper)
        text = result.to_csv()
    if args.out:
        _write_atomic(_resolve(args.out), text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def _coverage_trainer(args):
    def trainer(store):
        x, y, groups = diagnosis_dataset(store, row_stride=args.row_stride)
        model, _ = train(x, y.reshape(-1, 1), [x.shape[1], 20, 20, 20, 1],
                         TrainHyper(target_mse=args.target_mse,
                                    max_epochs=args.epochs, learn_rate=args.lr,
                                    seed=args.seed,
                                    batch_size=args.batch or 4096),
                         groups=groups)
        return model
    return trainer


def _confusion_from_runs(run_dir: str) -> str:
    labels = []
    for name in sorted(os.listdir(run_dir)):
        if not name.endswith(".jsonl"):
            continue
        with open(os.path.join(run_dir, name)) as fh:
            log = TranscriptLog.from_jsonl(fh.read())
        rec = log.first("recommendation")
        if rec is None or not log.closed:
            continue
        out = log.outcome
        if rec["data"]["scram"]:
            table = log.first("assessment")
            predicted = min(table["data"]["prediction"])
        else:
            predicted = rec["data"]["prediction"]
        labels.append(classify_case(out["max_true_t_pfcl"], predicted,
                                    out["limit"]))
    if not labels:
        raise ValueError(f"no finished transcripts under {run_dir}")
    return confusion_matrix(labels).to_csv()


def cmd_run(args) -> int:
    config = PlantConfig()
    bundle = TwinBundle.load(_resolve(args.bundle))
    spec = _parse_scenario(args.scenario, args.seed, config)
    failed = tuple(c for c in args.fail.split(",") if c) if args.fail else ()
    log = run_closed_loop(
        spec, bundle, config, Timeline(), policy=args.policy,
        discrepancy=DiscrepancyConfig(x_lim=args.x_lim),
        check_enabled=args.discrepancy == "on",
        failed_channels=failed, fail_start=args.fail_start,
        diag_bound=args.diag_bound)
    out = log.outcome
    if args.out:
        _write_atomic(_resolve(args.out), log.to_jsonl())
    print(f"grade=Level {out['grade']} max_true_t_pfcl={out['max_true_t_pfcl']:.2f} "
          f"limit={out['limit']} scrammed={out['scrammed']} "
          f"action_taken={out['action_taken']}")
    return 0


def cmd_serve(args) -> int:
    from .service import Session, make_server
    config = PlantConfig()
    bundle = TwinBundle.load(_resolve(args.bundle))
    spec = _parse_scenario(args.scenario, args.seed, config)
    session = Session(spec, bundle, config, policy=args.policy,
                      speed=args.speed,
                      check_enabled=args.discrepancy == "on")
    server = make_server(session, args.port)
    host, port = server.server_address[:2]
    print(f"serving session on http://{host}:{port} "
          f"(scenario {args.scenario}, policy {args.policy})")
    session.start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown_session()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reactortwin",
        description="Closed-loop reactor management demo: simulate, train "
                    "twins, assess trust, run the operational loop.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate an episode store")
    g.add_argument("--out", required=True)
    g.add_argument("--family", default="table2",
                   choices=["table2", "train", "indomain", "mild", "severe"])
    g.add_argument("--grid", type=int, default=32,
                   help="action lattice side for table2 stores")
    g.add_argument("--random", type=int, default=0,
                   help="random off-lattice actions instead of the grid")
    g.add_argument("--scenarios", type=int, default=32,
                   help="scenario count for box families")
    g.add_argument("--actions", type=int, default=32,
                   help="actions per scenario for box families")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    for flag, dv in (("--w2-min", 1.0), ("--w2-max", 1.5),
                     ("--trip-min", 645.0), ("--trip-max", 685.0)):
        g.add_argument(flag, type=float, default=dv)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one twin into a bundle")
    t.add_argument("--twin", required=True, choices=["diagnosis", "prognosis"])
    t.add_argument("--db", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--target-mse", type=float, default=None,
                   help="stop threshold (default: per-twin recipe)")
    t.add_argument("--layers", default="20,20,20")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr-patience", type=int, default=None,
                   help="epochs without progress before halving the step")
    t.add_argument("--weight-decay", type=float, default=1e-7)
    t.add_argument("--seed", type=int, default=3)
    t.add_argument("--row-stride", type=int, default=10)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("assess", help="trustworthiness studies")
    a.add_argument("study", choices=["coverage", "confusion", "sweep"])
    a.add_argument("--train")
    a.add_argument("--tests")
    a.add_argument("--db")
    a.add_argument("--runs")
    a.add_argument("--bundle")
    a.add_argument("--family", default="severe",
                   choices=["table2", "train", "indomain", "mild", "severe"])
    a.add_argument("--n", type=int, default=12)
    a.add_argument("--targets", default="0.001,0.01,0.1,1,10")
    a.add_argument("--target-mse", type=float, default=1e-2)
    a.add_argument("--epochs", type=int, default=3000)
    a.add_argument("--lr", type=float, default=0.02)
    a.add_argument("--batch", type=int, default=0)
    a.add_argument("--seed", type=int, default=3)
    a.add_argument("--row-stride", type=int, default=10)
    a.add_argument("--out")
    a.set_defaults(func=cmd_assess)

    r = sub.add_parser("run", help="one closed-loop accident run")
    r.add_argument("--bundle", required=True)
    r.add_argument("--scenario", default="table2")
    r.add_argument("--policy", default="auto", choices=["auto", "ignore"])
    r.add_argument("--discrepancy", default="on", choices=["on", "off"])
    r.add_argument("--x-lim", type=float, default=15.0)
    r.add_argument("--diag-bound", type=float, default=30.0)
    r.add_argument("--fail", default="",
                   help="comma-separated sensor channels to fail")
    r.add_argument("--fail-start", type=float, default=None,
                   help="seconds after the accident the failure begins")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="transcript path (.jsonl)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("serve", help="operator console service")
    s.add_argument("--bundle", required=True)
    s.add_argument("--scenario", default="table2")
    s.add_argument("--policy", default="gated", choices=["gated", "auto", "ignore"])
    s.add_argument("--port", type=int,
                   default=int(os.environ.get("REACTORTWIN_PORT", "8571")))
    s.add_argument("--speed", type=float, default=20.0,
                   help="plant seconds per wall second (0: unpaced)")
    s.add_argument("--discrepancy", default="on", choices=["on", "off"])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # CLI boundary: fail with message, not traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
