"""Command-line entry point: ``tabshap <command> [--config run.json] [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 1 any other package error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, TabShapError
from .experiments import RunConfig, cmd_noise_study, cmd_speed_bench, cmd_stream, cmd_train, write_attributions_csv


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    if args.seeds is not None:
        out["seeds"] = args.seeds
    if args.output is not None:
        out["output_dir"] = args.output
    for flag, key in (("data", "dataset.path"), ("label", "dataset.label"), ("epochs", "model.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(_overrides(args)).validate()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def run_train(args) -> None:
    _print(cmd_train(load_config(args), compare=args.compare))


def run_noise(args) -> None:
    rows = cmd_noise_study(load_config(args), tuple(args.fractions))
    _print(rows)


def run_speed(args) -> None:
    _print(cmd_speed_bench(load_config(args), args.samples, args.subsets, args.features))


def run_stream(args) -> None:
    cfg = load_config(args)
    if args.kind:
        cfg = cfg.with_overrides({"stream.kind": args.kind}).validate()
    _print(cmd_stream(cfg, every_step=args.every_step, checkpoints=args.checkpoints))


def run_explain(args) -> None:
    from .data import encoding_from_dict, load_csv
    from .model import explain_population, explain_sample, load_checkpoint

    ck = Path(args.checkpoint)
    model, ensemble = load_checkpoint(ck)
    cfg = load_config(args)
    reference = None
    if (ck / "encoding.json").exists():
        reference = encoding_from_dict(json.loads((ck / "encoding.json").read_text()))
    ds = load_csv(cfg.dataset.path, cfg.dataset.label, reference=reference)
    if ds.X.shape[1] != model.space.n_columns:
        raise DataError(f"dataset has {ds.X.shape[1]} encoded columns, checkpoint expects {model.space.n_columns}")
    ids = args.ids
    if ids:
        bad = [i for i in ids if not 0 <= i < ds.n_samples]
        if bad:
            raise DataError(f"sample ids out of range: {bad}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = model.space.player_names
    if args.population:
        if ids is not None and not ids:
            raise DataError("population explanation needs a non-empty selection")
        sel = ds.subset(np.array(ids, dtype=int)) if ids else ds
        pop = explain_population(model, sel, ensemble)
        write_attributions_csv(pop["phi"], names, out / "attributions.csv", ids)
        (out / "population.json").write_text(
            json.dumps({"summary": pop["summary"], "pairs": pop["pairs"]}, indent=2, default=str)
        )
        _print(pop["summary"])
        return
    if not ids:
        raise ConfigError("explain needs --ids or --population")
    result = {}
    for i in ids:
        ranked = explain_sample(model, ds.X[i], ensemble)
        result[i] = [{"player": a.name, "class": a.class_index, "phi": a.phi, "polarity": a.polarity}
                     for a in ranked]
    (out / "explanations.json").write_text(json.dumps(result, indent=2))
    _print(result)


def run_split_frequency(args) -> None:
    from .data import load_csv
    from .trees import player_split_frequency, train_gbdt

    cfg = load_config(args)
    ds = load_csv(cfg.dataset.path, cfg.dataset.label)
    if cfg.dataset.noise_fraction > 0:
        from .data import inject_noise_features

        ds = inject_noise_features(ds, cfg.dataset.noise_fraction, cfg.seeds[0])
    model = train_gbdt(ds.X, ds.y, ds.n_classes, cfg.priors.gbdt[0])
    freq = player_split_frequency(model, ds.groups)
    synth = ds.synthetic_players
    print(f"{'player':<24}{'synthetic':>10}{'split_freq':>12}")
    for name, s, f in sorted(zip(ds.player_names, synth, freq), key=lambda r: -r[2]):
        print(f"{name:<24}{'yes' if s else 'no':>10}{f:>12.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabshap", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted key, e.g. model.lr=0.02")
    common.add_argument("--seeds", type=int, nargs="+")
    common.add_argument("--output", help="run directory")
    common.add_argument("--data", help="CSV path")
    common.add_argument("--label", help="label column")
    common.add_argument("--epochs", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="priors, surrogates, MLP and SHAPNN on a CSV")
    p.add_argument("--compare", action="store_true", help="print SHAPNN vs MLP comparison")
    p.set_defaults(func=run_train)

    p = sub.add_parser("noise-study", parents=[common], help="accuracy under injected uniform features")
    p.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.set_defaults(func=run_noise)

    p = sub.add_parser("speed-bench", parents=[common], help="forward_explain vs KernelSHAP timing")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--subsets", type=int, default=128)
    p.add_argument("--features", type=int, default=50)
    p.set_defaults(func=run_speed)

    p = sub.add_parser("stream", parents=[common], help="continual learning on a drifting stream")
    p.add_argument("--kind", choices=["STA", "SEA", "ROT"])
    p.add_argument("--every-step", action="store_true", help="retrospective AUROC at every step")
    p.add_argument("--checkpoints", action="store_true", help="save each retained step's model")
    p.set_defaults(func=run_stream)

    p = sub.add_parser("explain", parents=[common], help="attributions from a saved checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--ids", type=int, nargs="*")
    p.add_argument("--population", action="store_true")
    p.set_defaults(func=run_explain)

    p = sub.add_parser("split-frequency", parents=[common], help="per-feature GBDT split frequencies")
    p.set_defaults(func=run_split_frequency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TabShapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
