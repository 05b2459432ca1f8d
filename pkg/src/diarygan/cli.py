"""Command-line front end: fixture, train, sample, evaluate, attack.

Every subcommand writes its outputs into the ``--out`` directory together with
one ``run_manifest.json``. Outputs are deterministic given flags and inputs;
timestamps only appear in the manifest.

Exit codes: 0 success, 2 usage or validation error, 3 runtime or integrity
error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, attack, data, evaluation as ev, fixture, trainer
from .dpsgd import PrivacyConfig
from .errors import DiaryGanError, DimensionError, ParameterError, SchemaError, TrainingDivergedError
from .nets import NetConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "DIARYGAN_THREADS"
METRICS = ("marginals", "conditionals", "joint", "pca", "tours")

# config-file keys accepted by ``train`` besides the flag names
_NET_INT_KEYS = ("latent_dim", "trunk_width", "head_hidden", "disc_bilstm", "disc_lstm")
_NET_LIST_KEYS = ("gen_lstm", "disc_dense")
_TRAIN_FLOAT_KEYS = ("lr_d", "lr_g", "rho", "weight_clip")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _known_schemas():
    return {"survey": data.survey_schema(), "toy": fixture.toy_schema()}


def _schema_for_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    for schema in _known_schemas().values():
        if set(data.csv_columns(schema)) == set(header):
            return schema
    raise SchemaError(f"{path}: columns {header} match no known diary schema")


def _is_dataset_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == data.DATASET_MAGIC


def load_records(path):
    """Records and schema from a diary CSV or a dataset file."""
    if _is_dataset_file(path):
        ds = data.load_dataset(path)
        return ds.records(), ds.schema
    schema = _schema_for_csv(path)
    return data.read_diary_csv(path, schema), schema


def load_training_data(path, max_len):
    if _is_dataset_file(path):
        return data.load_dataset(path)
    records, schema = load_records(path)
    records = data.filter_home_based(records)
    if not records:
        raise ParameterError(f"{path}: no home-based tours with 3..15 locations")
    codec = data.fit_codec(records, schema, max_len or data.DEFAULT_MAX_LEN)
    return data.Dataset.from_records(records, codec, str(path))


def read_config_file(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out_dir, command, config, inputs, outputs, seed, started):
    manifest = {"tool": "diarygan", "version": __version__, "subcommand": command,
                "config": config, "inputs": [str(p) for p in inputs],
                "outputs": [str(p) for p in outputs], "seed": seed,
                "started": started, "finished": _now()}
    Path(out_dir, "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                                  encoding="utf-8")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# ---------------------------------------------------------------------------
# subcommands


def cmd_fixture(args):
    started = _now()
    out = _out_dir(args.out)
    if args.kind == "toy":
        schema, records, truth = fixture.toy_schema(), fixture.synth_toy_fixture(args.seed, args.count), \
            fixture.toy_fixture_truth()
    else:
        schema, records, truth = data.survey_schema(), fixture.synth_fixture(args.seed, args.count), \
            fixture.fixture_truth()
    paths = [out / "diary.csv", out / "truth.json", out / "dataset.dpds"]
    data.write_diary_csv(paths[0], records, schema)
    paths[1].write_text(fixture.truth_json(truth), encoding="utf-8")
    kept = data.filter_home_based(records)
    codec = data.fit_codec(kept, schema, args.max_len)
    data.save_dataset(paths[2], data.Dataset.from_records(kept, codec, f"fixture:{args.kind}:seed={args.seed}"))
    _write_manifest(out, "fixture", {"seed": args.seed, "count": args.count, "kind": args.kind,
                                     "max_len": args.max_len}, [], paths, args.seed, started)
    return EXIT_OK


def _train_settings(args):
    cfg = read_config_file(args.config) if args.config else {}
    flags = {"noise_multiplier": args.noise_multiplier, "clip": args.clip, "loss": args.loss,
             "epochs": args.epochs, "batch": args.batch, "seed": args.seed}
    known = set(flags) | set(_NET_INT_KEYS) | set(_NET_LIST_KEYS) | set(_TRAIN_FLOAT_KEYS) | {
        "d_steps", "privacy", "max_len", "holdout"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown configuration keys: {unknown}")
    for k, v in flags.items():
        if v is not None:
            cfg[k] = v
    try:
        net_over = {k: int(cfg[k]) for k in _NET_INT_KEYS if k in cfg}
        net_over.update({k: tuple(int(x) for x in str(cfg[k]).split(",")) for k in _NET_LIST_KEYS if k in cfg})
        train_kw = {k: float(cfg[k]) for k in _TRAIN_FLOAT_KEYS if k in cfg}
        if "d_steps" in cfg:
            train_kw["d_steps"] = int(cfg["d_steps"])
        enabled = str(cfg.get("privacy", "on")).lower() not in ("off", "false", "0", "no")
        privacy = PrivacyConfig(float(cfg.get("clip", 1.0)), float(cfg.get("noise_multiplier", 0.0)), enabled)
        tc = trainer.TrainConfig(epochs=int(cfg.get("epochs", 200)), batch_size=int(cfg.get("batch", 64)),
                                 loss=str(cfg.get("loss", "standard")), privacy=privacy,
                                 seed=int(cfg.get("seed", 0)), **train_kw)
        max_len = int(cfg["max_len"]) if "max_len" in cfg else None
        holdout = args.holdout if args.holdout is not None else (
            float(cfg["holdout"]) if "holdout" in cfg else None)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None
    return tc, net_over, max_len, holdout


def cmd_train(args):
    started = _now()
    try:
        tc, net_over, max_len, holdout = _train_settings(args)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    ds = load_training_data(args.data, max_len)
    outputs = []
    if holdout is not None:
        if not 0 < holdout < 1:
            raise UsageError(f"--holdout must lie in (0, 1), got {holdout}")
        ds, val = data.split(ds, 1.0 - holdout, tc.seed)
        outputs += [out / "train.dpds", out / "validation.dpds"]
        data.save_dataset(outputs[0], ds)
        data.save_dataset(outputs[1], val)
    try:
        net = NetConfig.from_codec(ds.codec, **net_over)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    tr = trainer.Trainer(ds, tc, net)
    history_path = out / "history.csv"
    history = trainer.TrainHistory()
    try:
        tr.run(callback=history.append)
    finally:
        # a diverged run still leaves its log behind
        trainer.write_history_csv(history_path, history, append=False)
    ck_path = out / "checkpoint.dpct"
    trainer.save_checkpoint(ck_path, tr.checkpoint())
    outputs = [ck_path, history_path] + outputs
    config = {"train": tc.to_dict(), "net": net.to_dict(), "holdout": holdout, "max_len": ds.codec.max_len}
    _write_manifest(out, "train", config, [args.data], outputs, tc.seed, started)
    return EXIT_OK


def cmd_sample(args):
    started = _now()
    ck = trainer.load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    records = trainer.sample(ck.generator, ck.codec, args.count, args.seed)
    path = out / "synthetic.csv"
    data.write_diary_csv(path, records, ck.codec.schema)
    _write_manifest(out, "sample", {"count": args.count, "seed": args.seed}, [args.checkpoint], [path],
                    args.seed, started)
    return EXIT_OK


def _check_same_schema(a, b):
    da = {v.name: v.to_dict() for v in a.variables}
    db = {v.name: v.to_dict() for v in b.variables}
    differing = sorted(n for n in set(da) | set(db) if da.get(n) != db.get(n))
    if differing:
        raise SchemaError(f"real and synthetic data use different schemas; differing variables: {differing}")


def _resolvable(schema, names):
    out = []
    for n in names:
        try:
            schema.categorical_view(n)
        except SchemaError:
            return None
        out.append(n)
    return out


def _default_pairs(schema):
    pairs = [p for p in ev.CONDITIONAL_PAIRS if _resolvable(schema, p)]
    if pairs:
        return pairs
    cats = [v.name for v in schema.variables if v.is_categorical]
    return [(cats[i], cats[j]) for i in range(len(cats)) for j in range(len(cats)) if i != j]


def _default_joint(schema):
    return _resolvable(schema, ev.JOINT_VARIABLES) or [v.name for v in schema.variables if v.is_categorical]


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def _histogram_variables(schema):
    return [v.name for v in schema.variables if v.is_categorical or v.bins] + [d.name for d in schema.derived]


def cmd_evaluate(args):
    started = _now()
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise UsageError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    real, schema = load_records(args.real)
    syn, syn_schema = load_records(args.synthetic)
    _check_same_schema(schema, syn_schema)
    if not real or not syn:
        raise ParameterError("both datasets must contain at least one person")
    out = _out_dir(args.out)
    outputs, report = [], {}

    def summary(path, rows):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["comparison", "srmse", "pearson", "r_squared", "n_bins"])
            for name, rep in rows:
                d = rep.to_dict()
                w.writerow([name] + ["" if d[k] is None else repr(d[k]) for k in ("srmse", "pearson", "r_squared")]
                           + [d["n_bins"]])
            vals = [r.srmse for _, r in rows]
            if vals:
                w.writerow(["mean", repr(float(np.mean(vals))), "", "", ""])
        outputs.append(path)

    if "marginals" in metrics:
        rows = []
        for v in _histogram_variables(schema):
            h_syn, h_real = ev.marginal(syn, v, schema), ev.marginal(real, v, schema)
            p = out / f"marginal_{_safe(v)}.csv"
            ev.write_comparison_csv(p, h_syn, h_real)
            outputs.append(p)
            rows.append((v, ev.srmse(h_syn, h_real)))
        summary(out / "marginals_summary.csv", rows)
        report["marginals"] = {n: r.to_dict() for n, r in rows}
    if "conditionals" in metrics:
        rows = []
        for a, b in _default_pairs(schema):
            c_syn, c_real = ev.conditional(syn, a, b, schema), ev.conditional(real, a, b, schema)
            p = out / f"conditional_{_safe(a)}_given_{_safe(b)}.csv"
            ev.write_conditional_csv(p, c_syn, c_real)
            outputs.append(p)
            try:
                rows.append((f"{a}|{b}", ev.conditional_srmse(c_syn, c_real)))
            except ParameterError:
                pass  # no shared support; the CSV still records the tables
        summary(out / "conditionals_summary.csv", rows)
        report["conditionals"] = {n: r.to_dict() for n, r in rows}
    if "joint" in metrics:
        names = _default_joint(schema)
        h_syn, h_real = ev.joint(syn, names, schema), ev.joint(real, names, schema)
        p = out / "joint.csv"
        ev.write_comparison_csv(p, h_syn, h_real)
        outputs.append(p)
        rep = ev.srmse(h_syn, h_real)
        summary(out / "joint_summary.csv", [("|".join(names), rep)])
        report["joint"] = {"variables": names, **rep.to_dict()}
    if "pca" in metrics:
        longest = max(len(r.trips) for r in real + syn)
        codec = data.Codec(schema, max(data.DEFAULT_MAX_LEN, longest, 1))
        report["pca"] = {}
        for tag, recs in (("real", real), ("synthetic", syn)):
            mat = np.array([codec.encode_tabular(r) for r in recs])
            k = min(5, max(1, int((mat.std(axis=0) > 0).sum())))
            res = ev.pca(mat, k, ev.encoded_columns(schema))
            sub = _out_dir(out / f"pca_{tag}")
            outputs += ev.write_pca_csvs(sub, res)
            report["pca"][tag] = {"explained_variance_ratio": res.explained_variance_ratio[:k].tolist(),
                                  "dropped_columns": res.dropped}
    if "tours" in metrics:
        t_syn = ev.tour_lengths(syn)
        t_real = ev.tour_lengths(real)
        p = out / "tour_lengths.csv"
        ev.write_comparison_csv(p, t_syn.histogram, t_real.histogram)
        outputs.append(p)
        if t_syn.histogram.defined and t_real.histogram.defined:
            rep = ev.srmse(t_syn.histogram, t_real.histogram)
            summary(out / "tours_summary.csv", [("segment_km", rep)])
            report["tours"] = rep.to_dict()
        else:
            report["tours"] = None
    rp = out / "report.json"
    ev.write_json(rp, report)
    outputs.append(rp)
    _write_manifest(out, "evaluate", {"metrics": metrics}, [args.real, args.synthetic], outputs, None, started)
    return EXIT_OK


def _attack_set(path, codec):
    if _is_dataset_file(path):
        ds = data.load_dataset(path)
        if ds.codec.to_dict() == codec.to_dict():
            return ds
        if ds.codec.width != codec.width or ds.codec.max_len != codec.max_len:
            raise DimensionError(
                f"{path}: encoded width {ds.codec.width} / length {ds.codec.max_len} does not match the "
                f"checkpoint's {codec.width} / {codec.max_len}")
        records = ds.records()
    else:
        records, _ = load_records(path)
    return data.Dataset.from_records(records, codec, str(path))


def cmd_attack(args):
    started = _now()
    ck = trainer.load_checkpoint(args.checkpoint)
    train_set = _attack_set(args.train, ck.codec)
    val_set = _attack_set(args.validation, ck.codec)
    frac = len(train_set) / (len(train_set) + len(val_set))
    rep = attack.mia_scores(ck.discriminator, train_set, val_set, ck.train_config.loss, frac)
    out = _out_dir(args.out)
    paths = [out / "attack_report.json", out / "attack_histogram.csv"]
    ev.write_json(paths[0], rep.to_dict())
    attack.write_histogram_csv(paths[1], rep)
    _write_manifest(out, "attack", {"loss": ck.train_config.loss, "training_fraction": frac},
                    [args.checkpoint, args.train, args.validation], paths, None, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diarygan", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"diarygan {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fixture", help="write a synthetic diary fixture and its analytic truth")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--count", type=_positive_int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--kind", choices=("survey", "toy"), default="survey")
    f.add_argument("--max-len", type=_positive_int, default=data.DEFAULT_MAX_LEN)
    f.set_defaults(func=cmd_fixture)

    t = sub.add_parser("train", help="train the generator and (private) discriminator")
    t.add_argument("--data", required=True, help="diary CSV or dataset file")
    t.add_argument("--noise-multiplier", type=_nonneg_float)
    t.add_argument("--clip", type=float)
    t.add_argument("--loss", choices=trainer.LOSSES)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch", type=_positive_int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file; flags override its entries")
    t.add_argument("--holdout", type=float, help="fraction held out as a validation set")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="decode synthetic diaries from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="compare synthetic against real diaries")
    e.add_argument("--real", required=True)
    e.add_argument("--synthetic", required=True)
    e.add_argument("--metrics", default=",".join(METRICS))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("attack", help="membership inference with the checkpoint's discriminator")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--train", required=True)
    a.add_argument("--validation", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as exc:
        print(f"diarygan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"diarygan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (DiaryGanError, OSError) as exc:
        print(f"diarygan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
