"""Command-line entry point: train, eval, gradcheck, invariance, preset."""

import argparse
import copy
import csv
import json
import statistics
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import AugmentPolicy, dataset_files, file_sha256, load_dataset, transform_dataset
from .errors import ConfigError, FormatError, NumericAbort
from .gradcheck import format_table, run_suite, write_reports_csv
from .group import (
    PROBE_TRANSFORMS,
    c4_rotation_orbit,
    cyclic_shift_orbit,
    invariance_score,
    verify_lemma1,
    write_invariance_csv,
)
from .tensor import make_rng
from .training import (
    ArchSpec,
    TrainConfig,
    TrainState,
    arch_from_label,
    build_model,
    count_filters,
    evaluate,
    load_checkpoint,
    parse_model_label,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

# ---------------------------------------------------------------------------
# configuration

DATA_DEFAULTS = {"dataset": "mnist", "train_size": 10000, "test_size": 2000}
MNIST_LABELS = ["ConvNet(36)", "NPTN(36, 1)", "NPTN(18, 2)", "NPTN(12, 3)", "NPTN(9, 4)"]
CIFAR_LABELS = ["ConvNet(48)", "NPTN(48, 1)", "NPTN(24, 2)", "NPTN(16, 3)", "NPTN(12, 4)", "NPTN(9, 5)"]


def _defaults():
    return {
        "data": dict(DATA_DEFAULTS),
        "model": "ConvNet(36)",
        "arch": None,
        "train": TrainConfig().to_dict(),
    }


def preset_slug(label):
    kind, channels, G = parse_model_label(label)
    return f"convnet-{channels}" if kind == "conv" else f"nptn-{channels}-{G}"


def _model_presets():
    out = {}
    for dataset, labels in (("mnist", MNIST_LABELS), ("cifar10", CIFAR_LABELS)):
        prefix = "mnist" if dataset == "mnist" else "cifar"
        for label in labels:
            out[f"{prefix}-{preset_slug(label)}"] = {"data": {"dataset": dataset}, "model": label}
    return out


def _experiment_presets():
    out = {}
    for deg in (0, 30, 60, 90):
        # rotation runs also carry a train-only jitter of up to 2 px
        out[f"mnist-rot-{deg}"] = {"data": {"dataset": "mnist"}, "train": {"augment": {
            "rotation_range": float(deg), "train_jitter": 2, "apply_at_test": True}}}
    for px in (0, 4, 8, 12):
        out[f"mnist-trans-{px}"] = {"data": {"dataset": "mnist"}, "train": {"augment": {
            "translate_range": px, "apply_at_test": True}}}
    out["cifar-smoke"] = {
        "data": {"dataset": "cifar10", "train_size": 5000, "test_size": 1000},
        "model": "NPTN(24, 2)",
        "train": {"epochs": 2, "decay_epochs": [], "augment": {"pad_crop": 4, "hflip": True}},
    }
    return out


MODEL_PRESETS = _model_presets()
EXPERIMENT_PRESETS = _experiment_presets()
PRESETS = {**MODEL_PRESETS, **EXPERIMENT_PRESETS}


@dataclass
class RunConfig:
    dataset: str
    train_size: int
    test_size: int
    model: str
    arch: ArchSpec
    train: TrainConfig

    def to_dict(self):
        return {
            "data": {"dataset": self.dataset, "train_size": self.train_size, "test_size": self.test_size},
            "model": self.model,
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
        }


def _merge(base, update, path=""):
    """Recursively merge ``update`` into ``base``, rejecting keys ``base`` lacks."""
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}", where)
        current = base[key]
        if isinstance(current, dict) and key != "arch":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object", where)
            _merge(current, value, where)
        else:
            base[key] = _coerce(value, current, where)
    return base


def _coerce(value, current, where):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where!r} expects true/false, got {value!r}", where)
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where!r} expects an integer, got {value!r}", where)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where!r} expects a number, got {value!r}", where)
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{where!r} expects a string, got {value!r}", where)
    if isinstance(current, list) and not isinstance(value, list):
        raise ConfigError(f"{where!r} expects a list, got {value!r}", where)
    return value


def _field_paths(doc, prefix=""):
    for key, value in doc.items():
        path = f"{prefix}.{key}" if prefix else key
        yield path
        if isinstance(value, dict) and key != "arch":
            yield from _field_paths(value, path)


def _parse_override(text, doc):
    """``train.epochs=3`` or ``epochs=3``; the value is JSON, else a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", text)
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if "." not in key:
        matches = [p for p in _field_paths(doc) if p == key or p.endswith("." + key)]
        if len(matches) != 1:
            raise ConfigError(f"unknown config key {key!r}" if not matches
                              else f"ambiguous key {key!r}: {matches}", key)
        key = matches[0]
    update = value
    for part in reversed(key.split(".")):
        update = {part: update}
    return update


def parse_config(source=None, overrides=(), preset=None):
    """Resolve defaults <- preset <- config document <- overrides into a RunConfig.

    ``source`` is a path to a JSON file, a JSON string, or a dict.  A run
    manifest is accepted too (its ``config`` entry is used).
    """
    doc = _defaults()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "preset")
        _merge(doc, copy.deepcopy(PRESETS[preset]))
    if source is not None:
        if isinstance(source, dict):
            user = source
        else:
            text = str(source)
            if not text.lstrip().startswith("{"):
                if not Path(text).is_file():
                    raise ConfigError(f"config file {text!r} not found", "config")
                text = Path(text).read_text()
            try:
                user = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from None
        if "config" in user and "version" in user:
            user = user["config"]
        _merge(doc, copy.deepcopy(user))
    touched = set()
    for text in overrides:
        update = _parse_override(text, doc)
        touched.update(_field_paths(update))
        _merge(doc, update)
    if "train.epochs" in touched and "train.decay_epochs" not in touched:
        # shortening a run drops the decay steps that no longer fit
        doc["train"]["decay_epochs"] = [e for e in doc["train"]["decay_epochs"] if e < doc["train"]["epochs"]]
    return _resolve(doc)


def _resolve(doc):
    data, t = doc["data"], doc["train"]
    if data["dataset"] not in ("mnist", "cifar10"):
        raise ConfigError(f"dataset must be 'mnist' or 'cifar10', got {data['dataset']!r}", "data.dataset")
    for key in ("train_size", "test_size"):
        if data[key] is not None and data[key] < 1:
            raise ConfigError(f"data.{key} must be >= 1", f"data.{key}")
    try:
        augment = AugmentPolicy(**t["augment"])
    except Exception as e:
        raise ConfigError(f"train.augment: {e}", "train.augment") from None
    config = TrainConfig(**{**t, "augment": augment}).validate()
    if doc["arch"] is not None:
        try:
            arch = ArchSpec(**doc["arch"])
        except TypeError as e:
            raise ConfigError(f"arch: {e}", "arch") from None
        arch.validate()
    else:
        arch = arch_from_label(doc["model"], data["dataset"], aggregate=config.aggregate)
    return RunConfig(data["dataset"], data["train_size"], data["test_size"], doc["model"], arch, config)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunManifest:
    config: dict
    seed: int
    datasets: dict
    outputs: dict
    version: str = __version__
    command: list = None

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _datasets_checksums(dataset, data_dir):
    files = dataset_files(dataset, data_dir)
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
    return {p.name: file_sha256(p) for p in files}


def run_training(run, data_dir, out_dir, log=print, command=None):
    """Train one configuration into ``out_dir`` and return its Metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {name: str(out_dir / name) for name in
               ("manifest.json", "metrics.csv", "timing.csv", "checkpoint.nptn")}
    manifest = RunManifest(run.to_dict(), run.train.seed, _datasets_checksums(run.dataset, data_dir),
                           outputs, command=command)
    manifest.write(outputs["manifest.json"])

    train_set, test_set = load_dataset(run.dataset, data_dir, run.train_size, run.test_size)
    test_set = transform_dataset(test_set, run.train.augment, run.train.test_augment_seed)
    # one stream per run: weight init first, then shuffles and augmentation
    rng = make_rng(run.train.seed)
    model = build_model(run.arch, rng)
    log(f"{run.model}: {count_filters(run.arch)} filters, {len(train_set)} train / {len(test_set)} test")
    metrics, ckpt = train(model, train_set, test_set, run.train, state=TrainState(0, rng), log=log)
    metrics.write_csv(outputs["metrics.csv"])
    metrics.write_timing(outputs["timing.csv"])
    save_checkpoint(outputs["checkpoint.nptn"], ckpt.model, run.train, ckpt.state,
                    extra={"dataset": run.dataset, "test_size": run.test_size, "model": run.model})
    return metrics


def run_experiment_preset(name, models, seeds, data_dir, out_dir, epochs=None, log=print):
    """Run every (model, seed) of an experiment preset; returns {model: [final test error]}."""
    if name not in EXPERIMENT_PRESETS:
        raise ConfigError(f"unknown experiment preset {name!r}; choose from {sorted(EXPERIMENT_PRESETS)}",
                          "preset")
    results = {}
    for label in models:
        for seed in seeds:
            overrides = [f"model={json.dumps(label)}", f"train.seed={seed}"]
            if epochs is not None:
                overrides.append(f"train.epochs={epochs}")
            run = parse_config(overrides=overrides, preset=name)
            run_dir = Path(out_dir) / name / preset_slug(label) / f"seed{seed}"
            log(f"== {name} {label} seed {seed} -> {run_dir}")
            metrics = run_training(run, data_dir, run_dir, log=log)
            results.setdefault(label, []).append(metrics.rows[-1].test_error_pct)
    summary = Path(out_dir) / name / "summary.csv"
    with open(summary, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "seeds", "test_error_pct", "median_test_error_pct"])
        for label, errs in results.items():
            w.writerow([label, " ".join(map(str, seeds)), " ".join(repr(e) for e in errs),
                        repr(statistics.median(errs))])
    return results


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    overrides = list(args.set or [])
    if args.model:
        overrides.append(f"model={json.dumps(args.model)}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    run = parse_config(args.config or args.manifest, overrides, args.preset)
    run_training(run, args.data_dir, args.out_dir, command=sys.argv[1:])
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    extra = ckpt.extra
    dataset = args.dataset or extra.get("dataset", "mnist")
    test_size = args.test_size or extra.get("test_size")
    _, test_set = load_dataset(dataset, args.data_dir, 1, test_size)
    test_set = transform_dataset(test_set, ckpt.config.augment, ckpt.config.test_augment_seed)
    loss, err = evaluate(ckpt.model, test_set, ckpt.config.eval_batch_size)
    result = {"checkpoint": str(args.checkpoint), "epoch": ckpt.state.epoch, "test_loss": loss,
              "test_error_pct": err, "n": len(test_set)}
    print(json.dumps(result))
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "eval.json").write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    reports = run_suite(args.trials, args.seed)
    mutated = run_suite(max(2, args.trials // 4), args.seed, mutation_factor=1.01)
    print(format_table(reports))
    caught = [not r.passed for r in mutated]
    print(f"mutation test: {sum(caught)}/{len(caught)} corrupted layers rejected")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_reports_csv(reports, Path(args.out_dir) / "gradcheck.csv")
    return EXIT_OK if all(r.passed for r in reports) and all(caught) else EXIT_FAIL


def cmd_invariance(args):
    rng = make_rng(args.seed)
    if args.checkpoint is None:
        orbits = [cyclic_shift_orbit(rng.standard_normal(d)) for d in (4, 8, 16)]
        orbits.append(c4_rotation_orbit(rng.standard_normal((5, 5))))
        worst = 0.0
        for orbit in orbits:
            r = verify_lemma1(orbit, args.trials, rng)
            worst = max(worst, r.max_deviation)
            print(f"{r.transform:40s} trials {r.trials:5d}  max deviation {r.max_deviation:.3g}")
        return EXIT_OK if worst <= 1e-12 else EXIT_FAIL
    ckpt = load_checkpoint(args.checkpoint)
    transform = PROBE_TRANSFORMS[args.transform]
    reports = []
    for name, layer in ckpt.model.nptn_layers():
        wts = layer.weights
        M, N = wts.w.shape[:2]
        for m in range(M):
            for n in range(N):
                r = invariance_score(wts, (m, n), transform, args.trials, rng, args.transform)
                r.layer = name
                reports.append(r)
    if not reports:
        print("checkpoint has no NPTN layers")
        return EXIT_FAIL
    for name in dict.fromkeys(r.layer for r in reports):
        scores = [r.score for r in reports if r.layer == name]
        print(f"{name}: {len(scores)} nodes, mean score {np.mean(scores):.4f}, min {min(scores):.4f}")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        write_invariance_csv(reports, Path(args.out_dir) / "invariance.csv")
    return EXIT_OK


def cmd_preset(args):
    if args.name in MODEL_PRESETS:
        run = parse_config(overrides=[f"train.seed={args.seeds[0]}"] +
                           ([f"train.epochs={args.epochs}"] if args.epochs else []), preset=args.name)
        run_training(run, args.data_dir, Path(args.out_dir) / args.name, command=sys.argv[1:])
        return EXIT_OK
    models = args.model or (["NPTN(24, 2)"] if args.name == "cifar-smoke" else ["ConvNet(36)", "NPTN(12, 3)"])
    results = run_experiment_preset(args.name, models, args.seeds, args.data_dir, args.out_dir, args.epochs)
    for label, errs in results.items():
        print(f"{label:14s} median test error {statistics.median(errs):.2f}%  (seeds: "
              + ", ".join(f"{e:.2f}" for e in errs) + ")")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="nptn", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data-dir", default="data", help="directory holding mnist/ or cifar-10-batches-bin/")
        sp.add_argument("--device", default="none", choices=["none"], help="CPU only")
        sp.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--config", help="JSON file or inline JSON")
    t.add_argument("--manifest", help="re-run from a manifest.json")
    t.add_argument("--preset", help="model or experiment preset")
    t.add_argument("--model", help='model label, e.g. "NPTN(12, 3)"')
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.base_lr=0.05")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("checkpoint")
    e.add_argument("--dataset", choices=["mnist", "cifar10"])
    e.add_argument("--test-size", type=int)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="certify every layer's backward pass")
    common(g, data=False)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_gradcheck, seed=0)

    i = sub.add_parser("invariance", help="check group invariance or probe a checkpoint")
    common(i, data=False)
    i.add_argument("--checkpoint")
    i.add_argument("--transform", choices=sorted(PROBE_TRANSFORMS), default="rot90")
    i.add_argument("--trials", type=int, default=1000)
    i.add_argument("--out-dir")
    i.set_defaults(func=cmd_invariance, seed=0)

    r = sub.add_parser("preset", help="run a named experiment or model preset")
    common(r)
    r.add_argument("name", choices=sorted(PRESETS))
    r.add_argument("--model", action="append", help="repeatable; defaults to ConvNet(36) and NPTN(12, 3)")
    r.add_argument("--seeds", type=int, nargs="+", default=[0])
    r.add_argument("--epochs", type=int)
    r.add_argument("--out-dir", default="runs")
    r.set_defaults(func=cmd_preset)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("gradcheck", "invariance"):
        args.seed = 0
    if args.command == "preset" and args.seed is not None:
        args.seeds = [args.seed]
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e} (epoch {e.epoch}, batch {e.batch})", file=sys.stderr)
        return EXIT_NUMERIC
