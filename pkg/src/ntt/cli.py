"""Command-line pipeline: ``transfer``, ``prune``, ``train``, ``probe`` and ``report``.

Settings come from built-in defaults, then an optional ``--config`` file
(``key = value`` lines under ``[experiment]``, ``[ntt]`` and ``[train]``
headers), then ``--key value`` flags. Keys of the ``ntt`` and ``train``
sections may be given as ``--ntt.key`` / ``--ntt-key`` or, when the name is
unique, as a bare ``--key``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import METHODS as BASELINE_METHODS
from .baselines import baseline_mask, check_method_scheme, random_mask
from .checkpoint import read_checkpoint, write_checkpoint
from .data import Dataset, binary_digit_subset, load_cifar10_binary, load_mnist, split_train_val
from .errors import ConfigError, DataError, NTTError, NumericalError
from .masks import check_density, check_scheme, kept_counts
from .network import count_multiply_adds, init_glorot, make_rng, preset, speedup
from .training import TrainConfig, train
from .transfer import NTT_PRESETS, NttConfig, Teacher, ntt_transfer

__all__ = ["main", "ExperimentConfig", "build_parser", "resolve_config"]

METHODS = ("ntt", "dense") + BASELINE_METHODS
DATASETS = ("mnist", "fashion", "cifar10", "toy")
SUMMARY_HEADER = ("method", "scheme", "density", "reps", "test_acc_mean", "test_acc_min",
                  "test_acc_max", "test_acc_var", "train_acc_mean", "speedup_mean")


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str = "lenet-300-100"
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    method: str = "ntt"
    scheme: str = "layerwise"
    density: float = 0.03
    seed: int = 0
    reps: int = 5
    out: str = "runs"
    preset: str = ""
    train_subset: int = 0
    test_subset: int = 0
    val_fraction: float = 0.1
    snip_batch_size: int = 128
    checkpoint: str = ""
    ntt: NttConfig = field(default_factory=NttConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        check_scheme(self.scheme)
        check_density(self.density)
        if self.method in ("snip", "layerwise_snip"):
            check_method_scheme(self.method, self.scheme)
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        self.ntt.validate()
        self.train.validate()
        return self


_TOP_KEYS = {f.name: f.type for f in fields(ExperimentConfig) if f.name not in ("ntt", "train")}
_SECTIONS = {"ntt": NttConfig, "train": TrainConfig}


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int) or (default is None and key.endswith("iterations")):
            if raw.strip().lower() in ("", "none"):
                return None
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def _canonical(key: str) -> tuple[str | None, str]:
    """Map ``ntt.lr``, ``ntt-lr``, ``ntt_lr`` or ``gamma_sq`` to ``(section, field)``."""
    key = key.strip().lstrip("-").replace("-", "_")
    if "." in key:
        sec, name = key.split(".", 1)
        return sec, name
    if key in _TOP_KEYS:
        return None, key
    for sec in _SECTIONS:
        if key.startswith(sec + "_") and key[len(sec) + 1:] in _field_names(sec):
            return sec, key[len(sec) + 1:]
    owners = [sec for sec in _SECTIONS if key in _field_names(sec)]
    if len(owners) == 1:
        return owners[0], key
    if len(owners) > 1:
        raise ConfigError(f"ambiguous key {key!r}; qualify it as ntt.{key} or train.{key}")
    raise ConfigError(f"unknown setting {key!r}")


def _field_names(sec: str) -> set[str]:
    return {f.name for f in fields(_SECTIONS[sec])}


def _dataset_defaults(dataset: str, arch: str) -> tuple[str, dict]:
    cnn = arch != "lenet-300-100"
    if dataset == "toy":
        return ("toy-cnn" if cnn else "toy-mlp"), dict(
            optimizer="sgd", learning_rate=0.01, batch_size=0, iterations=5000,
            loss="quadratic", eval_every=10,
        )
    if dataset == "cifar10":
        return "cifar-conv4", {}
    base = "fashion" if dataset == "fashion" else "mnist"
    return f"{base}-{'cnn' if cnn else 'mlp'}", {}


def resolve_config(settings: dict[tuple[str | None, str], str]) -> ExperimentConfig:
    """Build a validated config from ``{(section, key): raw string}`` settings."""
    top = {k: v for (s, k), v in settings.items() if s is None}
    for k in top:
        if k not in _TOP_KEYS:
            raise ConfigError(f"unknown setting {k!r}")
    base = ExperimentConfig()
    vals = {k: _convert(v, getattr(base, k), k) for k, v in top.items()}
    merged = {**{k: getattr(base, k) for k in _TOP_KEYS}, **vals}
    preset_name, train_defaults = _dataset_defaults(merged["dataset"], merged["arch"])
    preset_name = merged["preset"] or preset_name
    if preset_name not in NTT_PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(NTT_PRESETS)}")
    ntt = NttConfig(**NTT_PRESETS[preset_name]).with_overrides(
        scheme=merged["scheme"], density=merged["density"], snip_batch_size=merged["snip_batch_size"]
    )
    tr = TrainConfig().with_overrides(**train_defaults)
    for (sec, key), raw in settings.items():
        if sec is None:
            continue
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section {sec!r}")
        obj = ntt if sec == "ntt" else tr
        if key not in _field_names(sec):
            raise ConfigError(f"unknown setting {sec}.{key}")
        val = _convert(raw, getattr(obj, key), f"{sec}.{key}")
        if sec == "ntt":
            ntt = ntt.with_overrides(**{key: val})
        else:
            tr = tr.with_overrides(**{key: val})
    merged["preset"] = preset_name
    return ExperimentConfig(**merged, ntt=ntt, train=tr).validate()


def _read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    out = {}
    for sec in parser.sections():
        for key, val in parser.items(sec):
            key = key.replace("-", "_")
            out[(None if sec == "experiment" else sec, key)] = val
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntt", description=__doc__.split("\n\n")[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("transfer", "run NTT and write student checkpoints"),
        ("prune", "build baseline masks and write checkpoints"),
        ("train", "train checkpoints with labels and write histories and records"),
        ("probe", "toy task: loss curves and output traces of teacher, NTT student and random sparse nets"),
        ("report", "aggregate records into summary and speedup tables"),
    ]:
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.add_argument("--config", help="key=value file with [experiment], [ntt], [train] sections")
        p.add_argument("--arch")
        p.add_argument("--dataset")
        p.add_argument("--data-dir", dest="data_dir")
        p.add_argument("--method")
        p.add_argument("--scheme")
        p.add_argument("--density")
        p.add_argument("--seed")
        p.add_argument("--reps")
        p.add_argument("--out")
        p.add_argument("--preset")
    return parser


def parse_settings(argv: list[str]) -> tuple[str, dict]:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    settings: dict = {}
    if args.config:
        settings.update(_read_config_file(args.config))
    for key in _TOP_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[(None, key)] = val
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {tok} needs a value")
            key, val = tok[2:], extra[i + 1]
            i += 2
        settings[_canonical(key)] = val
    return args.command, settings


# ----------------------------------------------------------------------
# data and naming helpers
# ----------------------------------------------------------------------


def _n_classes(cfg: ExperimentConfig) -> int:
    return 2 if cfg.dataset == "toy" else 10


def load_splits(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset | None, Dataset | None]:
    """``(train, val, test)``; the toy task has neither validation nor test data."""
    root = Path(cfg.data_dir)
    if cfg.dataset == "cifar10":
        full, test = load_cifar10_binary(root, "train"), load_cifar10_binary(root, "test")
    else:
        full = load_mnist(root, "train")
        if cfg.dataset == "toy":
            return binary_digit_subset(full), None, None
        test = load_mnist(root, "test")
    if cfg.train_subset:
        full = full.subset(np.arange(min(cfg.train_subset, len(full))))
    if cfg.test_subset:
        test = test.subset(np.arange(min(cfg.test_subset, len(test))))
    tr, val = split_train_val(full, cfg.val_fraction, make_rng(seed, "split"))
    return tr, val, test


def _stem(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.arch}_{cfg.dataset}_{cfg.method}_{cfg.scheme}_p{cfg.density:g}_seed{seed}"


def _seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + r for r in range(cfg.reps)]


def _log_time(cfg: ExperimentConfig, what: str, seed: int, seconds: float) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "timings.log").open("a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {what} {_stem(cfg, seed)} {seconds:.3f}s\n")


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def _transfer_one(cfg: ExperimentConfig, seed: int, train_ds: Dataset):
    net = preset(cfg.arch, _n_classes(cfg))
    teacher = init_glorot(net, make_rng(seed, "init"))
    ncfg = cfg.ntt.with_overrides(seed=seed)
    # only the label-free view of the data reaches the transfer loop
    mask, student, report = ntt_transfer(Teacher(net, teacher), train_ds.unlabeled(), ncfg)
    return net, teacher, mask, student, report


def cmd_transfer(cfg: ExperimentConfig) -> list[Path]:
    if cfg.method != "ntt":
        raise ConfigError("transfer runs the ntt method; use prune for baselines")
    written = []
    for seed in _seeds(cfg):
        t0 = time.perf_counter()
        train_ds, _, _ = load_splits(cfg, seed)
        net, _, mask, student, report = _transfer_one(cfg, seed, train_ds)
        out = Path(cfg.out)
        ck = write_checkpoint(out / f"{_stem(cfg, seed)}.ckpt", net.name, seed, mask, student)
        _write_csv(out / f"{_stem(cfg, seed)}_ntt.csv",
                   ("iteration", "objective", "output_term", "kernel_term", "density"), report.rows())
        _log_time(cfg, "transfer", seed, time.perf_counter() - t0)
        written.append(ck)
    return written


def cmd_prune(cfg: ExperimentConfig) -> list[Path]:
    if cfg.method == "ntt":
        raise ConfigError("use the transfer command for ntt")
    written = []
    for seed in _seeds(cfg):
        t0 = time.perf_counter()
        net = preset(cfg.arch, _n_classes(cfg))
        if cfg.method == "dense":
            params, mask = init_glorot(net, make_rng(seed, "init")), net.ones_mask()
        else:
            x = y = None
            if cfg.method in ("snip", "layerwise_snip", "logit_snip"):
                train_ds, _, _ = load_splits(cfg, seed)
                take = min(cfg.snip_batch_size, len(train_ds))
                idx = np.sort(make_rng(seed, "snip-batch").choice(len(train_ds), take, replace=False))
                x = train_ds.inputs[idx]
                if cfg.method != "logit_snip":
                    y = train_ds.targets[idx] if train_ds.targets is not None else train_ds.labels[idx]
            loss = cfg.train.loss
            mask, params = baseline_mask(cfg.method, net, cfg.density, cfg.scheme, seed, x, y, loss)
        ck = write_checkpoint(Path(cfg.out) / f"{_stem(cfg, seed)}.ckpt", net.name, seed, mask, params)
        _log_time(cfg, "prune", seed, time.perf_counter() - t0)
        written.append(ck)
    return written


def _record(cfg, seed, net, mask, hist, val_acc) -> dict:
    final = hist.final
    return {
        "arch": cfg.arch,
        "dataset": cfg.dataset,
        "method": cfg.method,
        "scheme": cfg.scheme,
        "density": cfg.density,
        "seed": seed,
        "train_acc": final["train_acc"],
        "test_acc": final["test_acc"],
        "val_acc": val_acc,
        "kept_per_layer": {str(k): v for k, v in kept_counts(net, mask).items()},
        "multiply_adds": count_multiply_adds(net, mask).total,
        "dense_multiply_adds": count_multiply_adds(net).total,
        "speedup": speedup(net, mask),
    }


def cmd_train(cfg: ExperimentConfig) -> list[dict]:
    from .training import evaluate

    records = []
    for seed in _seeds(cfg):
        t0 = time.perf_counter()
        path = Path(cfg.checkpoint) if cfg.checkpoint and cfg.reps == 1 else Path(cfg.out) / f"{_stem(cfg, seed)}.ckpt"
        if not path.exists():
            raise DataError(f"checkpoint {path} not found; run transfer or prune first")
        ck = read_checkpoint(path)
        net = preset(cfg.arch, _n_classes(cfg))
        if ck.arch != net.name or ck.params.size != net.n_params:
            raise ConfigError(f"checkpoint is for {ck.arch} ({ck.params.size} params), config says {cfg.arch}")
        train_ds, val, test = load_splits(cfg, seed)
        mask = None if cfg.method == "dense" else ck.mask
        params, hist = train(net, ck.params, mask, train_ds, cfg.train.with_overrides(seed=seed), test)
        val_acc = evaluate(net, params, mask, val) if val is not None and len(val) else float("nan")
        out = Path(cfg.out)
        hist.to_csv(out / f"{_stem(cfg, seed)}_history.csv")
        rec = _record(cfg, seed, net, ck.mask, hist, val_acc)
        (out / f"{_stem(cfg, seed)}_record.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
        _log_time(cfg, "train", seed, time.perf_counter() - t0)
        records.append(rec)
    return records


def cmd_probe(cfg: ExperimentConfig) -> dict:
    """Teacher, NTT student and random sparse network on the toy task."""
    from .training import output_trace

    if cfg.dataset != "toy":
        raise ConfigError("probe runs on the toy dataset (--dataset toy)")
    out = Path(cfg.out)
    results = {}
    for seed in _seeds(cfg):
        t0 = time.perf_counter()
        ds, _, _ = load_splits(cfg, seed)
        net, teacher, mask, student, report = _transfer_one(cfg, seed, ds)
        rnd_mask = random_mask(net, cfg.density, cfg.scheme, make_rng(seed, "mask"))
        tcfg = cfg.train.with_overrides(seed=seed, snapshot_every=cfg.train.snapshot_every or 100)
        runs = {
            "teacher": train(net, teacher, None, ds, tcfg),
            "student": train(net, student, mask, ds, tcfg),
            "random": train(net, teacher, rnd_mask, ds, tcfg),
        }
        masks = {"teacher": None, "student": mask, "random": rnd_mask}
        stem = f"probe_{cfg.arch}_p{cfg.density:g}_seed{seed}"
        its = runs["teacher"][1].iteration
        _write_csv(out / f"{stem}_loss.csv", ("iteration", "teacher", "student", "random"),
                   zip(its, *(runs[k][1].train_loss for k in ("teacher", "student", "random"))))
        _write_csv(out / f"{stem}_ntt.csv", ("iteration", "objective", "output_term", "kernel_term", "density"),
                   report.rows())
        groups = [ds.inputs[ds.labels == c] for c in range(_n_classes(cfg))]
        rows = []
        for name, (_, hist) in runs.items():
            tr = output_trace(net, hist.snapshots, groups, masks[name])
            for (it, _), per_class in zip(hist.snapshots, tr):
                for c, vec in enumerate(per_class):
                    rows.append((name, it, c, *map(float, vec)))
        _write_csv(out / f"{stem}_trace.csv",
                   ("net", "iteration", "class") + tuple(f"out{k}" for k in range(net.n_outputs)), rows)
        results[seed] = {k: v[1] for k, v in runs.items()}
        results[seed]["ntt_report"] = report
        _log_time(cfg, "probe", seed, time.perf_counter() - t0)
    return results


def cmd_report(cfg: ExperimentConfig) -> tuple[Path, Path]:
    out = Path(cfg.out)
    recs = [json.loads(p.read_text()) for p in sorted(out.glob("*_record.json"))]
    if not recs:
        raise DataError(f"no *_record.json files in {out}")
    groups: dict = {}
    for r in recs:
        groups.setdefault((r["method"], r["scheme"], r["density"]), []).append(r)
    summary = []
    for (method, scheme, density), rs in sorted(groups.items()):
        te = np.array([r["test_acc"] for r in rs])
        tr = np.array([r["train_acc"] for r in rs])
        sp = np.array([r["speedup"] for r in rs])
        summary.append((method, scheme, float(density), len(rs), float(te.mean()), float(te.min()),
                        float(te.max()), float(te.var()), float(tr.mean()), float(sp.mean())))
    layers = sorted({k for r in recs for k in r["kept_per_layer"]}, key=int)
    speed_rows = [
        (r["method"], r["scheme"], float(r["density"]), r["seed"], *[r["kept_per_layer"].get(k, 0) for k in layers],
         r["multiply_adds"], r["dense_multiply_adds"], float(r["speedup"]))
        for r in sorted(recs, key=lambda r: (r["method"], r["scheme"], r["density"], r["seed"]))
    ]
    s_path, p_path = out / "summary.csv", out / "speedup.csv"
    _write_csv(s_path, SUMMARY_HEADER, summary)
    _write_csv(p_path, ("method", "scheme", "density", "seed", *[f"kept_layer{k}" for k in layers],
                        "multiply_adds", "dense_multiply_adds", "speedup"), speed_rows)
    return s_path, p_path


COMMANDS = {
    "transfer": cmd_transfer,
    "prune": cmd_prune,
    "train": cmd_train,
    "probe": cmd_probe,
    "report": cmd_report,
}


def run(argv: list[str]) -> int:
    command, settings = parse_settings(argv)
    cfg = resolve_config(settings)
    COMMANDS[command](cfg)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except NTTError as exc:
        print(f"ntt: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"ntt: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except OSError as exc:
        print(f"ntt: data error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
