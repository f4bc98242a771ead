"""Command-line entry point: dataset building, training, evaluation and sweeps.

Every command resolves a RunConfig from (profile defaults, --config file,
flags), writes it next to its outputs, and fails with a single stderr line
of the form ``sft: error: <kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluation, models, plotting, wmnist
from . import finetune as ft
from .noise import FAMILIES


class UsageError(Exception):
    pass


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    sup = argparse.SUPPRESS
    g.add_argument("--config", metavar="PATH", default=sup, help="JSON run config")
    g.add_argument("--seed", type=int, metavar="N", default=sup, help="training/shuffle seed")
    g.add_argument("--threads", type=int, metavar="N", default=sup, help="worker threads (1 = deterministic)")
    g.add_argument("--profile", choices=cfgmod.PROFILES, default=sup, help="default set: full or fast")
    g.add_argument("--out", metavar="DIR", default=sup, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="sft", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    ds = sub.add_parser("dataset", help="dataset commands", parents=[common])
    ds_sub = ds.add_subparsers(dest="action", metavar="ACTION", required=True)
    b = ds_sub.add_parser("build", help="build WMNIST from MNIST IDX files", parents=[common])
    b.add_argument("--mnist-dir", metavar="DIR", help="directory with the four MNIST IDX files")
    b.add_argument("--data-dir", metavar="DIR", help="WMNIST output directory")
    b.add_argument("--dataset-seed", type=int, metavar="N", help="placement seed (default 17)")
    b.add_argument("--limit", type=int, metavar="N", help="only the first N digits of each split")

    t = sub.add_parser("train", help="pretrain a reference network", parents=[common])
    t.add_argument("--arch", choices=cfgmod.ARCHS)
    t.add_argument("--data-dir", metavar="DIR")
    t.add_argument("--epochs", type=int, metavar="N")

    f = sub.add_parser("finetune", help="selective fine-tuning from a reference checkpoint", parents=[common])
    f.add_argument("--ref", metavar="CKPT", help="reference checkpoint (default OUT/ref.ckpt)")
    f.add_argument("--arch", choices=cfgmod.ARCHS)
    f.add_argument("--data-dir", metavar="DIR")
    f.add_argument("--epochs", type=int, metavar="N")
    f.add_argument("--alpha-loss", type=float, metavar="X")
    f.add_argument("--alpha-gate", type=float, metavar="X")
    f.add_argument("--beta-gate", type=float, metavar="X")

    e = sub.add_parser("eval", help="clean classification and localization accuracy", parents=[common])
    e.add_argument("--ckpt", metavar="CKPT", required=True)
    e.add_argument("--tag", metavar="NAME", help="model tag in the CSV (default: checkpoint stem)")
    e.add_argument("--arch", choices=cfgmod.ARCHS)
    e.add_argument("--data-dir", metavar="DIR")
    e.add_argument("--samples", type=int, metavar="N", help="first N test samples (0 = all)")

    r = sub.add_parser("robustness", help="noise sweeps for a reference/SFT pair", parents=[common])
    r.add_argument("--ref", metavar="CKPT", help="default OUT/ref.ckpt")
    r.add_argument("--sft", metavar="CKPT", help="default OUT/sft.ckpt")
    r.add_argument("--arch", choices=cfgmod.ARCHS)
    r.add_argument("--data-dir", metavar="DIR")
    r.add_argument("--families", nargs="+", choices=FAMILIES, metavar="FAMILY")
    r.add_argument("--levels", nargs="+", type=float, metavar="L")
    r.add_argument("--samples", type=int, metavar="N", help="first N test samples (0 = all)")

    p = sub.add_parser("plot", help="regenerate SVGs from sweep CSVs", parents=[common])
    p.add_argument("csv", nargs="+", metavar="CSV")
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    profile = getattr(args, "profile", None)
    if getattr(args, "config", None):
        cfg = cfgmod.load(args.config, profile)
    else:
        cfg = cfgmod.profile_defaults(profile or "full")
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "out", None) is not None:
        cfg.paths.out_dir = args.out
    for flag, section, key in [
        ("mnist_dir", cfg.paths, "mnist_dir"), ("data_dir", cfg.paths, "data_dir"),
        ("dataset_seed", cfg, "dataset_seed"), ("arch", cfg, "arch"),
        ("alpha_loss", cfg.gating, "alpha_loss"), ("alpha_gate", cfg.gating, "alpha_gate"),
        ("beta_gate", cfg.gating, "beta_gate"), ("families", cfg.evaluation, "families"),
        ("levels", cfg.evaluation, "levels"),
    ]:
        v = getattr(args, flag, None)
        if v is not None:
            setattr(section, key, v)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if args.command == "train":
            cfg.training.pretrain_epochs = epochs
        else:
            cfg.training.finetune_epochs = epochs
    samples = getattr(args, "samples", None)
    if samples is not None:
        if args.command == "eval":
            cfg.evaluation.eval_samples = samples
        else:
            cfg.evaluation.sweep_samples = samples
    if cfg.evaluation.levels:
        cfg.evaluation.levels = [int(v) if float(v).is_integer() else float(v) for v in cfg.evaluation.levels]
    return cfg.validate()


def set_threads(n: int) -> None:
    import numba
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out_dir(cfg) -> Path:
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_splits(cfg, need_train: bool):
    root = Path(cfg.paths.data_dir)
    splits = {}
    for name in (("train", "test") if need_train else ("test",)):
        d = root / name
        if not (d / "manifest.json").exists():
            raise CommandError("DatasetMissing", f"no WMNIST split at {d}; run 'sft dataset build' first")
        splits[name] = wmnist.load_split(d)
    if need_train and cfg.training.train_subset:
        splits["train"] = splits["train"].subset(np.arange(min(cfg.training.train_subset, len(splits["train"]))))
    return splits


def _load_net(path, cfg) -> models.Network:
    path = Path(path)
    if not path.exists():
        raise CommandError("CheckpointMissing", f"checkpoint not found: {path}")
    try:
        return models.load_checkpoint(path, expected_arch=cfg.arch)
    except models.CheckpointError as exc:
        raise CommandError(type(exc).__name__, f"{path}: {exc}") from exc


def _print_log_row(row):
    print(
        f"{row['phase']} epoch {row['epoch']}: loss_F={row['loss_F']:.4f} loss_S={row['loss_S']:.4f} "
        f"cls={row['clean_cls_acc']:.4f} loc={row['clean_loc_acc']:.4f} ({row['wall_seconds']:.0f}s)",
        flush=True,
    )


def _train_epochs(net, data, eval_split, tcfg, runner, log_path):
    """Run epochs one at a time so each log row is printed and written as it lands."""
    rows = []
    for epoch in range(1, tcfg.epochs + 1):
        one = ft.TrainConfig(**{**tcfg.__dict__, "epochs": 1})
        row = runner(net, data, one, eval_split, epoch)
        rows.append(row)
        _print_log_row(row)
        ft.write_log([row], log_path, append=epoch > 1)
    if tcfg.epochs == 0:
        ft.write_log([], log_path)
    return rows


def _epoch_runner(phase):
    step = ft.plain_step if phase == "pretrain" else ft.finetune_step

    def run(net, data, one, eval_split, epoch):
        return ft.run_epoch(net, data, one, phase, step, eval_split, epoch)

    return run


def cmd_dataset(cfg) -> int:
    mnist_dir, data_dir = Path(cfg.paths.mnist_dir), Path(cfg.paths.data_dir)
    stamp = data_dir / "build.json"
    limit = getattr(cfg, "_limit", None)
    if stamp.exists():
        prev = json.loads(stamp.read_text())
        same = prev.get("seed") == cfg.dataset_seed and prev.get("limit") == limit
        if same and all(
            (data_dir / s / "manifest.json").exists() and wmnist.split_digest(data_dir / s) == d
            for s, d in prev.get("digests", {}).items()
        ):
            print(f"{data_dir}: up-to-date, byte-identical (seed {cfg.dataset_seed})")
            return 0
    try:
        dirs = wmnist.build_wmnist(mnist_dir, data_dir, seed=cfg.dataset_seed, limit=limit)
    except FileNotFoundError as exc:
        raise CommandError("MnistMissing", str(exc)) from exc
    except wmnist.IdxError as exc:
        raise CommandError(type(exc).__name__, str(exc)) from exc
    digests = {s: wmnist.split_digest(d) for s, d in dirs.items()}
    stamp.write_text(json.dumps({"seed": cfg.dataset_seed, "limit": limit, "digests": digests}, indent=2) + "\n")
    cfg.save(data_dir / "config.json")
    for s, d in dirs.items():
        man = json.loads((d / "manifest.json").read_text())
        print(f"{s}: {man['count']} samples, seed {man['seed']}, generator v{man['generator_version']} -> {d}")
    return 0


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    splits = _load_splits(cfg, need_train=True)
    tcfg = cfg.train_config("pretrain")
    net = models.build(cfg.arch, seed=cfg.seed)
    cfg.save(out / "config.train.json")
    t0 = time.perf_counter()
    _train_epochs(net, splits["train"], splits["test"], tcfg, _epoch_runner("pretrain"), out / "train_log.csv")
    ckpt = models.save_checkpoint(net, out / "ref.ckpt", seed=cfg.seed, epochs=tcfg.epochs, phase="pretrain")
    print(f"wrote {ckpt} ({time.perf_counter() - t0:.0f}s)")
    return 0


def cmd_finetune(cfg, ref_path) -> int:
    out = _out_dir(cfg)
    ref_path = Path(ref_path) if ref_path else out / "ref.ckpt"
    net = _load_net(ref_path, cfg)
    splits = _load_splits(cfg, need_train=True)
    tcfg = cfg.train_config("finetune")
    cfg.save(out / "config.finetune.json")
    t0 = time.perf_counter()
    _train_epochs(net, splits["train"], splits["test"], tcfg, _epoch_runner("finetune"), out / "finetune_log.csv")
    ckpt = models.save_checkpoint(net, out / "sft.ckpt", seed=cfg.seed, epochs=tcfg.epochs, phase="finetune")
    print(f"wrote {ckpt} ({time.perf_counter() - t0:.0f}s)")
    return 0


def _indices(n_split: int, n: int):
    return np.arange(n_split if n <= 0 else min(n, n_split))


def cmd_eval(cfg, ckpt, tag) -> int:
    out = _out_dir(cfg)
    net = _load_net(ckpt, cfg)
    test = _load_splits(cfg, need_train=False)["test"]
    tag = tag or Path(ckpt).stem
    idx = _indices(len(test), cfg.evaluation.eval_samples)
    sel = cfg.selection_params()
    pred = evaluation.evaluate(net, test, None, td_params=sel, init_mode="predicted", indices=idx)
    gt = evaluation.evaluate(net, test, None, td_params=sel, init_mode="ground_truth", indices=idx)
    metrics = {"cls": pred.cls_acc, "loc": pred.loc_acc, "loc_gt": gt.loc_acc}
    rows = [
        {"model": tag, "family": "clean", "level": "0", "metric": m, "clean_acc": f"{v:.6f}",
         "noisy_acc": f"{v:.6f}", "robustness": evaluation._fmt(evaluation.robustness(v, v)), "n": idx.size}
        for m, v in metrics.items()
    ]
    path = out / f"eval_{tag}.csv"
    evaluation.write_rows(rows, path)
    cfg.save(out / f"config.eval_{tag}.json")
    print(f"{tag}: cls={metrics['cls']:.4f} loc={metrics['loc']:.4f} loc_gt={metrics['loc_gt']:.4f} n={idx.size}")
    print(f"wrote {path}")
    return 0


def cmd_robustness(cfg, ref_path, sft_path) -> int:
    out = _out_dir(cfg)
    nets = {
        "ref": _load_net(ref_path or out / "ref.ckpt", cfg),
        "sft": _load_net(sft_path or out / "sft.ckpt", cfg),
    }
    test = _load_splits(cfg, need_train=False)["test"]
    idx = _indices(len(test), cfg.evaluation.sweep_samples)
    rob = out / "robustness"
    cfg.save(rob / "config.robustness.json")
    for family in cfg.evaluation.families:
        t0 = time.perf_counter()
        reports = evaluation.noise_sweep(nets, test, family, cfg.evaluation.levels, seed=cfg.evaluation.noise_seed,
                                         td_params=cfg.selection_params(), indices=idx)
        csv_path = evaluation.write_sweep_csv(reports, rob / f"{family}.csv")
        svgs = plotting.plot_sweep_rows(evaluation.read_sweep_csv(csv_path), rob)
        top = max(cfg.evaluation.levels)
        summary = " ".join(
            f"{r.model}:cls={r.cls_robustness:.3f},loc={r.loc_robustness:.3f}" for r in reports if r.level == top
        )
        print(f"{family} @ {top}: {summary} -> {csv_path.name}, {', '.join(s.name for s in svgs)} "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
    return 0


def cmd_plot(cfg, csv_paths, out_given: bool) -> int:
    for p in csv_paths:
        p = Path(p)
        if not p.exists():
            raise CommandError("CsvMissing", f"no such file: {p}")
        try:
            rows = evaluation.read_sweep_csv(p)
        except ValueError as exc:
            raise CommandError("MalformedCsv", str(exc)) from exc
        target = Path(cfg.paths.out_dir) if out_given else p.parent
        svgs = plotting.plot_sweep_rows(rows, target, stem=p.stem)
        print(f"{p}: " + ", ".join(str(s) for s in svgs))
    return 0


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    set_threads(cfg.threads)
    if args.command == "dataset":
        cfg._limit = args.limit
        return cmd_dataset(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "finetune":
        return cmd_finetune(cfg, args.ref)
    if args.command == "eval":
        return cmd_eval(cfg, args.ckpt, args.tag)
    if args.command == "robustness":
        return cmd_robustness(cfg, args.ref, args.sft)
    if args.command == "plot":
        return cmd_plot(cfg, args.csv, getattr(args, "out", None) is not None)
    raise UsageError(f"unknown command {args.command!r}")


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


def main(argv=None) -> int:
    try:
        code = run(argv)
    except UsageError as exc:
        print(f"sft: error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except cfgmod.ConfigError as exc:
        print(f"sft: error: config: {_one_line(exc)}", file=sys.stderr)
        return 2
    except CommandError as exc:
        print(f"sft: error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"sft: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
