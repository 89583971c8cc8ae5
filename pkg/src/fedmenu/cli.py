"""Command-line orchestration.

Subcommands: gen-data, train, eval, ablate, sweep-comm. Exit codes are a
stable contract: 0 success, 1 usage, 2 I/O, 3 training divergence,
4 structural mismatch between checkpoint and configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path
from xml.sax.saxutils import escape

from . import config as cfgmod
from . import io as fio
from .experiments import (
    ABLATION_VARIANTS,
    build_benchmark,
    mean_sd,
    run_federated_variant,
    run_localized_suite,
    seed_list,
    sweep_pairs,
    variant_federation,
    variant_network,
)
from .federation import (
    TrainingDivergedError,
    evaluate,
    make_clients,
    run_centralized,
    run_federation,
    run_localized,
)
from .metrics import write_case_csv, write_summary_csv
from .network import MenuNet, StructureMismatchError

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _load_config(path) -> cfgmod.ExperimentConfig:
    return cfgmod.load(path)


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dataset_paths(data_dir: Path, num_clients: int) -> list:
    return [data_dir / f"client_{k}.fmds" for k in range(1, num_clients + 1)]


def _load_datasets(data_dir: Path, num_clients: int):
    clients = [fio.read_dataset(p) for p in _dataset_paths(data_dir, num_clients)]
    oof = fio.read_dataset(data_dir / "oof.fmds")
    return clients, oof


def svg_bar_chart(values: dict, path: Path, title: str) -> None:
    """Minimal static SVG bar chart of name -> value in [0, 1]."""
    bar_w, gap, h, pad = 60, 20, 220, 40
    width = pad * 2 + len(values) * (bar_w + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{h + 2 * pad}">',
        f'<text x="{pad}" y="{pad - 16}" font-size="14">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{pad + h}" x2="{width - pad}" y2="{pad + h}" '
        'stroke="black"/>',
    ]
    for i, (name, value) in enumerate(values.items()):
        x = pad + i * (bar_w + gap)
        bh = max(0.0, min(1.0, value)) * h
        parts.append(f'<rect x="{x}" y="{pad + h - bh:.1f}" width="{bar_w}" '
                     f'height="{bh:.1f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x}" y="{pad + h + 16}" font-size="12">'
                     f'{escape(str(name))}</text>')
        parts.append(f'<text x="{x}" y="{pad + h - bh - 4:.1f}" font-size="11">'
                     f'{value:.3f}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _write_round_csv(path: Path, logs: list, config_hash: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["t", "client_id", "samples", "loss_total", "loss_sup",
                         "loss_margin", "loss_excl", "loss_aux", "lr"])
        for log in logs:
            for c in log.clients:
                writer.writerow([log.round_index, c.client_id, c.samples,
                                 f"{c.loss_total:.6f}", f"{c.loss_sup:.6f}",
                                 f"{c.loss_margin:.6f}", f"{c.loss_excl:.6f}",
                                 f"{c.loss_aux:.6f}", f"{c.lr:.6f}"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    config = _load_config(args.config)
    out = _ensure_dir(Path(args.out))
    clients, oof = build_benchmark(config)
    manifest = {"config_hash": config.config_hash(), "files": {}}
    for k, ds in enumerate(clients, start=1):
        path = out / f"client_{k}.fmds"
        fio.write_dataset(path, ds)
        manifest["files"][path.name] = _sha256(path)
    oof_path = out / "oof.fmds"
    fio.write_dataset(oof_path, oof)
    manifest["files"][oof_path.name] = _sha256(oof_path)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(manifest['files'])} dataset files to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    data_dir = Path(args.data)
    out = _ensure_dir(Path(args.out))
    datasets, _oof = _load_datasets(data_dir, config.federation.num_clients)
    net = MenuNet(config.network)
    fed_cfg = config.federation
    clients = make_clients(fed_cfg, datasets)
    val_sets = [(c.client_id, c.dataset) for c in clients]

    if args.mode == "federated":
        result = run_federation(net, fed_cfg, clients, val_sets,
                                checkpoint_dir=out, loss_cfg=config.loss)
    elif args.mode == "centralized":
        result = run_centralized(net, fed_cfg, clients, val_sets,
                                 loss_cfg=config.loss)
        fio.write_checkpoint(out / "best.ckpt", result.params.to_arrays())
    else:  # localized
        if args.client is None:
            raise UsageError("--mode localized requires --client")
        if not 1 <= args.client <= len(clients):
            raise UsageError(f"--client must be in 1..{len(clients)}")
        result = run_localized(net, fed_cfg, clients[args.client - 1],
                               loss_cfg=config.loss)
        fio.write_checkpoint(out / "best.ckpt", result.params.to_arrays())
    if not (out / "best.ckpt").exists():
        fio.write_checkpoint(out / "best.ckpt", result.params.to_arrays())
    _write_round_csv(out / "rounds.csv", result.logs, config.config_hash())
    print(f"mode={args.mode} best_round={result.best_round} "
          f"best_val_dsc={result.best_dsc:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    out = _ensure_dir(Path(args.out))
    net = MenuNet(config.network)
    params = net.build(config.seed)
    params.load_arrays(fio.read_checkpoint(args.checkpoint))

    data_path = Path(args.data)
    if data_path.is_dir():
        datasets, _ = _load_datasets(data_path, config.federation.num_clients)
        pairs = [(k + 1, ds) for k, ds in enumerate(datasets)]
    else:
        pairs = [(1, fio.read_dataset(data_path))]
    result = evaluate(net, params, pairs, split=args.split)

    chash = f"config_hash={config.config_hash()}"
    write_case_csv(result.per_case, out / "per_case.csv", chash)
    write_summary_csv(result, out / "summary.csv", chash)
    organ_means: dict = {}
    for (client, organ), stats in sorted(result.per_client_organ.items()):
        organ_means.setdefault(f"organ {organ}", []).append(stats.dsc_mean)
    svg_bar_chart({k: sum(v) / len(v) for k, v in organ_means.items()},
                  out / "dsc_by_organ.svg", "mean DSC by organ")
    print(f"global dsc={result.global_dsc:.4f} asd={result.global_asd:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    out = _ensure_dir(Path(args.out))
    clients, oof = build_benchmark(config)
    rows = []
    for variant in ABLATION_VARIANTS:
        runs = [run_federated_variant(config, variant, seed, clients, oof)
                for seed in seed_list(config.seed, args.seeds)]
        for setting, dscs, asds in (
                ("in_fed", [r.in_fed_dsc for r in runs],
                 [r.in_fed_asd for r in runs]),
                ("oof", [r.oof_dsc for r in runs],
                 [r.oof_asd for r in runs])):
            dm, ds_ = mean_sd(dscs)
            am, asd_ = mean_sd(asds)
            rows.append([variant, setting, f"{dm:.6f}", f"{ds_:.6f}",
                         f"{am:.6f}", f"{asd_:.6f}"])
    with open(out / "ablation.csv", "w", newline="") as f:
        f.write(f"# config_hash={config.config_hash()}\n")
        writer = csv.writer(f)
        writer.writerow(["model", "setting", "dsc_mean", "dsc_sd",
                         "asd_mean", "asd_sd"])
        writer.writerows(rows)
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_sweep_comm(args) -> int:
    config = _load_config(args.config)
    out = _ensure_dir(Path(args.out))
    clients, oof = build_benchmark(config)
    budget = config.federation.rounds * config.federation.local_epochs
    rows = []
    for rounds, epochs in sweep_pairs(budget):
        runs = [run_federated_variant(config, "menu_agd", seed, clients, oof,
                                      rounds=rounds, epochs=epochs)
                for seed in seed_list(config.seed, args.seeds)]
        dm, ds_ = mean_sd([r.in_fed_dsc for r in runs])
        om, os_ = mean_sd([r.oof_dsc for r in runs])
        rows.append([f"{rounds}x{epochs}", f"{dm:.6f}", f"{ds_:.6f}",
                     f"{om:.6f}", f"{os_:.6f}"])
    with open(out / "sweep.csv", "w", newline="") as f:
        f.write(f"# config_hash={config.config_hash()}\n")
        writer = csv.writer(f)
        writer.writerow(["schedule", "in_fed_dsc_mean", "in_fed_dsc_sd",
                         "oof_dsc_mean", "oof_dsc_sd"])
        writer.writerows(rows)
    print(f"wrote {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> _Parser:
    parser = _Parser(prog="fedmenu",
                     description="Federated partial-label segmentation bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train in one of the three modes")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", required=True,
                   choices=["localized", "centralized", "federated"])
    p.add_argument("--client", type=int, default=None,
                   help="client id for localized mode")
    p.add_argument("--data", required=True, help="directory of .fmds files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="dataset directory or a single .fmds file")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-variant comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-comm", help="communication-frequency sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_sweep_comm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StructureMismatchError, fio.FormatError) as exc:
        print(f"structural mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
