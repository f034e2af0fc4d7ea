"""Command-line entry point: ``toib <subcommand> [--config FILE] [--key value ...]``.

Exit status: 0 success, 1 runtime or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation
from .club import estimate_gaussian_mi
from .config import KEYS, ConfigError, gen_spec, parse_config, render_config, train_config
from .data import gen_synthetic, load_dataset, save_dataset
from .gradcheck import TOLERANCE, run_suite
from .nn import FormatError
from .rng import substream
from .training import TrainingDiverged, checkpoint_load, checkpoint_save, train, write_metrics

SUBCOMMANDS = ("gen-data", "train", "eval", "sweep", "cross-decode", "export-latents", "gradcheck", "mi-check")


def _run_dir(values) -> Path:
    out = Path(values["run_dir"]) / values["name"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(render_config(values))
    return out


def _datasets(values, out: Path, split: str):
    """Load the run's dataset files, generating (and saving) them on first use."""
    spec = gen_spec(values)
    data_dir = out / "data"
    paths = [data_dir / f"user{i + 1}_{split}.bin" for i in range(spec.n_users)]
    if all(p.exists() for p in paths):
        return [load_dataset(p) for p in paths]
    data_dir.mkdir(exist_ok=True)
    datasets = gen_synthetic(spec, split)
    for ds, p in zip(datasets, paths):
        save_dataset(ds, p)
    return datasets


def _load_state(values, out: Path):
    train_ds = _datasets(values, out, "train")
    path = out / "checkpoint.bin"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run 'train' first")
    return checkpoint_load(path, train_config(values), train_ds[0].input_dim, train_ds[0].num_classes)


def cmd_gen_data(values, args) -> int:
    out = _run_dir(values)
    for split in ("train", "test"):
        for i, ds in enumerate(_datasets(values, out, split)):
            print(f"{split} user {i + 1}: n={ds.n} d_x={ds.input_dim} K={ds.num_classes}")
    return 0


def cmd_train(values, args) -> int:
    out = _run_dir(values)
    datasets = _datasets(values, out, "train")
    cfg = train_config(values)
    state = train(cfg, datasets)
    checkpoint_save(state, out / "checkpoint.bin")
    write_metrics(state, out / "metrics.csv", out / "metrics_pairs.csv")
    if state.history:
        last = state.history[-1]
        accs = " ".join(f"{a:.4f}" for a in last["acc"])
        print(f"epoch {last['epoch']}: train accuracy per user {accs}")
    print(f"wrote {out / 'checkpoint.bin'}")
    return 0


def _eval_kind(values) -> str:
    return values["eval_channel"] or values["channel"]


def cmd_eval(values, args) -> int:
    out = _run_dir(values)
    state = _load_state(values, out)
    test = _datasets(values, out, "test")
    res = evaluation.sweep_snr(state, test, [values["eval_snr_db"]], _eval_kind(values), values["n_eval"],
                               values["seed"], latent_mean=values["latent_mean"])
    res.to_csv(out / "eval.csv")
    for snr, user, acc, ce in res.rows:
        print(f"snr={snr:g} dB user {user}: accuracy={acc:.4f} ce={ce:.4f}")
    return 0


def cmd_sweep(values, args) -> int:
    out = _run_dir(values)
    state = _load_state(values, out)
    test = _datasets(values, out, "test")
    res = evaluation.sweep_snr(state, test, values["eval_snrs"], _eval_kind(values), values["n_eval"],
                               values["seed"], latent_mean=values["latent_mean"])
    res.to_csv(out / "sweep.csv")
    for snr, user, acc, _ in res.rows:
        print(f"snr={snr:g} dB user {user}: accuracy={acc:.4f}")
    return 0


def cmd_cross_decode(values, args) -> int:
    out = _run_dir(values)
    state = _load_state(values, out)
    test = _datasets(values, out, "test")
    mat = evaluation.cross_decode(state, test, values["eval_snr_db"], _eval_kind(values), values["n_eval"],
                                  substream(values["seed"], "cross-decode"), latent_mean=values["latent_mean"])
    mat.to_csv(out / "crossdecode.csv")
    n = mat.acc.shape[0]
    for i in range(n):
        print("  ".join(f"D{i + 1}->u{j + 1}={mat.acc[i, j]:.4f}" for j in range(n)))
    print(f"chance = {1.0 / values['num_classes']:.4f}")
    return 0


def cmd_export_latents(values, args) -> int:
    out = _run_dir(values)
    state = _load_state(values, out)
    evaluation.export_latents(state, _datasets(values, out, "test"), values["n_latents"], out / "latents.csv")
    print(f"wrote {out / 'latents.csv'}")
    return 0


def cmd_gradcheck(values, args) -> int:
    rows = run_suite(values["seed"])
    print(f"{'op':<16} {'max rel err':>12}")
    failed = False
    for name, err in rows:
        ok = err <= TOLERANCE
        failed |= not ok
        print(f"{name:<16} {err:12.3e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_mi_check(values, args) -> int:
    res = estimate_gaussian_mi(args.rho, args.d, substream(values["seed"], "mi-check", args.rho, args.d),
                               mode=values["club_mode"], lr=values["club_lr"], hidden=values["club_hidden"])
    print(f"rho={args.rho} d={args.d}")
    print(f"  true MI            {res.true_mi:.4f} nats")
    print(f"  exact-CLUB value   {res.club_reference:.4f} nats")
    print(f"  vCLUB estimate     {res.mean:.4f} ± {res.stderr:.4f} (50 batches)")
    print(f"  |est - MI| <= {res.tolerance:.4f}: {'yes' if res.within_tolerance else 'NO'}")
    print(f"  mean >= MI - 2 se: {'yes' if res.upper_bound_holds else 'NO'}")
    return 0 if res.within_tolerance and res.upper_bound_holds else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "cross-decode": cmd_cross_decode,
    "export-latents": cmd_export_latents,
    "gradcheck": cmd_gradcheck,
    "mi-check": cmd_mi_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    group = common.add_argument_group("config keys (override the file)")
    for key, spec in KEYS.items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE", help=spec.help)
    parser = argparse.ArgumentParser(prog="toib", description="Task-oriented orthogonalised IB toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "mi-check":
            p.add_argument("--rho", type=float, default=0.8)
            p.add_argument("--d", type=int, default=4)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        values = parse_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"toib: config error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](values, args)
    except (TrainingDiverged, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"toib: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
