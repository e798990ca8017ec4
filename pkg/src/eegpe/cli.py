"""``eegpe`` command line: data generation, the three protocols, PE inspection, gradient checks.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration error.
Set EEGPE_LOG_LEVEL (DEBUG, INFO, WARNING, ...) for verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, load_config, parse_seeds, resolve
from .errors import ConfigError, EEGPEError
from .geometry import load_montage, synthetic_ring_montage
from .posenc import TAGS, apply_pe, make_pe

log = logging.getLogger("eegpe")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"eegpe: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _run_config(args, protocol=None) -> RunConfig:
    doc = load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "model.pe": getattr(args, "pe", None),
        "data.path": getattr(args, "data", None),
        "seeds": getattr(args, "seeds", None),
        "jobs": getattr(args, "jobs", None),
    }
    if protocol is not None:
        for flag in ("epochs", "batch_size", "lr", "mask_ratio", "head"):
            overrides[f"{protocol}.{flag}"] = getattr(args, flag, None)
    return resolve(doc, overrides)


def _load_data(rc: RunConfig, patch_len):
    from .data import load_dataset

    if not rc.data.get("path"):
        raise ConfigError("no dataset given (use --data or data.path in the config)")
    return load_dataset(rc.data["path"], patch_len, rc.data.get("sampling_rate"), rc.data.get("eps", 1e-8),
                        rc.data.get("split_seed", 42), tuple(rc.data.get("fractions", (0.70, 0.15, 0.15))))


def _out_dir(args, default):
    return Path(args.out if args.out else default)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    from .data import generate_synthetic

    path = generate_synthetic(args.out, args.mode, n_channels=args.channels, n_subjects=args.subjects,
                              epochs_per_subject=args.epochs_per_subject, n_classes=args.classes,
                              seed=args.seed, sampling_rate=args.sampling_rate,
                              epoch_samples=args.epoch_samples, noise=args.noise)
    print(f"wrote {args.mode} dataset to {path}")
    return EXIT_OK


def cmd_pretrain(args):
    from .train import run_pretrain

    rc = _run_config(args, "pretrain")
    ds = _load_data(rc, rc.model.patch_len)
    out = _out_dir(args, f"runs/pretrain_{rc.model.pe}")
    echo = rc.to_dict()
    summary = {}
    for seed in rc.seeds:
        target = out if len(rc.seeds) == 1 else out / f"seed_{seed}"
        r = run_pretrain(rc.model, rc.protocol("pretrain"), ds, seed=seed, out_dir=target, echo=echo)
        summary[str(seed)] = {"best_epoch": r.best_epoch, "best_val_loss": r.best_val_loss,
                              "final_val_loss": r.curve[-1][2]}
        print(f"pretrain {rc.model.pe} seed {seed}: final val loss {r.curve[-1][2]:.6f} "
              f"(best {r.best_val_loss:.6f} at epoch {r.best_epoch}) -> {target}")
    if len(rc.seeds) > 1:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps({"seeds": summary, "config": echo}, indent=2,
                                                     sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _supervised(args, protocol):
    from .model import read_manifest
    from .train import run_finetune, run_probe

    rc = _run_config(args, protocol)
    if not args.checkpoint:
        raise ConfigError(f"{protocol} needs --checkpoint")
    manifest, _ = read_manifest(args.checkpoint)
    ck_pe = manifest["config"]["pe"]
    if args.pe is not None and args.pe != ck_pe:
        raise ConfigError(f"--pe {args.pe} does not match the checkpoint's positional encoding ({ck_pe})")
    ds = _load_data(rc, manifest["config"]["patch_len"])
    out = _out_dir(args, f"runs/{protocol}_{ck_pe}")
    fn = run_probe if protocol == "probe" else run_finetune
    report = fn(args.checkpoint, ds, rc.seeds, rc.protocol(protocol), out_dir=out, jobs=rc.jobs,
                echo=rc.to_dict())
    print(report.format_table())
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def cmd_probe(args):
    return _supervised(args, "probe")


def cmd_finetune(args):
    return _supervised(args, "finetune")


def _montage_arg(text):
    """A montage file, or ``ring:N`` for the built-in synthetic layout."""
    if text.startswith("ring:"):
        try:
            return synthetic_ring_montage(int(text[5:]))
        except ValueError:
            raise ConfigError(f"bad montage spec {text!r}; use ring:N or a file path") from None
    return load_montage(text)


def positional_term(pe_tag, montage, dim, patches, seed=0, checkpoint=None):
    """[C, W, d] positional term of one variant; ACPE is evaluated on a seeded N(0,1) embedding."""
    if checkpoint is not None:
        from .model import load_checkpoint

        model = load_checkpoint(checkpoint)
        pe, dim = model.pe, model.config.dim
        if pe.tag != pe_tag:
            raise ConfigError(f"--pe {pe_tag} does not match the checkpoint's positional encoding ({pe.tag})")
        if pe.tag == "learnable" and (len(montage) != len(model.montage) or patches != model.n_patches):
            raise ConfigError("Learnable PE tables only exist for the checkpoint's montage and patch count")
    else:
        pe = make_pe(pe_tag, dim, len(montage), patches, np.random.default_rng(seed))
    emb = T.as_tensor(np.random.default_rng(seed).standard_normal((1, len(montage), patches, dim))) \
        if pe.tag == "acpe" else T.as_tensor(np.zeros((1, len(montage), patches, dim)))
    with T.no_grad():
        out = apply_pe(pe, emb, montage)
    return (out.data - emb.data)[0]


def cmd_inspect_pe(args):
    montage = _montage_arg(args.montage)
    term = positional_term(args.pe, montage, args.dim, args.patches, args.seed, args.checkpoint)
    C, W, d = term.shape
    lines = ["channel,patch," + ",".join(f"d{i}" for i in range(d))]
    for c in range(C):
        for w in range(W):
            lines.append(f"{montage.channel_names[c]},{w}," + ",".join(repr(float(v)) for v in term[c, w]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {C * W} rows x {d} dims to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(args):
    from .gradcheck import report
    from .model import preset

    lines, ok, seconds = report(preset(args.preset), coords=args.coords, seed=args.seed)
    for line in lines:
        print(line)
    print(f"{'all checks passed' if ok else 'gradient check FAILED'} in {seconds:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="eegpe", description="Positional-encoding study on a criss-cross EEG transformer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--mode", choices=("channel-coded", "spatial-class"), default="channel-coded")
    g.add_argument("--channels", type=int, default=8)
    g.add_argument("--subjects", type=int, default=20)
    g.add_argument("--epochs-per-subject", type=int, default=10)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--sampling-rate", type=float, default=40.0)
    g.add_argument("--epoch-samples", type=int, default=160)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    def common(sp, protocol):
        sp.add_argument("--config")
        sp.add_argument("--data")
        sp.add_argument("--pe", choices=TAGS)
        sp.add_argument("--seeds", type=parse_seeds)
        sp.add_argument("--out")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        if protocol != "pretrain":
            sp.add_argument("--checkpoint")
        if protocol == "pretrain":
            sp.add_argument("--mask-ratio", type=float)
        if protocol == "finetune":
            sp.add_argument("--head", choices=("linear-1", "mlp-3"))

    for name, fn, help_ in (("pretrain", cmd_pretrain, "masked patch reconstruction pretraining"),
                            ("probe", cmd_probe, "linear probe on a frozen backbone"),
                            ("finetune", cmd_finetune, "fine-tune all weights")):
        sp = sub.add_parser(name, help=help_)
        common(sp, name)
        sp.set_defaults(fn=fn)

    i = sub.add_parser("inspect-pe", help="write a positional term as CSV")
    i.add_argument("--pe", choices=TAGS, required=True)
    i.add_argument("--montage", default="ring:8", help="montage file or ring:N")
    i.add_argument("--dim", type=int, default=32)
    i.add_argument("--patches", type=int, default=4)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--checkpoint")
    i.add_argument("--out")
    i.set_defaults(fn=cmd_inspect_pe)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    c.add_argument("--preset", default="tiny")
    c.add_argument("--coords", type=int, default=12, help="coordinates sampled per parameter tensor")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_grad_check)
    return p


def _setup_logging():
    level = os.environ.get("EEGPE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except ConfigError as e:
        print(f"eegpe: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (EEGPEError, OSError, FloatingPointError) as e:
        print(f"eegpe: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
