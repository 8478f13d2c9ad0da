"""Command-line entry point.

Exit status: 0 on success, 2 on configuration errors, 1 on runtime failures
(message prefixed with the module the failure came from).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path


from ..data import read_archive
from ..model import Checkpoint
from . import experiments as ex
from .config import ConfigError, load_config

log = logging.getLogger("pfjm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set training.iterations=100 (repeatable)")
    p.add_argument("--out", metavar="DIR", default="runs", help="parent directory for run directories")
    p.add_argument("-v", "--verbose", action="store_true")


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfjm", description="Poisson flow joint model experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset utilities")
    data_sub = data.add_subparsers(dest="data_command", required=True)
    gen = data_sub.add_parser("gen", help="generate paired routine/low-dose phantoms")
    _common(gen)

    tr = sub.add_parser("train", help="train the conditional denoiser")
    _common(tr)
    tr.add_argument("--data", metavar="PATH", help="dataset archive (generated from the config if omitted)")

    sa = sub.add_parser("sample", help="reconstruct the test split from a checkpoint")
    _common(sa)
    sa.add_argument("--checkpoint", required=True, metavar="PATH")
    sa.add_argument("--data", metavar="PATH")
    sa.add_argument("--w", type=float, help="refinement weight (defaults to sampler.w)")

    ev = sub.add_parser("eval", help="score reconstructions against routine-dose references")
    _common(ev)
    ev.add_argument("--recon", required=True, action="append", metavar="PATH")
    ev.add_argument("--data", metavar="PATH")
    ev.add_argument("--force", action="store_true", help="accept inputs with mismatched fingerprints")

    orc = sub.add_parser("oracle", help="exact Poisson field utilities")
    orc_sub = orc.add_subparsers(dest="oracle_command", required=True)
    trace = orc_sub.add_parser("trace", help="dump field-line trajectories as CSV")
    _common(trace)

    sd = sub.add_parser("sweep-d", help="train and evaluate one model per augmented dimension D")
    _common(sd)
    sd.add_argument("--d-values", type=_int_list, metavar="D1,D2,...")

    sw = sub.add_parser("sweep-w", help="refinement-weight sweep and conditional-sampling ablation")
    _common(sw)
    sw.add_argument("--w-values", type=_float_list, metavar="W1,W2,...")
    sw.add_argument("--checkpoint", metavar="PATH", help="reuse a trained model instead of training")
    return parser


def _run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    cmd = args.command
    if cmd == "data":
        cmd = f"data-{args.data_command}"
    elif cmd == "oracle":
        cmd = f"oracle-{args.oracle_command}"
    run_dir = ex.make_run_dir(args.out, cfg, cmd)
    log.info("run directory %s", run_dir)

    if cmd == "data-gen":
        tensors = ex.write_dataset(cfg, run_dir / "dataset.pfjm")
        if cfg.eval.png:
            ex.save_png_grid(run_dir / "dataset.png", tensors["test/routine"], tensors["test/lowdose"],
                             tensors["test/lowdose"], fingerprint=cfg.fingerprint())
    elif cmd == "train":
        tensors, _ = ex.dataset_for(cfg, args.data)
        ckpt = ex.train_model(cfg, tensors, run_dir)
        log.info("final loss %.5g", ckpt.loss_history[-1])
    elif cmd == "sample":
        tensors, meta = ex.dataset_for(cfg, args.data)
        ckpt = Checkpoint.load(args.checkpoint)
        w = cfg.sampler.w if args.w is None else args.w
        recon = ex.reconstruct(cfg, ckpt, tensors["test/lowdose"], w)
        ex.write_reconstruction(run_dir / "recon.pfjm", recon, cfg, ckpt, meta["data_fingerprint"], w)
        if cfg.eval.png:
            ex.save_png_grid(run_dir / "recon.png", tensors["test/routine"], tensors["test/lowdose"], recon,
                             fingerprint=cfg.fingerprint())
    elif cmd == "eval":
        tensors, meta = ex.dataset_for(cfg, args.data)
        recons, metas = [], []
        for path in args.recon:
            t, m = read_archive(path)
            if m.get("kind") != "reconstruction":
                raise ex.ProvenanceError(f"{path} is not a reconstruction archive")
            recons.append(t["recon"])
            metas.append(m)
        ex.check_provenance(meta, metas, args.force)
        for i, recon in enumerate(recons):
            report = ex.evaluate_recon(cfg, tensors["test/routine"], recon)
            summary = ex.write_report(report, run_dir, "metrics" if len(recons) == 1 else f"metrics_{i}")
            print(json.dumps(summary["phases"], indent=2, sort_keys=True))
    elif cmd == "oracle-trace":
        result = ex.oracle_trace(cfg, run_dir)
        print(json.dumps(result, indent=2, sort_keys=True))
    elif cmd == "sweep-d":
        d_values = args.d_values or cfg.sweep.d_values
        rows = ex.sweep_d(cfg, d_values, run_dir)
        for r in rows:
            print(f"D={r['D']:<5d} phase {r['phase']:<3s} MAE {r['mae_hu']:8.3f} HU  "
                  f"SSIM {r['ssim_pct']:7.3f}%  PSNR {r['psnr_db']:7.3f} dB")
    elif cmd == "sweep-w":
        ckpt = Checkpoint.load(args.checkpoint) if args.checkpoint else None
        paired = ex.ablate_conditioning(cfg, run_dir, ckpt=ckpt, w_values=args.w_values)
        for arm in paired["sweep"]:
            print(f"w={arm['w']:<5g} mean MAE {arm['mean_mae_hu']:.3f} HU")
        if "conditional_not_worse" in paired:
            print(f"best w>0 not worse than w=0: {paired['conditional_not_worse']}")
    print(run_dir)
    return 0


def _origin_module(exc: BaseException) -> str:
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        parts = Path(frame.filename).with_suffix("").parts
        if "pfjm" in parts:
            return ".".join(parts[len(parts) - 1 - parts[::-1].index("pfjm"):])
    return "pfjm"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"[{_origin_module(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
