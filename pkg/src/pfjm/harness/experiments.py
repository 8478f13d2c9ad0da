"""Pipelines behind the CLI: data generation, training, sampling, evaluation,
oracle tracing and the D / w sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np

from .. import oracle
from ..data import HU_SCALE, PHASES, make_dataset, read_archive, write_archive
from ..metrics import evaluate, sliced_wasserstein
from ..model import Checkpoint, train
from ..sampler import sample
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class ProvenanceError(RuntimeError):
    """Artifacts from different configurations were mixed."""


# ---------------------------------------------------------------------------
# run directories


def make_run_dir(out: str | os.PathLike, cfg: ExperimentConfig, tag: str = "") -> Path:
    """Create a fresh directory ``<out>/<fingerprint>-<timestamp>[-tag]``; never reuses one."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{cfg.fingerprint()}-{stamp}" + (f"-{tag}" if tag else "")
    path = out / base
    k = 1
    while True:
        try:
            path.mkdir()
            break
        except FileExistsError:
            path = out / f"{base}.{k}"
            k += 1
    with open(path / "config.json", "w") as fh:
        json.dump({"fingerprint": cfg.fingerprint(), "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# data


def generate_data(cfg: ExperimentConfig) -> dict:
    """Deterministic train/test split of paired phantoms for ``cfg``."""
    d = cfg.data
    spec = cfg.phantom_spec()
    seed = cfg.seeds()["data"]
    train_seed, test_seed = (int(s) for s in np.random.SeedSequence(seed).generate_state(2, dtype="uint32"))
    tr_rt, tr_ld = make_dataset(spec, d.n_train, d.dose_fraction, d.base_sigma, train_seed)
    te_rt, te_ld = make_dataset(spec, d.n_test, d.dose_fraction, d.base_sigma, test_seed)
    return {"train/routine": tr_rt, "train/lowdose": tr_ld, "test/routine": te_rt, "test/lowdose": te_ld}


def data_metadata(cfg: ExperimentConfig) -> dict:
    return {
        "kind": "dataset",
        "fingerprint": cfg.fingerprint(),
        "data_fingerprint": cfg.data_fingerprint(),
        "hu_scale": HU_SCALE,
        "hu_window": [-HU_SCALE, HU_SCALE],
        "intensity_note": "pseudo-HU: [-1, 1] maps affinely to [-1024, 1024]",
        "phases": list(PHASES),
        "dose_fraction": cfg.data.dose_fraction,
        "base_sigma": cfg.data.base_sigma,
    }


def write_dataset(cfg: ExperimentConfig, path) -> dict:
    tensors = generate_data(cfg)
    write_archive(path, tensors, data_metadata(cfg))
    return tensors


def load_dataset(path):
    tensors, meta = read_archive(path)
    if meta.get("kind") != "dataset":
        raise ProvenanceError(f"{path} is not a dataset archive")
    return tensors, meta


def dataset_for(cfg: ExperimentConfig, data_path=None):
    """Load ``data_path`` or regenerate the split from ``cfg``; returns ``(tensors, metadata)``."""
    if data_path is None:
        return generate_data(cfg), {"data_fingerprint": cfg.data_fingerprint()}
    return load_dataset(data_path)


# ---------------------------------------------------------------------------
# train / sample / eval


def train_model(cfg: ExperimentConfig, tensors: dict, run_dir: Path | None = None) -> Checkpoint:
    tc = cfg.train_config()
    lowdose = tensors["train/lowdose"] if cfg.model.conditional else None
    every = max(1, tc.iterations // 10)

    def progress(it, loss):
        if it % every == 0 or it == tc.iterations:
            log.info("iteration %d/%d loss %.5g", it, tc.iterations, loss)

    ckpt_pattern = None if run_dir is None else str(run_dir / "checkpoint-{iteration}.pfjm")
    ckpt = train(tensors["train/routine"], lowdose, tc, cfg.arch(), checkpoint_path=ckpt_pattern,
                 progress=progress)
    if run_dir is not None:
        ckpt.save(run_dir / "checkpoint.pfjm", {"run_fingerprint": cfg.fingerprint()})
        with open(run_dir / "loss.csv", "w") as fh:
            fp = cfg.fingerprint()
            fh.write("iteration,loss,fingerprint\n")
            for i, v in enumerate(ckpt.loss_history, 1):
                fh.write(f"{i},{v!r},{fp}\n")
    return ckpt


def reconstruct(cfg: ExperimentConfig, ckpt: Checkpoint, lowdose, w: float | None = None):
    schedule = cfg.schedule(w)
    rng = np.random.default_rng(cfg.seeds()["sample"])
    cond = lowdose if cfg.model.conditional else np.zeros_like(lowdose)
    if cfg.model.kind == "mlp":
        flat = sample(ckpt.model, cond.reshape(len(cond), -1), schedule, rng, D=cfg.model.D)
        return flat.reshape(lowdose.shape).astype(np.float32)
    return sample(ckpt.model, cond, schedule, rng, D=cfg.model.D).astype(np.float32)


def write_reconstruction(path, recon, cfg: ExperimentConfig, ckpt: Checkpoint, data_fp: str, w: float) -> None:
    write_archive(path, {"recon": recon}, {
        "kind": "reconstruction",
        "fingerprint": cfg.fingerprint(),
        "checkpoint_fingerprint": ckpt.fingerprint,
        "data_fingerprint": data_fp,
        "w": w,
        "T": cfg.sampler.T,
        "init_mode": cfg.sampler.init_mode,
    })


def evaluate_recon(cfg: ExperimentConfig, reference, recon):
    e = cfg.eval
    return evaluate(reference, recon, fid_grid=e.fid_grid, ssim_window=e.ssim_window or None,
                    max_value=e.max_value, fingerprint=cfg.fingerprint())


def check_provenance(dataset_meta: dict, recon_metas: list, force: bool = False) -> None:
    problems = []
    fps = {m.get("fingerprint") for m in recon_metas}
    if len(fps) > 1:
        problems.append(f"reconstructions come from different configs: {sorted(map(str, fps))}")
    data_fp = dataset_meta.get("data_fingerprint")
    for m in recon_metas:
        if m.get("data_fingerprint") != data_fp:
            problems.append(f"reconstruction data fingerprint {m.get('data_fingerprint')} != dataset {data_fp}")
    if problems and not force:
        raise ProvenanceError("; ".join(problems) + " (use --force to override)")
    for p in problems:
        log.warning("provenance override: %s", p)


def write_report(report, run_dir: Path, stem: str = "metrics") -> dict:
    report.write_csv(run_dir / f"{stem}.csv")
    summary = report.summary()
    with open(run_dir / f"{stem}.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def save_png_grid(path, routine, lowdose, recon, n: int = 2, fingerprint: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = min(n, len(recon))
    fig, axes = plt.subplots(3 * n, 3, figsize=(6, 6 * n), squeeze=False)
    for i in range(n):
        for row, (label, vol) in enumerate((("routine", routine), ("low-dose", lowdose), ("recon", recon))):
            for k, ph in enumerate(PHASES):
                ax = axes[3 * i + row, k]
                ax.imshow(vol[i, ..., k] * HU_SCALE, cmap="gray", vmin=-150, vmax=350)
                ax.set_xticks([])
                ax.set_yticks([])
                if k == 0:
                    ax.set_ylabel(f"{i}:{label}", fontsize=7)
                if i == 0 and row == 0:
                    ax.set_title(f"phase {ph}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Comment": f"fingerprint={fingerprint}"})
    plt.close(fig)


def run_pipeline(cfg: ExperimentConfig, run_dir: Path | None = None, tensors: dict | None = None,
                 w: float | None = None):
    """Train, reconstruct the test split and evaluate; returns ``(checkpoint, recon, report)``."""
    tensors = generate_data(cfg) if tensors is None else tensors
    ckpt = train_model(cfg, tensors, run_dir)
    recon = reconstruct(cfg, ckpt, tensors["test/lowdose"], w)
    report = evaluate_recon(cfg, tensors["test/routine"], recon)
    if run_dir is not None:
        write_reconstruction(run_dir / "recon.pfjm", recon, cfg, ckpt, cfg.data_fingerprint(),
                             cfg.sampler.w if w is None else w)
        write_report(report, run_dir)
    return ckpt, recon, report


# ---------------------------------------------------------------------------
# sweeps


def _phase_rows(report, key: str, value) -> list[dict]:
    rows = []
    for ph, m in report.phase_means().items():
        rows.append({key: value, "phase": ph, "mae_hu": m["mae_hu"], "ssim_pct": m["ssim_pct"],
                     "psnr_db": m["psnr_db"]})
    return rows


def _write_rows(path, rows, fingerprint: str) -> None:
    cols = list(rows[0].keys()) + ["fingerprint"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(cols)
        for r in rows:
            wr.writerow([repr(v) if isinstance(v, float) else v for v in r.values()] + [fingerprint])


def sweep_d(cfg: ExperimentConfig, d_values, run_dir: Path | None = None) -> list[dict]:
    """One train + sample + eval per augmented dimension; rows are (D, phase)."""
    import dataclasses

    tensors = generate_data(cfg)
    rows = []
    for D in d_values:
        sub = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, D=int(D)))
        log.info("sweep-d: D=%d", D)
        sub_dir = None
        if run_dir is not None:
            sub_dir = run_dir / f"D{int(D)}"
            sub_dir.mkdir()
        _, _, report = run_pipeline(sub, sub_dir, tensors)
        rows.extend(_phase_rows(report, "D", int(D)))
    if run_dir is not None:
        _write_rows(run_dir / "sweep_d.csv", rows, cfg.fingerprint())
        plot_trend(rows, "D", run_dir / "sweep_d.png", log_x=True, fingerprint=cfg.fingerprint())
    return rows


def plot_trend(rows, key: str, path, log_x: bool = False, fingerprint: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, (metric, label) in zip(axes, (("mae_hu", "MAE (pseudo-HU)"), ("ssim_pct", "SSIM (%)"),
                                          ("psnr_db", "PSNR (dB)"))):
        for ph in PHASES:
            pts = sorted((r[key], r[metric]) for r in rows if r["phase"] == ph)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"phase {ph}")
        if log_x:
            ax.set_xscale("log", base=2)
        ax.set_xlabel(key)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Comment": f"fingerprint={fingerprint}"})
    plt.close(fig)


def ablate_conditioning(cfg: ExperimentConfig, run_dir: Path | None = None, ckpt: Checkpoint | None = None,
                        tensors: dict | None = None, w_values=None) -> dict:
    """Evaluate one trained model with and without refinement toward the condition.

    Every ``w`` in ``w_values`` is sampled on the same test split; ``w = 0`` is the
    arm without conditional sampling. The paired report compares it with the
    configured ``w`` and with the best ``w > 0``.
    """
    tensors = generate_data(cfg) if tensors is None else tensors
    if ckpt is None:
        ckpt = train_model(cfg, tensors, run_dir)
    w_values = sorted({float(w) for w in (w_values if w_values is not None else cfg.sampler.w_values)}
                      | {0.0, float(cfg.sampler.w)})
    test_fp = cfg.data_fingerprint()
    reports, rows = {}, []
    for w in w_values:
        recon = reconstruct(cfg, ckpt, tensors["test/lowdose"], w)
        rep = evaluate_recon(cfg, tensors["test/routine"], recon)
        reports[w] = rep
        rows.extend(_phase_rows(rep, "w", w))
        if run_dir is not None:
            write_reconstruction(run_dir / f"recon_w{w:g}.pfjm", recon, cfg, ckpt, test_fp, w)
            rep.write_csv(run_dir / f"metrics_w{w:g}.csv")

    def arm(w):
        rep = reports[w]
        return {"w": w, "test_fingerprint": test_fp, "mean_mae_hu": rep.mean_mae_hu(),
                "phases": rep.phase_means(), "frechet": rep.frechet}

    positive = [w for w in w_values if w > 0]
    best = min(positive, key=lambda w: reports[w].mean_mae_hu()) if positive else None
    paired = {
        "fingerprint": cfg.fingerprint(),
        "checkpoint_fingerprint": ckpt.fingerprint,
        "without_refinement": arm(0.0),
        "configured": arm(float(cfg.sampler.w)),
        "best_positive": arm(best) if best is not None else None,
        "sweep": [arm(w) for w in w_values],
    }
    if best is not None:
        paired["conditional_not_worse"] = bool(reports[best].mean_mae_hu() <= reports[0.0].mean_mae_hu())
    if run_dir is not None:
        _write_rows(run_dir / "sweep_w.csv", rows, cfg.fingerprint())
        with open(run_dir / "ablation.json", "w") as fh:
            json.dump(paired, fh, indent=2, sort_keys=True)
        plot_trend(rows, "w", run_dir / "sweep_w.png", fingerprint=cfg.fingerprint())
    return paired


# ---------------------------------------------------------------------------
# oracle


def oracle_charges(cfg: ExperimentConfig) -> oracle.ChargeSet:
    """Two-component 2-D Gaussian mixture used as the oracle's charge set."""
    o = cfg.oracle
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    comp = rng.integers(0, 2, o.n_charges)
    centers = np.array([[-o.separation, -0.5 * o.separation], [o.separation, 0.5 * o.separation]])
    pts = centers[comp] + o.spread * rng.standard_normal((o.n_charges, 2))
    return oracle.ChargeSet.uniform(pts)


def oracle_r_max(cfg: ExperimentConfig) -> float:
    o = cfg.oracle
    return o.r_max if o.r_max > 0 else cfg.sampler.sigma_max * math.sqrt(o.D)


def oracle_trace(cfg: ExperimentConfig, run_dir: Path | None = None) -> dict:
    """Integrate ``n_traj`` field lines from the far-field prior to ``r_min``.

    The sliced Wasserstein distance of the endpoints to the charge set is
    reported; the first ``dump`` trajectories are written as CSV.
    """
    o = cfg.oracle
    charges = oracle_charges(cfg)
    r_max = oracle_r_max(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(5)[4])
    x0 = oracle.sample_prior(rng, r_max, charges.N, o.D, size=o.n_traj)
    radii, traj = oracle.trace_field_lines(charges, x0, r_max, 0.0, o.steps, o.D, record=True)
    ends = traj[-1]
    result = {
        "kernel": oracle.KERNEL,
        "r_max": r_max,
        "D": o.D,
        "steps": o.steps,
        "n_traj": o.n_traj,
        "sliced_w1": sliced_wasserstein(ends, charges.charges),
    }
    if run_dir is not None:
        for j in range(min(o.n_traj, o.dump)):
            with open(run_dir / f"trace_{j:03d}.csv", "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["step", "r"] + [f"x_{i}" for i in range(charges.N)])
                for s, r in enumerate(radii):
                    wr.writerow([s, repr(float(r))] + [repr(float(v)) for v in traj[s, j]])
        with open(run_dir / "oracle.json", "w") as fh:
            json.dump({**result, "fingerprint": cfg.fingerprint()}, fh, indent=2, sort_keys=True)
    return result
