"""Markdown report, rank CSV and plots for one finished run.

Everything is rendered from files already on disk (the run record, the
evaluate stage's metrics and the stage outputs it points to), so the report
can be regenerated at any time and comes out byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from . import blobs  # noqa: E402

# matplotlib stamps the version into PNG metadata; drop it so output only
# depends on the data
_PNG_META = {"Software": None}


class ReportError(RuntimeError):
    pass


def _stage_dir(record: dict, stage: str, contains: str | None = None) -> Path | None:
    for e in reversed(record["events"]):
        if e["stage"] == stage and e.get("status") in ("ran", "cached"):
            d = Path(e["dir"])
            if contains is None or (d / contains).exists():
                return d
    return None


def _need(path: Path) -> Path:
    if not path.exists():
        raise ReportError(f"missing stage output {path}")
    return path


def write_ranks_csv(metrics: dict, path: Path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "seed", "kind", "clip", "rank", "n", "m"])
    for kind in ("rate_0p5hz", "hfr_mid"):
        if kind not in metrics:
            continue
        ident = metrics[kind]["identification"]
        for j, r in enumerate(ident["ranks"]):
            w.writerow([metrics["arm"], metrics["seed"], kind, j, r, ident["n"], ident["m"]])
    path.write_text(buf.getvalue())


def plot_rank_histogram(metrics: dict, path: Path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    n = metrics["rate_0p5hz"]["identification"]["n"]
    bins = np.linspace(0.5, n + 0.5, min(n, 20) + 1)
    for kind, label in (("rate_0p5hz", "0.5 Hz"), ("hfr_mid", "HFR middle frames")):
        if kind in metrics:
            ax.hist(metrics[kind]["identification"]["ranks"], bins=bins, alpha=0.6, label=label)
    ax.axvline((n + 1) / 2, color="k", lw=0.8, ls="--", label="chance")
    ax.set_xlabel(f"rank among {n} candidates")
    ax.set_ylabel("clips")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curves(curves: dict[str, dict[str, list[float]]], path: Path):
    """One panel per model; each panel holds that model's loss terms."""
    fig, axes = plt.subplots(1, len(curves), figsize=(4.2 * len(curves), 3.2), squeeze=False)
    for ax, (title, terms) in zip(axes[0], curves.items()):
        for name, ys in sorted(terms.items()):
            if ys:
                ax.plot(np.arange(1, len(ys) + 1), ys, label=name, lw=1)
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("epoch" if title == "encoder" else "step")
        ax.set_yscale("log")
        ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def frame_strip(rows: list[np.ndarray], scale: int = 2, gap: int = 2) -> Image.Image:
    """Rows of (K, H, W, C) frames in [0, 1] tiled into one image.

    Use the first row for ground truth and the rest for reconstructions.
    """
    k = max(len(r) for r in rows)
    h, w, c = rows[0].shape[1:]
    canvas = np.ones((len(rows) * (h + gap) - gap, k * (w + gap) - gap, c), np.float32)
    for i, row in enumerate(rows):
        for j, f in enumerate(row):
            canvas[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = f
    img = Image.fromarray(np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8).squeeze())
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def _test_frames(record: dict) -> np.ndarray:
    d = _stage_dir(record, "simulate")
    manifest = json.loads(_need(d / "manifest.json").read_text())
    return blobs.load(_need(d / manifest["test_segment"]["video"]))


def write_report(run_dir, n_strip: int = 8) -> Path:
    """Render ``report.md`` and its figures into ``<run_dir>/report``."""
    run_dir = Path(run_dir)
    record = json.loads(_need(run_dir / "run_record.json").read_text())
    d_eval = _stage_dir(record, "evaluate")
    if d_eval is None:
        raise ReportError("the run has no completed evaluate stage")
    metrics = json.loads(_need(d_eval / "metrics.json").read_text())
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)

    write_ranks_csv(metrics, out / "ranks.csv")
    plot_rank_histogram(metrics, out / "rank_histogram.png")

    curves = {}
    d_enc = _stage_dir(record, "train-encoder")
    enc_eval = json.loads(_need(d_enc / "encoder_eval.json").read_text())
    curves["encoder"] = {"loss": enc_eval["train_log"]["epoch_loss"]}
    decoders = [e for e in record["events"] if e["stage"] == "train-decoder"
                and e.get("status") in ("ran", "cached") and (Path(e["dir"]) / "train_log.json").exists()]
    for i, e in enumerate(decoders):
        tl = json.loads((Path(e["dir"]) / "train_log.json").read_text())
        curves["decoder 0.5 Hz" if i == 0 else "decoder HFR"] = tl["curves"]
    plot_loss_curves(curves, out / "loss_curves.png")

    # frame strips: ground truth first, reconstructions below
    d_rec = _stage_dir(record, "reconstruct")
    frames = _test_frames(record)
    rec05 = blobs.load(_need(d_rec / "recon_05.nvrd"))
    t05 = json.loads(_need(d_rec / "recon_05.json").read_text())["times_s"]
    k = min(n_strip, len(rec05))
    fps = _frame_rate(record)
    gt_idx = np.rint(np.asarray(t05[:k]) * fps).astype(int)
    frame_strip([frames[gt_idx], rec05[:k]]).save(out / "frames_0p5hz.png", optimize=False)
    has_hfr = (d_rec / "recon_hfr.nvrd").exists()
    if has_hfr:
        rh = blobs.load(d_rec / "recon_hfr.nvrd")
        th = json.loads((d_rec / "recon_hfr.json").read_text())["times_s"]
        kh = min(2 * n_strip, len(rh))
        idx = np.rint(np.asarray(th[:kh]) * fps).astype(int)
        frame_strip([frames[idx], rh[:kh]]).save(out / "frames_hfr.png", optimize=False)

    (out / "report.md").write_text(render_markdown(metrics, has_hfr))
    return out / "report.md"


def _frame_rate(record: dict) -> float:
    d = _stage_dir(record, "simulate")
    return float(json.loads((d / "manifest.json").read_text())["frame_rate_hz"])


def _ident_line(label: str, block: dict) -> str:
    ident, m = block["identification"], block["metrics"]
    return (f"| {label} | {ident['mean_rank']:.3f} | {ident['n']} | {ident['m']} | {len(ident['ranks'])} "
            f"| {m['ssim']:.3f} | {m['psnr_db']:.3f} | {m['mse']:.4f} |")


def render_markdown(metrics: dict, has_hfr_strip: bool = False) -> str:
    sig = metrics["significance"]
    lines = [f"# Run report: arm `{metrics['arm']}` ({metrics['symbol']}), seed {metrics['seed']}", "",
             "## Encoder", "",
             f"{sig['summary']}.", "",
             f"Median test correlation over selected voxels: {metrics['encoder']['median_test_r']:.3f}.", "",
             "## Identification", "",
             "Mean rank of the true clip among n candidates (lower is better; chance is (n + 1) / 2).", "",
             "| frames | mean rank | n | m | clips | SSIM | PSNR (dB) | MSE |",
             "|---|---|---|---|---|---|---|---|",
             _ident_line("0.5 Hz", metrics["rate_0p5hz"])]
    if "hfr_mid" in metrics:
        src = metrics["hfr_mid"]["source"]
        label = "middle frames (interpolation)" if src == "interpolation" else "middle frames (HFR decoder)"
        lines.append(_ident_line(label, metrics["hfr_mid"]))
    if "overlap_discrepancy" in metrics:
        lines += ["", f"Mean overlap discrepancy between consecutive HFR decodings: "
                      f"{metrics['overlap_discrepancy']['mean']:.4f}."]
    lines += ["", "## Figures", "",
              "- Rank histogram: `rank_histogram.png` (per-clip ranks in `ranks.csv`)",
              "- Training curves: `loss_curves.png`",
              "- Ground truth (top) and 0.5 Hz reconstructions (bottom): `frames_0p5hz.png`"]
    if has_hfr_strip:
        lines.append("- Ground truth (top) and HFR reconstructions (bottom): `frames_hfr.png`")
    lines += ["", "All numbers above are read from the evaluate stage's `metrics.json`."]
    return "\n".join(lines) + "\n"
