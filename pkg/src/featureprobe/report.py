"""Run reporting: metric aggregation, CSV table, and static plots.

Consumes the JSON artifacts of the earlier stages; computes R_Relevance
from the verdicts, image distances and MS-SSIM over every influential
probe's (original, perturbed) pair, and boundary proximity over the refined
explore probes. Emits report.json + metrics.csv plus three plot files:
a layer-band histogram of relevant/spurious counts, a gallery of the
strongest spurious channels, and an original-vs-boundary image grid.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .config import PipelineConfig
from .core import ChannelRef, dump_json
from .errors import MissingArtifactError
from .metrics import d2_image, effective_scale_count, ms_ssim, r_relevance

log = logging.getLogger(__name__)

GALLERY_TOP_N = 10
BOUNDARY_GRID_MAX = 8


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return rows[0], rows[1:]


def _load_json(path: Path, stage: str) -> dict:
    if not path.exists():
        raise MissingArtifactError(
            f"{path} not found; run the {stage!r} stage first", stage=stage)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _mean_std(values):
    if not values:
        return None, None
    import numpy as np
    array = np.asarray(values, dtype=float)
    return float(array.mean()), float(array.std())


def _fmt(value) -> str:
    if value is None:
        return "undefined"
    return f"{value:.6g}"


def _image(path: Path):
    from .pipeline import load_image
    return load_image(path)


def write_report(config: PipelineConfig) -> dict:
    out = config.output_dir
    verdicts_artifact = _load_json(out / "attribute" / "verdicts.json",
                                   "attribute")
    mine_dir = out / "mine"
    if not mine_dir.exists():
        raise MissingArtifactError(
            f"missing artifacts under {mine_dir}; run the 'mine' stage first",
            stage="mine")

    label_by_channel = {}
    for verdict in verdicts_artifact["verdicts"]:
        ref = ChannelRef(verdict["channel"]["layer_id"],
                         verdict["channel"]["channel"])
        label_by_channel[ref] = verdict["label"]

    # Influential probes: image distances + per-channel drop statistics.
    d2_values, msssim_values = [], []
    influential_inputs = 0
    drops = {}  # channel -> max observed drop
    example_images = {}  # channel -> (original path, perturbed path)
    msssim_scales = None
    for path in sorted(mine_dir.glob("seed_*.jsonl")):
        _, records = _read_jsonl(path)
        for record in records:
            if record["verdict"] != "influential":
                continue
            influential_inputs += 1
            ref = ChannelRef(record["channel"]["layer_id"],
                             record["channel"]["channel"])
            original = _image(mine_dir / record["original_image"])
            perturbed = _image(mine_dir / record["perturbed_image"])
            d2_values.append(d2_image(original, perturbed))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                msssim_values.append(ms_ssim(original, perturbed))
            if msssim_scales is None:
                msssim_scales = effective_scale_count(original.shape)
            drop = record.get("drop")
            if drop is not None and drop > drops.get(ref, float("-inf")):
                drops[ref] = drop
            example_images.setdefault(
                ref, (mine_dir / record["original_image"],
                      mine_dir / record["perturbed_image"]))

    # Boundary probes from the explore stage (optional artifacts).
    margins, boundary_pairs, unconverged = [], [], 0
    explore_dir = out / "explore"
    if explore_dir.exists():
        for path in sorted(explore_dir.glob("seed_*.jsonl")):
            _, records = _read_jsonl(path)
            for record in records:
                refinement = record.get("refinement")
                if not refinement:
                    continue
                margins.append(float(refinement["margin_at_star"]))
                if not refinement["converged"]:
                    unconverged += 1
                if len(boundary_pairs) < BOUNDARY_GRID_MAX:
                    boundary_pairs.append(
                        (explore_dir / record["original_image"],
                         explore_dir / record["boundary_image"]))

    repair_path = out / "repair" / "eval.json"
    repair_summary = (
        _load_json(repair_path, "repair") if repair_path.exists() else None
    )

    counts = verdicts_artifact["counts"]
    relevance = r_relevance(counts["relevant"], counts["spurious"])
    if relevance is None:
        log.warning("no influential channels; R_Relevance is undefined")
    d2_mean, d2_std = _mean_std(d2_values)
    ms_mean, ms_std = _mean_std(msssim_values)
    margin_mean, margin_std = _mean_std(margins)

    report_dir = out / "report"
    plots_dir = report_dir / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)

    artifact = {
        "stage": "report",
        "config_hash": config.config_hash,
        "deterministic": bool(verdicts_artifact.get("deterministic", False)),
        "drop_convention": config["oracle"]["drop_convention"],
        "metrics": {
            "r_relevance": relevance,
            "d2_image": {"mean": d2_mean, "std": d2_std,
                         "n": len(d2_values)},
            "ms_ssim": {"mean": ms_mean, "std": ms_std,
                        "n": len(msssim_values),
                        "scales_used": msssim_scales},
            "d2_boundary": {"mean": margin_mean, "std": margin_std,
                            "n": len(margins),
                            "unconverged": unconverged},
        },
        "counts": {
            "relevant_channels": counts["relevant"],
            "spurious_channels": counts["spurious"],
            "influential_inputs": influential_inputs,
        },
        "channels": [
            {
                "channel": {"layer_id": ref.layer_id,
                            "channel": ref.channel},
                "label": label_by_channel.get(ref, "undetermined"),
                "max_drop": drops.get(ref),
            }
            for ref in sorted(drops)
        ],
        "repair": repair_summary,
        "plots": {
            "layer_band_histogram": "plots/layer_band_histogram.png",
            "spurious_gallery": "plots/spurious_gallery.png",
            "boundary_grid": "plots/boundary_grid.png",
        },
    }
    dump_json(artifact, report_dir / "report.json")

    with open(report_dir / "metrics.csv", "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "mean", "std", "n"])
        writer.writerow(["r_relevance", _fmt(relevance), "",
                         counts["relevant"] + counts["spurious"]])
        writer.writerow(["d2_image", _fmt(d2_mean), _fmt(d2_std),
                         len(d2_values)])
        writer.writerow(["ms_ssim", _fmt(ms_mean), _fmt(ms_std),
                         len(msssim_values)])
        writer.writerow(["d2_boundary", _fmt(margin_mean), _fmt(margin_std),
                         len(margins)])

    _plot_layer_band_histogram(
        label_by_channel, plots_dir / "layer_band_histogram.png")
    _plot_spurious_gallery(
        drops, label_by_channel, example_images,
        plots_dir / "spurious_gallery.png")
    _plot_boundary_grid(boundary_pairs, plots_dir / "boundary_grid.png")
    log.info("report written to %s", report_dir)
    return artifact


def _plot_layer_band_histogram(label_by_channel, path: Path) -> None:
    layers = sorted({ref.layer_id for ref in label_by_channel})
    relevant = [sum(1 for ref, lab in label_by_channel.items()
                    if ref.layer_id == layer and lab == "relevant")
                for layer in layers]
    spurious = [sum(1 for ref, lab in label_by_channel.items()
                    if ref.layer_id == layer and lab == "spurious")
                for layer in layers]
    fig, ax = plt.subplots(figsize=(6, 4))
    if layers:
        width = 0.4
        xs = range(len(layers))
        ax.bar([x - width / 2 for x in xs], relevant, width,
               label="relevant", color="#4878cf")
        ax.bar([x + width / 2 for x in xs], spurious, width,
               label="spurious", color="#d65f5f")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([f"layer {layer}" for layer in layers])
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no influential channels", ha="center",
                va="center", transform=ax.transAxes)
    ax.set_ylabel("influential channels")
    ax.set_title("Relevant vs spurious channels per layer")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_spurious_gallery(drops, label_by_channel, example_images,
                           path: Path) -> None:
    spurious = [(drop, ref) for ref, drop in drops.items()
                if label_by_channel.get(ref) == "spurious"
                and ref in example_images]
    spurious.sort(key=lambda pair: (-pair[0], pair[1]))
    top = spurious[:GALLERY_TOP_N]
    if not top:
        fig, ax = plt.subplots(figsize=(5, 2))
        ax.axis("off")
        ax.text(0.5, 0.5, "no spurious channels", ha="center", va="center")
        fig.savefig(path)
        plt.close(fig)
        return
    fig, axes = plt.subplots(len(top), 2,
                             figsize=(4.2, 2.1 * len(top)), squeeze=False)
    for row, (drop, ref) in enumerate(top):
        original_path, perturbed_path = example_images[ref]
        for col, (img_path, title) in enumerate(
                [(original_path, "original"), (perturbed_path, "perturbed")]):
            ax = axes[row][col]
            ax.imshow(_image(img_path).data)
            ax.set_axis_off()
            if col == 0:
                ax.set_title(f"({ref.layer_id},{ref.channel}) "
                             f"drop={drop:.2f}", fontsize=8, loc="left")
            else:
                ax.set_title(title, fontsize=8)
    fig.suptitle("Strongest spurious channels")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_boundary_grid(boundary_pairs, path: Path) -> None:
    if not boundary_pairs:
        fig, ax = plt.subplots(figsize=(5, 2))
        ax.axis("off")
        ax.text(0.5, 0.5, "no boundary images", ha="center", va="center")
        fig.savefig(path)
        plt.close(fig)
        return
    fig, axes = plt.subplots(len(boundary_pairs), 2,
                             figsize=(4.2, 2.1 * len(boundary_pairs)),
                             squeeze=False)
    for row, (original_path, boundary_path) in enumerate(boundary_pairs):
        axes[row][0].imshow(_image(original_path).data)
        axes[row][0].set_title("original", fontsize=8)
        axes[row][1].imshow(_image(boundary_path).data)
        axes[row][1].set_title("boundary", fontsize=8)
        for ax in axes[row]:
            ax.set_axis_off()
    fig.suptitle("Decision-boundary tests")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
