"""Repaired-dataset assembly and the head-only fine-tuning driver.

The repair set mixes original training samples with generated
counterfactuals: decision-boundary images carrying their relabeled labels,
and spurious-channel images carrying their pre-perturbation labels (the
perturbed cue is label-invariant by definition). A fixed fraction of each
pool is held out for before/after evaluation, using one RNG seed so the
manifest is reproducible.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    ChannelRef,
    ImageTensor,
    RelabelResult,
    channel_ref_from_json,
    channel_ref_to_json,
    predicted_label,
)
from .errors import ValidationError
from .sut import FinetuneConfig, finetune_supported

log = logging.getLogger(__name__)


class RepairSource(enum.Enum):
    ORIGINAL = "original"
    BOUNDARY_RELEVANT = "boundary_relevant"
    SPURIOUS_INVARIANT = "spurious_invariant"


class Split(enum.Enum):
    TRAIN = "train"
    HOLDOUT = "holdout"


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str  # relative to the manifest's directory
    label: int
    source: RepairSource
    split: Split
    channel: ChannelRef | None = None

    def __post_init__(self):
        if self.source is not RepairSource.ORIGINAL and self.channel is None:
            raise ValidationError("generated entries need channel provenance")


@dataclass(frozen=True)
class RepairManifest:
    entries: tuple
    mix_ratio: float
    holdout_fraction: float
    rng_seed: int
    warnings: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        if not 0 <= self.mix_ratio < 1:
            raise ValidationError("mix_ratio must be in [0, 1)")
        if not 0 <= self.holdout_fraction < 1:
            raise ValidationError("holdout_fraction must be in [0, 1)")
        train_paths = {e.image_path for e in self.entries
                       if e.split is Split.TRAIN}
        holdout_paths = {e.image_path for e in self.entries
                         if e.split is Split.HOLDOUT}
        if train_paths & holdout_paths:
            raise ValidationError("train and holdout entries overlap")

    def select(self, split: Split, sources=None) -> tuple:
        sources = set(sources) if sources else None
        return tuple(
            e for e in self.entries
            if e.split is split and (sources is None or e.source in sources)
        )

    @property
    def train_mix(self) -> float:
        train = self.select(Split.TRAIN)
        if not train:
            return 0.0
        n_gen = sum(1 for e in train if e.source is not RepairSource.ORIGINAL)
        return n_gen / len(train)


@dataclass(frozen=True)
class RepairHyper:
    lr: float = 2e-5
    max_epochs: int = 20
    early_stop: bool = True
    patience: int = 3
    head_only: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not self.head_only:
            raise ValidationError("only head-only fine-tuning is implemented")


@dataclass(frozen=True)
class RepairOutcome:
    downgraded: bool
    before: dict | None
    after: dict | None
    epochs_run: int
    frozen_checksum_unchanged: bool | None


def _split_indices(n: int, fraction: float, rng) -> tuple:
    """(train_indices, holdout_indices), both sorted, disjoint, exhaustive."""
    n_hold = int(round(fraction * n))
    if n > 0:
        n_hold = min(n_hold, n - 1) if fraction < 1 else n_hold
    holdout = np.sort(rng.choice(n, size=n_hold, replace=False))
    mask = np.ones(n, dtype=bool)
    mask[holdout] = False
    return np.nonzero(mask)[0], holdout


def assemble_repair_set(originals, boundary_entries, spurious_entries,
                        mix_ratio: float = 0.2,
                        holdout_fraction: float = 0.2,
                        rng_seed: int = 0) -> RepairManifest:
    """Build a deterministic repair manifest.

    ``originals``        — (image_path, label) pairs.
    ``boundary_entries`` — (image_path, relabel, channel) triples where
                           ``relabel`` is a RelabelResult; AMBIGUOUS entries
                           are dropped.
    ``spurious_entries`` — (image_path, original_label, channel) triples.

    The train split targets a generated fraction of ``mix_ratio`` (within
    one sample); when the generated pool is too small the mix degenerates
    toward originals-only and a warning is recorded on the manifest. An
    empty ``originals`` list is tolerated for manifest-only exports (the
    original half of the mix then happens out of process) — the ratio is
    not enforceable and a warning is recorded.
    """
    rng = np.random.default_rng(rng_seed)
    warnings_out = []
    if not originals:
        warnings_out.append(
            "no original samples supplied; manifest carries generated "
            "entries only and mix_ratio is not enforced"
        )

    generated = []
    for path, relabel, channel in boundary_entries:
        if relabel is RelabelResult.AMBIGUOUS:
            continue
        label = 1 if relabel is RelabelResult.POSITIVE else 0
        generated.append((str(path), label, RepairSource.BOUNDARY_RELEVANT,
                          channel))
    for path, label, channel in spurious_entries:
        generated.append((str(path), int(label),
                          RepairSource.SPURIOUS_INVARIANT, channel))
    if not generated:
        warnings_out.append(
            "generated pool is empty; repair set degenerates to originals"
        )

    empty = (np.array([], dtype=int), np.array([], dtype=int))
    orig_train_idx, orig_hold_idx = (
        _split_indices(len(originals), holdout_fraction, rng)
        if originals else empty
    )
    gen_train_idx, gen_hold_idx = (
        _split_indices(len(generated), holdout_fraction, rng)
        if generated else empty
    )

    n_orig_train = len(orig_train_idx)
    target_gen = int(round(mix_ratio / (1.0 - mix_ratio) * n_orig_train))
    if not originals:
        target_gen = len(gen_train_idx)  # manifest-only: keep everything
    if len(gen_train_idx) > target_gen:
        keep = rng.choice(len(gen_train_idx), size=target_gen, replace=False)
        gen_train_idx = np.sort(gen_train_idx[np.sort(keep)])
    elif len(gen_train_idx) < target_gen and generated:
        warnings_out.append(
            f"generated train pool has {len(gen_train_idx)} samples; "
            f"{target_gen} needed for mix_ratio={mix_ratio}"
        )

    entries = []
    for idx in orig_train_idx:
        path, label = originals[idx]
        entries.append(ManifestEntry(str(path), int(label),
                                     RepairSource.ORIGINAL, Split.TRAIN))
    for idx in gen_train_idx:
        path, label, source, channel = generated[idx]
        entries.append(ManifestEntry(path, label, source, Split.TRAIN, channel))
    for idx in orig_hold_idx:
        path, label = originals[idx]
        entries.append(ManifestEntry(str(path), int(label),
                                     RepairSource.ORIGINAL, Split.HOLDOUT))
    for idx in gen_hold_idx:
        path, label, source, channel = generated[idx]
        entries.append(ManifestEntry(path, label, source, Split.HOLDOUT,
                                     channel))
    for message in warnings_out:
        log.warning("%s", message)
    return RepairManifest(tuple(entries), mix_ratio, holdout_fraction,
                          rng_seed, tuple(warnings_out))


def save_manifest(manifest: RepairManifest, path) -> None:
    """JSON-lines: one header record, then one record per entry."""
    records = [{
        "kind": "repair_manifest",
        "mix_ratio": manifest.mix_ratio,
        "holdout_fraction": manifest.holdout_fraction,
        "rng_seed": manifest.rng_seed,
        "warnings": list(manifest.warnings),
    }]
    for e in manifest.entries:
        records.append({
            "kind": "entry",
            "image": e.image_path,
            "label": e.label,
            "source": e.source.value,
            "split": e.split.value,
            "channel": (None if e.channel is None
                        else channel_ref_to_json(e.channel)),
        })
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True,
                                separators=(",", ":")) + "\n")


def load_manifest(path) -> RepairManifest:
    header = None
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record.get("kind") == "repair_manifest":
                header = record
            elif record.get("kind") == "entry":
                channel = record.get("channel")
                entries.append(ManifestEntry(
                    image_path=record["image"],
                    label=int(record["label"]),
                    source=RepairSource(record["source"]),
                    split=Split(record["split"]),
                    channel=(None if channel is None
                             else channel_ref_from_json(channel)),
                ))
    if header is None:
        raise ValidationError(f"{path} has no repair_manifest header")
    return RepairManifest(
        tuple(entries),
        float(header["mix_ratio"]),
        float(header["holdout_fraction"]),
        int(header["rng_seed"]),
        tuple(header.get("warnings", [])),
    )


def load_image_array(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def _gather(entries, root: Path):
    x = np.stack([load_image_array(root / e.image_path) for e in entries])
    y = np.array([e.label for e in entries], dtype=int)
    return x, y


def _batch_accuracy(sut, x: np.ndarray, y: np.ndarray) -> float:
    if hasattr(sut, "accuracy"):
        return float(sut.accuracy(x, y))
    hits = 0
    for sample, label in zip(x, y):
        logits = sut.forward(ImageTensor.from_raw(sample))
        hits += int(predicted_label(logits) == label)
    return hits / len(y)


def run_repair(sut, manifest: RepairManifest, hyper: RepairHyper,
               root_dir) -> RepairOutcome:
    """Fine-tune the SUT's head on the repair set; report before/after
    accuracy on the original and generated holdout splits.

    SUTs without in-process head training downgrade to manifest-only mode
    (the manifest is the deliverable; nothing is trained or evaluated).
    The task is single-attribute binary classification, so the training
    loss touches only the repaired attribute by construction.
    """
    if not finetune_supported(sut):
        log.warning("SUT %s is not trainable in-process; manifest-only mode",
                    type(sut).__name__)
        return RepairOutcome(True, None, None, 0, None)

    root = Path(root_dir)
    train = manifest.select(Split.TRAIN)
    orig_hold = manifest.select(Split.HOLDOUT, {RepairSource.ORIGINAL})
    gen_hold = manifest.select(
        Split.HOLDOUT,
        {RepairSource.BOUNDARY_RELEVANT, RepairSource.SPURIOUS_INVARIANT},
    )
    if not train:
        raise ValidationError("manifest has no training entries")
    if not orig_hold or not gen_hold:
        raise ValidationError("both holdout splits must be non-empty")

    x_train, y_train = _gather(train, root)
    x_oh, y_oh = _gather(orig_hold, root)
    x_gh, y_gh = _gather(gen_hold, root)

    before = {
        "original_holdout": _batch_accuracy(sut, x_oh, y_oh),
        "generated_holdout": _batch_accuracy(sut, x_gh, y_gh),
    }
    checksum_before = (sut.frozen_checksum()
                       if hasattr(sut, "frozen_checksum") else None)

    train_log = sut.finetune_head(
        x_train, y_train,
        FinetuneConfig(lr=hyper.lr, max_epochs=hyper.max_epochs,
                       early_stop=hyper.early_stop, patience=hyper.patience),
        monitor=(x_gh, y_gh),
    )

    checksum_after = (sut.frozen_checksum()
                      if hasattr(sut, "frozen_checksum") else None)
    after = {
        "original_holdout": _batch_accuracy(sut, x_oh, y_oh),
        "generated_holdout": _batch_accuracy(sut, x_gh, y_gh),
    }
    return RepairOutcome(
        downgraded=False,
        before=before,
        after=after,
        epochs_run=train_log.epochs_run,
        frozen_checksum_unchanged=(
            None if checksum_before is None
            else checksum_before == checksum_after
        ),
    )
