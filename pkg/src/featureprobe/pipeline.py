"""Stage orchestration and the on-disk artifact contract.

Each stage reads its predecessor's artifacts by path convention under the
configured output directory and writes its own:

    scenario/   scenario.json, sut.npz, ground_truth.json
    screen/     seed_NNNN.json                 (sensitivity + candidates)
    mine/       seed_NNNN.jsonl, images/       (confidence-oracle probes)
    attribute/  verdicts.json [, raw_responses/]
    explore/    seed_NNNN.jsonl, images/       (boundary probes + relabels)
    repair/     originals/, manifest.jsonl, eval.json
    report/     report.json, metrics.csv, plots/

Every JSON artifact embeds its stage name and the config hash. All content
is deterministic for a fixed config hash and deterministic backends: JSON
is dumped with sorted keys, files never record timestamps or absolute
paths, and every RNG is seeded from config values. Wall-clock timings go
to the log only, never into artifacts.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent import futures
from pathlib import Path

import numpy as np
from PIL import Image

from .attribution import (
    GroundTruthJudge,
    JudgmentBackendConfig,
    JudgmentBackendKind,
    TieRule,
    TriptychQuery,
    VlmHttpJudge,
    attribute_channel,
    build_diff_mask,
    judge_pair,
    relabel_boundary_image,
)
from .config import PipelineConfig
from .core import (
    ChannelRef,
    FeatureLabel,
    ImageTensor,
    RelabelResult,
    dump_json,
    feature_verdict_from_json,
    feature_verdict_to_json,
    probe_result_to_json,
)
from .errors import (
    ConfigError,
    FeatureProbeError,
    MissingArtifactError,
    ValidationError,
)
from .generator import SyntheticStyleGenerator
from .metrics import MetricReport, d2_image, ms_ssim, r_relevance
from .perturb import (
    DropConvention,
    OracleKind,
    OracleSpec,
    boundary_refinement_to_json,
    channel_perturb,
    confidence_drop,
    perturbation_delta,
)
from .repair import (
    RepairHyper,
    assemble_repair_set,
    run_repair,
    save_manifest,
)
from .scenario import (
    Scenario,
    ScenarioSpec,
    build_scenario,
    load_scenario,
    make_original_set,
    save_scenario,
)
from .sensitivity import (
    candidate_set_from_json,
    candidate_set_to_json,
    fda,
    grad_saliency,
    select_candidates,
    sensitivity_map_from_json,
    sensitivity_map_to_json,
    smoothgrad,
)
from .sut import CallCountingSUT, LinearMeanSUT

log = logging.getLogger(__name__)

STAGES = ("scenario", "screen", "mine", "attribute", "explore", "repair",
          "report")

# Counterfactual vote pairs are rendered from this seed block, far from any
# plausible probe-seed range, so votes never reuse a probe state.
VOTE_SEED_BASE = 1_000_000


# --------------------------------------------------------------------------
# backends

class PipelineContext:
    """Backends + task parameters resolved from one config."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = config.output_dir
        self._generator = None
        self._sut = None
        self._scenario = None
        self._judge = None
        self._procs = []

    # -- generator ---------------------------------------------------------

    @property
    def generator(self):
        if self._generator is None:
            self._generator = self._build_generator()
        return self._generator

    def _build_generator(self):
        gen_cfg = self.config["generator"]
        if gen_cfg["kind"] == "synthetic":
            return SyntheticStyleGenerator(
                image_size=int(gen_cfg["image_size"]),
                cue_amplitude=float(gen_cfg["cue_amplitude"]),
            )
        return self._spawn_adapter(gen_cfg["command"], kind="generator")

    # -- SUT ----------------------------------------------------------------

    @property
    def sut(self):
        if self._sut is None:
            self._sut = self._build_sut()
        return self._sut

    def _build_sut(self):
        sut_cfg = self.config["sut"]
        if sut_cfg["kind"] == "scenario":
            return self.scenario.sut
        if sut_cfg["kind"] == "linear_mean":
            return LinearMeanSUT()
        return self._spawn_adapter(sut_cfg["command"], kind="sut")

    # -- scenario ------------------------------------------------------------

    @property
    def scenario(self) -> Scenario:
        if self._scenario is None:
            scenario_dir = self.scenario_dir
            if not (scenario_dir / "scenario.json").exists():
                raise MissingArtifactError(
                    f"no scenario artifacts in {scenario_dir}; "
                    "run the 'scenario' stage first",
                    stage="scenario",
                )
            self._scenario = load_scenario(scenario_dir)
        return self._scenario

    @property
    def scenario_dir(self) -> Path:
        configured = self.config["sut"]["scenario_dir"]
        return Path(configured) if configured else self.out / "scenario"

    # -- judgment backend ----------------------------------------------------

    @property
    def judge(self):
        if self._judge is None:
            att = self.config["attribution"]
            if att["backend"] == "ground_truth":
                if self.config["generator"]["kind"] != "synthetic":
                    raise ConfigError(
                        "ground_truth attribution needs the synthetic "
                        "generator (channel semantics are unknown otherwise)"
                    )
                scenario = self.scenario
                self._judge = GroundTruthJudge(
                    scenario.gt_map, scenario.label_fn)
            else:
                backend_config = JudgmentBackendConfig(
                    kind=JudgmentBackendKind.VLM_HTTP,
                    endpoint=att["endpoint"],
                    api_key_env=att["api_key_env"],
                    model=att["model"],
                    vote_samples=int(att["vote_samples"]),
                    tie_rule=TieRule(att["tie_rule"]),
                    timeout=float(att["timeout"]),
                    max_retries=int(att["max_retries"]),
                )
                self._judge = VlmHttpJudge(
                    backend_config,
                    archive_dir=self.out / "attribute" / "raw_responses",
                )
        return self._judge

    # -- shared parameters -----------------------------------------------------

    @property
    def target(self) -> int:
        return int(self.config["task"]["target_class"])

    @property
    def truncation(self) -> float:
        return float(self.config["truncation"])

    def oracle(self, kind: OracleKind) -> OracleSpec:
        orc = self.config["oracle"]
        return OracleSpec(
            kind=kind,
            tau_fraction=float(orc["tau_fraction"]),
            epsilon=float(orc["epsilon"]),
            drop_convention=DropConvention(orc["drop_convention"]),
        )

    def _spawn_adapter(self, command, kind: str):
        import shlex
        import subprocess

        from .adapter import AdapterGenerator, AdapterSUT

        argv = command if isinstance(command, list) else shlex.split(command)
        proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        self._procs.append(proc)
        if kind == "generator":
            return AdapterGenerator(proc.stdout, proc.stdin)
        return AdapterSUT(proc.stdout, proc.stdin)

    def close(self):
        import subprocess

        for backend in (self._generator, self._sut):
            if backend is not None and hasattr(backend, "close"):
                backend.close()
        for proc in self._procs:
            try:
                proc.stdin.close()
            except OSError:
                pass  # child already gone; nothing left to flush to
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


# --------------------------------------------------------------------------
# artifact helpers

def _seed_name(seed: int) -> str:
    return f"seed_{seed:04d}"


def _image_name(seed: int, ref: ChannelRef, phase: str) -> str:
    return f"{seed:04d}_{ref.layer_id}_{ref.channel}_{phase}.png"


def save_image(image: ImageTensor, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(image.data * 255.0, 0, 255).round().astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: Path) -> ImageTensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return ImageTensor(arr)


def _write_jsonl(path: Path, header: dict, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for obj in [header, *records]:
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise ValidationError(f"{path} is empty")
    return rows[0], rows[1:]


def _require_stage_dir(out: Path, stage: str) -> Path:
    stage_dir = out / stage
    if not stage_dir.exists():
        raise MissingArtifactError(
            f"missing artifacts under {stage_dir}; run the {stage!r} stage "
            "first", stage=stage,
        )
    return stage_dir


def _seed_artifacts(stage_dir: Path, suffix: str, stage: str):
    paths = sorted(stage_dir.glob(f"seed_*{suffix}"))
    if not paths:
        raise MissingArtifactError(
            f"no per-seed artifacts in {stage_dir}; run the {stage!r} stage "
            "first", stage=stage,
        )
    return paths


# --------------------------------------------------------------------------
# stages

def stage_scenario(config: PipelineConfig) -> Path:
    """Build and persist the synthetic scenario (generator + toy SUT)."""
    if config["sut"]["kind"] != "scenario":
        log.info("sut.kind != scenario; nothing to build")
        return config.output_dir / "scenario"
    sc = config["scenario"]
    spec = ScenarioSpec(
        spurious_strength=float(sc["spurious_strength"]),
        n_train=int(sc["n_train"]),
        rng_seed=int(sc["rng_seed"]),
        image_size=int(config["generator"]["image_size"]),
    )
    started = time.perf_counter()
    scenario = build_scenario(spec)
    log.info("scenario built in %.1fs (train accuracy %.3f)",
             time.perf_counter() - started, scenario.train_accuracy)
    out_dir = config.output_dir / "scenario"
    save_scenario(scenario, out_dir)
    return out_dir


def _screen_one(ctx: PipelineContext, seed: int) -> dict:
    config = ctx.config
    scr = config["screening"]
    state = ctx.generator.sample_style_state(seed, ctx.truncation)
    forward_calls = None
    if scr["method"] == "grad":
        sensitivity = grad_saliency(state, ctx.generator, ctx.sut, ctx.target)
    elif scr["method"] == "smoothgrad":
        sensitivity = smoothgrad(
            state, ctx.generator, ctx.sut, ctx.target,
            n=int(scr["n"]), sigma=scr["sigma"], seed=seed,
        )
    else:
        counter = CallCountingSUT(ctx.sut)
        sensitivity = fda(state, ctx.generator, counter, ctx.target,
                          delta=float(scr["delta"]))
        forward_calls = counter.forward_calls
        log.info("seed %d: FDA used %d SUT forwards", seed, forward_calls)
    candidates = select_candidates(
        sensitivity, ctx.generator.topology,
        k_coarse_mid=int(scr["k_coarse_mid"]), k_fine=int(scr["k_fine"]),
    )
    artifact = {
        "stage": "screen",
        "config_hash": config.config_hash,
        "seed": seed,
        "truncation": ctx.truncation,
        "sensitivity": sensitivity_map_to_json(sensitivity),
        "candidates": candidate_set_to_json(candidates),
        "fda_forward_calls": forward_calls,
    }
    dump_json(artifact, config.output_dir / "screen" / f"{_seed_name(seed)}.json")
    return artifact


def stage_screen(config: PipelineConfig) -> None:
    (config.output_dir / "screen").mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    _for_each_seed(config, _screen_one, "screen")
    log.info("screen stage done in %.1fs", time.perf_counter() - started)


def _mine_one(ctx: PipelineContext, seed: int) -> dict:
    config = ctx.config
    screen_path = (config.output_dir / "screen"
                   / f"{_seed_name(seed)}.json")
    if not screen_path.exists():
        raise MissingArtifactError(
            f"{screen_path} not found; run the 'screen' stage first",
            stage="screen",
        )
    with open(screen_path, encoding="utf-8") as fh:
        screen_artifact = json.load(fh)
    candidates = candidate_set_from_json(screen_artifact["candidates"])
    oracle = ctx.oracle(OracleKind.CONFIDENCE)
    state = ctx.generator.sample_style_state(seed, ctx.truncation)

    mine_dir = config.output_dir / "mine"
    images_dir = mine_dir / "images"
    header = {
        "stage": "mine",
        "config_hash": config.config_hash,
        "seed": seed,
        "oracle": {
            "kind": oracle.kind.value,
            "tau_fraction": oracle.tau_fraction,
            "epsilon": oracle.epsilon,
            "drop_convention": oracle.drop_convention.value,
        },
    }
    if len(candidates) == 0:
        log.warning("seed %d: empty candidate set; nothing to mine", seed)
        _write_jsonl(mine_dir / f"{_seed_name(seed)}.jsonl", header, [])
        return header

    probes = channel_perturb(
        state, ctx.generator, ctx.sut, candidates, oracle, target=ctx.target)
    original_name = f"{seed:04d}_original.png"
    records = []
    y0 = None
    for probe in probes:
        if y0 is None:
            save_image(probe.original_image, images_dir / original_name)
            y0 = probe.original_logits.target_value
        image_name = _image_name(seed, probe.channel, "mine")
        save_image(probe.perturbed_image, images_dir / image_name)
        record = probe_result_to_json(
            probe,
            original_image=f"images/{original_name}",
            perturbed_image=f"images/{image_name}",
        )
        record["drop"] = confidence_drop(
            y0, probe.perturbed_logits.target_value, oracle.drop_convention)
        record["tau"] = oracle.tau_fraction * abs(y0)
        records.append(record)
    header["original_image"] = f"images/{original_name}"
    _write_jsonl(mine_dir / f"{_seed_name(seed)}.jsonl", header, records)
    return header


def stage_mine(config: PipelineConfig) -> None:
    _require_stage_dir(config.output_dir, "screen")
    started = time.perf_counter()
    _for_each_seed(config, _mine_one, "mine")
    log.info("mine stage done in %.1fs", time.perf_counter() - started)


def _influential_channels(config: PipelineConfig):
    """(layer, channel) -> first-seen (seed, score, delta) across mine runs."""
    mine_dir = _require_stage_dir(config.output_dir, "mine")
    found = {}
    for path in _seed_artifacts(mine_dir, ".jsonl", "mine"):
        header, records = _read_jsonl(path)
        for record in records:
            if record["verdict"] != "influential":
                continue
            ref = ChannelRef(record["channel"]["layer_id"],
                             record["channel"]["channel"])
            found.setdefault(ref, {
                "seed": header["seed"],
                "delta": record["delta"],
            })
    return found


def _screen_scores(config: PipelineConfig, seed: int):
    path = config.output_dir / "screen" / f"{_seed_name(seed)}.json"
    if not path.exists():
        raise MissingArtifactError(
            f"{path} not found; run the 'screen' stage first", stage="screen")
    with open(path, encoding="utf-8") as fh:
        artifact = json.load(fh)
    return sensitivity_map_from_json(artifact["sensitivity"])


def stage_attribute(config: PipelineConfig) -> dict:
    """Judge every influential channel with vote_samples counterfactual
    pairs and write one FeatureVerdict per channel."""
    att = config["attribution"]
    influential = _influential_channels(config)
    with PipelineContext(config) as ctx:
        judge = ctx.judge
        vote_samples = int(att["vote_samples"])
        tie_rule = TieRule(att["tie_rule"])
        attribute = config["task"]["attribute"]
        verdicts = []
        task_kind = ctx.sut.capabilities().task_kind
        epsilon = float(config["oracle"]["epsilon"])
        for ref in sorted(influential):
            origin = influential[ref]
            score = _screen_scores(config, origin["seed"]).get(ref)
            votes = []
            for j in range(vote_samples):
                vote_seed = VOTE_SEED_BASE + j
                state = ctx.generator.sample_style_state(
                    vote_seed, ctx.truncation)
                original = ctx.generator.synthesize(state)
                y0 = ctx.sut.forward(original).values[ctx.target]
                alpha = score if score != 0.0 else origin["delta"]
                delta = perturbation_delta(alpha, float(y0), epsilon,
                                           task_kind)
                perturbed = ctx.generator.synthesize(
                    state.with_channel(ref, delta))
                query = TriptychQuery(
                    original=original,
                    perturbed=perturbed,
                    diff_mask=build_diff_mask(
                        original, perturbed,
                        threshold=float(att["diff_threshold"])),
                    task_attribute=attribute,
                )
                votes.append(judge_pair(query, judge, {"channel": ref}))
            verdicts.append(attribute_channel(ref, votes, tie_rule))

        n_relevant = sum(1 for v in verdicts
                         if v.label is FeatureLabel.RELEVANT)
        n_spurious = sum(1 for v in verdicts
                         if v.label is FeatureLabel.SPURIOUS)
        artifact = {
            "stage": "attribute",
            "config_hash": config.config_hash,
            "backend": att["backend"],
            "deterministic": bool(getattr(judge, "deterministic", False)),
            "vote_samples": vote_samples,
            "tie_rule": tie_rule.value,
            "verdicts": [feature_verdict_to_json(v) for v in verdicts],
            "counts": {"relevant": n_relevant, "spurious": n_spurious},
        }
    out_dir = config.output_dir / "attribute"
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(artifact, out_dir / "verdicts.json")
    return artifact


def _load_verdicts(config: PipelineConfig):
    path = config.output_dir / "attribute" / "verdicts.json"
    if not path.exists():
        raise MissingArtifactError(
            f"{path} not found; run the 'attribute' stage first",
            stage="attribute",
        )
    with open(path, encoding="utf-8") as fh:
        artifact = json.load(fh)
    return artifact, [feature_verdict_from_json(v)
                      for v in artifact["verdicts"]]


def _explore_one(ctx: PipelineContext, seed: int) -> dict:
    config = ctx.config
    _, verdicts = _load_verdicts(config)
    relevant = sorted(v.channel for v in verdicts
                      if v.label is FeatureLabel.RELEVANT)
    influential = set(_influential_channels(config))
    leaked = [ref for ref in relevant if ref not in influential]
    if leaked:
        raise FeatureProbeError(
            f"two-phase contract violated: {leaked} labeled relevant but "
            "never mined as influential"
        )

    orc = config["oracle"]
    oracle = ctx.oracle(OracleKind.MISCLASSIFICATION)
    state = ctx.generator.sample_style_state(seed, ctx.truncation)
    explore_dir = config.output_dir / "explore"
    images_dir = explore_dir / "images"
    header = {
        "stage": "explore",
        "config_hash": config.config_hash,
        "seed": seed,
        "oracle": {"kind": oracle.kind.value, "epsilon": oracle.epsilon},
        "tolerance": float(orc["tolerance"]),
        "max_iterations": int(orc["max_iterations"]),
        "phase_channels": [ref.key() for ref in relevant],
    }
    if not relevant:
        log.warning("seed %d: no relevant channels; nothing to explore", seed)
        _write_jsonl(explore_dir / f"{_seed_name(seed)}.jsonl", header, [])
        return header

    scores = _screen_scores(config, seed)
    entries = [(ref, scores.get(ref)) for ref in relevant
               if scores.get(ref) != 0.0]
    if not entries:
        log.warning("seed %d: relevant channels all have zero scores", seed)
        _write_jsonl(explore_dir / f"{_seed_name(seed)}.jsonl", header, [])
        return header

    from .sensitivity import CandidateSet
    candidates = CandidateSet(tuple(entries), len(entries), len(entries))
    refinements = {}
    probes = channel_perturb(
        state, ctx.generator, ctx.sut, candidates, oracle,
        target=ctx.target, refinements=refinements,
        tolerance=float(orc["tolerance"]),
        max_iterations=int(orc["max_iterations"]),
    )
    original_name = f"{seed:04d}_original.png"
    records = []
    attribute = config["task"]["attribute"]
    for probe in probes:
        if not records:
            save_image(probe.original_image, images_dir / original_name)
        image_name = _image_name(seed, probe.channel, "explore")
        save_image(probe.perturbed_image, images_dir / image_name)
        record = probe_result_to_json(
            probe,
            original_image=f"images/{original_name}",
            perturbed_image=f"images/{image_name}",
        )
        refinement = refinements.get(probe.channel.key())
        if refinement is not None:
            boundary_state = state.with_channel(
                probe.channel, refinement.delta_star)
            boundary_image = ctx.generator.synthesize(boundary_state)
            boundary_name = _image_name(seed, probe.channel, "boundary")
            save_image(boundary_image, images_dir / boundary_name)
            relabel = relabel_boundary_image(
                boundary_image, attribute, ctx.judge,
                {"state": boundary_state})
            record["refinement"] = boundary_refinement_to_json(refinement)
            record["boundary_image"] = f"images/{boundary_name}"
            record["relabel"] = relabel.value
        records.append(record)
    _write_jsonl(explore_dir / f"{_seed_name(seed)}.jsonl", header, records)
    return header


def stage_explore(config: PipelineConfig) -> None:
    _load_verdicts(config)  # fail fast with a stage-naming error
    started = time.perf_counter()
    _for_each_seed(config, _explore_one, "explore")
    log.info("explore stage done in %.1fs", time.perf_counter() - started)


def stage_repair(config: PipelineConfig) -> dict:
    """Assemble the repair manifest and, when the SUT trains in-process,
    fine-tune the head and report before/after holdout accuracy."""
    explore_dir = _require_stage_dir(config.output_dir, "explore")
    mine_dir = _require_stage_dir(config.output_dir, "mine")
    _, verdicts = _load_verdicts(config)
    spurious = {v.channel for v in verdicts
                if v.label is FeatureLabel.SPURIOUS}

    repair_dir = config.output_dir / "repair"
    repair_dir.mkdir(parents=True, exist_ok=True)
    rep = config["repair"]

    # Boundary images with their relabels, from the explore stage.
    boundary_entries = []
    for path in _seed_artifacts(explore_dir, ".jsonl", "explore"):
        _, records = _read_jsonl(path)
        for record in records:
            if "boundary_image" not in record:
                continue
            ref = ChannelRef(record["channel"]["layer_id"],
                             record["channel"]["channel"])
            boundary_entries.append((
                f"../explore/{record['boundary_image']}",
                RelabelResult(record["relabel"]),
                ref,
            ))

    # Spurious-channel perturbed images keep the original state's label.
    with PipelineContext(config) as ctx:
        label_fn = (ctx.scenario.label_fn
                    if config["sut"]["kind"] == "scenario" else None)
        spurious_entries = []
        for path in _seed_artifacts(mine_dir, ".jsonl", "mine"):
            header, records = _read_jsonl(path)
            seed = header["seed"]
            state = ctx.generator.sample_style_state(seed, ctx.truncation)
            for record in records:
                if record["verdict"] != "influential":
                    continue
                ref = ChannelRef(record["channel"]["layer_id"],
                                 record["channel"]["channel"])
                if ref not in spurious:
                    continue
                if label_fn is not None:
                    label = label_fn(state)
                else:
                    # fall back to the SUT's original prediction
                    label = int(record["original_logits"]["values"]
                                [ctx.target] > 0)
                spurious_entries.append(
                    (f"../mine/{record['perturbed_image']}", label, ref))

        originals = []
        trainable = config["sut"]["kind"] == "scenario"
        if trainable:
            originals_dir = repair_dir / "originals"
            originals_dir.mkdir(parents=True, exist_ok=True)
            _, images, labels = make_original_set(
                ctx.scenario, int(rep["n_originals"]), int(rep["rng_seed"]))
            for index, (image, label) in enumerate(zip(images, labels)):
                name = f"originals/orig_{index:04d}.png"
                save_image(ImageTensor.from_raw(image), repair_dir / name)
                originals.append((name, int(label)))

        manifest = assemble_repair_set(
            originals, boundary_entries, spurious_entries,
            mix_ratio=float(rep["mix_ratio"]),
            holdout_fraction=float(rep["holdout_fraction"]),
            rng_seed=int(rep["rng_seed"]),
        )
        save_manifest(manifest, repair_dir / "manifest.jsonl")

        hyper = RepairHyper(
            lr=float(rep["lr"]), max_epochs=int(rep["max_epochs"]),
            early_stop=bool(rep["early_stop"]),
            patience=int(rep["patience"]),
        )
        outcome = run_repair(ctx.sut, manifest, hyper, repair_dir)

    artifact = {
        "stage": "repair",
        "config_hash": config.config_hash,
        "manifest": "manifest.jsonl",
        "manifest_warnings": list(manifest.warnings),
        "train_mix": manifest.train_mix,
        "downgraded": outcome.downgraded,
        "before": outcome.before,
        "after": outcome.after,
        "epochs_run": outcome.epochs_run,
        "frozen_checksum_unchanged": outcome.frozen_checksum_unchanged,
    }
    dump_json(artifact, repair_dir / "eval.json")
    return artifact


def stage_report(config: PipelineConfig) -> dict:
    from . import report as report_module
    return report_module.write_report(config)


def run_all(config: PipelineConfig) -> None:
    """Compose every stage in order on one config."""
    if config["sut"]["kind"] == "scenario":
        stage_scenario(config)
    stage_screen(config)
    stage_mine(config)
    stage_attribute(config)
    stage_explore(config)
    stage_repair(config)
    stage_report(config)


# --------------------------------------------------------------------------
# seed scheduling

def _run_seed_batch(config_data: dict, stage: str, seeds) -> None:
    """Worker entry point: private backends, then a slice of seeds."""
    config = PipelineConfig(config_data)
    runner = {"screen": _screen_one, "mine": _mine_one,
              "explore": _explore_one}[stage]
    with PipelineContext(config) as ctx:
        for seed in seeds:
            runner(ctx, seed)


def _for_each_seed(config: PipelineConfig, runner, stage: str) -> None:
    seeds = config.seeds
    workers = int(config["workers"])
    if workers <= 1 or len(seeds) <= 1:
        with PipelineContext(config) as ctx:
            for seed in seeds:
                runner(ctx, seed)
        return
    workers = min(workers, len(seeds))
    batches = [list(seeds[i::workers]) for i in range(workers)]
    with futures.ProcessPoolExecutor(max_workers=workers) as pool:
        jobs = [
            pool.submit(_run_seed_batch, config.data, stage, batch)
            for batch in batches if batch
        ]
        for job in jobs:
            job.result()  # propagate failures
