"""Relevance attribution and relabeling via pluggable judgment backends.

A judgment backend answers two kinds of question:

* relevance — given a triptych (original, perturbed, difference mask), did
  the task attribute change?
* relabel — what is the correct label of a boundary image?

Two backends ship in-tree: a remote vision-language model spoken to over a
chat-style HTTP endpoint, and a ground-truth map for the synthetic domain
where channel semantics are known exactly.
"""

from __future__ import annotations

import base64
import enum
import io
import json
import logging
import os
import re
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .core import (
    ChannelRef,
    Colorspace,
    FeatureLabel,
    FeatureVerdict,
    ImageTensor,
    JudgeVote,
    RelabelResult,
    dump_json,
)
from .errors import BackendError, ValidationError

log = logging.getLogger(__name__)

DIFF_MASK_THRESHOLD = 0.2


class JudgmentBackendKind(enum.Enum):
    VLM_HTTP = "vlm_http"
    GROUND_TRUTH = "ground_truth"


class TieRule(enum.Enum):
    RELEVANT = "relevant"
    SPURIOUS = "spurious"


@dataclass(frozen=True)
class JudgmentBackendConfig:
    kind: JudgmentBackendKind
    endpoint: str | None = None
    api_key_env: str | None = None
    model: str | None = None
    vote_samples: int = 5
    tie_rule: TieRule = TieRule.RELEVANT
    timeout: float = 60.0
    max_retries: int = 2
    relevance_template: str = "relevance_default"
    relabel_template: str = "relabel_default"
    answer_key: str | None = None

    def __post_init__(self):
        if self.vote_samples < 1:
            raise ValidationError("vote_samples must be >= 1")
        if self.vote_samples % 2 == 0:
            log.warning("vote_samples=%d is even; ties go to the tie rule",
                        self.vote_samples)
        if self.kind is JudgmentBackendKind.VLM_HTTP and not self.endpoint:
            raise ValidationError("VLM backend requires an endpoint")


@dataclass(frozen=True)
class TriptychQuery:
    original: ImageTensor
    perturbed: ImageTensor
    diff_mask: ImageTensor
    task_attribute: str
    prompt_template_id: str = "relevance_default"

    def __post_init__(self):
        shapes = {self.original.shape[:2], self.perturbed.shape[:2],
                  self.diff_mask.shape[:2]}
        if len(shapes) != 1:
            raise ValidationError("triptych panels must share H x W")
        if self.diff_mask.shape[2] != 1:
            raise ValidationError("diff mask must be single-channel")


def build_diff_mask(original: ImageTensor, perturbed: ImageTensor,
                    threshold: float = DIFF_MASK_THRESHOLD) -> ImageTensor:
    """Soft change-localization mask.

    Per-pixel maximum absolute channel difference, normalized by its global
    maximum; normalized values below ``threshold`` are zeroed, the rest keep
    their magnitude.
    """
    if original.shape != perturbed.shape:
        raise ValidationError(
            f"shape mismatch: {original.shape} vs {perturbed.shape}"
        )
    diff = np.abs(original.data - perturbed.data).max(axis=2)
    peak = diff.max()
    if peak > 0:
        diff = diff / peak
    mask = np.where(diff >= threshold, diff, 0.0)
    return ImageTensor(mask[:, :, None], Colorspace.GRAY)


def load_prompt_template(template_id: str) -> str:
    """Load a prompt template by id from the package's prompt directory."""
    if not re.fullmatch(r"[A-Za-z0-9_\-]+", template_id):
        raise ValidationError(f"bad template id: {template_id!r}")
    ref = resources.files("featureprobe") / "prompts" / f"{template_id}.txt"
    try:
        return ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"unknown prompt template: {template_id!r}")


def render_prompt(template: str, attribute: str, answer_key: str) -> str:
    return (template.replace("{attribute}", attribute)
                    .replace("{answer_key}", answer_key))


def compose_triptych(query: TriptychQuery) -> np.ndarray:
    """Stack the three panels horizontally as one HxW*3x3 array in [0,1]."""
    mask_rgb = np.repeat(query.diff_mask.data, 3, axis=2)
    panels = [query.original.data, query.perturbed.data, mask_rgb]
    panels = [p if p.shape[2] == 3 else np.repeat(p, 3, axis=2) for p in panels]
    return np.hstack(panels)


def image_to_png_bytes(data: np.ndarray) -> bytes:
    arr = np.clip(np.asarray(data) * 255.0, 0, 255).round().astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _extract_json_object(text: str):
    """Pull the first JSON object out of free-form model text."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        pass
    if not isinstance(text, str):
        return None
    match = re.search(r"\{.*\}", text, flags=re.DOTALL)
    if match:
        try:
            return json.loads(match.group(0))
        except json.JSONDecodeError:
            return None
    return None


def parse_relevance_answer(text: str) -> JudgeVote:
    """Parse the relevance JSON contract: an ``answer`` field beginning with
    yes (attribute changed) or no (attribute unchanged)."""
    obj = _extract_json_object(text)
    if not isinstance(obj, dict):
        return JudgeVote.AMBIGUOUS
    answer = obj.get("answer")
    if not isinstance(answer, str):
        return JudgeVote.AMBIGUOUS
    lowered = answer.strip().lower()
    if lowered.startswith("yes"):
        return JudgeVote.RELEVANT_CHANGE
    if lowered.startswith("no"):
        return JudgeVote.NO_RELEVANT_CHANGE
    return JudgeVote.AMBIGUOUS


def parse_relabel_answer(text: str, answer_key: str) -> RelabelResult:
    """Parse the relabel JSON contract: ``{answer_key: Yes|No|Ambiguous}``.

    Falls back to the single key when the model dropped or renamed it.
    """
    obj = _extract_json_object(text)
    if not isinstance(obj, dict):
        return RelabelResult.AMBIGUOUS
    value = obj.get(answer_key)
    if value is None and len(obj) == 1:
        value = next(iter(obj.values()))
    if not isinstance(value, str):
        return RelabelResult.AMBIGUOUS
    lowered = value.strip().lower()
    if lowered.startswith("yes"):
        return RelabelResult.POSITIVE
    if lowered.startswith("no"):
        return RelabelResult.NEGATIVE
    return RelabelResult.AMBIGUOUS


class GroundTruthJudge:
    """Oracle backend for the synthetic domain.

    Relevance comes from the generator's channel map; relabeling from a
    label function of the style state. Context must therefore carry the
    probed ``channel`` (relevance) or the boundary ``state`` (relabel).
    """

    kind = JudgmentBackendKind.GROUND_TRUTH
    deterministic = True

    def __init__(self, gt_map, label_fn):
        self.gt_map = gt_map
        self.label_fn = label_fn

    def judge_relevance(self, query: TriptychQuery, context: dict) -> JudgeVote:
        channel = context.get("channel") if context else None
        if not isinstance(channel, ChannelRef):
            raise ValidationError("ground-truth relevance needs context['channel']")
        return (JudgeVote.RELEVANT_CHANGE
                if self.gt_map.is_task_relevant(channel)
                else JudgeVote.NO_RELEVANT_CHANGE)

    def relabel(self, image: ImageTensor, attribute: str,
                context: dict) -> RelabelResult:
        state = context.get("state") if context else None
        if state is None:
            raise ValidationError("ground-truth relabel needs context['state']")
        return (RelabelResult.POSITIVE if self.label_fn(state) == 1
                else RelabelResult.NEGATIVE)


class VlmHttpJudge:
    """Chat-style HTTP backend: one composed image plus a text prompt in,
    free text out. Transport failures are retried up to ``max_retries``
    times and then degrade to AMBIGUOUS; raw responses can be archived."""

    kind = JudgmentBackendKind.VLM_HTTP
    deterministic = False

    def __init__(self, config: JudgmentBackendConfig,
                 archive_dir=None, session=None):
        if config.kind is not JudgmentBackendKind.VLM_HTTP:
            raise ValidationError("config is not a VLM backend config")
        self.config = config
        self.archive_dir = Path(archive_dir) if archive_dir else None
        self.session = session or requests.Session()
        self._query_counter = 0

    def judge_relevance(self, query: TriptychQuery,
                        context: dict | None = None) -> JudgeVote:
        template = load_prompt_template(query.prompt_template_id)
        prompt = render_prompt(template, query.task_attribute,
                               self._answer_key(query.task_attribute))
        image = compose_triptych(query)
        text = self._ask(prompt, image, tag="relevance")
        if text is None:
            return JudgeVote.AMBIGUOUS
        return parse_relevance_answer(text)

    def relabel(self, image: ImageTensor, attribute: str,
                context: dict | None = None) -> RelabelResult:
        template = load_prompt_template(self.config.relabel_template)
        key = self._answer_key(attribute)
        prompt = render_prompt(template, attribute, key)
        text = self._ask(prompt, image.data, tag="relabel")
        if text is None:
            return RelabelResult.AMBIGUOUS
        return parse_relabel_answer(text, key)

    def _answer_key(self, attribute: str) -> str:
        return self.config.answer_key or attribute

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if not key:
                raise BackendError(
                    f"credential variable {self.config.api_key_env} is unset"
                )
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _ask(self, prompt: str, image_data: np.ndarray, tag: str) -> str | None:
        png = base64.b64encode(image_to_png_bytes(image_data)).decode("ascii")
        payload = {
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url",
                     "image_url": {"url": f"data:image/png;base64,{png}"}},
                ],
            }],
            "max_tokens": 256,
        }
        if self.config.model:
            payload["model"] = self.config.model
        last_error = None
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self.session.post(
                    self.config.endpoint, json=payload,
                    headers=self._headers(), timeout=self.config.timeout,
                )
                response.raise_for_status()
                text = self._extract_text(response.json())
                self._archive(tag, prompt, text, error=None)
                return text
            except (requests.RequestException, ValueError, KeyError) as exc:
                last_error = exc
                log.warning("VLM query failed (attempt %d/%d): %s",
                            attempt + 1, self.config.max_retries + 1, exc)
                if attempt < self.config.max_retries:
                    time.sleep(min(2.0 ** attempt, 8.0))
        self._archive(tag, prompt, None, error=str(last_error))
        return None

    @staticmethod
    def _extract_text(body: dict) -> str:
        choices = body.get("choices")
        if not choices:
            raise KeyError("response carries no choices")
        message = choices[0].get("message", {})
        content = message.get("content")
        if isinstance(content, list):
            content = "".join(
                part.get("text", "") for part in content
                if isinstance(part, dict)
            )
        if not isinstance(content, str):
            raise KeyError("response carries no text content")
        return content

    def _archive(self, tag: str, prompt: str, text: str | None,
                 error: str | None) -> None:
        if self.archive_dir is None:
            return
        self.archive_dir.mkdir(parents=True, exist_ok=True)
        record = {"tag": tag, "prompt": prompt, "response": text,
                  "error": error}
        path = self.archive_dir / f"{self._query_counter:06d}_{tag}.json"
        self._query_counter += 1
        dump_json(record, path)


def judge_pair(query: TriptychQuery, backend,
               context: dict | None = None) -> JudgeVote:
    """One relevance judgment for one counterfactual pair."""
    return backend.judge_relevance(query, context)


def attribute_channel(channel: ChannelRef, votes,
                      tie_rule: TieRule = TieRule.RELEVANT) -> FeatureVerdict:
    """Majority vote over the non-ambiguous judgments.

    A strict RELEVANT_CHANGE majority yields RELEVANT; a strict
    NO_RELEVANT_CHANGE majority yields SPURIOUS (the channel is already
    known to be influential); ties — including all-ambiguous — fall to the
    tie rule.
    """
    votes = tuple(votes)
    if not votes:
        raise ValidationError("attribute_channel needs at least one vote")
    n_rel = sum(1 for v in votes if v is JudgeVote.RELEVANT_CHANGE)
    n_spu = sum(1 for v in votes if v is JudgeVote.NO_RELEVANT_CHANGE)
    if n_rel > n_spu:
        label = FeatureLabel.RELEVANT
    elif n_spu > n_rel:
        label = FeatureLabel.SPURIOUS
    else:
        label = (FeatureLabel.RELEVANT if tie_rule is TieRule.RELEVANT
                 else FeatureLabel.SPURIOUS)
    return FeatureVerdict(channel=channel, label=label, votes=votes)


def relabel_boundary_image(image: ImageTensor, task_attribute: str, backend,
                           context: dict | None = None) -> RelabelResult:
    """Assign POSITIVE/NEGATIVE/AMBIGUOUS to a decision-boundary image.

    Spurious-channel images never pass through here — they keep their
    pre-perturbation labels by construction.
    """
    return backend.relabel(image, task_attribute, context)
