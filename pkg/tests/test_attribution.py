import json
import random

import numpy as np
import pytest
import requests
from hypothesis import given, settings, strategies as st

from featureprobe.attribution import (
    GroundTruthJudge,
    JudgmentBackendConfig,
    JudgmentBackendKind,
    TieRule,
    TriptychQuery,
    VlmHttpJudge,
    attribute_channel,
    build_diff_mask,
    compose_triptych,
    image_to_png_bytes,
    judge_pair,
    load_prompt_template,
    parse_relabel_answer,
    parse_relevance_answer,
    relabel_boundary_image,
    render_prompt,
)
from featureprobe.core import (
    ChannelRef,
    Colorspace,
    FeatureLabel,
    ImageTensor,
    JudgeVote,
    RelabelResult,
)
from featureprobe.errors import ValidationError


def _rgb(value, size=16):
    return ImageTensor(np.full((size, size, 3), float(value)))


def _query(original=None, perturbed=None):
    original = original or _rgb(0.3)
    perturbed = perturbed or _rgb(0.5)
    return TriptychQuery(original, perturbed,
                         build_diff_mask(original, perturbed),
                         task_attribute="object present")


# -- diff mask -----------------------------------------------------------------


def test_diff_mask_of_identical_images_is_zero():
    mask = build_diff_mask(_rgb(0.4), _rgb(0.4))
    assert mask.colorspace is Colorspace.GRAY
    assert mask.shape == (16, 16, 1)
    assert np.all(mask.data == 0.0)


def test_diff_mask_of_uniform_change_is_all_ones():
    mask = build_diff_mask(_rgb(0.3), _rgb(0.5))
    assert np.all(mask.data == 1.0)


def test_diff_mask_support_matches_changed_quadrant():
    base = np.full((16, 16, 3), 0.2)
    changed = base.copy()
    changed[:8, :8, :] += 0.4    # strong, localized change
    changed[8:, 8:, :] += 0.01   # faint change, below threshold after norm
    mask = build_diff_mask(ImageTensor(base), ImageTensor(changed))
    got = mask.data[:, :, 0] > 0
    expected = np.zeros((16, 16), dtype=bool)
    expected[:8, :8] = True
    assert np.array_equal(got, expected)
    assert np.all(mask.data[:8, :8, 0] == 1.0)


def test_diff_mask_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        build_diff_mask(_rgb(0.3, size=16), _rgb(0.3, size=12))


def test_triptych_validation():
    with pytest.raises(ValidationError):
        TriptychQuery(_rgb(0.1, 16), _rgb(0.1, 12),
                      build_diff_mask(_rgb(0.1), _rgb(0.2)), "attr")
    with pytest.raises(ValidationError):
        TriptychQuery(_rgb(0.1), _rgb(0.2), _rgb(0.3), "attr")  # 3-ch mask


def test_compose_triptych_stacks_panels_horizontally():
    panel = compose_triptych(_query())
    assert panel.shape == (16, 48, 3)
    assert np.all(panel[:, :16] == 0.3)
    assert np.all(panel[:, 16:32] == 0.5)
    assert np.all(panel[:, 32:] == 1.0)  # uniform change -> all-ones mask


def test_png_encoding():
    png = image_to_png_bytes(np.full((8, 8, 3), 0.5))
    assert png.startswith(b"\x89PNG")
    assert image_to_png_bytes(np.zeros((8, 8, 1))).startswith(b"\x89PNG")


# -- prompts and parsing -------------------------------------------------------


def test_prompt_templates_ship_with_placeholders():
    for template_id in ("relevance_default", "relabel_default"):
        text = load_prompt_template(template_id)
        assert "{attribute}" in text
    rendered = render_prompt("is {attribute}? reply {answer_key}",
                             "a cat", "cat")
    assert rendered == "is a cat? reply cat"


def test_prompt_template_id_validation():
    with pytest.raises(ValidationError):
        load_prompt_template("../../etc/passwd")
    with pytest.raises(ValidationError):
        load_prompt_template("no_such_template")


def test_parse_relevance_answer_contract():
    assert parse_relevance_answer(
        '{"answer": "no, eyeglasses remain the same."}'
    ) is JudgeVote.NO_RELEVANT_CHANGE
    assert parse_relevance_answer(
        '{"answer": "Yes: the glasses vanished."}'
    ) is JudgeVote.RELEVANT_CHANGE
    # JSON object embedded in chatter still parses
    assert parse_relevance_answer(
        'Sure thing! {"answer": "yes"} Let me know if you need more.'
    ) is JudgeVote.RELEVANT_CHANGE


def test_parse_relevance_answer_degrades_to_ambiguous():
    for text in ("", "not json at all", '{"verdict": "yes"}',
                 '{"answer": 42}', '{"answer": "maybe?"}', "{broken json"):
        assert parse_relevance_answer(text) is JudgeVote.AMBIGUOUS


def test_parse_relabel_answer_contract():
    assert parse_relabel_answer('{"glasses": "Ambiguous"}',
                                "glasses") is RelabelResult.AMBIGUOUS
    assert parse_relabel_answer('{"glasses": "Yes"}',
                                "glasses") is RelabelResult.POSITIVE
    assert parse_relabel_answer('{"glasses": "no, removed"}',
                                "glasses") is RelabelResult.NEGATIVE
    # single renamed key falls back
    assert parse_relabel_answer('{"wearing_glasses": "Yes"}',
                                "glasses") is RelabelResult.POSITIVE
    # multiple keys without the expected one stay ambiguous
    assert parse_relabel_answer('{"a": "Yes", "b": "No"}',
                                "glasses") is RelabelResult.AMBIGUOUS
    assert parse_relabel_answer("garbage", "glasses") is RelabelResult.AMBIGUOUS


# -- vote aggregation ----------------------------------------------------------


def test_attribute_channel_majorities():
    ref = ChannelRef(0, 0)
    rel, no = JudgeVote.RELEVANT_CHANGE, JudgeVote.NO_RELEVANT_CHANGE
    amb = JudgeVote.AMBIGUOUS
    assert attribute_channel(ref, [rel, rel, no]).label is FeatureLabel.RELEVANT
    assert attribute_channel(ref, [no, no, rel]).label is FeatureLabel.SPURIOUS
    # ambiguous votes do not count toward either side
    assert attribute_channel(ref, [no, amb, amb]).label is FeatureLabel.SPURIOUS


def test_attribute_channel_ties_follow_tie_rule():
    ref = ChannelRef(0, 0)
    rel, no = JudgeVote.RELEVANT_CHANGE, JudgeVote.NO_RELEVANT_CHANGE
    tied = [rel, no]
    assert attribute_channel(ref, tied).label is FeatureLabel.RELEVANT
    assert attribute_channel(
        ref, tied, tie_rule=TieRule.SPURIOUS
    ).label is FeatureLabel.SPURIOUS
    all_amb = [JudgeVote.AMBIGUOUS] * 3
    assert attribute_channel(ref, all_amb).label is FeatureLabel.RELEVANT
    assert attribute_channel(
        ref, all_amb, tie_rule=TieRule.SPURIOUS
    ).label is FeatureLabel.SPURIOUS


def test_attribute_channel_records_votes():
    votes = (JudgeVote.RELEVANT_CHANGE,) * 3
    verdict = attribute_channel(ChannelRef(1, 2), votes)
    assert verdict.votes == votes
    assert verdict.n_samples == 3
    with pytest.raises(ValidationError):
        attribute_channel(ChannelRef(0, 0), [])


@settings(max_examples=60)
@given(st.lists(st.sampled_from(list(JudgeVote)), min_size=1, max_size=9),
       st.integers(0, 2**32 - 1))
def test_attribute_channel_is_permutation_invariant(votes, seed):
    shuffled = list(votes)
    random.Random(seed).shuffle(shuffled)
    ref = ChannelRef(0, 0)
    assert (attribute_channel(ref, votes).label
            is attribute_channel(ref, shuffled).label)


# -- ground-truth backend ------------------------------------------------------


def test_ground_truth_judge_uses_channel_map(synth_gen):
    judge = GroundTruthJudge(synth_gen.ground_truth_map(),
                             synth_gen.ground_truth_label)
    q = _query()
    rel = judge.judge_relevance(q, {"channel": ChannelRef(0, 0)})
    assert rel is JudgeVote.RELEVANT_CHANGE
    spu = judge.judge_relevance(q, {"channel": ChannelRef(1, 0)})
    assert spu is JudgeVote.NO_RELEVANT_CHANGE
    assert judge_pair(q, judge, {"channel": ChannelRef(1, 0)}) is spu
    with pytest.raises(ValidationError):
        judge.judge_relevance(q, {})


def test_ground_truth_judge_relabels_from_state(synth_gen):
    judge = GroundTruthJudge(synth_gen.ground_truth_map(),
                             synth_gen.ground_truth_label)
    present = synth_gen.sample_style_state(0, 1.0)
    flipped = present.with_channel(
        ChannelRef(0, 0), -abs(present.get(ChannelRef(0, 0)))
    )
    image = synth_gen.synthesize(present)
    expected = (RelabelResult.POSITIVE
                if synth_gen.ground_truth_label(present) == 1
                else RelabelResult.NEGATIVE)
    assert relabel_boundary_image(image, "object", judge,
                                  {"state": present}) is expected
    assert judge.relabel(image, "object", {"state": flipped}) is (
        RelabelResult.NEGATIVE if expected is RelabelResult.POSITIVE
        else RelabelResult.POSITIVE
    )
    with pytest.raises(ValidationError):
        judge.relabel(image, "object", {})


# -- VLM backend (mocked transport) --------------------------------------------


class FakeResponse:
    def __init__(self, body):
        self.body = body

    def raise_for_status(self):
        pass

    def json(self):
        return self.body


class FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return FakeResponse(outcome)


def _chat_body(text):
    return {"choices": [{"message": {"content": text}}]}


def _vlm_config(**kw):
    return JudgmentBackendConfig(kind=JudgmentBackendKind.VLM_HTTP,
                                 endpoint="http://judge.local/v1/chat", **kw)


def test_config_validation():
    with pytest.raises(ValidationError):
        JudgmentBackendConfig(kind=JudgmentBackendKind.VLM_HTTP)
    with pytest.raises(ValidationError):
        _vlm_config(vote_samples=0)
    with pytest.raises(ValidationError):
        VlmHttpJudge(JudgmentBackendConfig(JudgmentBackendKind.GROUND_TRUTH))


def test_vlm_judge_parses_chat_response():
    session = FakeSession([_chat_body('{"answer": "yes, it changed"}')])
    judge = VlmHttpJudge(_vlm_config(model="judge-v1"), session=session)
    assert judge.judge_relevance(_query()) is JudgeVote.RELEVANT_CHANGE
    sent = session.requests[0]["json"]
    assert sent["model"] == "judge-v1"
    parts = sent["messages"][0]["content"]
    kinds = {p["type"] for p in parts}
    assert kinds == {"text", "image_url"}
    image_part = next(p for p in parts if p["type"] == "image_url")
    assert image_part["image_url"]["url"].startswith("data:image/png;base64,")


def test_vlm_judge_handles_content_part_lists():
    body = _chat_body([{"type": "text", "text": '{"answer": "no change"}'}])
    judge = VlmHttpJudge(_vlm_config(), session=FakeSession([body]))
    assert judge.judge_relevance(_query()) is JudgeVote.NO_RELEVANT_CHANGE


def test_vlm_judge_retries_then_degrades_to_ambiguous(monkeypatch, tmp_path):
    monkeypatch.setattr("featureprobe.attribution.time.sleep", lambda s: None)
    session = FakeSession([requests.ConnectionError("down")] * 3)
    judge = VlmHttpJudge(_vlm_config(max_retries=2),
                         archive_dir=tmp_path, session=session)
    assert judge.judge_relevance(_query()) is JudgeVote.AMBIGUOUS
    assert len(session.requests) == 3
    record = json.loads((tmp_path / "000000_relevance.json").read_text())
    assert record["response"] is None
    assert "down" in record["error"]


def test_vlm_judge_recovers_on_retry(monkeypatch):
    monkeypatch.setattr("featureprobe.attribution.time.sleep", lambda s: None)
    session = FakeSession([requests.ConnectionError("blip"),
                           _chat_body('{"answer": "no"}')])
    judge = VlmHttpJudge(_vlm_config(max_retries=2), session=session)
    assert judge.judge_relevance(_query()) is JudgeVote.NO_RELEVANT_CHANGE
    assert len(session.requests) == 2


def test_vlm_judge_archives_successful_exchanges(tmp_path):
    session = FakeSession([_chat_body('{"glasses": "Yes"}')])
    judge = VlmHttpJudge(_vlm_config(answer_key="glasses"),
                         archive_dir=tmp_path, session=session)
    got = judge.relabel(_rgb(0.5), "glasses", None)
    assert got is RelabelResult.POSITIVE
    record = json.loads((tmp_path / "000000_relabel.json").read_text())
    assert record["tag"] == "relabel"
    assert record["response"] == '{"glasses": "Yes"}'
    assert record["error"] is None


def test_vlm_judge_requires_configured_credential(monkeypatch):
    from featureprobe.errors import BackendError

    monkeypatch.delenv("JUDGE_KEY", raising=False)
    session = FakeSession([_chat_body('{"answer": "yes"}')] * 3)
    judge = VlmHttpJudge(_vlm_config(api_key_env="JUDGE_KEY", max_retries=0),
                         session=session)
    # a missing credential is a configuration error, not a transport blip
    with pytest.raises(BackendError):
        judge.judge_relevance(_query())
    assert session.requests == []
    monkeypatch.setenv("JUDGE_KEY", "secret-token")
    assert judge.judge_relevance(_query()) is JudgeVote.RELEVANT_CHANGE
    headers = session.requests[0]["headers"]
    assert headers["Authorization"] == "Bearer secret-token"
