import numpy as np
import pytest
from hypothesis import given, strategies as st

from featureprobe.core import (
    ChannelRef,
    Colorspace,
    FeatureLabel,
    FeatureVerdict,
    ImageTensor,
    JudgeVote,
    LogitVector,
    ProbeResult,
    ProbeVerdict,
    channel_ref_from_json,
    channel_ref_to_json,
    decode_tensor,
    deserialize_style_state,
    dump_json,
    encode_tensor,
    feature_verdict_from_json,
    feature_verdict_to_json,
    logit_margin,
    logit_vector_from_json,
    logit_vector_to_json,
    predicted_label,
    probe_result_to_json,
    serialize_style_state,
    StyleState,
)
from featureprobe.errors import DecodeError, ValidationError


# -- ChannelRef ----------------------------------------------------------


def test_channel_ref_key_round_trip():
    ref = ChannelRef(3, 17)
    assert ref.key() == "3:17"
    assert ChannelRef.from_key("3:17") == ref


def test_channel_ref_rejects_negative():
    with pytest.raises(ValidationError):
        ChannelRef(-1, 0)
    with pytest.raises(ValidationError):
        ChannelRef(0, -2)


def test_channel_ref_ordering_is_layer_major():
    refs = [ChannelRef(1, 0), ChannelRef(0, 5), ChannelRef(0, 2)]
    assert sorted(refs) == [ChannelRef(0, 2), ChannelRef(0, 5), ChannelRef(1, 0)]


# -- StyleState ----------------------------------------------------------


def _state(vectors, seed=0, truncation=1.0):
    return StyleState(tuple(np.asarray(v, dtype=float) for v in vectors),
                      seed=seed, truncation=truncation)


def test_style_state_layer_widths_and_get():
    s = _state([[1.0, 2.0], [3.0]])
    assert s.layer_widths == (2, 1)
    assert s.get(ChannelRef(0, 1)) == 2.0
    assert s.get(ChannelRef(1, 0)) == 3.0


def test_style_state_vectors_are_frozen():
    s = _state([[1.0, 2.0]])
    with pytest.raises(ValueError):
        s.vectors[0][0] = 9.0


def test_with_channel_touches_exactly_one_coordinate():
    s = _state([[1.0, 2.0], [3.0, 4.0, 5.0]], seed=11, truncation=0.7)
    out = s.with_channel(ChannelRef(1, 2), -2.5)
    assert out.get(ChannelRef(1, 2)) == 2.5
    # every other coordinate is bit-identical
    flat_in = np.concatenate(s.vectors)
    flat_out = np.concatenate(out.vectors)
    changed = flat_in != flat_out
    assert changed.sum() == 1
    assert out.seed == 11 and out.truncation == 0.7


def test_style_state_validation():
    with pytest.raises(ValidationError):
        StyleState((), seed=0)
    with pytest.raises(ValidationError):
        _state([[np.nan]])
    with pytest.raises(ValidationError):
        _state([[1.0]], truncation=0.0)
    with pytest.raises(ValidationError):
        _state([[1.0]], truncation=1.5)
    with pytest.raises(ValidationError):
        _state([[1.0]]).get(ChannelRef(2, 0))


# -- ImageTensor / LogitVector -------------------------------------------


def test_image_tensor_rejects_out_of_range():
    with pytest.raises(ValidationError):
        ImageTensor(np.full((2, 2, 3), 1.5))


def test_image_tensor_from_raw_clamps():
    img = ImageTensor.from_raw(np.full((2, 2, 3), 1.5))
    assert img.data.max() == 1.0


def test_image_tensor_channel_count_matches_colorspace():
    with pytest.raises(ValidationError):
        ImageTensor(np.zeros((2, 2, 1)), Colorspace.RGB)
    gray = ImageTensor(np.zeros((2, 2, 1)), Colorspace.GRAY)
    assert gray.shape == (2, 2, 1)


def test_logit_vector_target_bounds():
    lv = LogitVector(np.array([0.1, 0.9]), target_index=1)
    assert lv.k == 2 and lv.target_value == 0.9
    with pytest.raises(ValidationError):
        LogitVector(np.array([0.1]), target_index=1)


# -- predicted_label / logit_margin --------------------------------------


def test_predicted_label_binary():
    assert predicted_label(LogitVector(np.array([0.3]))) == 1
    assert predicted_label(LogitVector(np.array([0.0]))) == 0
    assert predicted_label(LogitVector(np.array([-0.3]))) == 0


def test_predicted_label_multiclass_tie_breaks_low():
    assert predicted_label(LogitVector(np.array([1.0, 3.0, 3.0]))) == 1


def test_logit_margin():
    assert logit_margin(LogitVector(np.array([-2.5]))) == 2.5
    assert logit_margin(LogitVector(np.array([1.0, 4.0, 2.5]))) == 1.5


# integer-valued logits and power-of-two-ish scales keep the affine map
# exact, so ties stay ties (arbitrary floats can collapse tiny gaps under
# rounding, which genuinely changes the argmax)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=6),
       st.sampled_from([0.5, 1.0, 2.0, 4.0]))
def test_predicted_label_invariant_under_positive_affine(vals, scale):
    base = LogitVector(np.asarray(vals, dtype=float))
    mapped = LogitVector(np.asarray(vals, dtype=float) * scale + 1.7)
    assert predicted_label(base) == predicted_label(mapped)


# -- ProbeResult / FeatureVerdict ----------------------------------------


def _image(val=0.5):
    return ImageTensor(np.full((2, 2, 3), val))


def test_probe_result_misclassified_requires_flip():
    with pytest.raises(ValidationError):
        ProbeResult(
            channel=ChannelRef(0, 0), delta=-10.0,
            original_image=_image(), perturbed_image=_image(0.4),
            original_logits=LogitVector(np.array([1.0])),
            perturbed_logits=LogitVector(np.array([0.5])),
            verdict=ProbeVerdict.MISCLASSIFIED,
        )


def test_feature_verdict_counts_votes():
    v = FeatureVerdict(ChannelRef(0, 0), FeatureLabel.RELEVANT,
                       votes=(JudgeVote.RELEVANT_CHANGE,) * 3)
    assert v.n_samples == 3
    with pytest.raises(ValidationError):
        FeatureVerdict(ChannelRef(0, 0), FeatureLabel.RELEVANT,
                       votes=(JudgeVote.RELEVANT_CHANGE,), n_samples=2)


# -- JSON schemas ---------------------------------------------------------


def test_channel_ref_json_round_trip():
    ref = ChannelRef(2, 9)
    obj = channel_ref_to_json(ref)
    assert obj == {"layer_id": 2, "channel": 9}
    assert channel_ref_from_json(obj) == ref


def test_logit_vector_json_round_trip():
    lv = LogitVector(np.array([0.25, -1.5]), target_index=1)
    back = logit_vector_from_json(logit_vector_to_json(lv))
    assert np.array_equal(back.values, lv.values)
    assert back.target_index == 1


def test_probe_result_json_schema():
    probe = ProbeResult(
        channel=ChannelRef(1, 2), delta=-10.0,
        original_image=_image(), perturbed_image=_image(0.4),
        original_logits=LogitVector(np.array([1.0])),
        perturbed_logits=LogitVector(np.array([0.2])),
        verdict=ProbeVerdict.INFLUENTIAL, refined_delta=None,
    )
    obj = probe_result_to_json(probe, "orig.png", "pert.png")
    assert obj["channel"] == {"layer_id": 1, "channel": 2}
    assert obj["verdict"] == "influential"
    assert obj["original_image"] == "orig.png"
    assert obj["refined_delta"] is None


def test_feature_verdict_json_round_trip():
    v = FeatureVerdict(ChannelRef(0, 3), FeatureLabel.SPURIOUS,
                       votes=(JudgeVote.NO_RELEVANT_CHANGE,
                              JudgeVote.AMBIGUOUS,
                              JudgeVote.NO_RELEVANT_CHANGE))
    assert feature_verdict_from_json(feature_verdict_to_json(v)) == v


def test_dump_json_is_canonical(tmp_path):
    text = dump_json({"b": 1, "a": [1, 2]})
    assert text == '{"a":[1,2],"b":1}'
    path = tmp_path / "x.json"
    dump_json({"z": 0, "a": 1}, path)
    assert path.read_text() == '{"a":1,"z":0}\n'


# -- tensor interchange ---------------------------------------------------


def test_tensor_round_trip_preserves_float32_values():
    arr = np.array([[0.5, -1.25], [3.0, 0.0]])
    out, offset = decode_tensor(encode_tensor(arr))
    assert np.array_equal(out, arr)
    assert offset == len(encode_tensor(arr))


def test_tensor_decode_rejects_corruption():
    buf = encode_tensor(np.ones(3))
    with pytest.raises(DecodeError):
        decode_tensor(b"XXXXXXXX" + buf[8:])
    with pytest.raises(DecodeError):
        decode_tensor(buf[:-4])  # truncated payload


@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=20))
def test_tensor_round_trip_hypothesis(values):
    arr = np.asarray(values, dtype=np.float32).astype(np.float64)
    out, _ = decode_tensor(encode_tensor(arr))
    assert np.array_equal(out, arr)


# -- StyleState binary serialization --------------------------------------


def test_style_state_serialization_bit_exact():
    s = _state([[1.0, -2.5e-300], [np.pi]], seed=-3, truncation=0.25)
    back = deserialize_style_state(serialize_style_state(s))
    assert back.seed == -3 and back.truncation == 0.25
    for a, b in zip(s.vectors, back.vectors):
        assert np.array_equal(a, b)


def test_style_state_deserialize_rejects_corruption():
    buf = serialize_style_state(_state([[1.0]]))
    with pytest.raises(DecodeError):
        deserialize_style_state(b"BADMAGIC" + buf[8:])
    with pytest.raises(DecodeError):
        deserialize_style_state(buf[:-3])


@given(
    st.lists(
        st.lists(st.floats(-1e12, 1e12, allow_nan=False), min_size=1,
                 max_size=5),
        min_size=1, max_size=4,
    ),
    st.integers(-2**40, 2**40),
)
def test_style_state_serialization_hypothesis(layers, seed):
    s = _state(layers, seed=seed, truncation=0.5)
    back = deserialize_style_state(serialize_style_state(s))
    assert back.layer_widths == s.layer_widths
    for a, b in zip(s.vectors, back.vectors):
        assert np.array_equal(a, b)
