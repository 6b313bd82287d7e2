"""Wire-protocol tests: adapter clients and services over a socketpair."""

import contextlib
import io
import socket
import struct
import threading

import numpy as np
import pytest

from featureprobe.adapter import (
    AdapterGenerator,
    AdapterSUT,
    GeneratorService,
    SutService,
    read_frame,
    write_frame,
)
from featureprobe.core import (
    Colorspace,
    ImageTensor,
    LogitVector,
    encode_tensor,
    serialize_style_state,
)
from featureprobe.errors import (
    BackendError,
    DecodeError,
    NotDifferentiableError,
)
from featureprobe.generator import SyntheticStyleGenerator
from featureprobe.sut import (
    LinearMeanSUT,
    LogisticPixelSUT,
    SoftmaxLinearSUT,
    SUTCapabilities,
    TaskKind,
)

SIZE = 16
SYNTH = SyntheticStyleGenerator(image_size=SIZE)


@contextlib.contextmanager
def _served(service):
    """Run ``service.serve`` on one end of a socketpair; yield client files."""
    left, right = socket.socketpair()
    thread = threading.Thread(
        target=service.serve,
        args=(right.makefile("rb"), right.makefile("wb")),
        daemon=True,
    )
    thread.start()
    rfile, wfile = left.makefile("rb"), left.makefile("wb")
    try:
        yield rfile, wfile, thread
    finally:
        with contextlib.suppress(OSError):
            wfile.close()
        with contextlib.suppress(OSError):
            rfile.close()
        left.close()
        thread.join(timeout=5.0)
        right.close()


def _raw_server(handler):
    """Run a hand-rolled handler on a socketpair; fully closes its end after."""
    left, right = socket.socketpair()

    def run():
        rfile, wfile = right.makefile("rb"), right.makefile("wb")
        try:
            handler(rfile, wfile)
        finally:
            with contextlib.suppress(OSError):
                wfile.close()
            with contextlib.suppress(OSError):
                rfile.close()
            right.close()

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    return left.makefile("rb"), left.makefile("wb"), left, thread


def _f32(arr):
    """Round like the wire does: tensors travel as little-endian float32."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def _test_image(shape=(SIZE, SIZE, 3)):
    """Deterministic image whose pixels are exactly representable in f32."""
    flat = np.linspace(0.0, 1.0, num=int(np.prod(shape)), dtype=np.float32)
    colorspace = Colorspace.GRAY if shape[-1] == 1 else Colorspace.RGB
    return ImageTensor.from_raw(
        flat.astype(np.float64).reshape(shape), colorspace
    )


class _OpaqueGenerator:
    """Forwarding proxy that hides the inner backend's Jacobian support."""

    differentiable = False

    def __init__(self, inner):
        self._inner = inner

    @property
    def topology(self):
        return self._inner.topology

    def mean_style(self):
        return self._inner.mean_style()

    def style_std(self):
        return self._inner.style_std()

    def sample_style_state(self, seed, truncation=1.0):
        return self._inner.sample_style_state(seed, truncation)

    def synthesize(self, state):
        return self._inner.synthesize(state)


class _OpaqueSUT:
    """Single-logit SUT without gradient support."""

    def capabilities(self):
        return SUTCapabilities(False, TaskKind.BINARY, 1)

    def forward(self, image):
        return LogitVector(np.array([0.25]))

    def grad_input(self, image, target):
        raise NotDifferentiableError("no gradients here")


class _LyingSUT(_OpaqueSUT):
    """Claims gradient support in caps but refuses at call time, so the
    refusal travels the wire as an error frame instead of failing locally."""

    def capabilities(self):
        return SUTCapabilities(True, TaskKind.BINARY, 1)


class _FussySUT:
    """Raises once on forward, then behaves; the service must survive it."""

    def __init__(self):
        self.fail_next = True

    def capabilities(self):
        return SUTCapabilities(True, TaskKind.BINARY, 1)

    def forward(self, image):
        if self.fail_next:
            self.fail_next = False
            raise RuntimeError("kaboom")
        return LogitVector(np.array([1.5]))

    def grad_input(self, image, target):
        return np.zeros(image.shape)


# -- generator client/service --------------------------------------------


def test_generator_topology_round_trip():
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, _):
        remote = AdapterGenerator(rfile, wfile)
        assert remote.topology == SYNTH.topology
        assert remote.differentiable is True
        for got, want in zip(remote.mean_style(), SYNTH.mean_style()):
            np.testing.assert_array_equal(got, want)
        assert remote.style_std() == pytest.approx(SYNTH.style_std())
        remote.close()


def test_generator_sample_round_trips_bit_exact():
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, _):
        remote = AdapterGenerator(rfile, wfile)
        for seed, truncation in [(7, 1.0), (5, 0.5), (0, 0.25)]:
            got = remote.sample_style_state(seed, truncation)
            want = SYNTH.sample_style_state(seed, truncation)
            assert got.seed == want.seed
            assert got.truncation == want.truncation
            for g, w in zip(got.vectors, want.vectors):
                np.testing.assert_array_equal(g, w)
        remote.close()


def test_generator_synthesize_matches_local_at_wire_precision():
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, _):
        remote = AdapterGenerator(rfile, wfile)
        state = SYNTH.sample_style_state(3)
        image = remote.synthesize(state)
        assert image.colorspace is Colorspace.RGB
        assert image.shape == (SIZE, SIZE, 3)
        np.testing.assert_array_equal(
            image.data, _f32(SYNTH.synthesize(state).data)
        )
        remote.close()


def test_generator_jvp_matches_local_gradient():
    sut = LinearMeanSUT(w=3.0, b=-1.0)
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, _):
        remote = AdapterGenerator(rfile, wfile)
        state = SYNTH.sample_style_state(11)
        got = remote.gradient_of_composite(state, sut, target=0)
        want = SYNTH.gradient_of_composite(state, sut, target=0)
        assert len(got) == len(SYNTH.topology.layer_widths)
        for layer_got, layer_want, width in zip(
            got, want, SYNTH.topology.layer_widths
        ):
            assert layer_got.shape == (width,)
            np.testing.assert_allclose(
                layer_got, layer_want, rtol=1e-5, atol=1e-9
            )
        remote.close()


def test_generator_close_stops_the_service():
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, thread):
        remote = AdapterGenerator(rfile, wfile)
        remote.close()
        thread.join(timeout=5.0)
        assert not thread.is_alive()


def test_non_differentiable_generator_refuses_client_side():
    with _served(GeneratorService(_OpaqueGenerator(SYNTH))) as (
        rfile, wfile, _,
    ):
        remote = AdapterGenerator(rfile, wfile)
        assert remote.differentiable is False
        with pytest.raises(NotDifferentiableError, match="jvp"):
            remote.gradient_of_composite(
                SYNTH.sample_style_state(0), LinearMeanSUT(), target=0
            )
        remote.close()


def test_jvp_on_non_differentiable_backend_sends_error_frame():
    with _served(GeneratorService(_OpaqueGenerator(SYNTH))) as (
        rfile, wfile, _,
    ):
        state = SYNTH.sample_style_state(0)
        cotangent = np.zeros(SYNTH.topology.image_shape)
        write_frame(
            wfile,
            {"op": "jvp", "id": 42},
            blocks=[
                ("style", serialize_style_state(state)),
                ("tensor", encode_tensor(cotangent)),
            ],
        )
        frame, payloads = read_frame(rfile)
        assert frame["id"] == 42
        assert frame["ok"] is False
        assert frame["error"]["code"] == "NOT_DIFFERENTIABLE"
        assert payloads == []


def test_unknown_op_answers_unsupported_and_service_survives():
    with _served(GeneratorService(SYNTH)) as (rfile, wfile, _):
        write_frame(wfile, {"op": "teleport", "id": 1})
        frame, _ = read_frame(rfile)
        assert frame["ok"] is False
        assert frame["error"]["code"] == "UNSUPPORTED"
        assert "teleport" in frame["error"]["message"]
        # The refusal must not kill the connection.
        write_frame(wfile, {"op": "topology", "id": 2})
        frame, _ = read_frame(rfile)
        assert frame["ok"] is True
        assert frame["id"] == 2


# -- SUT client/service ----------------------------------------------------


def test_sut_capabilities_round_trip():
    sut = LinearMeanSUT(w=3.0, b=-1.0)
    with _served(SutService(sut)) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        assert remote.capabilities() == sut.capabilities()
        remote.close()


def test_sut_capabilities_round_trip_detection_target():
    class _Det(_OpaqueSUT):
        def capabilities(self):
            return SUTCapabilities(
                differentiable=False,
                task_kind=TaskKind.DETECTION,
                num_classes=1,
                target_class=4,
                concurrency_safe=True,
            )

    with _served(SutService(_Det())) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        caps = remote.capabilities()
        assert caps.task_kind is TaskKind.DETECTION
        assert caps.target_class == 4
        remote.close()


def test_sut_forward_round_trips_exactly():
    sut = LinearMeanSUT(w=3.0, b=-1.0)
    image = _test_image()
    with _served(SutService(sut)) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        got = remote.forward(image)
        # Pixels are f32-exact, so the wire adds no rounding at all.
        np.testing.assert_array_equal(got.values, sut.forward(image).values)
        remote.close()


def test_sut_forward_multiclass_logit_vector():
    shape = (4, 4, 1)
    rng = np.random.default_rng(0)
    sut = SoftmaxLinearSUT(
        weight=rng.normal(size=(3, 16)), bias=np.zeros(3), input_shape=shape
    )
    image = _test_image(shape)
    with _served(SutService(sut)) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        got = remote.forward(image)
        assert got.values.shape == (3,)
        np.testing.assert_array_equal(got.values, sut.forward(image).values)
        remote.close()


def test_sut_grad_input_round_trips_at_wire_precision():
    shape = (4, 4, 1)
    rng = np.random.default_rng(1)
    weights = rng.normal(size=shape)
    sut = LogisticPixelSUT(weights, bias=0.0, mean_image=np.zeros(shape))
    image = _test_image(shape)
    with _served(SutService(sut)) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        got = remote.grad_input(image, target=0)
        np.testing.assert_array_equal(got, _f32(weights))
        remote.close()


def test_sut_grad_input_refused_client_side_when_caps_say_no():
    with _served(SutService(_OpaqueSUT())) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        with pytest.raises(NotDifferentiableError):
            remote.grad_input(_test_image(), target=0)
        remote.close()


def test_sut_not_differentiable_error_frame_maps_to_exception():
    with _served(SutService(_LyingSUT())) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        with pytest.raises(NotDifferentiableError, match="no gradients here"):
            remote.grad_input(_test_image(), target=0)
        # The connection survives the refusal.
        assert remote.forward(_test_image()).values[0] == 0.25
        remote.close()


def test_sut_backend_exception_becomes_backend_error():
    with _served(SutService(_FussySUT())) as (rfile, wfile, _):
        remote = AdapterSUT(rfile, wfile)
        with pytest.raises(BackendError, match="kaboom") as excinfo:
            remote.forward(_test_image())
        assert not isinstance(excinfo.value, NotDifferentiableError)
        assert excinfo.value.code == "BACKEND_ERROR"
        # The service answered instead of dying; the next call succeeds.
        assert remote.forward(_test_image()).values[0] == 1.5
        remote.close()


# -- transport hygiene ------------------------------------------------------


def test_response_id_mismatch_is_rejected():
    def bad_server(rfile, wfile):
        read_frame(rfile)
        write_frame(wfile, {"id": -7, "ok": True})

    rfile, wfile, sock, thread = _raw_server(bad_server)
    try:
        with pytest.raises(BackendError, match="response id"):
            AdapterSUT(rfile, wfile)
    finally:
        sock.close()
        thread.join(timeout=5.0)


def test_server_hangup_is_a_backend_error():
    def mute_server(rfile, wfile):
        read_frame(rfile)  # swallow the request, then hang up

    rfile, wfile, sock, thread = _raw_server(mute_server)
    try:
        with pytest.raises(BackendError, match="transport"):
            AdapterSUT(rfile, wfile)
    finally:
        sock.close()
        thread.join(timeout=5.0)


# -- frame codec ------------------------------------------------------------


def test_frame_codec_round_trip_with_blocks():
    buf = io.BytesIO()
    write_frame(buf, {"op": "x", "id": 9},
                blocks=[("tensor", b"alpha"), ("style", b"bravo")])
    buf.seek(0)
    frame, payloads = read_frame(buf)
    assert frame["op"] == "x"
    assert frame["id"] == 9
    assert frame["blocks"] == ["tensor", "style"]
    assert payloads == [b"alpha", b"bravo"]


def test_frame_codec_no_blocks():
    buf = io.BytesIO()
    write_frame(buf, {"op": "close", "id": 1})
    buf.seek(0)
    frame, payloads = read_frame(buf)
    assert frame["blocks"] == []
    assert payloads == []


def test_read_frame_on_empty_stream_raises_eof():
    with pytest.raises(EOFError):
        read_frame(io.BytesIO())


def test_oversize_chunk_is_rejected():
    buf = io.BytesIO(struct.pack("<I", (1 << 30) + 1))
    with pytest.raises(DecodeError, match="exceeds limit"):
        read_frame(buf)


def test_truncated_block_is_rejected():
    buf = io.BytesIO()
    write_frame(buf, {"op": "x", "id": 1}, blocks=[("tensor", b"abcdef")])
    clipped = buf.getvalue()[:-3]
    with pytest.raises(DecodeError, match="mid-message"):
        read_frame(io.BytesIO(clipped))
