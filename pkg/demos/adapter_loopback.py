"""Drive real backends through the adapter wire protocol, in-process.

The pipeline talks to external generators and models over a
length-prefixed JSON+binary protocol on stdin/stdout, so backends can live
in any process, venv, or language. This demo wires both services to the
client through socketpairs inside one process: the same bytes flow as in
production, with no subprocess to manage.

It shows the three core guarantees of the protocol layer:
  * style states round-trip bit-exactly (float64), images as float32;
  * remote calls (synthesize, forward, jvp-backed composite gradients)
    agree with calling the local objects directly;
  * backend faults arrive as typed errors, and the connection survives.

Run:  python3 demos/adapter_loopback.py
"""

import socket
import threading

import numpy as np

from featureprobe import BackendError, SyntheticStyleGenerator
from featureprobe.adapter import (
    AdapterGenerator,
    AdapterSUT,
    GeneratorService,
    SutService,
)
from featureprobe.scenario import ScenarioSpec, build_scenario


def serve(service):
    """Run a service on one end of a socketpair; return client files."""
    client, server = socket.socketpair()
    rfile, wfile = server.makefile("rb"), server.makefile("wb")
    thread = threading.Thread(target=service.serve, args=(rfile, wfile),
                              daemon=True)
    thread.start()
    return client.makefile("rb"), client.makefile("wb")


def main():
    print("building scenario backends ...")
    scenario = build_scenario(ScenarioSpec(spurious_strength=1.0,
                                           n_train=400, image_size=32))
    local_gen, local_sut = scenario.generator, scenario.sut

    remote_gen = AdapterGenerator(*serve(GeneratorService(local_gen)))
    remote_sut = AdapterSUT(*serve(SutService(local_sut)))

    print(f"remote topology: widths {remote_gen.topology.layer_widths}, "
          f"differentiable={remote_gen.differentiable}")
    caps = remote_sut.capabilities()
    print(f"remote SUT caps: task={caps.task_kind.value}, "
          f"differentiable={caps.differentiable}\n")

    state = remote_gen.sample_style_state(seed=11, truncation=0.9)
    local_state = local_gen.sample_style_state(seed=11, truncation=0.9)
    exact = all(np.array_equal(a, b) for a, b
                in zip(state.vectors, local_state.vectors))
    print(f"sampled style state over the wire, bit-exact: {exact}")

    remote_image = remote_gen.synthesize(state)
    local_image = local_gen.synthesize(state)
    err = float(np.max(np.abs(remote_image.data - local_image.data)))
    print(f"synthesize: max |remote - local| = {err:.2e} "
          f"(float32 wire precision)")

    y_remote = remote_sut.forward(remote_image).target_value
    y_local = local_sut.forward(local_image).target_value
    print(f"forward: remote y = {y_remote:+.6f}, local y = {y_local:+.6f}")

    g_remote = remote_gen.gradient_of_composite(state, remote_sut, 0)
    g_local = local_gen.gradient_of_composite(local_state, local_sut, 0)
    gerr = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
               for a, b in zip(g_remote, g_local))
    print(f"composite gradient via remote jvp: max error = {gerr:.2e}")

    print("\nfault handling:")
    from featureprobe import ImageTensor
    wrong_shape = ImageTensor.from_raw(np.zeros((8, 8, 3)))
    try:
        remote_sut.forward(wrong_shape)  # SUT was trained on 32x32 inputs
    except BackendError as exc:
        print(f"  bad request -> BackendError(code={exc.code}): {exc}")
    y_again = remote_sut.forward(remote_image).target_value
    print(f"  connection survives the fault: forward again -> {y_again:+.6f}")

    remote_gen.close()
    remote_sut.close()
    print("\nservices closed cleanly.")


if __name__ == "__main__":
    main()
