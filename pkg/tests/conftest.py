import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qasplitfed import nn

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_unet(size=8, filters=(2, 3), classes=3, batchnorm=True):
    return nn.unet((1, size, size), filters, None, classes, batchnorm=batchnorm)


def random_batch(rng, network, batch=2, classes=None):
    c, h, w = network.input_shape
    x = rng.random((batch, c, h, w))
    k = classes or network.num_classes
    y = rng.integers(0, k, size=(batch, h, w))
    return x, y


def valid_partitions(network):
    from qasplitfed import split
    from qasplitfed.errors import ConfigurationError
    out = []
    for a in range(1, len(network)):
        for b in range(a, len(network)):
            try:
                out.append(split.SplitPartition(network, a, b))
            except ConfigurationError:
                pass
    return out


def split_step(partition, client_params, server_params, x, y, round=(0, 0, 0, 1)):
    """One forward/backward exchange through the split pipeline.

    Returns ``(loss, merged_grads, messages)`` with grads in network order.
    """
    from qasplitfed import split
    from qasplitfed.params import ParamVector
    fe, be = partition.split_params(client_params)
    m1, c_fe = split.client_forward_fe(partition, fe, x, split.Round(*round))
    m2, c_srv = split.server_forward(partition, server_params, m1)
    loss, pred, per_sample, c_be = split.client_forward_be(partition, be, m2, y)
    g_be, m3 = split.client_backward_be(partition, be, c_be)
    g_srv, m4 = split.server_backward(partition, server_params, c_srv, m3)
    g_fe = split.client_backward_fe(partition, fe, c_fe, m4)
    grads = ParamVector.merge(g_fe, g_srv, g_be, order=partition.network.param_names())
    return loss, grads, (m1, m2, m3, m4)
