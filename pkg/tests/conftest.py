import numpy as np
import pytest

from glint.model_ir import Operator, build_model
from glint.storage import make_graph


@pytest.fixture
def toy_graph():
    """Six nodes A..F = 0..5; A<-{C,D}, B<-{C,D}, C<-{E,F}; D,E,F isolated."""
    return make_graph(6, {0: [2, 3], 1: [2, 3], 2: [4, 5]})


def identity_conv(op_id, inputs, dim):
    return Operator(op_id, "ConvMean", inputs,
                    {"weight": np.eye(dim, dtype=np.float32),
                     "bias": np.zeros(dim, np.float32)})


def conv(op_id, inputs, dim_out, dim_in, seed=0):
    rng = np.random.default_rng([seed, hash(op_id) % (2 ** 31)])
    return Operator(op_id, "ConvMean", inputs,
                    {"weight": rng.normal(0, 0.5, (dim_out, dim_in)).astype(np.float32),
                     "bias": rng.normal(0, 0.1, dim_out).astype(np.float32)})


def fig_a_model(dim=2):
    """Diamond: Input -> Conv1 -> {Conv2, Conv3} -> Concat -> Output."""
    ops = {
        "x": Operator("x", "Input", ()),
        "conv1": identity_conv("conv1", ("x",), dim),
        "conv2": identity_conv("conv2", ("conv1",), dim),
        "conv3": identity_conv("conv3", ("conv1",), dim),
        "cat": Operator("cat", "Concat", ("conv2", "conv3")),
        "out": Operator("out", "Output", ("cat",)),
    }
    return build_model(ops, dim, "out")


def fig_b_model(dim=2):
    """Conv1 -> parallel ReLU and Norm -> both consumed by the layer-2 block.

    Convs take one embedding input, so the figure's two-tensor conv is a
    same-layer pair of convs whose outputs are concatenated.
    """
    ops = {
        "x": Operator("x", "Input", ()),
        "conv1": identity_conv("conv1", ("x",), dim),
        "relu": Operator("relu", "ReLU", ("conv1",)),
        "norm": Operator("norm", "Norm", ("conv1",)),
        "conv2a": identity_conv("conv2a", ("relu",), dim),
        "conv2b": identity_conv("conv2b", ("norm",), dim),
        "cat": Operator("cat", "Concat", ("conv2a", "conv2b")),
        "out": Operator("out", "Output", ("cat",)),
    }
    return build_model(ops, dim, "out")


def fig_c_model(dim=2):
    """Linear chain Conv1 -> ReLU -> Conv2."""
    ops = {
        "x": Operator("x", "Input", ()),
        "conv1": identity_conv("conv1", ("x",), dim),
        "relu": Operator("relu", "ReLU", ("conv1",)),
        "conv2": identity_conv("conv2", ("relu",), dim),
        "out": Operator("out", "Output", ("conv2",)),
    }
    return build_model(ops, dim, "out")
