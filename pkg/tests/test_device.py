import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import identity_conv
from glint.device import BatchFootprint, DeviceBudget, admit, footprint, meter_transfer
from glint.kernels import build_batch_csc
from glint.model_ir import Operator, build_model
from glint.splitter import split
from glint.storage import make_graph


@pytest.fixture
def one_layer_block():
    ops = {
        "x": Operator("x", "Input", ()),
        "conv": identity_conv("conv", ("x",), 1),
        "out": Operator("out", "Output", ("conv",)),
    }
    m = build_model(ops, 1, "out")
    return split(m).blocks[0]


class TestBudget:
    def test_target_is_90_percent(self):
        assert DeviceBudget(1000).target == 900

    def test_floor(self):
        assert DeviceBudget(999).target == 899

    def test_invalid_capacity(self):
        with pytest.raises(ValueError):
            DeviceBudget(1)


class TestFootprint:
    def test_toy_single_target(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([0]))     # inputs {A,C,D}
        fp = footprint(one_layer_block, bc, {"input": 1, "conv": 1})
        assert fp.graph_slice_bytes == (1 + 1 + 2) * 8     # 32
        assert fp.input_bytes == 3 * 1 * 4                 # 12
        assert fp.intermediate_bytes == 4
        assert fp.output_bytes == 4
        assert fp.peak == 52

    def test_empty_batch_all_zero(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([], dtype=np.int64))
        fp = footprint(one_layer_block, bc, {"input": 1, "conv": 1})
        assert (fp.graph_slice_bytes, fp.input_bytes,
                fp.intermediate_bytes, fp.output_bytes) == (0, 0, 0, 0)

    def test_dim_doubling(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([0, 1]))
        fp1 = footprint(one_layer_block, bc, {"input": 3, "conv": 3})
        fp2 = footprint(one_layer_block, bc, {"input": 6, "conv": 6})
        assert fp2.input_bytes == 2 * fp1.input_bytes
        assert fp2.intermediate_bytes == 2 * fp1.intermediate_bytes
        assert fp2.output_bytes == 2 * fp1.output_bytes
        assert fp2.graph_slice_bytes == fp1.graph_slice_bytes

    def test_monotone_in_targets(self, toy_graph, one_layer_block):
        dims = {"input": 2, "conv": 2}
        fp1 = footprint(one_layer_block, build_batch_csc(toy_graph, np.array([0])), dims)
        fp2 = footprint(one_layer_block, build_batch_csc(toy_graph, np.array([0, 1])), dims)
        assert fp2.peak >= fp1.peak
        assert fp2.transfer_bytes >= fp1.transfer_bytes


class TestAdmit:
    def test_from_footprint_example(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([0]))
        fp = footprint(one_layer_block, bc, {"input": 1, "conv": 1})
        assert fp.peak == 52
        assert admit(fp, DeviceBudget(64))

    def test_boundary_inclusive(self):
        assert admit(BatchFootprint(0, 0, 0, 100), DeviceBudget(100))

    def test_over_by_one(self):
        assert not admit(BatchFootprint(0, 0, 0, 101), DeviceBudget(100))


class TestMeter:
    def test_shared_inputs_counted_once(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([0, 1]))   # inputs {A,B,C,D}
        fp = footprint(one_layer_block, bc, {"input": 1, "conv": 1})
        assert fp.input_bytes == 4 * 1 * 4                  # C, D counted once

    def test_singletons_lose_sharing(self, toy_graph, one_layer_block):
        dims = {"input": 1, "conv": 1}
        fa = footprint(one_layer_block, build_batch_csc(toy_graph, np.array([0])), dims)
        fb = footprint(one_layer_block, build_batch_csc(toy_graph, np.array([1])), dims)
        assert fa.input_bytes + fb.input_bytes == 24        # 12 + 12 > 16

    def test_empty_batch(self, toy_graph, one_layer_block):
        bc = build_batch_csc(toy_graph, np.array([], dtype=np.int64))
        assert meter_transfer(footprint(one_layer_block, bc, {"input": 1, "conv": 1})) == 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6))
    def test_sharing_bound(self, seed, k):
        """One batch of k targets never transfers more than k singletons."""
        rng = np.random.default_rng(seed)
        n = 10
        g = make_graph(n, {v: np.sort(rng.choice(n, size=rng.integers(0, 5),
                                                 replace=False)) for v in range(n)})
        ops = {
            "x": Operator("x", "Input", ()),
            "conv": identity_conv("conv", ("x",), 1),
            "out": Operator("out", "Output", ("conv",)),
        }
        block = split(build_model(ops, 1, "out")).blocks[0]
        dims = {"input": 1, "conv": 1}
        targets = np.sort(rng.choice(n, size=k, replace=False))
        joint = footprint(block, build_batch_csc(g, targets), dims)
        singles = sum(meter_transfer(footprint(block, build_batch_csc(g, targets[i:i + 1]),
                                               dims)) for i in range(k))
        assert meter_transfer(joint) <= singles
