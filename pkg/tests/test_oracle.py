import numpy as np
import pytest

from risc_nn.config import HardwareConfig
from risc_nn.graph import parse_graph
from risc_nn.kernels import ConvLayerSpec, conv_kernel, lower_cisc
from risc_nn.oracle import (
    DataflowViolation,
    OracleError,
    ShapeMismatch,
    ref_conv,
    ref_elementwise,
    ref_matmul,
    run_functional,
)
from risc_nn.translator import translate
from risc_nn.uncore import UnregisteredTable

CFG = HardwareConfig()


def _naive_conv(w, x, stride):
    K, C, R, S = w.shape
    B, _, H, W = x.shape
    E, F = (H - R) // stride + 1, (W - S) // stride + 1
    out = np.zeros((B, K, E, F), dtype=np.int64)
    for b in range(B):
        for k in range(K):
            for e in range(E):
                for f in range(F):
                    patch = x[b, :, e * stride : e * stride + R, f * stride : f * stride + S]
                    out[b, k, e, f] = int((patch.astype(np.int64) * w[k]).sum())
    return ((out + 32768) % 65536 - 32768).astype(np.int16)


@pytest.mark.parametrize("stride", [1, 2])
def test_ref_conv_matches_naive_loops(stride):
    rng = np.random.default_rng(stride)
    w = rng.integers(-300, 300, (3, 2, 3, 3))
    x = rng.integers(-300, 300, (2, 2, 7, 7))
    assert np.array_equal(ref_conv(w, x, stride), _naive_conv(w, x, stride))


def test_ref_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        ref_conv(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 5, 5)))
    with pytest.raises(ShapeMismatch):
        ref_conv(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 6, 6)), stride=2)
    with pytest.raises(ShapeMismatch):
        ref_conv(np.zeros((1, 1, 3)), np.zeros((1, 1, 6, 6)))


def test_ref_matmul_and_elementwise_wrap():
    a = np.array([[300, 0], [0, 1]])
    assert ref_matmul(a, a)[0, 0] == (90000 + 32768) % 65536 - 32768
    with pytest.raises(ShapeMismatch):
        ref_matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert ref_elementwise("add", np.array([32767]), 1)[0] == -32768
    assert ref_elementwise("max", np.array([-3, 4]), np.array([2, 1])).tolist() == [2, 4]
    with pytest.raises(OracleError):
        ref_elementwise("div", np.array([1]), 1)
    with pytest.raises(ShapeMismatch):
        ref_elementwise("add", np.zeros(3), np.zeros(4))


def _oracle_region(state, prog, name):
    base, size = prog.regions[name]
    return state.memory[base >> 1 : (base >> 1) + size // 2]


@pytest.mark.parametrize("scheme", ["no_reuse", "all_reuse"])
def test_functional_run_of_conv(scheme):
    layer = ConvLayerSpec(6, 6, 3, 2, 4, frames=2, kc=2, ro=2)
    k = conv_kernel(layer, scheme, seed=9)
    prog = k.translate(CFG)
    state = run_functional(prog)
    assert k.mismatches(lambda n: _oracle_region(state, prog, n)) == []
    assert state.macs == layer.macs * 8 * layer.frames
    # any valid schedule gives the same memory
    other = run_functional(prog, seed=11)
    assert np.array_equal(other.memory, state.memory)


def test_functional_run_of_cisc_with_tables():
    k = lower_cisc("VGT", "64", seed=3)
    prog = k.translate(CFG)
    state = run_functional(prog)
    assert k.mismatches(lambda n: _oracle_region(state, prog, n)) == []
    prog.tables.clear()
    with pytest.raises(UnregisteredTable):
        run_functional(prog)


def test_uninitialized_read_is_a_dataflow_violation():
    src = """
region r 64
task main ld=r st=r
class c
  ADD $a, $b, $c
end
instance i c pe=0 a=$0 b=$1 c=$2
"""
    prog = translate(parse_graph(src), CFG)
    with pytest.raises(DataflowViolation):
        run_functional(prog)
    run_functional(prog, check_uninit=False)


def test_sparse_skips_are_counted():
    layer = ConvLayerSpec(6, 6, 3, 2, 4, kc=2, ro=2)
    dense = run_functional(conv_kernel(layer, "all_reuse").translate(CFG))
    sparse = run_functional(conv_kernel(layer, "all_reuse", density=0.35).translate(CFG))
    assert sparse.dynamic_cal < dense.dynamic_cal
