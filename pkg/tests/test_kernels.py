import numpy as np
import pytest

from risc_nn.config import HardwareConfig
from risc_nn.kernels import (
    LAYERS,
    LOOKUP_IDS,
    SCHEMES,
    UNSUPPORTED,
    ChunkingInfeasible,
    ConvLayerSpec,
    KernelError,
    ReuseScheme,
    UnsupportedOp,
    build_activation_table,
    canonical_op,
    conv_inputs,
    conv_kernel,
    decode_ofmap,
    gen_conv,
    gen_madd_stream,
    lower_cisc,
    pruning_mask,
    static_counts,
)
from risc_nn.oracle import ref_conv
from risc_nn.uncore import host_run

CFG = HardwareConfig()
SMALL = ConvLayerSpec(6, 6, 3, 2, 4, frames=2, kc=2, ro=2)


def _run(kernel, cfg=CFG):
    res = host_run(kernel.translate(cfg))
    return res, kernel.mismatches(res.read_region)


def test_tables():
    ident = build_activation_table("identity")
    assert np.array_equal(ident, np.arange(1 << 16))
    relu = build_activation_table("relu").view(np.int16)
    assert relu[0x7FFF] == 0x7FFF and relu[0x8000] == 0 and relu[5] == 5
    sig = build_activation_table("sigmoid")
    assert sig[0] == 0x80 and sig[0x7FFF] == 0x100 and sig[0x8000] == 0
    assert build_activation_table("eq0")[0] == 1 and build_activation_table("ne0")[0] == 0
    with pytest.raises(KernelError):
        build_activation_table("softplus")
    assert len(set(LOOKUP_IDS.values())) == len(LOOKUP_IDS)


def test_layer_validation():
    assert LAYERS["conv12"].E == 10 and LAYERS["conv12"].macs > 0
    with pytest.raises(ChunkingInfeasible):
        ConvLayerSpec(6, 6, 3, 2, 4, kc=3).validate()
    with pytest.raises(ChunkingInfeasible):
        ConvLayerSpec(6, 6, 3, 2, 4, ro=3).validate()
    with pytest.raises(ChunkingInfeasible):
        gen_conv(LAYERS["conv12"], "all_reuse", opm_capacity=64)


def test_scheme_parsing():
    assert ReuseScheme.parse("AllReuse") is ReuseScheme.ALL
    assert ReuseScheme.parse("all-reuse") is ReuseScheme.ALL
    assert len(SCHEMES) == 5
    with pytest.raises(KernelError):
        ReuseScheme.parse("some_reuse")


@pytest.mark.parametrize("scheme", [s.value for s in SCHEMES])
def test_every_scheme_computes_the_convolution(scheme):
    k = conv_kernel(SMALL, scheme, seed=4)
    res, bad = _run(k)
    assert bad == []
    got = decode_ofmap(res.read_region("out"), SMALL)
    w, x = k.info["weights"], k.info["ifmap"]
    assert np.array_equal(got, ref_conv(w, x))


def test_scheme_static_structure():
    counts = {s: static_counts(conv_kernel(SMALL, s)) for s in SCHEMES}
    assert len({c["CAL"] for c in counts.values()}) == 1
    assert counts[ReuseScheme.NO]["COPY"] == 0
    assert all(counts[s]["COPY"] > 0 for s in SCHEMES if s is not ReuseScheme.NO)
    assert counts[ReuseScheme.ALL]["LD"] < counts[ReuseScheme.NO]["LD"]


def test_instances_replicate_outputs():
    k = conv_kernel(SMALL, "ifmap_reuse", instances=2)
    assert k.info["instances"] == 2
    _, bad = _run(k)
    assert bad == []


def test_conv_inputs_ranges():
    w, x = conv_inputs(SMALL, simd=8, seed=1)
    assert w.shape == (4, 2, 3, 3) and x.shape == (2 * 8, 2, 6, 6)
    assert w.min() >= -8 and w.max() < 8


def test_pruning_mask_exact_density():
    m = pruning_mask((4, 2, 3, 3), 0.35, seed=2)
    assert m.dtype == bool and m.sum() == round(0.35 * m.size)
    assert np.array_equal(m, pruning_mask((4, 2, 3, 3), 0.35, seed=2))


def test_sparse_kernel_matches_zeroed_dense():
    dense = conv_kernel(SMALL, "all_reuse", seed=3)
    sparse = conv_kernel(SMALL, "all_reuse", seed=3, density=0.35, mask_seed=1)
    assert sparse.sparse_bits
    assert all(sparse.graph.instances[n].sparse for n in sparse.sparse_bits)
    res, bad = _run(sparse)
    assert bad == []
    w = dense.info["weights"] * pruning_mask(dense.info["weights"].shape, 0.35, 1)
    assert np.array_equal(decode_ofmap(res.read_region("out"), SMALL), ref_conv(w, dense.info["ifmap"]))


@pytest.mark.parametrize("op", ["VAV", "VSV", "VMV", "MAM", "MSM", "VAS", "MMS", "VGTM"])
def test_elementwise_lowerings(op):
    _, bad = _run(lower_cisc(op, "64", seed=2))
    assert bad == []


@pytest.mark.parametrize(
    "op, shape",
    [("MMM", "8x8"), ("MMV", "8x8"), ("VMM", "8x8"), ("OP", "8"), ("VGT", "64"), ("VE", "64"),
     ("VAND", "64"), ("VOR", "64"), ("VNOT", "64"), ("RELU", "64"), ("MOVE", "64")],
)
def test_structured_lowerings(op, shape):
    _, bad = _run(lower_cisc(op, shape, seed=5))
    assert bad == []


def test_explicit_operands():
    a = np.arange(64).reshape(8, 8) - 30
    b = np.eye(8, dtype=np.int64)
    k = lower_cisc("MMM", "8x8", operands={"a": a, "b": b})
    res, bad = _run(k)
    assert bad == []
    with pytest.raises(KernelError):
        lower_cisc("MMM", "8x8", operands={"a": np.zeros((2, 2))})


def test_aliases_and_unsupported():
    assert canonical_op("matrix-multiply") == "MMM"
    assert canonical_op("sc") == "VGT"
    assert canonical_op("Activate") == "RELU"
    assert len(UNSUPPORTED) == 7
    for op in UNSUPPORTED:
        with pytest.raises(UnsupportedOp) as exc:
            lower_cisc(op, "8")
        assert UNSUPPORTED[op] in str(exc.value)


def test_madd_stream_small():
    k = gen_madd_stream(n_pes=4, length=64, iterations=2)
    _, bad = _run(k)
    assert bad == []
    assert k.info["macs"] == 4 * 64 * 8 * 2
