"""Workload generators: convolution dataflows, CISC lowerings, sparse variants and
activation tables.

Every generator returns a :class:`Kernel`: the execution graph plus the data it
needs (lookup tables, sparse vectors) and the expected contents of each output
region, computed with the numerical references in :mod:`risc_nn.oracle`.

Data layout.  SIMD lanes carry the batch, so one Operand-RAM entry is
``simd`` images' worth of one scalar.  Regions hold 16-byte-per-lane-group
entries, channel-major:

* weights ``w[k, c, r, s]`` at entry ``((k*C + c)*R + r)*R + s``, replicated
  across lanes;
* ifmap ``x[b, c, h, w]`` at entry ``K*C*R*R + (c*H + h)*W + w`` with lane ``b``;
* ofmap ``y[b, k, e, f]`` at entry ``(k*E + e)*F + f`` of the output region.

Each task-main iteration ("frame") processes ``simd`` images; the input region
repeats the layout per frame (weights included so every scheme reads the same
image), the output region likewise.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import HardwareConfig
from .graph import ExeBlockClass, ExecutionGraph, Region, Task, TemplateInst, instantiate
from .isa import Instruction, Opcode, Stage, split_offset
from .oracle import ref_conv, ref_elementwise, ref_matmul
from .translator import Program, compute_sparse_vectors, translate


class KernelError(Exception):
    pass


class ChunkingInfeasible(KernelError):
    pass


class UnsupportedOp(KernelError):
    pass


# -- lookup tables -------------------------------------------------------------

LOOKUP_IDS = {
    "identity": 1,
    "relu": 2,
    "sigmoid": 3,
    "tanh": 4,
    "softmax-exp": 5,
    "gaussian": 6,
    "ne0": 7,
    "eq0": 8,
}


def build_activation_table(function: str, frac_bits: int = 8) -> np.ndarray:
    """65536-entry uint16 table over signed fixed-point inputs (Q(15-f).f)."""
    idx = np.arange(1 << 16, dtype=np.int64)
    signed = np.where(idx >= 0x8000, idx - 0x10000, idx)
    if function == "identity":
        return idx.astype(np.uint16)
    if function == "relu":
        return np.where(signed < 0, 0, signed).astype(np.uint16)
    if function == "ne0":
        return (signed != 0).astype(np.uint16)
    if function == "eq0":
        return (signed == 0).astype(np.uint16)
    scale = float(1 << frac_bits)
    x = signed / scale
    funcs: dict[str, Callable[[np.ndarray], np.ndarray]] = {
        "sigmoid": lambda v: 1.0 / (1.0 + np.exp(-v)),
        "tanh": np.tanh,
        "softmax-exp": np.exp,
        "gaussian": lambda v: np.exp(-v * v),
    }
    try:
        fn = funcs[function]
    except KeyError:
        raise KernelError(f"unknown activation function {function!r}") from None
    with np.errstate(over="ignore"):
        y = np.rint(fn(x) * scale)
    y = np.clip(y, -32768, 32767).astype(np.int64)
    return (y & 0xFFFF).astype(np.uint16)


# -- kernel bundle ----------------------------------------------------------------


@dataclass
class Kernel:
    graph: ExecutionGraph
    expected: dict[str, np.ndarray]  # output region -> uint16 halfwords
    tables: dict[int, np.ndarray] = field(default_factory=dict)
    sparse_bits: dict[str, list[int]] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def translate(self, cfg: HardwareConfig) -> Program:
        return translate(self.graph, cfg, sparse_bits=self.sparse_bits or None, tables=self.tables)

    def mismatches(self, read_region: Callable[[str], np.ndarray]) -> list[str]:
        """Output regions whose contents differ from the expected halfwords."""
        bad = []
        for name, want in self.expected.items():
            got = np.asarray(read_region(name), dtype=np.uint16)[: len(want)]
            if got.shape != want.shape or not np.array_equal(got, want):
                bad.append(name)
        return bad

    def replicate(self, n: int, cfg: HardwareConfig | None = None) -> "Kernel":
        if n == 1:
            return self
        graph = gen_instances(self.graph, n, cfg)
        expected = {}
        for name, want in self.expected.items():
            frames = self.info.get("frames_of", {}).get(name, 1)
            expected[name] = np.tile(want.reshape(frames, -1), (1, n)).reshape(-1)
        info = dict(self.info)
        P = _lpe_span(self.graph)
        if "weights_of" in info:
            info["weights_of"] = {
                lpe + i * P: v for i in range(n) for lpe, v in self.info["weights_of"].items()
            }
        info["instances"] = self.info.get("instances", 1) * n
        return Kernel(graph, expected, dict(self.tables), {}, info)


class _Builder:
    def __init__(self) -> None:
        self.g = ExecutionGraph()

    def block(self, name: str, body: Sequence[TemplateInst], *, task: str, pe: int) -> str:
        cls = ExeBlockClass(f"c_{name}", list(body))
        self.g.add_instance(instantiate(cls, {}, name=name, task=task, logical_pe=pe))
        return name

    def edge(self, a: str, b: str) -> None:
        self.g.add_edge(a, b)

    def tree(
        self,
        tag: str,
        task: str,
        src: Sequence[int],
        consumers: Sequence[tuple[int, Sequence[int], str | None]],
        eb: int,
    ) -> None:
        """Distribute DRAM entries ``src`` to every consumer ``(pe, addrs, block)``.

        Node i sits on consumer i's PE and forwards to nodes 2i+1 and 2i+2; the
        root loads.  Childless nodes are elided when their consumer block exists
        (the parent activates it directly); otherwise they remain as empty
        receiving blocks so the task barrier covers the data."""
        n = len(consumers)

        def kids(i: int) -> list[int]:
            return [j for j in (2 * i + 1, 2 * i + 2) if j < n]

        names: dict[int, str] = {}
        for i in range(n):
            pe, addrs, cons = consumers[i]
            if i and not kids(i) and cons is not None:
                continue
            body = [_ld(a, s * eb) for a, s in zip(addrs, src)] if i == 0 else []
            for j in kids(i):
                pe_j, addrs_j, _ = consumers[j]
                body += [TemplateInst(Opcode.COPY, (a, b, pe_j)) for a, b in zip(addrs, addrs_j)]
            names[i] = self.block(f"{tag}_n{i}", body, task=task, pe=pe)
        for i, name in names.items():
            if consumers[i][2] is not None:
                self.edge(name, consumers[i][2])
            for j in kids(i):
                self.edge(name, names.get(j) or consumers[j][2])


def _ld(opm: int, off: int) -> TemplateInst:
    return TemplateInst(Opcode.LD, (opm, off))


def _st(opm: int, off: int, lookup: int = 0) -> TemplateInst:
    return TemplateInst(Opcode.ST, (opm, off), lookup)


def _cal(op: Opcode, a: int, b: int, c: int) -> TemplateInst:
    return TemplateInst(op, (a, b, c))


def _lanes_to_data(entries: np.ndarray) -> dict[int, int]:
    """(n_entries, simd) int array -> region byte-offset dict of non-zero halfwords."""
    flat = (np.asarray(entries, dtype=np.int64) & 0xFFFF).reshape(-1)
    nz = np.nonzero(flat)[0]
    return {int(i) * 2: int(flat[i]) for i in nz}


def _halfwords(entries: np.ndarray) -> np.ndarray:
    return (np.asarray(entries, dtype=np.int64) & 0xFFFF).astype(np.uint16).reshape(-1)


def _lpe_span(graph: ExecutionGraph) -> int:
    return max(graph.logical_pes(), default=-1) + 1


# -- convolution ------------------------------------------------------------------


class ReuseScheme(str, Enum):
    NO = "no_reuse"
    CONV = "conv_reuse"
    FILTER = "filter_reuse"
    IFMAP = "ifmap_reuse"
    ALL = "all_reuse"

    @classmethod
    def parse(cls, text: str) -> "ReuseScheme":
        key = text.lower().replace("-", "_").replace("reuse", "").strip("_ ")
        for s in cls:
            if s.value.split("_")[0] == key:
                return s
        raise KernelError(f"unknown reuse scheme {text!r}")

    @property
    def has_prepare(self) -> bool:
        return self in (ReuseScheme.CONV, ReuseScheme.ALL)


SCHEMES = list(ReuseScheme)


@dataclass(frozen=True)
class ConvLayerSpec:
    """Convolution layer.  Each compute PE produces ``kc`` output channels by
    ``ro`` output rows, split into ``chain`` ExeBlocks that run back to back
    (each activates the next after its CAL stage, so stores overlap compute);
    ``frames`` task-main iterations of ``simd`` images.  Row-sharing trees
    carry ``C / row_split`` channels each."""

    H: int
    W: int
    R: int
    C: int
    K: int
    stride: int = 1
    frames: int = 1
    kc: int = 4
    ro: int = 1
    chain: int = 1
    row_split: int = 1

    @property
    def E(self) -> int:
        return (self.H - self.R) // self.stride + 1

    @property
    def F(self) -> int:
        return (self.W - self.R) // self.stride + 1

    @property
    def G(self) -> int:
        return self.K // self.kc

    @property
    def Rn(self) -> int:
        return self.E // self.ro

    @property
    def window_rows(self) -> int:
        return (self.ro - 1) * self.stride + self.R

    @property
    def n_weights(self) -> int:
        return self.K * self.C * self.R * self.R

    @property
    def n_inputs(self) -> int:
        return self.C * self.H * self.W

    @property
    def n_outputs(self) -> int:
        return self.K * self.E * self.F

    @property
    def macs(self) -> int:
        """Multiply-accumulates per image."""
        return self.n_outputs * self.C * self.R * self.R

    def validate(self) -> None:
        for name in ("H", "W", "R", "C", "K", "stride", "frames", "kc", "ro", "chain", "row_split"):
            if getattr(self, name) < 1:
                raise ChunkingInfeasible(f"{name} must be positive")
        if self.H < self.R or self.W < self.R:
            raise ChunkingInfeasible("filter larger than input")
        if (self.H - self.R) % self.stride or (self.W - self.R) % self.stride:
            raise ChunkingInfeasible("stride does not tile the input (no implicit padding)")
        if self.K % self.kc:
            raise ChunkingInfeasible(f"kc={self.kc} does not divide K={self.K}")
        if self.E % self.ro:
            raise ChunkingInfeasible(f"ro={self.ro} does not divide E={self.E}")
        if self.ro % self.chain:
            raise ChunkingInfeasible(f"chain={self.chain} does not divide ro={self.ro}")
        if self.C % self.row_split:
            raise ChunkingInfeasible(f"row_split={self.row_split} does not divide C={self.C}")


LAYERS = {
    # equivalence layer: 12x12 ifmap, 4 -> 8 channels, 3x3 filters
    "conv12": ConvLayerSpec(12, 12, 3, 4, 8, kc=2, ro=1),
    # AlexNet CONV2 shrunk to desk scale (square filters, more output channels than input)
    "alexnet_conv2_scaled": ConvLayerSpec(8, 8, 3, 2, 16, kc=4, ro=2),
    # utilization / traffic layer: 16 compute blocks per instance
    "conv10": ConvLayerSpec(10, 10, 3, 4, 8, frames=4, kc=2, ro=2),
    # off-chip traffic layer: eight filter groups, so ifmap duplication dominates
    "traffic8": ConvLayerSpec(8, 8, 3, 8, 8, frames=2, kc=1, ro=2),
    # utilization layer: deep input, per-PE CAL work near the IRAM budget
    "util16": ConvLayerSpec(8, 8, 3, 16, 8, frames=4, kc=1, ro=2, chain=2, row_split=4),
    # sparse layer: enough frames to amortize the one-time instruction load
    "sparse10": ConvLayerSpec(10, 10, 3, 4, 8, frames=12, kc=2, ro=2),
}


def conv_inputs(layer: ConvLayerSpec, simd: int = 8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    w = rng.integers(-8, 8, (layer.K, layer.C, layer.R, layer.R), dtype=np.int64)
    x = rng.integers(-32, 32, (layer.frames * simd, layer.C, layer.H, layer.W), dtype=np.int64)
    return w, x


def conv_expected(layer: ConvLayerSpec, weights: np.ndarray, ifmap: np.ndarray, simd: int) -> np.ndarray:
    y = ref_conv(weights, ifmap, layer.stride).astype(np.int64)  # (B, K, E, F)
    y = y.reshape(layer.frames, simd, layer.K, layer.E, layer.F).transpose(0, 2, 3, 4, 1)
    return _halfwords(y)


def decode_ofmap(halfwords: np.ndarray, layer: ConvLayerSpec, simd: int = 8) -> np.ndarray:
    """Output-region halfwords (one instance) -> int16 (B, K, E, F)."""
    h = np.asarray(halfwords, dtype=np.uint16)[: layer.frames * layer.n_outputs * simd]
    y = h.view(np.int16).reshape(layer.frames, layer.K, layer.E, layer.F, simd)
    return y.transpose(0, 4, 1, 2, 3).reshape(-1, layer.K, layer.E, layer.F)


def gen_conv(
    layer: ConvLayerSpec,
    scheme: ReuseScheme | str,
    weights: np.ndarray | None = None,
    ifmap: np.ndarray | None = None,
    *,
    simd: int = 8,
    seed: int = 0,
    opm_capacity: int | None = None,
) -> Kernel:
    layer.validate()
    scheme = ReuseScheme.parse(scheme) if isinstance(scheme, str) else scheme
    if weights is None or ifmap is None:
        w0, x0 = conv_inputs(layer, simd, seed)
        weights = w0 if weights is None else weights
        ifmap = x0 if ifmap is None else ifmap
    weights = np.asarray(weights, dtype=np.int64)
    ifmap = np.asarray(ifmap, dtype=np.int64)
    if weights.shape != (layer.K, layer.C, layer.R, layer.R):
        raise KernelError(f"weights shape {weights.shape} does not match the layer")
    if ifmap.shape != (layer.frames * simd, layer.C, layer.H, layer.W):
        raise KernelError(f"ifmap shape {ifmap.shape} does not match the layer and simd={simd}")

    H, W, R, C, K, u = layer.H, layer.W, layer.R, layer.C, layer.K, layer.stride
    E, F, G, Rn, kc, ro, wr = layer.E, layer.F, layer.G, layer.Rn, layer.kc, layer.ro, layer.window_rows
    eb = 2 * simd
    n_w = kc * C * R * R  # weights per compute block
    WB, XB = 0, n_w
    OB = XB + C * wr * W
    need = OB + kc * ro * F
    if opm_capacity is not None and need > opm_capacity:
        raise ChunkingInfeasible(f"compute block needs {need} Operand-RAM entries, capacity {opm_capacity}")
    frame = layer.n_weights + layer.n_inputs  # entries

    b = _Builder()
    g_ = b.g
    in_entries = np.zeros((layer.frames, frame, simd), dtype=np.int64)
    in_entries[:, : layer.n_weights, :] = weights.reshape(1, -1, 1)
    x = ifmap.reshape(layer.frames, simd, C * H * W).transpose(0, 2, 1)
    in_entries[:, layer.n_weights :, :] = x
    g_.add_region(Region("in", layer.frames * frame * eb, _lanes_to_data(in_entries)))
    g_.add_region(Region("out", layer.frames * layer.n_outputs * eb))
    g_.outputs.append("out")
    if scheme.has_prepare:
        g_.tasks.append(Task("prepare", "in", "out"))
    g_.tasks.append(Task("main", "in", "out", layer.frames, frame * eb, layer.n_outputs * eb))

    def lpe(g: int, r: int) -> int:
        return g * Rn + r

    def cname(g: int, r: int) -> str:
        return f"cb_g{g}_r{r}"

    def w_src(g: int) -> list[int]:
        return list(range(g * n_w, (g + 1) * n_w))

    def x_entry(c: int, h: int, w: int) -> int:
        return layer.n_weights + (c * H + h) * W + w

    def window_src(r: int) -> tuple[list[int], list[int]]:
        src, dst = [], []
        for c in range(C):
            for hh in range(wr):
                for w in range(W):
                    src.append(x_entry(c, r * ro * u + hh, w))
                    dst.append(XB + (c * wr + hh) * W + w)
        return src, dst

    # distribution trees first so their blocks outrank compute blocks
    w_dst = list(range(WB, WB + n_w))
    if scheme in (ReuseScheme.FILTER, ReuseScheme.CONV, ReuseScheme.ALL):
        task = "main" if scheme is ReuseScheme.FILTER else "prepare"
        for g in range(G):
            rs = [(g + k) % Rn for k in range(Rn)]
            cons = [(lpe(g, r), w_dst, cname(g, r) if task == "main" else None) for r in rs]
            b.tree(f"wt_g{g}", task, w_src(g), cons, eb)
    if scheme is ReuseScheme.IFMAP:
        for r in range(Rn):
            src, dst = window_src(r)
            gs = [(r + k) % G for k in range(G)]
            b.tree(f"xt_r{r}", "main", src, [(lpe(g, r), dst, cname(g, r)) for g in gs], eb)
    if scheme in (ReuseScheme.CONV, ReuseScheme.ALL):
        groups = [[g] for g in range(G)] if scheme is ReuseScheme.CONV else [list(range(G))]
        cg = C // layer.row_split
        for gs in groups:
            for h in range(H):
                for ci in range(layer.row_split):
                    chans = range(ci * cg, (ci + 1) * cg)
                    cons = []
                    for g in gs:
                        for r in range(Rn):
                            top = r * ro * u
                            if top <= h < top + wr:
                                dst = [XB + (c * wr + h - top) * W + w for c in chans for w in range(W)]
                                cons.append((lpe(g, r), dst, cname(g, r)))
                    if not cons:
                        continue
                    k = (h + ci) % len(cons)
                    cons = cons[k:] + cons[:k]
                    src = [x_entry(c, h, w) for c in chans for w in range(W)]
                    tag = f"rt_g{gs[0]}_h{h}" if scheme is ReuseScheme.CONV else f"rt_h{h}"
                    if layer.row_split > 1:
                        tag += f"_c{ci}"
                    b.tree(tag, "main", src, cons, eb)

    weights_of = {}
    per = ro // layer.chain
    compute = []
    for g in range(G):
        for r in range(Rn):
            prev = None
            for j in range(layer.chain):
                body: list[TemplateInst] = []
                if j == 0 and scheme in (ReuseScheme.NO, ReuseScheme.IFMAP):
                    body += [_ld(WB + i, s * eb) for i, s in enumerate(w_src(g))]
                if j == 0 and scheme in (ReuseScheme.NO, ReuseScheme.FILTER):
                    src, dst = window_src(r)
                    body += [_ld(d, s * eb) for d, s in zip(dst, src)]
                stores = []
                for kk in range(kc):
                    for ee in range(j * per, (j + 1) * per):
                        for f in range(F):
                            acc = OB + (kk * ro + ee) * F + f
                            first = True
                            for c in range(C):
                                for rr in range(R):
                                    for s in range(R):
                                        wa = WB + ((kk * C + c) * R + rr) * R + s
                                        xa = XB + (c * wr + ee * u + rr) * W + f * u + s
                                        body.append(_cal(Opcode.MUL if first else Opcode.MADD, wa, xa, acc))
                                        first = False
                            k = g * kc + kk
                            e = r * ro + ee
                            stores.append(_st(acc, ((k * E + e) * F + f) * eb))
                body += stores
                name = cname(g, r) if j == 0 else f"{cname(g, r)}_s{j}"
                b.block(name, body, task="main", pe=lpe(g, r))
                if prev is not None:
                    b.edge(prev, name)
                prev = name
                compute.append(name)
            weights_of[lpe(g, r)] = (g * n_w, n_w, WB)

    expected = {"out": conv_expected(layer, weights, ifmap, simd)}
    info = {
        "kind": "conv",
        "layer": layer,
        "scheme": scheme,
        "simd": simd,
        "weights": weights,
        "ifmap": ifmap,
        "instances": 1,
        "weights_of": weights_of,
        "frames_of": {"out": layer.frames},
        "compute_blocks": compute,
        "macs": layer.macs * layer.frames * simd,
    }
    return Kernel(g_, expected, info=info)


# -- instances ------------------------------------------------------------------------


def _literal_class(name: str, body: Sequence[Instruction]) -> ExeBlockClass:
    tmpl = []
    for i in body:
        if i.op in (Opcode.LD, Opcode.ST):
            tmpl.append(TemplateInst(i.op, (i.f0, i.f1, i.f2), i.lookup_type))
        else:
            tmpl.append(TemplateInst(i.op, (i.f0, i.f1, i.f2)))
    return ExeBlockClass(name, tmpl)


def gen_instances(graph: ExecutionGraph, n: int, cfg: HardwareConfig | None = None) -> ExecutionGraph:
    """``n`` independent copies sharing input regions; output regions widen n-fold.

    Copy ``i`` shifts logical PEs by ``i * span`` and its stores by one
    instance-width within every frame.  With ``cfg`` the result is translated
    once so per-PE capacity violations raise ``CapacityExceeded``."""
    if n < 1:
        raise KernelError("instance count must be >= 1")
    if n == 1:
        return graph
    P = _lpe_span(graph)
    if any(i.logical_pe is None for i in graph.instances.values()):
        raise KernelError("gen_instances needs every instance pinned to a logical PE")
    st_tasks = {
        t.name for t in graph.tasks
        if any(i.op is Opcode.ST for inst in graph.members(t.name) for i in inst.body)
    }
    span: dict[str, int] = {}
    for t in graph.tasks:
        if t.name in st_tasks:
            s = t.st_stride if t.iterations > 1 else graph.regions[t.st_base].size
            if span.setdefault(t.st_base, s) != s:
                raise KernelError(f"region {t.st_base}: inconsistent store spans")
    new = ExecutionGraph()
    for r in graph.regions.values():
        if r.name in span:
            new.add_region(Region(r.name, r.size * n, dict(r.data)))
        else:
            new.add_region(Region(r.name, r.size, dict(r.data)))
    new.outputs = list(graph.outputs)
    for t in graph.tasks:
        stride = t.st_stride * n if t.name in st_tasks and t.iterations > 1 else t.st_stride
        new.tasks.append(replace(t, st_stride=stride))
    task_of = {t.name: t for t in graph.tasks}
    for i in range(n):
        for inst in graph.instances.values():
            name = inst.name if i == 0 else f"{inst.name}_i{i}"
            shift = span.get(task_of[inst.task].st_base, 0) * i
            body = []
            for x in inst.body:
                if x.op is Opcode.ST and shift:
                    hi, lo = split_offset(x.dram_offset + shift)
                    x = Instruction(Opcode.ST, x.f0, hi, lo, lookup_type=x.lookup_type)
                elif x.op is Opcode.COPY:
                    x = Instruction(Opcode.COPY, x.f0, x.f1, x.f2 + i * P)
                body.append(x)
            cls = inst.cls if i == 0 else _literal_class(f"{inst.cls.name}_i{i}", body)
            new.add_instance(
                replace(
                    inst,
                    name=name,
                    cls=cls,
                    bindings={} if i else dict(inst.bindings),
                    logical_pe=inst.logical_pe + i * P,
                    body=body,
                )
            )
        for a, b_ in graph.edges:
            new.add_edge(a if i == 0 else f"{a}_i{i}", b_ if i == 0 else f"{b_}_i{i}")
    if cfg is not None:
        translate(new, cfg)
    return new


# -- sparse variants ------------------------------------------------------------------


def pruning_mask(shape: Sequence[int], density: float, seed: int = 0) -> np.ndarray:
    """Boolean effectual-weight mask with exactly round(density * size) True."""
    if not 0 < density <= 1:
        raise KernelError("density must be in (0, 1]")
    size = int(np.prod(shape))
    keep = int(round(density * size))
    rng = np.random.default_rng(seed)
    mask = np.zeros(size, dtype=bool)
    mask[rng.permutation(size)[:keep]] = True
    return mask.reshape(shape)


def gen_sparse(kernel: Kernel, mask: np.ndarray) -> Kernel:
    """Sparse variant of a conv kernel: weights zeroed by ``mask`` and sparse
    vectors that skip every MADD whose weight is masked out."""
    info = kernel.info
    if info.get("kind") != "conv":
        raise KernelError("gen_sparse needs a convolution kernel")
    layer: ConvLayerSpec = info["layer"]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (layer.K, layer.C, layer.R, layer.R):
        raise KernelError(f"mask shape {mask.shape} does not match the weights")
    zeroed = np.where(mask, info["weights"], 0)
    out = gen_conv(layer, info["scheme"], zeroed, info["ifmap"], simd=info["simd"])
    out = with_instances(out, info.get("instances", 1))
    flat = mask.reshape(-1)
    pruned = {}
    for lpe, (start, count, base) in out.info["weights_of"].items():
        pruned[lpe] = {base + i for i in range(count) if not flat[start + i]}
    compute = set(out.info["compute_blocks"])
    for name in compute:
        out.graph.instances[name].sparse = True
    out.sparse_bits = compute_sparse_vectors(out.graph, pruned)
    out.info["density"] = float(flat.mean())
    return out


def with_instances(kernel: Kernel, n: int, cfg: HardwareConfig | None = None) -> Kernel:
    out = kernel.replicate(n, cfg)
    if n > 1 and "compute_blocks" in kernel.info:
        out.info["compute_blocks"] = [
            c if i == 0 else f"{c}_i{i}" for i in range(n) for c in kernel.info["compute_blocks"]
        ]
    return out


# -- CISC lowering ------------------------------------------------------------------------

UNSUPPORTED = {
    "JUMP": "control flow is expressed by activation edges and the host task sequence",
    "COND_BRANCH": "control flow is expressed by activation edges and the host task sequence",
    "VEXP": "use build_activation_table('softmax-exp') on a lookup ST (in-DRAM lookup)",
    "VLOG": "tabulate the logarithm with a lookup ST (in-DRAM lookup)",
    "VDV": "no divider: tabulate reciprocals with a lookup ST and multiply",
    "RV": "random vectors come from the host; write them into an input region",
    "ACTIVATE_COMPLEX": "use build_activation_table(sigmoid|tanh|gaussian) on a lookup ST (in-DRAM lookup)",
}
_ALIASES = {
    "CB": "COND_BRANCH",
    "COND.BRANCH": "COND_BRANCH",
    "BRANCH": "COND_BRANCH",
    "ACTIVATE(COMPLEX)": "ACTIVATE_COMPLEX",
    "MATRIXMULTIPLY": "MMM",
    "MMC": "MMM",
    "ACTIVATE": "RELU",
    "ACTIVATE_SIMPLE": "RELU",
    "SC": "VGT",
    "SL": "VAND",
    "VLOAD": "MOVE",
    "VSTORE": "MOVE",
    "MLOAD": "MOVE",
    "MSTORE": "MOVE",
    "READ_HOST_MEMORY": "MOVE",
    "READ_WEIGHTS": "MOVE",
}
_BINARY = {"VAV": (Opcode.ADD, "add"), "VSV": (Opcode.SUB, "sub"), "VMV": (Opcode.MUL, "mul"),
           "VGTM": (Opcode.MAX, "max"), "MAM": (Opcode.ADD, "add"), "MSM": (Opcode.SUB, "sub")}
_SCALAR = {"VAS": (Opcode.ADD, "add"), "MMS": (Opcode.MUL, "mul")}
CISC_OPS = sorted(
    set(_BINARY) | set(_SCALAR) | {"MMM", "MMV", "VMM", "OP", "VGT", "VE", "VAND", "VOR", "VNOT", "RELU",
                                   "MOVE", "CONVOLVE"} | set(_ALIASES)
)


def canonical_op(op: str) -> str:
    key = op.upper().replace(" ", "_").replace("-", "_")
    return _ALIASES.get(key) or _ALIASES.get(key.replace("_", ""), key)


def _parse_shape(shape) -> tuple[int, ...]:
    if shape is None:
        return ()
    if isinstance(shape, str):
        return tuple(int(p) for p in shape.lower().split("x"))
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(s) for s in shape)


class _Cisc:
    """Shared plumbing for CISC lowerings: one input and one output region."""

    def __init__(self, simd: int, seed: int):
        self.b = _Builder()
        self.simd = simd
        self.eb = 2 * simd
        self.rng = np.random.default_rng(seed)
        self.inputs: list[np.ndarray] = []  # (entries, simd) blocks appended to "in"
        self.n_in = 0
        self.pe = 0

    def rand(self, shape, lo=-(1 << 15), hi=1 << 15) -> np.ndarray:
        return self.rng.integers(lo, hi, shape, dtype=np.int64)

    def add_input(self, entries: np.ndarray) -> int:
        """Append (n, simd) lane entries; returns the first entry index."""
        entries = np.asarray(entries, dtype=np.int64).reshape(-1, self.simd)
        start = self.n_in
        self.inputs.append(entries)
        self.n_in += len(entries)
        return start

    def vec_entries(self, v: np.ndarray) -> np.ndarray:
        if v.size % self.simd:
            raise KernelError(f"length {v.size} is not a multiple of simd={self.simd}")
        return v.reshape(-1, self.simd)

    def bcast(self, v: np.ndarray) -> np.ndarray:
        return np.repeat(np.asarray(v).reshape(-1, 1), self.simd, axis=1)

    def next_pe(self) -> int:
        self.pe += 1
        return self.pe - 1

    def finish(self, out_entries: np.ndarray, *, op: str, tasks=None, tables=(), extra_regions=()) -> Kernel:
        g = self.b.g
        data = np.concatenate(self.inputs) if self.inputs else np.zeros((0, self.simd))
        g.add_region(Region("in", max(1, self.n_in) * self.eb, _lanes_to_data(data)))
        out = np.asarray(out_entries, dtype=np.int64).reshape(-1, self.simd)
        g.add_region(Region("out", len(out) * self.eb))
        for r in extra_regions:
            g.add_region(r)
        g.outputs.append("out")
        g.tasks.extend(tasks or [Task("main", "in", "out")])
        tabs = {LOOKUP_IDS[t]: build_activation_table(t) for t in tables}
        return Kernel(g, {"out": _halfwords(out)}, tabs, info={"kind": "cisc", "op": op})


def lower_cisc(op: str, shape=None, *, seed: int = 0, simd: int = 8, operands: Mapping | None = None) -> Kernel:
    """Lower one CISC accelerator instruction to an execution graph.

    Shapes: ``(n, k, m)`` or ``"8x8"`` for matrix ops, ``(L,)`` for vectors.
    ``operands`` may supply the named inputs (``a``, ``b``, ``s``, ``x``,
    ``y``, ``u``, ``v``); missing ones are drawn at random from ``seed``."""
    name = canonical_op(op)
    if name in UNSUPPORTED:
        raise UnsupportedOp(f"{op}: not lowered; {UNSUPPORTED[name]}")
    dims = _parse_shape(shape)
    k = _Cisc(simd, seed)
    ops = dict(operands or {})

    def get(key: str, shape_, lo=-(1 << 15), hi=1 << 15) -> np.ndarray:
        if key in ops:
            arr = np.asarray(ops[key], dtype=np.int64)
            if arr.shape != tuple(shape_):
                raise KernelError(f"operand {key} has shape {arr.shape}, expected {tuple(shape_)}")
            return arr
        return k.rand(shape_, lo, hi)

    def vec_len(default: int = 64) -> int:
        return int(np.prod(dims)) if dims else default

    b, eb = k.b, k.eb

    if name in _BINARY or name in _SCALAR or name in ("VGT", "VE", "VNOT", "RELU", "MOVE"):
        L = vec_len()
        shp = dims or (L,)
        x = get("x" if "x" in ops or name.startswith("V") else "a", shp)
        xe = k.vec_entries(x)
        x0 = k.add_input(xe)
        y0 = s0 = None
        if name in _BINARY or name in ("VGT", "VE"):
            y = get("y" if "y" in ops or name.startswith("V") else "b", shp)
            y0 = k.add_input(k.vec_entries(y))
        if name in _SCALAR:
            s = get("s", ())
            s0 = k.add_input(k.bcast(s))
        tables = ()
        if name in _BINARY:
            opc, ref = _BINARY[name]
            expected = ref_elementwise(ref, x, y)
        elif name in _SCALAR:
            opc, ref = _SCALAR[name]
            expected = ref_elementwise(ref, x, np.full(shp, s))
        elif name == "VGT":
            expected = (x.astype(np.int16) > y.astype(np.int16)).astype(np.int64)
            tables = ("ne0",)
        elif name == "VE":
            expected = (x.astype(np.int16) == y.astype(np.int16)).astype(np.int64)
            tables = ("eq0",)
        elif name == "VNOT":
            expected = (x.astype(np.int16) == 0).astype(np.int64)
            tables = ("eq0",)
        elif name == "RELU":
            expected = np.maximum(x.astype(np.int16), 0).astype(np.int64)
            tables = ("relu",)
        else:
            expected = x
        for e in range(len(xe)):
            body = [_ld(0, (x0 + e) * eb)]
            if y0 is not None:
                body.append(_ld(1, (y0 + e) * eb))
            if s0 is not None:
                body.append(_ld(1, s0 * eb))
            res, lookup = 0, 0
            if name in _BINARY or name in _SCALAR:
                body.append(_cal(opc, 0, 1, 2))
                res = 2
            elif name == "VGT":
                body += [_cal(Opcode.MAX, 0, 1, 2), _cal(Opcode.SUB, 2, 1, 3)]
                res, lookup = 3, LOOKUP_IDS["ne0"]
            elif name == "VE":
                body.append(_cal(Opcode.SUB, 0, 1, 2))
                res, lookup = 2, LOOKUP_IDS["eq0"]
            elif name == "VNOT":
                lookup = LOOKUP_IDS["eq0"]
            elif name == "RELU":
                lookup = LOOKUP_IDS["relu"]
            body.append(_st(res, e * eb, lookup))
            b.block(f"e{e}", body, task="main", pe=k.next_pe())
        return k.finish(k.vec_entries(expected), op=name, tables=tables)

    if name in ("VAND", "VOR"):
        # task 1 normalises both operands to 0/1 through a lookup ST, task 2 combines them
        L = vec_len()
        shp = dims or (L,)
        x, y = get("x", shp), get("y", shp)
        xe, ye = k.vec_entries(x), k.vec_entries(y)
        x0, y0 = k.add_input(xe), k.add_input(ye)
        n = len(xe)
        ne0 = LOOKUP_IDS["ne0"]
        bx, by = (x.astype(np.int16) != 0), (y.astype(np.int16) != 0)
        expected = (bx & by if name == "VAND" else bx | by).astype(np.int64)
        for e in range(n):
            pe = k.next_pe()
            b.block(f"norm{e}", [_ld(0, (x0 + e) * eb), _ld(1, (y0 + e) * eb),
                                      _st(0, e * eb, ne0), _st(1, (n + e) * eb, ne0)], task="normalise", pe=pe)
            opc = Opcode.MIN if name == "VAND" else Opcode.MAX
            b.block(f"comb{e}", [_ld(2, e * eb), _ld(3, (n + e) * eb), _cal(opc, 2, 3, 4), _st(4, e * eb)],
                    task="main", pe=pe)
        scratch = Region("scratch", 2 * n * eb)
        tasks = [Task("normalise", "in", "scratch"), Task("main", "scratch", "out")]
        return k.finish(k.vec_entries(expected), op=name, tasks=tasks, tables=("ne0",), extra_regions=[scratch])

    if name in ("MMM", "MMV", "VMM", "OP"):
        if name == "MMM":
            n_, kk, m = (dims + (dims[-1],) * 3)[:3] if dims else (8, 8, 8)
            if len(dims) == 2:
                n_, kk, m = dims[0], dims[1], dims[1]
            A, B = get("a", (n_, kk), -128, 128), get("b", (kk, m), -128, 128)
            expected = ref_matmul(A, B)
            # A broadcast per element, B row entries; one block per output row, B shared by a tree
            a0 = k.add_input(k.bcast(A))
            mq = k.vec_entries(B[0]).shape[0]
            b0 = k.add_input(B.reshape(-1, simd))
            AB, BB, CB = 0, kk, kk + kk * mq
            rows = []
            for i in range(n_):
                body = [_ld(AB + j, (a0 + i * kk + j) * eb) for j in range(kk)]
                for q in range(mq):
                    for j in range(kk):
                        body.append(_cal(Opcode.MUL if j == 0 else Opcode.MADD, AB + j, BB + j * mq + q, CB + q))
                body += [_st(CB + q, (i * mq + q) * eb) for q in range(mq)]
                rows.append((i, b.block(f"row{i}", body, task="main", pe=i)))
            b.tree("bt", "main", list(range(b0, b0 + kk * mq)),
                   [(i, list(range(BB, BB + kk * mq)), nm) for i, nm in rows], eb)
            return k.finish(k.vec_entries(expected), op=name)
        if name == "MMV":
            n_, kk = (dims + dims)[:2] if dims else (8, 8)
            M, v = get("a", (n_, kk), -128, 128), get("v", (kk,), -128, 128)
            expected = ref_matmul(M, v.reshape(-1, 1)).reshape(-1)
            nq = k.vec_entries(expected).shape[0]
            # column-slice layout: entry (j, q) holds M[q*simd:(q+1)*simd, j]
            m0 = k.add_input(M.T.reshape(kk, nq, simd))
            v0 = k.add_input(k.bcast(v))
            VB, MB, YB = 0, kk, 2 * kk
            blocks = []
            for q in range(nq):
                body = [_ld(MB + j, (m0 + j * nq + q) * eb) for j in range(kk)]
                for j in range(kk):
                    body.append(_cal(Opcode.MUL if j == 0 else Opcode.MADD, VB + j, MB + j, YB))
                body.append(_st(YB, q * eb))
                blocks.append((q, b.block(f"chunk{q}", body, task="main", pe=q)))
            b.tree("vt", "main", list(range(v0, v0 + kk)), [(q, list(range(VB, VB + kk)), nm) for q, nm in blocks], eb)
            return k.finish(k.vec_entries(expected), op=name)
        if name == "VMM":
            kk, m = (dims + dims)[:2] if dims else (8, 8)
            v, M = get("v", (kk,), -128, 128), get("a", (kk, m), -128, 128)
            expected = ref_matmul(v.reshape(1, -1), M).reshape(-1)
            mq = k.vec_entries(expected).shape[0]
            m0 = k.add_input(M.reshape(-1, simd))
            v0 = k.add_input(k.bcast(v))
            VB, MB, YB = 0, kk, 2 * kk
            blocks = []
            for q in range(mq):
                body = [_ld(MB + j, (m0 + j * mq + q) * eb) for j in range(kk)]
                for j in range(kk):
                    body.append(_cal(Opcode.MUL if j == 0 else Opcode.MADD, VB + j, MB + j, YB))
                body.append(_st(YB, q * eb))
                blocks.append((q, b.block(f"chunk{q}", body, task="main", pe=q)))
            b.tree("vt", "main", list(range(v0, v0 + kk)), [(q, list(range(VB, VB + kk)), nm) for q, nm in blocks], eb)
            return k.finish(k.vec_entries(expected), op=name)
        # outer product: row i = u[i] * v, v shared by a tree
        n_, m = (dims + dims)[:2] if dims else (8, 8)
        u, v = get("u", (n_,), -128, 128), get("v", (m,), -128, 128)
        expected = ref_matmul(u.reshape(-1, 1), v.reshape(1, -1))
        mq = k.vec_entries(v).shape[0]
        u0 = k.add_input(k.bcast(u))
        v0 = k.add_input(k.vec_entries(v))
        UB, VB, CB = 0, 1, 1 + mq
        rows = []
        for i in range(n_):
            body = [_ld(UB, (u0 + i) * eb)]
            body += [_cal(Opcode.MUL, UB, VB + q, CB + q) for q in range(mq)]
            body += [_st(CB + q, (i * mq + q) * eb) for q in range(mq)]
            rows.append((i, b.block(f"row{i}", body, task="main", pe=i)))
        b.tree("vt", "main", list(range(v0, v0 + mq)), [(i, list(range(VB, VB + mq)), nm) for i, nm in rows], eb)
        return k.finish(k.vec_entries(expected), op=name)

    if name == "CONVOLVE":
        layer = ConvLayerSpec(*dims) if dims else LAYERS["conv12"]
        return gen_conv(layer, ReuseScheme.ALL, simd=simd, seed=seed)

    raise UnsupportedOp(f"{op}: unknown CISC instruction")


# -- synthetic workloads ---------------------------------------------------------------


def gen_madd_stream(n_pes: int = 64, length: int = 3968, iterations: int = 4, *, simd: int = 8,
                    seed: int = 0) -> Kernel:
    """Operands preloaded once (task prepare), then long MADD streams per PE.

    Eight rotating accumulators avoid back-to-back dependences; one ST per
    accumulator closes each iteration."""
    k = _Cisc(simd, seed)
    b, eb = k.b, k.eb
    A, X, ACC = 0, 8, 16
    a = k.rand((n_pes, 8, simd), -4, 4)
    x = k.rand((n_pes, 8, simd), -4, 4)
    base = k.add_input(np.concatenate([a, x], axis=1))
    exp = np.zeros((n_pes, 8, simd), dtype=np.int64)
    for p in range(n_pes):
        load = [_ld(A + j, (base + p * 16 + j) * eb) for j in range(8)]
        load += [_ld(X + j, (base + p * 16 + 8 + j) * eb) for j in range(8)]
        b.block(f"pre{p}", load, task="prepare", pe=p)
        body = []
        for t in range(length):
            acc = t % 8
            op = Opcode.MUL if t < 8 else Opcode.MADD
            body.append(_cal(op, A + (t // 8) % 8, X + (t * 3 + t // 8) % 8, ACC + acc))
            prod = a[p, (t // 8) % 8] * x[p, (t * 3 + t // 8) % 8]
            exp[p, acc] = prod if t < 8 else exp[p, acc] + prod
        body += [_st(ACC + j, (p * 8 + j) * eb) for j in range(8)]
        b.block(f"mac{p}", body, task="main", pe=p)
    tasks = [Task("prepare", "in", "out"), Task("main", "in", "out", iterations, 0, 0)]
    kern = k.finish(exp.reshape(-1, simd), op="madd_stream", tasks=tasks)
    kern.info.update(kind="stream", macs=n_pes * length * simd * iterations)
    return kern


def static_counts(kernel: Kernel, cfg: HardwareConfig | None = None) -> dict[str, int]:
    return kernel.translate(cfg or HardwareConfig()).static_counts()


def clone(kernel: Kernel) -> Kernel:
    return copy.deepcopy(kernel)


def conv_kernel(layer: ConvLayerSpec | str, scheme: ReuseScheme | str, *, instances: int = 1, simd: int = 8,
                seed: int = 0, density: float | None = None, mask_seed: int = 0) -> Kernel:
    """Convenience: gen_conv + gen_instances (+ gen_sparse when ``density`` is given)."""
    if isinstance(layer, str):
        try:
            layer = LAYERS[layer]
        except KeyError:
            raise KernelError(f"unknown layer {layer!r}; known: {sorted(LAYERS)}") from None
    kern = with_instances(gen_conv(layer, scheme, simd=simd, seed=seed), instances)
    if density is not None:
        mask = pruning_mask((layer.K, layer.C, layer.R, layer.R), density, mask_seed)
        kern = gen_sparse(kern, mask)
    return kern

