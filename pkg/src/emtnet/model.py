"""Network assembly: shared depthwise-separable encoder, classification head,
skip-connected segmentation decoder, and the weight-file plumbing.

Three variants share the encoder: ``emt-net`` carries both heads,
``single-clf`` only the classification head, ``single-sgm`` only the
segmentation branch.  ``width="toy"`` divides every channel count by 8 and
expects 64x64 inputs, small enough for finite-difference checks and fast
tests while keeping the exact layer topology.

Tap points are keyed by their full-width shapes (tap112, tap56, tap28,
bottleneck); the toy configuration reuses the keys at its scaled shapes.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .convolution import (
    ConvSpec,
    conv2d,
    conv_output_size,
    depthwise_conv2d,
    transposed_conv2d,
)
from .tensor import BatchNormState, Tensor, batch_norm, relu, sigmoid

__all__ = [
    "EMT_NET",
    "SINGLE_CLF",
    "SINGLE_SGM",
    "VARIANTS",
    "NetworkGraph",
    "HeadOutputs",
    "WeightStore",
    "build_encoder",
    "build_classification_head",
    "build_segmentation_branch",
    "assemble",
    "count_params",
    "init_weights",
    "save_weights",
    "load_weights",
    "forward",
]

EMT_NET = "emt-net"
SINGLE_CLF = "single-clf"
SINGLE_SGM = "single-sgm"
VARIANTS = (EMT_NET, SINGLE_CLF, SINGLE_SGM)

# encoder stages after the stem: (in_channels, out_channels, stride), full width
_ENCODER_BLOCKS = (
    (32, 64, 1),
    (64, 128, 2),
    (128, 128, 1),
    (128, 256, 2),
    (256, 256, 1),
    (256, 512, 2),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 512, 1),
    (512, 1024, 2),
    (1024, 1024, 1),
)
# skip sources, keyed by full-width tap names: block index -> tap name
_TAP_AFTER = {0: "tap112", 2: "tap56", 4: "tap28"}

_TOY_DIVISOR = 8
TOY_INPUT_SIZE = 64
FULL_INPUT_SIZE = 224

# canonical shape contract for the full-width network at 224x224 input
FULL_TAP_SHAPES = {
    "tap112": (64, 112, 112),
    "tap56": (128, 56, 56),
    "tap28": (256, 28, 28),
    "bottleneck": (1024, 7, 7),
}


def _width_divisor(width: str) -> int:
    if width == "full":
        return 1
    if width == "toy":
        return _TOY_DIVISOR
    raise ValueError(f"unknown width {width!r}, expected 'full' or 'toy'")


def default_input_size(width: str) -> int:
    return FULL_INPUT_SIZE if width == "full" else TOY_INPUT_SIZE


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Module:
    """Minimal composite: children are (name, Module), leaves expose params."""

    def children(self):
        return ()

    def local_params(self):
        return ()

    def local_buffers(self):
        return ()

    def set_buffer(self, name, value):
        raise KeyError(name)

    def init(self, rng):
        pass

    def named_params(self, prefix=""):
        for name, p in self.local_params():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix=""):
        for name, b in self.local_buffers():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self, prefix=""):
        yield prefix, self
        for cname, child in self.children():
            yield from child.modules(prefix + cname + ".")


class Conv2D(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, bias=False, dtype=np.float32):
        mode = "pointwise" if (kernel == 1 and stride == 1 and padding == 0) else "standard"
        self.spec = ConvSpec(kernel, kernel, stride, padding, mode)
        self.kernel = Tensor(np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None

    def local_params(self):
        yield "kernel", self.kernel
        if self.bias is not None:
            yield "bias", self.bias

    def init(self, rng):
        co, ci, kh, kw = self.kernel.data.shape
        std = np.sqrt(2.0 / (ci * kh * kw))
        self.kernel.data = rng.normal(0.0, std, self.kernel.data.shape).astype(self.kernel.data.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x):
        return conv2d(x, self.kernel, self.bias, self.spec)


class DepthwiseConv2D(Module):
    def __init__(self, channels, kernel=3, stride=1, padding=1, dtype=np.float32):
        self.spec = ConvSpec(kernel, kernel, stride, padding, "depthwise")
        self.kernel = Tensor(np.zeros((channels, 1, kernel, kernel), dtype=dtype), requires_grad=True)

    def local_params(self):
        yield "kernel", self.kernel

    def init(self, rng):
        _, _, kh, kw = self.kernel.data.shape
        std = np.sqrt(2.0 / (kh * kw))
        self.kernel.data = rng.normal(0.0, std, self.kernel.data.shape).astype(self.kernel.data.dtype)

    def forward(self, x):
        return depthwise_conv2d(x, self.kernel, self.spec)


class TransposedConv2D(Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=2, dtype=np.float32):
        self.spec = ConvSpec(kernel, kernel, stride, 0, "transposed")
        self.kernel = Tensor(np.zeros((in_ch, out_ch, kernel, kernel), dtype=dtype), requires_grad=True)

    def local_params(self):
        yield "kernel", self.kernel

    def init(self, rng):
        ci, _, kh, kw = self.kernel.data.shape
        std = np.sqrt(2.0 / (ci * kh * kw))
        self.kernel.data = rng.normal(0.0, std, self.kernel.data.shape).astype(self.kernel.data.dtype)

    def forward(self, x):
        return transposed_conv2d(x, self.kernel, self.spec)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        self.state = BatchNormState.create(channels, dtype=dtype)

    def local_params(self):
        yield "gamma", self.state.gamma
        yield "beta", self.state.beta

    def local_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def set_buffer(self, name, value):
        if name == "running_mean":
            self.state.running_mean = value.astype(self.state.running_mean.dtype)
        elif name == "running_var":
            self.state.running_var = value.astype(self.state.running_var.dtype)
        else:
            raise KeyError(name)

    def init(self, rng):
        c = self.state.gamma.data.shape[0]
        dt = self.state.gamma.data.dtype
        self.state.gamma.data = np.ones(c, dtype=dt)
        self.state.beta.data = np.zeros(c, dtype=dt)
        self.state.running_mean = np.zeros(c, dtype=dt)
        self.state.running_var = np.ones(c, dtype=dt)

    def forward(self, x, mode):
        self.state.mode = mode
        return batch_norm(x, self.state)


class Dense(Module):
    def __init__(self, in_f, out_f, dtype=np.float32):
        self.w = Tensor(np.zeros((in_f, out_f), dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True)

    def local_params(self):
        yield "w", self.w
        yield "b", self.b

    def init(self, rng):
        fan_in = self.w.data.shape[0]
        std = np.sqrt(2.0 / fan_in)
        self.w.data = rng.normal(0.0, std, self.w.data.shape).astype(self.w.data.dtype)
        self.b.data = np.zeros_like(self.b.data)

    def forward(self, x):
        return T.dense(x, self.w, self.b)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class DSConvBlock(Module):
    """Depthwise 3x3 -> BN -> ReLU -> pointwise 1x1 -> BN -> ReLU."""

    def __init__(self, in_ch, out_ch, stride, dtype=np.float32):
        self.dw = DepthwiseConv2D(in_ch, 3, stride, 1, dtype)
        self.bn1 = BatchNorm(in_ch, dtype)
        self.pw = Conv2D(in_ch, out_ch, 1, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype)

    def children(self):
        return (("dw", self.dw), ("bn1", self.bn1), ("pw", self.pw), ("bn2", self.bn2))

    def forward(self, x, mode):
        x = relu(self.bn1.forward(self.dw.forward(x), mode))
        return relu(self.bn2.forward(self.pw.forward(x), mode))


class DecoderBlock(Module):
    """1x1 conv (m -> m/4) -> BN -> ReLU -> 3x3 transposed conv stride 2
    (m/4 -> m/4) -> BN -> ReLU -> 1x1 conv (m/4 -> n) -> BN -> ReLU.

    Doubles the spatial size exactly; m must be divisible by 4.
    """

    def __init__(self, in_ch, out_ch, dtype=np.float32):
        if in_ch % 4:
            raise ValueError(f"decoder block input channels must be divisible by 4, got {in_ch}")
        mid = in_ch // 4
        self.squeeze = Conv2D(in_ch, mid, 1, dtype=dtype)
        self.bn1 = BatchNorm(mid, dtype)
        self.up = TransposedConv2D(mid, mid, 3, 2, dtype)
        self.bn2 = BatchNorm(mid, dtype)
        self.expand = Conv2D(mid, out_ch, 1, dtype=dtype)
        self.bn3 = BatchNorm(out_ch, dtype)

    def children(self):
        return (
            ("squeeze", self.squeeze), ("bn1", self.bn1),
            ("up", self.up), ("bn2", self.bn2),
            ("expand", self.expand), ("bn3", self.bn3),
        )

    def forward(self, x, mode):
        x = relu(self.bn1.forward(self.squeeze.forward(x), mode))
        x = relu(self.bn2.forward(self.up.forward(x), mode))
        return relu(self.bn3.forward(self.expand.forward(x), mode))


class Encoder(Module):
    def __init__(self, width="full", dtype=np.float32):
        div = _width_divisor(width)
        self.width = width
        self.stem = Conv2D(3, 32 // div, 3, stride=2, padding=1, dtype=dtype)
        self.stem_bn = BatchNorm(32 // div, dtype)
        self.blocks = [DSConvBlock(ci // div, co // div, s, dtype) for ci, co, s in _ENCODER_BLOCKS]
        self.out_channels = _ENCODER_BLOCKS[-1][1] // div

    def children(self):
        yield "stem", self.stem
        yield "stem_bn", self.stem_bn
        for i, b in enumerate(self.blocks):
            yield f"ds{i + 1:02d}", b

    def forward(self, x, mode):
        """Run the backbone; returns (bottleneck, taps dict)."""
        x = relu(self.stem_bn.forward(self.stem.forward(x), mode))
        taps = {}
        for i, block in enumerate(self.blocks):
            x = block.forward(x, mode)
            if i in _TAP_AFTER:
                taps[_TAP_AFTER[i]] = x
        return x, taps

    def infer_shapes(self, input_size: int):
        """Shape-arithmetic walk; returns {tap name: (C,H,W)} plus 'bottleneck'."""
        if input_size % 32:
            raise ValueError(f"encoder input size must be divisible by 32, got {input_size}")
        div = _width_divisor(self.width)
        size = conv_output_size(input_size, 3, 2, 1)
        shapes = {}
        for i, (_, co, s) in enumerate(_ENCODER_BLOCKS):
            if s != 1:
                size = conv_output_size(size, 3, s, 1)
            if i in _TAP_AFTER:
                shapes[_TAP_AFTER[i]] = (co // div, size, size)
        shapes["bottleneck"] = (self.out_channels, size, size)
        return shapes


class ClassificationHead(Module):
    """GAP -> dense+ReLU -> dropout 0.5 -> dense+ReLU -> dense 1 -> sigmoid."""

    DROP_RATE = 0.5

    def __init__(self, in_ch, width="full", dtype=np.float32):
        div = _width_divisor(width)
        self.fc1 = Dense(in_ch, 512 // div, dtype)
        self.fc2 = Dense(512 // div, 128 // div, dtype)
        self.fc3 = Dense(128 // div, 1, dtype)

    def children(self):
        return (("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3))

    def forward(self, bottleneck, mode, rng=None):
        x = T.global_avg_pool(bottleneck)
        x = relu(self.fc1.forward(x))
        x = T.dropout(x, self.DROP_RATE, rng=rng, mode=mode)
        x = relu(self.fc2.forward(x))
        return self.fc3.forward(x)  # logit of shape (N, 1)


class SegmentationBranch(Module):
    """Four decoder blocks with skip additions, then the upsampling mask head."""

    def __init__(self, width="full", dtype=np.float32):
        div = _width_divisor(width)
        self.d1 = DecoderBlock(1024 // div, 512 // div, dtype)
        self.d2 = DecoderBlock(512 // div, 256 // div, dtype)
        self.d3 = DecoderBlock(256 // div, 128 // div, dtype)
        self.d4 = DecoderBlock(128 // div, 64 // div, dtype)
        self.up = TransposedConv2D(64 // div, 32 // div, 3, 2, dtype)
        self.up_bn = BatchNorm(32 // div, dtype)
        self.out_conv = Conv2D(32 // div, 1, 1, bias=True, dtype=dtype)

    def children(self):
        return (
            ("d1", self.d1), ("d2", self.d2), ("d3", self.d3), ("d4", self.d4),
            ("up", self.up), ("up_bn", self.up_bn), ("out_conv", self.out_conv),
        )

    def forward(self, bottleneck, taps, mode):
        for name in ("tap28", "tap56", "tap112"):
            if name not in taps:
                raise ValueError(f"segmentation branch needs encoder tap {name!r}")
        x = self.d1.forward(bottleneck, mode)
        x = T.add(self.d2.forward(x, mode), taps["tap28"])
        x = T.add(self.d3.forward(x, mode), taps["tap56"])
        x = T.add(self.d4.forward(x, mode), taps["tap112"])
        x = relu(self.up_bn.forward(self.up.forward(x), mode))
        return self.out_conv.forward(x)  # mask logits (N,1,H,W)


@dataclass
class HeadOutputs:
    """Per-head tensors from one shared-encoder pass; absent heads are None."""

    class_logit: Tensor | None = None
    class_prob: Tensor | None = None
    mask_logit: Tensor | None = None
    mask_prob: Tensor | None = None


class NetworkGraph(Module):
    def __init__(self, variant, width="full", input_size=None, dtype=np.float32):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.variant = variant
        self.width = width
        self.input_size = default_input_size(width) if input_size is None else input_size
        self.dtype = np.dtype(dtype)
        self.encoder = Encoder(width, dtype)
        self.clf_head = (
            ClassificationHead(self.encoder.out_channels, width, dtype)
            if variant in (EMT_NET, SINGLE_CLF) else None
        )
        self.seg_branch = SegmentationBranch(width, dtype) if variant in (EMT_NET, SINGLE_SGM) else None
        self.tap_shapes = self._check_shapes()

    @property
    def has_clf(self):
        return self.clf_head is not None

    @property
    def has_seg(self):
        return self.seg_branch is not None

    def children(self):
        yield "encoder", self.encoder
        if self.clf_head is not None:
            yield "clf", self.clf_head
        if self.seg_branch is not None:
            yield "seg", self.seg_branch

    def _check_shapes(self):
        """Validate the tap/bottleneck shape contract at build time."""
        shapes = self.encoder.infer_shapes(self.input_size)
        if self.width == "full" and self.input_size == FULL_INPUT_SIZE:
            for name, expected in FULL_TAP_SHAPES.items():
                if shapes[name] != expected:
                    raise AssertionError(
                        f"shape contract violated: {name} is {shapes[name]}, expected {expected}"
                    )
        size = shapes["bottleneck"][1]
        if self.seg_branch is not None and size * 32 != self.input_size:
            raise AssertionError(
                f"decoder chain cannot recover {self.input_size} from bottleneck size {size}"
            )
        return shapes

    def apply(self, x, mode="train", rng=None) -> HeadOutputs:
        """Shared-encoder pass building the autodiff graph (for training)."""
        x = T.astensor(x)
        n = x.data.shape[0] if x.data.ndim == 4 else 0
        expect = (n, 3, self.input_size, self.input_size)
        if x.data.ndim != 4 or x.data.shape != expect:
            raise ValueError(f"forward: input shape {x.data.shape} != expected {expect}")
        if mode not in ("train", "infer"):
            raise ValueError(f"forward: unknown mode {mode!r}")
        bottleneck, taps = self.encoder.forward(x, mode)
        out = HeadOutputs()
        if self.clf_head is not None:
            out.class_logit = self.clf_head.forward(bottleneck, mode, rng)
            out.class_prob = sigmoid(out.class_logit)
        if self.seg_branch is not None:
            out.mask_logit = self.seg_branch.forward(bottleneck, taps, mode)
            out.mask_prob = sigmoid(out.mask_logit)
        return out

    # -- persistence ---------------------------------------------------------

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_params()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        state = dict(state)
        for name, p in self.named_params():
            if name not in state:
                raise ValueError(f"weights missing parameter {name!r} for variant {self.variant}")
            arr = state.pop(name)
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: file has {tuple(arr.shape)}, "
                    f"graph needs {tuple(p.data.shape)}"
                )
            p.data = np.ascontiguousarray(arr.astype(p.data.dtype))
        for prefix, mod in self.modules():
            for bname, buf in mod.local_buffers():
                full = prefix + bname
                if full not in state:
                    raise ValueError(f"weights missing buffer {full!r}")
                arr = state.pop(full)
                if tuple(arr.shape) != tuple(buf.shape):
                    raise ValueError(
                        f"shape mismatch for {full!r}: file has {tuple(arr.shape)}, "
                        f"graph needs {tuple(buf.shape)}"
                    )
                mod.set_buffer(bname, arr)
        if state:
            extra = sorted(state)[0]
            raise ValueError(f"weights contain {extra!r}, which variant {self.variant} does not define")

    def meta(self):
        return {"variant": self.variant, "width": self.width, "input_size": self.input_size}


# ---------------------------------------------------------------------------
# module-level build API
# ---------------------------------------------------------------------------

def build_encoder(input_size: int = FULL_INPUT_SIZE, width: str = "full") -> Encoder:
    enc = Encoder(width)
    enc.infer_shapes(input_size)  # validates divisibility
    return enc


def build_classification_head(width: str = "full") -> ClassificationHead:
    div = _width_divisor(width)
    return ClassificationHead(1024 // div, width)


def build_segmentation_branch(width: str = "full") -> SegmentationBranch:
    return SegmentationBranch(width)


def assemble(variant: str, width: str = "full", input_size: int | None = None,
             dtype=np.float32) -> NetworkGraph:
    """Build a variant with zeroed weights; call init_weights before use."""
    return NetworkGraph(variant, width, input_size, dtype)


def count_params(graph: Module) -> int:
    """Learnable element count (kernels, dense weights, biases, BN affine)."""
    return sum(p.data.size for _, p in graph.named_params())


def init_weights(graph: NetworkGraph, scheme: str = "he_normal", seed: int = 0) -> "WeightStore":
    """Fan-in-scaled normal init for conv/dense, identity affine for BN."""
    if scheme != "he_normal":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    for _, mod in graph.modules():
        mod.init(rng)
    return WeightStore(graph.state_dict(), meta=graph.meta())


# ---------------------------------------------------------------------------
# weight files: UTF-8 manifest + little-endian float32 blob
# ---------------------------------------------------------------------------

_MAGIC = "EMTW1"


class WeightStore:
    """Named parameter arrays plus manifest metadata; file round trips bitwise.

    Layout: a magic line, a JSON metadata line, ``params <n>``, one manifest
    record per parameter (``name shape dtype offset``, offset into the blob),
    ``blob <nbytes>``, then the raw little-endian float32 values.
    """

    def __init__(self, tensors: dict, meta: dict | None = None):
        self.tensors = {k: np.asarray(v) for k, v in tensors.items()}
        self.meta = dict(meta or {})

    def __eq__(self, other):
        return (
            isinstance(other, WeightStore)
            and self.meta == other.meta
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )

    def nbytes(self) -> int:
        return sum(4 * v.size for v in self.tensors.values())

    def save(self, path):
        header = io.StringIO()
        header.write(_MAGIC + "\n")
        header.write("meta " + json.dumps(self.meta, sort_keys=True) + "\n")
        header.write(f"params {len(self.tensors)}\n")
        blobs = []
        offset = 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            shape = ",".join(str(d) for d in arr.shape) or "scalar"
            header.write(f"{name} {shape} f4 {offset}\n")
            blobs.append(raw)
            offset += len(raw)
        header.write(f"blob {offset}\n")
        with open(path, "wb") as fh:
            fh.write(header.getvalue().encode("utf-8"))
            for raw in blobs:
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as fh:
            data = fh.read()
        try:
            head_end = 0
            lines = []
            view = data
            # manifest is line-oriented UTF-8 up to and including the blob line
            while True:
                nl = view.find(b"\n", head_end)
                if nl < 0:
                    raise ValueError("manifest ended before blob marker")
                line = view[head_end:nl].decode("utf-8")
                lines.append(line)
                head_end = nl + 1
                if line.startswith("blob "):
                    break
            if lines[0] != _MAGIC:
                raise ValueError(f"bad magic {lines[0]!r}")
            if not lines[1].startswith("meta "):
                raise ValueError("missing metadata line")
            meta = json.loads(lines[1][5:])
            if not lines[2].startswith("params "):
                raise ValueError("missing parameter count")
            count = int(lines[2].split()[1])
            records = lines[3:3 + count]
            if len(records) != count or len(lines) != count + 4:
                raise ValueError(f"expected {count} manifest records, found {len(lines) - 4}")
            blob_size = int(lines[-1].split()[1])
            blob = data[head_end:]
            if len(blob) != blob_size:
                raise ValueError(f"blob truncated: manifest says {blob_size} bytes, file has {len(blob)}")
            tensors = {}
            for rec in records:
                name, shape_s, dtype_s, off_s = rec.split(" ")
                if dtype_s != "f4":
                    raise ValueError(f"unsupported dtype {dtype_s!r} for {name!r}")
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
                n = int(np.prod(shape)) if shape else 1
                off = int(off_s)
                raw = blob[off:off + 4 * n]
                if len(raw) != 4 * n:
                    raise ValueError(f"blob truncated while reading {name!r}")
                tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        except (IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"corrupt weight file {path}: {exc}") from exc
        return cls(tensors, meta)


def save_weights(store: WeightStore, path):
    store.save(path)


def load_weights(path) -> WeightStore:
    return WeightStore.load(path)


def graph_from_store(store: WeightStore) -> NetworkGraph:
    """Rebuild the graph a weight file describes and load it."""
    meta = store.meta
    for key in ("variant", "width", "input_size"):
        if key not in meta:
            raise ValueError(f"weight file metadata missing {key!r}")
    graph = NetworkGraph(meta["variant"], meta["width"], int(meta["input_size"]))
    graph.load_state_dict(store.tensors)
    return graph


def forward(graph: NetworkGraph, batch, mode: str = "infer", rng=None):
    """Inference-facing pass: numpy in, numpy out, both heads where present.

    Returns ``(class_prob, mask_prob)``; a missing head yields None.  The
    class output is one probability per sample.
    """
    batch = np.asarray(batch)
    if mode == "infer":
        with T.no_grad():
            out = graph.apply(Tensor(batch.astype(graph.dtype, copy=False)), mode, rng)
    else:
        out = graph.apply(Tensor(batch.astype(graph.dtype, copy=False)), mode, rng)
    class_prob = out.class_prob.data.reshape(-1).copy() if out.class_prob is not None else None
    mask_prob = out.mask_prob.data.copy() if out.mask_prob is not None else None
    return class_prob, mask_prob
