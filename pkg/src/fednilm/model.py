"""The disaggregation network: encoder, temporal pooling, decoder.

The network maps a normalized aggregate-load window of fixed length to one
(OFF, ON) logit pair per appliance per step.  The encoder trades temporal
resolution for channels, the temporal-pooling block mixes four average-pool
scales back into the feature map, and the decoder restores the original
resolution.  All layers come from `fednilm.tensor` and the backward pass is
composed by hand in reverse order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import LayoutEntry, ParamVector, ShapeError, Tensor

# pool-scale divisors of the temporal-pooling branches: whole signal down to
# one sixth of it
_BRANCH_DIVISORS = (1, 2, 3, 6)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; equal configs yield equal param layouts."""

    window_len: int = 126
    appliance_count: int = 3
    encoder_channels: tuple[int, int, int] = (64, 128, 256)
    downsample_factors: tuple[int, int] = (2, 5)
    pool_branch_count: int = 4
    branch_channels: int = 64
    decoder_channels: int = 64
    dropout_p: float = 0.1
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.appliance_count < 1:
            raise ValueError("appliance_count must be >= 1")
        total_down = math.prod(self.downsample_factors)
        if self.window_len < total_down:
            raise ValueError(
                f"window_len {self.window_len} shorter than total downsampling {total_down}"
            )
        if self.pool_branch_count != len(_BRANCH_DIVISORS):
            raise ValueError(f"pool_branch_count must be {len(_BRANCH_DIVISORS)}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if len(self.encoder_channels) != 3 or len(self.downsample_factors) != 2:
            raise ValueError("expected 3 encoder stages and 2 downsample factors")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def total_downsample(self) -> int:
        return math.prod(self.downsample_factors)

    def encoded_len(self) -> int:
        """Length of the encoder output under ceiling-mode pooling."""
        n = self.window_len
        for f in self.downsample_factors:
            n = T.avg_pool1d_out_len(n, f, f)
        return n

    def branch_pool_sizes(self) -> tuple[int, ...]:
        n = self.encoded_len()
        return tuple(-(-n // d) for d in _BRANCH_DIVISORS)


def _pad_steps(x: np.ndarray, before: int, after: int) -> np.ndarray:
    """Zero-pad a channels-last (B, L, C) array along the step axis."""
    if not before and not after:
        return x
    b, length, c = x.shape
    out = np.zeros((b, before + length + after, c), dtype=x.dtype)
    out[:, before : before + length, :] = x
    return out


class _Conv1d:
    """Convolution on channels-last activations, lowered to one GEMM.

    Weights keep the canonical (Cout, Cin, K) shape as views into the model's
    flat buffers; the GEMM operand is a (K·Cin, Cout) copy rebuilt per pass.
    Activations are (B, L, C) so patch extraction and the GEMM output need no
    transposes.
    """

    def __init__(self, layer_id: str, cin: int, cout: int, kernel: int, padding: int):
        self.layer_id = layer_id
        self.cin = cin
        self.cout = cout
        self.kernel = kernel
        self.padding = padding
        self.weight: Tensor | None = None
        self.bias: Tensor | None = None
        self._cache: tuple | None = None
        # reusable work buffers; batch shape is constant within a training run,
        # so fresh large allocations (and their page faults) happen only once
        self._buffers: dict = {}

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [("weight", (self.cout, self.cin, self.kernel)), ("bias", (self.cout,))]

    def _buf(self, key: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        buf = self._buffers.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._buffers[key] = buf
        return buf

    def _weight_matrix(self) -> np.ndarray:
        wmat = self._buf("wmat", (self.kernel * self.cin, self.cout), self.weight.data.dtype)
        wmat.reshape(self.kernel, self.cin, self.cout)[...] = self.weight.data.transpose(2, 1, 0)
        return wmat

    def forward(self, x: np.ndarray, keep_cache: bool) -> np.ndarray:
        if x.shape[2] != self.cin:
            raise ShapeError(
                "channels", f"{self.layer_id}: got {x.shape[2]} channels, expected {self.cin}"
            )
        b, length, _ = x.shape
        lout = length + 2 * self.padding - self.kernel + 1
        if self.kernel == 1 and self.padding == 0:
            cols = np.ascontiguousarray(x).reshape(b * length, self.cin)
        else:
            xp = x
            if self.padding:
                xp = self._buf("xp", (b, length + 2 * self.padding, self.cin), x.dtype)
                xp[:, : self.padding, :] = 0
                xp[:, self.padding + length :, :] = 0
                xp[:, self.padding : self.padding + length, :] = x
            cols3 = self._buf("cols", (b, lout, self.kernel * self.cin), x.dtype)
            for k in range(self.kernel):
                cols3[:, :, k * self.cin : (k + 1) * self.cin] = xp[:, k : k + lout, :]
            cols = cols3.reshape(b * lout, self.kernel * self.cin)
        wmat = self._weight_matrix()
        out = self._buf("out", (b * lout, self.cout), x.dtype)
        np.matmul(cols, wmat, out=out)
        out += self.bias.data
        if keep_cache:
            self._cache = (cols, wmat, b, length, lout)
        return out.reshape(b, lout, self.cout)

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        if self._cache is None:
            raise RuntimeError(f"{self.layer_id}: backward called without a cached forward")
        cols, wmat, b, length, lout = self._cache
        self._cache = None
        gy = grad_out.reshape(b * lout, self.cout)
        gwmat = self._buf("gwmat", (self.kernel * self.cin, self.cout), gy.dtype)
        np.matmul(cols.T, gy, out=gwmat)
        self.weight.grad += gwmat.reshape(self.kernel, self.cin, self.cout).transpose(2, 1, 0)
        self.bias.grad += gy.sum(axis=0)
        if not need_input_grad:
            return None
        gcols = self._buf("gcols", (b * lout, self.kernel * self.cin), gy.dtype)
        np.matmul(gy, wmat.T, out=gcols)
        gcols = gcols.reshape(b, lout, self.kernel, self.cin)
        if self.kernel == 1 and self.padding == 0:
            return gcols.reshape(b, length, self.cin)
        gxp = self._buf("gxp", (b, length + 2 * self.padding, self.cin), gy.dtype)
        gxp[...] = 0
        for k in range(self.kernel):
            gxp[:, k : k + lout, :] += gcols[:, :, k, :]
        return gxp[:, self.padding : self.padding + length, :]


def _pool_steps(x: np.ndarray, size: int) -> np.ndarray:
    """Non-overlapping ceiling-mode average pooling on (B, L, C) activations."""
    b, length, c = x.shape
    full = length // size
    lout = full + (1 if length % size else 0)
    out = np.empty((b, lout, c), dtype=x.dtype)
    if full:
        out[:, :full, :] = x[:, : full * size, :].reshape(b, full, size, c).mean(axis=2)
    if lout > full:
        out[:, full, :] = x[:, full * size :, :].mean(axis=1)
    return out


def _pool_steps_backward(grad_out: np.ndarray, length: int, size: int) -> np.ndarray:
    b, lout, c = grad_out.shape
    full = length // size
    gx = np.empty((b, length, c), dtype=grad_out.dtype)
    if full:
        spread = np.broadcast_to(
            grad_out[:, :full, None, :] / size, (b, full, size, c)
        )
        gx[:, : full * size, :] = spread.reshape(b, full * size, c)
    if lout > full:
        tail = length - full * size
        gx[:, full * size :, :] = grad_out[:, full : full + 1, :] / tail
    return gx


def _repeat_steps(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling on (B, L, C) activations."""
    if factor == 1:
        return x
    b, length, c = x.shape
    return np.broadcast_to(x[:, :, None, :], (b, length, factor, c)).reshape(
        b, length * factor, c
    )


def _repeat_steps_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad_out
    b, length, c = grad_out.shape
    return grad_out.reshape(b, length // factor, factor, c).sum(axis=2)


class NilmModel:
    """The appliance-state network with hand-composed backpropagation.

    Parameters live in one flat value buffer (plus a flat gradient buffer);
    each layer's weight and bias are reshaped views into them, so flattening
    to a ParamVector is a copy and loading one is bit-exact.  An instance is
    single-owner; clone via (config, flatten_params) to parallelize.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.mode = "evaluation"
        self._build_layers()
        self._allocate_params()
        self._init_params()
        self._cache: dict | None = None

    # -- construction -------------------------------------------------------

    def _build_layers(self) -> None:
        cfg = self.config
        c1, c2, c3 = cfg.encoder_channels
        self.enc1 = _Conv1d("enc_conv1", 1, c1, 3, 1)
        self.enc2 = _Conv1d("enc_conv2", c1, c2, 3, 1)
        self.enc3 = _Conv1d("enc_conv3", c2, c3, 3, 1)
        self.branches = [
            _Conv1d(f"pool_branch{j + 1}", c3, cfg.branch_channels, 1, 0)
            for j in range(cfg.pool_branch_count)
        ]
        fused_in = c3 + cfg.pool_branch_count * cfg.branch_channels
        self.fuse = _Conv1d("fuse_conv", fused_in, c3, 1, 0)
        self.dec1 = _Conv1d("dec_conv1", c3, cfg.decoder_channels, 3, 1)
        self.dec2 = _Conv1d("dec_conv2", cfg.decoder_channels, 2 * cfg.appliance_count, 1, 0)
        self.layers: list[_Conv1d] = [
            self.enc1,
            self.enc2,
            self.enc3,
            *self.branches,
            self.fuse,
            self.dec1,
            self.dec2,
        ]

    def _allocate_params(self) -> None:
        entries = []
        offset = 0
        for layer in self.layers:
            for name, shape in layer.param_shapes():
                entries.append(LayoutEntry(layer.layer_id, name, shape, offset))
                offset += int(np.prod(shape))
        self._layout = tuple(entries)
        dtype = _DTYPES[self.config.dtype]
        self._values = np.zeros(offset, dtype=dtype)
        self._grads = np.zeros(offset, dtype=dtype)
        by_key = {}
        for entry in self._layout:
            sl = slice(entry.offset, entry.offset + entry.size)
            by_key[(entry.layer, entry.name)] = Tensor(
                self._values[sl].reshape(entry.shape), self._grads[sl].reshape(entry.shape)
            )
        for layer in self.layers:
            layer.weight = by_key[(layer.layer_id, "weight")]
            layer.bias = by_key[(layer.layer_id, "bias")]

    def _init_params(self) -> None:
        # uniform in ±sqrt(6/(fan_in+fan_out)) per weight tensor, drawn from
        # the init seed in layout order; biases stay zero
        rng = np.random.default_rng(self.config.init_seed)
        for layer in self.layers:
            fan_in = layer.cin * layer.kernel
            fan_out = layer.cout * layer.kernel
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            draw = rng.uniform(-bound, bound, size=layer.weight.data.shape)
            layer.weight.data[...] = draw.astype(layer.weight.data.dtype)

    # -- parameter exchange ---------------------------------------------------

    @property
    def param_count(self) -> int:
        return int(self._values.size)

    def params_buffer(self) -> np.ndarray:
        """The live flat value buffer (shared with the layers; single-owner)."""
        return self._values

    def grads_buffer(self) -> np.ndarray:
        return self._grads

    def flatten_params(self) -> ParamVector:
        return ParamVector(self._values.copy(), self._layout)

    def flatten_grads(self) -> ParamVector:
        return ParamVector(self._grads.copy(), self._layout)

    def load_params(self, pv: ParamVector) -> None:
        if pv.layout:
            T.check_same_layout(pv, ParamVector(self._values, self._layout))
        elif pv.size != self._values.size:
            raise T.LayoutError(
                f"vector length {pv.size} != model parameter count {self._values.size}"
            )
        self._values[...] = pv.values

    def zero_grad(self) -> None:
        self._grads[...] = 0

    def clone(self) -> "NilmModel":
        other = NilmModel(self.config)
        other._values[...] = self._values
        return other

    # -- forward / backward ---------------------------------------------------

    def train_mode(self) -> None:
        self.mode = "training"

    def eval_mode(self) -> None:
        self.mode = "evaluation"

    def forward(self, batch: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Map (B, 1, window_len) inputs to (B, 2·I, window_len) logits.

        In training mode the intermediate activations are cached for
        backward() and dropout draws from `rng`.  Internally the network runs
        channels-last so the convolution GEMMs need no transposes.
        """
        cfg = self.config
        x = np.asarray(batch, dtype=self._values.dtype)
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeError("channels", f"expected (B, 1, L) input, got {x.shape}")
        if x.shape[2] != cfg.window_len:
            raise ShapeError(
                "length", f"input length {x.shape[2]} != window length {cfg.window_len}"
            )
        training = self.mode == "training"
        f1, f2 = cfg.downsample_factors
        x = np.ascontiguousarray(x.transpose(0, 2, 1))  # (B, L, 1)

        # ReLUs run in place on each conv's output buffer; the backward gate
        # on x > 0 is unchanged by rectifying first
        a1 = self.enc1.forward(x, training)
        r1 = np.maximum(a1, 0, out=a1)
        p1 = _pool_steps(r1, f1)
        a2 = self.enc2.forward(p1, training)
        r2 = np.maximum(a2, 0, out=a2)
        p2 = _pool_steps(r2, f2)
        a3 = self.enc3.forward(p2, training)
        feat = np.maximum(a3, 0, out=a3)
        l_enc = feat.shape[1]

        branch_outs = []
        branch_meta = []
        for layer, size in zip(self.branches, cfg.branch_pool_sizes()):
            pooled = _pool_steps(feat, size)
            lp = pooled.shape[1]
            factor = -(-l_enc // lp)
            act = layer.forward(pooled, training)
            bre = np.maximum(act, 0, out=act)
            up = _repeat_steps(bre, factor)
            branch_outs.append(up[:, :l_enc, :])
            branch_meta.append((size, lp, factor, act))
        cat = np.concatenate([feat] + branch_outs, axis=2)
        af = self.fuse.forward(cat, training)
        rf = np.maximum(af, 0, out=af)
        dropped, drop_mult = T.dropout(rf, cfg.dropout_p, rng, training)

        up10 = _repeat_steps(dropped, cfg.total_downsample)
        dec_in = np.ascontiguousarray(up10[:, : cfg.window_len, :])
        a4 = self.dec1.forward(dec_in, training)
        r4 = np.maximum(a4, 0, out=a4)
        out = self.dec2.forward(r4, training)

        if training:
            self._cache = dict(
                a1=a1, r1_len=r1.shape[1], a2=a2, r2_len=r2.shape[1], a3=a3,
                l_enc=l_enc, branch_meta=branch_meta, af=af, drop_mult=drop_mult,
                up10_len=up10.shape[1], a4=a4,
            )
        else:
            self._cache = None
        return np.ascontiguousarray(out.transpose(0, 2, 1))

    def backward(self, grad_logits: np.ndarray) -> None:
        """Accumulate parameter gradients from the upstream logit gradient."""
        if self._cache is None:
            raise RuntimeError("backward requires a preceding training-mode forward")
        cfg = self.config
        c = self._cache
        self._cache = None
        f1, f2 = cfg.downsample_factors
        g_out = np.ascontiguousarray(
            np.asarray(grad_logits, dtype=self._values.dtype).transpose(0, 2, 1)
        )

        g_r4 = self.dec2.backward(g_out)
        g_a4 = T.relu_backward(c["a4"], g_r4)
        g_dec_in = self.dec1.backward(g_a4)
        g_up10 = _pad_steps(g_dec_in, 0, c["up10_len"] - cfg.window_len)
        g_drop = _repeat_steps_backward(g_up10, cfg.total_downsample)
        g_rf = g_drop * c["drop_mult"] if c["drop_mult"] is not None else g_drop
        g_af = T.relu_backward(c["af"], g_rf)
        g_cat = self.fuse.backward(g_af)

        c3 = cfg.encoder_channels[2]
        g_feat = np.ascontiguousarray(g_cat[:, :, :c3])
        l_enc = c["l_enc"]
        offset = c3
        for layer, meta in zip(self.branches, c["branch_meta"]):
            size, lp, factor, act = meta
            g_w = g_cat[:, :, offset : offset + cfg.branch_channels]
            offset += cfg.branch_channels
            g_up = _pad_steps(np.ascontiguousarray(g_w), 0, lp * factor - l_enc)
            g_bre = _repeat_steps_backward(g_up, factor)
            g_act = T.relu_backward(act, g_bre)
            g_pooled = layer.backward(g_act)
            g_feat += _pool_steps_backward(g_pooled, l_enc, size)

        g_a3 = T.relu_backward(c["a3"], g_feat)
        g_p2 = self.enc3.backward(g_a3)
        g_r2 = _pool_steps_backward(g_p2, c["r2_len"], f2)
        g_a2 = T.relu_backward(c["a2"], g_r2)
        g_p1 = self.enc2.backward(g_a2)
        g_r1 = _pool_steps_backward(g_p1, c["r1_len"], f1)
        g_a1 = T.relu_backward(c["a1"], g_r1)
        self.enc1.backward(g_a1, need_input_grad=False)


def build_model(config: ModelConfig) -> NilmModel:
    return NilmModel(config)


def predict_states(model: NilmModel, batch: np.ndarray) -> np.ndarray:
    """Binary (B, I, window_len) states; ON-probability >= 0.5 maps to 1."""
    prev = model.mode
    model.eval_mode()
    logits = model.forward(batch)
    model.mode = prev
    diff = logits[:, 1::2, :] - logits[:, 0::2, :]
    return (diff >= 0).astype(np.uint8)


def on_probabilities(model: NilmModel, batch: np.ndarray) -> np.ndarray:
    """Per-appliance ON probabilities, shape (B, I, window_len)."""
    prev = model.mode
    model.eval_mode()
    logits = model.forward(batch)
    model.mode = prev
    diff = logits[:, 1::2, :] - logits[:, 0::2, :]
    out = np.empty_like(diff)
    pos = diff >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-diff[pos]))
    ez = np.exp(diff[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FNLM"
CHECKPOINT_VERSION = 1


def _pack_config(cfg: ModelConfig) -> bytes:
    head = struct.pack(
        "<IIB", cfg.window_len, cfg.appliance_count, len(cfg.encoder_channels)
    )
    head += struct.pack(f"<{len(cfg.encoder_channels)}I", *cfg.encoder_channels)
    head += struct.pack("<B", len(cfg.downsample_factors))
    head += struct.pack(f"<{len(cfg.downsample_factors)}I", *cfg.downsample_factors)
    head += struct.pack(
        "<IIIdQ",
        cfg.pool_branch_count,
        cfg.branch_channels,
        cfg.decoder_channels,
        cfg.dropout_p,
        cfg.init_seed,
    )
    return head


def _unpack_config(buf: bytes, offset: int) -> tuple[ModelConfig, int]:
    window_len, appliances, n_enc = struct.unpack_from("<IIB", buf, offset)
    offset += struct.calcsize("<IIB")
    enc = struct.unpack_from(f"<{n_enc}I", buf, offset)
    offset += 4 * n_enc
    (n_ds,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    ds = struct.unpack_from(f"<{n_ds}I", buf, offset)
    offset += 4 * n_ds
    branches, branch_ch, dec_ch, dropout_p, seed = struct.unpack_from("<IIIdQ", buf, offset)
    offset += struct.calcsize("<IIIdQ")
    cfg = ModelConfig(
        window_len=window_len,
        appliance_count=appliances,
        encoder_channels=tuple(enc),
        downsample_factors=tuple(ds),
        pool_branch_count=branches,
        branch_channels=branch_ch,
        decoder_channels=dec_ch,
        dropout_p=dropout_p,
        init_seed=seed,
    )
    return cfg, offset


def save_checkpoint(model: NilmModel, path) -> None:
    """Write magic, version, config fields, then the params as little-endian f32."""
    values = model.params_buffer().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(_pack_config(model.config))
        fh.write(struct.pack("<I", values.size))
        fh.write(values.tobytes())


def load_checkpoint(path, dtype: str = "float32") -> NilmModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a model checkpoint: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg, offset = _unpack_config(buf, 6)
    cfg = replace(cfg, dtype=dtype)
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    model = NilmModel(cfg)
    if values.size != model.param_count:
        raise T.LayoutError(
            f"checkpoint holds {values.size} parameters, model expects {model.param_count}"
        )
    model.params_buffer()[...] = values.astype(model.params_buffer().dtype)
    return model
