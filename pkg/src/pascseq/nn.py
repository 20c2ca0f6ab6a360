"""Layers and the four sequence classifiers, built on :mod:`pascseq.autodiff`.

Architectures:

* ``uni-lstm``      stacked LSTM, final hidden state -> linear head
* ``bi-lstm``       stacked BiLSTM, concatenated final states -> linear head
* ``bi-lstm-attn``  BiLSTM hiddens -> additive self-attention -> linear head
* ``bi-lstm-cnn``   conv1d/batch-norm/relu -> maxpool -> BiLSTM -> linear head

The embedding table is a constant input and never receives gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, FormatError, UsageError, VocabularyError

ARCHITECTURES = ("uni-lstm", "bi-lstm", "bi-lstm-attn", "bi-lstm-cnn")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    embedding_dim: int = 200
    hidden: int = 128
    layers: int = 2
    conv_channels: int = 256
    kernel: int = 3
    pool: int = 2
    attention_width: int = 128
    n_classes: int = 2
    max_len: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise UsageError(
                f"unknown architecture {self.architecture!r}; valid names: {', '.join(ARCHITECTURES)}"
            )
        for name in ("embedding_dim", "hidden", "layers", "conv_channels", "kernel", "pool",
                     "attention_width", "n_classes", "max_len"):
            if getattr(self, name) <= 0:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def bidirectional(self) -> bool:
        return self.architecture != "uni-lstm"


@dataclass
class LstmDirection:
    w_ih: Tensor  # [4H, D_in], gate blocks ordered input, forget, cell, output
    w_hh: Tensor  # [4H, H]
    b: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]


@dataclass
class LstmParams:
    """``layers[l]`` holds one direction (uni) or ``(forward, backward)``."""

    layers: list[tuple[LstmDirection, ...]]

    @property
    def hidden(self) -> int:
        return self.layers[0][0].hidden


@dataclass
class AttentionParams:
    w: Tensor  # [A, 2H]
    b: Tensor  # [A]
    v: Tensor  # [A]


@dataclass
class ConvUnitParams:
    weight: Tensor  # [C_out, C_in, k]
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def lstm_param_count(d_in: int, hidden: int) -> int:
    """Learnable scalars in one LSTM direction of one layer."""
    return 4 * (hidden * d_in + hidden * hidden + hidden)


# ---------------------------------------------------------------------- layers


def lstm_cell(x_t, h, c, params: LstmDirection) -> tuple[Tensor, Tensor]:
    return ad.lstm_cell(x_t, h, c, params.w_ih, params.w_hh, params.b)


def _run_direction(steps: list[Tensor], params: LstmDirection, reverse: bool) -> list[Tensor]:
    batch_shape = steps[0].shape[:-1]
    h = Tensor(np.zeros(batch_shape + (params.hidden,)))
    c = Tensor(np.zeros(batch_shape + (params.hidden,)))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    out: list[Tensor | None] = [None] * len(steps)
    for t in order:
        h, c = lstm_cell(steps[t], h, c, params)
        out[t] = h
    return out  # type: ignore[return-value]


def lstm_stack(seq, params: LstmParams) -> tuple[Tensor, Tensor]:
    """Run stacked (Bi)LSTM over ``seq`` [L, D] or [B, L, D].

    Returns per-step hiddens [.., L, dirs*H] and the final state [.., dirs*H]:
    the last step of the forward pass joined with the first step of the
    backward pass, which is where each direction finishes.
    """
    seq = ad.as_tensor(seq)
    if seq.ndim not in (2, 3) or seq.shape[-2] < 1:
        raise UsageError(f"LSTM input must be a non-empty [L, D] or [B, L, D] sequence, got {seq.shape}")
    time_axis = seq.ndim - 2
    steps = ad.unstack(seq, axis=time_axis)
    final = None
    for layer in params.layers:
        outs = [_run_direction(steps, d, reverse=(j == 1)) for j, d in enumerate(layer)]
        if len(outs) == 1:
            steps = outs[0]
            final = steps[-1]
        else:
            fwd, bwd = outs
            steps = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
            final = ad.concat([fwd[-1], bwd[0]], axis=-1)
    return ad.stack(steps, axis=time_axis), final


def bilstm_forward(seq, params: LstmParams) -> Tensor:
    return lstm_stack(seq, params)[0]


def attention(hidden, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Additive self-attention: u = tanh(W h + b), alpha = softmax(v.u), s = sum alpha h."""
    hidden = ad.as_tensor(hidden)
    single = hidden.ndim == 2
    if single:
        hidden = ad.reshape(hidden, (1,) + hidden.shape)
    n, m, width = hidden.shape
    if m < 1:
        raise UsageError("attention needs at least one timestep")
    u = ad.tanh(ad.add(ad.matmul(hidden, ad.transpose(params.w)), params.b))
    scores = ad.reshape(ad.matmul(u, ad.reshape(params.v, (-1, 1))), (n, m))
    alpha = ad.softmax(scores, axis=-1)
    s = ad.reshape(ad.matmul(ad.reshape(alpha, (n, 1, m)), hidden), (n, width))
    if single:
        return ad.reshape(s, (width,)), ad.reshape(alpha, (m,))
    return s, alpha


def conv_unit_forward(x, params: ConvUnitParams, training: bool, capture: dict | None = None) -> Tensor:
    """conv1d (same padding) -> batch norm -> relu over [D, L] or [B, D, L].

    Training mode normalizes with batch statistics and updates the running
    estimates in place; eval mode uses the running estimates.
    """
    x = ad.as_tensor(x)
    k = params.weight.shape[2]
    if x.shape[-1] < k:
        raise DimensionError(f"sequence length {x.shape[-1]} is shorter than kernel size {k}")
    conv = ad.conv1d(x, params.weight, params.bias, padding=k // 2)
    if capture is not None:
        capture["conv"] = conv
    if training:
        normed, mu, var = ad.batch_norm(conv, params.gamma, params.beta, params.eps)
        n = conv.size // conv.shape[-2]
        unbiased = var * n / max(n - 1, 1)
        m = params.momentum
        params.running_mean[:] = (1 - m) * params.running_mean + m * mu
        params.running_var[:] = (1 - m) * params.running_var + m * unbiased
    else:
        normed = ad.batch_norm(conv, params.gamma, params.beta, params.eps,
                               running=(params.running_mean, params.running_var))
    return ad.relu(normed)


# ----------------------------------------------------------------------- model


def _uniform(rng: np.random.Generator, bound: float, shape, name: str) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


@dataclass
class Model:
    spec: ModelSpec
    embeddings: np.ndarray
    lstm: LstmParams
    head_w: Tensor
    head_b: Tensor
    attn: AttentionParams | None = None
    conv: ConvUnitParams | None = None
    training: bool = field(default=True)

    @classmethod
    def init(cls, spec: ModelSpec, embeddings: np.ndarray) -> "Model":
        emb = np.array(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != spec.embedding_dim:
            raise UsageError(f"embedding table {emb.shape} does not match embedding_dim={spec.embedding_dim}")
        emb.setflags(write=False)
        rng = np.random.default_rng(spec.seed)
        H = spec.hidden
        feat = spec.embedding_dim
        conv = None
        if spec.architecture == "bi-lstm-cnn":
            fan_in = spec.embedding_dim * spec.kernel
            bound = 1.0 / np.sqrt(fan_in)
            C = spec.conv_channels
            conv = ConvUnitParams(
                weight=_uniform(rng, bound, (C, spec.embedding_dim, spec.kernel), "conv.weight"),
                bias=_uniform(rng, bound, (C,), "conv.bias"),
                gamma=Tensor(np.ones(C), requires_grad=True, name="bn.gamma"),
                beta=Tensor(np.zeros(C), requires_grad=True, name="bn.beta"),
                running_mean=np.zeros(C),
                running_var=np.ones(C),
            )
            feat = C
        dirs = ("fwd", "bwd") if spec.bidirectional else ("fwd",)
        layers = []
        bound = 1.0 / np.sqrt(H)
        for li in range(spec.layers):
            d_in = feat if li == 0 else H * len(dirs)
            layers.append(tuple(
                LstmDirection(
                    w_ih=_uniform(rng, bound, (4 * H, d_in), f"lstm.l{li}.{d}.w_ih"),
                    w_hh=_uniform(rng, bound, (4 * H, H), f"lstm.l{li}.{d}.w_hh"),
                    b=_uniform(rng, bound, (4 * H,), f"lstm.l{li}.{d}.b"),
                )
                for d in dirs
            ))
        out_feat = H * len(dirs)
        attn = None
        if spec.architecture == "bi-lstm-attn":
            A = spec.attention_width
            ab = 1.0 / np.sqrt(out_feat)
            attn = AttentionParams(
                w=_uniform(rng, ab, (A, out_feat), "attn.w"),
                b=_uniform(rng, ab, (A,), "attn.b"),
                v=_uniform(rng, 1.0 / np.sqrt(A), (A,), "attn.v"),
            )
        hb = 1.0 / np.sqrt(out_feat)
        head_w = _uniform(rng, hb, (spec.n_classes, out_feat), "head.w")
        head_b = _uniform(rng, hb, (spec.n_classes,), "head.b")
        return cls(spec=spec, embeddings=emb, lstm=LstmParams(layers), head_w=head_w, head_b=head_b,
                   attn=attn, conv=conv)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.conv is not None:
            for t in (self.conv.weight, self.conv.bias, self.conv.gamma, self.conv.beta):
                out[t.name] = t
        for layer in self.lstm.layers:
            for d in layer:
                for t in (d.w_ih, d.w_hh, d.b):
                    out[t.name] = t
        if self.attn is not None:
            for t in (self.attn.w, self.attn.b, self.attn.v):
                out[t.name] = t
        out[self.head_w.name] = self.head_w
        out[self.head_b.name] = self.head_b
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        if self.conv is None:
            return {}
        return {"bn.running_mean": self.conv.running_mean, "bn.running_var": self.conv.running_var}

    def parameter_count(self) -> int:
        return int(np.sum([t.size for t in self.named_parameters().values()]))

    def embed(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids)
        if ids.dtype.kind not in "iu":
            raise VocabularyError(f"token ids must be integers, got dtype {ids.dtype}")
        vocab = self.embeddings.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
            raise VocabularyError(f"token id {int(bad)} is outside the vocabulary of size {vocab}")
        return Tensor(self.embeddings[ids])

    def forward(self, token_ids, capture: dict | None = None) -> Tensor:
        """Logits [2] for ids [K], or [B, 2] for ids [B, K]."""
        ids = np.asarray(token_ids)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.ndim != 2 or ids.shape[1] < 2:
            raise UsageError(f"token ids must be [K] or [B, K] with K >= 2, got shape {np.shape(token_ids)}")
        x = self.embed(ids)
        arch = self.spec.architecture
        if arch == "bi-lstm-cnn":
            feats = conv_unit_forward(ad.transpose(x, (0, 2, 1)), self.conv, self.training, capture)
            pooled, _ = ad.maxpool1d(feats, self.spec.pool)
            x = ad.transpose(pooled, (0, 2, 1))
        hidden, final = lstm_stack(x, self.lstm)
        if arch == "bi-lstm-attn":
            final, alpha = attention(hidden, self.attn)
            if capture is not None:
                capture["attention"] = alpha
        logits = ad.add(ad.matmul(final, ad.transpose(self.head_w)), self.head_b)
        return ad.reshape(logits, (self.spec.n_classes,)) if single else logits

    def predict_proba(self, token_ids, batch_size: int = 256) -> np.ndarray:
        """Positive-class probability per row, computed in eval mode without a tape."""
        ids = np.asarray(token_ids)
        was_training = self.training
        self.eval()
        try:
            out = []
            with ad.no_tape():
                for start in range(0, len(ids), batch_size):
                    z = self.forward(ids[start : start + batch_size]).data
                    z = z - z.max(axis=1, keepdims=True)
                    p = np.exp(z)
                    out.append(p[:, 1] / p.sum(axis=1))
            return np.concatenate(out) if out else np.zeros(0)
        finally:
            self.training = was_training

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by name."""
        out = {k: t.data.copy() for k, t in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        for name, arr in state.items():
            if name in params:
                target = params[name].data
            elif name in buffers:
                target = buffers[name]
            else:
                raise FormatError(f"unexpected tensor {name!r} in state")
            if target.shape != arr.shape:
                raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {target.shape}")
            target[...] = arr


# ------------------------------------------------------------------ checkpoint

CHECKPOINT_MAGIC = b"PASCCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    """Write a checkpoint.

    Layout (all integers little-endian)::

        8 bytes   magic "PASCCKPT"
        u32       format version (1)
        u32       header length N
        N bytes   UTF-8 JSON: {"spec": {...}, "tensors": [{"name", "kind", "shape"}, ...],
                               "metadata": {...}}
        then, per tensor in header order, prod(shape) float64 values, row-major

    ``kind`` is ``param``, ``buffer`` or ``embedding``.
    """
    tensors = [("embedding", "embedding", model.embeddings)]
    tensors += [(k, "param", t.data) for k, t in model.named_parameters().items()]
    tensors += [(k, "buffer", v) for k, v in model.named_buffers().items()]
    header = {
        "spec": asdict(model.spec),
        "tensors": [{"name": n, "kind": kind, "shape": list(a.shape)} for n, kind, a in tensors],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise FormatError(f"{path}: truncated while reading {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(entry["shape"]).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    spec = ModelSpec(**header["spec"])
    model = Model.init(spec, arrays.pop("embedding"))
    model.load_state(arrays)
    return model, header.get("metadata", {})
