"""Hierarchical attention TCN and the plain last-activation TCN head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"HATCNCK\x00"
CHECKPOINT_VERSION = 1

VARIANTS = ("hatcn", "tcn")


class ConfigError(ValueError):
    """Invalid model configuration."""


class InputError(ValueError):
    """Input series incompatible with the model."""


@dataclass(frozen=True)
class HatcnConfig:
    layers: int = 2
    channels: int = 8
    kernel_size: int = 50
    input_length: int = 750
    dilations: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.layers < 1 or self.channels < 1 or self.input_length < 1:
            raise ConfigError("layers, channels and input_length must be >= 1")
        if self.kernel_size < 2:
            raise ConfigError("kernel_size must be >= 2")
        if self.dilations is not None:
            object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
            if len(self.dilations) != self.layers:
                raise ConfigError("one dilation per layer required")
            if any(d < 1 for d in self.dilations):
                raise ConfigError("dilations must be >= 1")

    @property
    def dilation_schedule(self) -> tuple[int, ...]:
        if self.dilations is None:
            return tuple(2**i for i in range(self.layers))
        return self.dilations

    @property
    def schedule_overridden(self) -> bool:
        return self.dilation_schedule != tuple(2**i for i in range(self.layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilation_schedule)
        d["schedule_overridden"] = self.schedule_overridden
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HatcnConfig":
        dil = d.get("dilations")
        if dil is not None and not d.get("schedule_overridden", True):
            dil = None
        return cls(
            layers=int(d["layers"]),
            channels=int(d["channels"]),
            kernel_size=int(d["kernel_size"]),
            input_length=int(d["input_length"]),
            dilations=None if dil is None else tuple(dil),
        )


class HatcnModel:
    """All trainable parameters of one network.

    Both heads share the conv stack and the affine classifier; the plain TCN
    variant simply never touches the attention vectors.
    """

    def __init__(self, config: HatcnConfig, seed: int | None = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c, l = config.channels, config.kernel_size
        self.conv_kernels: list[Tensor] = []
        self.conv_biases: list[Tensor] = []
        for i in range(config.layers):
            c_in = 1 if i == 0 else c
            bound = np.sqrt(1.0 / (c_in * l))
            self.conv_kernels.append(
                Tensor(rng.uniform(-bound, bound, (c, c_in, l)), requires_grad=True, name=f"conv{i}.kernel")
            )
            self.conv_biases.append(Tensor(np.zeros(c), requires_grad=True, name=f"conv{i}.bias"))
        # zero attention vectors: training starts from uniform attention
        self.within_vectors = [
            Tensor(np.zeros((1, c)), requires_grad=True, name=f"attn{i}.w") for i in range(config.layers)
        ]
        self.across_vector = Tensor(np.zeros((1, c)), requires_grad=True, name="attn.w")
        bound = np.sqrt(1.0 / c)
        self.head_weight = Tensor(rng.uniform(-bound, bound, (c, 1)), requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(1), requires_grad=True, name="head.bias")

    def named_parameters(self, variant: str = "hatcn") -> dict[str, Tensor]:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        params = {}
        for k, b in zip(self.conv_kernels, self.conv_biases):
            params[k.name] = k
            params[b.name] = b
        if variant == "hatcn":
            for w in self.within_vectors:
                params[w.name] = w
            params[self.across_vector.name] = self.across_vector
        params[self.head_weight.name] = self.head_weight
        params[self.head_bias.name] = self.head_bias
        return params

    def parameters(self, variant: str = "hatcn") -> list[Tensor]:
        return list(self.named_parameters(variant).values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters("hatcn").items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters("hatcn")
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.value = arr.copy()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.parameters("hatcn"))


@dataclass
class ForwardTrace:
    """Everything computed by one HA-TCN forward pass over a batch.

    Arrays carry a leading batch axis ``B``:
    activations ``[K x (B, C, T)]``, within_weights ``[K x (B, T)]``,
    layer_summaries ``[K x (B, C)]``, summary_matrix ``(B, C, K)``,
    across_weights ``(B, K)``, summary ``(B, C)``, probability ``(B,)``.
    """

    activations: list[np.ndarray]
    within_weights: list[np.ndarray]
    layer_summaries: list[np.ndarray]
    summary_matrix: np.ndarray
    across_weights: np.ndarray
    summary: np.ndarray
    probability: np.ndarray
    logits: Tensor = field(repr=False)
    kernel_size: int = 0
    dilations: tuple[int, ...] = ()

    @property
    def batch_size(self) -> int:
        return self.probability.shape[0]

    @property
    def layers(self) -> int:
        return len(self.within_weights)


def within_layer_attention(h, w) -> tuple[Tensor, Tensor]:
    """Attention over time inside one layer.

    ``h`` is ``(..., C, T)`` and ``w`` is ``(1, C)``. Returns the weights
    ``softmax(tanh(w h))`` with shape ``(..., 1, T)`` and the summary
    ``relu(h @ weights^T)`` with shape ``(..., C, 1)``.
    """
    alpha = ad.softmax(ad.tanh(ad.matmul(w, h)), axis=-1)
    gamma = ad.relu(ad.matmul(h, ad.transpose(alpha)))
    return alpha, gamma


def across_layer_attention(m, w) -> tuple[Tensor, Tensor]:
    """Attention over the per-layer summaries ``m`` of shape ``(..., C, K)``."""
    return within_layer_attention(m, w)


def _as_batch(model: HatcnModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InputError(f"expected a series (T,) or batch (B, T), got shape {x.shape}")
    if x.shape[1] != model.config.input_length:
        raise InputError(
            f"series length {x.shape[1]} does not match model input_length {model.config.input_length}"
        )
    return x


def conv_stack(model: HatcnModel, x) -> list[Tensor]:
    """Dilated causal conv layers with relu between them; returns every H_i."""
    xb = _as_batch(model, x)
    h = Tensor(xb[:, None, :])
    hidden = []
    for kernel, bias, d in zip(model.conv_kernels, model.conv_biases, model.config.dilation_schedule):
        h = ad.relu(ad.conv1d_causal(h, kernel, bias, d))
        hidden.append(h)
    return hidden


def _head(model: HatcnModel, features: Tensor) -> Tensor:
    logits = ad.add(ad.matmul(features, model.head_weight), model.head_bias)
    return ad.reshape(logits, (features.shape[0],))


def forward(model: HatcnModel, x) -> ForwardTrace:
    """Full HA-TCN pass. ``x`` is one preprocessed series ``(T,)`` or a batch ``(B, T)``."""
    hidden = conv_stack(model, x)
    batch = hidden[0].shape[0]
    c = model.config.channels
    alphas, gammas = [], []
    for h, w in zip(hidden, model.within_vectors):
        a, g = within_layer_attention(h, w)
        alphas.append(a)
        gammas.append(g)
    m = ad.concat(gammas, axis=-1)  # (B, C, K)
    alpha, gamma = across_layer_attention(m, model.across_vector)
    logits = _head(model, ad.reshape(gamma, (batch, c)))
    return ForwardTrace(
        activations=[h.value for h in hidden],
        within_weights=[a.value[:, 0, :] for a in alphas],
        layer_summaries=[g.value[:, :, 0] for g in gammas],
        summary_matrix=m.value,
        across_weights=alpha.value[:, 0, :],
        summary=gamma.value[:, :, 0],
        probability=ad._stable_sigmoid(logits.value),
        logits=logits,
        kernel_size=model.config.kernel_size,
        dilations=model.config.dilation_schedule,
    )


def tcn_logits(model: HatcnModel, x) -> tuple[Tensor, list[Tensor]]:
    hidden = conv_stack(model, x)
    last = ad.index(hidden[-1], (slice(None), slice(None), -1))  # (B, C)
    return _head(model, last), hidden


def tcn_forward(model: HatcnModel, x) -> np.ndarray:
    """Plain TCN: classify from the deepest layer's final time column."""
    logits, _ = tcn_logits(model, x)
    return ad._stable_sigmoid(logits.value)


def model_logits(model: HatcnModel, x, variant: str = "hatcn") -> Tensor:
    if variant == "hatcn":
        return forward(model, x).logits
    if variant == "tcn":
        return tcn_logits(model, x)[0]
    raise ConfigError(f"unknown variant {variant!r}")


def predict_proba(model: HatcnModel, x, variant: str = "hatcn", batch_size: int = 64) -> np.ndarray:
    xb = _as_batch(model, x)
    out = []
    for start in range(0, len(xb), batch_size):
        z = model_logits(model, xb[start : start + batch_size], variant)
        out.append(ad._stable_sigmoid(z.value))
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoint
#
# layout (little-endian):
#   8 bytes  magic  b"HATCNCK\0"
#   u16      format version
#   u32      header length n
#   n bytes  UTF-8 JSON header {config, metadata, arrays: [{name, shape, offset}]}
#   payload  float64 '<f8' arrays, C order, at the listed byte offsets


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def save_checkpoint(path, model: HatcnModel, metadata: dict | None = None) -> None:
    arrays = []
    chunks = []
    offset = 0
    for name, arr in model.state_dict().items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": model.config.to_dict(), "metadata": metadata or {}, "arrays": arrays},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[HatcnModel, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", blob, pos)
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<HI")
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    payload = memoryview(blob)[pos + hlen :]
    state = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        state[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(
            entry["shape"]
        )
    model = HatcnModel(HatcnConfig.from_dict(header["config"]), seed=None)
    model.load_state_dict(state)
    return model, header.get("metadata", {})
