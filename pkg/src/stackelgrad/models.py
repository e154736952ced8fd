"""Function approximators for the two players and their checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"SGCK"


class ParamVector:
    """An ordered list of float64 arrays that can be viewed as one flat vector."""

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.arrays = [np.array(a, dtype=np.float64) for a in arrays]

    @property
    def shapes(self) -> list[tuple]:
        return [a.shape for a in self.arrays]

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def unflatten(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"expected flat vector of length {self.size}, got {flat.shape}")
        out, i = [], 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            out.append(flat[i:i + n].reshape(shape))
            i += n
        return ParamVector(out)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays)))

    def dot(self, other: "ParamVector") -> float:
        return float(sum(float(np.sum(a * b)) for a, b in zip(self.arrays, other.arrays)))

    def copy(self) -> "ParamVector":
        return ParamVector(self.arrays)

    def zeros_like(self) -> "ParamVector":
        return ParamVector([np.zeros_like(a) for a in self.arrays])

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector([a + b for a, b in zip(self.arrays, other.arrays)])

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector([a - b for a, b in zip(self.arrays, other.arrays)])

    def __mul__(self, c: float) -> "ParamVector":
        return ParamVector([a * c for a in self.arrays])

    __rmul__ = __mul__

    def __len__(self) -> int:
        return len(self.arrays)

    def __iter__(self):
        return iter(self.arrays)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector) or self.shapes != other.shapes:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays))

    def leaves(self) -> list[ad.Tensor]:
        return [ad.Tensor(a) for a in self.arrays]


def _activation(name: str):
    if name == "tanh":
        return ad.tanh
    if name == "relu":
        return ad.relu
    raise ValueError(f"unknown activation {name!r}")


def _init_layers(dims: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    arrays = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(d_in)
        arrays.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        arrays.append(rng.uniform(-bound, bound, size=(d_out,)))
    return arrays


def _mlp(x: ad.Tensor, params: Sequence[ad.Tensor], act) -> ad.Tensor:
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = act(h)
    return h


def _check_columns(x, n: int, what: str):
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"{what} expects a batch with {n} columns, got shape {x.shape}")


@dataclass
class MlpClassifier:
    layer_dims: list[int]
    params: ParamVector
    activation: str = "relu"

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed: int = 0, activation: str = "relu"):
        rng = np.random.default_rng(seed)
        return cls(list(layer_dims), ParamVector(_init_layers(layer_dims, rng)), activation)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], activation: str = "relu"):
        model = cls.init(layer_dims, 0, activation)
        return model.with_params(model.params.zeros_like())

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def with_params(self, params: ParamVector) -> "MlpClassifier":
        return MlpClassifier(self.layer_dims, params, self.activation)

    def logits(self, x, theta: Sequence[ad.Tensor] | None = None) -> ad.Tensor:
        """Differentiable forward pass; ``theta`` overrides the stored weights."""
        x = ad.as_tensor(x)
        _check_columns(x, self.n_inputs, "classifier")
        if theta is None:
            theta = self.params.leaves()
        return _mlp(x, theta, _activation(self.activation))

    def predict_logits(self, x) -> np.ndarray:
        return self.logits(np.asarray(x, dtype=np.float64)).data

    def predict(self, x) -> np.ndarray:
        return self.predict_logits(x).argmax(axis=1)


def classify(model: MlpClassifier, x) -> np.ndarray:
    return model.predict_logits(x)


@dataclass
class PerturbationGenerator:
    """Encoder-decoder MLP whose ``budget * tanh`` head bounds every output
    coordinate by the budget."""

    encoder_dims: list[int]
    decoder_dims: list[int]
    params: ParamVector
    budget: float
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.encoder_dims[-1] != self.decoder_dims[0]:
            raise ValueError("encoder output width must equal decoder input width")
        if self.encoder_dims[0] != self.decoder_dims[-1]:
            raise ValueError("generator output dimension must equal its input dimension")
        if not self.budget > 0:
            raise ValueError("budget must be positive")

    @classmethod
    def init(cls, n_features: int, hidden: Sequence[int] = (32,), bottleneck: int = 8,
             budget: float = 8 / 255, seed: int = 0, activation: str = "relu"):
        enc = [n_features, *hidden, bottleneck]
        dec = [bottleneck, *reversed(hidden), n_features]
        rng = np.random.default_rng(seed)
        arrays = _init_layers(enc, rng) + _init_layers(dec, rng)
        return cls(enc, dec, ParamVector(arrays), float(budget), activation, seed)

    @property
    def n_features(self) -> int:
        return self.encoder_dims[0]

    @property
    def dims(self) -> list[int]:
        return self.encoder_dims + self.decoder_dims[1:]

    def with_params(self, params: ParamVector) -> "PerturbationGenerator":
        return PerturbationGenerator(self.encoder_dims, self.decoder_dims, params,
                                     self.budget, self.activation, self.seed)

    def zero(self) -> "PerturbationGenerator":
        return self.with_params(self.params.zeros_like())

    def delta(self, x, w: Sequence[ad.Tensor] | None = None) -> ad.Tensor:
        x = ad.as_tensor(x)
        _check_columns(x, self.n_features, "generator")
        if w is None:
            w = self.params.leaves()
        # encoder and decoder are stacked; the bottleneck gets the hidden activation
        pre = _mlp(x, w, _activation(self.activation))
        return ad.tanh(pre) * self.budget

    def perturb(self, x) -> np.ndarray:
        d = self.delta(np.asarray(x, dtype=np.float64)).data
        # tanh can round to exactly 1.0; keep the bound exact in floating point
        return np.clip(d, -self.budget, self.budget)


def project_linf(x_new, x, radius: float) -> np.ndarray:
    """Clip ``x_new`` into the l-inf ball around ``x`` so that the computed
    difference ``x_new - x`` never exceeds ``radius`` in floating point."""
    x = np.asarray(x, dtype=np.float64)
    out = np.clip(np.asarray(x_new, dtype=np.float64), x - radius, x + radius)
    bad = np.abs(out - x) > radius
    while bad.any():
        # x +/- radius can round outward; step one ulp back towards x
        out[bad] = np.nextafter(out[bad], x[bad])
        bad = np.abs(out - x) > radius
    return out


def perturb(gen: PerturbationGenerator, x) -> np.ndarray:
    return gen.perturb(x)


def poison_features(gen: PerturbationGenerator, x, clip_range=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = project_linf(x + gen.perturb(x), x, gen.budget)
    if clip_range is not None:
        out = np.clip(out, clip_range[0], clip_range[1])
    return out


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, **extra) -> None:
    """Write a model as a JSON header followed by raw little-endian float64s."""
    if isinstance(model, PerturbationGenerator):
        header = {"kind": "generator", "encoder_dims": model.encoder_dims,
                  "decoder_dims": model.decoder_dims, "budget": model.budget,
                  "activation": model.activation, "seed": model.seed}
    elif isinstance(model, MlpClassifier):
        header = {"kind": "classifier", "layer_dims": model.layer_dims,
                  "activation": model.activation}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header.update(extra)
    header["format_version"] = CHECKPOINT_FORMAT_VERSION
    header["n_params"] = model.params.size
    blob = json.dumps(header, sort_keys=True).encode()
    body = model.params.flatten().astype("<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(blob)) + blob + body)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n].decode())
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    flat = np.frombuffer(raw[8 + n:], dtype="<f8").astype(np.float64)
    if flat.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {flat.size}")
    if header["kind"] == "generator":
        enc, dec = header["encoder_dims"], header["decoder_dims"]
        template = ParamVector(
            [np.zeros(s) for d in (enc, dec) for a, b in zip(d[:-1], d[1:]) for s in ((a, b), (b,))])
        return PerturbationGenerator(enc, dec, template.unflatten(flat), header["budget"],
                                     header["activation"], header.get("seed", 0))
    if header["kind"] == "classifier":
        dims = header["layer_dims"]
        template = ParamVector(
            [np.zeros(s) for a, b in zip(dims[:-1], dims[1:]) for s in ((a, b), (b,))])
        return MlpClassifier(dims, template.unflatten(flat), header["activation"])
    raise ValueError(f"{path}: unknown model kind {header['kind']!r}")
