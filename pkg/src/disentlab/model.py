"""Encoder, projection heads, subembedding slicing and the linear probe."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import Rng


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "small-conv"
    channels: tuple = (8, 16, 64)
    hidden: int = 128  # mlp arch only
    rep_dim: int = 64
    image_size: int = 64
    kernel: int = 3
    out_init: float = 1.0  # std multiplier for the final linear layer

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.arch not in ("small-conv", "mlp"):
            raise ValueError(f"unknown encoder arch {self.arch!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"conv kernel must be odd, got {self.kernel}")
        if not self.out_init > 0:
            raise ValueError(f"out_init must be positive, got {self.out_init}")
        if self.rep_dim < 2 or self.rep_dim % 2:
            raise ValueError(f"representation dim must be even, got {self.rep_dim}")


@dataclass(frozen=True)
class ProjectionConfig:
    head_count: int = 2
    out_dim: int = 8  # per head; the single head outputs 2 * out_dim
    hidden_dim: int = 64

    def __post_init__(self):
        if self.head_count not in (1, 2):
            raise ValueError(f"head_count must be 1 or 2, got {self.head_count}")

    @property
    def z_dim(self):
        return 2 * self.out_dim


@dataclass
class ModelParams:
    tensors: dict
    encoder: EncoderConfig
    projection: ProjectionConfig
    seed: int

    def __getitem__(self, name):
        return self.tensors[name]

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        tensors = {k: ad.Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()}
        return ModelParams(tensors, self.encoder, self.projection, self.seed)


def _shapes(enc, proj):
    shapes = {}
    if enc.arch == "small-conv":
        c_in = 3
        for i, c in enumerate(enc.channels):
            k = enc.kernel
            shapes[f"enc.conv{i}.w"] = ((k, k, c_in, c), k * k * c_in)
            shapes[f"enc.conv{i}.b"] = ((c,), None)
            c_in = c
        shapes["enc.fc.w"] = ((c_in, enc.rep_dim), -c_in / enc.out_init**2)
        shapes["enc.fc.b"] = ((enc.rep_dim,), None)
    else:
        n_in = enc.image_size * enc.image_size * 3
        shapes["enc.fc0.w"] = ((n_in, enc.hidden), n_in)
        shapes["enc.fc0.b"] = ((enc.hidden,), None)
        shapes["enc.fc1.w"] = ((enc.hidden, enc.rep_dim), -enc.hidden / enc.out_init**2)
        shapes["enc.fc1.b"] = ((enc.rep_dim,), None)
    head_in = enc.rep_dim // proj.head_count
    head_out = proj.z_dim // proj.head_count
    for h in range(proj.head_count):
        shapes[f"head{h}.fc0.w"] = ((head_in, proj.hidden_dim), head_in)
        shapes[f"head{h}.fc0.b"] = ((proj.hidden_dim,), None)
        shapes[f"head{h}.fc1.w"] = ((proj.hidden_dim, head_out), -proj.hidden_dim)
        shapes[f"head{h}.fc1.b"] = ((head_out,), None)
    return shapes


def init_params(encoder=None, projection=None, seed=0):
    """He-normal weights before relu, 1/fan_in variance on output layers
    (the encoder's scaled by ``out_init``) and zero biases. Each tensor
    draws from its own named stream."""
    encoder = encoder or EncoderConfig()
    projection = projection or ProjectionConfig()
    root = Rng(seed, "init")
    tensors = {}
    for name, (shape, fan) in _shapes(encoder, projection).items():
        if fan is None:
            data = np.zeros(shape)
        else:
            std = np.sqrt(2.0 / fan) if fan > 0 else np.sqrt(1.0 / -fan)
            data = root.stream(name).normal(0.0, std, size=shape)
        tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors, encoder, projection, int(seed))


def _dense(x, params, prefix):
    return ad.matmul(x, params[prefix + ".w"]) + params[prefix + ".b"]


def encode(params, images):
    """Images (B, H, W, 3) in [0, 1] -> representations R (B, rep_dim)."""
    enc = params.encoder
    x = ad.as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (enc.image_size, enc.image_size, 3):
        raise ad.ShapeError(
            f"encode: expected images of shape (B, {enc.image_size}, {enc.image_size}, 3), got {x.shape}"
        )
    if enc.arch == "mlp":
        h = ad.relu(_dense(ad.reshape(x, (x.shape[0], -1)), params, "enc.fc0"))
        return _dense(h, params, "enc.fc1")
    h = x
    for i in range(len(enc.channels)):
        h = ad.relu(ad.conv2d(h, params[f"enc.conv{i}.w"], stride=2, pad=enc.kernel // 2) + params[f"enc.conv{i}.b"])
    b, hh, ww, c = h.shape
    pooled = ad.mean(ad.reshape(h, (b, hh * ww, c)), axis=1)
    return _dense(pooled, params, "enc.fc")


def _head(x, params, h):
    hidden = ad.relu(_dense(x, params, f"head{h}.fc0"))
    return _dense(hidden, params, f"head{h}.fc1")


def project(params, r):
    """R -> (Z, z0, z1).

    Two heads: z0 = head0(r[:, :d/2]), z1 = head1(r[:, d/2:]), Z = [z0, z1].
    One head: Z = head0(r) and z0, z1 are its column halves.
    """
    r = ad.as_tensor(r)
    d = params.encoder.rep_dim
    if r.ndim != 2 or r.shape[1] != d:
        raise ad.ShapeError(f"project: expected width {d}, got shape {r.shape}")
    if params.projection.head_count == 2:
        r0, r1 = split_sub(r, 2)
        z0, z1 = _head(r0, params, 0), _head(r1, params, 1)
        return ad.concat_cols([z0, z1]), z0, z1
    z = _head(r, params, 0)
    z0, z1 = split_sub(z, 2)
    return z, z0, z1


def split_sub(v, k):
    """Split the columns of ``v`` into ``k`` equal contiguous slices."""
    width = v.shape[-1]
    if k < 1 or width % k:
        raise ValueError(f"width {width} is not divisible into {k} subembeddings")
    if k == 1:
        return [v]
    w = width // k
    if isinstance(v, ad.Tensor):
        return [ad.slice_cols(v, i * w, (i + 1) * w) for i in range(k)]
    v = np.asarray(v)
    return [v[..., i * w:(i + 1) * w] for i in range(k)]


# ---------------------------------------------------------------------------
# linear probe


@dataclass(frozen=True)
class ProbeConfig:
    iterations: int = 500
    tol: float = 1e-6
    step: float = 2.0
    normalize: bool = False
    whiten: bool = False
    rank_tol: float = 1e-10


@dataclass
class LinearProbe:
    weight: np.ndarray  # (num_classes, input_dim)
    bias: np.ndarray  # (num_classes,)
    normalize: bool = False
    iterations: int = field(default=0, compare=False)

    @property
    def num_classes(self):
        return self.weight.shape[0]

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.normalize:
            x = x / np.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-12)
        if x.shape[1] != self.weight.shape[1]:
            raise ad.ShapeError(f"probe expects width {self.weight.shape[1]}, got {x.shape}")
        return x @ self.weight.T + self.bias

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def _softmax_xent(logits, onehot):
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    loss = float(np.mean(np.log(s[:, 0]) + shift[:, 0] - (logits * onehot).sum(axis=1)))
    return loss, p


def probe_train(embeddings, labels, num_classes, config=None):
    """Softmax regression by full-batch gradient descent.

    Inputs are centred (absorbed into the bias afterwards). The step is
    ``config.step / lambda_max`` of the feature covariance; the softmax
    curvature is at most half of that, so any step below 4 is stable at every
    embedding scale. With ``whiten`` the features are also whitened, which
    makes the probe invariant to per-direction rescaling. Stops after
    ``config.iterations`` steps or when the loss improves by less than
    ``config.tol``.
    """
    config = config or ProbeConfig()
    x = np.array(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ad.ShapeError(f"probe: embeddings {x.shape} and labels {y.shape} do not match")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}); got range [{y.min()}, {y.max()}]")
    if config.normalize:
        x = x / np.sqrt((x * x).sum(axis=1, keepdims=True) + 1e-12)
    n = max(len(x), 1)
    mu = x.mean(axis=0)
    xc = x - mu
    evals, evecs = np.linalg.eigh(xc.T @ xc / n)
    top = max(evals.max(initial=0.0), 1e-300)
    if config.whiten:
        keep = evals > config.rank_tol * top
        transform = evecs[:, keep] / np.sqrt(evals[keep])
        scale = 1.0
    else:
        transform = np.eye(x.shape[1])
        scale = 1.0 / top if top > 1e-300 else 1.0
    xw = xc @ transform
    onehot = np.eye(num_classes)[y]
    w = np.zeros((xw.shape[1], num_classes))
    b = np.zeros(num_classes)
    prev = np.inf
    it = 0
    for it in range(1, config.iterations + 1):
        loss, p = _softmax_xent(xw @ w + b, onehot)
        if prev - loss < config.tol:
            break
        prev = loss
        d = (p - onehot) / n
        w -= config.step * scale * (xw.T @ d)
        b -= config.step * d.sum(axis=0)
    weight = (transform @ w).T
    return LinearProbe(weight, b - weight @ mu, config.normalize, it)


def probe_accuracy(probe, embeddings, labels):
    labels = np.asarray(labels)
    if labels.size and labels.max() >= probe.num_classes:
        raise ValueError(f"label {labels.max()} exceeds the probe's {probe.num_classes} classes")
    if labels.size == 0:
        return 0.0
    return float(np.mean(probe.predict(embeddings) == labels))


# ---------------------------------------------------------------------------
# checkpoints: magic, version, header length, JSON header, float64 payload,
# sha256 of everything before it

_MAGIC = b"DLCK"
_VERSION = 1


def _json_default(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"not serializable: {type(o)}")


def save_checkpoint(path, params, state=None, meta=None):
    """Write ``params`` plus optional optimizer ``state`` ({name: array})."""
    arrays = [(k, t.data) for k, t in params.tensors.items()]
    arrays += [("state/" + k, np.asarray(v, dtype=np.float64)) for k, v in sorted((state or {}).items())]
    header = {
        "encoder": asdict(params.encoder),
        "projection": asdict(params.projection),
        "seed": params.seed,
        "meta": meta or {},
        "tensors": [[k, list(a.shape)] for k, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    blob = bytearray(_MAGIC + struct.pack("<II", _VERSION, len(head)) + head)
    for _, a in arrays:
        blob += np.ascontiguousarray(a, dtype="<f8").tobytes()
    blob += hashlib.sha256(blob).digest()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    """Returns (params, state, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44 or raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    tensors, state = {}, {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        if name.startswith("state/"):
            state[name[6:]] = a
        else:
            tensors[name] = ad.Tensor(a, requires_grad=True, name=name)
    if offset != len(raw) - 32:
        raise CheckpointError(f"{path}: payload size does not match header")
    params = ModelParams(
        tensors, EncoderConfig(**header["encoder"]), ProjectionConfig(**header["projection"]), header["seed"]
    )
    return params, state, header["meta"]
