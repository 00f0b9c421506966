"""Model: encoder, classifier, and the ratio-learner head.

Two disjoint parameter groups: theta (encoder + classifier) and phi (the
ratio learner that scores the 11-point mixing-ratio grid per source/target
pair). An optimizer step on one group never touches the other.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError, ShapeError, Tensor, concat_cols, matmul, relu

CHECKPOINT_MAGIC = b"VDACKPT1"
CHECKPOINT_VERSION = 1

RATIO_GRID_SIZE = 11


@dataclass(frozen=True)
class RatioGrid:
    """The fixed 11-point mixing-ratio grid 0.0, 0.1, ..., 1.0.

    Built as k/10 so every entry equals the decimal literal exactly
    (k*0.1 drifts in the last bit at k=3 and k=7).
    """

    values: np.ndarray = field(default_factory=lambda: np.arange(RATIO_GRID_SIZE) / 10.0)

    def __post_init__(self):
        v = self.values
        if len(v) != RATIO_GRID_SIZE or v[0] != 0.0 or v[-1] != 1.0 or np.any(np.diff(v) <= 0):
            raise ContractError("ratio grid must be the 11 strictly increasing values in [0, 1]")


RATIO_GRID = RatioGrid()


@dataclass
class ModelParams:
    """Named parameter tensors plus the dimensions they were built for."""

    enc_w1: Tensor
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    cls_w: Tensor
    cls_b: Tensor
    emp_w1: Tensor
    emp_b1: Tensor
    emp_w2: Tensor
    emp_b2: Tensor
    d: int
    n_classes: int
    feat_dim: int
    hidden: int
    hidden_g: int
    seed: int

    def theta_params(self) -> list[Tensor]:
        """Encoder + classifier parameters."""
        return [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.cls_w, self.cls_b]

    def phi_params(self) -> list[Tensor]:
        """Ratio-learner parameters."""
        return [self.emp_w1, self.emp_b1, self.emp_w2, self.emp_b2]

    def named_params(self) -> list[tuple[str, Tensor]]:
        names = (
            "enc_w1", "enc_b1", "enc_w2", "enc_b2",
            "cls_w", "cls_b",
            "emp_w1", "emp_b1", "emp_w2", "emp_b2",
        )
        return [(n, getattr(self, n)) for n in names]

    def dims(self) -> dict[str, int]:
        return {
            "d": self.d,
            "n_classes": self.n_classes,
            "feat_dim": self.feat_dim,
            "hidden": self.hidden,
            "hidden_g": self.hidden_g,
        }


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out))


def init_model(
    d: int,
    n_classes: int,
    feat_dim: int = 32,
    hidden: int = 64,
    hidden_g: int = 64,
    seed: int = 0,
) -> ModelParams:
    """Fan-in-scaled uniform weights, zero biases, deterministic under seed."""
    for name, v in (("d", d), ("n_classes", n_classes), ("feat_dim", feat_dim),
                    ("hidden", hidden), ("hidden_g", hidden_g)):
        if v < 1:
            raise ContractError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)

    def param(a):
        return Tensor(a, requires_grad=True)

    return ModelParams(
        enc_w1=param(_uniform_fan_in(rng, d, hidden)),
        enc_b1=param(np.zeros(hidden)),
        enc_w2=param(_uniform_fan_in(rng, hidden, feat_dim)),
        enc_b2=param(np.zeros(feat_dim)),
        cls_w=param(_uniform_fan_in(rng, feat_dim, n_classes)),
        cls_b=param(np.zeros(n_classes)),
        emp_w1=param(_uniform_fan_in(rng, 2 * feat_dim, hidden_g)),
        emp_b1=param(np.zeros(hidden_g)),
        emp_w2=param(_uniform_fan_in(rng, hidden_g, RATIO_GRID_SIZE)),
        emp_b2=param(np.zeros(RATIO_GRID_SIZE)),
        d=d,
        n_classes=n_classes,
        feat_dim=feat_dim,
        hidden=hidden,
        hidden_g=hidden_g,
        seed=seed,
    )


def encode(p: ModelParams, x: Tensor) -> Tensor:
    """Instance features: ReLU hidden layer, linear feature layer."""
    if x.data.ndim != 2 or x.data.shape[1] != p.d:
        raise ShapeError(f"encode expects [m x {p.d}], got {x.shape}")
    h = relu(matmul(x, p.enc_w1) + p.enc_b1)
    return matmul(h, p.enc_w2) + p.enc_b2


def classify(p: ModelParams, z: Tensor) -> Tensor:
    """Class logits from features; a single affine layer."""
    if z.data.ndim != 2 or z.data.shape[1] != p.feat_dim:
        raise ShapeError(f"classify expects [m x {p.feat_dim}], got {z.shape}")
    return matmul(z, p.cls_w) + p.cls_b


def emp_forward(p: ModelParams, zs: Tensor, zt: Tensor) -> Tensor:
    """Grid logits for each source/target feature pair, one row per pair."""
    if zs.shape != zt.shape:
        raise ShapeError(f"feature pair shapes disagree: {zs.shape} vs {zt.shape}")
    h = relu(matmul(concat_cols(zs, zt), p.emp_w1) + p.emp_b1)
    return matmul(h, p.emp_w2) + p.emp_b2


def logits_of(p: ModelParams, x: Tensor) -> Tensor:
    """Class logits straight from inputs (classifier over encoder)."""
    return classify(p, encode(p, x))


def one_hot_argmax(logits: np.ndarray, n_classes: int) -> np.ndarray:
    """Row-wise argmax as one-hot; ties resolve to the lowest class index."""
    idx = np.argmax(logits, axis=1)
    out = np.zeros((logits.shape[0], n_classes), dtype=np.float64)
    out[np.arange(logits.shape[0]), idx] = 1.0
    return out


def pseudo_labels(p: ModelParams, xt: Tensor) -> Tensor:
    """One-hot argmax predictions on target rows; constant, no gradient."""
    logits = logits_of(p, xt).data
    return Tensor(one_hot_argmax(logits, p.n_classes))


def save_checkpoint(p: ModelParams, path: str) -> None:
    """Single-file checkpoint: magic, JSON header, raw float64 arrays."""
    arrays = [(name, t.data) for name, t in p.named_params()]
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": p.dims(),
        "seed": p.seed,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header['version']}")
        dims = header["dims"]
        p = init_model(seed=header["seed"], **dims)
        for spec, (name, t) in zip(header["arrays"], p.named_params()):
            if spec["name"] != name:
                raise ContractError(f"checkpoint array order mismatch at {spec['name']}")
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            t.data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return p


def copy_params(p: ModelParams) -> ModelParams:
    """Deep copy of all parameter tensors (fresh, untracked buffers)."""
    q = init_model(seed=p.seed, **p.dims())
    for (_, src), (_, dst) in zip(p.named_params(), q.named_params()):
        dst.data = src.data.copy()
    return q


def params_checksum(params: list[Tensor]) -> float:
    """Cheap content checksum for parameter-isolation tests."""
    return float(sum(np.sum(t.data * np.arange(1, t.data.size + 1).reshape(t.data.shape))
                     for t in params))
