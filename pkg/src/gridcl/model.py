"""Bidirectional GRU classifier with a class-incremental linear head."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

HIDDEN = 150
DROPOUT = 0.3
CHECKPOINT_MAGIC = b"GRIDCLM1"
CHECKPOINT_VERSION = 1


class SchemaError(ValueError):
    pass


@dataclass
class ForwardOutput:
    features: Tensor  # B x 2H, post-dropout pooled representation
    logits: Tensor  # B x C


class BiGruClassifier:
    """One bidirectional GRU layer, dropout, and a growing linear head.

    Parameters are stored as :class:`~gridcl.numcore.Tensor` leaves so the
    optimizer can update them in place.  ``rng`` is the run's generator
    for initialization; head expansions draw from it too, so the order of
    construction and expansion fixes every weight.
    """

    def __init__(
        self,
        n_features: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: int = HIDDEN,
        dropout_p: float = DROPOUT,
        window: int | None = None,
    ):
        if n_classes < 1:
            raise ValueError("head needs at least one class")
        self.n_features = n_features
        self.hidden = hidden
        self.dropout_p = dropout_p
        self.window = window
        self.training = True
        self._rng = rng
        self._in_step = False
        dt = nc.default_dtype()
        bound = 1.0 / np.sqrt(hidden)

        def uni(*shape):
            return rng.uniform(-bound, bound, size=shape).astype(dt)

        self.fwd_w = Tensor(uni(n_features, 3 * hidden), requires_grad=True, name="fwd_w")
        self.fwd_u = Tensor(uni(hidden, 3 * hidden), requires_grad=True, name="fwd_u")
        self.fwd_b = Tensor(np.zeros(3 * hidden, dt), requires_grad=True, name="fwd_b")
        self.bwd_w = Tensor(uni(n_features, 3 * hidden), requires_grad=True, name="bwd_w")
        self.bwd_u = Tensor(uni(hidden, 3 * hidden), requires_grad=True, name="bwd_u")
        self.bwd_b = Tensor(np.zeros(3 * hidden, dt), requires_grad=True, name="bwd_b")
        self.head_w = Tensor(uni(2 * hidden, n_classes), requires_grad=True, name="head_w")
        self.head_b = Tensor(np.zeros(n_classes, dt), requires_grad=True, name="head_b")
        self._bound = bound

    # ------------------------------------------------------------------
    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.fwd_w, self.fwd_u, self.fwd_b, self.bwd_w, self.bwd_u, self.bwd_b, self.head_w, self.head_b]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self) -> "BiGruClassifier":
        self.training = True
        return self

    def eval(self) -> "BiGruClassifier":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ------------------------------------------------------------------
    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 3:
            raise SchemaError(f"expected a B x W x F batch, got shape {x.shape}")
        if x.shape[2] != self.n_features:
            raise SchemaError(f"batch has {x.shape[2]} features, model expects {self.n_features}")
        if self.window is not None and x.shape[1] != self.window:
            raise SchemaError(f"batch has window {x.shape[1]}, model expects {self.window}")
        return x

    def pooled(self, x) -> Tensor:
        """Concatenated final states of both directions (pre-dropout)."""
        x = self._check_input(x)
        return nc.bigru_last_states(x, (self.fwd_w, self.fwd_u, self.fwd_b), (self.bwd_w, self.bwd_u, self.bwd_b))

    def head(self, features: Tensor) -> Tensor:
        return features @ self.head_w + self.head_b

    def forward(self, x, rng: np.random.Generator | None = None) -> ForwardOutput:
        pooled = self.pooled(x)
        if self.training and self.dropout_p > 0:
            if rng is None:
                raise ValueError("training-mode forward needs a dropout generator")
            features = nc.dropout(pooled, self.dropout_p, rng)
        else:
            features = pooled
        return ForwardOutput(features, self.head(features))

    __call__ = forward

    def extract_features(self, x, batch_size: int = 512) -> np.ndarray:
        """Eval-path features (no dropout, no tape), regardless of mode."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        out = []
        with nc.no_grad():
            for start in range(0, len(x), batch_size):
                chunk = Tensor(x[start : start + batch_size], dtype=self.fwd_w.data.dtype)
                out.append(self.pooled(chunk).data)
        if not out:
            return np.zeros((0, self.feature_dim), self.fwd_w.data.dtype)
        return np.concatenate(out, axis=0)

    def predict_logits(self, x, batch_size: int = 512) -> np.ndarray:
        feats = self.extract_features(x, batch_size)
        return feats @ self.head_w.data + self.head_b.data

    # ------------------------------------------------------------------
    def begin_step(self) -> None:
        self._in_step = True

    def end_step(self) -> None:
        self._in_step = False

    def expand_head(self, new_class_count: int) -> "BiGruClassifier":
        """Append ``new_class_count`` freshly initialized output columns.

        Existing columns are copied bit-for-bit.  The optimizer must be
        told separately (see :meth:`gridcl.strategies.Adam.sync`).
        """
        if new_class_count < 1:
            raise ValueError(f"head expansion needs a positive count, got {new_class_count}")
        if self._in_step:
            raise nc.UsageError("head expansion is only allowed at task boundaries")
        dt = self.head_w.data.dtype
        cols = self._rng.uniform(-self._bound, self._bound, size=(self.feature_dim, new_class_count)).astype(dt)
        self.head_w.data = np.concatenate([self.head_w.data, cols], axis=1)
        self.head_b.data = np.concatenate([self.head_b.data, np.zeros(new_class_count, dt)])
        self.head_w.grad = None
        self.head_b.grad = None
        return self

    def ensure_classes(self, n_classes: int) -> int:
        """Grow the head to at least ``n_classes``; returns columns added."""
        extra = n_classes - self.n_classes
        if extra > 0:
            self.expand_head(extra)
            return extra
        return 0

    # ------------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=p.data.dtype, copy=True)
            p.grad = None

    def clone(self) -> "BiGruClassifier":
        """Frozen copy with identical weights (no shared buffers)."""
        other = object.__new__(BiGruClassifier)
        other.__dict__.update(
            n_features=self.n_features,
            hidden=self.hidden,
            dropout_p=self.dropout_p,
            window=self.window,
            training=False,
            _rng=np.random.default_rng(0),
            _in_step=False,
            _bound=self._bound,
        )
        for p in self.parameters():
            setattr(other, p.name, Tensor(p.data.copy(), requires_grad=False, name=p.name, dtype=p.data.dtype))
        return other

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()


def gru_parameter_count(n_features: int, hidden: int = HIDDEN) -> int:
    """Closed-form GRU parameter total for both directions, single bias per gate."""
    return 2 * 3 * (n_features * hidden + hidden * hidden + hidden)


def head_parameter_count(n_classes: int, hidden: int = HIDDEN) -> int:
    return 2 * hidden * n_classes + n_classes


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def save_checkpoint(model: BiGruClassifier) -> bytes:
    """Serialize to bytes: magic, header length, JSON header, raw buffers."""
    params = model.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "n_features": model.n_features,
        "hidden": model.hidden,
        "dropout_p": model.dropout_p,
        "window": model.window,
        "n_classes": model.n_classes,
        "dtype": params[0].data.dtype.str,
        "tensors": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for p in params:
        buf.write(np.ascontiguousarray(p.data).tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes) -> BiGruClassifier:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise SchemaError("not a gridcl model checkpoint")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + n])
    if header["version"] != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {header['version']}")
    dt = np.dtype(header["dtype"])
    with nc.precision(dt):
        model = BiGruClassifier(
            header["n_features"],
            header["n_classes"],
            np.random.default_rng(0),
            hidden=header["hidden"],
            dropout_p=header["dropout_p"],
            window=header["window"],
        )
    offset = 12 + n
    for spec in header["tensors"]:
        p = getattr(model, spec["name"])
        count = int(np.prod(spec["shape"]))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(spec["shape"])
        p.data = arr.copy()
        offset += count * dt.itemsize
    if offset != len(blob):
        raise SchemaError("trailing bytes in checkpoint")
    return model
