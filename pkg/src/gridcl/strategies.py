"""Training strategies: Joint, Cumulative, Fine-Tuning, EWC, LwF, ER, DER++, ProDER.

All strategies share :func:`train_task`; they differ in how a step's loss
is assembled and in what they do at task boundaries.
"""
from __future__ import annotations

import copy
import functools
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numcore as nc
from .data import WindowSet
from .model import BiGruClassifier
from .numcore import Tensor
from .replay import CAPACITY, InternalStateError, ReplayBuffer, ReplayEntry

METHODS = ("joint", "cumulative", "finetune", "ewc", "lwf", "er", "derpp", "proder")


class DataError(ValueError):
    pass


@dataclass
class StrategyConfig:
    """Hyperparameters; every field can be overridden from the run config."""

    method: str = "finetune"
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: int = 150
    dropout: float = 0.3
    buffer_size: int = CAPACITY
    replay_ratio: float = 0.5
    ewc_lambda: float = 10.0
    fisher_samples: int = 512
    lwf_lambda: float = 1.0
    derpp_alpha: float = 2.0
    derpp_beta: float = 1.0
    proder_alpha: float = 2.0
    proder_beta: float = 5.0
    proder_gamma: float = 0.5
    proder_rho: float = 0.45
    proder_att_per_dim: bool = True
    kd_temperature: float = 2.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ValueError("replay_ratio must lie in [0, 1]")
        if not 0.0 <= self.proder_rho <= 1.0:
            raise ValueError("proder_rho must lie in [0, 1]")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        for name in ("ewc_lambda", "lwf_lambda", "derpp_alpha", "derpp_beta", "proder_alpha", "proder_beta", "proder_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def for_scenario(cls, scenario_id: int, **overrides) -> "StrategyConfig":
        """Defaults with the scenario-specific ProDER weights applied."""
        base = {"proder_beta": 5.0 if scenario_id == 1 else 7.2, "proder_rho": 0.50 if scenario_id == 4 else 0.45}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


class Adam:
    """Adam with moment buffers that follow head growth (new columns start at zero).

    Moments are kept divided by (1 - beta): the update is algebraically the
    textbook one but needs fewer passes over the parameter arrays.
    """

    def __init__(self, params: list[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def sync(self) -> None:
        for i, p in enumerate(self.params):
            if self.m[i].shape != p.data.shape:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                sl = tuple(slice(0, n) for n in self.m[i].shape)
                m[sl] = self.m[i]
                v[sl] = self.v[i]
                self.m[i], self.v[i] = m, v

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # m_hat = (1-b1) m / (1-b1^t), v_hat = (1-b2) v / (1-b2^t)
        c1 = (1 - b1) / (1 - b1**self.t)
        c2 = np.sqrt((1 - b2) / (1 - b2**self.t))
        eps = self.eps / c2
        scale = self.lr * c1 / c2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += g
            tmp = np.square(g)
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += eps
            np.divide(m, tmp, out=tmp)
            tmp *= scale
            p.data -= tmp


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------


def _check_labels(labels: np.ndarray, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValueError(f"label {labels.max()} outside head of size {width}")
    return labels


def loss_ce(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over all head columns."""
    labels = _check_labels(labels, logits.shape[1])
    logp = nc.log_softmax_t(logits)
    picked = logp[np.arange(len(labels)), labels]
    return nc.scale(picked.mean(), -1.0)


def _width_groups(entries: list[ReplayEntry]) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for i, e in enumerate(entries):
        if e.logits is None:
            raise InternalStateError("replay entry carries no logits")
        groups.setdefault(e.logits_width, []).append(i)
    return {w: np.asarray(ix) for w, ix in sorted(groups.items())}


def loss_logit_mse(logits: Tensor, entries: list[ReplayEntry]) -> Tensor:
    """Mean over entries of the squared error against stored logits, over each stored width."""
    total = None
    n = len(entries)
    for w, ix in _width_groups(entries).items():
        stored = np.stack([entries[i].logits for i in ix]).astype(logits.data.dtype)
        cur = logits[ix, :w] if len(ix) != logits.shape[0] or w != logits.shape[1] else logits
        part = nc.sum_all(nc.square(cur - stored))
        part = nc.scale(part, 1.0 / (w * n))
        total = part if total is None else total + part
    return total


def loss_proder_distill(logits: Tensor, stored: list[np.ndarray] | list[ReplayEntry], temperature: float) -> Tensor:
    """Batch mean of KL(softmax(z/T) || softmax(z_old/T)) over each stored width.

    Only ``logits`` receives gradient.
    """
    entries = [s if isinstance(s, ReplayEntry) else ReplayEntry(None, -1, -1, -1, np.asarray(s)) for s in stored]
    n = len(entries)
    total = None
    for w, ix in _width_groups(entries).items():
        old = np.stack([entries[i].logits for i in ix]).astype(np.float64)
        log_q = np.log(np.maximum(nc.softmax_np(old, temperature), 1e-12)).astype(logits.data.dtype)
        cur = logits[ix, :w] if len(ix) != logits.shape[0] or w != logits.shape[1] else logits
        log_p = nc.log_softmax_t(cur, temperature)
        p = nc.exp(log_p)
        part = nc.scale(nc.sum_all(p * (log_p - log_q)), 1.0 / n)
        total = part if total is None else total + part
    return total


def loss_lwf(logits: Tensor, teacher_logits: np.ndarray, lam: float = 1.0) -> Tensor:
    """lam * mean squared error over the teacher's (old) columns."""
    teacher_logits = np.asarray(teacher_logits)
    w = teacher_logits.shape[1]
    cur = logits[:, :w] if w != logits.shape[1] else logits
    return nc.scale(nc.mean_all(nc.square(cur - teacher_logits.astype(logits.data.dtype))), lam)


def loss_attraction(features: Tensor, labels, bank: "PrototypeBank", per_dim: bool = False) -> Tensor:
    """Mean squared distance to each sample's own (detached) class centroid.

    With ``per_dim`` the squared distance is also averaged over feature
    coordinates, which keeps the loss scale independent of the width.
    """
    labels = np.asarray(labels)
    missing = sorted(set(int(c) for c in labels) - set(bank.centroids))
    if missing:
        raise InternalStateError(f"no centroid for classes {missing}")
    anchors = np.stack([bank.centroids[int(c)] for c in labels]).astype(features.data.dtype)
    sq = nc.square(features - anchors)
    return nc.mean_all(sq) if per_dim else nc.mean_all(nc.sum_rows(sq))


@functools.lru_cache(maxsize=32)
def _pair_matrix(C: int) -> np.ndarray:
    rows = []
    for i in range(C):
        for j in range(C):
            if i != j:
                r = np.zeros(C)
                r[i], r[j] = 1.0, -1.0
                rows.append(r)
    return np.asarray(rows)


def loss_repulsion(features: Tensor | None, labels, bank: "PrototypeBank") -> Tensor:
    """Ordered-pair mean of exp(-||p_i - p_j||) over all seen classes.

    Classes present in the batch use their batch-mean feature (so the
    gradient reaches the encoder); absent classes use the stored centroid.
    """
    classes = sorted(bank.centroids)
    dt = features.data.dtype if features is not None else np.float64
    C = len(classes)
    if C < 2:
        return Tensor(0.0, dtype=dt)
    labels = np.asarray(labels) if labels is not None else np.zeros(0, np.int64)
    B = len(labels)
    avg = np.zeros((C, B), dt)
    const = np.zeros((C, bank.dim), dt)
    for k, c in enumerate(classes):
        members = np.flatnonzero(labels == c)
        if len(members):
            avg[k, members] = 1.0 / len(members)
        else:
            const[k] = bank.centroids[c]
    protos = Tensor(const, dtype=dt) if features is None or B == 0 else nc.matmul(avg, features) + const
    diffs = nc.matmul(_pair_matrix(C).astype(dt), protos)
    return nc.mean_all(nc.exp(-nc.row_norm(diffs)))


@dataclass
class FisherState:
    importance: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]


class EwcPenalty:
    """Sum over anchored tasks of (lam/2) * F * (theta - theta*)^2.

    The per-task quadratics are folded into per-parameter coefficients so
    each step costs the same regardless of how many tasks are anchored.
    """

    def __init__(self, lam: float):
        self.lam = lam
        self.states: list[FisherState] = []
        self._a: dict[str, np.ndarray] = {}
        self._b: dict[str, np.ndarray] = {}
        self._c = 0.0

    def add(self, state: FisherState) -> None:
        self.states.append(state)
        for name, f in state.importance.items():
            f64 = f.astype(np.float64)
            a = state.anchor[name].astype(np.float64)
            if name in self._a:
                self._a[name] = _pad_add(self._a[name], f64)
                self._b[name] = _pad_add(self._b[name], f64 * a)
            else:
                self._a[name] = f64.copy()
                self._b[name] = f64 * a
            self._c += float(np.sum(f64 * a * a))

    def __call__(self, params: dict[str, Tensor]) -> Tensor | None:
        if not self.states:
            return None
        total = None
        for name, a in self._a.items():
            p = params[name]
            # anchors recorded before a head expansion cover only the old columns
            theta = p if p.shape == a.shape else p[tuple(slice(0, n) for n in a.shape)]
            dt = p.data.dtype
            term = nc.sum_all(nc.square(theta) * a.astype(dt)) - nc.scale(nc.sum_all(theta * self._b[name].astype(dt)), 2.0)
            total = term if total is None else total + term
        return nc.scale(total + self._c, self.lam / 2.0)


def _pad_add(acc: np.ndarray, new: np.ndarray) -> np.ndarray:
    if acc.shape == new.shape:
        return acc + new
    shape = tuple(max(a, b) for a, b in zip(acc.shape, new.shape))
    out = np.zeros(shape)
    out[tuple(slice(0, n) for n in acc.shape)] += acc
    out[tuple(slice(0, n) for n in new.shape)] += new
    return out


def loss_ewc_direct(params: dict[str, Tensor], states: list[FisherState], lam: float) -> Tensor:
    """Unfolded per-task form of the EWC penalty (reference path)."""
    total = None
    for st in states:
        for name, f in st.importance.items():
            p = params[name]
            sl = tuple(slice(0, n) for n in f.shape)
            theta = p[sl] if p.shape != f.shape else p
            term = nc.sum_all(nc.square(theta - st.anchor[name].astype(p.data.dtype)) * f.astype(p.data.dtype))
            total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return nc.scale(total, lam / 2.0)


def fisher_update(model: BiGruClassifier, x: np.ndarray, labels: np.ndarray, rng: np.random.Generator, max_samples: int = 512) -> FisherState:
    """Diagonal empirical Fisher: mean of per-sample squared log-likelihood gradients (eval mode)."""
    n = len(x)
    idx = np.sort(rng.choice(n, size=max_samples, replace=False)) if n > max_samples else np.arange(n)
    params = model.named_parameters()
    acc = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
    was_training = model.training
    model.eval()
    for i in idx:
        model.zero_grad()
        tape = nc.GradTape()
        with tape:
            out = model.forward(x[i : i + 1])
            loss = loss_ce(out.logits, labels[i : i + 1])
        nc.backward(loss, tape)
        for k, p in params.items():
            if p.grad is not None:
                acc[k] += p.grad.astype(np.float64) ** 2
    model.zero_grad()
    model.training = was_training
    m = max(len(idx), 1)
    return FisherState(
        {k: (v / m).astype(params[k].data.dtype) for k, v in acc.items()},
        {k: p.data.copy() for k, p in params.items()},
    )


# ----------------------------------------------------------------------
# prototypes
# ----------------------------------------------------------------------


@dataclass
class PrototypeBank:
    dim: int
    centroids: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    refreshed_at: dict[int, int] = field(default_factory=dict)
    stale: set[int] = field(default_factory=set)

    def __contains__(self, c) -> bool:
        return int(c) in self.centroids

    def __getitem__(self, c) -> np.ndarray:
        return self.centroids[int(c)]

    def __len__(self) -> int:
        return len(self.centroids)

    def snapshot(self) -> dict[int, np.ndarray]:
        return {c: v.copy() for c, v in self.centroids.items()}


def refresh_prototypes(
    bank: PrototypeBank,
    model: BiGruClassifier,
    stream: WindowSet,
    labels: np.ndarray,
    buffer: ReplayBuffer | None,
    epoch: int = 0,
) -> PrototypeBank:
    """Recompute each centroid from current-task windows plus buffered ones (deduplicated)."""
    xs = [stream.x] if len(stream) else []
    ys = [np.asarray(labels)] if len(stream) else []
    seen_uid = set(int(u) for u in stream.uid)
    if buffer is not None:
        extra = [e for e in buffer.entries if e.uid not in seen_uid]
        if extra:
            xs.append(np.stack([e.window for e in extra]))
            ys.append(np.array([e.label for e in extra]))
    present = set()
    if xs:
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        feats = model.extract_features(x)
        for c in np.unique(y):
            rows = feats[y == c]
            bank.centroids[int(c)] = rows.astype(np.float64).mean(axis=0).astype(feats.dtype)
            bank.counts[int(c)] = len(rows)
            bank.refreshed_at[int(c)] = epoch
            present.add(int(c))
    bank.stale = set(bank.centroids) - present
    return bank


# ----------------------------------------------------------------------
# strategies
# ----------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    n_task: int
    replay: list[ReplayEntry]


class Strategy:
    name = "finetune"
    uses_buffer = False

    def __init__(self, config: StrategyConfig, rngs: dict[str, np.random.Generator]):
        self.config = config
        self.rngs = rngs
        self.buffer: ReplayBuffer | None = None

    def begin_task(self, model, task: int, stream: WindowSet, labels: np.ndarray) -> None:
        pass

    def begin_epoch(self, model, task: int, epoch: int, stream: WindowSet, labels: np.ndarray) -> None:
        pass

    def replay_count(self, task: int) -> int:
        return 0

    def step_loss(self, model, out, batch: Batch, task: int) -> Tensor:
        return loss_ce(out.logits, batch.y)

    def end_task(self, model, task: int, stream: WindowSet, labels: np.ndarray) -> None:
        pass

    def prototype_count(self) -> int:
        return 0


class FineTune(Strategy):
    name = "finetune"


class Joint(FineTune):
    name = "joint"


class Cumulative(FineTune):
    name = "cumulative"


class Ewc(Strategy):
    name = "ewc"

    def __init__(self, config, rngs):
        super().__init__(config, rngs)
        self.penalty = EwcPenalty(config.ewc_lambda)

    def step_loss(self, model, out, batch, task):
        loss = loss_ce(out.logits, batch.y)
        pen = self.penalty(model.named_parameters())
        return loss if pen is None else loss + pen

    def end_task(self, model, task, stream, labels):
        self.penalty.add(fisher_update(model, stream.x, labels, self.rngs["fisher"], self.config.fisher_samples))


class Lwf(Strategy):
    name = "lwf"

    def __init__(self, config, rngs):
        super().__init__(config, rngs)
        self.teacher: BiGruClassifier | None = None

    def step_loss(self, model, out, batch, task):
        loss = loss_ce(out.logits, batch.y)
        if self.teacher is None:
            return loss
        teacher_logits = self.teacher.predict_logits(batch.x)
        return loss + loss_lwf(out.logits, teacher_logits, self.config.lwf_lambda)

    def end_task(self, model, task, stream, labels):
        self.teacher = model.clone()


class ExperienceReplay(Strategy):
    name = "er"
    uses_buffer = True
    policy = "uniform"
    store_logits = False

    def __init__(self, config, rngs):
        super().__init__(config, rngs)
        self.buffer = ReplayBuffer(
            config.buffer_size, self.policy, self.store_logits, rngs["buffer"], rho=config.proder_rho
        )

    def replay_count(self, task):
        if not self.buffer.entries:
            return 0
        return int(round(self.config.batch_size * self.config.replay_ratio))

    def end_task(self, model, task, stream, labels):
        self.buffer.update(stream, labels, task, model)


class DerPP(ExperienceReplay):
    name = "derpp"
    store_logits = True

    def step_loss(self, model, out, batch, task):
        k = batch.n_task
        logits_task = out.logits[:k] if batch.replay else out.logits
        loss = loss_ce(logits_task, batch.y[:k])
        if batch.replay:
            rep = out.logits[k:]
            cfg = self.config
            loss = loss + nc.scale(loss_logit_mse(rep, batch.replay), cfg.derpp_alpha)
            loss = loss + nc.scale(loss_ce(rep, batch.y[k:]), cfg.derpp_beta)
        return loss


class ProDer(ExperienceReplay):
    name = "proder"
    policy = "prototype"
    store_logits = True

    def __init__(self, config, rngs):
        super().__init__(config, rngs)
        self.bank: PrototypeBank | None = None

    def begin_epoch(self, model, task, epoch, stream, labels):
        if self.bank is None:
            self.bank = PrototypeBank(model.feature_dim)
        refresh_prototypes(self.bank, model, stream, labels, self.buffer, epoch)

    def step_loss(self, model, out, batch, task):
        return proder_step_loss(out, batch, self.bank, self.config)

    def end_task(self, model, task, stream, labels):
        refresh_prototypes(self.bank, model, stream, labels, self.buffer, epoch=-1)
        self.buffer.update(stream, labels, task, model, bank=self.bank.centroids)

    def prototype_count(self) -> int:
        return 0 if self.bank is None else len(self.bank)


def proder_step_loss(out, batch: Batch, bank: PrototypeBank, config: StrategyConfig) -> Tensor:
    """CE on the whole mixed batch + alpha*KD (replay) + beta*attraction + gamma*repulsion."""
    loss = loss_ce(out.logits, batch.y)
    if batch.replay and config.proder_alpha:
        rep = out.logits[batch.n_task :]
        loss = loss + nc.scale(loss_proder_distill(rep, batch.replay, config.kd_temperature), config.proder_alpha)
    if config.proder_beta:
        att = loss_attraction(out.features, batch.y, bank, per_dim=config.proder_att_per_dim)
        loss = loss + nc.scale(att, config.proder_beta)
    if config.proder_gamma:
        loss = loss + nc.scale(loss_repulsion(out.features, batch.y, bank), config.proder_gamma)
    return loss


STRATEGIES = {
    cls.name: cls for cls in (Joint, Cumulative, FineTune, Ewc, Lwf, ExperienceReplay, DerPP, ProDer)
}


def make_strategy(config: StrategyConfig, rngs: dict[str, np.random.Generator]) -> Strategy:
    return STRATEGIES[config.method](config, rngs)


def run_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generator streams for one run."""
    names = ("init", "shuffle", "dropout", "buffer", "fisher")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


# ----------------------------------------------------------------------
# task loop
# ----------------------------------------------------------------------


def iter_batches(strategy: Strategy, stream: WindowSet, labels: np.ndarray, task: int, rng: np.random.Generator):
    cfg = strategy.config
    n_replay = strategy.replay_count(task)
    n_task = cfg.batch_size - n_replay
    if n_task < 1:
        raise ValueError("replay ratio leaves no room for task samples")
    order = rng.permutation(len(stream))
    for start in range(0, len(order), n_task):
        idx = order[start : start + n_task]
        x, y = stream.x[idx], labels[idx]
        replay: list[ReplayEntry] = []
        if n_replay:
            replay = strategy.buffer.sample(n_replay)
            rx, ry = strategy.buffer.arrays(replay)
            x = np.concatenate([x, rx])
            y = np.concatenate([y, ry])
        yield Batch(x, y, len(idx), replay)


def train_task(
    model: BiGruClassifier,
    stream: WindowSet,
    labels: np.ndarray,
    strategy: Strategy,
    optimizer: Adam,
    task: int,
    rngs: dict[str, np.random.Generator],
    on_epoch=None,
) -> None:
    """Run the configured number of epochs over one task stream."""
    if len(stream) == 0:
        raise DataError(f"task {task} has an empty training stream")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= model.n_classes:
        raise ValueError("head must be expanded before training a task")
    optimizer.sync()
    strategy.begin_task(model, task, stream, labels)
    for epoch in range(strategy.config.epochs):
        strategy.begin_epoch(model, task, epoch, stream, labels)
        model.train()
        for batch in iter_batches(strategy, stream, labels, task, rngs["shuffle"]):
            model.begin_step()
            model.zero_grad()
            tape = nc.GradTape()
            with tape:
                out = model.forward(batch.x, rngs["dropout"])
                loss = strategy.step_loss(model, out, batch, task)
            nc.backward(loss, tape)
            optimizer.step()
            model.end_step()
        if on_epoch is not None:
            on_epoch(epoch)
    model.eval()
    strategy.end_task(model, task, stream, labels)


def clone_strategy_config(cfg: StrategyConfig, **changes) -> StrategyConfig:
    data = copy.deepcopy(cfg.as_dict())
    data.update(changes)
    return StrategyConfig(**data)
