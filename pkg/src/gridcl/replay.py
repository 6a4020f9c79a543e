"""Fixed-capacity replay memory with uniform or prototype-aware updates."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CAPACITY = 363
LABEL_BYTES = 8
FLOAT_BYTES = 4


class InternalStateError(RuntimeError):
    pass


@dataclass
class ReplayEntry:
    window: np.ndarray  # W x F
    label: int
    uid: int
    task: int
    logits: np.ndarray | None = None
    distance: float | None = None  # distance to the class prototype at selection

    @property
    def logits_width(self) -> int:
        return 0 if self.logits is None else len(self.logits)


def quota(capacity: int, seen_classes) -> dict[int, int]:
    """Balanced per-class slots; the remainder goes to the lowest class ids.

    ``seen_classes`` may be a count (classes 0..n-1) or an iterable of ids.
    """
    classes = list(range(seen_classes)) if isinstance(seen_classes, (int, np.integer)) else sorted(seen_classes)
    if not classes:
        raise ValueError("quota needs at least one class")
    base, rem = divmod(capacity, len(classes))
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}


def fill_quota(targets: dict, available: dict) -> dict:
    """Cap each target at its availability and re-offer unused slots in key order.

    Keys are processed in ascending order; a key never receives more than
    it has available.
    """
    alloc = {k: min(targets[k], available.get(k, 0)) for k in targets}
    spare = sum(targets.values()) - sum(alloc.values())
    while spare > 0:
        hungry = [k for k in sorted(alloc) if alloc[k] < available.get(k, 0)]
        if not hungry:
            break
        # spread evenly, lowest keys first, to keep the balance within one slot
        for k in hungry:
            if spare == 0:
                break
            alloc[k] += 1
            spare -= 1
    return alloc


def prototype_distances(features: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    prototype = np.asarray(prototype)
    if features.ndim != 2 or features.shape[1] != prototype.shape[-1]:
        raise ValueError(f"feature shape {features.shape} does not match prototype {prototype.shape}")
    d = features.astype(np.float64) - prototype.astype(np.float64)
    return np.einsum("ij,ij->i", d, d)


@dataclass
class Selection:
    chosen: np.ndarray  # positions into the candidate list
    shortfall: int = 0


def select_hybrid(distances, K: int, rho: float, order_keys=None) -> Selection:
    """Keep the floor(rho*K) nearest and the K - floor(rho*K) farthest candidates.

    Candidates are ranked by (distance, order key) ascending; ``order_keys``
    defaults to the candidate position, so ties resolve by stream index.
    Returned positions are sorted ascending.
    """
    d = np.asarray(distances, dtype=np.float64)
    n = len(d)
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if K < 0:
        raise ValueError("K must be non-negative")
    if n <= K:
        return Selection(np.arange(n), K - n)
    keys = np.arange(n) if order_keys is None else np.asarray(order_keys)
    ranked = np.lexsort((keys, d))
    near = int(np.floor(rho * K + 1e-9))
    far = K - near
    chosen = np.concatenate([ranked[:near], ranked[n - far :] if far else ranked[:0]])
    return Selection(np.sort(chosen), 0)


class ReplayBuffer:
    """Class-balanced replay memory.

    ``policy`` is ``"uniform"`` (ER and DER++) or ``"prototype"`` (ProDER).
    Slots are balanced per class with :func:`quota`; within a class that
    appears in several tasks (domain-incremental streams) its slots are
    balanced again across those tasks by the same rule.
    """

    def __init__(
        self,
        capacity: int = CAPACITY,
        policy: str = "uniform",
        store_logits: bool = False,
        rng: np.random.Generator | None = None,
        rho: float = 0.45,
    ):
        if policy not in ("uniform", "prototype"):
            raise ValueError(f"unknown buffer policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.store_logits = store_logits or policy == "prototype"
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.rho = rho
        self.entries: list[ReplayEntry] = []
        self.seen: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return dict(sorted(counts.items()))

    # ------------------------------------------------------------------
    def sample(self, k: int) -> list[ReplayEntry]:
        """Uniform draw of ``k`` distinct entries (all of them if fewer)."""
        if not self.entries:
            return []
        k = min(k, len(self.entries))
        idx = self.rng.choice(len(self.entries), size=k, replace=False)
        return [self.entries[i] for i in idx]

    def arrays(self, entries: list[ReplayEntry] | None = None):
        entries = self.entries if entries is None else entries
        x = np.stack([e.window for e in entries])
        y = np.array([e.label for e in entries], dtype=np.int64)
        return x, y

    # ------------------------------------------------------------------
    def update(self, stream, labels: np.ndarray, task: int, model=None, bank=None) -> None:
        """End-of-task update with the current task stream.

        ``stream`` is a :class:`~gridcl.data.WindowSet`; ``labels`` its
        labels under the scenario target.  ``model`` supplies logits (and
        features for the prototype policy); ``bank`` maps class -> centroid.
        """
        labels = np.asarray(labels)
        self.seen.update(int(c) for c in np.unique(labels))
        # candidate pools keyed by (class, task)
        pools: dict[tuple[int, int], list] = {}
        for e in self.entries:
            pools.setdefault((e.label, e.task), []).append(e)
        new_idx: dict[int, np.ndarray] = {}
        for c in np.unique(labels):
            new_idx[int(c)] = np.flatnonzero(labels == c)

        class_quota = quota(self.capacity, self.seen)
        avail_class = {c: sum(len(v) for (cc, _), v in pools.items() if cc == c) for c in class_quota}
        for c, idx in new_idx.items():
            avail_class[c] = avail_class.get(c, 0) + len(idx)
        class_alloc = fill_quota(class_quota, avail_class)

        logits = features = None
        if self.store_logits and len(stream):
            if model is None:
                raise InternalStateError("logit-storing buffer update needs the model")
            features = model.extract_features(stream.x)
            logits = features @ model.head_w.data + model.head_b.data

        kept: list[ReplayEntry] = []
        for c in sorted(class_alloc):
            tasks_c = sorted({t for (cc, t) in pools if cc == c} | ({task} if c in new_idx else set()))
            sub_avail = {t: len(pools.get((c, t), [])) for t in tasks_c}
            if c in new_idx:
                sub_avail[task] = sub_avail.get(task, 0) + len(new_idx[c])
            sub_alloc = fill_quota(quota(class_alloc[c], tasks_c), sub_avail) if class_alloc[c] else {}
            for t in tasks_c:
                k = sub_alloc.get(t, 0)
                old = pools.get((c, t), [])
                if t == task and c in new_idx:
                    kept += self._admit(c, t, old, stream, new_idx[c], k, logits, features, model, bank)
                else:
                    kept += self._shrink(c, old, k, model, bank)
        self.entries = kept
        if len(self.entries) > self.capacity:
            raise InternalStateError("buffer exceeded its capacity")

    def _prototype(self, bank, c):
        if bank is None or c not in bank:
            raise InternalStateError(f"no prototype for class {c}")
        return bank[c]

    def _admit(self, c, t, old, stream, idx, k, logits, features, model, bank) -> list[ReplayEntry]:
        # old entries of (c, t) only exist if a task id repeats; merge them as candidates
        cand_windows = [e.window for e in old] + [stream.x[i] for i in idx]
        cand_uid = [e.uid for e in old] + [int(stream.uid[i]) for i in idx]
        cand_logits = [e.logits for e in old] + ([logits[i].copy() for i in idx] if logits is not None else [None] * len(idx))
        n = len(cand_windows)
        dist = [None] * n
        if self.policy == "prototype":
            p = self._prototype(bank, c)
            old_feats = model.extract_features(np.stack([e.window for e in old])) if old else np.zeros((0, len(p)))
            feats = np.concatenate([old_feats, features[idx]]) if len(idx) else old_feats
            d = prototype_distances(feats, p)
            sel = select_hybrid(d, k, self.rho).chosen
            dist = list(d)
        else:
            sel = np.sort(self.rng.choice(n, size=min(k, n), replace=False)) if k else np.zeros(0, np.int64)
        return [
            ReplayEntry(cand_windows[i], c, cand_uid[i], t, cand_logits[i], None if dist[i] is None else float(dist[i]))
            for i in sel
        ]

    def _shrink(self, c, old, k, model, bank) -> list[ReplayEntry]:
        if k >= len(old):
            return list(old)
        if k == 0:
            return []
        if self.policy == "prototype":
            p = self._prototype(bank, c)
            feats = model.extract_features(np.stack([e.window for e in old]))
            d = prototype_distances(feats, p)
            # stored entries keep insertion order, i.e. stream order
            sel = select_hybrid(d, k, self.rho).chosen
            out = []
            for i in sel:
                old[i].distance = float(d[i])
                out.append(old[i])
            return out
        sel = np.sort(self.rng.choice(len(old), size=k, replace=False))
        return [old[i] for i in sel]

    # ------------------------------------------------------------------
    def dump(self, path) -> None:
        """Diagnostic listing: one record per entry."""
        records = [
            {
                "class": e.label,
                "uid": e.uid,
                "task": e.task,
                "distance": e.distance,
                "logits_width": e.logits_width,
            }
            for e in self.entries
        ]
        Path(path).write_text(json.dumps({"capacity": self.capacity, "policy": self.policy, "entries": records}, indent=1))


@dataclass
class MemoryReport:
    entries: int
    entry_bytes: int
    prototype_bytes: int
    total_bytes: int = field(init=False)

    def __post_init__(self):
        self.total_bytes = self.entry_bytes + self.prototype_bytes

    @property
    def total_kib(self) -> float:
        return self.total_bytes / 1024

    def as_dict(self) -> dict:
        return {
            "entries": self.entries,
            "entry_bytes": self.entry_bytes,
            "prototype_bytes": self.prototype_bytes,
            "total_bytes": self.total_bytes,
            "total_kib": round(self.total_kib, 2),
        }


def memory_bytes(
    n_entries: int,
    window_shape: tuple[int, int] = (12, 51),
    logits_width: int = 0,
    prototype_count: int = 0,
    feature_dim: int = 300,
) -> MemoryReport:
    """Bytes for ``n_entries`` float32 windows with int64 labels, optional logits and prototypes."""
    per_entry = window_shape[0] * window_shape[1] * FLOAT_BYTES + LABEL_BYTES + FLOAT_BYTES * logits_width
    return MemoryReport(n_entries, n_entries * per_entry, prototype_count * feature_dim * FLOAT_BYTES)


def buffer_memory(buffer: ReplayBuffer | None, prototype_count: int = 0, feature_dim: int = 300) -> MemoryReport:
    """Accounting from actual buffer contents (logit widths as stored)."""
    if buffer is None or not buffer.entries:
        return MemoryReport(0, 0, prototype_count * feature_dim * FLOAT_BYTES)
    w = buffer.entries[0].window.shape
    window_bytes = w[0] * w[1] * FLOAT_BYTES + LABEL_BYTES
    entry_bytes = sum(window_bytes + FLOAT_BYTES * e.logits_width for e in buffer.entries)
    return MemoryReport(len(buffer.entries), entry_bytes, prototype_count * feature_dim * FLOAT_BYTES)
