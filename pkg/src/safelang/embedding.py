"""Text embedders, cosine similarity and contrastive fine-tuning.

Every backend exposes ``embed(text) -> np.ndarray`` and ``dim``. Trainable
backends (:class:`LocalEmbedder`, :class:`ProjectedEmbedder`) also expose a
parameter array plus ``forward``/``backward`` so :func:`finetune` can run
plain gradient descent on the pair loss.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constraints import generate_pairs

_TOKEN = re.compile(r"[a-z0-9']+")
MAGIC = b"SLEMB\x00"
FORMAT_VERSION = 1


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_slot(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _cosine_grads(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    c = a @ b / (na * nb)
    da = b / (na * nb) - c * a / na ** 2
    db = a / (na * nb) - c * b / nb ** 2
    return c, da, db


def contrastive_loss(pairs) -> float:
    """Mean of 0.5 * (label - cos(h1, h2))**2 over ``(h1, h2, label)`` triples."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("contrastive loss needs at least one pair")
    return sum(0.5 * (y - cosine_sim(h1, h2)) ** 2 for h1, h2, y in pairs) / len(pairs)


class LocalEmbedder:
    """Hashed bag-of-words embedder with a trainable ``V x d`` slot table.

    Tokens are lowercase alphanumeric runs hashed into ``vocab_size`` slots;
    a text embeds as the L2-normalized mean of its token rows.
    """

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=float)
        if table.ndim != 2 or not np.all(np.isfinite(table)):
            raise ValueError("table must be a finite 2-d array")
        self.params = table
        self._slot_cache: dict[str, np.ndarray] = {}

    @classmethod
    def create(cls, vocab_size: int = 512, dim: int = 32, seed: int = 0,
               init: str = "uniform", scale: float = 0.05) -> "LocalEmbedder":
        rng = np.random.default_rng(seed)
        if init == "uniform":
            table = rng.uniform(-scale, scale, size=(vocab_size, dim))
        elif init == "orthogonal":
            if vocab_size > dim:
                raise ValueError("orthogonal init needs vocab_size <= dim")
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            table = q[:vocab_size] * scale
        else:
            raise ValueError(f"unknown init {init!r}")
        return cls(table)

    @property
    def table(self) -> np.ndarray:
        return self.params

    @property
    def vocab_size(self) -> int:
        return self.params.shape[0]

    @property
    def dim(self) -> int:
        return self.params.shape[1]

    def copy(self) -> "LocalEmbedder":
        return LocalEmbedder(self.params.copy())

    def slots(self, text: str) -> np.ndarray:
        hit = self._slot_cache.get(text)
        if hit is None:
            toks = tokenize(text)
            if not toks:
                raise ValueError(f"no tokens in {text!r}")
            hit = np.array([token_slot(t, self.vocab_size) for t in toks])
            self._slot_cache[text] = hit
        return hit

    def forward(self, text: str):
        slots = self.slots(text)
        m = self.params[slots].mean(axis=0)
        norm = np.linalg.norm(m)
        if norm == 0.0:
            raise ValueError(f"zero pooled vector for {text!r}")
        return m / norm, (slots, m, norm)

    def backward(self, dh: np.ndarray, cache, grad: np.ndarray) -> None:
        slots, m, norm = cache
        u = m / norm
        dm = (dh - u * (u @ dh)) / norm
        np.add.at(grad, slots, dm / len(slots))

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        return self.forward(text)[0]

    # --- serialization ---
    def to_bytes(self) -> bytes:
        v, d = self.params.shape
        header = MAGIC + struct.pack("<HII", FORMAT_VERSION, v, d)
        return header + self.params.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "LocalEmbedder":
        n = len(MAGIC)
        if data[:n] != MAGIC:
            raise ValueError("not a local embedder file")
        version, v, d = struct.unpack_from("<HII", data, n)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported embedder file version {version}")
        body = data[n + struct.calcsize("<HII"):]
        if len(body) != v * d * 8:
            raise ValueError("embedder file truncated")
        return cls(np.frombuffer(body, dtype="<f8").reshape(v, d).copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LocalEmbedder":
        return cls.from_bytes(Path(path).read_bytes())


class ProjectedEmbedder:
    """Frozen base embedder followed by a trainable square linear head."""

    def __init__(self, base, weight: np.ndarray | None = None):
        self.base = base
        self.params = None if weight is None else np.asarray(weight, dtype=float)

    def _base(self, text: str) -> np.ndarray:
        e = np.asarray(self.base.embed(text), dtype=float)
        if self.params is None:
            self.params = np.eye(e.size)
        return e

    @property
    def dim(self) -> int:
        return self.params.shape[0] if self.params is not None else self.base.dim

    def copy(self) -> "ProjectedEmbedder":
        return ProjectedEmbedder(self.base, None if self.params is None else self.params.copy())

    def forward(self, text: str):
        e = self._base(text)
        return self.params @ e, e

    def backward(self, dh: np.ndarray, cache, grad: np.ndarray) -> None:
        grad += np.outer(dh, cache)

    def embed(self, text: str) -> np.ndarray:
        return self.forward(text)[0]


def pair_loss_and_grad(backend, text_pairs, labels):
    """Contrastive loss over text pairs and its gradient w.r.t. ``backend.params``."""
    grad = np.zeros_like(backend.params)
    n = len(labels)
    total = 0.0
    for (t1, t2), y in zip(text_pairs, labels):
        h1, c1 = backend.forward(t1)
        h2, c2 = backend.forward(t2)
        c, d1, d2 = _cosine_grads(h1, h2)
        total += 0.5 * (y - c) ** 2
        g = -(y - c) / n
        backend.backward(g * d1, c1, grad)
        backend.backward(g * d2, c2, grad)
    return total / n, grad


@dataclass
class FinetuneReport:
    iterations: int
    pairs_per_iteration: int
    losses: list[float] = field(default_factory=list)
    monitor_losses: list[float] = field(default_factory=list)
    final_monitor_loss: float | None = None


def _texts(pairs):
    return [(p.a.text, p.b.text) for p in pairs], [p.label for p in pairs]


def finetune(backend, corpus, iterations: int = 10, pairs_per_iter: int = 128,
             lr: float = 0.1, seed: int = 0, condense=None):
    """Gradient descent on the contrastive pair loss; returns a tuned copy.

    Each iteration draws a fresh balanced batch. ``losses`` holds each
    batch's loss before its update; ``monitor_losses`` tracks a fixed
    extra batch so runs with different batches stay comparable.
    """
    if backend.params is None:
        backend._base(corpus[0].text)
    tuned = backend.copy()
    seeds = np.random.SeedSequence(seed).spawn(iterations + 1)
    monitor = _texts(generate_pairs(corpus, pairs_per_iter, seeds[0], condense))
    report = FinetuneReport(iterations, pairs_per_iter)
    for it in range(iterations):
        batch = _texts(generate_pairs(corpus, pairs_per_iter, seeds[it + 1], condense))
        report.monitor_losses.append(pair_loss_and_grad(tuned, *monitor)[0])
        loss, grad = pair_loss_and_grad(tuned, *batch)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"non-finite loss/gradient at iteration {it}: loss={loss}, "
                                     f"max|grad|={np.nanmax(np.abs(grad))}")
        report.losses.append(float(loss))
        tuned.params = tuned.params - lr * grad
    report.final_monitor_loss = float(pair_loss_and_grad(tuned, *monitor)[0])
    return tuned, report


def make_backend(kind: str = "local", *, seed: int = 0, vocab_size: int = 512, dim: int = 32,
                 remote_client=None):
    if kind == "local":
        return LocalEmbedder.create(vocab_size, dim, seed)
    if kind == "remote":
        if remote_client is None:
            raise ValueError("remote backend needs a client")
        return ProjectedEmbedder(remote_client)
    raise ValueError(f"unknown backend {kind!r}")
