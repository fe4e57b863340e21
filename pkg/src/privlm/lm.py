"""Word-level recurrent language model with exact per-example gradients.

Architecture: embedding -> single LSTM layer -> output projection -> softmax.
Everything is float64 numpy; gradients are computed analytically by
backpropagation through time over the whole sequence, so each training
example yields one exact gradient (the unit the privacy machinery clips).

Parameter layout (the documented flat order, used by checkpoints and
``flat()``):

    emb      (vocab, d_emb)        token embeddings, row-major
    lstm_W   (4*d_hid, d_emb+d_hid) gate weights, gate blocks [input, forget,
                                    cell, output] over [x_t ; h_{t-1}]
    lstm_b   (4*d_hid,)             gate biases, same block order
    out_W    (d_hid, vocab)         output projection
    out_b    (vocab,)               output bias

Checkpoint format: magic ``CADPLM1``, three little-endian uint32
(vocab, d_emb, d_hid), then the flat parameter vector as little-endian
float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, TokenSequence

CHECKPOINT_MAGIC = b"CADPLM1"


class LMError(ValueError):
    """Raised for invalid model inputs (bad ids, shape mismatches, bad files)."""


def _array_shapes(vocab: int, d_emb: int, d_hid: int) -> list[tuple[int, ...]]:
    return [
        (vocab, d_emb),
        (4 * d_hid, d_emb + d_hid),
        (4 * d_hid,),
        (d_hid, vocab),
        (vocab,),
    ]


def _flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(flat: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    out, offset = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(flat[offset : offset + n].reshape(shape).copy())
        offset += n
    if offset != flat.size:
        raise LMError(f"flat vector has {flat.size} entries, expected {offset}")
    return out


@dataclass
class LMParameters:
    """Dense parameter container; see module docstring for the flat order."""

    emb: np.ndarray
    lstm_W: np.ndarray
    lstm_b: np.ndarray
    out_W: np.ndarray
    out_b: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def d_emb(self) -> int:
        return self.emb.shape[1]

    @property
    def d_hid(self) -> int:
        return self.out_W.shape[0]

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def arrays(self) -> list[np.ndarray]:
        return [self.emb, self.lstm_W, self.lstm_b, self.out_W, self.out_b]

    def flat(self) -> np.ndarray:
        return _flatten(self.arrays())

    @classmethod
    def from_flat(cls, flat: np.ndarray, vocab: int, d_emb: int, d_hid: int) -> "LMParameters":
        return cls(*_unflatten(flat, _array_shapes(vocab, d_emb, d_hid)))

    def copy(self) -> "LMParameters":
        return LMParameters(*[a.copy() for a in self.arrays()])

    def save(self, path: str | Path) -> None:
        header = CHECKPOINT_MAGIC + struct.pack("<III", self.vocab_size, self.d_emb, self.d_hid)
        body = self.flat().astype("<f8").tobytes()
        Path(path).write_bytes(header + body)

    @classmethod
    def load(cls, path: str | Path, expect_vocab: int | None = None) -> "LMParameters":
        raw = Path(path).read_bytes()
        if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise LMError(f"{path}: not a model checkpoint (bad magic)")
        off = len(CHECKPOINT_MAGIC)
        vocab, d_emb, d_hid = struct.unpack_from("<III", raw, off)
        off += struct.calcsize("<III")
        if expect_vocab is not None and vocab != expect_vocab:
            raise LMError(f"{path}: checkpoint vocabulary size {vocab} != expected {expect_vocab}")
        shapes = _array_shapes(vocab, d_emb, d_hid)
        n = sum(int(np.prod(s)) for s in shapes)
        if len(raw) - off != 8 * n:
            raise LMError(f"{path}: checkpoint body has wrong size")
        flat = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64)
        return cls.from_flat(flat, vocab, d_emb, d_hid)


@dataclass
class Gradient:
    """Gradient of the NLL w.r.t. every parameter; same layout as LMParameters."""

    emb: np.ndarray
    lstm_W: np.ndarray
    lstm_b: np.ndarray
    out_W: np.ndarray
    out_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.emb, self.lstm_W, self.lstm_b, self.out_W, self.out_b]

    def flat(self) -> np.ndarray:
        return _flatten(self.arrays())

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    @classmethod
    def from_flat(cls, flat: np.ndarray, params: LMParameters) -> "Gradient":
        shapes = _array_shapes(params.vocab_size, params.d_emb, params.d_hid)
        return cls(*_unflatten(flat, shapes))

    @classmethod
    def zeros_like(cls, params: LMParameters) -> "Gradient":
        return cls(*[np.zeros_like(a) for a in params.arrays()])


def init_params(vocab_size: int, d_emb: int, d_hid: int, seed: int) -> LMParameters:
    """Seeded uniform [-0.1, 0.1] init; forget-gate bias set to 1.0."""
    if min(vocab_size, d_emb, d_hid) < 1:
        raise LMError("all dimensions must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    arrays = [rng.uniform(-0.1, 0.1, size=s) for s in _array_shapes(vocab_size, d_emb, d_hid)]
    params = LMParameters(*arrays)
    params.lstm_b[d_hid : 2 * d_hid] = 1.0
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_ids(params: LMParameters, seqs: list[TokenSequence]) -> None:
    vocab = params.vocab_size
    for seq in seqs:
        for tid in seq.ids:
            if not (0 <= tid < vocab):
                raise LMError(
                    f"token id {tid} out of range for vocabulary of size {vocab} "
                    f"(sequence {seq.source_text!r})"
                )


def _pack_batch(seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad to a common length; returns inputs (B,T), targets (B,T), mask (B,T)."""
    if not seqs:
        raise LMError("empty batch")
    for seq in seqs:
        if len(seq) < 2:
            raise LMError(f"sequence needs at least 2 tokens: {seq.source_text!r}")
    B = len(seqs)
    T = max(len(s) for s in seqs) - 1
    X = np.zeros((B, T), dtype=np.int64)
    Y = np.zeros((B, T), dtype=np.int64)
    M = np.zeros((B, T), dtype=np.float64)
    for b, seq in enumerate(seqs):
        ids = np.asarray(seq.ids, dtype=np.int64)
        t = len(ids) - 1
        X[b, :t] = ids[:-1]
        Y[b, :t] = ids[1:]
        M[b, :t] = 1.0
    return X, Y, M


class _ForwardCache:
    """Per-step activations retained for backpropagation through time."""

    __slots__ = ("X", "Y", "M", "z", "gates", "c_prev", "ct", "h", "logp")

    def __init__(self):
        self.z: list[np.ndarray] = []
        self.gates: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        self.c_prev: list[np.ndarray] = []
        self.ct: list[np.ndarray] = []
        self.h: list[np.ndarray] = []
        self.logp: list[np.ndarray] = []


def _forward_batch(params: LMParameters, seqs: list[TokenSequence]) -> _ForwardCache:
    _check_ids(params, seqs)
    X, Y, M = _pack_batch(seqs)
    B, T = X.shape
    H = params.d_hid
    cache = _ForwardCache()
    cache.X, cache.Y, cache.M = X, Y, M

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    Wt = params.lstm_W.T  # (E+H, 4H)
    for t in range(T):
        z = np.concatenate([params.emb[X[:, t]], h], axis=1)
        a = z @ Wt + params.lstm_b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H : 2 * H])
        g = np.tanh(a[:, 2 * H : 3 * H])
        o = _sigmoid(a[:, 3 * H :])
        cache.c_prev.append(c)
        c = f * c + i * g
        ct = np.tanh(c)
        h = o * ct

        logits = h @ params.out_W + params.out_b
        m = logits.max(axis=1, keepdims=True)
        logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))

        cache.z.append(z)
        cache.gates.append((i, f, g, o))
        cache.ct.append(ct)
        cache.h.append(h)
        cache.logp.append(logp)
    return cache


def forward(params: LMParameters, seq: TokenSequence) -> np.ndarray:
    """Per-position log-probability table, shape (len(seq)-1, vocab).

    Row t is the log distribution over the token at position t+1 given
    tokens 0..t. Each row's exponentials sum to 1.
    """
    cache = _forward_batch(params, [seq])
    return np.stack([lp[0] for lp in cache.logp])


def nll(params: LMParameters, seq: TokenSequence) -> float:
    """Total negative log-likelihood (natural log) of positions 1..len-1."""
    table = forward(params, seq)
    targets = np.asarray(seq.ids[1:], dtype=np.int64)
    return float(-table[np.arange(len(targets)), targets].sum())


def perplexity(params: LMParameters, seq: TokenSequence) -> float:
    """exp(mean per-token NLL) over the predicted positions."""
    n_pred = len(seq) - 1
    return float(np.exp(nll(params, seq) / n_pred))


def sequence_nlls(params: LMParameters, seqs: list[TokenSequence], chunk: int = 64) -> np.ndarray:
    """Total NLL of each sequence, evaluated in batches for speed."""
    out = np.empty(len(seqs))
    for start in range(0, len(seqs), chunk):
        nlls, _ = _batch_nll_and_flat_grads(params, seqs[start : start + chunk], want_grads=False)
        out[start : start + len(nlls)] = nlls
    return out


def sequence_perplexities(params: LMParameters, seqs: list[TokenSequence]) -> np.ndarray:
    """Per-sequence perplexities, batched."""
    nlls = sequence_nlls(params, seqs)
    n_pred = np.array([len(s) - 1 for s in seqs], dtype=np.float64)
    return np.exp(nlls / n_pred)


def corpus_perplexity(params: LMParameters, corpus: Corpus | list[TokenSequence]) -> float:
    """Corpus-level perplexity: exp(total NLL / total predicted tokens)."""
    seqs = corpus.sequences if isinstance(corpus, Corpus) else corpus
    nlls = sequence_nlls(params, seqs)
    total_pred = sum(len(s) - 1 for s in seqs)
    return float(np.exp(float(nlls.sum()) / total_pred))


def _batch_nll_and_flat_grads(
    params: LMParameters, seqs: list[TokenSequence], want_grads: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-example NLLs and, optionally, stacked flat gradients (B, num_params).

    This is the single gradient implementation in the package; the scalar
    :func:`per_example_gradient` wraps it with B=1, so the finite-difference
    tests exercise the same code the training loop runs.
    """
    cache = _forward_batch(params, seqs)
    X, Y, M = cache.X, cache.Y, cache.M
    B, T = X.shape
    V, E, H = params.vocab_size, params.d_emb, params.d_hid

    nll_terms = np.zeros((B, T))
    rows = np.arange(B)
    for t in range(T):
        nll_terms[:, t] = -cache.logp[t][rows, Y[:, t]] * M[:, t]
    nlls = nll_terms.sum(axis=1)
    if not want_grads:
        return nlls, None

    # The recurrence forces a sequential sweep over time, but the expensive
    # outer-product accumulations are deferred: per-step vectors are collected
    # into (T, B, .) arrays and contracted with batched matmuls afterwards.
    dlogits_all = np.empty((T, B, V))
    da_all = np.empty((T, B, 4 * H))
    demb_all = np.empty((T, B, E))

    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache.gates[t]
        ct = cache.ct[t]
        c_prev = cache.c_prev[t]

        dlogits = np.exp(cache.logp[t])
        dlogits[rows, Y[:, t]] -= 1.0
        dlogits *= M[:, t][:, None]
        dlogits_all[t] = dlogits

        dh = dlogits @ params.out_W.T + dh_next

        do = dh * ct
        dc = dh * o * (1.0 - ct * ct) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f

        da = da_all[t]
        da[:, :H] = di * i * (1.0 - i)
        da[:, H : 2 * H] = df * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dg * (1.0 - g * g)
        da[:, 3 * H :] = do * o * (1.0 - o)

        dz = da @ params.lstm_W
        demb_all[t] = dz[:, :E]
        dh_next = dz[:, E:]

    h_all = np.stack(cache.h)  # (T, B, H)
    z_all = np.stack(cache.z)  # (T, B, E+H)
    # d_U[b] = sum_t outer(h[t,b], dlogits[t,b]); same pattern for d_W.
    d_U = np.matmul(h_all.transpose(1, 2, 0), dlogits_all.transpose(1, 0, 2))
    d_W = np.matmul(da_all.transpose(1, 2, 0), z_all.transpose(1, 0, 2))
    d_b = da_all.sum(axis=0)
    d_ob = dlogits_all.sum(axis=0)
    d_emb_g = np.zeros((B, V, E))
    for t in range(T):
        np.add.at(d_emb_g, (rows, X[:, t]), demb_all[t])

    stacked = np.concatenate(
        [
            d_emb_g.reshape(B, -1),
            d_W.reshape(B, -1),
            d_b,
            d_U.reshape(B, -1),
            d_ob,
        ],
        axis=1,
    )
    return nlls, stacked


def batch_gradients(params: LMParameters, seqs: list[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-example NLLs (B,) and stacked flat per-example gradients (B, P)."""
    nlls, stacked = _batch_nll_and_flat_grads(params, seqs, want_grads=True)
    return nlls, stacked


def per_example_gradient(params: LMParameters, seq: TokenSequence) -> tuple[float, Gradient]:
    """Exact analytic gradient of the sequence NLL via full-length BPTT."""
    nlls, stacked = _batch_nll_and_flat_grads(params, [seq], want_grads=True)
    return float(nlls[0]), Gradient.from_flat(stacked[0], params)


def apply_update(params: LMParameters, update: Gradient, eta: float) -> LMParameters:
    """Gradient-descent step: returns params - eta * update."""
    for a, u in zip(params.arrays(), update.arrays()):
        if a.shape != u.shape:
            raise LMError(f"update shape {u.shape} does not match parameter shape {a.shape}")
    return LMParameters(*[a - eta * u for a, u in zip(params.arrays(), update.arrays())])
