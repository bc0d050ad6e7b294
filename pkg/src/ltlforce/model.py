"""Small GRU encoder-decoder with dot-product attention, in numpy.

Forward and backward passes are written by hand and operate on padded
batches. Parameters live in one flat float64 vector; named views into it
are exposed through ``ModelParams.view``.

Decoder step::

    s_t = GRU(emb[y_{t-1}], s_{t-1})          s_0 = last encoder state
    a_t = softmax(H_enc . s_t)                 padded source positions masked
    c_t = sum_j a_tj H_enc_j
    o_t = tanh([s_t, c_t] W_att + b_att)
    z_t = o_t W_out + b_out

The start-of-sequence input is the EOS embedding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ltlforce.grammar import Grammar, InvalidToken
from ltlforce.losses import TargetNotValid, rows_loss_and_grad

PAD = 0
UNK = 1

STANDARD = "standard"
GRAMMAR_FORCED = "grammar_forced"
MODES = (STANDARD, GRAMMAR_FORCED)

CHECKPOINT_MAGIC = b"LTLFORCE-CKPT"
CHECKPOINT_VERSION = 1


class LengthExceeded(ValueError):
    pass


class UnparseableTarget(ValueError):
    def __init__(self, record: int, message: str = "target does not parse or lacks EOS"):
        super().__init__(f"record {record}: {message}")
        self.record = record


class SourceVocab:
    """Lowercased source-token vocabulary; id 0 is padding, 1 is unknown."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, sentences) -> "SourceVocab":
        seen: dict[str, None] = {}
        for sent in sentences:
            for tok in sent:
                seen.setdefault(tok.lower(), None)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(t.lower(), UNK) for t in tokens]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ModelDims:
    src_vocab: int
    tgt_vocab: int
    d_emb: int = 32
    d_hidden: int = 64

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        S, V, E, H = self.src_vocab, self.tgt_vocab, self.d_emb, self.d_hidden
        return [
            ("src_emb", (S, E)),
            ("tgt_emb", (V, E)),
            ("enc_W", (E, 3 * H)),
            ("enc_U", (H, 3 * H)),
            ("enc_b", (3 * H,)),
            ("dec_W", (E, 3 * H)),
            ("dec_U", (H, 3 * H)),
            ("dec_b", (3 * H,)),
            ("att_W", (2 * H, H)),
            ("att_b", (H,)),
            ("out_W", (H, V)),
            ("out_b", (V,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    mode: str = GRAMMAR_FORCED
    d_emb: int = 32
    d_hidden: int = 64
    max_len: int = 64
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


class ModelParams:
    """Flat parameter vector with named reshaped views."""

    def __init__(self, dims: ModelDims, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (dims.n_params,):
            raise ValueError(f"expected {dims.n_params} parameters, got {flat.shape}")
        self.dims = dims
        self.flat = flat
        self._views = {}
        offset = 0
        for name, shape in dims.layout():
            size = int(np.prod(shape))
            self._views[name] = flat[offset:offset + size].reshape(shape)
            offset += size

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def replace(self, flat: np.ndarray) -> "ModelParams":
        return ModelParams(self.dims, flat)


def init_model(dims: ModelDims, seed: int) -> ModelParams:
    """Seeded uniform init scaled by fan-in (embeddings by sqrt(3/d_emb))."""
    rng = np.random.default_rng(seed)
    H, E = dims.d_hidden, dims.d_emb
    scale = {
        "src_emb": np.sqrt(3.0 / E),
        "tgt_emb": np.sqrt(3.0 / E),
        "enc_W": 1 / np.sqrt(H), "enc_U": 1 / np.sqrt(H), "enc_b": 1 / np.sqrt(H),
        "dec_W": 1 / np.sqrt(H), "dec_U": 1 / np.sqrt(H), "dec_b": 1 / np.sqrt(H),
        "att_W": 1 / np.sqrt(2 * H), "att_b": 1 / np.sqrt(2 * H),
        "out_W": 1 / np.sqrt(H), "out_b": 1 / np.sqrt(H),
    }
    chunks = [rng.uniform(-scale[name], scale[name], size=int(np.prod(shape)))
              for name, shape in dims.layout()]
    return ModelParams(dims, np.concatenate(chunks))


# --------------------------------------------------------------------------
# GRU cell


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gru_step(W, U, b, x, h):
    H = h.shape[1]
    a = x @ W + b
    hu = h @ U
    r = _sigmoid(a[:, :H] + hu[:, :H])
    u = _sigmoid(a[:, H:2 * H] + hu[:, H:2 * H])
    n = np.tanh(a[:, 2 * H:] + r * hu[:, 2 * H:])
    h_new = (1.0 - u) * n + u * h
    return h_new, (x, h, r, u, n, hu[:, 2 * H:])


def _gru_step_back(W, U, dh_new, cache, grads, prefix):
    x, h, r, u, n, hu_n = cache
    dn = dh_new * (1.0 - u)
    du = dh_new * (h - n)
    dh = dh_new * u
    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * hu_n
    du_pre = du * u * (1.0 - u)
    dr_pre = dr * r * (1.0 - r)
    da = np.concatenate([dr_pre, du_pre, dn_pre], axis=1)
    dhu = np.concatenate([dr_pre, du_pre, dn_pre * r], axis=1)
    grads[prefix + "W"] += x.T @ da
    grads[prefix + "b"] += da.sum(axis=0)
    grads[prefix + "U"] += h.T @ dhu
    dx = da @ W.T
    dh += dhu @ U.T
    return dx, dh


# --------------------------------------------------------------------------
# batching


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty sequence in batch")
    T = max(len(s) for s in seqs)
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


@dataclass
class Encoded:
    states: np.ndarray  # (B, S, H)
    mask: np.ndarray  # (B, S)
    final: np.ndarray  # (B, H)
    caches: list = field(default_factory=list)


def encode(params: ModelParams, src: np.ndarray, src_mask: np.ndarray, keep_cache: bool = False) -> Encoded:
    B, S = src.shape
    H = params.dims.d_hidden
    W, U, b = params["enc_W"], params["enc_U"], params["enc_b"]
    emb = params["src_emb"]
    h = np.zeros((B, H))
    states = np.empty((B, S, H))
    caches = []
    for t in range(S):
        h_new, cache = _gru_step(W, U, b, emb[src[:, t]], h)
        m = src_mask[:, t:t + 1]
        h = np.where(m, h_new, h)
        states[:, t] = h
        if keep_cache:
            caches.append(cache)
    return Encoded(states, src_mask, h, caches)


def _attend(enc: Encoded, s: np.ndarray):
    e = np.einsum("bsh,bh->bs", enc.states, s)
    e = np.where(enc.mask, e, -np.inf)
    e = e - e.max(axis=1, keepdims=True)
    a = np.exp(e)
    a /= a.sum(axis=1, keepdims=True)
    c = np.einsum("bs,bsh->bh", a, enc.states)
    return a, c


def decoder_step(params: ModelParams, enc: Encoded, s_prev: np.ndarray, prev_tok: np.ndarray):
    """One decoding step; returns (logits (B, V), new state, cache)."""
    x = params["tgt_emb"][prev_tok]
    s, gcache = _gru_step(params["dec_W"], params["dec_U"], params["dec_b"], x, s_prev)
    a, c = _attend(enc, s)
    sc = np.concatenate([s, c], axis=1)
    o = np.tanh(sc @ params["att_W"] + params["att_b"])
    z = o @ params["out_W"] + params["out_b"]
    return z, s, (gcache, s, a, c, sc, o)


def start_tokens(params: ModelParams, batch: int) -> np.ndarray:
    return np.full(batch, params.dims.tgt_vocab - 1, dtype=np.int64)  # EOS id is last


def forward(params: ModelParams, src: Sequence[int], tgt_prefix: Sequence[int], max_len: int = 64) -> list[np.ndarray]:
    """Teacher-forced logits, one row per target position.

    Row ``t`` predicts ``tgt_prefix[t]`` from the source and ``tgt_prefix[:t]``.
    """
    if len(src) == 0:
        raise ValueError("source must be nonempty")
    if len(tgt_prefix) > max_len:
        raise LengthExceeded(f"target length {len(tgt_prefix)} exceeds max_len {max_len}")
    if len(tgt_prefix) == 0:
        return []
    srcs, smask = pad_batch([src])
    z, _ = _teacher_forced(params, srcs, smask, np.asarray([tgt_prefix]), keep_cache=False)
    return [row.copy() for row in z[0]]


def _teacher_forced(params, src, src_mask, tgt, keep_cache: bool):
    B, T = tgt.shape
    enc = encode(params, src, src_mask, keep_cache=keep_cache)
    prev = start_tokens(params, B)
    s = enc.final
    zs = np.empty((B, T, params.dims.tgt_vocab))
    caches = []
    for t in range(T):
        z, s, cache = decoder_step(params, enc, s, prev)
        zs[:, t] = z
        if keep_cache:
            caches.append((prev, cache))
        prev = tgt[:, t]
    return zs, (enc, caches)


# --------------------------------------------------------------------------
# loss and gradient


@dataclass
class PreparedBatch:
    src: np.ndarray
    src_mask: np.ndarray
    tgt: np.ndarray
    tgt_mask: np.ndarray
    valid: np.ndarray | None  # (B, T, V) grammar masks in forced mode


def target_valid_masks(tgt: Sequence[int], grammar: Grammar, record: int | None = None) -> np.ndarray:
    """Per-position valid sets, threading the grammar over the target tokens."""
    try:
        masks = grammar.target_masks(tgt)
    except InvalidToken as err:
        raise TargetNotValid(err.token, position=err.state.consumed, record=record) from None
    if not grammar.accepts(tgt):
        raise UnparseableTarget(record if record is not None else -1)
    return masks


def prepare_batch(batch, mode: str, grammar: Grammar, mask_cache: dict | None = None,
                  records: Sequence[int] | None = None) -> PreparedBatch:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    srcs = [s for s, _ in batch]
    tgts = [list(t) for _, t in batch]
    src, src_mask = pad_batch(srcs)
    tgt, tgt_mask = pad_batch(tgts, pad=grammar.vocab.EOS)
    valid = None
    per_example = []
    for i, t in enumerate(tgts):
        rec = records[i] if records is not None else i
        key = tuple(t)
        if mask_cache is not None and key in mask_cache:
            m = mask_cache[key]
        else:
            m = target_valid_masks(t, grammar, record=rec)
            if mask_cache is not None:
                mask_cache[key] = m
        per_example.append(m)
    if mode == GRAMMAR_FORCED:
        valid = np.zeros(tgt.shape + (grammar.vocab.size,), dtype=bool)
        for i, m in enumerate(per_example):
            valid[i, :len(m)] = m
    return PreparedBatch(src, src_mask, tgt, tgt_mask, valid)


def loss_and_grad(params: ModelParams, pb: PreparedBatch) -> tuple[np.ndarray, float]:
    """Exact gradient of the mean per-token loss over the batch."""
    dims = params.dims
    H = dims.d_hidden
    B, T = pb.tgt.shape
    zs, (enc, dcaches) = _teacher_forced(params, pb.src, pb.src_mask, pb.tgt, keep_cache=True)

    sel = pb.tgt_mask.ravel()
    z_rows = zs.reshape(B * T, -1)[sel]
    y_rows = pb.tgt.ravel()[sel]
    valid_rows = None if pb.valid is None else pb.valid.reshape(B * T, -1)[sel]
    losses, g_rows = rows_loss_and_grad(z_rows, y_rows, valid_rows)
    n_tok = len(y_rows)
    loss = float(losses.sum() / n_tok)
    dz_all = np.zeros((B * T, dims.tgt_vocab))
    dz_all[sel] = g_rows / n_tok
    dz_all = dz_all.reshape(B, T, -1)

    grads = {name: np.zeros(shape) for name, shape in dims.layout()}
    P = params
    dstates = np.zeros_like(enc.states)
    ds_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        prev, (gcache, s, a, c, sc, o) = dcaches[t]
        dz = dz_all[:, t]
        grads["out_W"] += o.T @ dz
        grads["out_b"] += dz.sum(axis=0)
        do = (dz @ P["out_W"].T) * (1.0 - o * o)
        grads["att_W"] += sc.T @ do
        grads["att_b"] += do.sum(axis=0)
        dsc = do @ P["att_W"].T
        ds = dsc[:, :H] + ds_next
        dc = dsc[:, H:]
        # c = sum_j a_j h_j ; a = softmax(h_j . s)
        dstates += a[:, :, None] * dc[:, None, :]
        da = np.einsum("bsh,bh->bs", enc.states, dc)
        de = a * (da - (a * da).sum(axis=1, keepdims=True))
        ds += np.einsum("bs,bsh->bh", de, enc.states)
        dstates += de[:, :, None] * s[:, None, :]
        dx, ds_next = _gru_step_back(P["dec_W"], P["dec_U"], ds, gcache, grads, "dec_")
        np.add.at(grads["tgt_emb"], prev, dx)

    dh = ds_next  # decoder init state is the final encoder state
    S = pb.src.shape[1]
    for t in range(S - 1, -1, -1):
        dh = dh + dstates[:, t]
        m = pb.src_mask[:, t:t + 1]
        dh_new = np.where(m, dh, 0.0)
        dx, dh_prev = _gru_step_back(P["enc_W"], P["enc_U"], dh_new, enc.caches[t], grads, "enc_")
        np.add.at(grads["src_emb"], pb.src[:, t], dx)
        dh = dh_prev + np.where(m, 0.0, dh)

    flat = np.concatenate([grads[name].ravel() for name, _ in dims.layout()])
    return flat, loss


def batch_loss(params: ModelParams, pb: PreparedBatch) -> float:
    B, T = pb.tgt.shape
    zs, _ = _teacher_forced(params, pb.src, pb.src_mask, pb.tgt, keep_cache=False)
    sel = pb.tgt_mask.ravel()
    valid_rows = None if pb.valid is None else pb.valid.reshape(B * T, -1)[sel]
    losses, _ = rows_loss_and_grad(zs.reshape(B * T, -1)[sel], pb.tgt.ravel()[sel], valid_rows)
    return float(losses.mean())


def backward(params: ModelParams, batch, mode: str, grammar: Grammar) -> tuple[np.ndarray, float]:
    """Gradient and loss for a list of (src_ids, tgt_ids) pairs.

    Targets must be EOS-terminated token ids that the grammar accepts.
    """
    return loss_and_grad(params, prepare_batch(batch, mode, grammar))


# --------------------------------------------------------------------------
# training


def train(corpus, cfg: TrainConfig, grammar: Grammar, src_vocab_size: int,
          params: ModelParams | None = None, callback=None) -> tuple[ModelParams, list[float]]:
    """Plain SGD over shuffled minibatches; returns params and per-step losses."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    dims = ModelDims(src_vocab_size, grammar.vocab.size, cfg.d_emb, cfg.d_hidden)
    if params is None:
        params = init_model(dims, cfg.seed)
    for i, (_, tgt) in enumerate(corpus):
        if len(tgt) > cfg.max_len:
            raise LengthExceeded(f"record {i}: target length {len(tgt)} exceeds max_len {cfg.max_len}")
    mask_cache: dict = {}
    # validate every record up front so contract violations surface before training
    for i, (_, tgt) in enumerate(corpus):
        mask_cache[tuple(tgt)] = target_valid_masks(list(tgt), grammar, record=i)
    rng = np.random.default_rng(cfg.seed)
    curve: list[float] = []
    flat = params.flat.copy()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pb = prepare_batch([corpus[i] for i in idx], cfg.mode, grammar, mask_cache, records=idx)
            grad, loss = loss_and_grad(params, pb)
            if cfg.clip_norm is not None:
                norm = float(np.sqrt(grad @ grad))
                if norm > cfg.clip_norm:
                    grad *= cfg.clip_norm / norm
            flat = flat - cfg.learning_rate * grad
            params = params.replace(flat)
            curve.append(loss)
            if callback is not None:
                callback(epoch, len(curve) - 1, loss)
    return params, curve


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: magic line, one JSON header line, then n_params float64 values in
# little-endian byte order. The header carries format version, dims, seed,
# training mode, max_props, source vocabulary and its digest.


def save_checkpoint(path, params: ModelParams, src_vocab: SourceVocab, max_props: int,
                    seed: int = 0, mode: str = STANDARD, extra: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "dims": asdict(params.dims),
        "n_params": params.dims.n_params,
        "dtype": "<f8",
        "seed": seed,
        "mode": mode,
        "max_props": max_props,
        "src_vocab": src_vocab.tokens[2:],
        "vocab_hash": src_vocab.digest(),
    }
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, SourceVocab, dict]:
    data = Path(path).read_bytes()
    magic, rest = data.split(b"\n", 1)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    head, payload = rest.split(b"\n", 1)
    header = json.loads(head)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    dims = ModelDims(**header["dims"])
    vocab = SourceVocab(header["src_vocab"])
    if vocab.digest() != header["vocab_hash"]:
        raise ValueError(f"{path}: source vocabulary hash mismatch")
    n = header["n_params"]
    if len(payload) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(dims, flat), vocab, header

