"""MultVAE with an optional adversarial head behind a gradient reversal layer."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, GrlConfig, Node
from .rng import stream

UNKNOWN = -1


@dataclass
class ModelConfig:
    n_items: int
    enc_hidden: tuple[int, ...] = (600,)
    latent: int = 200
    dec_hidden: Optional[tuple[int, ...]] = None
    adv_hidden: tuple[int, ...] = (100,)
    beta: float = 0.2
    lam: float = 1.0
    input_dropout: float = 0.5
    hidden_dropout: float = 0.0
    n_classes: int = 2
    adversary: bool = False

    def __post_init__(self):
        self.enc_hidden = tuple(int(h) for h in self.enc_hidden)
        self.adv_hidden = tuple(int(h) for h in self.adv_hidden)
        if self.dec_hidden is not None:
            self.dec_hidden = tuple(int(h) for h in self.dec_hidden)
        sizes = (self.n_items, self.latent, self.n_classes, *self.enc_hidden,
                 *self.decoder_hidden, *self.adv_hidden)
        if min(sizes) < 1:
            raise ValueError(f"all layer sizes must be >= 1: {sizes}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")
        for p in (self.input_dropout, self.hidden_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout must lie in [0, 1), got {p}")

    @property
    def decoder_hidden(self) -> tuple[int, ...]:
        return tuple(reversed(self.enc_hidden)) if self.dec_hidden is None else self.dec_hidden

    def layer_dims(self) -> dict[str, list[int]]:
        dims = {
            "enc": [self.n_items, *self.enc_hidden, 2 * self.latent],
            "dec": [self.latent, *self.decoder_hidden, self.n_items],
        }
        if self.adversary:
            dims["adv"] = [self.latent, *self.adv_hidden, self.n_classes]
        return dims

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


Params = dict  # name -> np.ndarray (or Node while a graph is being built)


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Glorot-uniform weights, zero biases.

    Each layer draws from its own keyed stream, so the encoder and decoder
    initialise identically whether or not an adversarial head is present.
    """
    params = {}
    for part, dims in cfg.layer_dims().items():
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            rng = stream(seed, f"init/{part}", i)
            params[f"{part}.{i}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{part}.{i}.b"] = np.zeros((1, fan_out))
    return params


def as_leaves(params: Mapping[str, np.ndarray]) -> dict[str, Node]:
    return {k: ad.leaf(v) for k, v in params.items()}


def _mlp(params, part: str, h, n_layers: int, act, dropout_p=0.0, training=False, rng=None):
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, params[f"{part}.{i}.W"]), params[f"{part}.{i}.b"])
        if i < n_layers - 1:
            h = act(h)
            if dropout_p:
                h = ad.dropout(h, dropout_p, training, rng)
    return h


class ForwardOutput(NamedTuple):
    mu: Node
    log_var: Node
    z: Node
    logits: Node
    adv_logits: Optional[Node]


def encode(params, x, cfg: ModelConfig, training=False, rng: Optional[np.random.Generator] = None,
           eps: Optional[np.ndarray] = None):
    """Map interaction rows to ``(mu, log_var, z)``; ``z is mu`` at inference."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.n_items:
        raise DimensionError(f"expected input of width {cfg.n_items}, got {x.shape}")
    h = ad.l2_normalize_rows(ad.constant(x))
    h = ad.dropout(h, cfg.input_dropout, training, rng)
    n_layers = len(cfg.enc_hidden) + 1
    out = _mlp(params, "enc", h, n_layers, ad.tanh, cfg.hidden_dropout, training, rng)
    mu = ad.columns(out, 0, cfg.latent)
    log_var = ad.columns(out, cfg.latent, 2 * cfg.latent)
    if training:
        z = ad.gaussian_sample(mu, log_var, rng, eps=eps)
    else:
        z = mu
    return mu, log_var, z


def decode(params, z, cfg: ModelConfig, training=False, rng=None) -> Node:
    z = z if isinstance(z, Node) else ad.constant(np.atleast_2d(z))
    if z.shape[-1] != cfg.latent:
        raise DimensionError(f"expected latent width {cfg.latent}, got {z.shape}")
    n_layers = len(cfg.decoder_hidden) + 1
    return _mlp(params, "dec", z, n_layers, ad.tanh, cfg.hidden_dropout, training, rng)


def adversary(params, z, cfg: ModelConfig) -> Node:
    return _mlp(params, "adv", z, len(cfg.adv_hidden) + 1, ad.relu)


def forward(params, x, cfg: ModelConfig, training=False, rng=None, eps=None) -> ForwardOutput:
    mu, log_var, z = encode(params, x, cfg, training, rng, eps)
    logits = decode(params, z, cfg, training, rng)
    adv_logits = None
    if cfg.adversary:
        adv_logits = adversary(params, ad.grl(z, GrlConfig(cfg.lam)), cfg)
    return ForwardOutput(mu, log_var, z, logits, adv_logits)


# ---------------------------------------------------------------------------
# losses


def loss_multinomial(logits, x) -> Node:
    """Negative multinomial log-likelihood, averaged over the batch."""
    x = np.asarray(x, dtype=np.float64)
    logits = logits if isinstance(logits, Node) else ad.constant(logits)
    if logits.shape != x.shape:
        raise DimensionError(f"logits {logits.shape} vs x {x.shape}")
    ll = ad.sum_all(ad.mul(ad.log_softmax_rows(logits), x))
    return ad.scale(ll, -1.0 / x.shape[0])


def loss_kl(mu, log_var) -> Node:
    """KL(N(mu, exp(log_var)) || N(0, I)), averaged over the batch."""
    mu = mu if isinstance(mu, Node) else ad.constant(np.atleast_2d(mu))
    log_var = log_var if isinstance(log_var, Node) else ad.constant(np.atleast_2d(log_var))
    if mu.shape != log_var.shape:
        raise DimensionError(f"mu {mu.shape} vs log_var {log_var.shape}")
    inner = ad.sub(ad.add(log_var, 1.0), ad.add(ad.mul(mu, mu), ad.exp(log_var)))
    return ad.scale(ad.sum_all(inner), -0.5 / mu.shape[0])


def _one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    bad = (y != UNKNOWN) & ((y < 0) | (y >= n_classes))
    if np.any(bad):
        raise ContractError(f"labels out of range [0, {n_classes}): {np.unique(y[bad])}")
    oh = np.zeros((y.shape[0], n_classes))
    known = y != UNKNOWN
    oh[np.flatnonzero(known), y[known]] = 1.0
    return oh


def loss_adversarial(adv_logits, y) -> Node:
    """Mean softmax cross-entropy; rows labelled ``UNKNOWN`` are skipped."""
    adv_logits = adv_logits if isinstance(adv_logits, Node) else ad.constant(adv_logits)
    oh = _one_hot(y, adv_logits.shape[1])
    n_known = oh.sum()
    if n_known == 0:
        return ad.scale(ad.sum_all(ad.mul(adv_logits, 0.0)), 0.0)
    ll = ad.sum_all(ad.mul(ad.log_softmax_rows(adv_logits), oh))
    return ad.scale(ll, -1.0 / n_known)


class LossTerms(NamedTuple):
    total: Node
    mult: float
    kl: float
    adv: float
    out: ForwardOutput


def total_loss(params, x, y, cfg: ModelConfig, training=True, rng=None, eps=None,
               beta: Optional[float] = None) -> LossTerms:
    """``NLL_mult + beta * KL (+ CE(h(grl(z)), y))`` with the per-term breakdown.

    ``beta`` overrides ``cfg.beta`` (used for warm-up).
    """
    beta = cfg.beta if beta is None else beta
    out = forward(params, x, cfg, training, rng, eps)
    mult = loss_multinomial(out.logits, x)
    kl = loss_kl(out.mu, out.log_var)
    total = ad.add(mult, ad.scale(kl, beta)) if beta else mult
    adv_value = 0.0
    if out.adv_logits is not None:
        adv = loss_adversarial(out.adv_logits, y)
        total = ad.add(total, adv)
        adv_value = float(adv.value)
    return LossTerms(total, float(mult.value), float(kl.value), adv_value, out)


# ---------------------------------------------------------------------------
# ranking


def top_k(scores: np.ndarray, k: int, exclude=None) -> list[np.ndarray]:
    """Highest-scoring ``k`` ids per row; ties go to the lower id.

    ``exclude`` is a boolean (or 0/1, dense or sparse) mask of ids to skip.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    scores = np.array(np.atleast_2d(scores), dtype=np.float64)
    if exclude is not None:
        if hasattr(exclude, "toarray"):
            exclude = exclude.toarray()
        exclude = np.atleast_2d(np.asarray(exclude)).astype(bool)
    else:
        exclude = np.zeros(scores.shape, dtype=bool)
    order = np.argsort(-scores, axis=1, kind="stable")
    result = []
    for row, ex in zip(order, exclude):
        kept = row[~ex[row]]
        result.append(kept[:k])
    return result


def predict_scores(params, x, cfg: ModelConfig) -> np.ndarray:
    return forward(params, x, cfg, training=False).logits.value


def recommend(params, x, cfg: ModelConfig, k: int, exclude=None) -> list[np.ndarray]:
    x = x.toarray() if hasattr(x, "toarray") else np.asarray(x, dtype=np.float64)
    return top_k(predict_scores(params, x, cfg), k, x if exclude is None else exclude)


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"AMVAECKP"
VERSION = 1


def _config_text(cfg: ModelConfig) -> bytes:
    lines = [f"{k}={json.dumps(v)}" for k, v in sorted(cfg.to_dict().items())]
    return "\n".join(lines).encode("utf-8")


def _parse_config_text(text: bytes) -> ModelConfig:
    d = {}
    for line in text.decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        d[k] = json.loads(v)
    return ModelConfig.from_dict(d)


def checkpoint_bytes(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> bytes:
    cfg_text = _config_text(cfg)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg_text)), cfg_text,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: Mapping[str, np.ndarray], cfg: ModelConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, cfg))
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def parse_checkpoint(buf: bytes) -> tuple[Params, ModelConfig]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    off = 8
    version, n_cfg = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = _parse_config_text(buf[off:off + n_cfg])
    off += n_cfg
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    expected = init_shapes(cfg)
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise CheckpointError("checkpoint tensors do not match its model config")
    return params, cfg


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    return parse_checkpoint(Path(path).read_bytes())


def init_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for part, dims in cfg.layer_dims().items():
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            shapes[f"{part}.{i}.W"] = (a, b)
            shapes[f"{part}.{i}.b"] = (1, b)
    return shapes
