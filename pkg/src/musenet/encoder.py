"""Dual-stream time-aware self-attention encoder with branching heads.

Imputed values and their missingness masks run through two independent
encoder stacks.  Each block applies interpretable multi-head attention
(heads share one value projection and their softmax score matrices are
summed into a single exportable map), a post-sublayer layer norm with a
residual skip, and a GELU feed-forward with its own norm and skip.  The
two streams are mean-pooled over valid time steps, concatenated, and fed
to independent per-branch logistic units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concatenate, gelu, layer_norm, parameter

KEY_MASK_BIAS = -1e30


class ShapeMismatch(ValueError):
    pass


class HeadsDontDivideWidth(ValueError):
    pass


class NonFinite(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_variables: int
    n_heads: int = 2
    n_blocks: int = 2
    feed_forward_width: int = 24
    n_branches: int = 10
    dropout: float = 0.0
    seed: int = 0
    rezero_times: bool = False    # measure time from each record's first stamp

    def __post_init__(self):
        if self.n_heads < 1 or self.n_blocks < 1 or self.n_branches < 1:
            raise ShapeMismatch("heads, blocks, and branches must be >= 1")
        if self.n_variables % self.n_heads != 0:
            raise HeadsDontDivideWidth(
                f"{self.n_heads} heads do not divide width {self.n_variables}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeMismatch("dropout must lie in [0, 1)")

    @property
    def head_width(self) -> int:
        return self.n_variables // self.n_heads

    def to_json_dict(self) -> dict:
        return {"n_variables": self.n_variables, "n_heads": self.n_heads,
                "n_blocks": self.n_blocks,
                "feed_forward_width": self.feed_forward_width,
                "n_branches": self.n_branches, "dropout": self.dropout,
                "seed": self.seed, "rezero_times": self.rezero_times}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "EncoderConfig":
        return cls(**doc)


@dataclass
class AttentionMap:
    """Aggregated head scores for one block of one stream.

    Rows of ``scores`` sum to the head count (each head's softmax row sums
    to one) over the valid key positions.
    """

    layer: int
    stream: str
    scores: np.ndarray      # (T, T) or (batch, T, T), nonnegative


class EncoderParameters:
    """Flat, ordered name-to-tensor parameter store for one model."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        m = config.n_variables
        for stream in ("values", "masks"):
            for block in range(config.n_blocks):
                prefix = f"{stream}.block{block}"
                for head in range(config.n_heads):
                    self._add(rng, f"{prefix}.head{head}.wq", (m, config.head_width))
                    self._add(rng, f"{prefix}.head{head}.wk", (m, config.head_width))
                self._add(rng, f"{prefix}.wv", (m, m))
                self._add(rng, f"{prefix}.wo", (m, m))
                self._add_const(f"{prefix}.ln1.gain", np.ones(m))
                self._add_const(f"{prefix}.ln1.bias", np.zeros(m))
                self._add(rng, f"{prefix}.ff.w1", (m, config.feed_forward_width))
                self._add_const(f"{prefix}.ff.b1",
                                np.zeros(config.feed_forward_width))
                self._add(rng, f"{prefix}.ff.w2", (config.feed_forward_width, m))
                self._add_const(f"{prefix}.ff.b2", np.zeros(m))
                self._add_const(f"{prefix}.ln2.gain", np.ones(m))
                self._add_const(f"{prefix}.ln2.bias", np.zeros(m))
        for branch in range(config.n_branches):
            self._add(rng, f"head.branch{branch}.weight", (2 * m, 1))
            self._add_const(f"head.branch{branch}.bias", np.zeros(1))

    def _add(self, rng, name, shape):
        # Uniform Xavier/Glorot range keeps pre-activations order one.
        bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        self.tensors[name] = parameter(rng.uniform(-bound, bound, shape))

    def _add_const(self, name, values):
        self.tensors[name] = parameter(values)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def copy(self) -> "EncoderParameters":
        clone = EncoderParameters.__new__(EncoderParameters)
        clone.config = self.config
        clone.tensors = {name: parameter(t.data.copy())
                         for name, t in self.tensors.items()}
        return clone


def positional_encoding(times, n_variables: int) -> np.ndarray:
    """Sinusoidal encoding evaluated at irregular timestamps.

    Column 2m holds sin(t / 10000^(2m/M)) and column 2m+1 the matching
    cosine; an odd width truncates the final cosine column.  Accepts a
    single (T,) vector or a (batch, T) stack.
    """
    times = np.asarray(times, dtype=float)
    single = times.ndim == 1
    if single:
        times = times[None, :]
    cols = np.arange(n_variables)
    divisors = np.power(10000.0, 2.0 * (cols // 2) / n_variables)
    phase = times[:, :, None] / divisors
    encoding = np.where(cols % 2 == 0, np.sin(phase), np.cos(phase))
    return encoding[0] if single else encoding


def scaled_dot_attention(query, key, value):
    """softmax(Q K' / sqrt(d)) V; returns the output and the weight rows."""
    query, key, value = as_tensor(query), as_tensor(key), as_tensor(value)
    if query.shape[-1] != key.shape[-1] or key.shape[-2] != value.shape[-2]:
        raise ShapeMismatch("query/key/value dimensions do not agree")
    scale = 1.0 / np.sqrt(query.shape[-1])
    weights = ((query @ key.swapaxes(-1, -2)) * scale).softmax(axis=-1)
    if not np.all(np.isfinite(weights.data)):
        raise NonFinite("attention weights are not finite")
    return weights @ value, weights


def interpretable_mha(x, params: EncoderParameters, block: int, stream: str,
                      key_mask=None):
    """Summed-head attention with a shared value projection.

    S = sum_l softmax(Q_l K_l' / sqrt(M/h)); output = S V W_O.  ``key_mask``
    (0/1 over time steps) removes padded keys from every softmax row.
    """
    x = as_tensor(x)
    config = params.config
    prefix = f"{stream}.block{block}"
    value = x @ params[f"{prefix}.wv"]
    scale = 1.0 / np.sqrt(config.head_width)
    bias = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=float)
        bias = KEY_MASK_BIAS * (1.0 - key_mask)[..., None, :]
    scores = None
    for head in range(config.n_heads):
        q = x @ params[f"{prefix}.head{head}.wq"]
        k = x @ params[f"{prefix}.head{head}.wk"]
        logits = (q @ k.swapaxes(-1, -2)) * scale
        if bias is not None:
            logits = logits + bias
        head_scores = logits.softmax(axis=-1)
        scores = head_scores if scores is None else scores + head_scores
    output = (scores @ value) @ params[f"{prefix}.wo"]
    return output, scores


def add_norm(residual, sublayer_out, gain, bias, eps: float = 1e-5):
    """LayerNorm(sublayer) + residual, in that order."""
    residual = as_tensor(residual)
    sublayer_out = as_tensor(sublayer_out)
    if residual.shape != sublayer_out.shape:
        raise ShapeMismatch("residual and sublayer shapes differ")
    return layer_norm(sublayer_out, gain, bias, eps) + residual


def feed_forward(x, w1, b1, w2, b2):
    """Two-layer GELU network; the caller wraps it in its own Add&Norm."""
    hidden = gelu(as_tensor(x) @ w1 + b1)
    return hidden @ w2 + b2


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(float) / (1.0 - rate)
    return x * keep


def _encode_stream(inputs: Tensor, params: EncoderParameters, stream: str,
                   key_mask, dropout_rng) -> tuple[Tensor, list[AttentionMap]]:
    config = params.config
    x = inputs
    maps = []
    for block in range(config.n_blocks):
        prefix = f"{stream}.block{block}"
        attended, scores = interpretable_mha(x, params, block, stream, key_mask)
        attended = _dropout(attended, config.dropout, dropout_rng)
        x = add_norm(x, attended, params[f"{prefix}.ln1.gain"],
                     params[f"{prefix}.ln1.bias"])
        ff_out = feed_forward(x, params[f"{prefix}.ff.w1"],
                              params[f"{prefix}.ff.b1"],
                              params[f"{prefix}.ff.w2"],
                              params[f"{prefix}.ff.b2"])
        ff_out = _dropout(ff_out, config.dropout, dropout_rng)
        x = add_norm(x, ff_out, params[f"{prefix}.ln2.gain"],
                     params[f"{prefix}.ln2.bias"])
        maps.append(AttentionMap(layer=block, stream=stream,
                                 scores=scores.data.copy()))
    return x, maps


def _masked_mean_pool(x: Tensor, valid: np.ndarray) -> Tensor:
    counts = np.maximum(valid.sum(axis=-1, keepdims=True), 1.0)
    weights = (valid / counts)[..., None]
    return (x * weights).sum(axis=-2)


def forward_batch(values, masks, times, params: EncoderParameters,
                  valid=None, dropout_rng=None):
    """Run a (batch, T, M) slab through both streams and all branch heads.

    ``valid`` is a 0/1 (batch, T) matrix for padded batches: padded keys
    are excluded from attention and padded steps from pooling.  Returns
    per-branch probabilities (batch, n_branches) and the attention maps.
    """
    config = params.config
    values = np.asarray(values, dtype=float)
    masks = np.asarray(masks, dtype=float)
    times = np.asarray(times, dtype=float)
    if values.shape != masks.shape or values.shape[:2] != times.shape:
        raise ShapeMismatch("values, masks, and times shapes do not agree")
    if values.shape[-1] != config.n_variables:
        raise ShapeMismatch("variable count does not match configuration")
    if valid is None:
        valid = np.ones(times.shape)
    valid = np.asarray(valid, dtype=float)

    if config.rezero_times:
        times = times - times[..., :1]
    encoding = positional_encoding(times, config.n_variables)

    pooled = []
    all_maps: list[AttentionMap] = []
    for stream, data in (("values", values), ("masks", masks)):
        x = as_tensor(encoding + data)
        encoded, maps = _encode_stream(x, params, stream, valid, dropout_rng)
        pooled.append(_masked_mean_pool(encoded, valid))
        all_maps.extend(maps)
    features = concatenate(pooled, axis=-1)

    branch_probs = []
    for branch in range(config.n_branches):
        logits = features @ params[f"head.branch{branch}.weight"] \
            + params[f"head.branch{branch}.bias"]
        branch_probs.append(logits.sigmoid())
    probabilities = concatenate(branch_probs, axis=-1)
    return probabilities, all_maps


def forward(values, masks, times, params: EncoderParameters,
            dropout_rng=None):
    """Single-record forward: (T, M) inputs -> n_branches probabilities."""
    values = np.asarray(values, dtype=float)
    probs, maps = forward_batch(values[None], np.asarray(masks)[None],
                                np.asarray(times)[None], params,
                                dropout_rng=dropout_rng)
    single_maps = [AttentionMap(layer=m.layer, stream=m.stream,
                                scores=m.scores[0]) for m in maps]
    return probs.reshape(params.config.n_branches), single_maps
