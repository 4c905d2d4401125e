"""All-MLP acoustic model: embeddings, Mixer blocks and output projection.

Each Mixer block runs a Channel Mixer (per-frame feedforward over the
``d_model`` channels) followed by a Token Mixer (feedforward over the
``seq_len`` frames of the transposed operand), both with pre-layernorm and a
residual connection.  The ablated variant drops the Token Mixers, so every
output frame depends on its own input frame only.

Activations are ``(batch, seq_len, channels)`` arrays.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CapabilityError, ConfigError, DimensionError, FormatError, VocabError
from .numerics import (
    REAL,
    LayerNormCache,
    Param,
    affine,
    affine_backward,
    counter_rng,
    dropout_mask,
    gelu_backward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
    load_tensors,
    save_tensors,
)
from .score import DEFAULT_VOCAB

# dropout sites inside a block
_CH_HIDDEN, _CH_OUT, _TOK_HIDDEN, _TOK_OUT = range(4)


@dataclass
class ModelConfig:
    n_blocks: int = 16
    seq_len: int = 200
    d_phoneme: int = 256
    d_pitch: int = 32
    d_mel: int = 120
    hidden_channel: int = 768
    hidden_token: int = 200
    dropout: float = 0.5
    phoneme_vocab: int = DEFAULT_VOCAB.phoneme_size
    pitch_vocab: int = DEFAULT_VOCAB.pitch_size
    ablate_token_mixer: bool = False

    def __post_init__(self):
        for f in ("seq_len", "d_phoneme", "d_pitch", "d_mel", "hidden_channel", "phoneme_vocab", "pitch_vocab"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be non-negative")
        if not self.ablate_token_mixer and self.hidden_token < 1:
            raise ConfigError("hidden_token must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def d_model(self) -> int:
        return self.d_phoneme + self.d_pitch

    @classmethod
    def ablation(cls, **overrides) -> "ModelConfig":
        """Channel-Mixer-only variant sized to roughly match the default parameter count."""
        kw = dict(n_blocks=24, hidden_channel=576, ablate_token_mixer=True)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, int]]":
    D, L = cfg.d_model, cfg.seq_len
    shapes: OrderedDict[str, tuple[int, int]] = OrderedDict()
    shapes["embed.phoneme"] = (cfg.phoneme_vocab, cfg.d_phoneme)
    shapes["embed.pitch"] = (cfg.pitch_vocab, cfg.d_pitch)
    shapes["in_proj.w"] = (D, D)
    shapes["in_proj.b"] = (1, D)
    for i in range(cfg.n_blocks):
        p = f"block.{i}."
        shapes[p + "ln1.gamma"] = (1, D)
        shapes[p + "ln1.beta"] = (1, D)
        shapes[p + "channel.w1"] = (D, cfg.hidden_channel)
        shapes[p + "channel.b1"] = (1, cfg.hidden_channel)
        shapes[p + "channel.w2"] = (cfg.hidden_channel, D)
        shapes[p + "channel.b2"] = (1, D)
        if not cfg.ablate_token_mixer:
            shapes[p + "ln2.gamma"] = (1, D)
            shapes[p + "ln2.beta"] = (1, D)
            shapes[p + "token.w1"] = (L, cfg.hidden_token)
            shapes[p + "token.b1"] = (1, cfg.hidden_token)
            shapes[p + "token.w2"] = (cfg.hidden_token, L)
            shapes[p + "token.b2"] = (1, L)
    shapes["out_proj.w"] = (D, cfg.d_mel)
    shapes["out_proj.b"] = (1, cfg.d_mel)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of learnable scalars."""
    D, L = cfg.d_model, cfg.seq_len
    embeddings = cfg.phoneme_vocab * cfg.d_phoneme + cfg.pitch_vocab * cfg.d_pitch
    projections = (D * D + D) + (D * cfg.d_mel + cfg.d_mel)
    channel = 2 * D + 2 * D * cfg.hidden_channel + cfg.hidden_channel + D
    token = 0 if cfg.ablate_token_mixer else 2 * D + 2 * L * cfg.hidden_token + cfg.hidden_token + L
    return embeddings + projections + cfg.n_blocks * (channel + token)


class ModelParams:
    """Named model tensors; ``params["block.0.channel.w1"]`` is the value array."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Param]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].value

    def param(self, name: str) -> Param:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Param]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def size(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.value) for n, p in self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config, OrderedDict((n, Param(p.value.copy(), n)) for n, p in self.tensors.items())
        )

    @classmethod
    def from_values(cls, config: ModelConfig, values: dict[str, np.ndarray]) -> "ModelParams":
        expected = param_shapes(config)
        missing = [n for n in expected if n not in values]
        if missing:
            raise FormatError(f"checkpoint is missing tensors: {missing[:5]}")
        tensors = OrderedDict()
        for name, shape in expected.items():
            v = np.asarray(values[name], dtype=REAL)
            if v.shape != shape:
                raise FormatError(f"{name}: shape {v.shape}, expected {shape}")
            tensors[name] = Param(v.copy(), name)
        return cls(config, tensors)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fan-in uniform affine weights, N(0, 0.02^2) embeddings, zero biases, unit gammas."""
    tensors = OrderedDict()
    for i, (name, shape) in enumerate(param_shapes(cfg).items()):
        rng = counter_rng(seed, 0xC0FFEE, i)
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("embed."):
            v = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            v = np.ones(shape)
        elif leaf in ("beta", "b", "b1", "b2"):
            v = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            v = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Param(v.astype(REAL), name)
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# forward


@dataclass
class _FFCache:
    ln: LayerNormCache
    inp: np.ndarray  # operand of the first affine map (possibly a transposed view)
    pre: np.ndarray  # pre-activation
    cdf: np.ndarray  # normal CDF of `pre`, reused by the GELU backward
    act: np.ndarray  # post-activation, post-dropout
    m_hidden: np.ndarray | None
    m_out: np.ndarray | None


@dataclass
class ForwardCache:
    pitch_ids: np.ndarray
    phoneme_ids: np.ndarray
    embedded: np.ndarray
    blocks: list[tuple[_FFCache, _FFCache | None]] = field(default_factory=list)
    final: np.ndarray | None = None


def _check_ids(ids: np.ndarray, size: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise VocabError(f"{what} id out of range [0, {size})")


def _as_batch(pitch_ids, phoneme_ids, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray, bool]:
    pitch = np.asarray(pitch_ids)
    phon = np.asarray(phoneme_ids)
    single = pitch.ndim == 1
    if single:
        pitch, phon = pitch[None], phon[None]
    if pitch.shape != phon.shape or pitch.ndim != 2:
        raise DimensionError(f"id arrays must match: {pitch.shape} vs {phon.shape}")
    if pitch.shape[1] != cfg.seq_len:
        raise DimensionError(f"segment length {pitch.shape[1]} != seq_len {cfg.seq_len}")
    _check_ids(pitch, cfg.pitch_vocab, "pitch")
    _check_ids(phon, cfg.phoneme_vocab, "phoneme")
    return pitch, phon, single


def embed_inputs(pitch_ids, phoneme_ids, params: ModelParams) -> np.ndarray:
    """Concatenate phoneme and pitch embeddings and apply the input projection."""
    cfg = params.config
    pitch, phon, single = _as_batch(pitch_ids, phoneme_ids, cfg)
    e = np.concatenate([params["embed.phoneme"][phon], params["embed.pitch"][pitch]], axis=-1)
    out = affine(e, params["in_proj.w"], params["in_proj.b"])
    return out[0] if single else out


def _feedforward(x, w1, b1, w2, b2, m_hidden, m_out):
    pre = affine(x, w1, b1)
    act, cdf = gelu_forward(pre)
    if m_hidden is not None:
        act *= m_hidden
    out = affine(act, w2, b2)
    if m_out is not None:
        out *= m_out
    return out, pre, cdf, act


def _masks(cfg, shape_hidden, shape_out, train, seed, step, block, sites, dtype):
    if not train or cfg.dropout == 0:
        return None, None
    h, o = sites
    return (
        dropout_mask(shape_hidden, cfg.dropout, counter_rng(seed, step, block, h), dtype),
        dropout_mask(shape_out, cfg.dropout, counter_rng(seed, step, block, o), dtype),
    )


def _channel(x, params, i, train, seed, step):
    cfg = params.config
    p = f"block.{i}."
    h, ln = layernorm_forward(x, params[p + "ln1.gamma"], params[p + "ln1.beta"])
    mh, mo = _masks(
        cfg, x.shape[:-1] + (cfg.hidden_channel,), x.shape, train, seed, step, i, (_CH_HIDDEN, _CH_OUT), x.dtype.type
    )
    out, pre, cdf, act = _feedforward(
        h, params[p + "channel.w1"], params[p + "channel.b1"], params[p + "channel.w2"], params[p + "channel.b2"], mh, mo
    )
    return x + out, _FFCache(ln, h, pre, cdf, act, mh, mo)


def _token(x, params, i, train, seed, step):
    cfg = params.config
    if cfg.ablate_token_mixer:
        raise CapabilityError("the ablated model has no Token Mixer")
    if x.shape[-2] != cfg.seq_len:
        raise DimensionError(f"token mixer needs {cfg.seq_len} rows, got {x.shape[-2]}")
    p = f"block.{i}."
    h, ln = layernorm_forward(x, params[p + "ln2.gamma"], params[p + "ln2.beta"])
    t = np.swapaxes(h, -1, -2)
    mh, mo = _masks(
        cfg, t.shape[:-1] + (cfg.hidden_token,), t.shape, train, seed, step, i, (_TOK_HIDDEN, _TOK_OUT), x.dtype.type
    )
    out, pre, cdf, act = _feedforward(
        t, params[p + "token.w1"], params[p + "token.b1"], params[p + "token.w2"], params[p + "token.b2"], mh, mo
    )
    return x + np.swapaxes(out, -1, -2), _FFCache(ln, t, pre, cdf, act, mh, mo)


def channel_mix(x: np.ndarray, params: ModelParams, block: int, train: bool = False, seed: int = 0, step: int = 0):
    return _channel(x, params, block, train, seed, step)[0]


def token_mix(x: np.ndarray, params: ModelParams, block: int, train: bool = False, seed: int = 0, step: int = 0):
    return _token(x, params, block, train, seed, step)[0]


def token_feedforward(params: ModelParams, block: int, x: np.ndarray) -> np.ndarray:
    """Token-Mixer feedforward alone (no layernorm, no residual, no dropout) on rows of ``x``."""
    if params.config.ablate_token_mixer:
        raise CapabilityError("the ablated model has no Token Mixer")
    p = f"block.{block}."
    out, _, _, _ = _feedforward(
        x, params[p + "token.w1"], params[p + "token.b1"], params[p + "token.w2"], params[p + "token.b2"], None, None
    )
    return out


def forward_with_cache(
    pitch_ids, phoneme_ids, params: ModelParams, train: bool = False, seed: int = 0, step: int = 0
) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.config
    pitch, phon, _ = _as_batch(pitch_ids, phoneme_ids, cfg)
    e = np.concatenate([params["embed.phoneme"][phon], params["embed.pitch"][pitch]], axis=-1)
    x = affine(e, params["in_proj.w"], params["in_proj.b"])
    cache = ForwardCache(pitch, phon, e)
    for i in range(cfg.n_blocks):
        x, c_cache = _channel(x, params, i, train, seed, step)
        t_cache = None
        if not cfg.ablate_token_mixer:
            x, t_cache = _token(x, params, i, train, seed, step)
        cache.blocks.append((c_cache, t_cache))
    cache.final = x
    return affine(x, params["out_proj.w"], params["out_proj.b"]), cache


def forward(pitch_ids, phoneme_ids, params: ModelParams, train: bool = False, seed: int = 0, step: int = 0) -> np.ndarray:
    """Mel prediction, ``(seq_len, d_mel)`` for one segment or ``(batch, seq_len, d_mel)``."""
    single = np.asarray(pitch_ids).ndim == 1
    y, _ = forward_with_cache(pitch_ids, phoneme_ids, params, train, seed, step)
    return y[0] if single else y


# --------------------------------------------------------------------------
# backward


def _ff_backward(dout, c: _FFCache, params, prefix):
    if c.m_out is not None:
        dout = dout * c.m_out
    dact, dw2, db2 = affine_backward(dout, c.act, params[prefix + "w2"])
    if c.m_hidden is not None:
        dact = dact * c.m_hidden
    dpre = gelu_backward(c.pre, dact, c.cdf)
    dinp, dw1, db1 = affine_backward(dpre, c.inp, params[prefix + "w1"])
    for leaf, g in (("w1", dw1), ("b1", db1), ("w2", dw2), ("b2", db2)):
        params.param(prefix + leaf).grad += g
    return dinp


def backward(dy: np.ndarray, cache: ForwardCache, params: ModelParams) -> None:
    """Accumulate parameter gradients for upstream gradient ``dy`` (batch, seq_len, d_mel)."""
    cfg = params.config
    if dy.ndim == 2:
        dy = dy[None]
    dx, dw, db = affine_backward(dy, cache.final, params["out_proj.w"])
    params.param("out_proj.w").grad += dw
    params.param("out_proj.b").grad += db
    for i in reversed(range(cfg.n_blocks)):
        c_cache, t_cache = cache.blocks[i]
        p = f"block.{i}."
        if t_cache is not None:
            dt = _ff_backward(np.swapaxes(dx, -1, -2), t_cache, params, p + "token.")
            dln, dg, dbeta = layernorm_backward(np.swapaxes(dt, -1, -2), t_cache.ln)
            params.param(p + "ln2.gamma").grad += dg
            params.param(p + "ln2.beta").grad += dbeta
            dx = dx + dln
        dh = _ff_backward(dx, c_cache, params, p + "channel.")
        dln, dg, dbeta = layernorm_backward(dh, c_cache.ln)
        params.param(p + "ln1.gamma").grad += dg
        params.param(p + "ln1.beta").grad += dbeta
        dx = dx + dln
    de, dw, db = affine_backward(dx, cache.embedded, params["in_proj.w"])
    params.param("in_proj.w").grad += dw
    params.param("in_proj.b").grad += db
    dc = cfg.d_phoneme
    np.add.at(params.param("embed.phoneme").grad, cache.phoneme_ids, de[..., :dc])
    np.add.at(params.param("embed.pitch").grad, cache.pitch_ids, de[..., dc:])


# --------------------------------------------------------------------------
# checkpoints


def config_path(ckpt) -> Path:
    return Path(ckpt).with_suffix(".json")


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write tensors as TEN1 and the model config as a JSON sidecar."""
    tensors = OrderedDict(params.values())
    if extra:
        tensors.update(extra)
    save_tensors(path, tensors)
    doc = {"model": params.config.to_dict()}
    if meta:
        doc.update(meta)
    config_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Return ``(params, extra tensors, sidecar document)``."""
    side = config_path(path)
    if not side.exists():
        raise FormatError(f"missing config sidecar {side}")
    doc = json.loads(side.read_text())
    cfg = ModelConfig.from_dict(doc["model"])
    values = load_tensors(path)
    params = ModelParams.from_values(cfg, values)
    extra = {k: v for k, v in values.items() if k not in params.tensors}
    return params, extra, doc
