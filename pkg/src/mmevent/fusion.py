"""Classifier heads mapping text/vision embeddings to a distribution over event labels.

All heads are written directly in numpy with hand-derived backward passes so
that analytic gradients can be checked against finite differences. Every
forward/backward function is batched: ``v`` has shape ``(B, d_vision)`` and
``w`` has shape ``(B, d_text)``.

Weight matrices are stored input-major, ``(fan_in, fan_out)``, and applied as
``x @ W + b``; for a single vector this is ``W.T @ x + b``.

Single-vector embeddings are turned into attention positions by splitting each
vector into ``n_chunks`` equal contiguous chunks.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import LABELS, NUM_CLASSES, EventLabel
from .encoders import Embedding
from .errors import ConfigurationError, NumericError, ShapeError

CHECKPOINT_FORMAT = "mmevent-fusion/1"


@dataclass(frozen=True)
class FusionConfig:
    d_text: int = 64
    d_vision: int = 64
    d_attn: int = 16
    d_model: int = 64
    n_chunks: int = 4
    n_classes: int = NUM_CLASSES

    def __post_init__(self):
        for name in ("d_text", "d_vision", "d_attn", "d_model", "n_chunks", "n_classes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    argmax: EventLabel

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Prediction":
        probs = np.asarray(probs, dtype=np.float64)
        # np.argmax returns the first maximal index, i.e. the lowest label index on ties
        return cls(probs, LABELS[int(np.argmax(probs))])


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None):
    """Scaled dot-product attention over the second-to-last axis.

    Returns ``(output, weights)``; weights are row-stochastic per query.
    """
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    weights = softmax(np.einsum("...qa,...ka->...qk", q, k) * scale)
    return np.einsum("...qk,...kd->...qd", weights, v), weights


def _chunks(x: np.ndarray, n: int, what: str) -> np.ndarray:
    if x.shape[-1] % n:
        raise ConfigurationError(f"{what} dim {x.shape[-1]} not divisible by n_chunks={n}")
    return x.reshape(x.shape[0], n, x.shape[-1] // n)


class _Head:
    name: str
    uses_text = True
    uses_vision = True

    def shapes(self, cfg: FusionConfig) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def validate(self, cfg: FusionConfig) -> None:
        pass

    def forward(self, p, v, w):
        raise NotImplementedError

    def backward(self, p, cache, dlogits):
        raise NotImplementedError


class TextOnly(_Head):
    name = "text_only"
    uses_vision = False

    def shapes(self, cfg):
        return {"W_t": (cfg.d_text, cfg.n_classes), "b_t": (cfg.n_classes,)}

    def forward(self, p, v, w):
        return w @ p["W_t"] + p["b_t"], {"w": w}

    def backward(self, p, cache, dlogits):
        grads = {"W_t": cache["w"].T @ dlogits, "b_t": dlogits.sum(0)}
        return grads, None, dlogits @ p["W_t"].T


class VisionOnly(_Head):
    name = "vision_only"
    uses_text = False

    def shapes(self, cfg):
        return {"W_v": (cfg.d_vision, cfg.n_classes), "b_v": (cfg.n_classes,)}

    def forward(self, p, v, w):
        return v @ p["W_v"] + p["b_v"], {"v": v}

    def backward(self, p, cache, dlogits):
        grads = {"W_v": cache["v"].T @ dlogits, "b_v": dlogits.sum(0)}
        return grads, dlogits @ p["W_v"].T, None


class VanillaFusion(_Head):
    """Concatenate ``[V; W]`` and apply one linear layer."""

    name = "vanilla_fusion"

    def shapes(self, cfg):
        return {"W_f": (cfg.d_vision + cfg.d_text, cfg.n_classes), "b_f": (cfg.n_classes,)}

    def forward(self, p, v, w):
        m = np.concatenate([v, w], axis=1)
        return m @ p["W_f"] + p["b_f"], {"m": m, "dv": v.shape[1]}

    def backward(self, p, cache, dlogits):
        grads = {"W_f": cache["m"].T @ dlogits, "b_f": dlogits.sum(0)}
        dm = dlogits @ p["W_f"].T
        return grads, dm[:, :cache["dv"]], dm[:, cache["dv"]:]


class ProjectedCrossAttention(_Head):
    """ReLU projections of both modalities to ``d_model``, then text-to-image cross-attention.

    Projected text chunks are the queries and projected image chunks are both
    keys and values (no value projection), so the per-query outputs live in
    the same chunk space and are concatenated back into a ``d_model`` vector.
    """

    name = "projected_cross_attention"

    def validate(self, cfg):
        if cfg.d_model % cfg.n_chunks:
            raise ConfigurationError(f"d_model={cfg.d_model} not divisible by n_chunks={cfg.n_chunks}")

    def shapes(self, cfg):
        d = cfg.d_model // cfg.n_chunks
        return {
            "W_text": (cfg.d_text, cfg.d_model),
            "W_img": (cfg.d_vision, cfg.d_model),
            "W_q": (d, cfg.d_attn),
            "W_k": (d, cfg.d_attn),
            "W_f": (cfg.d_model, cfg.n_classes),
            "b_f": (cfg.n_classes,),
        }

    def forward(self, p, v, w):
        n = p["n_chunks"]
        pre_w, pre_v = w @ p["W_text"], v @ p["W_img"]
        wp, vp = np.maximum(pre_w, 0.0), np.maximum(pre_v, 0.0)
        wc, vc = _chunks(wp, n, "d_model"), _chunks(vp, n, "d_model")
        q, k = wc @ p["W_q"], vc @ p["W_k"]
        scale = 1.0 / np.sqrt(q.shape[-1])
        out, att = attention(q, k, vc, scale)
        m = out.reshape(out.shape[0], -1)
        cache = dict(w=w, v=v, pre_w=pre_w, pre_v=pre_v, wc=wc, vc=vc, q=q, k=k,
                     att=att, m=m, scale=scale)
        return m @ p["W_f"] + p["b_f"], cache

    def backward(self, p, c, dlogits):
        g = {"W_f": c["m"].T @ dlogits, "b_f": dlogits.sum(0)}
        dout = (dlogits @ p["W_f"].T).reshape(c["wc"].shape)
        datt = np.einsum("bqd,bkd->bqk", dout, c["vc"])
        dvc = np.einsum("bqk,bqd->bkd", c["att"], dout)
        ds = _softmax_backward(c["att"], datt) * c["scale"]
        dq = ds @ c["k"]
        dk = np.einsum("bqk,bqa->bka", ds, c["q"])
        g["W_q"] = np.einsum("bnd,bna->da", c["wc"], dq)
        g["W_k"] = np.einsum("bnd,bna->da", c["vc"], dk)
        dwc = dq @ p["W_q"].T
        dvc = dvc + dk @ p["W_k"].T
        dpre_w = dwc.reshape(c["pre_w"].shape) * (c["pre_w"] > 0)
        dpre_v = dvc.reshape(c["pre_v"].shape) * (c["pre_v"] > 0)
        g["W_text"] = c["w"].T @ dpre_w
        g["W_img"] = c["v"].T @ dpre_v
        return g, dpre_v @ p["W_img"].T, dpre_w @ p["W_text"].T


class DualAttention(_Head):
    """Text queries attend over image chunks and image queries attend over text chunks."""

    name = "dual_attention"

    def validate(self, cfg):
        for what, d in (("d_text", cfg.d_text), ("d_vision", cfg.d_vision)):
            if d % cfg.n_chunks:
                raise ConfigurationError(f"{what}={d} not divisible by n_chunks={cfg.n_chunks}")

    def shapes(self, cfg):
        dw, dv, a = cfg.d_text // cfg.n_chunks, cfg.d_vision // cfg.n_chunks, cfg.d_attn
        return {
            "Wq_t": (dw, a), "Wk_t": (dw, a), "Wv_t": (dw, a),
            "Wq_i": (dv, a), "Wk_i": (dv, a), "Wv_i": (dv, a),
            "W_f": (2 * cfg.n_chunks * a, cfg.n_classes),
            "b_f": (cfg.n_classes,),
        }

    def forward(self, p, v, w):
        n = p["n_chunks"]
        tc, ic = _chunks(w, n, "d_text"), _chunks(v, n, "d_vision")
        qt, kt, vt = tc @ p["Wq_t"], tc @ p["Wk_t"], tc @ p["Wv_t"]
        qi, ki, vi = ic @ p["Wq_i"], ic @ p["Wk_i"], ic @ p["Wv_i"]
        scale = 1.0 / np.sqrt(qt.shape[-1])
        i_att, a_img = attention(qt, ki, vi, scale)
        t_att, a_txt = attention(qi, kt, vt, scale)
        b = v.shape[0]
        h = np.concatenate([i_att.reshape(b, -1), t_att.reshape(b, -1)], axis=1)
        cache = dict(tc=tc, ic=ic, qt=qt, kt=kt, vt=vt, qi=qi, ki=ki, vi=vi,
                     a_img=a_img, a_txt=a_txt, h=h, scale=scale)
        return h @ p["W_f"] + p["b_f"], cache

    @staticmethod
    def _attn_back(att, q, k, vals, dout, scale):
        datt = np.einsum("bqd,bkd->bqk", dout, vals)
        dvals = np.einsum("bqk,bqd->bkd", att, dout)
        ds = _softmax_backward(att, datt) * scale
        return ds @ k, np.einsum("bqk,bqa->bka", ds, q), dvals

    def backward(self, p, c, dlogits):
        g = {"W_f": c["h"].T @ dlogits, "b_f": dlogits.sum(0)}
        dh = dlogits @ p["W_f"].T
        half = dh.shape[1] // 2
        di = dh[:, :half].reshape(c["qt"].shape)
        dt = dh[:, half:].reshape(c["qi"].shape)
        dqt, dki, dvi = self._attn_back(c["a_img"], c["qt"], c["ki"], c["vi"], di, c["scale"])
        dqi, dkt, dvt = self._attn_back(c["a_txt"], c["qi"], c["kt"], c["vt"], dt, c["scale"])
        tc, ic = c["tc"], c["ic"]
        for key, x, d in (("Wq_t", tc, dqt), ("Wk_t", tc, dkt), ("Wv_t", tc, dvt),
                          ("Wq_i", ic, dqi), ("Wk_i", ic, dki), ("Wv_i", ic, dvi)):
            g[key] = np.einsum("bnd,bna->da", x, d)
        dtc = dqt @ p["Wq_t"].T + dkt @ p["Wk_t"].T + dvt @ p["Wv_t"].T
        dic = dqi @ p["Wq_i"].T + dki @ p["Wk_i"].T + dvi @ p["Wv_i"].T
        return g, dic.reshape(dic.shape[0], -1), dtc.reshape(dtc.shape[0], -1)


class CMAC(_Head):
    """Cross-modal attention classifier.

    A single query projected from the whole text vector scores each image
    chunk; the resulting weights over chunk positions reweight and sum both the
    image chunks and the text chunks, and the two pooled vectors are
    concatenated for the classifier. Scores are unscaled dot products.
    """

    name = "cmac"

    def validate(self, cfg):
        DualAttention.validate(self, cfg)

    def shapes(self, cfg):
        n = cfg.n_chunks
        return {
            "Q_W": (cfg.d_text, cfg.d_attn),
            "K_V": (cfg.d_vision // n, cfg.d_attn),
            "W_c": ((cfg.d_vision + cfg.d_text) // n, cfg.n_classes),
            "b_c": (cfg.n_classes,),
        }

    def forward(self, p, v, w):
        n = p["n_chunks"]
        vc, wc = _chunks(v, n, "d_vision"), _chunks(w, n, "d_text")
        q = w @ p["Q_W"]
        k = vc @ p["K_V"]
        alpha = softmax(np.einsum("ba,bna->bn", q, k))
        vpool = np.einsum("bn,bnd->bd", alpha, vc)
        wpool = np.einsum("bn,bnd->bd", alpha, wc)
        m = np.concatenate([vpool, wpool], axis=1)
        cache = dict(v=v, w=w, vc=vc, wc=wc, q=q, k=k, alpha=alpha, m=m)
        return m @ p["W_c"] + p["b_c"], cache

    def backward(self, p, c, dlogits):
        g = {"W_c": c["m"].T @ dlogits, "b_c": dlogits.sum(0)}
        dm = dlogits @ p["W_c"].T
        dv_ = c["vc"].shape[-1]
        dvpool, dwpool = dm[:, :dv_], dm[:, dv_:]
        alpha = c["alpha"]
        dalpha = np.einsum("bnd,bd->bn", c["vc"], dvpool) + np.einsum("bnd,bd->bn", c["wc"], dwpool)
        dvc = alpha[:, :, None] * dvpool[:, None, :]
        dwc = alpha[:, :, None] * dwpool[:, None, :]
        ds = _softmax_backward(alpha, dalpha)
        dq = np.einsum("bn,bna->ba", ds, c["k"])
        dk = ds[:, :, None] * c["q"][:, None, :]
        g["Q_W"] = c["w"].T @ dq
        g["K_V"] = np.einsum("bnd,bna->da", c["vc"], dk)
        dvc = dvc + dk @ p["K_V"].T
        dw = dwc.reshape(dwc.shape[0], -1) + dq @ p["Q_W"].T
        return g, dvc.reshape(dvc.shape[0], -1), dw


HEADS: dict[str, _Head] = {h.name: h for h in (TextOnly(), VisionOnly(), VanillaFusion(),
                                               ProjectedCrossAttention(), DualAttention(), CMAC())}


def get_head(name: str) -> _Head:
    try:
        return HEADS[name]
    except KeyError:
        raise ConfigurationError(f"unknown head {name!r}; valid heads: {', '.join(HEADS)}") from None


@dataclass
class FusionParams:
    head: str
    config: FusionConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = get_head(self.head)
        h.validate(self.config)
        expected = h.shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ShapeError(f"{self.head}: expected tensors {sorted(expected)}, "
                             f"got {sorted(self.tensors)}")
        for k, shape in expected.items():
            t = np.asarray(self.tensors[k], dtype=np.float64)
            if t.shape != shape:
                raise ShapeError(f"{self.head}.{k}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise NumericError(f"{self.head}.{k} has non-finite entries")
            self.tensors[k] = t

    def _bound(self) -> dict:
        return {**self.tensors, "n_chunks": self.config.n_chunks}

    def copy(self) -> "FusionParams":
        return FusionParams(self.head, self.config, {k: t.copy() for k, t in self.tensors.items()},
                            self.seed, dict(self.meta))


def init_params(head: str, config: FusionConfig | None = None, seed: int = 0) -> FusionParams:
    """Glorot-uniform weights and zero biases, drawn from a seeded generator."""
    config = config or FusionConfig()
    h = get_head(head)
    h.validate(config)
    rng = np.random.default_rng(seed)
    tensors = {}
    for k, shape in h.shapes(config).items():
        if len(shape) == 1:
            tensors[k] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[k] = rng.uniform(-limit, limit, size=shape)
    return FusionParams(head, config, tensors, seed)


def _as_batch(x, dim: int, what: str, batch: int | None = None) -> np.ndarray:
    if x is None:
        if batch is None:
            raise ShapeError(f"{what} input required")
        return np.zeros((batch, dim))
    if isinstance(x, Embedding):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected dim {dim}, got shape {x.shape}")
    return x


def _inputs(params: FusionParams, v, w):
    h, cfg = get_head(params.head), params.config
    if h.uses_vision and v is None:
        raise ShapeError(f"{params.head} needs a vision input")
    if h.uses_text and w is None:
        raise ShapeError(f"{params.head} needs a text input")
    if h.uses_vision:
        v = _as_batch(v, cfg.d_vision, "vision embedding")
    if h.uses_text:
        w = _as_batch(w, cfg.d_text, "text embedding")
    b = (v if v is not None else w).shape[0]
    v = _as_batch(v, cfg.d_vision, "vision embedding", b)
    w = _as_batch(w, cfg.d_text, "text embedding", b)
    if v.shape[0] != w.shape[0]:
        raise ShapeError(f"batch mismatch: {v.shape[0]} vision vs {w.shape[0]} text rows")
    return h, v, w


def forward(params: FusionParams, v=None, w=None) -> tuple[np.ndarray, dict]:
    """Batched forward pass; returns ``(probs, cache)``."""
    h, v, w = _inputs(params, v, w)
    logits, cache = h.forward(params._bound(), v, w)
    cache["logits"] = logits
    return softmax(logits), cache


def predict_proba(params: FusionParams, v=None, w=None) -> np.ndarray:
    return forward(params, v, w)[0]


def attention_weights(params: FusionParams, v=None, w=None) -> list[np.ndarray]:
    """All attention weight tensors produced by one forward pass (empty for linear heads)."""
    _, cache = forward(params, v, w)
    return [cache[k] for k in ("att", "a_img", "a_txt", "alpha") if k in cache]


def _predict(expected: str, params: FusionParams, v, w) -> Prediction:
    if params.head != expected:
        raise ConfigurationError(f"params are for {params.head!r}, not {expected!r}")
    probs = predict_proba(params, v, w)
    if probs.shape[0] != 1:
        raise ShapeError("single-instance heads take one embedding per modality")
    return Prediction.from_probs(probs[0])


def text_head(params: FusionParams, W) -> Prediction:
    return _predict("text_only", params, None, W)


def vision_head(params: FusionParams, V) -> Prediction:
    return _predict("vision_only", params, V, None)


def vanilla_fusion(params: FusionParams, V, W) -> Prediction:
    return _predict("vanilla_fusion", params, V, W)


def projected_cross_attention_fusion(params: FusionParams, V, W) -> Prediction:
    return _predict("projected_cross_attention", params, V, W)


def dual_attention_fusion(params: FusionParams, V, W) -> Prediction:
    return _predict("dual_attention", params, V, W)


def cmac(params: FusionParams, V, W) -> Prediction:
    return _predict("cmac", params, V, W)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood computed from logits via log-sum-exp."""
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(targets)), targets]))


def gradient_of(params: FusionParams, v, w, targets, return_inputs: bool = False):
    """Mean cross-entropy loss and its exact gradient w.r.t. every parameter tensor.

    ``targets`` are label indices (or :class:`EventLabel` values), one per
    batch row. With ``return_inputs`` the gradients w.r.t. the vision and text
    inputs are returned as a third element ``(dv, dw)``.
    """
    h, v, w = _inputs(params, v, w)
    targets = np.array([t.index if isinstance(t, EventLabel) else int(t)
                        for t in np.atleast_1d(np.asarray(targets, dtype=object))])
    if targets.shape[0] != v.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for batch of {v.shape[0]}")
    logits, cache = h.forward(params._bound(), v, w)
    probs = softmax(logits)
    loss = cross_entropy(logits, targets)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", loss=loss)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(targets)), targets] = 1.0
    grads, dv, dw = h.backward(params._bound(), cache, (probs - onehot) / len(targets))
    if return_inputs:
        return loss, grads, (dv, dw)
    return loss, grads


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: FusionParams, path: str | Path, extra: Mapping | None = None) -> None:
    """Write a named-tensor ``.npz`` archive whose ``__header__`` entry is JSON."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "head": params.head,
        "config": asdict(params.config),
        "seed": params.seed,
        "labels": [lab.display for lab in LABELS],
        **params.meta,
        **(extra or {}),
    }
    arrays = {k: np.asarray(t) for k, t in params.tensors.items()}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint_header(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z["__header__"]))


def load_checkpoint(path: str | Path) -> FusionParams:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        tensors = {k: z[k].copy() for k in z.files if k != "__header__"}
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a fusion checkpoint")
    if header["labels"] != [lab.display for lab in LABELS]:
        raise ConfigurationError(f"{path}: label order {header['labels']} does not match taxonomy")
    meta = {k: v for k, v in header.items()
            if k not in ("format", "head", "config", "seed", "labels")}
    return FusionParams(header["head"], FusionConfig(**header["config"]), tensors,
                        header["seed"], meta)
