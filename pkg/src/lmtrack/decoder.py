"""Toy tracking-by-attention decoder.

Object queries (track queries followed by detection queries) are refined by
alternating self-attention, cross-attention into sensor tokens and an FFN.
Each query carries a 3D reference point; its sinusoidal encoding, passed
through a small MLP, is added to the attention inputs. Box centres are read
out from the cross-attention of head 0 (attention-weighted token positions)
plus a regressed offset, so a query that attends to one token is centred on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradtensor as gt
from . import nn
from .boxes import BoundingBox3D
from .config import DecoderConfig
from .gradtensor import Tensor

# regression layout: centre offset (3), log size (3), sin, cos, velocity offset (2)
REG_DIM = 10
LOG_SIZE_CLIP = 10.0


@dataclass
class TokenSet:
    """Sensor tokens of one frame, in the current ego frame."""

    positions: np.ndarray  # (m, 3)
    velocities: np.ndarray  # (m, 2)
    features: np.ndarray  # (m, d)
    confidences: np.ndarray | None = None  # (m,)

    def __post_init__(self):
        if self.confidences is None:
            self.confidences = np.ones(len(self.positions))

    @classmethod
    def from_tokens(cls, tokens: list, d: int) -> "TokenSet":
        if not tokens:
            return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, d)), np.zeros(0))
        return cls(np.stack([t.position for t in tokens]), np.stack([t.velocity for t in tokens]),
                   np.stack([t.feature for t in tokens]), np.array([t.confidence for t in tokens]))

    def __len__(self):
        return len(self.positions)

    def subset(self, idx) -> "TokenSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TokenSet(self.positions[idx], self.velocities[idx], self.features[idx], self.confidences[idx])


def det_reference_points(cfg: DecoderConfig) -> np.ndarray:
    """Fixed detection-query anchors on a sunflower spiral covering the sensor disc."""
    n = cfg.num_det_queries
    idx = np.arange(n) + 0.5
    r = 0.85 * cfg.max_range * np.sqrt(idx / n)
    theta = idx * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, 1.0)], axis=1)


def attention_params(rng, d: int) -> dict:
    return {name: nn.linear_params(rng, d, d) for name in ("q", "k", "v", "o")}


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> dict:
    d = cfg.d_l
    pos_dim = 4 * cfg.pos_freqs
    layers = []
    for _ in range(cfg.num_layers):
        layers.append({
            "self_attn": attention_params(rng, d),
            "cross_attn": attention_params(rng, d),
            "ffn": nn.mlp_params(rng, [d, cfg.ffn_width, d]),
            "norm1": nn.layer_norm_params(d),
            "norm2": nn.layer_norm_params(d),
            "norm3": nn.layer_norm_params(d),
            # per-head weights on -|ref_i - ref_j|^2 (self) and -|ref - token|^2 (cross), sharp to broad
            "self_locality": gt.parameter(np.geomspace(0.1, 0.003, cfg.h)),
            "locality": gt.parameter(np.geomspace(0.1, 0.003, cfg.h)),
        })
    cls_head = nn.linear_params(rng, d, cfg.num_classes)
    cls_head["bias"].data[:] = -np.log((1 - 0.01) / 0.01)
    params = {
        "det_queries": gt.parameter(rng.normal(size=(cfg.num_det_queries, d))),
        "det_embed": gt.parameter(rng.normal(size=d)),
        "det_proj": nn.linear_params(rng, d, d),
        "query_pos": nn.mlp_params(rng, [pos_dim, d, d]),
        "token_pos": nn.linear_params(rng, pos_dim, d),
        "token_vel": nn.linear_params(rng, 2, d, gain=0.5),
        "token_conf": nn.linear_params(rng, 1, d),
        "layers": layers,
        "cls_head": cls_head,
        "reg_head": nn.mlp_params(rng, [d, d, REG_DIM], zero_last=True),
    }
    if cfg.track_embedding:
        params["track_embedding"] = init_track_embedding(cfg, rng)
    return params


def init_track_embedding(cfg: DecoderConfig, rng: np.random.Generator) -> dict:
    d = cfg.d_l
    return {"e": gt.parameter(rng.normal(size=d)), "ffn": nn.mlp_params(rng, [2 * d, cfg.ffn_width, d], zero_last=True)}


def mha(queries: Tensor, keys: Tensor, values: Tensor, params: dict, h: int, bias: Tensor | None = None):
    """Multi-head scaled dot-product attention.

    ``bias`` (h, n, m) is added to the attention logits. Returns the projected
    output (n, d) and the attention weights (h, n, m).
    """
    n, d = queries.shape
    m = keys.shape[0]
    if keys.shape[1] != d or values.shape != keys.shape or d % h:
        raise gt.ShapeMismatch(f"mha: queries {queries.shape}, keys {keys.shape}, values {values.shape}, h={h}")
    hd = d // h

    def split(x, rows):
        return gt.transpose(gt.reshape(x, (rows, h, hd)), (1, 0, 2))

    q = split(nn.linear(params["q"], queries), n)
    k = split(nn.linear(params["k"], keys), m)
    v = split(nn.linear(params["v"], values), m)
    scores = gt.scale(gt.matmul(q, gt.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
    if bias is not None:
        scores = gt.add(scores, bias)
    weights = gt.softmax(scores)
    out = gt.reshape(gt.transpose(gt.matmul(weights, v), (1, 0, 2)), (n, d))
    return nn.linear(params["o"], out), weights


def locality_bias(sq_dist: np.ndarray, weights: Tensor) -> Tensor:
    """``-weights[j] * sq_dist`` stacked over heads -> (h, n, m)."""
    n, m = sq_dist.shape
    h = weights.shape[0]
    flat = gt.matmul(gt.reshape(weights, (h, 1)), Tensor(-sq_dist.reshape(1, n * m)))
    return gt.reshape(flat, (h, n, m))


def decoder_layer(x: Tensor, query_pos: Tensor, tokens: Tensor | None, params: dict, h: int,
                  sq_dist: np.ndarray | None = None, self_sq_dist: np.ndarray | None = None):
    """One self-attention / cross-attention / FFN block with post-norm residuals.

    ``tokens`` may be ``None`` or empty, in which case cross-attention is
    skipped. ``sq_dist`` (n, m) and ``self_sq_dist`` (n, n) hold squared
    reference-to-token and reference-to-reference distances for the locality
    biases. Returns the updated queries and the
    cross-attention weights.
    """
    if x.shape != query_pos.shape:
        raise gt.ShapeMismatch(f"decoder_layer: queries {x.shape} vs positions {query_pos.shape}")
    qk = gt.add(x, query_pos)
    self_bias = None
    if self_sq_dist is not None and "self_locality" in params:
        self_bias = locality_bias(self_sq_dist, params["self_locality"])
    sa, _ = mha(qk, qk, x, params["self_attn"], h, self_bias)
    x = nn.layer_norm(params["norm1"], gt.add(x, sa))
    weights = None
    if tokens is not None and tokens.shape[0] > 0:
        if tokens.shape[1] != x.shape[1]:
            raise gt.ShapeMismatch(f"decoder_layer: tokens {tokens.shape} vs queries {x.shape}")
        bias = None
        if sq_dist is not None and "locality" in params:
            bias = locality_bias(sq_dist, params["locality"])
        ca, weights = mha(gt.add(x, query_pos), tokens, tokens, params["cross_attn"], h, bias)
        x = nn.layer_norm(params["norm2"], gt.add(x, ca))
    x = nn.layer_norm(params["norm3"], gt.add(x, nn.mlp(params["ffn"], x)))
    return x, weights


def encode_tokens(tokens: TokenSet, params: dict, cfg: DecoderConfig) -> Tensor | None:
    if len(tokens) == 0:
        return None
    pos = nn.sinusoidal(tokens.positions[:, :2], cfg.pos_freqs, cfg.max_range)
    feat = gt.add(Tensor(tokens.features), nn.linear(params["token_pos"], Tensor(pos)))
    feat = gt.add(feat, nn.linear(params["token_conf"], Tensor(tokens.confidences.reshape(-1, 1))))
    return gt.add(feat, nn.linear(params["token_vel"], Tensor(tokens.velocities)))


def detection_queries(tokens: TokenSet, params: dict, cfg: DecoderConfig) -> tuple[Tensor, np.ndarray]:
    """Fresh detection queries and their reference points for one frame.

    In ``token`` mode each of the (up to ``num_det_queries``) most confident
    tokens seeds a query at its position, with content ``e_det + W enc(token)``.
    In ``learned`` mode the learned query set sits on fixed anchors.
    """
    if cfg.det_query_mode == "learned":
        return params["det_queries"], det_reference_points(cfg)
    if len(tokens) == 0:
        return Tensor(np.zeros((0, cfg.d_l))), np.zeros((0, 3))
    order = np.argsort(-tokens.confidences, kind="stable")[:cfg.num_det_queries]
    chosen = tokens.subset(order)
    q = gt.add(nn.linear(params["det_proj"], encode_tokens(chosen, params, cfg)), params["det_embed"])
    return q, chosen.positions.copy()


def query_positions(refs: np.ndarray, params: dict, cfg: DecoderConfig) -> Tensor:
    return nn.mlp(params["query_pos"], Tensor(nn.sinusoidal(refs[:, :2], cfg.pos_freqs, cfg.max_range)))


def apply_track_embedding(t: Tensor, emb: dict) -> Tensor:
    """Residual update ``t + FFN([t, e])`` for every row of ``t``."""
    single = t.ndim == 1
    t2 = gt.reshape(t, (1, -1)) if single else t
    n = t2.shape[0]
    if n == 0:
        return t
    e_rows = gt.gather_rows(gt.reshape(emb["e"], (1, -1)), np.zeros(n, dtype=np.int64))
    out = gt.add(t2, nn.mlp(emb["ffn"], gt.concat([t2, e_rows], axis=1)))
    return gt.reshape(out, (t2.shape[1],)) if single else out


@dataclass
class LayerOutput:
    logits: Tensor  # (n, C)
    reg: Tensor  # (n, REG_DIM) with absolute centre in the first three columns
    weights: Tensor | None


def predict_heads(x: Tensor, anchor: Tensor, vel_anchor: Tensor, params: dict) -> LayerOutput:
    raw = nn.mlp(params["reg_head"], x)
    center = gt.add(anchor, raw[:, 0:3])
    vel = gt.add(vel_anchor, raw[:, 8:10])
    reg = gt.concat([center, raw[:, 3:8], vel], axis=1)
    return LayerOutput(nn.linear(params["cls_head"], x), reg, None)


def decode_heads(query: Tensor, ref, params: dict, vel_ref=None):
    """Decode one query (d,) at reference ``ref`` into a box and class logits."""
    x = gt.reshape(query, (1, -1))
    vel_ref = np.zeros(2) if vel_ref is None else np.asarray(vel_ref, dtype=np.float64)
    out = predict_heads(x, Tensor(np.asarray(ref, dtype=np.float64).reshape(1, 3)),
                        Tensor(vel_ref.reshape(1, 2)), params)
    return boxes_from_reg(out.reg.data, out.logits.data)[0], out.logits.data[0]


def boxes_from_reg(reg: np.ndarray, logits: np.ndarray) -> list:
    probs = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    boxes = []
    for row, p in zip(reg, probs):
        size = np.exp(np.clip(row[3:6], -LOG_SIZE_CLIP, LOG_SIZE_CLIP))
        heading = float(np.arctan2(row[6], row[7]))
        cls = int(np.argmax(p))
        boxes.append(BoundingBox3D(row[0:3], size, heading, row[8:10], float(p[cls]), cls))
    return boxes


def scores_from_logits(logits: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))).max(axis=1)


@dataclass
class DecoderOutput:
    layers: list  # LayerOutput per decoder layer
    latents: Tensor  # (n, d) final-layer queries

    @property
    def last(self) -> LayerOutput:
        return self.layers[-1]


def run_decoder(queries: Tensor, refs: np.ndarray, tokens: TokenSet, params: dict, cfg: DecoderConfig) -> DecoderOutput:
    """Refine queries against one frame's tokens; per-layer outputs for deep supervision."""
    if queries.shape[0] != refs.shape[0]:
        raise gt.ShapeMismatch(f"run_decoder: {queries.shape[0]} queries but {refs.shape[0]} references")
    if queries.shape[0] == 0:
        empty = [LayerOutput(Tensor(np.zeros((0, cfg.num_classes))), Tensor(np.zeros((0, REG_DIM))), None)
                 for _ in params["layers"]]
        return DecoderOutput(empty, Tensor(np.zeros((0, cfg.d_l))))
    pos = query_positions(refs, params, cfg)
    tok = encode_tokens(tokens, params, cfg)
    sq_dist = None
    if len(tokens):
        sq_dist = ((refs[:, None, :2] - tokens.positions[None, :, :2]) ** 2).sum(axis=2)
    self_sq_dist = ((refs[:, None, :2] - refs[None, :, :2]) ** 2).sum(axis=2)
    x = queries
    outs = []
    for layer in params["layers"]:
        x, weights = decoder_layer(x, pos, tok, layer, cfg.h, sq_dist, self_sq_dist)
        if weights is None:
            anchor = Tensor(refs)
            vel_anchor = Tensor(np.zeros((refs.shape[0], 2)))
        else:
            w0 = weights[0]  # head 0 points at the token the query is about
            anchor = gt.matmul(w0, Tensor(tokens.positions))
            vel_anchor = gt.matmul(w0, Tensor(tokens.velocities))
        out = predict_heads(x, anchor, vel_anchor, params)
        out.weights = weights
        outs.append(out)
    return DecoderOutput(outs, x)
