"""Latent motion model: a hyper-network that turns a rigid transform into a
block-diagonal linear map (plus offset) acting on object query latents.

For a query ``q`` and a pose ``T`` the model computes::

    K, o = TfNet(rot6d(T), t(T) / trans_scale)
    q'   = W_out @ (blockdiag(K) @ (W_in @ q) + o)

``K`` holds ``h`` blocks of ``h_dim x h_dim`` (``full_rank`` is the ``h = 1``
case). The last TfNet layer starts at zero and blocks are predicted as
``I + dK``; ``W_out`` starts as the exact inverse of ``W_in``, so a fresh
model is the identity map on ``q`` for every pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradtensor as gt
from . import nn
from .config import LmmConfig
from .geometry import SE3Transform, compose, pose_features
from .gradtensor import Tensor
from .optim import AdamW, cosine_lr


class ConfigMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def transform_shape(cfg: LmmConfig, d_model: int) -> tuple[int, int, int]:
    """(k, h, h_dim) of the predicted latent transform."""
    k = cfg.d_l or d_model
    if cfg.variant == "full_rank":
        return k, 1, k
    if k % cfg.h:
        raise ConfigMismatch(f"lmm.h={cfg.h} does not divide latent width {k}")
    return k, cfg.h, k // cfg.h


def output_size(cfg: LmmConfig, d_model: int) -> int:
    """Hyper-network output units: block entries plus the latent offset."""
    k, h, hd = transform_shape(cfg, d_model)
    return h * hd * hd + k


@dataclass
class TfNetParams:
    mlp: list
    w_in: Tensor
    w_out: Tensor
    k: int
    h: int
    hd: int
    d_model: int
    use_query_feature: bool = False
    trans_scale: float = 10.0
    anchor_identity: bool = True

    def tree(self) -> dict:
        return {"mlp": self.mlp, "w_in": self.w_in, "w_out": self.w_out}

    @property
    def num_block_weights(self) -> int:
        return self.h * self.hd * self.hd


@dataclass
class LatentTransform:
    """Batched transform: ``blocks`` (N, h, hd, hd) and ``offset`` (N, k)."""

    blocks: Tensor
    offset: Tensor
    delta: Tensor = field(repr=False, default=None)


@dataclass
class LmmParams:
    """One TfNet when parameters are shared, else separate object and ego nets."""

    obj: TfNetParams
    ego: TfNetParams | None = None

    def tree(self) -> dict:
        if self.ego is None:
            return {"shared": self.obj.tree()}
        return {"object": self.obj.tree(), "ego": self.ego.tree()}

    def for_ego(self) -> TfNetParams:
        return self.obj if self.ego is None else self.ego


def init_tfnet(cfg: LmmConfig, d_model: int, rng: np.random.Generator) -> TfNetParams:
    k, h, hd = transform_shape(cfg, d_model)
    hidden = cfg.hidden or 2 * d_model
    n_in = 9 + (d_model if cfg.use_query_feature else 0)
    layers = nn.mlp_params(rng, [n_in, hidden, hidden, h * hd * hd + k], zero_last=True)
    w_in = np.eye(k, d_model) + rng.normal(scale=cfg.init_noise, size=(k, d_model))
    # exact left inverse when k >= d_model, so W_out @ W_in = I at init
    w_out = np.linalg.pinv(w_in)
    return TfNetParams(layers, gt.parameter(w_in), gt.parameter(w_out), k, h, hd, d_model,
                       cfg.use_query_feature, cfg.trans_scale, cfg.anchor_identity)


def init_lmm(cfg: LmmConfig, d_model: int, rng: np.random.Generator) -> LmmParams:
    obj = init_tfnet(cfg, d_model, rng)
    separate_nets = cfg.apply_mode == "separate" and not cfg.share_params
    return LmmParams(obj, init_tfnet(cfg, d_model, rng) if separate_nets else None)


_IDENTITY_POSE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])


def _pose_input(rot, trans, scale: float) -> np.ndarray:
    rot = np.atleast_2d(rot.as_vector() if hasattr(rot, "as_vector") else np.asarray(rot, dtype=np.float64))
    trans = np.atleast_2d(np.asarray(trans, dtype=np.float64))
    if rot.shape[1] != 6 or trans.shape[1] != 3 or rot.shape[0] != trans.shape[0]:
        raise gt.ShapeMismatch(f"tfnet: rotation {rot.shape} and translation {trans.shape} disagree")
    return np.concatenate([rot, trans / scale], axis=1)


def tfnet(rot, trans, params: TfNetParams, q: Tensor | None = None) -> LatentTransform:
    """Predict latent transforms for N poses.

    ``rot`` is a ``Rot6D`` or an (N, 6) array of stacked first/second rotation
    columns; ``trans`` is (3,) or (N, 3) in meters.
    """
    if (q is not None) != params.use_query_feature:
        raise ConfigMismatch("query feature must be supplied iff use_query_feature is set")
    x = Tensor(_pose_input(rot, trans, params.trans_scale))
    if q is not None:
        q = q if q.ndim == 2 else gt.reshape(q, (1, -1))
        x = gt.concat([x, q], axis=1)
    if not params.anchor_identity:
        return _head(nn.mlp(params.mlp, x), params)
    # subtract the net's output at the identity pose so that no motion means no latent change
    n = x.shape[0]
    ident = np.broadcast_to(_IDENTITY_POSE, (n, 9))
    x_id = Tensor(ident.copy()) if q is None else gt.concat([Tensor(ident.copy()), q], axis=1)
    both = nn.mlp(params.mlp, gt.concat([x, x_id], axis=0))
    return _head(gt.sub(both[:n], both[n:]), params)


def tfnet_from_poses(poses: list, params: TfNetParams, q: Tensor | None = None) -> LatentTransform:
    feats = np.stack([pose_features(p, 1.0) for p in poses])
    return tfnet(feats[:, :6], feats[:, 6:], params, q)


def _head(out: Tensor, params: TfNetParams) -> LatentTransform:
    n = out.shape[0]
    nb = params.num_block_weights
    delta = gt.reshape(out[:, :nb], (n, params.h, params.hd, params.hd))
    offset = out[:, nb:]
    eye = Tensor(np.broadcast_to(np.eye(params.hd), (n, params.h, params.hd, params.hd)).copy())
    return LatentTransform(gt.add(delta, eye), offset, delta)


def apply_lmm(q: Tensor, lt: LatentTransform, params: TfNetParams) -> Tensor:
    """``q + W_out @ ((blockdiag(K) - I) @ (W_in @ q) + offset)`` for each of N queries.

    While ``W_out @ W_in = I`` (as at init, for k >= d) this equals
    ``W_out @ (blockdiag(K) @ (W_in @ q) + offset)``.
    """
    single = q.ndim == 1
    q2 = gt.reshape(q, (1, -1)) if single else q
    n, d = q2.shape
    if d != params.d_model or lt.offset.shape != (n, params.k):
        raise gt.ShapeMismatch(f"apply_lmm: queries {q2.shape} vs transform offset {lt.offset.shape}")
    x = gt.matmul(q2, gt.transpose(params.w_in))  # (n, k)
    xb = gt.reshape(x, (n * params.h, params.hd, 1))
    delta = lt.delta
    if delta is None:
        delta = gt.sub(lt.blocks, Tensor(np.broadcast_to(np.eye(params.hd), lt.blocks.shape).copy()))
    kb = gt.reshape(delta, (n * params.h, params.hd, params.hd))
    # residual form: only the deviation of K from the identity (and the offset) is mapped back
    y = gt.add(gt.reshape(gt.matmul(kb, xb), (n, params.k)), lt.offset)
    out = gt.add(q2, gt.matmul(y, gt.transpose(params.w_out)))
    return gt.reshape(out, (d,)) if single else out


def dense_matrix(lt: LatentTransform, i: int = 0) -> np.ndarray:
    """Embed sample ``i``'s blocks into a dense (k, k) block-diagonal matrix."""
    blocks = lt.blocks.data[i]
    h, hd, _ = blocks.shape
    mat = np.zeros((h * hd, h * hd))
    for j in range(h):
        mat[j * hd:(j + 1) * hd, j * hd:(j + 1) * hd] = blocks[j]
    return mat


def _as_list(t, n: int) -> list:
    if isinstance(t, SE3Transform):
        return [t] * n
    return list(t)


def propagate_latent(q: Tensor, t_obj, t_ego, cfg: LmmConfig, params: LmmParams) -> Tensor:
    """Carry query latents across one frame.

    ``t_obj``/``t_ego`` are one ``SE3Transform`` or one per query row.
    """
    if not cfg.enabled:
        return q
    single = q.ndim == 1
    q2 = gt.reshape(q, (1, -1)) if single else q
    n = q2.shape[0]
    if n == 0:
        return q
    objs, egos = _as_list(t_obj, n), _as_list(t_ego, n)
    feat = q2 if cfg.use_query_feature else None
    if cfg.apply_mode == "merged":
        merged = [compose(e, o) for o, e in zip(objs, egos)]
        out = apply_lmm(q2, tfnet_from_poses(merged, params.obj, feat), params.obj)
    else:
        mid = apply_lmm(q2, tfnet_from_poses(objs, params.obj, feat), params.obj)
        feat = mid if cfg.use_query_feature else None
        ego_net = params.for_ego()
        out = apply_lmm(mid, tfnet_from_poses(egos, ego_net, feat), ego_net)
    return gt.reshape(out, (q2.shape[1],)) if single else out


# -- pretraining ---------------------------------------------------------------

@dataclass
class LatentDataset:
    """Triples (q_t, object/ego motion, q_{t+1}) stacked row-wise."""

    q0: np.ndarray
    t_obj: list
    t_ego: list
    q1: np.ndarray

    def __len__(self):
        return len(self.q0)

    def subset(self, idx) -> "LatentDataset":
        idx = np.asarray(idx)
        return LatentDataset(self.q0[idx], [self.t_obj[i] for i in idx], [self.t_ego[i] for i in idx], self.q1[idx])


def latent_mse(dataset: LatentDataset, cfg: LmmConfig, params: LmmParams) -> float:
    with gt.no_grad():
        pred = propagate_latent(Tensor(dataset.q0), dataset.t_obj, dataset.t_ego, cfg, params)
    return float(np.mean((pred.data - dataset.q1) ** 2))


def pretrain_lmm(dataset: LatentDataset, params: LmmParams, cfg: LmmConfig, steps: int = 2000,
                 lr: float = 1e-3, batch: int = 64, seed: int = 0, weight_decay: float = 0.0,
                 eval_every: int = 0) -> tuple[LmmParams, dict]:
    """Fit the latent motion model to next-frame latents by mean squared error.

    Returns the (in-place updated) params and a history dict with per-step
    minibatch losses and full-dataset MSE at start and end.
    """
    if len(dataset) == 0:
        raise EmptyDataset("pretraining needs at least one (q_t, pose, q_t+1) triple")
    rng = np.random.default_rng(seed)
    flat = nn.flatten(params.tree())
    opt = AdamW(flat, lr=lr, weight_decay=weight_decay,
                no_decay=[k for k in flat if k.endswith("w_in") or k.endswith("w_out")])
    history = {"initial_mse": latent_mse(dataset, cfg, params), "loss": [], "eval": []}
    n = len(dataset)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch, n), replace=False) if n > batch else np.arange(n)
        sub = dataset.subset(idx)
        pred = propagate_latent(Tensor(sub.q0), sub.t_obj, sub.t_ego, cfg, params)
        diff = gt.sub(pred, Tensor(sub.q1))
        loss = gt.mean(gt.square(diff))
        opt.zero_grad()
        gt.backward(loss)
        opt.step(cosine_lr(step, steps, lr))
        history["loss"].append(float(loss.data))
        if eval_every and (step + 1) % eval_every == 0:
            history["eval"].append((step + 1, latent_mse(dataset, cfg, params)))
    history["final_mse"] = latent_mse(dataset, cfg, params)
    return params, history
