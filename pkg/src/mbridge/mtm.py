"""Vision-to-text transition: pool region features into one global vector,
project it through two affine layers with a ReLU, and score the result
against the frozen text-encoder code with a selectable modality loss.

The projector output feeds the caption decoder as its step-zero input;
the modality loss is the auxiliary term that pulls the projected vector
toward the text embedding space. The text-side target is always treated
as a constant: no gradient flows back into the pre-trained encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Parameter, Tensor

MODALITY_LOSSES = ("mse", "mae", "cos", "kld", "mmd")


@dataclass
class MtmModel:
    """Two-layer projector u_g' = relu(W2 (W1 v_g + b1) + b2).

    Shapes: w1 is (d_e, d_v), b1 (d_e,), w2 (d_e, d_e), b2 (d_e,).
    The single activation sits at the output; the inner layer is affine.
    """
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def d_v(self) -> int:
        return self.w1.shape[1]

    @property
    def d_e(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def init_mtm(d_v: int, d_e: int, rng: np.random.Generator,
             init_scale: float = 0.08) -> MtmModel:
    u = lambda *s: rng.uniform(-init_scale, init_scale, size=s)
    return MtmModel(
        w1=Parameter("mtm.W1", u(d_e, d_v)),
        b1=Parameter("mtm.b1", u(d_e)),
        w2=Parameter("mtm.W2", u(d_e, d_e)),
        b2=Parameter("mtm.b2", u(d_e)),
    )


def pool_regions(regions: np.ndarray) -> np.ndarray:
    """Mean over the K region rows of a (K, d_v) array."""
    v = np.asarray(regions, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise ValueError(f"pool_regions: need at least one region row, got shape {v.shape}")
    return v.mean(axis=0)


def pool_regions_batch(regions: np.ndarray, region_mask: np.ndarray) -> np.ndarray:
    """Masked mean over padded region stacks.

    regions: (B, K_max, d_v); region_mask: (B, K_max) with 1 for real rows.
    """
    v = np.asarray(regions, dtype=np.float64)
    m = np.asarray(region_mask, dtype=np.float64)
    counts = m.sum(axis=1)
    if np.any(counts < 1):
        raise ValueError("pool_regions_batch: every sample needs at least one region")
    return np.einsum("bkd,bk->bd", v, m) / counts[:, None]


def project(model: MtmModel, v_g) -> Tensor:
    """Apply the projector to one vector (d_v,) or a batch (B, d_v).

    Output shape mirrors the input; entries are nonnegative by the ReLU.
    """
    t = nc.constant(v_g)
    single = t.ndim == 1
    if t.ndim not in (1, 2) or t.shape[-1] != model.d_v:
        raise DimensionError(
            f"project: input shape {t.shape} incompatible with d_v={model.d_v}")
    rows = nc.reshape(t, (1, model.d_v)) if single else t
    hid = nc.add_bias(nc.matmul(rows, nc.transpose(model.w1.tensor())), model.b1.tensor())
    out = nc.relu(nc.add_bias(nc.matmul(hid, nc.transpose(model.w2.tensor())), model.b2.tensor()))
    return nc.reshape(out, (model.d_e,)) if single else out


def median_heuristic_gamma(x: np.ndarray, y: np.ndarray) -> float:
    """RBF bandwidth from the pooled batch: gamma = 1 / (2 * median of
    positive squared pairwise distances). Falls back to 1.0 when every
    pair coincides."""
    z = np.concatenate([np.asarray(x, dtype=np.float64),
                        np.asarray(y, dtype=np.float64)], axis=0)
    sq = np.square(z).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * z @ z.T
    iu = np.triu_indices(z.shape[0], k=1)
    pos = d2[iu]
    pos = pos[pos > 0.0]
    if pos.size == 0:
        return 1.0
    return 1.0 / (2.0 * float(np.median(pos)))


def modality_loss(kind: str, pred, target, gamma: float | None = None) -> Tensor:
    """Scalar distance between the projected vector(s) and the frozen
    text code(s).

    pred may be a graph tensor; target is constant data of the same
    shape. Inputs are one vector (d,) or a batch (B, d). Per-sample
    variants average over the batch. mmd compares the rows as two sets,
    so it needs 2-d inputs (a single-row batch degenerates to a kernel
    distance between the two vectors); its bandwidth comes from
    ``median_heuristic_gamma`` unless given, and is treated as a
    constant in the backward pass.
    """
    if kind not in MODALITY_LOSSES:
        raise ValueError(f"unknown modality loss {kind!r}, expected one of {MODALITY_LOSSES}")
    p = nc.constant(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"modality_loss: shapes {p.shape} and {t.shape} differ")

    if kind == "mse":
        d = nc.sub(p, Tensor(t))
        return nc.mean_all(nc.mul(d, d))
    if kind == "mae":
        d = nc.sub(p, Tensor(t))
        return nc.mean_all(nc.abs_val(d))
    if kind == "cos":
        return nc.cosine_rows_loss(p, t)
    if kind == "kld":
        return nc.kld_softmax_rows_loss(p, t)

    if p.ndim != 2:
        raise ValueError("mmd needs 2-d batches of row vectors")
    if gamma is None:
        gamma = median_heuristic_gamma(p.data, t)
    k_pp = nc.rbf_kernel_mean(p, p, gamma)
    k_tt = nc.rbf_kernel_mean(Tensor(t), Tensor(t), gamma)
    k_pt = nc.rbf_kernel_mean(p, Tensor(t), gamma)
    return nc.sub(nc.add(k_pp, k_tt), nc.scale(k_pt, 2.0))
