"""Dot-product attention shared by every toy attention layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ContractError


@dataclass
class AttentionWeights:
    """Projection matrices in ``[out, in]`` layout (``y = x @ W.T``).

    Any softmax temperature is folded into ``q``. ``o`` is optional; without it
    the layer output is the concatenated per-head ``A V``.
    """

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    o: torch.Tensor | None = None
    heads: int = 1


def attention_forward(h_in, context, weights: AttentionWeights):
    """Return ``(h_out, keys, probs)`` with ``probs = softmax(Q K^T)`` head-averaged.

    ``keys`` is the key matrix with heads concatenated along the feature axis.
    Numpy inputs give numpy outputs.
    """
    as_numpy = isinstance(h_in, np.ndarray)
    h_in = torch.as_tensor(h_in, dtype=torch.float64)
    context = torch.as_tensor(context, dtype=torch.float64)
    wq, wk, wv = (torch.as_tensor(w, dtype=torch.float64) for w in (weights.q, weights.k, weights.v))
    if h_in.ndim != 2 or context.ndim != 2:
        raise ContractError("attention inputs must be [positions, features] matrices")
    if wq.shape[1] != h_in.shape[1] or wk.shape[1] != context.shape[1] or wv.shape[1] != context.shape[1]:
        raise ContractError(
            f"projection shapes q{tuple(wq.shape)} k{tuple(wk.shape)} v{tuple(wv.shape)} do not match "
            f"inputs {tuple(h_in.shape)} / {tuple(context.shape)}"
        )
    heads = weights.heads
    if wq.shape[0] != wk.shape[0] or wq.shape[0] % heads:
        raise ContractError("query/key widths must agree and divide into heads")

    q = h_in @ wq.T
    k = context @ wk.T
    v = context @ wv.T
    p, n = q.shape[0], k.shape[0]
    qh = q.reshape(p, heads, -1).transpose(0, 1)
    kh = k.reshape(n, heads, -1).transpose(0, 1)
    vh = v.reshape(n, heads, -1).transpose(0, 1)
    probs = torch.softmax(qh @ kh.transpose(1, 2), dim=-1)
    out = (probs @ vh).transpose(0, 1).reshape(p, -1)
    if weights.o is not None:
        out = out @ torch.as_tensor(weights.o, dtype=torch.float64).T
    probs = probs.mean(dim=0)
    if as_numpy:
        return out.detach().numpy(), k.detach().numpy(), probs.detach().numpy()
    return out, k, probs
