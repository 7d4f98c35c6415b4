"""CTC-driven length compression with the looking-back mechanism.

Greedy per-frame decoding gives runs of repeated tokens (blanks kept);
each run collapses to its highest-confidence frame, and a windowed
attention over the run's other frames recovers what the collapse would
discard:

    s_tilde_i = Softmax(R(s'_i) . R(A)^T) . A        (window A excludes j)
    s_fused_i = FFN(Norm(s'_i + s_tilde_i))          (no residual)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class CtcPath:
    tokens: np.ndarray        # [n] per-frame argmax ids (blank allowed)
    confidences: np.ndarray   # [n] max probability per frame

    def __post_init__(self):
        if len(self.tokens) != len(self.confidences):
            raise ValueError("tokens and confidences must have equal length")


@dataclass
class ShrunkSequence:
    unique_tokens: np.ndarray  # [m] run-length compression of the path
    origin_index: np.ndarray   # [m] representative frame index j per position
    seg_start: np.ndarray      # [m]
    seg_end: np.ndarray        # [m] inclusive
    boundary: np.ndarray       # [m] look-back boundary b per position

    @property
    def m(self):
        return len(self.unique_tokens)

    def decompress(self) -> np.ndarray:
        """Expand back to the per-frame token path via the segment extents."""
        out = np.empty(self.seg_end[-1] + 1, dtype=self.unique_tokens.dtype)
        for tok, lo, hi in zip(self.unique_tokens, self.seg_start, self.seg_end):
            out[lo:hi + 1] = tok
        return out


class LbmParams:
    """Learned pieces of the look-back step: the shared linear map R and the
    fusion FFN with its entry norm."""

    def __init__(self, rng, d_model, ffn_dim):
        scale = np.sqrt(1.0 / d_model)
        self.r_map = Tensor(rng.normal(scale=scale, size=(d_model, d_model)),
                            requires_grad=True)
        self.norm_gain = Tensor(np.ones(d_model), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(d_model), requires_grad=True)
        self.w1 = Tensor(rng.normal(scale=np.sqrt(2.0 / (d_model + ffn_dim)),
                                    size=(d_model, ffn_dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(ffn_dim), requires_grad=True)
        self.w2 = Tensor(rng.normal(scale=np.sqrt(2.0 / (d_model + ffn_dim)),
                                    size=(ffn_dim, d_model)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    @property
    def tensors(self):
        return [self.r_map, self.norm_gain, self.norm_bias,
                self.w1, self.b1, self.w2, self.b2]


def ctc_greedy_path(log_probs) -> CtcPath:
    """Per-frame argmax over log-probability rows; ties break toward the
    lower token id (np.argmax convention)."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    ids = np.argmax(lp, axis=-1)
    conf = np.exp(lp[np.arange(lp.shape[0]), ids])
    return CtcPath(ids, conf)


def merge_repeats(path: CtcPath) -> ShrunkSequence:
    """One position per maximal run of equal tokens; the representative is
    the highest-confidence frame in the run (ties leftmost). Blanks are kept."""
    toks = path.tokens
    n = len(toks)
    if n == 0:
        raise ValueError("cannot merge an empty path")
    boundaries = np.flatnonzero(np.concatenate(([True], toks[1:] != toks[:-1])))
    starts = boundaries
    ends = np.concatenate((boundaries[1:] - 1, [n - 1]))
    origin = np.array([s + int(np.argmax(path.confidences[s:e + 1]))
                       for s, e in zip(starts, ends)])
    b = np.maximum(origin - starts, ends - origin)
    return ShrunkSequence(toks[starts], origin, starts, ends, b)


def lbm_lookback(features: Tensor, shrunk: ShrunkSequence, lbm: LbmParams) -> Tensor:
    """Windowed look-back attention, vectorized over shrunk positions.

    features: [n, d]. For position i with representative j and boundary b,
    the search window is frames max(0, j-b)..min(j+b, n-1) excluding j; an
    empty window yields the zero vector.
    """
    n, d = features.shape
    j = shrunk.origin_index
    b = shrunk.boundary
    m = shrunk.m
    lo = np.maximum(0, j - b)
    hi = np.minimum(n - 1, j + b)
    width = int((hi - lo + 1).max()) if m else 0
    # window index grid, with the representative column masked out
    idx = lo[:, None] + np.arange(width)[None, :]
    valid = (idx <= hi[:, None]) & (idx != j[:, None])
    idx = np.minimum(idx, n - 1)

    s_prime = features[(j,)]                         # [m, d]
    window = features[(idx,)]                        # [m, w, d]
    rq = ag.matmul(s_prime, lbm.r_map)               # [m, d]
    ra = ag.matmul(window, lbm.r_map)                # [m, w, d]
    scores = ag.matmul(ag.reshape(rq, (m, 1, d)),
                       ag.transpose(ra, (0, 2, 1)))  # [m, 1, w]
    bias = np.where(valid, 0.0, ag.MASK_BIAS)[:, None, :]
    att = ag.softmax(ag.add(scores, Tensor(bias)), axis=-1)
    gathered = ag.reshape(ag.matmul(att, window), (m, d))
    nonempty = valid.any(axis=1).astype(np.float64)[:, None]
    return ag.mul(gathered, Tensor(nonempty))


def lbm_fuse(s_prime: Tensor, s_tilde: Tensor, lbm: LbmParams) -> Tensor:
    """FFN(Norm(s' + s_tilde)), literal form without a residual."""
    if s_prime.shape != s_tilde.shape:
        raise ag.ShapeError("lbm_fuse", s_prime.shape, s_tilde.shape)
    h = ag.mul(ag.layer_norm(s_prime + s_tilde), lbm.norm_gain) + lbm.norm_bias
    h = ag.relu(ag.matmul(h, lbm.w1) + lbm.b1)
    return ag.matmul(h, lbm.w2) + lbm.b2


def shrink_sequence(features: Tensor, log_probs, lbm: LbmParams,
                    use_lbm: bool = True):
    """Compress one sequence. features: [n, d]; log_probs: [n, V] rows.

    Returns (ShrunkSequence, fused features [m, d], length ratio m/n).
    """
    path = ctc_greedy_path(log_probs)
    shrunk = merge_repeats(path)
    s_prime = features[(shrunk.origin_index,)]
    if use_lbm:
        s_tilde = lbm_lookback(features, shrunk, lbm)
        fused = lbm_fuse(s_prime, s_tilde, lbm)
    else:
        fused = s_prime
    return shrunk, fused, shrunk.m / features.shape[0]


def shrink_batch(features: Tensor, log_probs: Tensor, lens, lbm: LbmParams,
                 use_lbm: bool = True):
    """Per-item shrinking over a padded batch.

    features: [B, T, d]; log_probs: [B, T, V]; lens: valid frames per item.
    Returns (padded fused [B, m_max, d], mask [B, m_max], shrunk list, mean ratio).
    """
    B, _, d = features.shape
    lens = np.asarray(lens)
    shrunks, fused_items, ratios = [], [], []
    for b in range(B):
        n = int(lens[b])
        shrunk, fused, ratio = shrink_sequence(
            features[b][(slice(0, n),)], log_probs[b][(slice(0, n),)], lbm, use_lbm)
        shrunks.append(shrunk)
        fused_items.append(fused)
        ratios.append(ratio)
    m_max = max(f.shape[0] for f in fused_items)
    padded = []
    for f in fused_items:
        if f.shape[0] < m_max:
            f = ag.concat([f, Tensor(np.zeros((m_max - f.shape[0], d)))], axis=0)
        padded.append(f)
    out = ag.stack(padded, axis=0)
    mask = np.arange(m_max)[None, :] < np.array([s.m for s in shrunks])[:, None]
    return out, mask, shrunks, float(np.mean(ratios))
