"""Three-partition toy network: acoustic encoder, textual encoder with
local-to-global extractors, and decoder, with the T-Enc and decoder shared
between the translation tasks.

Forward paths:
  st      speech -> A-Enc -> (shrink) -> T-Enc(speech) -> decoder -> tgt
  asr/ctc speech -> A-Enc -> CTC head (A-Enc parameters only)
  asr/ce  speech -> A-Enc -> (shrink) -> T-Enc(speech) -> decoder -> src
  mt      src + noise -> embed -> T-Enc(text) -> decoder -> tgt
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import shrink as shrink_mod
from .autograd import Tensor, GroupKey, ParamGroup
from .data import SyntheticBatch, noise_inject

CHECKPOINT_MAGIC = b"STLAB-CKPT-v1\n"

TASKS = ("st", "asr", "mt")
ASR_VARIANTS = ("ctc", "ce", "ctc+ce")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    ffn_dim: int = 64
    a_enc_layers: int = 2
    t_enc_layers: int = 2
    dec_layers: int = 2
    l2g_base_kernel: int = 5   # kernel of T-Enc layer 0
    l2g_stride: int = 3        # kernel growth per layer
    dropout: float = 0.0
    frame_dim: int = 16
    vocab_size_src: int = 23   # full symbol table incl. blank/pad/bos
    vocab_size_tgt: int = 23
    ctc_classes: int = 21      # blank + content tokens
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.l2g_base_kernel % 2 != 1:
            raise ValueError("l2g_base_kernel must be odd")

    def l2g_kernel(self, layer: int) -> int:
        return self.l2g_base_kernel + self.l2g_stride * layer


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / d_model)
    out = np.zeros((length, d_model))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class Linear:
    def __init__(self, rng, d_in, d_out):
        scale = np.sqrt(2.0 / (d_in + d_out))
        self.w = Tensor(rng.normal(scale=scale, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return ag.matmul(x, self.w) + self.b

    @property
    def tensors(self):
        return [self.w, self.b]


class AffineNorm:
    """LayerNorm with learned gain/bias."""

    def __init__(self, d):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return ag.mul(ag.layer_norm(x), self.gain) + self.bias

    @property
    def tensors(self):
        return [self.gain, self.bias]


class MultiHeadAttention:
    def __init__(self, rng, d_model, n_heads):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)

    def _split(self, x):
        B, L, _ = x.shape
        return ag.transpose(ag.reshape(x, (B, L, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, q_in, kv_in, bias):
        """bias: ndarray broadcastable to [B, H, Lq, Lk]. Returns (out, weights)."""
        B, Lq, _ = q_in.shape
        q = self._split(self.wq(q_in))
        k = self._split(self.wk(kv_in))
        v = self._split(self.wv(kv_in))
        ctx, w = ag.scaled_dot_attention(q, k, v, bias=bias)
        merged = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, Lq, self.n_heads * self.d_head))
        return self.wo(merged), w

    @property
    def tensors(self):
        return self.wq.tensors + self.wk.tensors + self.wv.tensors + self.wo.tensors


class Ffn:
    def __init__(self, rng, d_model, d_hidden):
        self.w1 = Linear(rng, d_model, d_hidden)
        self.w2 = Linear(rng, d_hidden, d_model)

    def __call__(self, x):
        return self.w2(ag.relu(self.w1(x)))

    @property
    def tensors(self):
        return self.w1.tensors + self.w2.tensors


class EncoderLayer:
    """Pre-norm transformer encoder layer."""

    def __init__(self, rng, d_model, n_heads, ffn_dim):
        self.ln1 = AffineNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = AffineNorm(d_model)
        self.ffn = Ffn(rng, d_model, ffn_dim)

    def __call__(self, x, bias, drop=None):
        normed = self.ln1(x)
        h, w = self.attn(normed, normed, bias)
        a = x + _drop(h, drop)
        out = a + _drop(self.ffn(self.ln2(a)), drop)
        return out, a, w  # a is the attention sublayer output (post-residual)


class L2GExtractor:
    """x + PointwiseConv(DepthwiseConv(LayerNorm(x))) with a per-layer kernel."""

    def __init__(self, rng, d_model, kernel):
        self.kernel_size = kernel
        self.ln = AffineNorm(d_model)
        self.depthwise = Tensor(
            rng.normal(scale=1.0 / np.sqrt(kernel), size=(kernel, d_model)),
            requires_grad=True)
        self.pointwise = Linear(rng, d_model, d_model)

    def __call__(self, x, mask):
        h = ag.mul(self.ln(x), Tensor(mask[:, :, None].astype(np.float64)))
        h = ag.depthwise_conv1d(h, self.depthwise)
        return x + self.pointwise(h)

    @property
    def tensors(self):
        return self.ln.tensors + [self.depthwise] + self.pointwise.tensors


class TEncLayer:
    """L2G extractor followed by a transformer layer; both streams share it."""

    def __init__(self, rng, d_model, n_heads, ffn_dim, kernel):
        self.extractor = L2GExtractor(rng, d_model, kernel)
        self.transformer = EncoderLayer(rng, d_model, n_heads, ffn_dim)

    def __call__(self, x, mask, bias, drop=None, use_extractor=True):
        ext = self.extractor(x, mask) if use_extractor else x
        out, attn_out, w = self.transformer(ext, bias, drop)
        return out, ext, attn_out, w


class DecoderLayer:
    def __init__(self, rng, d_model, n_heads, ffn_dim):
        self.ln1 = AffineNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln2 = AffineNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.ln3 = AffineNorm(d_model)
        self.ffn = Ffn(rng, d_model, ffn_dim)

    def __call__(self, x, memory, self_bias, cross_bias, drop=None):
        normed = self.ln1(x)
        h, _ = self.self_attn(normed, normed, self_bias)
        x = x + _drop(h, drop)
        h, cw = self.cross_attn(self.ln2(x), memory, cross_bias)
        x = x + _drop(h, drop)
        return x + _drop(self.ffn(self.ln3(x)), drop), cw


@dataclass
class TaskOutputs:
    """Everything the losses and analysis need from one task forward."""
    logits: Tensor | None = None
    targets: np.ndarray | None = None
    ctc_log_probs: Tensor | None = None
    tenc_input: Tensor | None = None
    tenc_mask: np.ndarray | None = None
    extractor_outs: list = field(default_factory=list)
    attention_outs: list = field(default_factory=list)
    attention_weights: list = field(default_factory=list)
    length_ratio: float | None = None
    shrunk: list | None = None


def _drop(x, drop):
    if drop is None:
        return x
    p, rng = drop
    return ag.dropout(x, p, rng)


def _key_bias(valid_mask):
    """[B, Lk] bool -> additive bias [B, 1, 1, Lk]."""
    return np.where(valid_mask[:, None, None, :], 0.0, ag.MASK_BIAS)


def _causal_bias(L):
    return np.where(np.tril(np.ones((L, L), dtype=bool)), 0.0, ag.MASK_BIAS)[None, None, :, :]


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng((config.seed, 0x90DE1))
        d, h, f = config.d_model, config.n_heads, config.ffn_dim

        self.in_proj = Linear(rng, config.frame_dim, d)
        self.a_layers = [EncoderLayer(rng, d, h, f) for _ in range(config.a_enc_layers)]
        self.a_final_ln = AffineNorm(d)
        self.ctc_head = Linear(rng, d, config.ctc_classes)
        self.lbm = shrink_mod.LbmParams(rng, d, f)

        self.src_embed = Tensor(rng.normal(scale=0.1, size=(config.vocab_size_src, d)),
                                requires_grad=True)
        self.t_layers = [TEncLayer(rng, d, h, f, config.l2g_kernel(i))
                         for i in range(config.t_enc_layers)]
        self.t_final_ln = AffineNorm(d)

        self.tgt_embed = Tensor(rng.normal(scale=0.1, size=(config.vocab_size_tgt, d)),
                                requires_grad=True)
        self.dec_layers = [DecoderLayer(rng, d, h, f) for _ in range(config.dec_layers)]
        self.dec_final_ln = AffineNorm(d)
        self.out_proj = Linear(rng, d, config.vocab_size_tgt)

        self.param_groups = self._build_groups()
        self._check_coverage()
        self.dropout_rng = None   # set by the trainer for dropout > 0 runs
        self.use_l2g = True       # False bypasses the extractors (ablation)

    # -- parameter bookkeeping -------------------------------------------

    def _build_groups(self):
        groups = []

        def grp(partition, layer, kind, tensors):
            groups.append(ParamGroup(GroupKey(partition, layer, kind), list(tensors)))

        # layer -1 holds io plumbing, -2 the shrink/look-back parameters
        grp("A-Enc", -1, "OTHER",
            self.in_proj.tensors + self.ctc_head.tensors + self.a_final_ln.tensors)
        grp("A-Enc", -2, "OTHER", self.lbm.tensors)
        for i, layer in enumerate(self.a_layers):
            grp("A-Enc", i, "ATTEN", layer.attn.tensors)
            grp("A-Enc", i, "FFN", layer.ffn.tensors)
            grp("A-Enc", i, "OTHER", layer.ln1.tensors + layer.ln2.tensors)

        grp("T-Enc", -1, "OTHER", [self.src_embed] + self.t_final_ln.tensors)
        for i, layer in enumerate(self.t_layers):
            grp("T-Enc", i, "ATTEN", layer.transformer.attn.tensors)
            grp("T-Enc", i, "FFN", layer.transformer.ffn.tensors)
            grp("T-Enc", i, "OTHER",
                layer.transformer.ln1.tensors + layer.transformer.ln2.tensors
                + layer.extractor.tensors)

        grp("Decoder", -1, "OTHER",
            [self.tgt_embed] + self.dec_final_ln.tensors + self.out_proj.tensors)
        for i, layer in enumerate(self.dec_layers):
            grp("Decoder", i, "ATTEN", layer.self_attn.tensors)
            grp("Decoder", i, "FFN", layer.ffn.tensors)
            grp("Decoder", i, "OTHER",
                layer.ln1.tensors + layer.ln2.tensors + layer.ln3.tensors
                + layer.cross_attn.tensors)
        return groups

    def _check_coverage(self):
        seen = set()
        for g in self.param_groups:
            for t in g.tensors:
                if id(t) in seen:
                    raise RuntimeError(f"parameter assigned to two groups (in {g.key})")
                seen.add(id(t))

    def parameters(self):
        out = []
        for g in self.param_groups:
            out.extend(g.tensors)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- building blocks ---------------------------------------------------

    def _pos(self, L):
        return Tensor(sinusoidal_positions(L, self.config.d_model))

    def _drop_ctx(self):
        if self.dropout_rng is None or self.config.dropout <= 0.0:
            return None
        return (self.config.dropout, self.dropout_rng)

    def a_enc_forward(self, speech, speech_lens):
        """speech: [B, T, frame_dim] ndarray or Tensor. Returns (features,
        valid mask, per-layer attention weights)."""
        x = speech if isinstance(speech, Tensor) else Tensor(speech)
        B, T, _ = x.shape
        if T == 0:
            raise ValueError("a_enc_forward: empty time axis")
        mask = np.arange(T)[None, :] < np.asarray(speech_lens)[:, None]
        bias = _key_bias(mask)
        x = self.in_proj(x) + self._pos(T)
        weights = []
        drop = self._drop_ctx()
        for layer in self.a_layers:
            x, _, w = layer(x, bias, drop)
            weights.append(w)
        return self.a_final_ln(x), mask, weights

    def ctc_log_probs(self, features):
        return ag.log_softmax(self.ctc_head(features), axis=-1)

    def t_enc_forward(self, features, mask, add_positions=True):
        """Shared textual encoder. features: Tensor [B, L, d]; mask: bool [B, L].
        Returns (repr, extractor outs, attention sublayer outs, attention weights)."""
        x = features
        if add_positions:
            x = x + self._pos(features.shape[1])
        bias = _key_bias(mask)
        ext_outs, attn_outs, weights = [], [], []
        drop = self._drop_ctx()
        for layer in self.t_layers:
            x, ext, attn_out, w = layer(x, mask, bias, drop, use_extractor=self.use_l2g)
            ext_outs.append(ext)
            attn_outs.append(attn_out)
            weights.append(w)
        return self.t_final_ln(x), ext_outs, attn_outs, weights

    def embed_src(self, tokens, pad_id):
        """Clean source embeddings; pad rows are still looked up but masked
        downstream."""
        safe = np.where(np.asarray(tokens) == pad_id, 0, tokens)
        return ag.embedding(self.src_embed, safe)

    def decoder_forward(self, tgt_prefix, memory, memory_mask, pad_id):
        """Teacher-forced decoder logits. tgt_prefix: int [B, L] (starts with BOS)."""
        tgt_prefix = np.asarray(tgt_prefix)
        B, L = tgt_prefix.shape
        if L == 0:
            raise ValueError("decoder_forward: empty prefix")
        safe = np.where(tgt_prefix == pad_id, 0, tgt_prefix)
        x = ag.embedding(self.tgt_embed, safe) + self._pos(L)
        prefix_mask = tgt_prefix != pad_id
        self_bias = _causal_bias(L) + _key_bias(prefix_mask)
        cross_bias = _key_bias(memory_mask)
        drop = self._drop_ctx()
        for layer in self.dec_layers:
            x, _ = layer(x, memory, self_bias, cross_bias, drop)
        return self.out_proj(self.dec_final_ln(x))

    # -- speech-side encoding (shared by ST and the CE-ASR probe) -----------

    def encode_speech(self, batch: SyntheticBatch, use_shrink: bool, use_lbm: bool = True):
        """A-Enc, optional CTC-driven shrinking, then T-Enc on the speech stream.

        Returns (outputs, memory, memory_mask) where outputs carries the CTC
        log-probs, T-Enc intermediates and the measured length ratio.
        """
        feats, mask, _ = self.a_enc_forward(batch.speech, batch.speech_lens)
        ctc_lp = self.ctc_log_probs(feats)
        out = TaskOutputs(ctc_log_probs=ctc_lp)
        if use_shrink:
            fused, s_mask, shrunks, ratio = shrink_mod.shrink_batch(
                feats, ctc_lp, batch.speech_lens, self.lbm, use_lbm=use_lbm)
            out.tenc_input, out.tenc_mask = fused, s_mask
            out.length_ratio, out.shrunk = ratio, shrunks
        else:
            out.tenc_input, out.tenc_mask = feats, mask
            out.length_ratio = 1.0
        memory, ext, attn, w = self.t_enc_forward(out.tenc_input, out.tenc_mask)
        out.extractor_outs, out.attention_outs, out.attention_weights = ext, attn, w
        return out, memory, out.tenc_mask

    # -- task forwards -------------------------------------------------------

    def forward_task(self, batch: SyntheticBatch, task: str, *,
                     asr_variant: str = "ctc", use_shrink: bool = False,
                     use_lbm: bool = True, bos_id: int | None = None,
                     mt_noise_rng: np.random.Generator | None = None,
                     mt_noise_p: float = 0.2) -> TaskOutputs:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        pad = batch.pad_id
        if bos_id is None:
            bos_id = pad + 1

        if task == "st":
            out, memory, mem_mask = self.encode_speech(batch, use_shrink, use_lbm)
            prefix = self._teacher_prefix(batch.tgt_tokens, batch.tgt_lens, bos_id, pad)
            out.logits = self.decoder_forward(prefix, memory, mem_mask, pad)
            out.targets = batch.tgt_tokens
            return out

        if task == "asr":
            if asr_variant not in ASR_VARIANTS:
                raise ValueError(f"unknown asr_variant {asr_variant!r}")
            if asr_variant == "ctc":
                feats, _, _ = self.a_enc_forward(batch.speech, batch.speech_lens)
                return TaskOutputs(ctc_log_probs=self.ctc_log_probs(feats),
                                   targets=batch.src_tokens)
            out, memory, mem_mask = self.encode_speech(batch, use_shrink, use_lbm)
            prefix = self._teacher_prefix(batch.src_tokens, batch.src_lens, bos_id, pad)
            out.logits = self.decoder_forward(prefix, memory, mem_mask, pad)
            out.targets = batch.src_tokens
            if asr_variant == "ce":
                out.ctc_log_probs = None
            return out

        # mt: noisy text -> shared T-Enc -> decoder
        if mt_noise_rng is None:
            mt_noise_rng = np.random.default_rng(0)
        noisy, noisy_lens = [], []
        for b in range(batch.batch_size):
            toks = batch.src_tokens[b, : batch.src_lens[b]]
            n = noise_inject(toks, mt_noise_p, mt_noise_rng)
            noisy.append(n)
            noisy_lens.append(len(n))
        Ln = max(noisy_lens)
        noisy_tok = np.full((batch.batch_size, Ln), pad, dtype=np.int64)
        for b, n in enumerate(noisy):
            noisy_tok[b, : len(n)] = n
        mask = np.arange(Ln)[None, :] < np.asarray(noisy_lens)[:, None]
        emb = self.embed_src(noisy_tok, pad)
        out = TaskOutputs(tenc_input=emb, tenc_mask=mask)
        memory, ext, attn, w = self.t_enc_forward(emb, mask)
        out.extractor_outs, out.attention_outs, out.attention_weights = ext, attn, w
        prefix = self._teacher_prefix(batch.tgt_tokens, batch.tgt_lens, bos_id, pad)
        out.logits = self.decoder_forward(prefix, memory, mask, pad)
        out.targets = batch.tgt_tokens
        return out

    @staticmethod
    def _teacher_prefix(tokens, lens, bos_id, pad_id):
        B, L = tokens.shape
        prefix = np.full((B, L), pad_id, dtype=np.int64)
        prefix[:, 0] = bos_id
        prefix[:, 1:] = tokens[:, :-1]
        # positions past each length stay pad
        cols = np.arange(L)[None, :]
        return np.where(cols < np.asarray(lens)[:, None], prefix, pad_id)

    def greedy_decode(self, batch: SyntheticBatch, *, use_shrink: bool = False,
                      use_lbm: bool = True, bos_id: int | None = None) -> np.ndarray:
        """Greedy autoregressive ST decode for exactly tgt_lens steps."""
        pad = batch.pad_id
        if bos_id is None:
            bos_id = pad + 1
        _, memory, mem_mask = self.encode_speech(batch, use_shrink, use_lbm)
        memory = memory.detach()
        B = batch.batch_size
        L = int(batch.tgt_lens.max())
        prefix = np.full((B, L), pad, dtype=np.int64)
        prefix[:, 0] = bos_id
        out = np.full((B, L), pad, dtype=np.int64)
        for i in range(L):
            logits = self.decoder_forward(prefix[:, : i + 1], memory, mem_mask, pad)
            step = np.argmax(logits.data[:, i, :], axis=-1)
            out[:, i] = step
            if i + 1 < L:
                prefix[:, i + 1] = step
        cols = np.arange(L)[None, :]
        return np.where(cols < batch.tgt_lens[:, None], out, pad)

    # -- checkpointing ---------------------------------------------------------

    def state_buffers(self):
        return [t.data for g in self.param_groups for t in g.tensors]

    def load_state_buffers(self, buffers):
        tensors = [t for g in self.param_groups for t in g.tensors]
        if len(buffers) != len(tensors):
            raise ValueError("checkpoint parameter count mismatch")
        for t, b in zip(tensors, buffers):
            if t.data.shape != b.shape:
                raise ValueError(f"checkpoint shape mismatch: {t.data.shape} vs {b.shape}")
            t.data = b.astype(np.float64).copy()


def save_checkpoint(path, model: Model, extra_meta=None, extra_buffers=None):
    """Versioned binary: magic, JSON header, then raw float64 buffers in
    deterministic group order (extra buffers follow, sorted by name)."""
    extra_meta = extra_meta or {}
    extra_buffers = extra_buffers or {}
    buffers = model.state_buffers()
    extra_names = sorted(extra_buffers)
    header = {
        "model_config": asdict(model.config),
        "param_shapes": [list(b.shape) for b in buffers],
        "extra_buffers": {n: list(np.asarray(extra_buffers[n]).shape) for n in extra_names},
        "meta": extra_meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for b in buffers:
            fh.write(np.ascontiguousarray(b, dtype=np.float64).tobytes())
        for n in extra_names:
            fh.write(np.ascontiguousarray(extra_buffers[n], dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Returns (model, meta, extra_buffers)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        model = Model(ModelConfig(**header["model_config"]))
        buffers = []
        for shape in header["param_shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = np.frombuffer(fh.read(8 * n), dtype=np.float64).reshape(shape)
            buffers.append(buf)
        model.load_state_buffers(buffers)
        extra = {}
        for name, shape in header["extra_buffers"].items():
            n = int(np.prod(shape)) if shape else 1
            extra[name] = np.frombuffer(fh.read(8 * n), dtype=np.float64).reshape(shape).copy()
    return model, header["meta"], extra
