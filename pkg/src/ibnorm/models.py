"""Desk-scale models with pluggable normalization at every site.

Both models expose the post-normalization representations alongside the
logits so the information probe can read the layerwise chain T_0..T_L.
The transformer is pre-norm (norm before attention and before the MLP) with
a final norm, LLaMA-style; attention uses per-head projection blocks whose
output projections are summed, which is equivalent to concatenation followed
by a joint output matrix.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .layers import NormSpec, build_norm


@dataclass
class ModelSpec:
    topology: str                      # "mlp" | "tiny_transformer"
    norm: NormSpec
    task: str                          # "synthetic_classification" | "char_lm"
    layer_widths: tuple = (128, 128, 128)
    n_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    context: int = 64
    mlp_ratio: int = 4
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.topology not in ("mlp", "tiny_transformer"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.topology == "tiny_transformer" and self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


def _linear_init(rng, fan_in, fan_out, std=None):
    scale = std if std is not None else 1.0 / np.sqrt(fan_in)
    return Tensor(rng.standard_normal((fan_in, fan_out)) * scale,
                  requires_grad=True)


class ModelBase:
    def __init__(self):
        self._params = {}
        self.norm_layers = []

    def _register(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def _register_norm(self, name, layer):
        self.norm_layers.append(layer)
        for pname, p in layer.parameters().items():
            self._params[f"{name}.{pname}"] = p
        return layer

    def parameters(self):
        """Name -> Tensor, iterated in sorted-name order by consumers."""
        return dict(self._params)

    def norm_parameter_names(self):
        return {n for n in self._params if ".gamma" in n or ".beta" in n}

    def state_arrays(self):
        out = {}
        for i, layer in enumerate(self.norm_layers):
            for k, v in layer.state_arrays().items():
                out[f"norms.{i}.{k}"] = v
        return out

    def load_state_arrays(self, arrays):
        for i, layer in enumerate(self.norm_layers):
            keys = layer.state_arrays().keys()
            if keys:
                layer.load_state({k: arrays[f"norms.{i}.{k}"] for k in keys})

    def freeze_except_norm(self):
        norm_names = self.norm_parameter_names()
        for name, p in self._params.items():
            p.requires_grad = name in norm_names
        return self

    def unfreeze_all(self):
        for p in self._params.values():
            p.requires_grad = True
        return self


class MLPModel(ModelBase):
    """widths[i]-unit hidden layers, each linear -> norm -> relu."""

    def __init__(self, spec, input_dim, n_classes, rng):
        super().__init__()
        self.spec = spec
        self.input_dim = input_dim
        self.n_classes = n_classes
        widths = list(spec.layer_widths)
        prev = input_dim
        self._hidden = []
        for i, w in enumerate(widths):
            wt = self._register(f"layers.{i}.w", _linear_init(rng, prev, w))
            bt = self._register(f"layers.{i}.b",
                                Tensor(np.zeros(w), requires_grad=True))
            norm = self._register_norm(f"norms.{i}", build_norm(spec.norm, w))
            self._hidden.append((wt, bt, norm))
            prev = w
        self._head_w = self._register("head.w", _linear_init(rng, prev, n_classes))
        self._head_b = self._register("head.b",
                                      Tensor(np.zeros(n_classes), requires_grad=True))

    def forward(self, x, train=True, rng=None):
        """x: (B, input_dim) array or Tensor -> (logits, [T_1..T_L])."""
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        reps = []
        for wt, bt, norm in self._hidden:
            z = ad.matmul(h, wt)
            z = ad.add(z, ad.broadcast(bt, z.shape))
            n = norm.forward(z, train=train, rng=rng)
            reps.append(n)
            h = ad.relu(n)
        logits = ad.add(ad.matmul(h, self._head_w),
                        ad.broadcast(self._head_b, (h.shape[0], self.n_classes)))
        return logits, reps


class TinyTransformer(ModelBase):
    """Pre-norm causal transformer over characters."""

    def __init__(self, spec, vocab_size, rng):
        super().__init__()
        self.spec = spec
        self.vocab_size = vocab_size
        d, h = spec.d_model, spec.n_heads
        self.head_dim = d // h
        t = spec.context

        self._tok = self._register("tok_emb",
                                   Tensor(rng.standard_normal((vocab_size, d)) * 0.02,
                                          requires_grad=True))
        self._pos = self._register("pos_emb",
                                   Tensor(rng.standard_normal((t, d)) * 0.02,
                                          requires_grad=True))
        self._blocks = []
        for b in range(spec.n_blocks):
            # per-head projections stacked as (heads, 1, in, out); the size-1
            # axis lets np.matmul broadcast over the batch dimension
            def head_stack(fan_in, fan_out):
                return Tensor(rng.standard_normal((h, 1, fan_in, fan_out)) * 0.02,
                              requires_grad=True)

            block = {
                "norm_attn": self._register_norm(f"norms.{2 * b}",
                                                 build_norm(spec.norm, d)),
                "wq": self._register(f"blocks.{b}.attn.wq",
                                     head_stack(d, self.head_dim)),
                "wk": self._register(f"blocks.{b}.attn.wk",
                                     head_stack(d, self.head_dim)),
                "wv": self._register(f"blocks.{b}.attn.wv",
                                     head_stack(d, self.head_dim)),
                "wo": self._register(f"blocks.{b}.attn.wo",
                                     head_stack(self.head_dim, d)),
                "w1": self._register(f"blocks.{b}.mlp.w1",
                                     _linear_init(rng, d, spec.mlp_ratio * d, std=0.02)),
                "b1": self._register(f"blocks.{b}.mlp.b1",
                                     Tensor(np.zeros(spec.mlp_ratio * d),
                                            requires_grad=True)),
                "w2": self._register(f"blocks.{b}.mlp.w2",
                                     _linear_init(rng, spec.mlp_ratio * d, d, std=0.02)),
                "b2": self._register(f"blocks.{b}.mlp.b2",
                                     Tensor(np.zeros(d), requires_grad=True)),
                "norm_mlp": self._register_norm(f"norms.{2 * b + 1}",
                                                build_norm(spec.norm, d)),
            }
            self._blocks.append(block)
        self._final_norm = self._register_norm(f"norms.{2 * spec.n_blocks}",
                                               build_norm(spec.norm, d))
        self._head_w = self._register("head.w", _linear_init(rng, d, vocab_size))
        self._head_b = self._register("head.b",
                                      Tensor(np.zeros(vocab_size), requires_grad=True))
        # causal masks (0 on allowed positions, large negative on the future)
        # are built per sequence length on demand
        self._mask_cache = {}
        self._scale = 1.0 / np.sqrt(self.head_dim)

    def _causal_mask(self, t):
        if t not in self._mask_cache:
            self._mask_cache[t] = Tensor(np.triu(np.full((t, t), -1e9), k=1))
        return self._mask_cache[t]

    def _attention(self, block, xn):
        b, t, _ = xn.shape
        h = self.spec.n_heads
        xh = ad.broadcast(xn, (h, b, t, self.spec.d_model))
        q = ad.matmul(xh, block["wq"])                   # (h, b, t, head_dim)
        k = ad.matmul(xh, block["wk"])
        v = ad.matmul(xh, block["wv"])
        mask = ad.broadcast(self._causal_mask(t), (h, b, t, t))
        scores = ad.add(ad.scale(ad.matmul(q, k, transpose_b=True), self._scale),
                        mask)
        ctx = ad.matmul(ad.softmax_axis(scores), v)
        out = ad.matmul(ctx, block["wo"])                # (h, b, t, d_model)
        return ad.sum_axis(out, axis=0)

    def embed(self, tokens):
        tokens = np.asarray(tokens)
        b, t = tokens.shape
        if t > self.spec.context:
            raise ContractError(f"sequence length {t} exceeds context "
                                f"{self.spec.context}")
        tok = ad.gather(self._tok, tokens)
        # positional table participates in gradients; slice via row gather
        pos_rows = ad.gather(self._pos, np.tile(np.arange(t), (b, 1)))
        return ad.add(tok, pos_rows)

    def forward(self, tokens, train=True, rng=None):
        """tokens: (B, T) ints -> (logits (B,T,V), [post-norm reps (B,T,d)])."""
        x = self.embed(tokens)
        reps = []
        for block in self._blocks:
            xn = block["norm_attn"].forward(x, train=train, rng=rng)
            reps.append(xn)
            x = ad.add(x, self._attention(block, xn))
            xn2 = block["norm_mlp"].forward(x, train=train, rng=rng)
            reps.append(xn2)
            h = ad.relu(ad.add(ad.matmul(xn2, block["w1"]),
                               ad.broadcast(block["b1"],
                                            xn2.shape[:-1] + (block["b1"].shape[0],))))
            m = ad.add(ad.matmul(h, block["w2"]),
                       ad.broadcast(block["b2"], x.shape))
            x = ad.add(x, m)
        xf = self._final_norm.forward(x, train=train, rng=rng)
        reps.append(xf)
        logits = ad.add(ad.matmul(xf, self._head_w),
                        ad.broadcast(self._head_b,
                                     xf.shape[:-1] + (self.vocab_size,)))
        return logits, reps


def cross_entropy(logits, targets):
    """Mean negative log-likelihood over all positions.

    logits: (..., C) Tensor; targets: int array matching the leading shape.
    Uses the log-sum-exp form: after subtracting the rowwise max (a local
    constant whose gradient contribution cancels), sum(exp) >= 1, so
    ln1p(sum - 1) evaluates ln(sum) stably.
    """
    targets = np.asarray(targets)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)

    row_max = logits.array.max(axis=-1, keepdims=True)
    z = ad.sub(logits, Tensor(np.broadcast_to(row_max, logits.shape).copy()))
    total = ad.sum_axis(ad.exp(z), axis=-1, keepdims=True)
    log_norm = ad.ln1p(ad.sub(total, ad.const_like(total, 1.0)))
    log_probs = ad.sub(z, ad.broadcast(log_norm, z.shape))
    picked = ad.sum_axis(ad.mul(log_probs, Tensor(onehot)), axis=-1)
    loss = picked
    while loss.ndim > 0:
        loss = ad.mean_axis(loss, axis=-1)
    return ad.scale(loss, -1.0)


def model_spec_to_dict(spec):
    from .layers import norm_spec_to_dict

    return {"topology": spec.topology, "norm": norm_spec_to_dict(spec.norm),
            "task": spec.task, "layer_widths": list(spec.layer_widths),
            "n_blocks": spec.n_blocks, "d_model": spec.d_model,
            "n_heads": spec.n_heads, "context": spec.context,
            "mlp_ratio": spec.mlp_ratio, "extra": dict(spec.extra)}


def model_spec_from_dict(d):
    from .layers import norm_spec_from_dict

    return ModelSpec(topology=d["topology"], norm=norm_spec_from_dict(d["norm"]),
                     task=d["task"], layer_widths=tuple(d.get("layer_widths", (128, 128, 128))),
                     n_blocks=d.get("n_blocks", 2), d_model=d.get("d_model", 64),
                     n_heads=d.get("n_heads", 4), context=d.get("context", 64),
                     mlp_ratio=d.get("mlp_ratio", 4), extra=d.get("extra", {}))


def build_model(model_spec, dataset, rng):
    from .data import CharLMData, ClassificationData

    if model_spec.topology == "mlp":
        if not isinstance(dataset, ClassificationData):
            raise ConfigError("mlp topology expects the classification task")
        return MLPModel(model_spec, dataset.dim, dataset.n_classes, rng)
    if not isinstance(dataset, CharLMData):
        raise ConfigError("tiny_transformer expects the char_lm task")
    return TinyTransformer(model_spec, dataset.vocab_size, rng)
