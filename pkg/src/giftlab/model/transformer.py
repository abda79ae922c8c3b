from __future__ import annotations

import math

import numpy as np

from ..exceptions import DomainError
from .base import PolicyModel

_GELU_C = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * u**2)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = np.sum(dy * xhat, axis=(0, 1))
    db = np.sum(dy, axis=(0, 1))
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


class MicroTransformer(PolicyModel):
    """Pre-norm decoder-only transformer with learned positions and GELU MLPs.

    All gradients are written out by hand; ``backward`` is exact reverse mode
    over the fixed architecture.
    """

    kind = "micro-transformer"

    def __init__(
        self,
        vocab_size: int,
        width: int = 32,
        n_heads: int = 2,
        n_layers: int = 2,
        context_length: int = 64,
        mlp_ratio: int = 4,
        params=None,
        seed: int = 0,
        init_scale: float = 0.08,
    ):
        if width % n_heads:
            raise DomainError(f"width {width} not divisible by head count {n_heads}")
        self.vocab_size = int(vocab_size)
        self.width = int(width)
        self.n_heads = int(n_heads)
        self.n_layers = int(n_layers)
        self._context_length = int(context_length)
        self.mlp_ratio = int(mlp_ratio)
        self.layout = self._layout()
        n = sum(int(np.prod(s)) for _, s in self.layout)
        if params is None:
            params = self._init_params(np.random.default_rng(seed), init_scale)
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != n:
            raise DomainError(f"expected {n} parameters for this architecture, got {params.size}")
        self.params = params.copy()

    @property
    def context_length(self) -> int:
        return self._context_length

    def _layout(self):
        d, V, h = self.width, self.vocab_size, self.mlp_ratio * self.width
        layout = [("wte", (V, d)), ("wpe", (self._context_length, d))]
        for i in range(self.n_layers):
            p = f"h{i}."
            layout += [
                (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
                (p + "wq", (d, d)), (p + "wk", (d, d)), (p + "wv", (d, d)), (p + "wo", (d, d)),
                (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
                (p + "w1", (d, h)), (p + "b1", (h,)), (p + "w2", (h, d)), (p + "b2", (d,)),
            ]
        layout += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, V)), ("b_out", (V,))]
        return layout

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = flat[off : off + n].reshape(shape)
            off += n
        return out

    def _init_params(self, rng, scale):
        n = sum(int(np.prod(s)) for _, s in self.layout)
        flat = np.zeros(n)
        v = self.views(flat)
        for name, shape in self.layout:
            short = name.split(".")[-1]
            if short.endswith("_g"):
                v[name][...] = 1.0
            elif short.startswith("b") or short.endswith("_b"):
                continue
            else:
                v[name][...] = rng.normal(0.0, scale, size=shape)
        for i in range(self.n_layers):
            # residual projections start small so a fresh model is near-uniform
            v[f"h{i}.wo"] *= 1.0 / math.sqrt(2 * self.n_layers)
            v[f"h{i}.w2"] *= 1.0 / math.sqrt(2 * self.n_layers)
        # float32-representable values keep checkpoint round trips exact
        return flat.astype(np.float32).astype(np.float64)

    def _forward(self, tokens):
        P = self.views(self.params)
        B, T = tokens.shape
        H, d = self.n_heads, self.width
        hd = d // H
        scale = 1.0 / math.sqrt(hd)
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)

        x = P["wte"][tokens] + P["wpe"][:T]
        layers = []
        for i in range(self.n_layers):
            p = f"h{i}."
            c = {"x_in": x}
            h, c["ln1"] = _layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])
            c["h"] = h
            q = (h @ P[p + "wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            k = (h @ P[p + "wk"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            v = (h @ P[p + "wv"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            s = np.where(mask, -np.inf, s)
            s = s - s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
            x = x + o @ P[p + "wo"]
            c.update(q=q, k=k, v=v, a=a, o=o, x_mid=x)
            h2, c["ln2"] = _layernorm(x, P[p + "ln2_g"], P[p + "ln2_b"])
            u = h2 @ P[p + "w1"] + P[p + "b1"]
            g, t = _gelu(u)
            x = x + g @ P[p + "w2"] + P[p + "b2"]
            c.update(h2=h2, u=u, g=g, t=t)
            layers.append(c)
        hidden = x
        hf, lnf = _layernorm(x, P["lnf_g"], P["lnf_b"])
        logits = hf @ P["w_out"] + P["b_out"]
        cache = {
            "tokens": tokens, "layers": layers, "hidden": hidden, "hf": hf, "lnf": lnf,
            "logits_shape": logits.shape,
        }
        return logits, cache

    def _backward(self, cache, dlogits):
        P = self.views(self.params)
        grad = np.zeros_like(self.params)
        G = self.views(grad)
        tokens = cache["tokens"]
        B, T = tokens.shape
        H, d = self.n_heads, self.width
        hd = d // H
        scale = 1.0 / math.sqrt(hd)

        hf = cache["hf"]
        G["w_out"][...] = hf.reshape(-1, d).T @ dlogits.reshape(-1, self.vocab_size)
        G["b_out"][...] = dlogits.sum(axis=(0, 1))
        dhf = dlogits @ P["w_out"].T
        dx, G["lnf_g"][...], G["lnf_b"][...] = _layernorm_backward(dhf, P["lnf_g"], cache["lnf"])

        for i in reversed(range(self.n_layers)):
            p = f"h{i}."
            c = cache["layers"][i]
            # MLP branch
            dg = dx @ P[p + "w2"].T
            G[p + "w2"][...] = c["g"].reshape(-1, c["g"].shape[-1]).T @ dx.reshape(-1, d)
            G[p + "b2"][...] = dx.sum(axis=(0, 1))
            du = dg * _gelu_grad(c["u"], c["t"])
            G[p + "w1"][...] = c["h2"].reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
            G[p + "b1"][...] = du.sum(axis=(0, 1))
            dh2 = du @ P[p + "w1"].T
            dxm, G[p + "ln2_g"][...], G[p + "ln2_b"][...] = _layernorm_backward(
                dh2, P[p + "ln2_g"], c["ln2"]
            )
            dx = dx + dxm
            # attention branch
            G[p + "wo"][...] = c["o"].reshape(-1, d).T @ dx.reshape(-1, d)
            do = (dx @ P[p + "wo"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
            a, q, k, v = c["a"], c["q"], c["k"], c["v"]
            da = do @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ do
            ds = a * (da - np.sum(da * a, axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q

            def merge(t):
                return t.transpose(0, 2, 1, 3).reshape(B, T, d)

            dq, dk, dv = merge(dq), merge(dk), merge(dv)
            h = c["h"].reshape(-1, d)
            G[p + "wq"][...] = h.T @ dq.reshape(-1, d)
            G[p + "wk"][...] = h.T @ dk.reshape(-1, d)
            G[p + "wv"][...] = h.T @ dv.reshape(-1, d)
            dh = dq @ P[p + "wq"].T + dk @ P[p + "wk"].T + dv @ P[p + "wv"].T
            dxa, G[p + "ln1_g"][...], G[p + "ln1_b"][...] = _layernorm_backward(
                dh, P[p + "ln1_g"], c["ln1"]
            )
            dx = dx + dxa

        np.add.at(G["wte"], tokens.ravel(), dx.reshape(-1, d))
        G["wpe"][:T] = dx.sum(axis=0)
        return grad

    def hidden_states(self, tokens) -> np.ndarray:
        """Residual stream after the last block, ``(time, width)`` for a 1-D input."""
        squeeze = np.ndim(tokens) == 1
        _, cache = self.forward(tokens)
        return cache["hidden"][0] if squeeze else cache["hidden"]

    def copy(self) -> "MicroTransformer":
        return MicroTransformer(
            self.vocab_size, self.width, self.n_heads, self.n_layers,
            self._context_length, self.mlp_ratio, params=self.params,
        )

    def architecture(self) -> dict:
        return {
            "kind": self.kind, "vocab_size": self.vocab_size, "width": self.width,
            "n_heads": self.n_heads, "n_layers": self.n_layers,
            "context_length": self._context_length, "mlp_ratio": self.mlp_ratio,
        }
