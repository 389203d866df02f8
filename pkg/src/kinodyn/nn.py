"""Small numpy network layers with hand-written reverse-mode gradients.

Activations are channels-last (N, H, W, C). Every layer caches what its
backward pass needs during ``forward``; ``backward`` takes dL/dy, fills
``grads`` and returns dL/dx.
"""

from __future__ import annotations

import numpy as np


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def he_init(rng, fan_in, shape, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float32, bias=True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["W"] = he_init(rng, n_in, (n_in, n_out), dtype)
        if bias:
            self.params["b"] = np.zeros(n_out, dtype)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        y = x @ self.params["W"]
        if "b" in self.params:
            y += self.params["b"]
        return y

    def backward(self, dy):
        self.grads["W"] += self._x.T @ dy
        if "b" in self.params:
            self.grads["b"] += dy.sum(0)
        return dy @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


def conv_out(n, k=3, stride=2, pad=1):
    return (n + 2 * pad - k) // stride + 1


class Conv2D(Layer):
    """k x k convolution as an im2col matmul built from k*k strided slices.

    Weights are stored as (k, k, C_in, C_out).
    """

    def __init__(self, c_in, c_out, k=3, stride=2, pad=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.pad = k, stride, pad
        self.params["W"] = he_init(rng, k * k * c_in, (k, k, c_in, c_out), dtype)
        self.params["b"] = np.zeros(c_out, dtype)
        self.zero_grad()

    def _slices(self, ho, wo):
        s = self.stride
        for di in range(self.k):
            for dj in range(self.k):
                yield di, dj, (slice(None), slice(di, di + s * (ho - 1) + 1, s),
                               slice(dj, dj + s * (wo - 1) + 1, s))

    def forward(self, x):
        n, h, w, c = x.shape
        p = self.pad
        ho, wo = conv_out(h, self.k, self.stride, p), conv_out(w, self.k, self.stride, p)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = np.empty((n, ho, wo, self.k * self.k, c), x.dtype)
        for t, (_, _, sl) in enumerate(self._slices(ho, wo)):
            cols[:, :, :, t, :] = xp[sl]
        cols = cols.reshape(n * ho * wo, -1)
        self._cache = (cols, x.shape, xp.shape, ho, wo)
        W = self.params["W"].reshape(-1, self.params["W"].shape[-1])
        return (cols @ W + self.params["b"]).reshape(n, ho, wo, -1)

    def backward(self, dy):
        cols, xshape, pshape, ho, wo = self._cache
        n, _, _, c = xshape
        co = dy.shape[-1]
        d = dy.reshape(-1, co)
        W = self.params["W"].reshape(-1, co)
        self.grads["W"] += (cols.T @ d).reshape(self.params["W"].shape)
        self.grads["b"] += d.sum(0)
        dcols = (d @ W.T).reshape(n, ho, wo, self.k * self.k, c)
        dxp = np.zeros(pshape, dy.dtype)
        for t, (_, _, sl) in enumerate(self._slices(ho, wo)):
            dxp[sl] += dcols[:, :, :, t, :]
        p = self.pad
        return dxp[:, p:p + xshape[1], p:p + xshape[2], :] if p else dxp


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self):
        """``(name, layer, key)`` for every parameter, in a stable order."""
        out = []
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                out.append((f"{i}.{k}", layer, k))
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype):
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            layer.zero_grad()
        return self


class Adam:
    def __init__(self, net: Sequential, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.net, self.lr, self.b1, self.b2, self.eps = net, lr, b1, b2, eps
        self.t = 0
        self.m = {n: np.zeros_like(l.params[k]) for n, l, k in net.named_params()}
        self.v = {n: np.zeros_like(l.params[k]) for n, l, k in net.named_params()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n, layer, k in self.net.named_params():
            g = layer.grads[k]
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            layer.params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(g.dtype)
