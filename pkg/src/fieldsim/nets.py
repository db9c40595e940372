"""MLP heads, the actor hypernetwork, and the convolutional RGB decoder.

Parameters live as plain numpy arrays owned by the module objects; during
training a binding dict (name -> tape Tensor) shadows them so the same
forward code serves both tape-tracked and constant evaluation. Optimizers
must update the arrays in place to keep the owning objects current.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Mlp:
    """Dense layers with a fixed activation between them.

    activation: "relu" or "softplus" on hidden layers; `final` optionally
    applies "sigmoid" after the last layer.
    """

    def __init__(self, name: str, dims: list[int], rng: np.random.Generator,
                 activation: str = "relu", final: str | None = None):
        self.name = name
        self.dims = list(dims)
        self.activation = activation
        self.final = final
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"{self.name}.w{i}"] = self.weights[i]
            out[f"{self.name}.b{i}"] = self.biases[i]
        return out

    def zero_final_layer(self) -> "Mlp":
        self.weights[-1][:] = 0.0
        self.biases[-1][:] = 0.0
        return self

    def forward(self, x, p: dict | None = None):
        p = p or {}
        act = ad.relu if self.activation == "relu" else ad.softplus
        h = x
        for i in range(self.n_layers):
            w = p.get(f"{self.name}.w{i}", self.weights[i])
            b = p.get(f"{self.name}.b{i}", self.biases[i])
            h = ad.add_row(ad.matmul(h, ad.as_tensor(w)), ad.as_tensor(b))
            if i < self.n_layers - 1:
                h = act(h)
        if self.final == "sigmoid":
            h = ad.sigmoid(h)
        return h


def sphere_init_(mlp: Mlp, rng: np.random.Generator, radius: float = 0.5,
                 coord_dims: int = 3) -> Mlp:
    """Re-initialize an SDF head so its first output approximates |x| - radius.

    Assumes the last coord_dims inputs of the first layer are the (unit-scale)
    query position. Hidden weights get the usual mean-zero init; the final
    row of the output layer gets a positive constant weight pattern and a
    -radius bias, giving a centered sphere: negative inside, positive out.
    """
    for i in range(mlp.n_layers - 1):
        n_in, n_out = mlp.weights[i].shape
        mlp.weights[i] = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(n_out),
                                    size=(n_in, n_out))
        mlp.biases[i][:] = 0.0
        if i == 0:
            # damp the (near-zero) grid features so the position term leads
            mlp.weights[i][:-coord_dims, :] *= 1e-2
    n_in, n_out = mlp.weights[-1].shape
    mlp.weights[-1] = rng.normal(0.0, 1e-4, size=(n_in, n_out))
    mlp.weights[-1][:, 0] = rng.normal(np.sqrt(np.pi) / np.sqrt(n_in), 1e-4,
                                       size=n_in)
    mlp.biases[-1][:] = 0.0
    mlp.biases[-1][0] = -radius
    return mlp


class FieldHead:
    """SDF + feature-descriptor head shared by one class of fields.

    geometry_net: (grid features ++ unit-scale position) -> (s, hidden);
    feature_net: (hidden ++ view direction) -> N_f descriptor. The scalar s
    is in the normalized coordinate unit; callers multiply by their domain
    scale to get meters.
    """

    def __init__(self, name: str, feat_in: int, rng: np.random.Generator,
                 hidden: int = 32, geo_hidden_out: int = 15, n_f: int = 8):
        if n_f < 3:
            raise ValueError("feature descriptor must have at least 3 channels")
        self.name = name
        self.n_f = n_f
        self.geo_hidden_out = geo_hidden_out
        self.geometry_net = Mlp(f"{name}.geo", [feat_in + 3, hidden, hidden,
                                                1 + geo_hidden_out], rng)
        sphere_init_(self.geometry_net, rng)
        self.feature_net = Mlp(f"{name}.feat", [geo_hidden_out + 3, hidden, n_f],
                               rng)

    def params(self) -> dict[str, np.ndarray]:
        return {**self.geometry_net.params(), **self.feature_net.params()}

    def geometry(self, feats, xn, p=None):
        """(s, hidden) from grid features and unit-scale positions."""
        x_in = ad.concat([feats, ad.as_tensor(xn)], axis=1)
        out = self.geometry_net.forward(x_in, p)
        s = ad.slice_(out, (slice(None), slice(0, 1)))
        h = ad.slice_(out, (slice(None), slice(1, None)))
        return s, h

    def descriptor(self, hidden, dirs, p=None):
        d_in = ad.concat([hidden, ad.as_tensor(dirs)], axis=1)
        return self.feature_net.forward(d_in, p)


class HyperNet:
    """Latent code z -> all actor grid tables, with a zero-initialized head.

    Deterministic by construction: equal z gives identical tables, and any z
    maps to all-zero tables right after init.
    """

    def __init__(self, name: str, z_dim: int, levels: int, table_size: int,
                 feature_dim: int, rng: np.random.Generator,
                 hidden: int = 16):
        self.name = name
        self.z_dim = z_dim
        self.levels = levels
        self.table_size = table_size
        self.feature_dim = feature_dim
        out = levels * table_size * feature_dim
        self.net = Mlp(f"{name}.net", [z_dim, hidden, out], rng).zero_final_layer()

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()

    def grid_tables(self, z, p=None):
        """Per-level table tensors (T, F) regressed from one latent code."""
        z = ad.as_tensor(z)
        if z.value.shape != (self.z_dim,):
            raise ValueError(
                f"latent dim mismatch: got {z.value.shape}, want ({self.z_dim},)")
        flat = self.net.forward(ad.reshape(z, (1, self.z_dim)), p)
        tables = []
        per = self.table_size * self.feature_dim
        for l in range(self.levels):
            t = ad.slice_(flat, (slice(0, 1), slice(l * per, (l + 1) * per)))
            tables.append(ad.reshape(t, (self.table_size, self.feature_dim)))
        return tables


class RgbDecoder:
    """feature map -> RGB: conv3x3, softplus, [2x nearest upsample], conv3x3, sigmoid."""

    def __init__(self, name: str, n_f: int, rng: np.random.Generator,
                 hidden: int = 16, upsample: int = 2):
        if upsample not in (1, 2):
            raise ValueError("upsample factor must be 1 or 2")
        self.name = name
        self.upsample = upsample
        self.w0 = rng.normal(0.0, np.sqrt(2.0 / (n_f * 9)), size=(hidden, n_f, 3, 3))
        self.b0 = np.zeros(hidden)
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / (hidden * 9)), size=(3, hidden, 3, 3))
        self.b1 = np.zeros(3)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.w0": self.w0, f"{self.name}.b0": self.b0,
                f"{self.name}.w1": self.w1, f"{self.name}.b1": self.b1}

    def forward(self, fmap, p=None):
        """fmap (N_f, H_f, W_f) -> image tensor (3, k*H_f, k*W_f) in (0,1)."""
        p = p or {}
        h = ad.conv2d(fmap,
                      ad.as_tensor(p.get(f"{self.name}.w0", self.w0)),
                      ad.as_tensor(p.get(f"{self.name}.b0", self.b0)))
        h = ad.softplus(h)
        if self.upsample == 2:
            h = ad.upsample_nearest(h)
        h = ad.conv2d(h,
                      ad.as_tensor(p.get(f"{self.name}.w1", self.w1)),
                      ad.as_tensor(p.get(f"{self.name}.b1", self.b1)))
        return ad.sigmoid(h)


class IntensityNet:
    """Per-ray LiDAR intensity from the rendered descriptor, bounded to (0,1)."""

    def __init__(self, name: str, n_f: int, rng: np.random.Generator,
                 hidden: int = 16):
        self.name = name
        self.net = Mlp(f"{name}.net", [n_f, hidden, 1], rng, final="sigmoid")
        # zero head: predictions start at 0.5 regardless of features
        self.net.zero_final_layer()

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()

    def forward(self, f_ray, p=None):
        return self.net.forward(f_ray, p)
