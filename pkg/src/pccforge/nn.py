"""Minimal differentiable building blocks with hand-written backward passes.

Dense stacks, edge convolutions over neighbor graphs, a point set encoder,
and a per-point denoiser: the few shapes of network this pipeline needs.
Parameters live in a ParamStore (ordered name -> float64 array); every
forward returns a cache that its backward consumes, and every backward
accumulates into a plain grads dict. Feature matrices are ordinary
(rows, cols) float64 arrays.

No general autodiff graph is built; gradients are checked against central
finite differences instead (see grad_check).
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import knn_indices_all

LEAKY_SLOPE = 0.2

CHECKPOINT_MAGIC = b"PCCFORGE-CKPT-v1\n"


class ParamStore:
    """Ordered mapping of parameter names to float64 arrays."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        cur = self._arrays[name]
        val = np.asarray(value, dtype=np.float64)
        if val.shape != cur.shape:
            raise ValueError(f"shape mismatch for {name!r}: {val.shape} vs {cur.shape}")
        self._arrays[name] = val

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self._arrays.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._arrays.values())

    def n_scalars(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, LEAKY_SLOPE)


class Mlp:
    """Affine layer stack with a leaky rectifier between layers.

    dims = (d_in, h1, ..., d_out). The final layer is linear unless
    final_activation is set; zero_init_last makes the stack start as the
    zero function, which several pipeline heads rely on.
    """

    def __init__(self, store: ParamStore, name: str, dims, rng,
                 final_activation: bool = False, zero_init_last: bool = False):
        self.name = name
        self.dims = tuple(int(d) for d in dims)
        if len(self.dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.final_activation = final_activation
        self.n_layers = len(self.dims) - 1
        for i in range(self.n_layers):
            d_in, d_out = self.dims[i], self.dims[i + 1]
            last = i == self.n_layers - 1
            if last and zero_init_last:
                w = np.zeros((d_out, d_in))
                b = np.zeros(d_out)
            else:
                w = uniform_init(rng, (d_out, d_in), d_in)
                b = uniform_init(rng, (d_out,), d_in)
            store.add(f"{name}/w{i}", w)
            store.add(f"{name}/b{i}", b)

    def forward(self, store: ParamStore, x: np.ndarray):
        if x.shape[-1] != self.dims[0]:
            raise ValueError(
                f"{self.name}: input has {x.shape[-1]} features, expected {self.dims[0]}"
            )
        h = x
        cache = []
        for i in range(self.n_layers):
            w, b = store[f"{self.name}/w{i}"], store[f"{self.name}/b{i}"]
            pre = h @ w.T + b
            cache.append((h, pre))
            if i < self.n_layers - 1 or self.final_activation:
                h = leaky_relu(pre)
            else:
                h = pre
        return h, cache

    def backward(self, store: ParamStore, cache, dy: np.ndarray, grads: dict) -> np.ndarray:
        dh = dy
        for i in reversed(range(self.n_layers)):
            inp, pre = cache[i]
            if i < self.n_layers - 1 or self.final_activation:
                dpre = dh * leaky_relu_grad(pre)
            else:
                dpre = dh
            flat_in = inp.reshape(-1, inp.shape[-1])
            flat_dpre = dpre.reshape(-1, dpre.shape[-1])
            grads[f"{self.name}/w{i}"] += flat_dpre.T @ flat_in
            grads[f"{self.name}/b{i}"] += flat_dpre.sum(axis=0)
            dh = dpre @ store[f"{self.name}/w{i}"]
        return dh


def mlp_forward(params: ParamStore, x: np.ndarray, arch: Mlp) -> np.ndarray:
    """Forward pass of an MLP given its parameter store and layer spec."""
    return arch.forward(params, x)[0]


def mlp_backward(params: ParamStore, x: np.ndarray, upstream: np.ndarray, arch: Mlp):
    """Exact reverse-mode gradients of mlp_forward.

    Recomputes the forward intermediates from x, then returns
    (parameter gradients, input gradient).
    """
    _, cache = arch.forward(params, x)
    grads = {f"{arch.name}/w{i}": np.zeros_like(params[f"{arch.name}/w{i}"])
             for i in range(arch.n_layers)}
    grads.update({f"{arch.name}/b{i}": np.zeros_like(params[f"{arch.name}/b{i}"])
                  for i in range(arch.n_layers)})
    dx = arch.backward(params, cache, upstream, grads)
    return grads, dx


def _scatter_add_rows(dst: np.ndarray, idx: np.ndarray, src: np.ndarray):
    """dst[idx[i]] += src[i] with repeated indices accumulated."""
    n = len(dst)
    flat = idx.ravel()
    src2 = src.reshape(len(flat), -1)
    for j in range(src2.shape[1]):
        dst[:, j] += np.bincount(flat, weights=src2[:, j], minlength=n)


class EdgeConv:
    """Graph edge convolution: per edge (i, j) apply a linear layer plus
    leaky rectifier to (f_i, f_j - f_i), then max over each point's
    neighbors."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        store.add(f"{name}/w", uniform_init(rng, (d_out, 2 * d_in), 2 * d_in))
        store.add(f"{name}/b", uniform_init(rng, (d_out,), 2 * d_in))

    def forward(self, store: ParamStore, feats: np.ndarray, graph: np.ndarray,
                want_cache: bool = True):
        """feats: (P, k, d_in); graph: (P, k, g) neighbor indices within each
        patch. Returns (out (P, k, d_out), cache)."""
        p, k, d = feats.shape
        if d != self.d_in:
            raise ValueError(f"{self.name}: feature dim {d}, expected {self.d_in}")
        if graph.shape[:2] != (p, k) or graph.shape[2] < 1:
            raise ValueError(f"{self.name}: graph shape {graph.shape} invalid")
        g = graph.shape[2]
        nbr = feats[np.arange(p)[:, None, None], graph]
        center = np.broadcast_to(feats[:, :, None, :], nbr.shape)
        edge = np.concatenate([center, nbr - center], axis=-1)
        w, b = store[f"{self.name}/w"], store[f"{self.name}/b"]
        pre = edge.reshape(-1, 2 * d) @ w.T + b
        act = leaky_relu(pre).reshape(p, k, g, self.d_out)
        arg = np.argmax(act, axis=2)
        out = np.take_along_axis(act, arg[:, :, None, :], axis=2)[:, :, 0, :]
        cache = (feats.shape, graph, edge, pre, arg) if want_cache else None
        return out, cache

    def backward(self, store: ParamStore, cache, dout: np.ndarray, grads: dict) -> np.ndarray:
        shape, graph, edge, pre, arg = cache
        p, k, d = shape
        g = graph.shape[2]
        dact = np.zeros((p, k, g, self.d_out))
        np.put_along_axis(dact, arg[:, :, None, :], dout[:, :, None, :], axis=2)
        dpre = (dact.reshape(-1, self.d_out) * leaky_relu_grad(pre))
        w = store[f"{self.name}/w"]
        grads[f"{self.name}/w"] += dpre.T @ edge.reshape(-1, 2 * d)
        grads[f"{self.name}/b"] += dpre.sum(axis=0)
        dedge = (dpre @ w).reshape(p, k, g, 2 * d)
        dcenter = dedge[..., :d]
        ddiff = dedge[..., d:]
        dfeats = (dcenter - ddiff).sum(axis=2)
        flat = (np.arange(p)[:, None, None] * k + graph)
        dflat = np.zeros((p * k, d))
        _scatter_add_rows(dflat, flat, ddiff)
        dfeats += dflat.reshape(p, k, d)
        return dfeats


def coordinate_graph(coords: np.ndarray, g: int) -> np.ndarray:
    """Neighbor graph (P, k, g) from patch coordinates, self excluded.

    Invariant to rotations and reflections of each patch, so it can be
    cached once per patch.
    """
    return _knn_graph(coords, g)


def _knn_graph(feats: np.ndarray, g: int) -> np.ndarray:
    p, k, _ = feats.shape
    if not 1 <= g <= k - 1:
        raise ValueError(f"graph needs 1 <= g <= k-1, got g={g}, k={k}")
    diff = feats[:, :, None, :] - feats[:, None, :, :]
    d2 = np.einsum("pijk,pijk->pij", diff, diff)
    idx = np.arange(k)
    d2[:, idx, idx] = np.inf
    return np.argsort(d2, axis=2, kind="stable")[:, :, :g]


class PatchDescriptor:
    """Stacked edge convolutions with a final max-pool over patch points.

    The neighbor graph comes from patch coordinates for the first three
    layers and is recomputed in feature space before the last layer.
    """

    def __init__(self, store: ParamStore, name: str, rng,
                 widths=(64, 64, 128, 256), graph_k: int = 16):
        self.name = name
        self.widths = tuple(widths)
        self.graph_k = graph_k
        self.layers = []
        d_in = 3
        for i, d_out in enumerate(self.widths):
            self.layers.append(EdgeConv(store, f"{name}/ec{i}", d_in, d_out, rng))
            d_in = d_out
        self.out_dim = d_in

    def forward(self, store: ParamStore, coords: np.ndarray,
                graph: np.ndarray | None = None, want_cache: bool = True):
        """coords: (P, k, 3) canonicalized patches -> descriptors (P, out_dim)."""
        if graph is None:
            graph = coordinate_graph(coords, min(self.graph_k, coords.shape[1] - 1))
        h = coords
        layer_caches = []
        for i, layer in enumerate(self.layers):
            use_graph = graph
            if i == len(self.layers) - 1 and len(self.layers) > 1:
                use_graph = _knn_graph(h, graph.shape[2])
            h, c = layer.forward(store, h, use_graph, want_cache=want_cache)
            layer_caches.append(c)
        arg = np.argmax(h, axis=1)
        desc = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
        cache = (layer_caches, h.shape, arg) if want_cache else None
        return desc, cache

    def backward(self, store: ParamStore, cache, ddesc: np.ndarray, grads: dict) -> np.ndarray:
        layer_caches, h_shape, arg = cache
        dh = np.zeros(h_shape)
        np.put_along_axis(dh, arg[:, None, :], ddesc[:, None, :], axis=1)
        for layer, c in zip(reversed(self.layers), reversed(layer_caches)):
            dh = layer.backward(store, c, dh, grads)
        return dh


class PointNetEncoder:
    """Per-point MLP, global max-pool, then a head MLP to the latent code."""

    def __init__(self, store: ParamStore, name: str, rng,
                 point_dims=(128, 256, 512), head_dims=(256,), latent_dim: int = 512):
        self.name = name
        self.latent_dim = latent_dim
        self.point_mlp = Mlp(store, f"{name}/point", (3, *point_dims), rng,
                             final_activation=True)
        self.head = Mlp(store, f"{name}/head", (point_dims[-1], *head_dims, latent_dim), rng)

    def forward(self, store: ParamStore, points: np.ndarray):
        """points: (B, m, 3) -> latent (B, latent_dim)."""
        if points.ndim != 3 or points.shape[1] == 0:
            raise ValueError("encoder needs a non-empty (B, m, 3) batch")
        feats, mlp_cache = self.point_mlp.forward(store, points)
        arg = np.argmax(feats, axis=1)
        pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
        z, head_cache = self.head.forward(store, pooled)
        return z, (mlp_cache, feats.shape, arg, head_cache)

    def backward(self, store: ParamStore, cache, dz: np.ndarray, grads: dict):
        mlp_cache, feats_shape, arg, head_cache = cache
        dpooled = self.head.backward(store, head_cache, dz, grads)
        dfeats = np.zeros(feats_shape)
        np.put_along_axis(dfeats, arg[:, None, :], dpooled[:, None, :], axis=1)
        self.point_mlp.backward(store, mlp_cache, dfeats, grads)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos position embedding of integer steps, (len(t), dim)."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Per-point noise prediction from (coords, timestep embedding, latent).

    The output layer starts at zero so an untrained model predicts zero
    noise everywhere.
    """

    def __init__(self, store: ParamStore, name: str, rng, latent_dim: int,
                 hidden=(128, 256, 256), time_dim: int = 16):
        self.name = name
        self.latent_dim = latent_dim
        self.time_dim = time_dim
        self.mlp = Mlp(store, f"{name}/mlp", (3 + time_dim + latent_dim, *hidden, 3),
                       rng, zero_init_last=True)

    def forward(self, store: ParamStore, x: np.ndarray, t: np.ndarray, z: np.ndarray):
        """x: (B, n, 3); t: (B,) steps; z: (B, latent) -> predicted noise (B, n, 3)."""
        b, n, _ = x.shape
        emb = sinusoidal_embedding(t, self.time_dim)
        inp = np.concatenate(
            [x, np.broadcast_to(emb[:, None, :], (b, n, self.time_dim)),
             np.broadcast_to(z[:, None, :], (b, n, self.latent_dim))],
            axis=-1,
        )
        eps, cache = self.mlp.forward(store, inp)
        return eps, cache

    def backward(self, store: ParamStore, cache, deps: np.ndarray, grads: dict):
        """Returns dz (B, latent); coordinate and time inputs are data."""
        dinp = self.mlp.backward(store, cache, deps, grads)
        dz = dinp[..., 3 + self.time_dim:].sum(axis=1)
        return dz


class SgdMomentum:
    """Plain gradient descent with momentum; velocities keyed like params."""

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, store: ParamStore, grads: dict):
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            store[name] = store[name] - self.lr * v

    def state_arrays(self) -> dict:
        return {f"opt/{k}": v for k, v in self.velocity.items()}

    def load_state(self, arrays: dict):
        for k in self.velocity:
            key = f"opt/{k}"
            if key in arrays:
                self.velocity[k] = np.array(arrays[key], dtype=np.float64)


def save_checkpoint(path, arrays: dict):
    """Write named float64 arrays to a self-describing binary container."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad header)")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * n)
            if len(data) != 8 * n:
                raise ValueError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
        return arrays


def store_to_arrays(store: ParamStore, extra: dict | None = None) -> dict:
    out = {f"param/{k}": v for k, v in store.items()}
    if extra:
        out.update(extra)
    return out


def arrays_to_store(arrays: dict, store: ParamStore):
    """Load param/ entries from a checkpoint dict into an existing store."""
    for name in store.names():
        key = f"param/{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arrays[key].shape != store[name].shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arrays[key].shape}, "
                f"expected {store[name].shape}"
            )
        store[name] = arrays[key]


def grad_check(loss_fn, grads_fn, store: ParamStore, n_probes: int = 50,
               h: float = 1e-6, rng=None, zero_tol: float = 1e-7) -> float:
    """Max relative error between analytic gradients and central differences.

    Probes random parameter coordinates. When both the analytic and the
    numeric value are below zero_tol the probe counts as exact, since at
    that magnitude the difference quotient is pure roundoff.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    grads = grads_fn()
    names = store.names()
    sizes = np.array([store[n].size for n in names])
    cumsum = np.cumsum(sizes)
    worst = 0.0
    for _ in range(n_probes):
        flat = int(rng.integers(cumsum[-1]))
        which = int(np.searchsorted(cumsum, flat, side="right"))
        name = names[which]
        idx = flat - (cumsum[which] - sizes[which])
        arr = store[name]
        orig = arr.flat[idx]
        step = h * max(1.0, abs(orig))
        arr.flat[idx] = orig + step
        lp = loss_fn()
        arr.flat[idx] = orig - step
        lm = loss_fn()
        arr.flat[idx] = orig
        fd = (lp - lm) / (2.0 * step)
        an = grads[name].flat[idx]
        denom = max(abs(an), abs(fd))
        if denom < zero_tol:
            continue
        worst = max(worst, abs(an - fd) / denom)
    return worst
