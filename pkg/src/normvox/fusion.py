"""Element-wise attention fusion of voxel and normal features.

Per voxel, independently: the normal feature is encoded as the query q,
the voxel feature as key k and value v through three separate MLPs;
channel-wise scores s = softmax((q * k) / sqrt(C)) gate the value, and a
decoder maps the gated vector back to the voxel-feature width:

    out = dec(softmax_C((enc_q(n) * enc_k(x)) / sqrt(C)) * enc_v(x))

There is no cross-voxel interaction. The module is numerics only:
forward pass, hand-derived analytic gradients, and a central
finite-difference verification harness. Everything on the gradient path
runs in float64.

Parameter files: a flat little-endian binary (magic ``NVFB``, u32
version, then for each of enc_q, enc_k, enc_v, dec: u32 width count,
u32 widths, then per layer the row-major float64 weight matrix followed
by the float64 bias vector) plus a JSON manifest of widths and seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput

_MAGIC = b"NVFB"
_VERSION = 1

DEFAULT_ENC_WIDTHS = (4, 16, 32, 32)
DEFAULT_DEC_WIDTHS = (32, 32, 16, 4)


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _relu_grad(z: np.ndarray) -> np.ndarray:
    return (z > 0.0).astype(z.dtype)


@dataclass
class MlpParams:
    """Affine layers with a rectifier after every layer except the last."""

    widths: tuple[int, ...]
    weights: list[np.ndarray] = field(repr=False)  # per layer, (out, in)
    biases: list[np.ndarray] = field(repr=False)   # per layer, (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least two widths (in, out)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        expected = list(zip(self.widths[1:], self.widths[:-1]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise DimensionMismatch(
                f"{len(self.weights)} weight matrices for widths {self.widths}"
            )
        for i, (w, b, shape) in enumerate(zip(self.weights, self.biases, expected)):
            if w.shape != shape or b.shape != (shape[0],):
                raise DimensionMismatch(
                    f"layer {i}: weight {w.shape}, bias {b.shape}, expected {shape}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


@dataclass
class FusionParams:
    """Three encoders (query from normals, key/value from voxels) plus decoder."""

    enc_q: MlpParams
    enc_k: MlpParams
    enc_v: MlpParams
    dec: MlpParams
    seed: int | None = None

    def __post_init__(self):
        c = self.enc_q.out_width
        if self.enc_k.out_width != c or self.enc_v.out_width != c:
            raise DimensionMismatch("encoder output widths must all match")
        if self.dec.in_width != c:
            raise DimensionMismatch(
                f"decoder input {self.dec.in_width} != encoder output {c}"
            )

    @property
    def channels(self) -> int:
        return self.enc_q.out_width


@dataclass
class FusionBatch:
    """Row-aligned voxel features (key/value source) and normal features (query source)."""

    voxel_features: np.ndarray
    normal_features: np.ndarray

    def __post_init__(self):
        self.voxel_features = np.ascontiguousarray(self.voxel_features, dtype=np.float64)
        self.normal_features = np.ascontiguousarray(self.normal_features, dtype=np.float64)
        if self.voxel_features.ndim != 2 or self.normal_features.ndim != 2:
            raise DimensionMismatch("features must be 2-D (rows, width)")
        if self.voxel_features.shape[0] != self.normal_features.shape[0]:
            raise DimensionMismatch(
                f"row counts differ: {self.voxel_features.shape[0]} voxel rows, "
                f"{self.normal_features.shape[0]} normal rows"
            )
        for name, arr in (("voxel", self.voxel_features), ("normal", self.normal_features)):
            if arr.size and not np.all(np.isfinite(arr)):
                raise NonFiniteInput(f"{name} features contain NaN/Inf")

    def __len__(self) -> int:
        return self.voxel_features.shape[0]


def init_params(
    enc_widths: tuple[int, ...] = DEFAULT_ENC_WIDTHS,
    dec_widths: tuple[int, ...] = DEFAULT_DEC_WIDTHS,
    seed: int = 0,
) -> FusionParams:
    """Reproducible uniform initialization, bounded by sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def make(widths: tuple[int, ...]) -> MlpParams:
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-0.1, 0.1, size=fan_out))
        return MlpParams(tuple(widths), weights, biases)

    return FusionParams(
        enc_q=make(enc_widths), enc_k=make(enc_widths), enc_v=make(enc_widths),
        dec=make(dec_widths), seed=seed,
    )


def _mlp_forward_cached(x: np.ndarray, p: MlpParams):
    """Forward pass keeping pre-activations for the backward pass."""
    h = x
    pre = []
    acts = [x]
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = _relu(z) if i < p.n_layers - 1 else z
        acts.append(h)
    return h, (pre, acts)


def mlp_forward(x: np.ndarray, p: MlpParams) -> np.ndarray:
    """Plain MLP evaluation; accepts a single vector or an (N, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.in_width:
        raise DimensionMismatch(
            f"input width {x.shape[-1]} != first layer width {p.in_width}"
        )
    y, _ = _mlp_forward_cached(x, p)
    return y[0] if single else y


def _mlp_backward(dy: np.ndarray, p: MlpParams, cache):
    """Gradients of sum(dy * y) w.r.t. input and every weight/bias."""
    pre, acts = cache
    d_weights = [None] * p.n_layers
    d_biases = [None] * p.n_layers
    grad = dy
    for i in range(p.n_layers - 1, -1, -1):
        if i < p.n_layers - 1:
            grad = grad * _relu_grad(pre[i])
        d_weights[i] = grad.T @ acts[i]
        d_biases[i] = grad.sum(axis=0)
        grad = grad @ p.weights[i]
    return grad, d_weights, d_biases


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class FusionIntermediates:
    """Forward-pass internals, exposed for inspection and hand verification."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray
    fused: np.ndarray


def _fusion_forward_cached(batch: FusionBatch, params: FusionParams,
                           scale_scores: bool):
    if batch.normal_features.shape[1] != params.enc_q.in_width:
        raise DimensionMismatch(
            f"normal feature width {batch.normal_features.shape[1]} != "
            f"query encoder input {params.enc_q.in_width}"
        )
    if batch.voxel_features.shape[1] != params.enc_k.in_width:
        raise DimensionMismatch(
            f"voxel feature width {batch.voxel_features.shape[1]} != "
            f"key encoder input {params.enc_k.in_width}"
        )
    q, cq = _mlp_forward_cached(batch.normal_features, params.enc_q)
    k, ck = _mlp_forward_cached(batch.voxel_features, params.enc_k)
    v, cv = _mlp_forward_cached(batch.voxel_features, params.enc_v)
    scale = np.sqrt(params.channels) if scale_scores else 1.0
    scores = _softmax_rows(q * k / scale)
    fused = scores * v
    out, cd = _mlp_forward_cached(fused, params.dec)
    inter = FusionIntermediates(q=q, k=k, v=v, scores=scores, fused=fused)
    return out, inter, (cq, ck, cv, cd, scale)


def fusion_forward(
    batch: FusionBatch,
    params: FusionParams,
    scale_scores: bool = True,
    return_intermediates: bool = False,
):
    """Evaluate the block for every row; rows are independent."""
    out, inter, _ = _fusion_forward_cached(batch, params, scale_scores)
    if return_intermediates:
        return out, inter
    return out


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class FusionGrads:
    """Gradients of L = sum(upstream * output) for every parameter and input."""

    enc_q: MlpGrads
    enc_k: MlpGrads
    enc_v: MlpGrads
    dec: MlpGrads
    d_voxel_features: np.ndarray
    d_normal_features: np.ndarray


def fusion_backward(
    batch: FusionBatch,
    params: FusionParams,
    upstream_grad: np.ndarray,
    scale_scores: bool = True,
) -> FusionGrads:
    """Analytic gradients matching ``fusion_forward``."""
    upstream = np.asarray(upstream_grad, dtype=np.float64)
    out, inter, (cq, ck, cv, cd, scale) = _fusion_forward_cached(
        batch, params, scale_scores
    )
    if upstream.shape != out.shape:
        raise DimensionMismatch(
            f"upstream gradient {upstream.shape} != output {out.shape}"
        )

    d_fused, dec_dw, dec_db = _mlp_backward(upstream, params.dec, cd)
    d_scores = d_fused * inter.v
    d_v = d_fused * inter.scores
    # Softmax rows: dz = s * (ds - sum(ds * s)).
    s = inter.scores
    d_z = s * (d_scores - (d_scores * s).sum(axis=1, keepdims=True))
    d_q = d_z * inter.k / scale
    d_k = d_z * inter.q / scale

    d_normal, q_dw, q_db = _mlp_backward(d_q, params.enc_q, cq)
    d_voxel_k, k_dw, k_db = _mlp_backward(d_k, params.enc_k, ck)
    d_voxel_v, v_dw, v_db = _mlp_backward(d_v, params.enc_v, cv)

    return FusionGrads(
        enc_q=MlpGrads(q_dw, q_db),
        enc_k=MlpGrads(k_dw, k_db),
        enc_v=MlpGrads(v_dw, v_db),
        dec=MlpGrads(dec_dw, dec_db),
        d_voxel_features=d_voxel_k + d_voxel_v,
        d_normal_features=d_normal,
    )


def gradient_check(
    seed: int,
    n_rows: int = 3,
    enc_widths: tuple[int, ...] = (4, 8, 8),
    dec_widths: tuple[int, ...] = (8, 4),
    step: float = 1e-5,
) -> float:
    """Max relative error of analytic vs central finite-difference gradients."""
    params = init_params(enc_widths, dec_widths, seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(99,))))
    batch = FusionBatch(
        voxel_features=rng.uniform(-1, 1, (n_rows, enc_widths[0])),
        normal_features=rng.uniform(-1, 1, (n_rows, enc_widths[0])),
    )
    upstream = rng.uniform(-1, 1, (n_rows, dec_widths[-1]))

    grads = fusion_backward(batch, params, upstream)

    def loss() -> float:
        return float(np.sum(upstream * fusion_forward(batch, params)))

    def numeric(arr: np.ndarray) -> np.ndarray:
        g = np.empty_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss()
            flat[i] = orig - step
            lo = loss()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        return g

    def rel_err(a: np.ndarray, n: np.ndarray) -> float:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        return float((np.abs(a - n) / denom).max()) if a.size else 0.0

    worst = 0.0
    for mlp, mg in (
        (params.enc_q, grads.enc_q), (params.enc_k, grads.enc_k),
        (params.enc_v, grads.enc_v), (params.dec, grads.dec),
    ):
        for w, dw in zip(mlp.weights, mg.weights):
            worst = max(worst, rel_err(dw, numeric(w)))
        for b, db in zip(mlp.biases, mg.biases):
            worst = max(worst, rel_err(db, numeric(b)))
    worst = max(worst, rel_err(grads.d_voxel_features, numeric(batch.voxel_features)))
    worst = max(worst, rel_err(grads.d_normal_features, numeric(batch.normal_features)))
    return worst


def run_fusion_check(seed: int, trials: int, threshold: float = 1e-4) -> dict:
    """Gradient-check ``trials`` seeded toy configurations; summary for the CLI."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    errors = [gradient_check(seed + t) for t in range(trials)]
    worst = max(errors)
    return {
        "trials": trials,
        "seed": seed,
        "threshold": threshold,
        "max_rel_error": worst,
        "per_trial": errors,
        "passed": bool(worst < threshold),
    }


def save_params(params: FusionParams, path: str | Path,
                manifest_path: str | Path | None = None) -> None:
    """Write the flat binary layout plus a JSON manifest (see module docstring)."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    for mlp in (params.enc_q, params.enc_k, params.enc_v, params.dec):
        chunks.append(struct.pack("<I", len(mlp.widths)))
        chunks.append(struct.pack(f"<{len(mlp.widths)}I", *mlp.widths))
        for w, b in zip(mlp.weights, mlp.biases):
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))

    manifest = {
        "format": _MAGIC.decode(),
        "version": _VERSION,
        "enc_widths": list(params.enc_q.widths),
        "dec_widths": list(params.dec.widths),
        "activation": params.enc_q.activation,
        "dtype": "float64",
        "byte_order": "little",
        "seed": params.seed,
    }
    mpath = Path(manifest_path) if manifest_path else path.with_suffix(".json")
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="ascii")


def load_params(path: str | Path) -> FusionParams:
    """Read parameters written by ``save_params``."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    offset = 8

    def read_mlp() -> MlpParams:
        nonlocal offset
        (n,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        widths = struct.unpack_from(f"<{n}I", blob, offset)
        offset += 4 * n
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w = np.frombuffer(blob, "<f8", fan_out * fan_in, offset).reshape(fan_out, fan_in)
            offset += 8 * fan_out * fan_in
            b = np.frombuffer(blob, "<f8", fan_out, offset)
            offset += 8 * fan_out
            weights.append(w.copy())
            biases.append(b.copy())
        return MlpParams(tuple(widths), weights, biases)

    enc_q, enc_k, enc_v, dec = read_mlp(), read_mlp(), read_mlp(), read_mlp()
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes")
    return FusionParams(enc_q=enc_q, enc_k=enc_k, enc_v=enc_v, dec=dec)
