"""Autoencoder definition: parameters, forward passes, loss, gradients.

Encoder: three stride-2 3x3 convolutions (ReLU) then a linear map to the
latent code (identity activation, so the L1 penalty acts on a signed
code). Decoder mirrors it: linear expansion (ReLU), three transposed
convolutions, sigmoid output in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers


@dataclass
class EncoderArch:
    d: int = 128
    conv_channels: tuple[int, int, int] = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    input_side: int = 64

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if len(self.conv_channels) != 3:
            raise ValueError("exactly three conv layers")
        side = self.input_side
        for _ in range(3):
            side = (side + 2 * self.padding - self.kernel) // self.stride + 1
        self.bottleneck_side = side  # 8 with defaults
        self.flatten = self.conv_channels[2] * side * side

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        c1, c2, c3 = self.conv_channels
        k = self.kernel
        return {
            "conv1_w": (c1, 1, k, k),
            "conv1_b": (c1,),
            "conv2_w": (c2, c1, k, k),
            "conv2_b": (c2,),
            "conv3_w": (c3, c2, k, k),
            "conv3_b": (c3,),
            "enc_linear_w": (self.d, self.flatten),
            "enc_linear_b": (self.d,),
            "dec_linear_w": (self.flatten, self.d),
            "dec_linear_b": (self.flatten,),
            "deconv3_w": (c3, c2, k, k),
            "deconv3_b": (c2,),
            "deconv2_w": (c2, c1, k, k),
            "deconv2_b": (c1,),
            "deconv1_w": (c1, 1, k, k),
            "deconv1_b": (1,),
        }

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "conv_channels": list(self.conv_channels),
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
            "input_side": self.input_side,
        }


TENSOR_ORDER = (
    "conv1_w",
    "conv1_b",
    "conv2_w",
    "conv2_b",
    "conv3_w",
    "conv3_b",
    "enc_linear_w",
    "enc_linear_b",
    "dec_linear_w",
    "dec_linear_b",
    "deconv3_w",
    "deconv3_b",
    "deconv2_w",
    "deconv2_b",
    "deconv1_w",
    "deconv1_b",
)


@dataclass
class EncoderParams:
    arch: EncoderArch
    tensors: dict[str, np.ndarray]
    version: int = 1
    rng_seed: int = 0

    def validate(self) -> None:
        shapes = self.arch.tensor_shapes()
        if set(self.tensors) != set(shapes):
            raise ValueError("tensor names do not match the architecture")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape}, expected {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name}: non-finite values")

    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(
            arch=self.arch,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
            version=self.version,
            rng_seed=self.rng_seed,
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            arch=self.arch,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            version=self.version,
            rng_seed=self.rng_seed,
        )


@dataclass
class Embedding:
    vector: np.ndarray  # (d,) float32
    page_id: str = ""
    component_label: int = 0


@dataclass
class LossValue:
    total: float
    recon: float
    sparsity: float


def init_params(arch: EncoderArch, seed: int) -> EncoderParams:
    """Uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)) per tensor; zero
    biases. Tensors drawn in a fixed order for determinism."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in ((n, arch.tensor_shapes()[n]) for n in TENSOR_ORDER):
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:
            recep = shape[2] * shape[3]
            if name.startswith("deconv"):
                fan_in, fan_out = shape[0] * recep, shape[1] * recep
            else:
                fan_in, fan_out = shape[1] * recep, shape[0] * recep
        else:
            fan_out, fan_in = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    params = EncoderParams(arch=arch, tensors=tensors, rng_seed=seed)
    params.validate()
    return params


def _as_input(batch: np.ndarray, arch: EncoderArch, dtype) -> np.ndarray:
    """(N, side, side) or (N, 1, side, side) -> (N, 1, side, side) floats."""
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[:, None, :, :]
    side = arch.input_side
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != side or x.shape[3] != side:
        raise ValueError(f"expected (N, {side}, {side}) patches, got {x.shape}")
    return np.ascontiguousarray(x, dtype=dtype)


# forward stages in dependency order; grad_check recomputes only the
# suffix starting at the perturbed tensor's stage
_STAGES = ("conv1", "conv2", "conv3", "enc_linear", "dec_linear", "deconv3", "deconv2", "deconv1")


def _sign_pattern(cache: dict[str, np.ndarray]) -> tuple[np.ndarray, ...]:
    """Kink-side indicators for every non-smooth unit in the graph."""
    return (
        cache["a1"] > 0,
        cache["a2"] > 0,
        cache["a3"] > 0,
        cache["g"] > 0,
        cache["b3"] > 0,
        cache["b2"] > 0,
        np.sign(cache["z"]),
    )


def _forward(
    t: dict[str, np.ndarray],
    arch: EncoderArch,
    x: np.ndarray,
    from_stage: int = 0,
    cache: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Run the stages from from_stage on, reusing earlier activations
    from cache; returns a new cache dict (inputs are not mutated)."""
    s, p = arch.stride, arch.padding
    n = x.shape[0]
    side = arch.bottleneck_side
    c = {"x": x} if cache is None else dict(cache)
    if from_stage <= 0:
        c["a1"] = layers.conv2d(x, t["conv1_w"], t["conv1_b"], s, p)
        c["h1"] = layers.relu(c["a1"])
    if from_stage <= 1:
        c["a2"] = layers.conv2d(c["h1"], t["conv2_w"], t["conv2_b"], s, p)
        c["h2"] = layers.relu(c["a2"])
    if from_stage <= 2:
        c["a3"] = layers.conv2d(c["h2"], t["conv3_w"], t["conv3_b"], s, p)
        c["h3"] = layers.relu(c["a3"])
    if from_stage <= 3:
        c["z"] = layers.linear(c["h3"].reshape(n, arch.flatten), t["enc_linear_w"], t["enc_linear_b"])
    if from_stage <= 4:
        c["g"] = layers.linear(c["z"], t["dec_linear_w"], t["dec_linear_b"])
        c["gr"] = layers.relu(c["g"])
    if from_stage <= 5:
        u3 = c["gr"].reshape(n, arch.conv_channels[2], side, side)
        c["b3"] = layers.deconv2d(u3, t["deconv3_w"], t["deconv3_b"], s, p, out_pad=1)
        c["r3"] = layers.relu(c["b3"])
    if from_stage <= 6:
        c["b2"] = layers.deconv2d(c["r3"], t["deconv2_w"], t["deconv2_b"], s, p, out_pad=1)
        c["r2"] = layers.relu(c["b2"])
    c["b1"] = layers.deconv2d(c["r2"], t["deconv1_w"], t["deconv1_b"], s, p, out_pad=1)
    c["out"] = layers.sigmoid(c["b1"])
    return c


def _tensors(params: EncoderParams, dtype) -> dict[str, np.ndarray]:
    if dtype is None or params.tensors["conv1_w"].dtype == dtype:
        return params.tensors
    return {k: v.astype(dtype) for k, v in params.tensors.items()}


def encode_batch(
    params: EncoderParams, batch: np.ndarray, chunk: int = 256, dtype=np.float32
) -> np.ndarray:
    """(N, 64, 64) patches -> (N, d) latent codes, chunked for memory."""
    arch = params.arch
    t = _tensors(params, dtype)
    x = _as_input(batch, arch, dtype)
    s, p = arch.stride, arch.padding
    out = np.empty((x.shape[0], arch.d), dtype=dtype)
    for lo in range(0, x.shape[0], chunk):
        xb = x[lo : lo + chunk]
        h = layers.relu(layers.conv2d(xb, t["conv1_w"], t["conv1_b"], s, p))
        h = layers.relu(layers.conv2d(h, t["conv2_w"], t["conv2_b"], s, p))
        h = layers.relu(layers.conv2d(h, t["conv3_w"], t["conv3_b"], s, p))
        out[lo : lo + chunk] = layers.linear(
            h.reshape(xb.shape[0], arch.flatten), t["enc_linear_w"], t["enc_linear_b"]
        )
    return out


def encode(params: EncoderParams, patches: list) -> list[Embedding]:
    """Patch objects -> Embedding objects (carries page/component ids)."""
    batch = np.stack([p.data for p in patches]).astype(np.float32)
    vecs = encode_batch(params, batch)
    return [
        Embedding(vector=vecs[i], page_id=p.page_id, component_label=p.component_label)
        for i, p in enumerate(patches)
    ]


def decode(params: EncoderParams, latents: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(N, d) codes -> (N, 64, 64) reconstructions in [0, 1]."""
    arch = params.arch
    t = _tensors(params, dtype)
    z = np.ascontiguousarray(np.atleast_2d(latents), dtype=dtype)
    if z.shape[1] != arch.d:
        raise ValueError(f"latents must be (N, {arch.d}), got {z.shape}")
    s, p = arch.stride, arch.padding
    gr = layers.relu(layers.linear(z, t["dec_linear_w"], t["dec_linear_b"]))
    side = arch.bottleneck_side
    h = gr.reshape(z.shape[0], arch.conv_channels[2], side, side)
    h = layers.relu(layers.deconv2d(h, t["deconv3_w"], t["deconv3_b"], s, p, out_pad=1))
    h = layers.relu(layers.deconv2d(h, t["deconv2_w"], t["deconv2_b"], s, p, out_pad=1))
    h = layers.deconv2d(h, t["deconv1_w"], t["deconv1_b"], s, p, out_pad=1)
    return layers.sigmoid(h)[:, 0]


def _loss_from_cache(cache: dict[str, np.ndarray], cfg) -> LossValue:
    x = cache["x"]
    n = x.shape[0]
    diff = cache["out"] - x
    recon = float(np.sum(diff * diff, dtype=np.float64) / n)
    sparsity = float(np.sum(np.abs(cache["z"]), dtype=np.float64) / n)
    lam = cfg.lambda_sparsity if cfg.sparsity_enabled else 0.0
    return LossValue(total=recon + lam * sparsity, recon=recon, sparsity=sparsity)


def loss(params: EncoderParams, batch: np.ndarray, cfg, dtype=np.float32) -> LossValue:
    """Per-patch-mean reconstruction SSE plus lambda times per-patch-mean
    L1 of the latent code."""
    arch = params.arch
    x = _as_input(batch, arch, dtype)
    cache = _forward(_tensors(params, dtype), arch, x)
    return _loss_from_cache(cache, cfg)


def loss_and_grads(
    params: EncoderParams, batch: np.ndarray, cfg, dtype=np.float32
) -> tuple[LossValue, dict[str, np.ndarray]]:
    arch = params.arch
    t = _tensors(params, dtype)
    x = _as_input(batch, arch, dtype)
    cache = _forward(t, arch, x)
    value = _loss_from_cache(cache, cfg)

    n = x.shape[0]
    s, p = arch.stride, arch.padding
    grads: dict[str, np.ndarray] = {}

    g_out = (2.0 / n) * (cache["out"] - x)
    g_b1 = layers.sigmoid_backward(cache["out"], g_out)
    g_r2, grads["deconv1_w"], grads["deconv1_b"] = layers.deconv2d_backward(
        cache["r2"], t["deconv1_w"], g_b1, s, p, out_pad=1
    )
    g_b2 = layers.relu_backward(cache["b2"], g_r2)
    g_r3, grads["deconv2_w"], grads["deconv2_b"] = layers.deconv2d_backward(
        cache["r3"], t["deconv2_w"], g_b2, s, p, out_pad=1
    )
    g_b3 = layers.relu_backward(cache["b3"], g_r3)
    side = arch.bottleneck_side
    u3 = cache["gr"].reshape(n, arch.conv_channels[2], side, side)
    g_u3, grads["deconv3_w"], grads["deconv3_b"] = layers.deconv2d_backward(
        u3, t["deconv3_w"], g_b3, s, p, out_pad=1
    )
    g_gr = g_u3.reshape(n, arch.flatten)
    g_g = layers.relu_backward(cache["g"], g_gr)
    g_z, grads["dec_linear_w"], grads["dec_linear_b"] = layers.linear_backward(
        cache["z"], t["dec_linear_w"], g_g
    )
    if cfg.sparsity_enabled and cfg.lambda_sparsity:
        g_z = g_z + (cfg.lambda_sparsity / n) * np.sign(cache["z"])
    flat3 = cache["h3"].reshape(n, arch.flatten)
    g_flat3, grads["enc_linear_w"], grads["enc_linear_b"] = layers.linear_backward(
        flat3, t["enc_linear_w"], g_z
    )
    g_h3 = g_flat3.reshape(cache["h3"].shape)
    g_a3 = layers.relu_backward(cache["a3"], g_h3)
    g_h2, grads["conv3_w"], grads["conv3_b"] = layers.conv2d_backward(
        cache["h2"], t["conv3_w"], g_a3, s, p
    )
    g_a2 = layers.relu_backward(cache["a2"], g_h2)
    g_h1, grads["conv2_w"], grads["conv2_b"] = layers.conv2d_backward(
        cache["h1"], t["conv2_w"], g_a2, s, p
    )
    g_a1 = layers.relu_backward(cache["a1"], g_h1)
    _, grads["conv1_w"], grads["conv1_b"] = layers.conv2d_backward(
        x, t["conv1_w"], g_a1, s, p
    )
    return value, grads


def grad_check(
    params: EncoderParams,
    batch: np.ndarray,
    cfg,
    epsilon: float = 1e-3,
    n_coords: int = 200,
    seed: int = 0,
    dtype=np.float64,
    max_resamples: int = 20,
) -> float:
    """Max relative error between analytic and central-difference
    gradients over randomly sampled coordinates.

    Relative error is |a - n| / max(1, |a|, |n|). Coordinates whose +/-
    epsilon evaluations land on different sides of a ReLU or latent-sign
    kink are resampled: the loss is non-differentiable across the kink,
    so a finite difference there checks nothing about the gradient.
    """
    arch = params.arch
    work = params.astype(dtype)
    x = _as_input(batch, arch, dtype)
    _, grads = loss_and_grads(work, x, cfg, dtype=dtype)
    base = _forward(work.tensors, arch, x)

    rng = np.random.default_rng(seed)
    names = list(TENSOR_ORDER)
    stage_of = {n: i for i, s in enumerate(_STAGES) for n in (s + "_w", s + "_b")}
    sizes = np.array([work.tensors[n].size for n in names])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])

    def eval_at(stage: int) -> tuple[float, tuple[np.ndarray, ...]]:
        cache = _forward(work.tensors, arch, x, from_stage=stage, cache=base)
        return _loss_from_cache(cache, cfg).total, _sign_pattern(cache)

    max_rel = 0.0
    checked = 0
    attempts = 0
    while checked < n_coords and attempts < n_coords * max_resamples:
        attempts += 1
        flat = int(rng.integers(total))
        ti = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (int(bounds[ti - 1]) if ti else 0)
        name = names[ti]
        stage = stage_of[name]
        tens = work.tensors[name].ravel()
        orig = tens[offset]

        tens[offset] = orig + epsilon
        lp, sp = eval_at(stage)
        tens[offset] = orig - epsilon
        lm, sm = eval_at(stage)
        tens[offset] = orig

        if any(not np.array_equal(a, b) for a, b in zip(sp, sm)):
            continue  # kink crossed; resample
        numeric = (lp - lm) / (2.0 * epsilon)
        analytic = float(grads[name].ravel()[offset])
        rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        max_rel = max(max_rel, rel)
        checked += 1
    if checked < n_coords:
        raise RuntimeError("could not find enough kink-free coordinates")
    return max_rel
