"""Model networks: two LeNet-style encoders with a fused classification
head, the prior-weight reconstruction network, and the feature
regularization network.

Image path: 28x28 zero-padded to 32x32, conv 1->6 (5x5), pool, conv 6->16,
pool, dense 400->120->64. Audio path: 20x20, conv 1->6, pool, conv 6->16,
flatten 256, dense 256->64. Fusion: concat 128 -> dense 64 (the regularized
layer) -> dense num_classes.

Parameters live in flat name->Tensor dicts; the trainer owns them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from smil import autodiff as ad
from smil.autodiff import Tensor
from smil.variational import GaussianSpec, sample_reparam

CHECKPOINT_MAGIC = b"SMILW"

FEATURE_DIM = 64
FUSED_DIM = 128
AUDIO_FLAT = 400  # flattened 20x20 feature map

# Softplus(REG_IDENTITY_BIAS) == 1, so a fresh regularizer starts as identity
REG_IDENTITY_BIAS = float(np.log(np.e - 1.0))

STD_FLOOR = 1e-6


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 10
    num_priors: int = 16
    reg_op: str = "mul"  # mul | add
    omega_mean: str = "fixed"  # fixed | learned
    use_reconstruction: bool = True
    use_regularization: bool = True
    fixed_gaussian_reg: bool = False  # ablation: r ~ N(0, I), no reg network
    recon_direct: bool = False  # ablation: emit the feature directly, no priors
    prior_space: str = "input"  # input | embedding
    multi_label: bool = False

    def recon_output_dim(self):
        if self.recon_direct:
            return AUDIO_FLAT if self.prior_space == "input" else FEATURE_DIM
        return 2 * self.num_priors if self.omega_mean == "learned" else self.num_priors


def _glorot(gen, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(gen.uniform(-limit, limit, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _conv_init(gen, f, c, k):
    return _glorot(gen, (f, c, k, k), fan_in=c * k * k, fan_out=f * k * k)


def _dense_init(gen, n_in, n_out):
    return _glorot(gen, (n_in, n_out), fan_in=n_in, fan_out=n_out)


def init_main_params(num_classes, stream):
    """theta: both encoders plus the fusion head."""
    gen = stream.child("init.theta").generator
    return {
        "image.conv1.w": _conv_init(gen, 6, 1, 5),
        "image.conv1.b": _zeros(6),
        "image.conv2.w": _conv_init(gen, 16, 6, 5),
        "image.conv2.b": _zeros(16),
        "image.fc1.w": _dense_init(gen, 400, 120),
        "image.fc1.b": _zeros(120),
        "image.fc2.w": _dense_init(gen, 120, FEATURE_DIM),
        "image.fc2.b": _zeros(FEATURE_DIM),
        "audio.conv1.w": _conv_init(gen, 6, 1, 5),
        "audio.conv1.b": _zeros(6),
        "audio.conv2.w": _conv_init(gen, 16, 6, 5),
        "audio.conv2.b": _zeros(16),
        "audio.fc1.w": _dense_init(gen, 256, FEATURE_DIM),
        "audio.fc1.b": _zeros(FEATURE_DIM),
        "fusion.fc.w": _dense_init(gen, FUSED_DIM, FEATURE_DIM),
        "fusion.fc.b": _zeros(FEATURE_DIM),
        "fusion.out.w": _dense_init(gen, FEATURE_DIM, num_classes),
        "fusion.out.b": _zeros(num_classes),
    }


def init_recon_params(config: ModelConfig, stream):
    """phi_c: image feature -> raw variance logits over the K priors (or the
    direct feature / (mean, std) pair, depending on configuration)."""
    gen = stream.child("init.recon").generator
    out_dim = config.recon_output_dim()
    return {
        "recon.fc1.w": _dense_init(gen, FEATURE_DIM, 64),
        "recon.fc1.b": _zeros(64),
        "recon.out.w": _dense_init(gen, 64, out_dim),
        "recon.out.b": _zeros(out_dim),
    }


def init_reg_params(stream):
    """phi_r: fused features -> (mean, raw std) of the 64-dim regularizer.

    The mean-half bias starts at softplus^-1(1) so training begins near the
    identity regularizer.
    """
    gen = stream.child("init.reg").generator
    bias = np.zeros(2 * FEATURE_DIM)
    bias[:FEATURE_DIM] = REG_IDENTITY_BIAS
    return {
        "reg.fc1.w": _dense_init(gen, FUSED_DIM, 64),
        "reg.fc1.b": _zeros(64),
        "reg.out.w": _dense_init(gen, 64, 2 * FEATURE_DIM),
        "reg.out.b": Tensor(bias, requires_grad=True),
    }


def init_lower_params(num_classes, stream):
    """Single-modality baseline: image encoder plus its own head."""
    gen = stream.child("init.lower").generator
    params = init_main_params(num_classes, stream)
    for name in list(params):
        if not name.startswith("image."):
            del params[name]
    params["lower.fc.w"] = _dense_init(gen, FEATURE_DIM, 64)
    params["lower.fc.b"] = _zeros(64)
    params["lower.out.w"] = _dense_init(gen, 64, num_classes)
    params["lower.out.b"] = _zeros(num_classes)
    return params


def init_ae_params(stream):
    """Image -> flattened audio-feature regressor for the imputation baseline."""
    gen = stream.child("init.ae").generator
    params = init_main_params(10, stream.child("ae-encoder"))
    for name in list(params):
        if not name.startswith("image."):
            del params[name]
    params["ae.fc1.w"] = _dense_init(gen, FEATURE_DIM, 128)
    params["ae.fc1.b"] = _zeros(128)
    params["ae.out.w"] = _dense_init(gen, 128, AUDIO_FLAT)
    params["ae.out.b"] = _zeros(AUDIO_FLAT)
    return params


def _dense(params, prefix, x, activation=True):
    y = ad.bias_add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])
    return ad.relu(y) if activation else y


def encode(params, modality, batch):
    """Run one encoder; batch is (N, H, W) data or an in-graph (N, H*W) tensor."""
    if modality == "image":
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (28, 28):
            raise ad.ShapeMismatch("encode-image", x.shape)
        x = Tensor(np.pad(x, ((0, 0), (2, 2), (2, 2)))[:, None, :, :])
        h = ad.maxpool2(ad.relu(ad.conv_bias_add(ad.conv2d(x, params["image.conv1.w"]), params["image.conv1.b"])))
        h = ad.maxpool2(ad.relu(ad.conv_bias_add(ad.conv2d(h, params["image.conv2.w"]), params["image.conv2.b"])))
        h = ad.reshape(h, (x.shape[0], 400))
        h = _dense(params, "image.fc1", h)
        return _dense(params, "image.fc2", h)

    if modality == "audio":
        if isinstance(batch, Tensor):  # reconstructed maps arrive in-graph
            n = batch.shape[0]
            x = ad.reshape(batch, (n, 1, 20, 20))
        else:
            x = np.asarray(batch, dtype=np.float64)
            if x.ndim != 3 or x.shape[1:] != (20, 20):
                raise ad.ShapeMismatch("encode-audio", x.shape)
            n = x.shape[0]
            x = Tensor(x[:, None, :, :])
        h = ad.maxpool2(ad.relu(ad.conv_bias_add(ad.conv2d(x, params["audio.conv1.w"]), params["audio.conv1.b"])))
        h = ad.relu(ad.conv_bias_add(ad.conv2d(h, params["audio.conv2.w"]), params["audio.conv2.b"]))
        h = ad.reshape(h, (n, 256))
        return _dense(params, "audio.fc1", h)

    raise ValueError(f"unknown modality {modality!r}")


def predict_omega_spec(params, feature1, config: ModelConfig) -> GaussianSpec:
    """Posterior over prior weights: N(1, softplus(f(x1)) + floor), or a
    learned-mean variant when configured."""
    raw = _dense(params, "recon.out", _dense(params, "recon.fc1", feature1), activation=False)
    n = feature1.shape[0]
    k = config.num_priors
    if config.omega_mean == "learned":
        mean, raw_std = ad.split(raw, [k, k], axis=1)
        std = ad.add(ad.softplus(raw_std), STD_FLOOR)
        return GaussianSpec(mean=mean, std=std)
    std = ad.add(ad.softplus(raw), STD_FLOOR)
    return GaussianSpec(mean=Tensor(np.ones((n, k))), std=std)


def reconstruct(omega, priors):
    """Weighted sum of modality priors: omega (N, K) @ priors (K, d)."""
    vectors = priors.vectors if hasattr(priors, "vectors") else np.asarray(priors)
    if omega.shape[1] != vectors.shape[0]:
        raise ad.ShapeMismatch("reconstruct", omega.shape, vectors.shape)
    return ad.matmul(omega, Tensor(vectors))


def reg_spec(params, fused) -> GaussianSpec:
    raw = _dense(params, "reg.out", _dense(params, "reg.fc1", fused), activation=False)
    mean, raw_std = ad.split(raw, [FEATURE_DIM, FEATURE_DIM], axis=1)
    return GaussianSpec(mean=mean, std=ad.add(ad.softplus(raw_std), STD_FLOOR))


def regularize(h, r, op="mul"):
    """Gate features with Softplus(r): elementwise multiply or add."""
    gate = ad.softplus(r)
    if op == "mul":
        return ad.mul(h, gate)
    if op == "add":
        return ad.add(h, gate)
    raise ValueError(f"unknown regularization op {op!r}")


class LatentDraws:
    """Draw policy for one forward pass: distribution means, fresh stream
    draws, or frozen epsilons for bit-identical replay."""

    def __init__(self, mode="deterministic", stream=None, epsilons=None):
        if mode not in ("deterministic", "fresh", "frozen"):
            raise ValueError(f"unknown noise mode {mode!r}")
        if mode == "fresh" and stream is None:
            raise ValueError("fresh draws need a stream")
        if mode == "frozen" and epsilons is None:
            raise ValueError("frozen draws need epsilons")
        self.mode = mode
        self.stream = stream
        self.epsilons = dict(epsilons) if epsilons else {}

    def draw(self, name, spec: GaussianSpec):
        if self.mode == "deterministic":
            return spec.mean
        if self.mode == "frozen":
            draw, _ = sample_reparam(spec, eps=self.epsilons[name])
            return draw
        draw, eps = sample_reparam(spec, stream=self.stream)
        self.epsilons[name] = eps
        return draw


def forward_classify(params, images, audio, priors, config: ModelConfig, draws: LatentDraws):
    """Fused classification with optional missing-modality reconstruction.

    audio=None means modality 2 is absent for the whole batch: the feature
    is reconstructed from priors (or zero-imputed when reconstruction is
    off). Returns (logits tensor, {"omega": spec|None, "r": spec|None}).
    """
    n = len(images)
    specs = {"omega": None, "r": None}
    f1 = encode(params, "image", images)

    if audio is not None:
        f2 = encode(params, "audio", audio)
    elif config.use_reconstruction:
        if priors is None and not config.recon_direct:
            raise ValueError("modality 2 missing: reconstruction requires priors")
        if config.recon_direct:
            xhat = _dense(params, "recon.out", _dense(params, "recon.fc1", f1), activation=False)
        else:
            omega_spec = predict_omega_spec(params, f1, config)
            specs["omega"] = omega_spec
            omega = draws.draw("omega", omega_spec)
            xhat = reconstruct(omega, priors)
        if config.prior_space == "input":
            f2 = encode(params, "audio", xhat)
        else:  # embedding-space priors: inject as the audio feature directly
            f2 = xhat
    else:
        f2 = Tensor(np.zeros((n, FEATURE_DIM)))  # zero-imputation control

    fused = ad.concat([f1, f2], axis=1)
    h = _dense(params, "fusion.fc", fused)
    if config.use_regularization:
        if config.fixed_gaussian_reg:
            r_spec = GaussianSpec(mean=Tensor(np.zeros((n, FEATURE_DIM))), std=Tensor(np.ones((n, FEATURE_DIM))))
        else:
            r_spec = reg_spec(params, fused)
            specs["r"] = r_spec
        r = draws.draw("r", r_spec)
        h = regularize(h, r, config.reg_op)
    logits = _dense(params, "fusion.out", h, activation=False)
    return logits, specs


def forward_lower(params, images):
    """Image-only baseline head."""
    f1 = encode(params, "image", images)
    h = _dense(params, "lower.fc", f1)
    return _dense(params, "lower.out", h, activation=False)


def forward_ae_regressor(params, images):
    """Predict the flattened audio feature map from the image."""
    f1 = encode(params, "image", images)
    h = _dense(params, "ae.fc1", f1)
    return _dense(params, "ae.out", h, activation=False)


# ------------------------------------------------------------- param utils


THETA_PREFIXES = ("image.", "audio.", "fusion.")
PSI_PREFIXES = ("recon.", "reg.")


def theta_names(params):
    return [n for n in params if n.startswith(THETA_PREFIXES)]


def psi_names(params):
    return [n for n in params if n.startswith(PSI_PREFIXES)]


def clone_params(params, names=None):
    """Fresh requires-grad copies (no aliasing with the source)."""
    names = list(params) if names is None else names
    return {n: Tensor(params[n].data.copy(), requires_grad=True) for n in names}


def zero_grads(params):
    for t in params.values():
        t.grad = None


def all_finite(params):
    return all(np.all(np.isfinite(t.data)) for t in params.values())


def params_vector(params, names):
    return np.concatenate([params[n].data.reshape(-1) for n in names])


def set_params_vector(params, names, vector):
    offset = 0
    for n in names:
        size = params[n].data.size
        params[n].data = vector[offset : offset + size].reshape(params[n].data.shape).copy()
        offset += size


def architecture_hash(params):
    spec = ";".join(f"{n}:{params[n].data.shape}" for n in sorted(params))
    return hashlib.sha256(spec.encode()).digest()[:8]


def save_checkpoint(path, params):
    """SMILW container: magic, architecture hash, named parameter blocks."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(architecture_hash(params))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        stored_hash = fh.read(8)
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            payload = fh.read(size * 8)
            if len(payload) != size * 8:
                raise CheckpointError(f"{path}: truncated block for {name!r}")
            params[name] = Tensor(
                np.frombuffer(payload, dtype="<f8").reshape(shape).copy(), requires_grad=True
            )
    if architecture_hash(params) != stored_hash:
        raise CheckpointError(f"{path}: architecture hash mismatch")
    return params
