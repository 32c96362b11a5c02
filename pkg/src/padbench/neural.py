"""Neural detectors: a VAE anomaly scorer with an MLP head on the latent
mean, and a small CNN classifier with fixed or FDR-calibrated thresholds.

Images go in as uint8 or [0, 1] float arrays of shape (n, height, width).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import attack_mask, threshold_at_fdr

# stage layouts for the residual encoder/decoder
PRESETS = {
    "desk": (1, 1, 1, 1),
    # stage depths of ResNet-50 (built from basic rather than bottleneck blocks)
    "resnet50": (3, 4, 6, 3),
}


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    x = torch.as_tensor(arr.astype(np.float64))
    if arr.dtype == np.uint8:
        x = x / 255.0
    return x.to(dtype).unsqueeze(1)


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _batches(n, batch_size, generator=None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# VAE


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


def _widths(base, n_stages):
    return [base * min(2 ** i, 4) for i in range(n_stages + 1)]


@dataclass
class VaeConfig:
    image_size: tuple = (64, 64)  # (width, height)
    latent_dim: int = 128
    preset: str = "desk"
    base_channels: int = 8
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    literal_kl_sign: bool = False

    @property
    def stage_depths(self):
        return PRESETS[self.preset]


class VaeModel(nn.Module):
    """Residual convolutional encoder ``X -> (mu, logvar)`` and mirrored
    decoder ``z -> X_hat`` (sigmoid output in [0, 1])."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        depths = config.stage_depths
        w, h = config.image_size
        factor = 2 ** len(depths)
        if w % factor or h % factor:
            raise ValueError(f"image size {config.image_size} must be divisible by {factor}")
        widths = _widths(config.base_channels, len(depths))
        self.bottom = (widths[-1], h // factor, w // factor)
        flat = int(np.prod(self.bottom))

        enc = [nn.Conv2d(1, widths[0], 3, padding=1), nn.ReLU()]
        for i, depth in enumerate(depths):
            enc.append(ResBlock(widths[i], widths[i + 1], stride=2))
            enc += [ResBlock(widths[i + 1], widths[i + 1]) for _ in range(depth - 1)]
        self.encoder = nn.Sequential(*enc, nn.Flatten())
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)

        self.fc_dec = nn.Linear(config.latent_dim, flat)
        dec = []
        for i in reversed(range(len(depths))):
            dec += [ResBlock(widths[i + 1], widths[i + 1]) for _ in range(depths[i] - 1)]
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), ResBlock(widths[i + 1], widths[i])]
        dec.append(nn.Conv2d(widths[0], 1, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.meta = {}

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def encode(self, x):
        hidden = self.encoder(x)
        return self.fc_mu(hidden), self.fc_logvar(hidden)

    def decode(self, z):
        return torch.sigmoid(self.decoder(self.fc_dec(z).view(-1, *self.bottom)))

    def forward(self, x, eps=None):
        mu, logvar = self.encode(x)
        if eps is None:
            eps = torch.randn_like(mu)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar


def kl_divergence(mu, logvar):
    """Per-sample KL(N(mu, diag exp(logvar)) || N(0, I))."""
    return 0.5 * torch.sum(mu.pow(2) + logvar.exp() - logvar - 1.0, dim=-1)


def vae_loss(x, x_hat, mu, logvar, c, literal_kl_sign=False):
    """``c * KL + MSE`` with KL averaged over the batch and MSE over pixels.

    ``literal_kl_sign=True`` evaluates ``-c * KL + MSE`` instead, which
    rewards leaving the prior when minimized; kept only for comparison.
    """
    if c <= 0:
        raise ValueError(f"KL weight c must be positive, got {c}")
    kl = kl_divergence(mu, logvar).mean()
    mse = F.mse_loss(x_hat, x, reduction="mean")
    sign = -1.0 if literal_kl_sign else 1.0
    return sign * c * kl + mse


def _require_live(labels):
    attacks = np.flatnonzero(attack_mask(labels))
    if attacks.size:
        raise ValueError(f"VAE training accepts bona fide samples only; {attacks.size} attack "
                         f"labels found (first at index {attacks[0]})")


def train_vae(images, labels, config: VaeConfig | None = None) -> VaeModel:
    """Fit the VAE to live images by minibatch Adam with reparameterized
    sampling. ``model.meta`` records N, b, c and per-epoch mean losses."""
    config = config or VaeConfig()
    _require_live(labels)
    x = to_tensor(images)
    n = x.shape[0]
    if n == 0:
        raise ValueError("no training images")
    torch.manual_seed(config.seed)
    model = VaeModel(config)
    b = min(config.batch_size, n)
    c = b / n
    model.meta = {"N": n, "b": b, "c": c, "epoch_losses": [], "final_loss": None,
                  "optimizer": "adam", "lr": config.lr, "seed": config.seed}
    if config.epochs == 0:
        return model
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    for _ in range(config.epochs):
        total, seen = 0.0, 0
        for idx in _batches(n, b, gen):
            xb = x[idx]
            mu, logvar = model.encode(xb)
            eps = torch.randn(mu.shape, generator=gen)
            x_hat = model.decode(mu + torch.exp(0.5 * logvar) * eps)
            loss = vae_loss(xb, x_hat, mu, logvar, c, config.literal_kl_sign)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        model.meta["epoch_losses"].append(total / seen)
    model.meta["final_loss"] = model.meta["epoch_losses"][-1]
    model.eval()
    return model


@torch.no_grad()
def encode(model: VaeModel, images, batch_size: int = 1):
    """Deterministic latent mean and log-variance, as float64 arrays.

    Images are pushed through one at a time by default: batched
    convolutions round differently, and this keeps a sample's latent
    independent of what it was scored alongside.
    """
    x = to_tensor(images, dtype=next(model.parameters()).dtype)
    w, h = model.config.image_size
    if x.shape[-2:] != (h, w):
        raise ValueError(f"image shape {tuple(x.shape[-2:])} does not match model size {(h, w)}")
    model.eval()
    mus, logvars = [], []
    for start in range(0, x.shape[0], batch_size):
        mu, logvar = model.encode(x[start:start + batch_size])
        mus.append(mu)
        logvars.append(logvar)
    return torch.cat(mus).double().numpy(), torch.cat(logvars).double().numpy()


@torch.no_grad()
def reconstruction_error(model: VaeModel, images) -> np.ndarray:
    """Per-image MSE of the decoded latent mean."""
    x = to_tensor(images)
    model.eval()
    mu, _ = model.encode(x)
    return ((model.decode(mu) - x) ** 2).mean(dim=(1, 2, 3)).double().numpy()


# ---------------------------------------------------------------------------
# MLP head


class MlpHead(nn.Module):
    """128 -> 64 -> 2 perceptron with ReLU, softmax on output.

    ``shift``/``scale`` standardize the latent means with statistics frozen
    at training time. At small N the KL weight ``c = b/N`` squeezes the
    means close to zero, and this keeps their variation usable.
    """

    def __init__(self, in_features=128, hidden=64):
        super().__init__()
        self.register_buffer("shift", torch.zeros(in_features))
        self.register_buffer("scale", torch.ones(in_features))
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, mu):
        return self.fc2(F.relu(self.fc1((mu - self.shift) / self.scale)))

    def probabilities(self, mu):
        return torch.softmax(self.forward(mu), dim=-1)


@dataclass
class HeadConfig:
    hidden: int = 64
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    balanced: bool = True
    standardize: bool = True


def balanced_weights(y: np.ndarray) -> np.ndarray:
    """Per-class weights ``n / (2 * n_class)`` for (bona fide, attack)."""
    counts = np.array([np.sum(~y), np.sum(y)], dtype=float)
    return len(y) / (2.0 * counts)


def train_mlp_head(model: VaeModel, images, labels, config: HeadConfig | None = None) -> MlpHead:
    """Cross-entropy training of the head on deterministic latent means.

    The VAE is never updated; its parameter checksum is verified after
    training.
    """
    config = config or HeadConfig()
    y = attack_mask(labels)
    if y.all() or not y.any():
        raise ValueError("head training needs both bona fide and attack samples")
    before = checksum(model)
    mu, _ = encode(model, images)
    mu = torch.as_tensor(mu, dtype=torch.float32)
    if len(mu) < 2:
        raise ValueError("head training needs at least two samples")
    target = torch.as_tensor(y.astype(np.int64))

    torch.manual_seed(config.seed)
    head = MlpHead(model.latent_dim, config.hidden)
    if config.standardize:
        head.shift.copy_(mu.mean(dim=0))
        head.scale.copy_(mu.std(dim=0).clamp_min(1e-12))
    weight = torch.as_tensor(balanced_weights(y), dtype=torch.float32) if config.balanced else None
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(head.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        for idx in _batches(len(target), config.batch_size, gen):
            loss = F.cross_entropy(head(mu[idx]), target[idx], weight=weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
    head.eval()
    if checksum(model) != before:
        raise RuntimeError("VAE parameters changed during head training")
    return head


@torch.no_grad()
def vaepad_score(model: VaeModel, head: MlpHead, images) -> np.ndarray:
    """Softmax probability of the attack class for each image.

    Rows go through the head one at a time for the same reason as ``encode``.
    """
    mu, _ = encode(model, images)
    mu = torch.as_tensor(mu, dtype=next(head.parameters()).dtype)
    with torch.no_grad():
        probs = [head.probabilities(row[None])[0, 1] for row in mu]
    return torch.stack(probs).double().numpy() if probs else np.zeros(0)


class VaePad:
    """A trained VAE with its MLP head, scored and archived as one unit."""

    def __init__(self, vae: VaeModel, head: MlpHead):
        self.vae = vae
        self.head = head

    def score_images(self, images) -> np.ndarray:
        return vaepad_score(self.vae, self.head, images)


def train_vaepad(images, labels, vae_config: VaeConfig | None = None,
                 head_config: HeadConfig | None = None) -> VaePad:
    """VAE on the bona fide subset, then the head on all labeled images."""
    labels = np.asarray(labels)
    live = ~attack_mask(labels)
    images = np.asarray(images)
    vae = train_vae(images[live], labels[live], vae_config)
    return VaePad(vae, train_mlp_head(vae, images, labels, head_config))


# ---------------------------------------------------------------------------
# CNN detector and threshold policies


@dataclass(frozen=True)
class ThresholdPolicy:
    kind: str = "fixed"  # "fixed" | "fdr_calibrated"
    value: float = 0.4  # threshold for "fixed", target FDR for "fdr_calibrated"

    def __post_init__(self):
        if self.kind not in ("fixed", "fdr_calibrated"):
            raise ValueError(f"unknown threshold policy {self.kind!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"policy value {self.value} outside [0, 1]")


FIXED_0_4 = ThresholdPolicy("fixed", 0.4)
FDR_0_2_PERCENT = ThresholdPolicy("fdr_calibrated", 0.002)


def resolve_threshold(policy: ThresholdPolicy, calibration=None) -> float:
    """Threshold implied by ``policy``; ``calibration`` is a
    ``(scores, labels)`` pair, required exactly when the policy calibrates."""
    if policy.kind == "fixed":
        if calibration is not None:
            raise ValueError("a fixed threshold policy takes no calibration set")
        return policy.value
    if calibration is None:
        raise ValueError("FDR-calibrated policy needs a calibration set")
    scores, labels = calibration
    return threshold_at_fdr(scores, labels, policy.value)


def apply_threshold(score, policy: ThresholdPolicy, calibration=None):
    """Attack decision(s): ``score >= threshold``."""
    tau = resolve_threshold(policy, calibration)
    decision = np.asarray(score, dtype=float) >= tau
    return bool(decision) if decision.ndim == 0 else decision


@dataclass
class CnnConfig:
    input_size: int = 64
    crop_fraction: float = 0.9
    channels: tuple = (8, 16, 32)
    epochs: int = 15
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    balanced: bool = True
    policy: ThresholdPolicy = field(default_factory=lambda: FIXED_0_4)


def center_crop_resize(x: torch.Tensor, fraction: float, size: int) -> torch.Tensor:
    """Central crop keeping ``fraction`` of each side, then bilinear resize.

    Stands in for iris segmentation followed by crop-and-resize.
    """
    h, w = x.shape[-2:]
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    x = x[..., top:top + ch, left:left + cw]
    if (ch, cw) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x


class CnnNet(nn.Module):
    def __init__(self, config: CnnConfig):
        super().__init__()
        layers, c_in = [], 1
        for c_out in config.channels:
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c_out
        side = config.input_size // 2 ** len(config.channels)
        self.features = nn.Sequential(*layers, nn.Flatten())
        self.out = nn.Linear(c_in * side * side, 1)

    def forward(self, x):
        return self.out(self.features(x)).squeeze(-1)


class CnnModel:
    """Trained CNN plus its threshold policy (and calibrated threshold)."""

    def __init__(self, config: CnnConfig, net: CnnNet | None = None, threshold: float | None = None):
        self.config = config
        self.net = net if net is not None else CnnNet(config)
        self.threshold = threshold if threshold is not None else (
            config.policy.value if config.policy.kind == "fixed" else None)
        self.train_meta = {}

    def preprocess(self, images):
        return center_crop_resize(to_tensor(images), self.config.crop_fraction, self.config.input_size)

    @torch.no_grad()
    def score_images(self, images, batch_size=128) -> np.ndarray:
        self.net.eval()
        x = self.preprocess(images)
        out = [torch.sigmoid(self.net(x[s:s + batch_size])) for s in range(0, x.shape[0], batch_size)]
        return torch.cat(out).double().numpy()

    def calibrate(self, val_images, val_labels) -> float:
        self.threshold = resolve_threshold(
            self.config.policy,
            (self.score_images(val_images), val_labels) if self.config.policy.kind != "fixed" else None,
        )
        return self.threshold

    def with_policy(self, policy: ThresholdPolicy) -> "CnnModel":
        """Same network under another threshold policy (uncalibrated)."""
        clone = CnnModel(replace(self.config, policy=policy), self.net)
        clone.train_meta = dict(self.train_meta)
        return clone

    def decide(self, images) -> np.ndarray:
        if self.threshold is None:
            raise RuntimeError("FDR-calibrated model has not been calibrated")
        return self.score_images(images) >= self.threshold


def train_cnn(images, labels, config: CnnConfig | None = None) -> CnnModel:
    """Binary cross-entropy training, deterministic given ``config.seed``."""
    config = config or CnnConfig()
    y = attack_mask(labels)
    if y.all() or not y.any():
        raise ValueError("CNN training needs both bona fide and attack samples")
    torch.manual_seed(config.seed)
    model = CnnModel(config)
    x = model.preprocess(images)
    target = torch.as_tensor(y.astype(np.float32))
    sample_weight = torch.ones_like(target)
    if config.balanced:
        w_bona, w_attack = balanced_weights(y)
        sample_weight = torch.where(target > 0, w_attack, w_bona).float()
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.lr)
    model.net.train()
    losses = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in _batches(len(target), config.batch_size, gen):
            loss = F.binary_cross_entropy_with_logits(model.net(x[idx]), target[idx],
                                                      weight=sample_weight[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(target))
    model.net.eval()
    model.train_meta = {"epoch_losses": losses, "N": len(target)}
    return model


# ---------------------------------------------------------------------------
# persistence


def _config_dict(config):
    d = asdict(config)
    if "policy" in d:
        d["policy"] = asdict(config.policy)
    return d


def _blob(obj) -> dict:
    if isinstance(obj, VaePad):
        vae, head = _blob(obj.vae), _blob(obj.head)
        header = {"type": "vaepad", "vae": vae["header"], "head": head["header"]}
        state = {"vae": vae["state_dict"], "head": head["state_dict"]}
    elif isinstance(obj, VaeModel):
        header = {"type": "vae", "config": _config_dict(obj.config), "meta": obj.meta,
                  "latent_dim": obj.latent_dim}
        state = obj.state_dict()
    elif isinstance(obj, MlpHead):
        header = {"type": "mlp_head", "in_features": obj.fc1.in_features, "hidden": obj.fc1.out_features}
        state = obj.state_dict()
    elif isinstance(obj, CnnModel):
        header = {"type": "cnn", "config": _config_dict(obj.config), "threshold": obj.threshold,
                  "meta": obj.train_meta}
        state = obj.net.state_dict()
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    return {"header": header, "state_dict": state}


def save_model(obj, path) -> Path:
    """Write a VaeModel, MlpHead, VaePad or CnnModel to one file with a header block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(_blob(obj), path)
    return path


def load_model(path):
    """Inverse of :func:`save_model`."""
    return _restore(torch.load(path, weights_only=False), path)


def _restore(blob, path):
    header, state = blob["header"], blob["state_dict"]
    kind = header["type"]
    if kind == "vaepad":
        return VaePad(_restore({"header": header["vae"], "state_dict": state["vae"]}, path),
                      _restore({"header": header["head"], "state_dict": state["head"]}, path))
    if kind == "vae":
        cfg = dict(header["config"])
        cfg["image_size"] = tuple(cfg["image_size"])
        model = VaeModel(VaeConfig(**cfg))
        model.load_state_dict(state)
        model.meta = header["meta"]
        model.eval()
        return model
    if kind == "mlp_head":
        head = MlpHead(header["in_features"], header["hidden"])
        head.load_state_dict(state)
        head.eval()
        return head
    if kind == "cnn":
        cfg = dict(header["config"])
        cfg["policy"] = ThresholdPolicy(**cfg["policy"])
        cfg["channels"] = tuple(cfg["channels"])
        config = CnnConfig(**cfg)
        net = CnnNet(config)
        net.load_state_dict(state)
        net.eval()
        model = CnnModel(config, net, header["threshold"])
        model.train_meta = header["meta"]
        return model
    raise ValueError(f"{path}: unknown model type {kind!r}")
