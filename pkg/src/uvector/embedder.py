"""Frame embedder, siamese distance head and the two training objectives.

The embedder is a small convolutional stack followed by a dense layer with
``embed_dim`` units. Pairwise training regresses the clamped embedding
distance of a frame pair onto its constraint target (0 or alpha); the triplet
baseline uses L2-normalized embeddings with semi-hard negative mining.
Parameter updates use :func:`adam_update`, written out here rather than taken
from ``torch.optim`` so optimizer state can be checkpointed field by field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

EMBED_DIM = 12


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    batch_size: int = 128
    learning_rate: float = 5e-4
    patience_epochs: int = 1500
    max_epochs: int = 5000
    margin: float = 0.2
    mode: str = "pairwise"
    thres_range: tuple = (0.0, 0.07)
    eval_every: int = 1

    def __post_init__(self):
        self.thres_range = tuple(float(t) for t in self.thres_range)
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in ("pairwise", "triplet"):
            raise ValueError(f"mode must be 'pairwise' or 'triplet', got {self.mode!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.patience_epochs < 0 or self.max_epochs < 1 or self.eval_every < 1:
            raise ValueError("patience_epochs >= 0, max_epochs >= 1 and eval_every >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class NetConfig:
    input_shape: tuple = (100, 91)
    embed_dim: int = EMBED_DIM
    channels: tuple = (8, 16, 16)
    first_stride: int = 2
    normalize: bool = False  # unit-norm outputs (triplet mode)
    # scale on the He-normal dense head; keeps initial pair distances well
    # inside alpha, where the clamped distance still has a gradient
    head_gain: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be at least 2")


class EmbedderNet(nn.Module):
    """Conv(3x3)+ReLU+MaxPool(2) blocks, flatten, dense ``embed_dim``."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        c_in = 1
        for i, c_out in enumerate(cfg.channels):
            stride = cfg.first_stride if i == 0 else 1
            layers += [nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = c_out
        self.body = nn.Sequential(*layers)
        try:
            with torch.no_grad():
                n_flat = self.body(torch.zeros(1, 1, *cfg.input_shape)).numel()
        except RuntimeError:
            n_flat = 0
        if n_flat == 0:
            raise ValueError(f"input shape {cfg.input_shape} is too small for {len(cfg.channels)} blocks")
        self.head = nn.Linear(n_flat, cfg.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) != self.cfg.input_shape:
            raise ValueError(f"feature map shape {tuple(x.shape[-2:])} does not match "
                             f"network input {self.cfg.input_shape}")
        squeeze = x.dim() == 2
        x = x.reshape(-1, 1, *self.cfg.input_shape)
        e = self.head(self.body(x).flatten(1))
        if self.cfg.normalize:
            e = e / torch.linalg.vector_norm(e, dim=1, keepdim=True).clamp_min(1e-12)
        return e[0] if squeeze else e


def init_net(seed: int, embed_dim: int = EMBED_DIM, **kwargs) -> EmbedderNet:
    """He-normal weights (dense head scaled by ``head_gain``) and zero biases,
    drawn from a NumPy generator seeded with ``seed``."""
    net = EmbedderNet(NetConfig(embed_dim=embed_dim, **kwargs))
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                w = rng.standard_normal(tuple(p.shape)) * np.sqrt(2.0 / fan_in)
                if name.startswith("head."):
                    w *= net.cfg.head_gain
                p.copy_(torch.from_numpy(w))
    return net


def _tensor(x, net: nn.Module) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def forward(net: EmbedderNet, fmap) -> np.ndarray:
    """Embedding of one feature map (or a stack of them), without gradients."""
    with torch.no_grad():
        return net(_tensor(fmap, net)).numpy()


def embed(net: EmbedderNet, fmaps, chunk: int = 512) -> np.ndarray:
    fmaps = np.asarray(fmaps)
    with torch.no_grad():
        outs = [net(_tensor(fmaps[i:i + chunk], net)).numpy() for i in range(0, len(fmaps), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0, net.cfg.embed_dim))


# ---------------------------------------------------------------------------
# Siamese head


def thresholded_relu(x, alpha: float):
    """x below alpha, alpha from alpha upwards (gradient 0 there). NaN passes
    through so that a diverged loss is still detected."""
    if isinstance(x, torch.Tensor):
        return torch.where(x >= alpha, torch.full_like(x, alpha), x)
    return alpha if x >= alpha else x


def euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise Euclidean distance, exactly 0 (with zero gradient) for equal rows."""
    sq = torch.sum((a - b) ** 2, dim=-1)
    # the clamp keeps sqrt's gradient finite in the unselected branch
    return torch.where(sq == 0, torch.zeros_like(sq), torch.sqrt(sq.clamp_min(torch.finfo(sq.dtype).tiny)))


def siamese_distance(net: EmbedderNet, fmap_a, fmap_b, alpha: float = 1.0) -> torch.Tensor:
    """Clamped distance between the embeddings of two inputs, in [0, alpha]."""
    a, b = _tensor(fmap_a, net), _tensor(fmap_b, net)
    if a.shape != b.shape:
        raise ValueError(f"input shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return thresholded_relu(euclidean(net(a), net(b)), alpha)


def pairwise_loss(net: EmbedderNet, left, right, target, alpha: float = 1.0) -> torch.Tensor:
    """Mean squared error between clamped pair distances and targets."""
    d = siamese_distance(net, left, right, alpha)
    return torch.mean((d - _tensor(target, net)) ** 2)


# ---------------------------------------------------------------------------
# Semi-hard triplet loss


def pairwise_distances(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return euclidean(x[:, None, :], y[None, :, :])


def select_semi_hard(d_ap: np.ndarray, d_an: np.ndarray, valid: np.ndarray, margin: float) -> np.ndarray:
    """Index of the chosen negative for each anchor.

    Among valid candidates the closest one with ``d_ap < d_an < d_ap + margin``
    wins; when there is none, the closest valid candidate (hardest negative).
    """
    d_ap = np.asarray(d_ap)[:, None]
    inf = np.inf
    semi = valid & (d_an > d_ap) & (d_an < d_ap + margin)
    semi_pick = np.argmin(np.where(semi, d_an, inf), axis=1)
    hard_pick = np.argmin(np.where(valid, d_an, inf), axis=1)
    if not np.all(valid.any(axis=1)):
        raise ValueError("every anchor needs at least one negative candidate")
    return np.where(semi.any(axis=1), semi_pick, hard_pick)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, pool: torch.Tensor,
                 anchor_labels, pool_labels, margin: float = 0.2) -> torch.Tensor:
    """Hinge loss mean(max(0, d(a,p) - d(a,n) + margin)) with semi-hard
    negatives mined from ``pool`` (embeddings whose label differs from the
    anchor's)."""
    d_ap = euclidean(anchor, positive)
    d_an = pairwise_distances(anchor, pool)
    valid = np.asarray(anchor_labels)[:, None] != np.asarray(pool_labels)[None, :]
    pick = select_semi_hard(d_ap.detach().numpy(), d_an.detach().numpy(), valid, margin)
    d_neg = d_an[torch.arange(len(pick)), torch.as_tensor(pick)]
    return torch.mean(torch.relu(d_ap - d_neg + margin))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(net: nn.Module) -> OptimizerState:
    params = list(net.parameters())
    return OptimizerState([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_update(params, grads, state: OptimizerState, lr: float):
    """One bias-corrected Adam step, applied to ``params`` in place."""
    params = list(params)
    if len(params) != len(state.m) or any(p.shape != m.shape for p, m in zip(params, state.m)):
        raise ValueError("optimizer state does not match the parameter shapes")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            g = torch.zeros_like(p) if g is None else g
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return params, state


def _step(net, opt, loss, cfg: TrainConfig) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        worst = max(float(p.detach().abs().max()) for p in net.parameters())
        raise NonFiniteLossError(f"loss became {value} at optimizer step {opt.step + 1} "
                                 f"(largest |parameter| {worst:.3g})")
    params = list(net.parameters())
    for p in params:
        p.grad = None
    loss.backward()
    adam_update(params, [p.grad for p in params], opt, cfg.learning_rate)
    return value


def pairwise_step(net: EmbedderNet, opt: OptimizerState, left, right, target, cfg: TrainConfig):
    """One Adam step on the pairwise loss of rendered feature maps."""
    net.train()
    loss = pairwise_loss(net, left, right, target, cfg.alpha)
    return net, opt, _step(net, opt, loss, cfg)


def triplet_step(net: EmbedderNet, opt: OptimizerState, anchor, positive, negative, labels, cfg: TrainConfig):
    """One Adam step on the semi-hard triplet loss.

    ``labels`` is ``(anchor_labels, positive_labels, negative_labels)``; every
    batch item with a label different from an anchor's is a negative
    candidate for it.
    """
    net.train()
    x = torch.cat([_tensor(anchor, net), _tensor(positive, net), _tensor(negative, net)])
    e = net(x)
    b = len(anchor)
    la, lp, ln = (np.asarray(l) for l in labels)
    loss = triplet_loss(e[:b], e[b:2 * b], e, la, np.concatenate([la, lp, ln]), cfg.margin)
    return net, opt, _step(net, opt, loss, cfg)


# ---------------------------------------------------------------------------
# Gradient verification


def gradient_errors(net: EmbedderNet, loss_fn, eps: float = 1e-4, max_coords: int | None = None,
                    seed: int = 0, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error between autograd and central-difference gradients,
    per parameter tensor.

    ``loss_fn(net)`` must return a scalar tensor. The relative error of one
    coordinate is ``|a - n| / max(|a|, |n|, floor)``. With ``max_coords`` only
    that many randomly chosen coordinates of each tensor are probed.
    """
    params = dict(net.named_parameters())
    for p in params.values():
        p.grad = None
    loss_fn(net).backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and len(idx) > max_coords:
                idx = rng.choice(idx, size=max_coords, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn(net).item()
                flat[i] = orig - eps
                down = loss_fn(net).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = analytic[name].view(-1)[i].item()
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
            out[name] = worst
    return out


def grad_check(net: EmbedderNet, left, right, target, alpha: float = 1.0, eps: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative gradient error of the pairwise loss over all parameters."""
    errs = gradient_errors(net, lambda n: pairwise_loss(n, left, right, target, alpha), eps, max_coords, seed)
    return max(errs.values())


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is an .npz archive with:
#   header         JSON: {"net": NetConfig, "train": TrainConfig, "extra": {...}}
#   names          parameter names in order
#   param/<name>   parameter values (float32)
#   adam_m/<name>, adam_v/<name>   Adam moments
#   step           Adam step counter


def save_checkpoint(path, net: EmbedderNet, opt: OptimizerState, cfg: TrainConfig, extra: dict | None = None) -> None:
    header = {"net": asdict(net.cfg), "train": asdict(cfg), "extra": extra or {},
              "adam": {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}}
    names = [n for n, _ in net.named_parameters()]
    arrays = {"header": np.array(json.dumps(header, sort_keys=True)), "names": np.array(names),
              "step": np.array(opt.step, dtype=np.int64)}
    for (n, p), m, v in zip(net.named_parameters(), opt.m, opt.v):
        arrays[f"param/{n}"] = p.detach().numpy()
        arrays[f"adam_m/{n}"] = m.numpy()
        arrays[f"adam_v/{n}"] = v.numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(net, opt, train_cfg, extra)``."""
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        net = EmbedderNet(NetConfig(**header["net"]))
        names = [str(n) for n in z["names"]]
        params = dict(net.named_parameters())
        if names != list(params):
            raise ValueError(f"{path}: parameter layout does not match the network")
        opt = init_optimizer(net)
        opt.step = int(z["step"])
        opt.beta1, opt.beta2, opt.eps = (header["adam"][k] for k in ("beta1", "beta2", "eps"))
        with torch.no_grad():
            for i, n in enumerate(names):
                params[n].copy_(torch.from_numpy(z[f"param/{n}"]))
                opt.m[i].copy_(torch.from_numpy(z[f"adam_m/{n}"]))
                opt.v[i].copy_(torch.from_numpy(z[f"adam_v/{n}"]))
    return net, opt, TrainConfig.from_dict(header["train"]), header["extra"]
