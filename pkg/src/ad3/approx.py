"""Differentiable-approximator toolkit shared by every training module.

Maps are plain ``torch.nn`` modules produced by :func:`build_map` from a small
descriptor vocabulary, with declared input/output shapes checked at call time.
Optimization goes through :class:`ParamSet` (named parameter views with a
version counter) and :class:`Adam` (explicit bias-corrected update so that
non-finite gradients abort with the offending array named).

:func:`grad_check` is the verification harness used by the acceptance suite:
central finite differences against autograd on a sampled subset of
coordinates. Losses handed to it must be deterministic; the convention across
this package is that stochastic nodes draw from a ``torch.Generator`` the
caller re-seeds per evaluation.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, NumericsError

STD_FLOOR = 0.1


@contextlib.contextmanager
def precision(dtype: str):
    """Globally switch the default float dtype ("float32" or "float64")."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(getattr(torch, dtype))
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# ---------------------------------------------------------------------------
# Shaped maps
# ---------------------------------------------------------------------------

class ShapedModule(nn.Module):
    """Mixin giving a map a declared trailing input shape, checked on call."""

    in_shape: tuple[int, ...] = ()
    map_name: str = "map"

    def _check(self, x: torch.Tensor) -> None:
        k = len(self.in_shape)
        if tuple(x.shape[-k:]) != self.in_shape:
            raise ContractError(
                f"{self.map_name}: expected trailing input shape {self.in_shape}, "
                f"got {tuple(x.shape)}")


class Mlp(ShapedModule):
    def __init__(self, sizes: list[int], activation: str = "relu", name: str = "mlp"):
        super().__init__()
        if len(sizes) < 2:
            raise ContractError("mlp needs at least input and output sizes")
        self.map_name = name
        self.in_shape = (sizes[0],)
        self.out_dim = sizes[-1]
        self.layers = nn.ModuleList(
            nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1))
        self.act = getattr(F, activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class ConvEncoder(ShapedModule):
    """Strided conv stack + linear head mapping (C, H, W) images to a vector."""

    def __init__(self, in_shape: tuple[int, int, int], channels: list[int],
                 out_dim: int, norm: str | None = None, name: str = "conv_encoder"):
        super().__init__()
        self.map_name = name
        self.in_shape = tuple(in_shape)
        self.out_dim = out_dim
        c, h, w = in_shape
        convs = []
        for ch in channels:
            convs.append(nn.Conv2d(c, ch, kernel_size=4, stride=2, padding=1))
            if norm == "batch":
                convs.append(nn.BatchNorm2d(ch))
            convs.append(nn.ReLU())
            c, h, w = ch, h // 2, w // 2
        if h < 1 or w < 1:
            raise ContractError(f"{name}: input {in_shape} too small for {len(channels)} stages")
        self.convs = nn.Sequential(*convs)
        self.head = nn.Linear(c * h * w, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        lead = x.shape[:-3]
        x = x.reshape(-1, *self.in_shape)
        x = self.convs(x)
        x = self.head(x.flatten(1))
        return x.reshape(*lead, self.out_dim)


class DeconvDecoder(ShapedModule):
    """Linear seed + transposed conv stack mapping a vector to (C, H, W)."""

    def __init__(self, in_dim: int, out_shape: tuple[int, int, int],
                 channels: list[int], name: str = "deconv_decoder"):
        super().__init__()
        self.map_name = name
        self.in_shape = (in_dim,)
        self.out_shape = tuple(out_shape)
        c_out, h, w = out_shape
        n = len(channels) + 1
        self.h0, self.w0 = h // (2 ** n), w // (2 ** n)
        if self.h0 < 1 or self.w0 < 1:
            raise ContractError(f"{name}: output {out_shape} too small for {n} stages")
        self.seed_ch = channels[0] * 2 if channels else 32
        self.head = nn.Linear(in_dim, self.seed_ch * self.h0 * self.w0)
        deconvs = []
        c = self.seed_ch
        for ch in channels:
            deconvs.append(nn.ConvTranspose2d(c, ch, kernel_size=4, stride=2, padding=1))
            deconvs.append(nn.ReLU())
            c = ch
        deconvs.append(nn.ConvTranspose2d(c, c_out, kernel_size=4, stride=2, padding=1))
        self.deconvs = nn.Sequential(*deconvs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        lead = x.shape[:-1]
        x = self.head(x.reshape(-1, self.in_shape[0]))
        x = x.reshape(-1, self.seed_ch, self.h0, self.w0)
        x = self.deconvs(x)
        return x.reshape(*lead, *self.out_shape)


class RecurrentCell(ShapedModule):
    """GRU cell with layer normalization on the gate pre-activations."""

    def __init__(self, input_dim: int, hidden_dim: int, name: str = "recurrent_cell"):
        super().__init__()
        self.map_name = name
        self.in_shape = (input_dim,)
        self.hidden_dim = hidden_dim
        self.lin = nn.Linear(input_dim + hidden_dim, 3 * hidden_dim)
        self.norm = nn.LayerNorm(3 * hidden_dim)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        self._check(x)
        if h.shape[-1] != self.hidden_dim:
            raise ContractError(f"{self.map_name}: hidden dim {h.shape[-1]} != {self.hidden_dim}")
        gates = self.norm(self.lin(torch.cat([x, h], dim=-1)))
        reset, cand, update = gates.chunk(3, dim=-1)
        reset = torch.sigmoid(reset)
        cand = torch.tanh(reset * cand)
        update = torch.sigmoid(update - 1.0)
        return update * cand + (1 - update) * h


def build_map(spec: dict) -> nn.Module:
    """Construct a shaped differentiable map from a descriptor dict."""
    kind = spec.get("kind")
    name = spec.get("name", kind or "map")
    if kind == "mlp":
        return Mlp(spec["sizes"], activation=spec.get("activation", "relu"), name=name)
    if kind == "conv_encoder":
        return ConvEncoder(spec["in_shape"], spec["channels"], spec["out_dim"],
                           norm=spec.get("norm"), name=name)
    if kind == "deconv_decoder":
        return DeconvDecoder(spec["in_dim"], spec["out_shape"], spec["channels"], name=name)
    if kind == "recurrent_cell":
        return RecurrentCell(spec["input_dim"], spec["hidden_dim"], name=name)
    raise ContractError(f"unknown map kind {kind!r}")


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------

class ParamSet:
    """Named view over the parameters (and buffers) of one logical component."""

    def __init__(self, name: str, modules: dict[str, nn.Module]):
        self.name = name
        self.modules = dict(modules)
        self.version = 0
        self._params = {}
        for mod_name, mod in self.modules.items():
            for p_name, p in mod.named_parameters():
                self._params[f"{name}.{mod_name}.{p_name}"] = p

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return dict(self._params)

    def parameters(self):
        return list(self._params.values())

    def named_buffers(self) -> dict[str, torch.Tensor]:
        out = {}
        for mod_name, mod in self.modules.items():
            for b_name, b in mod.named_buffers():
                out[f"{self.name}.{mod_name}.{b_name}"] = b
        return out

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor | None]:
        return {k: p.grad for k, p in self._params.items()}


class Adam:
    """First-order moment-adaptive optimizer with explicit bias correction."""

    def __init__(self, params: ParamSet, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: torch.zeros_like(p) for k, p in params.named_parameters().items()}
        self._v = {k: torch.zeros_like(p) for k, p in params.named_parameters().items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.named_parameters().items()}
        self.t += 1
        for name, p in self.params.named_parameters().items():
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for {name}")
            m = self._m[name].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v = self._v[name].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p.sub_(self.lr * m_hat / (v_hat.sqrt() + self.eps))
        self.params.version += 1


def adam_step(params: ParamSet, grads: dict[str, torch.Tensor], lr: float,
              state: Adam | None = None) -> Adam:
    """One Adam update; returns the optimizer state for chaining further steps."""
    opt = state if state is not None else Adam(params, lr)
    opt.lr = lr
    opt.step(grads)
    return opt


# ---------------------------------------------------------------------------
# Stochastic nodes
# ---------------------------------------------------------------------------

@dataclass
class DiagGaussian:
    """Diagonal Gaussian; stddev already floored strictly positive."""

    mean: torch.Tensor
    std: torch.Tensor

    @classmethod
    def from_raw(cls, mean: torch.Tensor, raw_std: torch.Tensor) -> "DiagGaussian":
        return cls(mean, STD_FLOOR + F.softplus(raw_std))

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * eps

    def kl(self, other: "DiagGaussian") -> torch.Tensor:
        """KL(self || other), summed over the event dimension."""
        var_ratio = (self.std / other.std) ** 2
        t1 = ((self.mean - other.mean) / other.std) ** 2
        return 0.5 * (var_ratio + t1 - 1.0 - var_ratio.log()).sum(-1)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        z = (x - self.mean) / self.std
        return (-0.5 * z ** 2 - self.std.log() - 0.5 * math.log(2 * math.pi)).sum(-1)


def gaussian_nll(mean: torch.Tensor, target: torch.Tensor, event_dims: int = 1) -> torch.Tensor:
    """Negative log-likelihood under a unit-variance Gaussian, summed over the
    trailing ``event_dims`` dimensions."""
    err = 0.5 * (mean - target) ** 2 + 0.5 * math.log(2 * math.pi)
    if event_dims == 0:
        return err
    return err.reshape(*err.shape[:-event_dims], -1).sum(-1)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0
    nonfinite: list = field(default_factory=list)


def grad_check(loss_fn, params: ParamSet, n_coords: int = 200,
               h: float = 1e-5, seed: int = 0) -> GradCheckResult:
    """Central finite differences vs. autograd on sampled coordinates.

    ``loss_fn`` takes no arguments, returns a scalar tensor, and must be
    deterministic across calls (freeze any sampling by re-seeding inside).
    """
    named = params.named_parameters()
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for k, p in named.items()}

    coords = [(k, i) for k, p in named.items() for i in range(p.numel())]
    rng = torch.Generator().manual_seed(seed)
    if len(coords) > n_coords:
        idx = torch.randperm(len(coords), generator=rng)[:n_coords]
        coords = [coords[i] for i in idx]

    result = GradCheckResult(max_rel_err=0.0, n_checked=len(coords))
    with torch.no_grad():
        for name, i in coords:
            p = named[name]
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(analytic[name].view(-1)[i])
            if not (math.isfinite(fd) and math.isfinite(an)):
                result.nonfinite.append((name, i))
                continue
            denom = max(abs(fd), abs(an))
            rel = 0.0 if denom < 1e-8 else abs(fd - an) / denom
            if rel > result.max_rel_err:
                result.max_rel_err = rel
                result.worst_param, result.worst_index = name, i
    return result
