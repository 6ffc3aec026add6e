"""
Invertible flow stacks over block latents.

``forward`` maps a data-space latent z to base space ε and returns the log
absolute Jacobian determinant of that map per row; ``inverse`` maps back.
The base distribution is a standard normal of the latent dimension.
"""

from typing import List, Tuple

import numpy as np
import scipy.linalg
from loguru import logger

from binflow.autodiff import ops
from binflow.autodiff.tensor import Tensor, as_tensor, default_dtype, no_grad, parameter
from binflow.config import FlowConfig
from binflow.model.base import Linear, Module

FLOW_VARIANTS = ("scf", "glow", "none")


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    return (np.arange(dim) % 2 == parity % 2).astype(default_dtype())


def _zeros_per_row(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape[0], dtype=x.data.dtype))


class CouplingLayer(Module):
    """
    Affine coupling: masked dimensions pass through and condition a scale and
    shift of the others, ``y = x * exp(s(x_m)) + t(x_m)``.

    Scale outputs are bounded with ``bound * tanh(raw / bound)``; the last layer
    of both networks starts at zero so a fresh layer is the identity.
    """

    def __init__(self, dim: int, mask: np.ndarray, hidden: int, rng: np.random.Generator, scale_bound: float = 4.0):
        super().__init__()
        mask = np.asarray(mask, dtype=default_dtype())
        if mask.shape != (dim,) or not (mask == 0).any() or not (mask == 1).any():
            raise ValueError("Coupling mask needs at least one 0 and one 1 over the latent dimension")
        self.mask = mask
        self.scale_bound = scale_bound
        self.scale_in = Linear(dim, hidden, rng)
        self.scale_out = Linear(hidden, dim, rng, zero=True)
        self.shift_in = Linear(dim, hidden, rng)
        self.shift_out = Linear(hidden, dim, rng, zero=True)

    def scale_shift(self, x) -> Tuple[Tensor, Tensor]:
        free = 1.0 - self.mask
        held = ops.mul(x, self.mask)
        raw = self.scale_out(ops.relu(self.scale_in(held)))
        scale = ops.mul(ops.tanh(ops.mul(raw, 1.0 / self.scale_bound)), self.scale_bound)
        shift = self.shift_out(ops.relu(self.shift_in(held)))
        return ops.mul(scale, free), ops.mul(shift, free)

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        scale, shift = self.scale_shift(x)
        y = ops.add(ops.mul(x, ops.exp(scale)), shift)
        return y, ops.sum(scale, axis=-1)

    def inverse(self, y) -> Tensor:
        scale, shift = self.scale_shift(y)
        return ops.mul(ops.sub(y, shift), ops.exp(ops.neg(scale)))


class ActNorm(Module):
    """Per-dimension affine normalization ``y = (x + bias) * exp(log_scale)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.bias = parameter(np.zeros(dim, dtype=default_dtype()))
        self.log_scale = parameter(np.zeros(dim, dtype=default_dtype()))

    def initialize(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        self.bias.data = (-x.mean(axis=0)).astype(self.bias.data.dtype)
        std = x.std(axis=0) + 1e-6
        self.log_scale.data = (-np.log(std)).astype(self.log_scale.data.dtype)

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        y = ops.mul(ops.add(x, self.bias), ops.exp(self.log_scale))
        return y, ops.add(_zeros_per_row(x), ops.sum(self.log_scale))

    def inverse(self, y) -> Tensor:
        return ops.sub(ops.mul(y, ops.exp(ops.neg(self.log_scale))), self.bias)


class LULinear(Module):
    """
    Invertible linear map ``y = x W`` with ``W = P (L + I) (U + diag(sign * exp(log_s)))``.

    P and the diagonal signs are fixed at initialization from the LU
    decomposition of a random rotation.
    """

    buffers = ("perm", "sign")

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        rotation, _ = scipy.linalg.qr(rng.standard_normal((dim, dim)))
        perm, lower, upper = scipy.linalg.lu(rotation)
        diag = np.diag(upper)
        dtype = default_dtype()
        self.perm = perm.astype(dtype)
        self.sign = np.sign(diag).astype(dtype)
        self.lower_mask = np.tril(np.ones((dim, dim)), k=-1).astype(dtype)
        self.upper_mask = np.triu(np.ones((dim, dim)), k=1).astype(dtype)
        self.eye = np.eye(dim, dtype=dtype)
        self.lower = parameter((lower * self.lower_mask).astype(dtype))
        self.upper = parameter((upper * self.upper_mask).astype(dtype))
        self.log_s = parameter(np.log(np.abs(diag)).astype(dtype))

    def weight(self) -> Tensor:
        lower = ops.add(ops.mul(self.lower, self.lower_mask), self.eye)
        diag = ops.mul(self.eye, ops.mul(ops.exp(self.log_s), self.sign))
        upper = ops.add(ops.mul(self.upper, self.upper_mask), diag)
        return ops.matmul(ops.matmul(self.perm, lower), upper)

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        x = as_tensor(x)
        y = ops.matmul(x, self.weight())
        return y, ops.add(_zeros_per_row(x), ops.sum(self.log_s))

    def inverse(self, y) -> Tensor:
        return ops.matmul(y, ops.inverse(self.weight()))


class GlowStep(Module):
    """ActNorm, then the LU linear, then an affine coupling."""

    def __init__(self, dim: int, mask: np.ndarray, hidden: int, rng: np.random.Generator, scale_bound: float = 4.0):
        super().__init__()
        self.norm = ActNorm(dim)
        self.mix = LULinear(dim, rng)
        self.coupling = CouplingLayer(dim, mask, hidden, rng, scale_bound)

    def forward(self, x) -> Tuple[Tensor, Tensor]:
        x, ld_norm = self.norm.forward(x)
        x, ld_mix = self.mix.forward(x)
        x, ld_coupling = self.coupling.forward(x)
        return x, ops.add(ops.add(ld_norm, ld_mix), ld_coupling)

    def inverse(self, y) -> Tensor:
        return self.norm.inverse(self.mix.inverse(self.coupling.inverse(y)))


class FlowStack(Module):
    """
    K flow layers with alternating masks for one ISA.

    :param dim: latent dimension d
    :param config: variant (scf, glow or none), layer count K, hidden width
    :param direction: tag recorded with the stack (``source`` or ``target``)
    """

    def __init__(self, dim: int, config: FlowConfig, rng: np.random.Generator, direction: str = "source"):
        super().__init__()
        if config.variant not in FLOW_VARIANTS:
            raise ValueError(f"Unknown flow variant '{config.variant}', expected one of {FLOW_VARIANTS}")
        if config.variant != "none" and dim < 2:
            raise ValueError(f"Flows need a latent dimension of at least 2, got {dim}")
        self.dim = dim
        self.variant = config.variant
        self.direction = direction
        hidden = config.hidden or dim
        self.layers: List[Module] = []
        if config.variant == "scf":
            self.layers = [
                CouplingLayer(dim, alternating_mask(dim, k), hidden, rng, config.scale_bound) for k in range(config.count)
            ]
        elif config.variant == "glow":
            self.layers = [
                GlowStep(dim, alternating_mask(dim, k), hidden, rng, config.scale_bound) for k in range(config.count)
            ]

    def _check(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[-1] != self.dim:
            raise ValueError(f"Flow expects latents of shape (batch, {self.dim}), got {z.shape}")
        return z

    def forward(self, z) -> Tuple[Tensor, Tensor]:
        x = self._check(z)
        log_det = _zeros_per_row(x)
        for layer in self.layers:
            x, ld = layer.forward(x)
            log_det = ops.add(log_det, ld)
        return x, log_det

    def inverse(self, eps) -> Tensor:
        x = self._check(eps)
        for layer in reversed(self.layers):
            x = layer.inverse(x)
        return x

    def initialize(self, z: np.ndarray) -> None:
        """Data-dependent ActNorm initialization for glow stacks."""
        if self.variant != "glow":
            return
        with no_grad():
            x = self._check(np.asarray(z))
            for layer in self.layers:
                layer.norm.initialize(x.data)
                x, _ = layer.forward(x)
        logger.debug(f"Initialized ActNorm of {len(self.layers)} glow steps on {z.shape[0]} latents")


def flow_forward(z, stack: FlowStack) -> Tuple[Tensor, Tensor]:
    """Map data-space latents to base space: returns (ε, log|det J|) per row."""
    return stack.forward(z)


def flow_inverse(eps, stack: FlowStack) -> Tensor:
    return stack.inverse(eps)


def transform_latent(z_src, src_stack: FlowStack, tgt_stack: FlowStack) -> Tensor:
    """Carry a source latent into the target latent space through the shared base space."""
    if src_stack.dim != tgt_stack.dim:
        raise ValueError(f"Flow stacks disagree on latent dimension: {src_stack.dim} vs {tgt_stack.dim}")
    eps, _ = src_stack.forward(z_src)
    return tgt_stack.inverse(eps)


def nll_loss(z_batch, stack: FlowStack) -> Tensor:
    """Mean negative log-likelihood of latents under the stack's density."""
    eps, log_det = stack.forward(z_batch)
    return ops.neg(ops.mean(ops.add(ops.log_standard_normal(eps), log_det)))


def log_density(z_batch, stack: FlowStack) -> np.ndarray:
    with no_grad():
        eps, log_det = stack.forward(z_batch)
        return ops.add(ops.log_standard_normal(eps), log_det).data


def build_flow_pair(dim: int, config: FlowConfig, rng: np.random.Generator, isas: Tuple[str, str]) -> dict:
    return {
        isas[0]: FlowStack(dim, config, rng, direction="source"),
        isas[1]: FlowStack(dim, config, rng, direction="target"),
    }

