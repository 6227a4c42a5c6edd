"""Small building blocks shared by the codec and the speech autoencoder."""

import torch
import torch.nn as nn


def causal_frame_count(n_frames: int, ratio: int) -> int:
    """Number of compressed frames when the first frame maps alone."""
    return 1 + (n_frames - 1) // ratio


class CausalConv1d(nn.Module):
    """1-D convolution over time that only looks backwards.

    The input is left-padded by replicating the first frame ``kernel - 1``
    times, so output ``i`` sees inputs ``<= i * stride``. With
    ``stride == ratio`` a sequence of ``1 + m * ratio`` frames yields
    ``1 + m`` outputs and output 0 depends on frame 0 alone.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1):
        super().__init__()
        if kernel < stride:
            raise ValueError(f"kernel {kernel} must be >= stride {stride}")
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, T)
        if self.kernel > 1:
            pad = x[:, :, :1].expand(-1, -1, self.kernel - 1)
            x = torch.cat([pad, x], dim=2)
        return self.conv(x)


class CausalUpsample1d(nn.Module):
    """Inverse of a strided causal conv: each input frame expands to ``ratio``
    output frames, and the first ``ratio - 1`` outputs are dropped so that
    ``1 + m`` inputs give ``1 + m * ratio`` outputs."""

    def __init__(self, in_ch: int, out_ch: int, ratio: int):
        super().__init__()
        self.ratio = ratio
        self.conv = nn.ConvTranspose1d(in_ch, out_ch, ratio, stride=ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        return y[:, :, self.ratio - 1:]


def frame_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


def check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{what} contains non-finite values")


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype if dtype is not None else torch.float32)


__all__ = [
    "CausalConv1d",
    "CausalUpsample1d",
    "causal_frame_count",
    "check_finite",
    "frame_mlp",
    "as_tensor",
]
