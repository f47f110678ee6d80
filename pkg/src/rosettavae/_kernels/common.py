"""Shared layout logic for the training-step kernels.

Both kernel backends work on a single flat float64 parameter vector.
The canonical tensor order is: encoder trunk (W, b per layer), the mean
head, the log-diagonal head, the lower-triangle head (W then b each),
then the decoder (W, b per layer). ModelLayout maps tensor names to
slices of that vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACT_RELU = 0
ACT_TANH = 1
ACT_IDENTITY = 2

ACT_CODES = {"relu": ACT_RELU, "tanh": ACT_TANH, "identity": ACT_IDENTITY}


@dataclass(frozen=True)
class ModelLayout:
    act: int
    enc_widths: tuple[int, ...]  # (input_dim, *hidden)
    latent: int
    dec_widths: tuple[int, ...]  # (latent_dim, *reversed(hidden), input_dim)
    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    total: int

    def pack(self, tensors) -> np.ndarray:
        flat = np.empty(self.total)
        for name, shape, off in zip(self.names, self.shapes, self.offsets):
            arr = tensors[name]
            if tuple(arr.shape) != shape:
                raise ValueError(f"tensor '{name}' has shape {arr.shape}, expected {shape}")
            size = int(np.prod(shape))
            flat[off : off + size] = np.asarray(arr, dtype=np.float64).ravel()
        return flat

    def unpack(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Named views into the flat vector (no copies)."""
        out = {}
        for name, shape, off in zip(self.names, self.shapes, self.offsets):
            size = int(np.prod(shape))
            out[name] = flat[off : off + size].reshape(shape)
        return out


def build_layout(activation: str, input_dim: int, hidden: tuple[int, ...], latent: int) -> ModelLayout:
    enc_widths = (input_dim,) + tuple(hidden)
    dec_widths = (latent,) + tuple(reversed(hidden)) + (input_dim,)
    trunk_out = enc_widths[-1]
    n_lower = latent * (latent - 1) // 2

    names: list[str] = []
    shapes: list[tuple[int, ...]] = []
    for i in range(len(hidden)):
        names += [f"enc.W{i}", f"enc.b{i}"]
        shapes += [(enc_widths[i + 1], enc_widths[i]), (enc_widths[i + 1],)]
    for head, width in (("mu", latent), ("logdiag", latent), ("lower", n_lower)):
        names += [f"{head}.W0", f"{head}.b0"]
        shapes += [(width, trunk_out), (width,)]
    for i in range(len(dec_widths) - 1):
        names += [f"dec.W{i}", f"dec.b{i}"]
        shapes += [(dec_widths[i + 1], dec_widths[i]), (dec_widths[i + 1],)]

    offsets: list[int] = []
    off = 0
    for shape in shapes:
        offsets.append(off)
        off += int(np.prod(shape))
    return ModelLayout(
        act=ACT_CODES[activation],
        enc_widths=enc_widths,
        latent=latent,
        dec_widths=dec_widths,
        names=tuple(names),
        shapes=tuple(shapes),
        offsets=tuple(offsets),
        total=off,
    )
