"""One full forward pass of the dual architecture.

Given ``I_A`` and ``I_B`` the pass produces

* ``f_AB = sigma(I_A, I_B)``, ``f_BA = sigma(I_B, I_A)`` and the first-stage
  warps ``w_AB = I_A (x) f_AB``, ``w_BA = I_B (x) f_BA``;
* ``f_ABA = sigma(w_AB, w_BA)``, ``f_BAB = sigma(w_BA, w_AB)`` and the
  reconstructions ``w_ABA = w_AB (x) f_ABA``, ``w_BAB = w_BA (x) f_BAB``.

Every image is encoded once, by the encoder of its own spectrum; warped images
keep the spectrum of their source.
"""

from dataclasses import dataclass

import torch

from .errors import ContractViolation
from .flowmodule import SigmaModel, sigma_forward
from .warp import ImageTensor, bilinear_warp

__all__ = ["CycleOutputs", "SigmaModel", "forward_cycle", "infer_flows", "select_encoder", "sigma_forward"]


@dataclass
class CycleOutputs:
    f_AB: torch.Tensor
    f_BA: torch.Tensor
    f_ABA: torch.Tensor
    f_BAB: torch.Tensor
    w_AB: ImageTensor
    w_BA: ImageTensor
    w_ABA: ImageTensor
    w_BAB: ImageTensor

    def flows(self):
        return {"f_AB": self.f_AB, "f_BA": self.f_BA, "f_ABA": self.f_ABA, "f_BAB": self.f_BAB}

    def images(self):
        return {"w_AB": self.w_AB, "w_BA": self.w_BA, "w_ABA": self.w_ABA, "w_BAB": self.w_BAB}


def select_encoder(model, spectrum):
    """Encoder registered for ``spectrum``; raises ConfigError when unknown."""
    return model.select_encoder(spectrum)


def _check_pair(I_A, I_B, model):
    if I_A.hw != I_B.hw:
        raise ContractViolation(f"I_A dims {I_A.hw} differ from I_B dims {I_B.hw}")
    if I_A.data.shape[0] != I_B.data.shape[0]:
        raise ContractViolation("I_A and I_B batch sizes differ")
    if I_A.spectrum == I_B.spectrum:
        raise ContractViolation(f"both inputs are tagged {I_A.spectrum!r}; a cross-spectral model needs distinct tags")
    select_encoder(model, I_A.spectrum)
    select_encoder(model, I_B.spectrum)


def _second_stage(img, mask):
    return ImageTensor(img.data, img.spectrum, mask)


def forward_cycle(I_A, I_B, model):
    _check_pair(I_A, I_B, model)
    hw = I_A.hw
    pyr_A = model.encode(I_A)
    pyr_B = model.encode(I_B)
    f_AB = model.estimate(pyr_A, pyr_B, hw)
    f_BA = model.estimate(pyr_B, pyr_A, hw)
    w_AB = bilinear_warp(I_A, f_AB)
    w_BA = bilinear_warp(I_B, f_BA)

    # Second-stage inputs carry the product of the first-stage warped masks.
    joint = w_AB.valid * w_BA.valid
    s_AB = _second_stage(w_AB, joint)
    s_BA = _second_stage(w_BA, joint)
    pyr_sAB = model.encode(s_AB)
    pyr_sBA = model.encode(s_BA)
    f_ABA = model.estimate(pyr_sAB, pyr_sBA, hw)
    f_BAB = model.estimate(pyr_sBA, pyr_sAB, hw)
    w_ABA = bilinear_warp(s_AB, f_ABA)
    w_BAB = bilinear_warp(s_BA, f_BAB)
    return CycleOutputs(f_AB, f_BA, f_ABA, f_BAB, w_AB, w_BA, w_ABA, w_BAB)


@torch.no_grad()
def infer_flows(I_A, I_B, model):
    """First-stage flows ``(f_AB, f_BA)`` without building a graph."""
    _check_pair(I_A, I_B, model)
    pyr_A = model.encode(I_A)
    pyr_B = model.encode(I_B)
    return model.estimate(pyr_A, pyr_B, I_A.hw), model.estimate(pyr_B, pyr_A, I_A.hw)
