"""Few-shot shape detection on a dense f64 autodiff core."""

from ._core import (
    Tensor,
    add,
    conv2d,
    cosine_map,
    coupling_forward,
    cross_entropy,
    gap,
    gmp,
    hadamard,
    inter_dam,
    intra_dam,
    iou,
    l1_loss,
    l2_normalize,
    linear,
    matmul,
    relu,
    run,
    run_grad_check,
    scale,
    shape_name,
    sigmoid,
    softmax,
    transpose,
    voc_ap,
    __version__,
)

__all__ = [
    "Tensor", "add", "conv2d", "cosine_map", "coupling_forward", "cross_entropy",
    "gap", "gmp", "hadamard", "inter_dam", "intra_dam", "iou", "l1_loss",
    "l2_normalize", "linear", "matmul", "relu", "run", "run_grad_check", "scale",
    "shape_name", "sigmoid", "softmax", "transpose", "voc_ap", "__version__",
]
