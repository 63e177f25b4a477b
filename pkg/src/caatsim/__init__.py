"""caatsim: deterministic simulator of tensor-parallel transformer
training where the activation all-reduce is replaced by a partial
channel-reduce, plus exact communication accounting and an analytic
compute/communication cost model."""

from caatsim.kernels import (
    PrecisionMode,
    ShapeMismatchError,
    activation,
    activation_backward,
    finite_difference_grad,
    matmul,
    rmsnorm,
    rmsnorm_backward,
    round_emulated16,
    softmax_ce_loss,
)

__version__ = "0.1.0"
