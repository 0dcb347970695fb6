"""Stability analysis toolkit for next-token predictions.

Computes the token constraint bound (the hidden-state perturbation radius
that keeps the output distribution within a tolerance, to first order) and
its companion metrics from exported model tensors, and validates every
closed form against brute-force oracles and synthetic ensembles.
"""

__version__ = "0.1.0"

from .approx import (
    ApproxEstimate,
    classify_regime,
    delta_tcb_diffuse,
    delta_tcb_statistical,
    jnorm_sq_peaked,
)
from .stability import (
    MomentSet,
    StabilitySnapshot,
    delta_tcb,
    delta_tcb_from_probs,
    jacobian_norm_sq,
    logit_margin,
    mean_embedding,
    moments,
    snapshot_from_logits,
    softmax,
    v_eff,
)
from .tensor_store import (
    TensorBlock,
    TensorManifest,
    load_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)

__all__ = [
    "ApproxEstimate",
    "MomentSet",
    "StabilitySnapshot",
    "TensorBlock",
    "TensorManifest",
    "classify_regime",
    "delta_tcb",
    "delta_tcb_diffuse",
    "delta_tcb_from_probs",
    "delta_tcb_statistical",
    "jacobian_norm_sq",
    "jnorm_sq_peaked",
    "load_manifest",
    "logit_margin",
    "mean_embedding",
    "moments",
    "read_tensor",
    "snapshot_from_logits",
    "softmax",
    "v_eff",
    "write_manifest",
    "write_tensor",
]
