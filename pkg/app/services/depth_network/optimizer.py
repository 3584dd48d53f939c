from typing import Dict, List, Tuple

import numpy as np

from app.models.network import AdamState, NetworkParams, TrainConfig

TRAINABLE = ("weight", "bias", "gamma", "beta")


def init_adam(params: NetworkParams) -> AdamState:
    """Zero moments for every trainable array; running statistics are not optimised."""
    m = [{k: np.zeros_like(v) for k, v in layer.items() if k in TRAINABLE} for layer in params.arrays]
    v = [{k: np.zeros_like(a) for k, a in layer.items() if k in TRAINABLE} for layer in params.arrays]
    return AdamState(step=0, m=m, v=v)


def adam_step(
    params: NetworkParams,
    grads: List[Dict[str, np.ndarray]],
    state: AdamState,
    config: TrainConfig,
) -> Tuple[NetworkParams, AdamState]:
    """
    One Adam update with bias correction, applied in place.

    Args:
        params: Network parameters
        grads: Gradients aligned with ``params.arrays``
        state: Moments and step counter
        config: Learning rate, betas and epsilon

    Returns:
        The updated params and state
    """
    if not state.m:
        state = init_adam(params)
    state.step += 1
    t = state.step
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.eps
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for layer, layer_grads, m, v in zip(params.arrays, grads, state.m, state.v):
        for name, g in layer_grads.items():
            if name not in m:
                continue
            m[name] *= b1
            m[name] += (1.0 - b1) * g
            v[name] *= b2
            v[name] += (1.0 - b2) * g * g
            m_hat = m[name] / correction1
            v_hat = v[name] / correction2
            layer[name] -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(layer[name].dtype)
    return params, state
