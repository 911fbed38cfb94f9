import numpy as np


def _check_batch(pred):
    if pred.shape[0] == 0:
        raise ValueError("empty batch")


def cross_entropy(logits, target):
    """Mean softmax cross-entropy over the batch.

    ``target`` holds integer class indices. Returns ``(loss, d loss / d logits)``.
    """
    logits = np.asarray(logits)
    if logits.ndim == 1:
        logits = logits[None]
    _check_batch(logits)
    target = np.asarray(target).reshape(-1).astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = logits.shape[0]
    loss = -log_p[np.arange(n), target].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), target] -= 1.0
    return float(loss), grad / n


def mse(pred, target):
    """Mean squared error averaged over every element."""
    pred = np.asarray(pred)
    _check_batch(pred)
    diff = pred - np.asarray(target)
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def sigmoid(x):
    x = np.asarray(x)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_mse(logits, target):
    """MSE after a sigmoid output nonlinearity; gradient w.r.t. the pre-sigmoid logits."""
    y = sigmoid(logits)
    loss, g = mse(y, target)
    return loss, g * y * (1.0 - y)


LOSSES = {"cross_entropy": cross_entropy, "mse": mse, "sigmoid_mse": sigmoid_mse}


def loss_eval(kind, prediction, target):
    try:
        fn = LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}") from None
    return fn(prediction, target)
