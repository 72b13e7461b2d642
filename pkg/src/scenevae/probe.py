"""Linear probe: two stacked activation-free linear layers on frozen descriptors.

With no nonlinearity between them the two layers compose to one affine map,
so the hidden width only affects parameterization, not capacity.
"""

import numpy as np

from . import checkpoint
from .nn import Linear, Module
from .optim import Adam
from .rng import Rng
from .tensor import ShapeError, Tensor, no_grad, record

N_CLASSES = 3


class ProbeModel(Module):
    def __init__(self, in_dim: int, hidden: int = 3, n_classes: int = N_CLASSES, seed: int = 0):
        rng = Rng(seed, "probe-init")
        self.in_dim = in_dim
        self.hidden = hidden
        self.n_classes = n_classes
        self.layer1 = Linear(in_dim, hidden, rng=rng, gain_slope=1.0)
        self.layer2 = Linear(hidden, n_classes, rng=rng, gain_slope=1.0)

    def __call__(self, x):
        return self.layer2(self.layer1(x))

    def affine(self):
        """Equivalent single map ``(W, b)`` with logits = x @ W.T + b."""
        w1, b1 = self.layer1.weight.data, self.layer1.bias.data
        w2, b2 = self.layer2.weight.data, self.layer2.bias.data
        return w2 @ w1, w2 @ b1 + b2

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"probe expects descriptors of length {self.in_dim}, got {x.shape[1]}")
        with no_grad():
            out = self(Tensor(x)).data
        return out[0] if single else out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch, max-shifted for stability."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs {len(labels)} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = (lse - shifted[rows, labels]).mean()
    n = len(labels)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g * p / n).astype(logits.dtype),)

    return record("softmax_xent", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def softmax_xent(logits, label) -> Tensor:
    """Loss for one logit vector."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"softmax_xent: expected a logit vector, got {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise ValueError(f"label {label} out of range")
    return softmax_cross_entropy(logits.reshape(1, -1), [label])


def train_probe(values, labels, epochs=100, lr=0.01, seed=0, hidden=3):
    """Full-batch Adam on softmax cross-entropy; returns ``(model, loss_history)``."""
    x = np.asarray(values, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"train_probe: expected [N, D] descriptors, got {x.shape}")
    y = np.asarray(labels, dtype=np.int64)
    if len(y) != len(x):
        raise ShapeError(f"train_probe: {len(x)} descriptors but {len(y)} labels")
    missing = sorted(set(range(N_CLASSES)) - set(y.tolist()))
    if missing:
        raise ValueError(f"train_probe: no samples for classes {missing}")
    model = ProbeModel(x.shape[1], hidden=hidden, seed=seed)
    opt = Adam(model.parameters(), lr=lr)
    xt = Tensor(x)
    history = []
    for _ in range(epochs):
        opt.zero_grad()
        loss = softmax_cross_entropy(model(xt), y)
        loss.backward()
        opt.step()
        history.append(loss.item())
    return model, history


def predict(model: ProbeModel, descriptor):
    """Class index (ties go to the lowest index) and the logit vector."""
    logits = model.logits(np.asarray(descriptor).reshape(-1))
    return {"class": int(np.argmax(logits)), "logits": logits}


def predict_batch(model: ProbeModel, values) -> np.ndarray:
    return np.argmax(model.logits(values), axis=1)


def save_probe(model: ProbeModel, path, extra=None):
    meta = {"kind": "probe", "in_dim": model.in_dim, "hidden": model.hidden, "n_classes": model.n_classes}
    if extra:
        meta.update(extra)
    checkpoint.save(path, model.state_dict(), meta)


def load_probe(path) -> ProbeModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "probe":
        raise checkpoint.FormatError(f"{path}: not a probe checkpoint (kind={meta.get('kind')!r})")
    model = ProbeModel(meta["in_dim"], meta["hidden"], meta.get("n_classes", N_CLASSES))
    model.load_state_dict(tensors)
    return model
