"""Pathway-guided cross-attention network and its three-term loss.

Shapes, with B subjects per batch:

* pathway scores ``p``: (B, N_P); imaging ``img``: (B, N_I, d)
* pathway encoding ``P``: (B, N_P, d_q); key/value encodings (B, N_I, d_k|d_v)
* attention ``A``: (B, N_P, N_I), rows are pathways, columns ROIs
* fused concepts ``X_IGC``: (B, N_P, d)
"""

import math
import warnings
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


@dataclass
class ModelConfig:
    n_pathways: int
    n_rois: int
    d: int = 4
    d_q: int = 32
    d_k: int = 4
    d_v: int = 8
    d_qk: int = 32
    gamma: float = 1.0
    q_sparsity: float = 1e-2
    lambda_sp: float = 1e-6
    lambda_path: float = 1e-3
    delta: float = None
    m_pairs: int = 10
    dropout_p: float = 0.5
    clamp_eps: float = 1e-6
    hidden_classifier: int = 64
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    fused_activation: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n_pathways", "n_rois", "d", "d_q", "d_k", "d_v", "d_qk", "hidden_classifier"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.q_sparsity < 1.0:
            raise ConfigError("q_sparsity must lie in (0, 1)")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigError("clamp_eps must lie in (0, 0.5)")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.delta is not None and not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must lie in [0, 1]")
        if self.m_pairs < 0:
            raise ConfigError("m_pairs must be >= 0")

    @property
    def scaling_constant(self):
        return self.gamma * math.sqrt(self.n_pathways / 2.0)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class ForwardOutput:
    logit: T.Tensor
    attention: T.Tensor
    igc: T.Tensor

    def scores(self):
        """Predicted probabilities, shape (B,)."""
        return T.sigmoid(self.logit.data.reshape(-1))


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class ModelParams:
    """Learnable tensors plus batch-norm running statistics."""

    def __init__(self, tensors, bn_states):
        self.tensors = tensors
        self.bn = bn_states

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    @classmethod
    def init(cls, config, rng):
        c = config
        shapes = [
            ("pathway.embedding", (c.n_pathways, c.d_q), 1, c.d_q),
            ("key.weight", (c.d, c.d_k), c.d, c.d_k),
            ("value.weight", (c.d, c.d_v), c.d, c.d_v),
            ("attn.W_q", (c.d_q, c.d_qk), c.d_q, c.d_qk),
            ("attn.W_k", (c.d_k, c.d_qk), c.d_k, c.d_qk),
            ("attn.W_v", (c.d_v, c.d), c.d_v, c.d),
            ("cls.fc1.weight", (c.n_pathways * c.d, c.hidden_classifier), c.n_pathways * c.d, c.hidden_classifier),
            ("cls.fc2.weight", (c.hidden_classifier, 1), c.hidden_classifier, 1),
        ]
        arrays = {name: _glorot(rng, shape, fi, fo) for name, shape, fi, fo in shapes}
        arrays.update(
            {
                "pathway.bias": np.zeros((c.n_pathways, c.d_q)),
                "key.bn.gamma": np.ones(c.d_k),
                "key.bn.beta": np.zeros(c.d_k),
                "value.bn.gamma": np.ones(c.d_v),
                "value.bn.beta": np.zeros(c.d_v),
                "cls.fc1.bias": np.zeros(c.hidden_classifier),
                "cls.fc2.bias": np.zeros(1),
            }
        )
        order = [
            "pathway.embedding", "pathway.bias",
            "key.weight", "key.bn.gamma", "key.bn.beta",
            "value.weight", "value.bn.gamma", "value.bn.beta",
            "attn.W_q", "attn.W_k", "attn.W_v",
            "cls.fc1.weight", "cls.fc1.bias", "cls.fc2.weight", "cls.fc2.bias",
        ]
        tensors = {name: T.Tensor(arrays[name], requires_grad=True) for name in order}
        bn = {
            "key": T.BatchNormState.fresh(c.d_k, c.bn_momentum, c.bn_eps),
            "value": T.BatchNormState.fresh(c.d_v, c.bn_momentum, c.bn_eps),
        }
        return cls(tensors, bn)

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def state_dict(self):
        out = {name: t.data.copy() for name, t in self.tensors.items()}
        for prefix, st in self.bn.items():
            out[f"{prefix}.bn.running_mean"] = st.running_mean.copy()
            out[f"{prefix}.bn.running_var"] = st.running_var.copy()
        return out

    def load_state_dict(self, arrays):
        for name, t in self.tensors.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)
        for prefix, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{prefix}.bn.running_mean"])
            st.running_var = np.array(arrays[f"{prefix}.bn.running_var"])

    def save(self, path):
        T.save_checkpoint(self.state_dict(), path)

    def copy(self):
        tensors = {n: T.Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()}
        bn = {
            k: T.BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum, s.eps)
            for k, s in self.bn.items()
        }
        return ModelParams(tensors, bn)


def encode_pathways(p, params):
    """P[k, :] = p_k * E[k, :] + B[k, :] for every subject in the batch."""
    p = np.asarray(p, dtype=np.float64)
    emb = params["pathway.embedding"]
    if p.ndim != 2 or p.shape[1] != emb.shape[0]:
        raise ShapeError(f"pathway input shape {p.shape} does not match {emb.shape[0]} pathways")
    scaled = T.mul(T.Tensor(p[:, :, None]), emb)
    return T.add(scaled, params["pathway.bias"])


def _encode(img, params, prefix, mode):
    # no bias before batchnorm: its shift would be removed by the centering
    h = T.linear(img, params[f"{prefix}.weight"])
    h = T.batchnorm(h, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"], mode, params.bn[prefix])
    return T.relu(h)


def encode_imaging(img, params, mode="train"):
    """Separate key and value encodings; each ROI row shares one linear map."""
    img = np.asarray(img, dtype=np.float64)
    d = params["key.weight"].shape[0]
    if img.ndim != 3 or img.shape[2] != d:
        raise ShapeError(f"imaging input shape {img.shape} needs (B, N_I, {d})")
    x = T.Tensor(img)
    return _encode(x, params, "key", mode), _encode(x, params, "value", mode)


def path_attn(i_k, i_v, p_enc, params, config):
    """Cross attention with pathways as queries and ROIs as keys/values.

    Scores ``S = P W_q W_k^T I_k^T / C`` pass through ReLU and then
    ``x / (0.5 + x)``; the result weights the projected values ``I_v W_v``.
    """
    q = T.matmul(p_enc, params["attn.W_q"])
    k = T.matmul(i_k, params["attn.W_k"])
    s = T.scale(T.matmul(q, T.transpose(k)), 1.0 / config.scaling_constant)
    if config.fused_activation:
        a = T.attention_activation(s)
    else:
        a = T.softsign_half(T.relu(s))
    v = T.matmul(i_v, params["attn.W_v"])
    return a, T.matmul(a, v)


def classify(igc, params, mode, rng, dropout_p):
    h = T.relu(T.linear(T.flatten(igc), params["cls.fc1.weight"], params["cls.fc1.bias"]))
    h = T.dropout(h, dropout_p, mode, rng)
    return T.linear(h, params["cls.fc2.weight"], params["cls.fc2.bias"])


def forward(params, p, img, config, mode="eval", rng=None):
    p_enc = encode_pathways(p, params)
    i_k, i_v = encode_imaging(img, params, mode)
    attn, igc = path_attn(i_k, i_v, p_enc, params, config)
    logit = classify(igc, params, mode, rng, config.dropout_p)
    return ForwardOutput(logit, attn, igc)


def loss_sparsity(attn, rng, q, eps):
    """Bernoulli-KL sparsity penalty on two randomly chosen subjects of the batch."""
    n = attn.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    chosen = rng.choice(n, size=min(2, n), replace=False)
    return T.bernoulli_kl(T.take(attn, chosen), q, eps)


def loss_path_similarity(attn, pairs):
    """Mean L1 distance between pathway-influence vectors of (PAT, NC) pairs.

    ``pairs`` is an (M, 2) array of row indices into ``attn``: (patient, control).
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    m = len(pairs)
    if m == 0:
        warnings.warn("no PAT/NC pairs; pathway similarity loss is 0", stacklevel=2)
        return T.Tensor(np.array(0.0))
    s = T.row_sum(attn)
    diff = T.sub(T.take(s, pairs[:, 1]), T.take(s, pairs[:, 0]))
    return T.scale(T.total_sum(T.absolute(diff)), 1.0 / m)


def class_weight(labels):
    """Default delta: fraction of controls among the given (training) labels."""
    labels = np.asarray(labels)
    return float(np.sum(labels == 0)) / len(labels)


def loss_total(logits, labels, l_sp, l_path, config, delta):
    """lambda_sp * L_sp + lambda_path * L_path + weighted BCE (negative log-likelihood).

    Returns the scalar loss tensor and a dict of float components.
    """
    bce = T.weighted_bce_with_logits(logits, labels, delta)
    total = bce
    parts = {"bce": bce.item(), "sp": 0.0, "path": 0.0}
    if l_sp is not None:
        total = T.add(total, T.scale(l_sp, config.lambda_sp))
        parts["sp"] = l_sp.item()
    if l_path is not None:
        total = T.add(total, T.scale(l_path, config.lambda_path))
        parts["path"] = l_path.item()
    parts["total"] = total.item()
    return total, parts


def grad_check_micro_batch(config, seed=0, n_subjects=4, h=1e-5, tol=1e-4):
    """Finite-difference check of the full training loss on a random micro-batch.

    Dropout is disabled; the sparsity subjects come from a fixed generator
    and the pathway-similarity pairs are (0, 1), (2, 3), ... so the loss is a
    deterministic function of the parameters.
    """
    if n_subjects < 2:
        raise ConfigError("a micro-batch needs at least 2 subjects")
    cfg = replace(config, dropout_p=0.0, delta=0.5 if config.delta is None else config.delta)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, rng)
    p = rng.normal(size=(n_subjects, cfg.n_pathways))
    img = rng.normal(size=(n_subjects, cfg.n_rois, cfg.d))
    y = np.arange(n_subjects) % 2 == 0
    pairs = np.arange(2 * (n_subjects // 2)).reshape(-1, 2)
    kl_seed = int(rng.integers(2**31))

    def loss():
        out = forward(params, p, img, cfg, "train", None)
        l_sp = loss_sparsity(out.attention, np.random.default_rng(kl_seed), cfg.q_sparsity, cfg.clamp_eps)
        l_path = loss_path_similarity(out.attention, pairs)
        return loss_total(out.logit, y.astype(np.int64), l_sp, l_path, cfg, cfg.delta)[0]

    return T.grad_check(loss, params.tensors, h=h, tol=tol)
