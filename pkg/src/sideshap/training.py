"""Three-stage training recipe plus the Froyo and Duo comparison pipelines.

Stage 1 trains the masked-transformer classifier. Stage 2 side-tunes a
surrogate to mimic the classifier's full-input predictions on masked inputs.
Stage 3 side-tunes an explainer against the Shapley regression objective with
paired kernel sampling and in-graph additive efficient normalization.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Optimizer, OptimizerConfig, Tensor
from .data import SyntheticDataset
from .shapley import (
    sample_equicardinality_masks,
    sample_subsets,
    shapley_kernel,
)
from .sidenet import (
    ROLE_SURROGATE,
    SideConfig,
    SideTunedModel,
    make_explainer_from_surrogate,
)
from .transformer import Linear, MaskedTransformer, ModelConfig

PIPELINES = ("autognothi", "full-finetune", "froyo", "duo")


@dataclass
class StageConfig:
    stage: str
    epochs: int
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 32
    masks_per_input: int = 16
    inputs_per_batch: int = 2
    seed: int = 0
    step_decay: float = 1.0  # per-epoch multiplicative step-size decay
    pipeline: str = "autognothi"
    label_mode: str = "weighted"  # "weighted" (all classes) or "label" (ground truth only)
    mask_bank: int = 0  # explainer stage: fixed per-input mask bank (0 = resample per step)

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.masks_per_input % 2 != 0:
            raise ContractError("masks_per_input must be even (paired sampling)")
        if self.mask_bank < 0 or self.mask_bank % 2 != 0:
            raise ContractError("mask_bank must be a non-negative even number")
        if self.pipeline not in PIPELINES:
            raise ContractError(f"unknown pipeline {self.pipeline!r}")


@dataclass
class LossRecord:
    step_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    optimal_loss_estimate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "step_losses": [float(x) for x in self.step_losses],
            "val_losses": [float(x) for x in self.val_losses],
            "best_epoch": self.best_epoch,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "optimal_loss_estimate": self.optimal_loss_estimate,
            "extra": self.extra,
        }

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for i, loss in enumerate(self.step_losses):
                w.writerow([i, f"{loss:.10g}"])


def state_digest(state: dict) -> str:
    """Order-independent content hash of a parameter state dict."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()


def kl_divergence(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Forward KL between softmax distributions, log-sum-exp stabilized."""
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise ContractError("kl_divergence: shape mismatch")
    lp = p_logits - _logsumexp(p_logits)
    lq = q_logits - _logsumexp(q_logits)
    p = np.exp(lp)
    return float(np.sum(p * (lp - lq), axis=-1).mean())


def _logsumexp(x):
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _kl_loss_graph(p_probs: np.ndarray, q_logits: Tensor) -> Tensor:
    """Mean KL(p || softmax(q)) with p constant."""
    p = np.asarray(p_probs, dtype=np.float32)
    log_p = np.log(np.maximum(p, 1e-12))
    lq = ad.log_softmax(q_logits)
    per_row = ad.tensor_sum(Tensor(p) * (Tensor(log_p) - lq), axis=-1)
    return ad.mean(per_row)


def _mse_class_loss(logits: Tensor, labels: np.ndarray, num_classes: int) -> Tensor:
    onehot = np.eye(num_classes, dtype=np.float32)[labels]
    probs = ad.softmax(logits)
    return ad.mean(ad.tensor_sum(ad.square(probs - Tensor(onehot)), axis=-1))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((np.argmax(logits, axis=-1) == labels).mean())


# ---------------------------------------------------------------------------
# stage 1: classifier


def train_classifier(dataset: SyntheticDataset, model_config: ModelConfig,
                     config: StageConfig):
    """Train the masked transformer on unmasked inputs; keep the best-val checkpoint."""
    rng = np.random.default_rng(config.seed)
    model = MaskedTransformer(model_config, seed=config.seed)
    opt = Optimizer(model.parameters(), config.optimizer)
    record = LossRecord()

    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    best_val = np.inf
    best_state = None

    record.initial_loss = _classifier_val_loss(model, x_val, y_val)
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits = model.forward(x_train[idx])
            loss = _mse_class_loss(logits, y_train[idx], model_config.num_classes)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"classifier diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.step_losses.append(loss.item())
        val_loss = _classifier_val_loss(model, x_val, y_val)
        record.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch
            best_state = model.state_dict()
        opt.scale_step(config.step_decay)

    model.load_state(best_state)
    record.final_loss = best_val
    record.extra["val_accuracy"] = accuracy(
        _batched_logits(model, x_val), y_val)
    return model, record


def _batched_logits(model, tokens, mask=None, chunk=256):
    outs = []
    for start in range(0, len(tokens), chunk):
        m = None if mask is None else mask[start:start + chunk]
        outs.append(model.forward(tokens[start:start + chunk], m).numpy())
    return np.concatenate(outs, axis=0)


def _classifier_val_loss(model, x_val, y_val, chunk=256):
    total, n = 0.0, 0
    c = model.config.num_classes
    for start in range(0, len(x_val), chunk):
        xb, yb = x_val[start:start + chunk], y_val[start:start + chunk]
        loss = _mse_class_loss(model.forward(xb), yb, c)
        total += loss.item() * len(xb)
        n += len(xb)
    return total / n


# ---------------------------------------------------------------------------
# stage 2: surrogate


def train_surrogate(classifier: MaskedTransformer, dataset: SyntheticDataset,
                    config: StageConfig, side: SideConfig | None = None):
    """Side-tune a surrogate branch to mimic f(x) on masked inputs.

    Backbone bytes are hash-checked before and after; a mutation is an
    invariant violation.
    """
    if side is None:
        side = SideConfig(role=ROLE_SURROGATE)
    rng = np.random.default_rng(config.seed)
    model = SideTunedModel(classifier, side, seed=config.seed)
    opt = Optimizer(model.side_parameters(), config.optimizer)
    record = LossRecord()

    backbone_before = state_digest(classifier.state_dict())
    x_train, _ = dataset.split("train")
    x_val, _ = dataset.split("val")
    d = dataset.d

    # fixed validation instances for deterministic checkpoint selection
    val_rng = np.random.default_rng(config.seed + 1)
    n_val = min(64, len(x_val))
    val_idx = val_rng.permutation(len(x_val))[:n_val]
    val_masks = sample_equicardinality_masks(d, n_val * 4, val_rng).reshape(n_val, 4, d)

    record.initial_loss = _surrogate_val_kl(model, classifier, x_val[val_idx], val_masks)
    best_val, best_state = np.inf, None

    per_step = config.inputs_per_batch * config.masks_per_input
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.inputs_per_batch):
            idx = order[start:start + config.inputs_per_batch]
            xb = x_train[idx]
            masks = sample_equicardinality_masks(d, len(idx) * config.masks_per_input, rng)
            rep = np.repeat(xb, config.masks_per_input, axis=0)
            target = classifier.predict_proba(xb)
            target_rep = np.repeat(target, config.masks_per_input, axis=0)
            q_logits = model.surrogate_logits(rep, masks)
            loss = _kl_loss_graph(target_rep, q_logits)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"surrogate diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.step_losses.append(loss.item())
        val_loss = _surrogate_val_kl(model, classifier, x_val[val_idx], val_masks)
        record.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch
            best_state = model.side_state_dict()
        opt.scale_step(config.step_decay)

    model.load_side_state(best_state)
    record.final_loss = _surrogate_val_kl(model, classifier, x_val[val_idx], val_masks)

    if state_digest(classifier.state_dict()) != backbone_before:
        raise RuntimeError("invariant violation: backbone parameters changed during surrogate training")
    record.extra["backbone_digest"] = backbone_before
    return model, record


def _surrogate_val_kl(model, classifier, x_val, val_masks):
    """Mean KL(f(x) || g(x_s)) over fixed validation (input, mask) pairs."""
    n, m, d = val_masks.shape
    rep = np.repeat(x_val, m, axis=0)
    masks = val_masks.reshape(n * m, d)
    p_logits = np.repeat(_batched_logits(classifier, x_val), m, axis=0)
    q_logits = _batched_logits_surrogate(model, rep, masks)
    return kl_divergence_rows(p_logits, q_logits)


def _batched_logits_surrogate(model, tokens, masks, chunk=256):
    outs = []
    for start in range(0, len(tokens), chunk):
        outs.append(model.surrogate_logits(
            tokens[start:start + chunk], masks[start:start + chunk]).numpy())
    return np.concatenate(outs, axis=0)


def kl_divergence_rows(p_logits, q_logits) -> float:
    return kl_divergence(p_logits, q_logits)


def per_cardinality_kl(model: SideTunedModel, classifier: MaskedTransformer,
                       tokens: np.ndarray, rng: np.random.Generator,
                       masks_per_cardinality: int = 8) -> dict:
    """Mean KL by mask cardinality; diagnostic for how masking hurts mimicry."""
    d = classifier.config.num_tokens
    out = {}
    p_logits = _batched_logits(classifier, tokens)
    for k in range(d + 1):
        masks = np.zeros((len(tokens) * masks_per_cardinality, d), dtype=np.float64)
        for i in range(masks.shape[0]):
            masks[i, rng.permutation(d)[:k]] = 1.0
        rep = np.repeat(tokens, masks_per_cardinality, axis=0)
        q_logits = _batched_logits_surrogate(model, rep, masks)
        out[k] = kl_divergence(np.repeat(p_logits, masks_per_cardinality, axis=0), q_logits)
    return out


# ---------------------------------------------------------------------------
# stage 3: explainer


def surrogate_mask_values(surrogate: SideTunedModel, tokens_one: np.ndarray,
                          masks: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Surrogate class probabilities for one input under many masks."""
    rep = np.repeat(tokens_one[None], len(masks), axis=0)
    outs = []
    for start in range(0, len(masks), chunk):
        logits = surrogate.surrogate_logits(rep[start:start + chunk],
                                            masks[start:start + chunk]).numpy()
        outs.append(_softmax_np(logits))
    return np.concatenate(outs, axis=0)


def _softmax_np(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _explainer_regression_loss(explainer: SideTunedModel, xb: np.ndarray,
                               labels: np.ndarray, masks_per_input: int,
                               masks: np.ndarray, targets: np.ndarray,
                               diffs: np.ndarray, weights: np.ndarray,
                               backbone_states=None) -> Tensor:
    """In-graph Shapley regression loss with additive efficient normalization.

    xb: (n_in, d, dim) inputs; masks (n_in*m, d); targets g(x_s)-g(x_0) per
    instance (n_in*m, C); diffs g(x_1)-g(x_0) per input (n_in, C); weights
    per-class weights per input (n_in, C).

    Each input is forwarded once; the per-coalition prediction s^T phi(x) is
    a batched matmul against the input's mask block.
    """
    m = masks_per_input
    n_in = len(xb)
    raw = explainer.explainer_raw(xb, backbone_states=backbone_states)  # (n, d, C)
    d = raw.shape[1]
    diff = Tensor(diffs.astype(np.float32)[:, None, :])  # (n, 1, C)
    total = ad.tensor_sum(raw, axis=1, keepdims=True)
    phi = raw + (diff - total) * (1.0 / d)
    s = Tensor(masks.reshape(n_in, m, d).astype(np.float32))
    pred = ad.matmul(s, phi)  # (n, m, C)
    t = Tensor(targets.reshape(n_in, m, -1).astype(np.float32))
    err = ad.square(t - pred)
    w = Tensor(weights.astype(np.float32)[:, None, :])  # (n, 1, C)
    return ad.mean(ad.tensor_sum(w * err, axis=-1))


def _class_weights(surrogate, xb, labels, num_classes, label_mode):
    if label_mode == "label":
        return np.eye(num_classes, dtype=np.float64)[labels]
    ones = np.ones((len(xb), surrogate.backbone.config.num_tokens), dtype=np.float64)
    return _softmax_np(_batched_logits_surrogate(surrogate, xb, ones))


def train_explainer(surrogate: SideTunedModel, dataset: SyntheticDataset,
                    config: StageConfig):
    """Side-tune an explainer branch against the kernel-weighted regression loss.

    The branch trunk is initialized from the surrogate side weights with the
    head replaced. Masks are paired draws from the Shapley kernel; the
    efficiency constraint is enforced in-graph before the loss.
    """
    rng = np.random.default_rng(config.seed)
    explainer = make_explainer_from_surrogate(surrogate, seed=config.seed)
    classifier = surrogate.backbone
    backbone_before = state_digest(classifier.state_dict())
    opt = Optimizer(explainer.side_parameters(), config.optimizer)
    record = LossRecord()

    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    d = dataset.d
    num_classes = dataset.num_classes
    dist = shapley_kernel(d)

    val_rng = np.random.default_rng(config.seed + 2)
    n_val = min(32, len(x_val))
    val_idx = val_rng.permutation(len(x_val))[:n_val]
    val_masks = sample_subsets(dist, n_val * config.masks_per_input, True, val_rng)

    def val_loss_fn():
        return _explainer_eval_loss(
            explainer, surrogate, x_val[val_idx], y_val[val_idx],
            val_masks.reshape(n_val, config.masks_per_input, d),
            num_classes, config.label_mode)

    record.initial_loss = val_loss_fn()
    best_val, best_state = np.inf, None

    # Optional precomputation: the surrogate and backbone are both frozen, so
    # with a fixed per-input mask bank every regression target — and the
    # backbone states feeding the explainer branch — can be computed once.
    bank = config.mask_bank
    if bank:
        n_tr = len(x_train)
        bank_masks = sample_subsets(dist, n_tr * bank, True, rng)
        bank_targets, bank_diffs = _surrogate_targets(
            surrogate, x_train, bank_masks, bank)
        bank_masks = bank_masks.reshape(n_tr, bank, d)
        bank_targets = bank_targets.reshape(n_tr, bank, num_classes)
        bank_weights = _class_weights(surrogate, x_train, y_train,
                                      num_classes, config.label_mode)
        cached_states = [s.numpy() for s in classifier.block_states(x_train, None)]

    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.inputs_per_batch):
            idx = order[start:start + config.inputs_per_batch]
            xb, yb = x_train[idx], y_train[idx]
            n_in = len(idx)
            states = None
            if bank:
                m = bank
                masks = bank_masks[idx].reshape(n_in * bank, d)
                targets = bank_targets[idx].reshape(n_in * bank, -1)
                diffs = bank_diffs[idx]
                weights = bank_weights[idx]
                states = [Tensor(s[idx]) for s in cached_states]
            else:
                m = config.masks_per_input
                masks = sample_subsets(dist, n_in * m, True, rng)
                targets, diffs = _surrogate_targets(surrogate, xb, masks, m)
                weights = _class_weights(surrogate, xb, yb, num_classes,
                                         config.label_mode)
            loss = _explainer_regression_loss(
                explainer, xb, yb, m, masks, targets, diffs, weights,
                backbone_states=states)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"explainer diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.step_losses.append(loss.item())
        val_loss = val_loss_fn()
        record.val_losses.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            record.best_epoch = epoch
            best_state = explainer.side_state_dict()
        opt.scale_step(config.step_decay)

    explainer.load_side_state(best_state)
    record.final_loss = val_loss_fn()
    if state_digest(classifier.state_dict()) != backbone_before:
        raise RuntimeError("invariant violation: backbone parameters changed during explainer training")
    return explainer, record


def _surrogate_targets(surrogate, xb, masks, masks_per_input):
    """g(x_s)-g(x_0) per (input, mask) instance and g(x_1)-g(x_0) per input."""
    d = masks.shape[1]
    n_in = len(xb)
    m = masks_per_input
    blocks = masks.reshape(n_in, m, d)
    extremes = np.broadcast_to(
        np.stack([np.zeros(d), np.ones(d)]), (n_in, 2, d))
    stacked = np.concatenate([blocks, extremes], axis=1).reshape(n_in * (m + 2), d)
    rep = np.repeat(xb, m + 2, axis=0)
    logits = _batched_logits_surrogate(surrogate, rep, stacked, chunk=1024)
    vals = _softmax_np(logits).reshape(n_in, m + 2, -1)
    v0 = vals[:, m, :]
    v1 = vals[:, m + 1, :]
    targets = vals[:, :m, :] - v0[:, None, :]
    return targets.reshape(n_in * m, -1), v1 - v0


def _explainer_eval_loss(explainer, surrogate, x_eval, y_eval, masks_3d,
                         num_classes, label_mode):
    n, m, d = masks_3d.shape
    masks = masks_3d.reshape(n * m, d)
    targets, diffs = _surrogate_targets(surrogate, x_eval, masks, m)
    weights = _class_weights(surrogate, x_eval, y_eval, num_classes, label_mode)
    loss = _explainer_regression_loss(explainer, x_eval, y_eval, m, masks,
                                      targets, diffs, weights)
    return loss.item()


# ---------------------------------------------------------------------------
# comparison pipelines: froyo and duo


class HeadExplainerModel:
    """Full-width transformer with an added per-token explanation head.

    Used by the froyo (head-only training) and duo (joint training) pipelines.
    """

    def __init__(self, config: ModelConfig, head_depth: int = 3, seed: int = 0):
        self.net = MaskedTransformer(config, seed=seed)
        rng = np.random.default_rng(seed + 17)
        h = config.hidden
        self.expl_head = [Linear(rng, h, h) for _ in range(head_depth)]
        self.expl_head.append(Linear(rng, h, config.num_classes))

    @property
    def config(self):
        return self.net.config

    def forward_both(self, tokens: np.ndarray):
        states = self.net.block_states(tokens, None)
        logits = self.net.logits_from_state(states[-1])
        seq = self.net.final_norm(states[-1])
        h = ad.narrow(seq, 1, 1, self.config.num_tokens)  # per-patch features
        for layer in self.expl_head[:-1]:
            h = ad.gelu(layer(h))
        raw = self.expl_head[-1](h)  # (batch, d, num_classes)
        return logits, raw

    def encoder_parameters(self):
        named = self.net.named_parameters()
        return {k: v for k, v in named.items()
                if not k.startswith(("head.", "final_norm."))}

    def pred_head_parameters(self):
        named = self.net.named_parameters()
        return {k: v for k, v in named.items()
                if k.startswith(("head.", "final_norm."))}

    def expl_head_parameters(self):
        out = {}
        for i, layer in enumerate(self.expl_head):
            out[f"expl_head.{i}.weight"] = layer.weight
            out[f"expl_head.{i}.bias"] = layer.bias
        return out

    def named_parameters(self):
        out = dict(self.net.named_parameters())
        out.update(self.expl_head_parameters())
        return out

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def _head_explainer_loss(model: HeadExplainerModel, value_model: MaskedTransformer,
                         xb, yb, masks_per_input, masks, num_classes, label_mode):
    """Shapley regression loss with the frozen masked classifier as value function."""
    m = masks_per_input
    n_in = len(xb)
    d = masks.shape[1]
    blocks = masks.reshape(n_in, m, d)
    extremes = np.broadcast_to(
        np.stack([np.zeros(d), np.ones(d)]), (n_in, 2, d))
    stacked = np.concatenate([blocks, extremes], axis=1).reshape(n_in * (m + 2), d)
    rep = np.repeat(xb, m + 2, axis=0)
    vals = _softmax_np(_batched_logits(value_model, rep, stacked, chunk=1024))
    vals = vals.reshape(n_in, m + 2, -1)
    v0, v1 = vals[:, m, :], vals[:, m + 1, :]
    targets = vals[:, :m, :] - v0[:, None, :]
    if label_mode == "label":
        weights = np.eye(num_classes, dtype=np.float64)[yb]
    else:
        weights = _softmax_np(_batched_logits(value_model, xb))

    _, raw = model.forward_both(xb)
    diff = Tensor((v1 - v0).astype(np.float32)[:, None, :])
    total = ad.tensor_sum(raw, axis=1, keepdims=True)
    phi = raw + (diff - total) * (1.0 / d)
    s = Tensor(blocks.astype(np.float32))
    pred = ad.matmul(s, phi)
    err = ad.square(Tensor(targets.astype(np.float32)) - pred)
    w = Tensor(weights.astype(np.float32)[:, None, :])
    return ad.mean(ad.tensor_sum(w * err, axis=-1))


def train_froyo(classifier: MaskedTransformer, dataset: SyntheticDataset,
                config: StageConfig):
    """Train only the explanation head; encoder and prediction head stay frozen."""
    model = HeadExplainerModel(classifier.config, seed=config.seed)
    model.net.load_state(classifier.state_dict())
    model.net.set_trainable(False)
    frozen_before = state_digest(model.net.state_dict())

    rng = np.random.default_rng(config.seed)
    trainable = list(model.expl_head_parameters().values())
    opt = Optimizer(trainable, config.optimizer)
    record = LossRecord()
    dist = shapley_kernel(dataset.d)
    x_train, y_train = dataset.split("train")

    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.inputs_per_batch):
            idx = order[start:start + config.inputs_per_batch]
            masks = sample_subsets(dist, len(idx) * config.masks_per_input, True, rng)
            loss = _head_explainer_loss(model, classifier, x_train[idx], y_train[idx],
                                        config.masks_per_input, masks,
                                        dataset.num_classes, config.label_mode)
            opt.zero_grad()
            loss.backward()
            opt.step()
            record.step_losses.append(loss.item())
        record.val_losses.append(record.step_losses[-1])

    if state_digest(model.net.state_dict()) != frozen_before:
        raise RuntimeError("invariant violation: frozen parameters changed in froyo training")
    record.best_epoch = int(np.argmin(record.val_losses))
    record.final_loss = record.step_losses[-1]
    return model, record


def train_duo(classifier: MaskedTransformer, dataset: SyntheticDataset,
              config: StageConfig):
    """Jointly train encoder plus both heads; record per-step gradient cosine.

    The value function for the explanation loss is a frozen copy of the
    original classifier, so targets do not drift as the encoder moves.
    """
    from .evaluation import gradient_conflict

    model = HeadExplainerModel(classifier.config, seed=config.seed)
    model.net.load_state(classifier.state_dict())
    value_model = MaskedTransformer(classifier.config, seed=config.seed)
    value_model.load_state(classifier.state_dict())
    value_model.set_trainable(False)

    rng = np.random.default_rng(config.seed)
    all_params = list(model.named_parameters().values())
    encoder_params = list(model.encoder_parameters().values())
    opt = Optimizer(all_params, config.optimizer)
    record = LossRecord()
    conflict_trace = []
    dist = shapley_kernel(dataset.d)
    x_train, y_train = dataset.split("train")

    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.inputs_per_batch):
            idx = order[start:start + config.inputs_per_batch]
            xb, yb = x_train[idx], y_train[idx]

            logits, _ = model.forward_both(xb)
            cls_loss = _mse_class_loss(logits, yb, dataset.num_classes)
            for p in all_params:
                p.grad = None
            cls_loss.backward()
            g_cls = {id(p): (p.grad.copy() if p.grad is not None else None)
                     for p in all_params}

            masks = sample_subsets(dist, len(idx) * config.masks_per_input, True, rng)
            expl_loss = _head_explainer_loss(model, value_model, xb, yb,
                                             config.masks_per_input, masks,
                                             dataset.num_classes, config.label_mode)
            for p in all_params:
                p.grad = None
            expl_loss.backward()
            g_expl = {id(p): (p.grad.copy() if p.grad is not None else None)
                      for p in all_params}

            g1 = np.concatenate([
                (g_cls[id(p)] if g_cls[id(p)] is not None else np.zeros_like(p.data)).ravel()
                for p in encoder_params])
            g2 = np.concatenate([
                (g_expl[id(p)] if g_expl[id(p)] is not None else np.zeros_like(p.data)).ravel()
                for p in encoder_params])
            if np.linalg.norm(g1) > 0 and np.linalg.norm(g2) > 0:
                conflict_trace.append(gradient_conflict(g1, g2))

            for p in all_params:
                a = g_cls[id(p)]
                b = g_expl[id(p)]
                if a is None and b is None:
                    p.grad = np.zeros_like(p.data)
                elif a is None:
                    p.grad = b
                elif b is None:
                    p.grad = a
                else:
                    p.grad = a + b
            opt.step()
            record.step_losses.append(cls_loss.item() + expl_loss.item())
        record.val_losses.append(record.step_losses[-1])

    record.best_epoch = int(np.argmin(record.val_losses))
    record.final_loss = record.step_losses[-1]
    record.extra["gradient_conflict_trace"] = [float(c) for c in conflict_trace]
    return model, record


# ---------------------------------------------------------------------------
# Geometric loss-decay check on a synthetic strictly convex problem


def geometric_decay_experiment(seed: int = 0, n: int = 64, p: int = 3,
                              steps: int = 200):
    """Full-batch plain GD on a strictly convex linear-softmax KL objective.

    Two-class model with logits [0, w^T x] (no softmax gauge freedom). The
    strong-convexity constant is taken as the minimum eigenvalue of the
    numerically-differentiated Hessian over all logged iterates and the
    optimum; the step size is 1 / (2 L) for the measured smoothness L.

    Returns dict with per-step loss gaps and the geometric bound.
    """
    from scipy.optimize import minimize

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    w_ref = rng.standard_normal(p)
    t1 = 1.0 / (1.0 + np.exp(-(x @ w_ref + 0.3 * rng.standard_normal(n))))
    t1 = np.clip(t1, 0.05, 0.95)

    def loss(w):
        z = x @ w
        p1 = 1.0 / (1.0 + np.exp(-z))
        p1 = np.clip(p1, 1e-12, 1 - 1e-12)
        return float(np.mean(t1 * np.log(t1 / p1)
                             + (1 - t1) * np.log((1 - t1) / (1 - p1))))

    def grad(w):
        p1 = 1.0 / (1.0 + np.exp(-(x @ w)))
        return (x * (p1 - t1)[:, None]).mean(axis=0)

    def hessian_fd(w, h=1e-5):
        out = np.zeros((p, p))
        for j in range(p):
            e = np.zeros(p)
            e[j] = h
            out[:, j] = (grad(w + e) - grad(w - e)) / (2 * h)
        return 0.5 * (out + out.T)

    # global smoothness bound: p1(1-p1) <= 1/4
    l_smooth = 0.25 * np.linalg.eigvalsh(x.T @ x / n)[-1]
    alpha = 1.0 / (2.0 * l_smooth)

    w = np.zeros(p)
    iterates = [w.copy()]
    losses = [loss(w)]
    for _ in range(steps):
        w = w - alpha * grad(w)
        iterates.append(w.copy())
        losses.append(loss(w))

    res = minimize(loss, w, jac=grad, method="BFGS", tol=1e-14)
    w_star = res.x
    l_star = loss(w_star)

    mu = min(np.linalg.eigvalsh(hessian_fd(wi))[0]
             for wi in iterates[:: max(1, steps // 50)] + [w_star])

    gaps = np.array(losses) - l_star
    bound = gaps[0] * (1.0 - mu * alpha) ** np.arange(len(gaps))
    return {
        "alpha": alpha,
        "mu": float(mu),
        "gaps": gaps,
        "bound": bound,
        "holds": bool(np.all(gaps <= 1.05 * bound + 1e-15)),
    }
