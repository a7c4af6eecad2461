"""Loss terms, the total objective, the optimizer, and the training loop.

The objective is

    L = l_obj (L_obj_3d + L_obj_oracle)
      + l_pred (L_pred_3d + L_pred_oracle)
      + l_aux (L_tri_emb + L_node_init)

with cross-entropy object losses, all-pairs per-class BCE predicate
losses, an L1 regularizer pulling fused oracle triplet embeddings
toward the template text embeddings of ground-truth relations, and a
negative-cosine alignment of pre-reasoning node features.

The baseline mode trains the 3D branch alone with only the first two
3D terms. Batching runs one tape per scene and sums gradients, which
is identical to differentiating the summed batch loss.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DataError, NumericError
from .reasoning import ForwardResult, ModelConfig, ModelState, PreparedScene, forward_scene, prepare_scene
from .scene import SceneGraphSample, Vocabulary
from .synthetic import EmbeddingProvider


@dataclass
class LossWeights:
    obj: float = 0.1
    pred: float = 1.0
    aux: float = 0.1

    def validate(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0")


# ---------------------------------------------------------------------------
# loss terms


def loss_obj(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over instances."""
    gt = np.asarray(gt, dtype=np.intp)
    if gt.min() < 0 or gt.max() >= logits.data.shape[1]:
        raise DataError("object label out of range")
    ls = ad.log_softmax(logits, axis=1)
    return ad.neg(ad.tmean(ad.take_per_row(ls, gt)))


def loss_pred(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits over all pairs and classes.

    All ordered pairs participate; pairs without any ground-truth
    predicate act as negatives for every class.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != logits.data.shape:
        raise DataError(f"predicate gt shape {gt.shape} != logits shape {logits.data.shape}")
    # bce(x, y) = softplus(x) - x*y
    return ad.tmean(ad.sub(ad.softplus(logits), ad.mul(logits, Tensor(gt))))


def loss_tri_emb(fused_rows: Tensor | None, text_rows: np.ndarray) -> Tensor:
    """Mean-per-dimension L1 distance, averaged over ground-truth terms.

    Callers pass one fused row per (pair, gt-predicate) term, duplicating
    the pair row when it holds several predicates. Zero (with zero
    gradient) when the scene has no ground-truth relations.
    """
    if fused_rows is None or fused_rows.data.shape[0] == 0:
        return Tensor(0.0)
    m, d = fused_rows.data.shape
    diff = ad.sub(fused_rows, Tensor(text_rows))
    return ad.mul(ad.tsum(ad.absolute(diff)), 1.0 / (m * d))


def loss_node_init(threed_nodes: Tensor, oracle_nodes: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean negative cosine between aligned pre-reasoning node features."""
    dot = ad.tsum(ad.mul(threed_nodes, oracle_nodes), axis=1)
    na = ad.sqrt(ad.tsum(ad.mul(threed_nodes, threed_nodes), axis=1))
    nb = ad.sqrt(ad.tsum(ad.mul(oracle_nodes, oracle_nodes), axis=1))
    cos = ad.div(dot, ad.add(ad.mul(na, nb), eps))
    return ad.neg(ad.tmean(cos))


@dataclass
class LossParts:
    obj_3d: Tensor
    pred_3d: Tensor
    obj_oracle: Tensor | None = None
    pred_oracle: Tensor | None = None
    tri_emb: Tensor | None = None
    node_init: Tensor | None = None


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    obj = parts.obj_3d
    if parts.obj_oracle is not None:
        obj = ad.add(obj, parts.obj_oracle)
    pred = parts.pred_3d
    if parts.pred_oracle is not None:
        pred = ad.add(pred, parts.pred_oracle)
    total = ad.add(ad.mul(obj, weights.obj), ad.mul(pred, weights.pred))
    if parts.tri_emb is not None or parts.node_init is not None:
        aux = parts.tri_emb if parts.tri_emb is not None else Tensor(0.0)
        if parts.node_init is not None:
            aux = ad.add(aux, parts.node_init)
        total = ad.add(total, ad.mul(aux, weights.aux))
    return total


# ---------------------------------------------------------------------------
# classifier initialization


def init_classifier_from_embeddings(provider: EmbeddingProvider, d: int,
                                    projection: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Object-classifier weights whose class-c column is embedding c, bias 0."""
    emb = provider.object_embeddings
    if emb.shape[1] != d:
        if projection is None:
            raise ConfigError(
                f"embedding width {emb.shape[1]} != classifier width {d} and no projection configured")
        emb = emb @ projection
        emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    return emb.T.copy(), np.zeros(emb.shape[0])


def apply_embedding_init(model: ModelState, provider: EmbeddingProvider,
                         projection: np.ndarray | None = None) -> None:
    """Initialize the object classifiers of both streams from the embeddings."""
    w, b = init_classifier_from_embeddings(provider, model.cfg.d, projection)
    for head in ("head3d", "head_oracle"):
        if head == "head_oracle" and not model.cfg.joint:
            continue
        model.subtree(head)["obj_w"].data = w.copy()
        model.subtree(head)["obj_b"].data = b.copy()


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(base: float, t: int, total: int) -> float:
    """Cosine annealing from base at t=0 to 0 at t=total."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + np.cos(np.pi * t / total))


class AdamW:
    """AdamW with decoupled multiplicative weight decay.

    With a zero gradient a step changes a parameter exactly to
    p * (1 - lr * weight_decay).
    """

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update


# ---------------------------------------------------------------------------
# per-scene loss assembly


@dataclass
class TrainScene:
    prepared: PreparedScene
    tri_pair_indices: np.ndarray   # (M,) pair index per gt term
    tri_text_rows: np.ndarray      # (M, d_emb)


def build_train_scene(sample: SceneGraphSample, provider: EmbeddingProvider | None) -> TrainScene:
    prepared = prepare_scene(sample)
    pair_idx: list[int] = []
    triplets: list[tuple[int, int, int]] = []
    if provider is not None:
        classes = prepared.gt_objects
        from .scene import ordered_pairs

        for e, (i, j) in enumerate(ordered_pairs(sample.k)):
            for p in np.nonzero(prepared.gt_pred_rows[e])[0]:
                pair_idx.append(e)
                triplets.append((int(classes[i]), int(p), int(classes[j])))
    text = provider.text_embedding_rows(triplets) if provider is not None else np.zeros((0, 0))
    return TrainScene(prepared=prepared,
                      tri_pair_indices=np.asarray(pair_idx, dtype=np.intp),
                      tri_text_rows=text)


def scene_loss(model: ModelState, ts: TrainScene, weights: LossWeights,
               vlsat: bool) -> tuple[Tensor, dict[str, float | None]]:
    """Forward one scene and assemble the (weighted) objective."""
    mode = "joint" if vlsat else "3d"
    result: ForwardResult = forward_scene(model, ts.prepared, mode)
    parts = LossParts(
        obj_3d=loss_obj(result.obj_logits_3d, ts.prepared.gt_objects),
        pred_3d=(loss_pred(result.pred_logits_3d, ts.prepared.gt_pred_rows)
                 if result.pred_logits_3d is not None else Tensor(0.0)),
    )
    if vlsat:
        parts.obj_oracle = loss_obj(result.obj_logits_oracle, ts.prepared.gt_objects)
        parts.pred_oracle = (loss_pred(result.pred_logits_oracle, ts.prepared.gt_pred_rows)
                             if result.pred_logits_oracle is not None else Tensor(0.0))
        if result.fused_triplets is not None and len(ts.tri_pair_indices):
            fused = ad.gather_rows(result.fused_triplets, ts.tri_pair_indices)
            parts.tri_emb = loss_tri_emb(fused, ts.tri_text_rows)
        else:
            parts.tri_emb = Tensor(0.0)
        parts.node_init = loss_node_init(result.nodes0_3d, result.nodes0_oracle)
    total = total_loss(parts, weights)
    values = {
        "loss_obj_3d": parts.obj_3d.item(),
        "loss_pred_3d": parts.pred_3d.item(),
        "loss_obj_or": parts.obj_oracle.item() if parts.obj_oracle is not None else None,
        "loss_pred_or": parts.pred_oracle.item() if parts.pred_oracle is not None else None,
        "loss_tri": parts.tri_emb.item() if parts.tri_emb is not None else None,
        "loss_node": parts.node_init.item() if parts.node_init is not None else None,
        "loss_total": total.item(),
    }
    return total, values


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    vlsat: bool = True
    lambda_obj: float = 0.1
    lambda_pred: float = 1.0
    lambda_aux: float = 0.1
    init_classifiers_from_embeddings: bool | None = None  # default: follow vlsat

    def weights(self) -> LossWeights:
        w = LossWeights(obj=self.lambda_obj, pred=self.lambda_pred, aux=self.lambda_aux)
        w.validate()
        return w

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        self.weights()


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 600, epoch]))


def train(samples: list[SceneGraphSample], vocab: Vocabulary,
          provider: EmbeddingProvider | None, model_cfg: ModelConfig,
          train_cfg: TrainConfig, resume: "Checkpoint | None" = None,
          log_hook=None, stop_epoch: int | None = None) -> tuple[ModelState, "AdamW", list[dict]]:
    """Train on the train-split scenes; returns model, optimizer and epoch log.

    train_cfg.epochs fixes the cosine schedule; stop_epoch (when given)
    interrupts the run early so it can be resumed from a checkpoint.
    """
    train_cfg.validate()
    scenes = [s for s in samples if s.split == "train"]
    if not scenes:
        raise DataError("no training scenes")
    weights = train_cfg.weights()
    vlsat = train_cfg.vlsat
    if vlsat and any(s.visual_features is None for s in scenes):
        raise DataError("oracle-assisted training requires visual features on every scene")
    if vlsat and provider is None:
        raise DataError("oracle-assisted training requires an embedding provider")

    model_cfg.joint = vlsat
    if resume is not None:
        model, optimizer, start_epoch = resume.restore()
    else:
        model = ModelState(model_cfg)
        init_emb = train_cfg.init_classifiers_from_embeddings
        if init_emb is None:
            init_emb = vlsat
        if init_emb:
            if provider is None:
                raise ConfigError("classifier embedding init requires a provider")
            apply_embedding_init(model, provider)
        optimizer = AdamW(model.params, betas=(train_cfg.beta1, train_cfg.beta2),
                          eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
        start_epoch = 0

    prepared = [build_train_scene(s, provider if vlsat else None) for s in scenes]
    logs: list[dict] = []
    term_keys = ("loss_total", "loss_obj_3d", "loss_pred_3d", "loss_obj_or",
                 "loss_pred_or", "loss_tri", "loss_node")

    end_epoch = train_cfg.epochs if stop_epoch is None else min(stop_epoch, train_cfg.epochs)
    for epoch in range(start_epoch, end_epoch):
        lr = cosine_lr(train_cfg.base_lr, epoch, train_cfg.epochs)
        order = _epoch_rng(train_cfg.seed, epoch).permutation(len(prepared))
        sums = {k: 0.0 for k in term_keys}
        have = {k: 0 for k in term_keys}
        for batch_start in range(0, len(order), train_cfg.batch_size):
            batch = order[batch_start:batch_start + train_cfg.batch_size]
            optimizer.zero_grad()
            for scene_pos in batch:
                ts = prepared[scene_pos]
                try:
                    with Tape() as tape:
                        total, values = scene_loss(model, ts, weights, vlsat)
                        tape.backward(total)
                except NumericError as e:
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch {batch_start // train_cfg.batch_size}, "
                        f"scene {ts.prepared.scene_id}: {e}") from e
                for k in term_keys:
                    if values[k] is not None:
                        sums[k] += values[k]
                        have[k] += 1
            optimizer.step(lr)
        record = {"epoch": epoch, "lr": lr}
        for k in term_keys:
            record[k] = (sums[k] / have[k]) if have[k] else None
        logs.append(record)
        if log_hook is not None:
            log_hook(record)
    return model, optimizer, logs


# ---------------------------------------------------------------------------
# checkpointing


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(data.tobytes()).decode("ascii")}


def _decode_array(blob: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(blob["data"]), dtype="<f8")
    return arr.reshape(blob["shape"]).copy()


class Checkpoint:
    """Serializable snapshot: parameters, optimizer state, epoch, config."""

    FORMAT_VERSION = 1

    def __init__(self, payload: dict):
        self.payload = payload

    @classmethod
    def capture(cls, model: ModelState, optimizer: AdamW, train_cfg: TrainConfig,
                next_epoch: int, vocab_hash: str, extra: dict | None = None) -> "Checkpoint":
        payload = {
            "format_version": cls.FORMAT_VERSION,
            "kind": "sg3d-checkpoint",
            "model_config": asdict(model.cfg),
            "train_config": asdict(train_cfg),
            "next_epoch": next_epoch,
            "rng": {"seed": train_cfg.seed},
            "vocab_hash": vocab_hash,
            "params": {k: _encode_array(p.data) for k, p in model.params.items()},
            "optimizer": {
                "step": optimizer.step_count,
                "m": {k: _encode_array(v) for k, v in optimizer.m.items()},
                "v": {k: _encode_array(v) for k, v in optimizer.v.items()},
            },
            "extra": extra or {},
        }
        payload["content_hash"] = cls._hash(payload)
        return cls(payload)

    @staticmethod
    def _hash(payload: dict) -> str:
        body = {k: v for k, v in payload.items() if k != "content_hash"}
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.payload, sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("kind") != "sg3d-checkpoint":
            raise DataError(f"{path}: not a checkpoint file")
        if payload.get("format_version") != cls.FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version")
        if payload.get("content_hash") != cls._hash(payload):
            raise DataError(f"{path}: checkpoint content hash mismatch")
        return cls(payload)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.payload["model_config"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.payload["train_config"])

    @property
    def vocab_hash(self) -> str:
        return self.payload["vocab_hash"]

    def restore(self) -> tuple[ModelState, AdamW, int]:
        model = ModelState(self.model_config)
        saved = self.payload["params"]
        if set(saved) != set(model.params):
            raise DataError("checkpoint parameter names do not match the model configuration")
        for name, blob in saved.items():
            arr = _decode_array(blob)
            if arr.shape != model.params[name].data.shape:
                raise DataError(f"checkpoint parameter {name} has shape {arr.shape}")
            model.params[name].data = arr
        tc = self.train_config
        optimizer = AdamW(model.params, betas=(tc.beta1, tc.beta2), eps=tc.eps,
                          weight_decay=tc.weight_decay)
        optimizer.step_count = self.payload["optimizer"]["step"]
        optimizer.m = {k: _decode_array(v) for k, v in self.payload["optimizer"]["m"].items()}
        optimizer.v = {k: _decode_array(v) for k, v in self.payload["optimizer"]["v"].items()}
        return model, optimizer, self.payload["next_epoch"]
