"""Joint image/label embedding: projection heads, symmetric contrastive loss,
hand-written backward pass, AdamW and the training loop."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .embeddings import IMAGE_DIM, PROJECTION_DIM, TEXT_DIM, EmbeddingMatrix

INIT_LOG_SCALE = math.log(1 / 0.07)
MAX_LOG_SCALE = math.log(100.0)


class TrainingError(ValueError):
    pass


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "ProjectionHead":
        bound = 1.0 / math.sqrt(in_dim)
        return cls(rng.uniform(-bound, bound, size=(out_dim, in_dim)), np.zeros(out_dim))

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy())


@dataclass
class JointEmbeddingModel:
    image_head: ProjectionHead
    text_head: ProjectionHead
    log_logit_scale: float = INIT_LOG_SCALE

    @classmethod
    def init(
        cls,
        image_dim: int = IMAGE_DIM,
        text_dim: int = TEXT_DIM,
        out_dim: int = PROJECTION_DIM,
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ) -> "JointEmbeddingModel":
        rng = rng if rng is not None else np.random.default_rng(seed)
        image = ProjectionHead.init(image_dim, out_dim, rng)
        text = ProjectionHead.init(text_dim, out_dim, rng)
        return cls(image, text, INIT_LOG_SCALE)

    @property
    def logit_scale(self) -> float:
        return math.exp(self.log_logit_scale)

    def copy(self) -> "JointEmbeddingModel":
        return JointEmbeddingModel(
            self.image_head.copy(), self.text_head.copy(), self.log_logit_scale
        )

    # Flat layout: image W, image b, text W, text b, log scale.
    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [
                self.image_head.weight.ravel(),
                self.image_head.bias,
                self.text_head.weight.ravel(),
                self.text_head.bias,
                [self.log_logit_scale],
            ]
        ).astype(np.float64)

    def unflatten(self, flat: np.ndarray) -> "JointEmbeddingModel":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_parameters:
            raise ValueError(f"expected {self.num_parameters} parameters, got {flat.size}")
        out = []
        pos = 0
        for head in (self.image_head, self.text_head):
            nw = head.weight.size
            w = flat[pos : pos + nw].reshape(head.weight.shape).copy()
            pos += nw
            b = flat[pos : pos + head.out_dim].copy()
            pos += head.out_dim
            out.append(ProjectionHead(w, b))
        return JointEmbeddingModel(out[0], out[1], float(flat[pos]))

    @property
    def num_parameters(self) -> int:
        return self.image_head.weight.size + self.image_head.bias.size + (
            self.text_head.weight.size + self.text_head.bias.size + 1
        )


def _normalize_rows(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("projection is the zero vector; direction undefined")
    return z / norms, norms


def project(head: ProjectionHead, v: np.ndarray) -> np.ndarray:
    """L2-normalized affine projection of one vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (head.in_dim,):
        raise ValueError(f"expected vector of length {head.in_dim}, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("input vector has non-finite entries")
    u, _ = _normalize_rows(head.weight @ v + head.bias)
    return u


def project_batch(head: ProjectionHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ValueError(f"expected (n, {head.in_dim}) inputs, got shape {x.shape}")
    u, _ = _normalize_rows(x @ head.weight.T + head.bias)
    return u


class ClipLoss(NamedTuple):
    loss: float
    d_image: np.ndarray
    d_text: np.ndarray
    d_log_scale: float


def _log_softmax(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return a - m - np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def clip_loss(image_proj: np.ndarray, text_proj: np.ndarray, log_logit_scale: float) -> ClipLoss:
    """Symmetric cross-entropy over the scaled similarity matrix.

    Row ``i`` of each input is a matched pair; the loss averages the
    image-to-text (row softmax) and text-to-image (column softmax)
    cross-entropies against the diagonal.
    """
    img = np.asarray(image_proj, dtype=np.float64)
    txt = np.asarray(text_proj, dtype=np.float64)
    if img.shape != txt.shape or img.ndim != 2 or img.shape[0] < 1:
        raise ValueError(f"need matching (N, d) batches, got {img.shape} and {txt.shape}")
    if not (np.isfinite(img).all() and np.isfinite(txt).all() and math.isfinite(log_logit_scale)):
        raise ValueError("non-finite input to contrastive loss")

    n = img.shape[0]
    scale = math.exp(log_logit_scale)
    sims = img @ txt.T
    logits = scale * sims
    log_p_rows = _log_softmax(logits, axis=1)
    log_p_cols = _log_softmax(logits, axis=0)
    diag = np.arange(n)
    loss = -0.5 * (log_p_rows[diag, diag].mean() + log_p_cols[diag, diag].mean())

    eye = np.eye(n)
    d_logits = 0.5 * ((np.exp(log_p_rows) - eye) + (np.exp(log_p_cols) - eye)) / n
    d_sims = scale * d_logits
    return ClipLoss(
        float(loss),
        d_sims @ txt,
        d_sims.T @ img,
        float(np.sum(d_logits * logits)),
    )


@dataclass
class HeadGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ModelGrad:
    image: HeadGrad
    text: HeadGrad
    log_logit_scale: float

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [
                self.image.weight.ravel(),
                self.image.bias,
                self.text.weight.ravel(),
                self.text.bias,
                [self.log_logit_scale],
            ]
        )


def _head_forward(head: ProjectionHead, x: np.ndarray):
    z = x @ head.weight.T + head.bias
    u, norms = _normalize_rows(z)
    return u, norms


def _head_backward(x: np.ndarray, u: np.ndarray, norms: np.ndarray, d_u: np.ndarray) -> HeadGrad:
    # d/dz of z/|z| applied to d_u: (d_u - u (u . d_u)) / |z|
    d_z = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / norms
    return HeadGrad(d_z.T @ x, d_z.sum(axis=0))


def loss_and_grad(
    model: JointEmbeddingModel, image_x: np.ndarray, text_x: np.ndarray
) -> tuple[float, ModelGrad]:
    """End-to-end contrastive loss of a batch and its parameter gradient."""
    image_x = np.asarray(image_x, dtype=np.float64)
    text_x = np.asarray(text_x, dtype=np.float64)
    u_img, n_img = _head_forward(model.image_head, image_x)
    u_txt, n_txt = _head_forward(model.text_head, text_x)
    res = clip_loss(u_img, u_txt, model.log_logit_scale)
    grad = ModelGrad(
        _head_backward(image_x, u_img, n_img, res.d_image),
        _head_backward(text_x, u_txt, n_txt, res.d_text),
        res.d_log_scale,
    )
    return res.loss, grad


class GradCheck(NamedTuple):
    max_error: float
    worst_index: int
    errors: np.ndarray


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    eps: float = 1e-5,
) -> GradCheck:
    """Compare ``fn``'s analytic gradient with central differences.

    ``fn`` maps a flat float64 parameter vector to ``(loss, gradient)``.
    The per-entry error is ``|fd - an| / max(1e-12, |fd| + |an|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = np.array(params, dtype=np.float64)
    _, analytic = fn(params.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.isfinite(analytic).all():
        raise ValueError("analytic gradient has non-finite entries")

    numeric = np.empty_like(params)
    for i in range(params.size):
        saved = params[i]
        params[i] = saved + eps
        f_plus, _ = fn(params)
        params[i] = saved - eps
        f_minus, _ = fn(params)
        params[i] = saved
        numeric[i] = (f_plus - f_minus) / (2 * eps)
    if not np.isfinite(numeric).all():
        raise ValueError("finite-difference gradient has non-finite entries")

    errors = np.abs(numeric - analytic) / np.maximum(1e-12, np.abs(numeric) + np.abs(analytic))
    worst = int(np.argmax(errors))
    return GradCheck(float(errors[worst]), worst, errors)


def model_objective(
    model: JointEmbeddingModel, image_x: np.ndarray, text_x: np.ndarray
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Flat-parameter loss function for ``grad_check``."""

    def fn(flat: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad = loss_and_grad(model.unflatten(flat), image_x, text_x)
        return loss, grad.flatten()

    return fn


class AdamW:
    """Adam with decoupled weight decay over a dict of named float64 arrays.

    Decay is applied only to the names listed in ``decay``.
    """

    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay: Sequence[str] = (),
    ):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1 - self.beta1**self.t
        bc2 = 1 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if name in self.decay and self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 10
    seed: int = 0
    variant_sampling: bool = False
    dedup_labels_in_batch: bool = False
    out_dim: int = PROJECTION_DIM

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingError("batch_size must be at least 2 for contrastive batches")
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.epochs < 0:
            raise TrainingError("epochs must be non-negative")
        if self.weight_decay < 0:
            raise TrainingError("weight_decay must be non-negative")


@dataclass
class TrainResult:
    model: JointEmbeddingModel
    loss_trace: list[float]
    epoch_orders: list[np.ndarray] = field(default_factory=list)
    skipped_batches: int = 0


def _params(model: JointEmbeddingModel) -> dict[str, np.ndarray]:
    return {
        "image.weight": model.image_head.weight,
        "image.bias": model.image_head.bias,
        "text.weight": model.text_head.weight,
        "text.bias": model.text_head.bias,
        "log_logit_scale": np.array([model.log_logit_scale]),
    }


def _grads(grad: ModelGrad) -> dict[str, np.ndarray]:
    return {
        "image.weight": grad.image.weight,
        "image.bias": grad.image.bias,
        "text.weight": grad.text.weight,
        "text.bias": grad.text.bias,
        "log_logit_scale": np.array([grad.log_logit_scale]),
    }


def train(
    config: TrainConfig,
    image_feats: EmbeddingMatrix,
    text_embeds: EmbeddingMatrix,
    pairs: Sequence[tuple[str, str]],
) -> TrainResult:
    """Fit both projection heads on (image_id, text_id) pairs.

    Independent random streams drive initialization, per-epoch shuffling and
    variant sampling, so the shuffle order depends only on the seed and the
    pair count, not on the batch size.
    """
    pairs = list(pairs)
    missing = [p for p in pairs if p[0] not in image_feats or p[0] in image_feats.variant_of]
    missing += [p for p in pairs if p[1] not in text_embeds]
    if missing:
        raise TrainingError(f"unresolvable pair ids, e.g. {missing[0]}")
    if config.batch_size > len(pairs):
        raise TrainingError(f"batch_size {config.batch_size} exceeds {len(pairs)} pairs")

    init_ss, shuffle_ss, variant_ss = np.random.SeedSequence(config.seed).spawn(3)
    model = JointEmbeddingModel.init(
        image_feats.dim, text_embeds.dim, config.out_dim, rng=np.random.default_rng(init_ss)
    )
    shuffle_rng = np.random.default_rng(shuffle_ss)
    variant_rng = np.random.default_rng(variant_ss)

    text_x = text_embeds.rows([t for _, t in pairs]).astype(np.float64)
    base_x = image_feats.rows([i for i, _ in pairs]).astype(np.float64)
    options = [[i, *image_feats.variants(i)] for i, _ in pairs]
    labels = np.array([t for _, t in pairs])

    opt = AdamW(
        config.learning_rate,
        weight_decay=config.weight_decay,
        decay=("image.weight", "text.weight"),
    )
    params = _params(model)
    trace: list[float] = []
    orders: list[np.ndarray] = []
    skipped = 0
    n_batches = len(pairs) // config.batch_size

    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(pairs))
        orders.append(order)
        losses = []
        for b in range(n_batches):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            if config.dedup_labels_in_batch and len(set(labels[idx])) < len(idx):
                skipped += 1
                continue
            if config.variant_sampling:
                picks = [options[i][int(variant_rng.integers(len(options[i])))] for i in idx]
                img_x = image_feats.rows(picks).astype(np.float64)
            else:
                img_x = base_x[idx]
            current = JointEmbeddingModel(
                ProjectionHead(params["image.weight"], params["image.bias"]),
                ProjectionHead(params["text.weight"], params["text.bias"]),
                float(params["log_logit_scale"][0]),
            )
            loss, grad = loss_and_grad(current, img_x, text_x[idx])
            opt.step(params, _grads(grad))
            np.minimum(params["log_logit_scale"], MAX_LOG_SCALE, out=params["log_logit_scale"])
            losses.append(loss)
        trace.append(math.fsum(losses) / len(losses) if losses else float("nan"))

    model.log_logit_scale = float(params["log_logit_scale"][0])
    return TrainResult(model, trace, orders, skipped)


_MAGIC = b"M3GJEMB1"


def save_model(model: JointEmbeddingModel, path: str | Path, config: TrainConfig | None = None) -> None:
    """Write a JSON header and the flat float64 parameter blob."""
    header = {
        "image_in_dim": model.image_head.in_dim,
        "text_in_dim": model.text_head.in_dim,
        "out_dim": model.image_head.out_dim,
        "seed": config.seed if config else None,
        "config": asdict(config) if config else None,
        "dtype": "<f8",
        "layout": ["image.weight", "image.bias", "text.weight", "text.bias", "log_logit_scale"],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = model.flatten().astype("<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_model(path: str | Path) -> tuple[JointEmbeddingModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise TrainingError(f"{path}: not a model file")
    (n,) = struct.unpack_from("<I", raw, len(_MAGIC))
    start = len(_MAGIC) + 4
    header = json.loads(raw[start : start + n].decode("utf-8"))
    flat = np.frombuffer(raw[start + n :], dtype="<f8").astype(np.float64)
    shell = JointEmbeddingModel(
        ProjectionHead(
            np.zeros((header["out_dim"], header["image_in_dim"])), np.zeros(header["out_dim"])
        ),
        ProjectionHead(
            np.zeros((header["out_dim"], header["text_in_dim"])), np.zeros(header["out_dim"])
        ),
    )
    if flat.size != shell.num_parameters:
        raise TrainingError(f"{path}: parameter blob has {flat.size} values, expected {shell.num_parameters}")
    return shell.unflatten(flat), header


def write_loss_trace(trace: Sequence[float], path: str | Path) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{loss!r}" for i, loss in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
