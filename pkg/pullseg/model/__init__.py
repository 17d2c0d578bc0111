"""Student/teacher networks: encoder h, segmentor f, projector g.

The blocks carry no normalization layers, so every pixel's output depends only
on its own image and gradients can be checked by finite differences.
"""
import dataclasses
import functools
import hashlib
import typing

import numpy as np

import pullseg.numerics
from pullseg.numerics import autograd
from pullseg.utils import errors

Gradients = typing.Dict[str, np.ndarray]

ENCODER = "encoder"
HEAD = "head"

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# encoder strides 2, 2, 1
FEATURE_STRIDE = 4


@dataclasses.dataclass(frozen=True)
class Architecture:
    classes: int = 4
    height: int = 64
    width: int = 64
    widths: typing.Tuple[int, int] = (16, 32)
    feature_dim: int = 32
    projector_hidden: int = 32
    embed_dim: int = 16
    in_channels: int = 3

    @property
    def feature_size(self) -> typing.Tuple[int, int]:
        return self.height // FEATURE_STRIDE, self.width // FEATURE_STRIDE

    def layout(self) -> typing.List[typing.Tuple[str, typing.Tuple[int, ...]]]:
        """Parameter names and shapes in declared architecture order."""
        w1, w2 = self.widths
        convs = [
            ("encoder.conv1", 3, self.in_channels, w1),
            ("encoder.conv2", 3, w1, w2),
            ("encoder.conv3", 3, w2, self.feature_dim),
            ("segmentor.classifier", 1, self.feature_dim, self.classes),
            ("projector.conv1", 3, self.feature_dim, self.projector_hidden),
            ("projector.conv2", 3, self.projector_hidden, self.embed_dim),
        ]
        layout = []
        for prefix, kernel, c_in, c_out in convs:
            layout.append((f"{prefix}.weight", (kernel, kernel, c_in, c_out)))
            layout.append((f"{prefix}.bias", (c_out,)))
        return layout


def param_group(name: str) -> str:
    return ENCODER if name.startswith("encoder.") else HEAD


##############
# Parameters #
##############


@dataclasses.dataclass
class ModelParams:
    architecture: Architecture
    tensors: typing.Dict[str, np.ndarray]

    def names(self) -> typing.List[str]:
        return [name for name, _ in self.architecture.layout()]

    def tensor(self, name: str) -> autograd.Tensor:
        return autograd.Tensor(self.tensors[name])

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.architecture, {k: v.copy() for k, v in self.tensors.items()}
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names()])

    def digest(self) -> str:
        sha = hashlib.sha256()
        for name in self.names():
            sha.update(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return sha.hexdigest()

    def record(self) -> "RecordedParams":
        """Fresh gradient-tracking leaves for one step's forward passes."""
        return RecordedParams(
            self.architecture,
            {name: autograd.leaf(value, name=name) for name, value in self.tensors.items()},
        )

    def check_compatible(self, other: "ModelParams"):
        if self.names() != other.names():
            raise errors.ShapeMismatch("parameter sets have different layouts")
        for name in self.names():
            if self.tensors[name].shape != other.tensors[name].shape:
                raise errors.ShapeMismatch(f"{name}: {self.tensors[name].shape} vs {other.tensors[name].shape}")


@dataclasses.dataclass
class RecordedParams:
    architecture: Architecture
    leaves: typing.Dict[str, autograd.Tensor]

    def tensor(self, name: str) -> autograd.Tensor:
        return self.leaves[name]


def init_params(arch: Architecture, rng: pullseg.numerics.Rng) -> ModelParams:
    """Glorot-uniform conv weights, zero biases."""
    tensors = {}
    for name, shape in arch.layout():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
            continue
        kernel, _, c_in, c_out = shape
        bound = np.sqrt(6.0 / (kernel * kernel * c_in + kernel * kernel * c_out))
        tensors[name] = rng.split(name).generator().uniform(-bound, bound, size=shape)
    return ModelParams(arch, tensors)


###########
# Forward #
###########


@functools.lru_cache(maxsize=16)
def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Half-pixel bilinear interpolation as an (out, in) matrix."""
    scale = in_size / out_size
    matrix = np.zeros((out_size, in_size))
    for o in range(out_size):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        matrix[o, lo] += 1.0 - frac
        matrix[o, hi] += frac
    return matrix


@dataclasses.dataclass
class ForwardPass:
    features: autograd.Tensor
    logits: autograd.Tensor
    probs: autograd.Tensor
    embeddings: autograd.Tensor
    activations: typing.List[autograd.Tensor]


Params = typing.Union[ModelParams, RecordedParams]


def _conv(params: Params, prefix: str, x, stride: int = 1, pad: int = 1):
    return autograd.conv2d(
        x, params.tensor(f"{prefix}.weight"), params.tensor(f"{prefix}.bias"), stride, pad
    )


def forward(params: Params, img) -> ForwardPass:
    """Run h, f and g on one H×W×3 image.

    ``ModelParams`` run as constants (teacher, evaluation); ``RecordedParams``
    build a graph for ``backward``.
    """
    arch = params.architecture
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (arch.height, arch.width, arch.in_channels):
        raise errors.ShapeMismatch(
            f"expected image {(arch.height, arch.width, arch.in_channels)}, got {img.shape}"
        )
    activations = []

    x = autograd.Tensor(img)
    for prefix, stride in (("encoder.conv1", 2), ("encoder.conv2", 2), ("encoder.conv3", 1)):
        pre = _conv(params, prefix, x, stride)
        activations.append(pre)
        x = pre.relu()
    features = x

    low = _conv(params, "segmentor.classifier", features, pad=0)
    h, w = arch.feature_size
    logits = autograd.resample(
        low, bilinear_matrix(arch.height, h), bilinear_matrix(arch.width, w)
    )
    probs = logits.softmax(axis=-1)

    hidden = _conv(params, "projector.conv1", features)
    activations.append(hidden)
    embeddings = _conv(params, "projector.conv2", hidden.relu())

    return ForwardPass(features, logits, probs, embeddings, activations)


def predict(params: ModelParams, img) -> np.ndarray:
    return np.argmax(forward(params, img).probs.data, axis=-1)


def backward(loss: autograd.Tensor, recorded: RecordedParams) -> Gradients:
    """Exact reverse-mode gradients of ``loss`` for every student parameter."""
    if not isinstance(loss, autograd.Tensor) or not loss.requires_grad:
        raise errors.GraphNotRecorded("the loss was not built from recorded parameters")
    if loss.size != 1:
        raise errors.GraphNotRecorded("backward needs a scalar loss")
    for tensor in recorded.leaves.values():
        tensor.grad = None
    loss.backward()
    return {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in recorded.leaves.items()
    }


################
# Mean teacher #
################


@dataclasses.dataclass
class TeacherState:
    params: ModelParams
    eta: float = 0.999

    @classmethod
    def from_student(cls, student: ModelParams, eta: float) -> "TeacherState":
        return cls(student.copy(), eta)


def ema_update(teacher: TeacherState, student: ModelParams) -> TeacherState:
    """θ_t ← η·θ_t + (1 − η)·θ_s, elementwise."""
    teacher.params.check_compatible(student)
    eta = teacher.eta
    tensors = {
        name: eta * value + (1.0 - eta) * student.tensors[name]
        for name, value in teacher.params.tensors.items()
    }
    return TeacherState(ModelParams(teacher.params.architecture, tensors), eta)


#############
# Optimizer #
#############


@dataclasses.dataclass
class OptimState:
    """AdamW moments plus the schedule: lr · min(1, step / t_warm)."""

    first: typing.Dict[str, np.ndarray]
    second: typing.Dict[str, np.ndarray]
    step: int = 0
    lr_encoder: float = 1e-3
    lr_head: float = 1e-2
    weight_decay: float = 0.01
    t_warm: int = 0

    @classmethod
    def create(
        cls,
        params: ModelParams,
        lr_encoder: float,
        lr_head: typing.Optional[float] = None,
        weight_decay: float = 0.01,
        t_warm: int = 0,
    ) -> "OptimState":
        zeros = {name: np.zeros_like(v) for name, v in params.tensors.items()}
        return cls(
            first=zeros,
            second={name: v.copy() for name, v in zeros.items()},
            lr_encoder=lr_encoder,
            lr_head=lr_encoder * 10 if lr_head is None else lr_head,
            weight_decay=weight_decay,
            t_warm=t_warm,
        )

    def warmup_factor(self) -> float:
        if self.t_warm <= 0:
            return 1.0
        return min(1.0, self.step / self.t_warm)

    def learning_rate(self, name: str) -> float:
        base = self.lr_encoder if param_group(name) == ENCODER else self.lr_head
        return base * self.warmup_factor()


def optimizer_step(
    opt: OptimState, params: ModelParams, grads: Gradients
) -> typing.Tuple[OptimState, ModelParams]:
    """Decoupled-weight-decay Adam update with bias-corrected moments."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise errors.NonFiniteGradient(f"gradient of {name} is not finite")
    beta1, beta2 = BETAS
    t = opt.step + 1
    first, second, tensors = {}, {}, {}
    for name, value in params.tensors.items():
        grad = grads.get(name, np.zeros_like(value))
        lr = opt.learning_rate(name)
        m = beta1 * opt.first[name] + (1.0 - beta1) * grad
        v = beta2 * opt.second[name] + (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensors[name] = value - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + opt.weight_decay * value)
        first[name], second[name] = m, v
    new_opt = dataclasses.replace(opt, first=first, second=second, step=t)
    return new_opt, ModelParams(params.architecture, tensors)


#################
# Pseudo-labels #
#################


@dataclasses.dataclass(frozen=True)
class PseudoLabel:
    labels: np.ndarray
    confidence: np.ndarray
    quality: float

    @classmethod
    def from_probs(cls, probs: np.ndarray, delta_p: float) -> "PseudoLabel":
        # np.argmax keeps the lowest class index on ties
        labels = np.argmax(probs, axis=-1)
        confidence = np.max(probs, axis=-1)
        quality = float(np.mean(confidence > delta_p))
        return cls(labels, confidence, quality)

    def with_labels(self, labels: np.ndarray) -> "PseudoLabel":
        return PseudoLabel(labels, self.confidence, self.quality)


def pseudo_label(teacher: TeacherState, img, delta_p: float) -> PseudoLabel:
    probs = forward(teacher.params, img).probs.data
    return PseudoLabel.from_probs(probs, delta_p)
