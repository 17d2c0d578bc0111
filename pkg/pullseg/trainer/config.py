"""RunConfig: every scalar knob of a training run, its flat text form and presets."""
import dataclasses
import enum
import hashlib
import pathlib
import typing

import pullseg.data
import pullseg.losses
import pullseg.model
import pullseg.pairing
import pullseg.translate
import pullseg.utils
from pullseg.utils import errors

CONFIG_FILE = "config.txt"

# run-length and bookkeeping knobs; a resumed run may change them
UNHASHED = ("iters", "ckpt_every", "eval_every")


class Mode(enum.Enum):
    uda = "uda"
    dg = "dg"


def _enum(kind, value, field):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(member.value for member in kind)
        raise errors.ConfigInvalid(f"{field} must be one of {choices}, got {value!r}") from None


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "uda"

    # data
    classes: int = 4
    height: int = 64
    width: int = 64
    n_source: int = 200
    n_target: int = 200
    n_held_out: int = 50

    # network
    widths: typing.Tuple[int, ...] = (16, 32)
    feature_dim: int = 32
    projector_hidden: int = 32
    embed_dim: int = 16

    # translation and self-training
    engine: str = "fda"
    beta_fda: float = 0.09
    jitter_strength: float = 0.5
    blur_sigma: float = 1.0
    strong_aug: bool = True
    delta_p: float = 0.968
    eta: float = 0.999

    # pulling
    pull_kind: str = "infonce"
    tau: float = 0.2
    lambda_pull: float = 0.1
    alpha: float = 0.5
    n: int = 16
    m: int = 64
    query_sampling: str = "balanced"
    negative_sampling: str = "equalized"
    prototype_mode: str = "normalize_mean"
    beta_drw: float = 0.5
    drw_mode: str = "dynamic"
    drw_divisor: str = "max"
    fixed_weights: typing.Tuple[float, ...] = ()
    query_domain: str = "pseudo_target"
    positive_domain: str = "source"
    negative_domain: str = "source_target"
    pseudo_target_ce: bool = False

    # optimization
    iters: int = 2000
    source_batch: int = 2
    target_batch: int = 2
    lr_encoder: float = 5e-4
    lr_head: float = 5e-3
    weight_decay: float = 0.01
    t_warm: int = 100

    # bookkeeping
    ckpt_every: int = 500
    eval_every: int = 500

    def __post_init__(self):
        mode = _enum(Mode, self.mode, "mode")
        engine = self.engine_spec()
        self.data_config().validate()
        self.architecture()
        self.pairing_config()
        self.loss_config().check_classes(self.classes)
        if mode is Mode.dg and engine.needs_reference:
            raise errors.ConfigInvalid("dg mode has no target reference; pick a non-fda engine")
        if mode is Mode.dg and self.positive_domain == pullseg.pairing.PairDomain.target.value:
            raise errors.ConfigInvalid("dg mode has no target features to build prototypes from")
        if not 0.0 <= self.eta <= 1.0:
            raise errors.ConfigInvalid(f"eta must lie in [0, 1], got {self.eta}")
        if self.delta_p < 0:
            raise errors.ConfigInvalid("delta_p must be non-negative")
        if self.iters < 0 or self.ckpt_every < 1 or self.eval_every < 1:
            raise errors.ConfigInvalid("iters must be ≥ 0 and intervals ≥ 1")
        if self.source_batch < 1 or self.target_batch < (1 if mode is Mode.uda else 0):
            raise errors.ConfigInvalid("batch sizes are too small for the mode")
        if min(self.lr_encoder, self.lr_head) <= 0 or self.weight_decay < 0:
            raise errors.ConfigInvalid("learning rates must be positive, weight decay ≥ 0")
        if self.height % pullseg.model.FEATURE_STRIDE or self.width % pullseg.model.FEATURE_STRIDE:
            raise errors.ConfigInvalid(
                f"image size must be divisible by {pullseg.model.FEATURE_STRIDE}"
            )

    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        values = dict(
            n=128, m=1024, lr_encoder=6e-5, lr_head=6e-4, t_warm=1500, iters=40000
        )
        values.update(overrides)
        return cls(**values)

    @property
    def run_mode(self) -> Mode:
        return Mode(self.mode)

    @property
    def is_dg(self) -> bool:
        return self.run_mode is Mode.dg

    def engine_spec(self) -> pullseg.translate.EngineSpec:
        return pullseg.translate.EngineSpec(
            kind=_enum(pullseg.translate.EngineKind, self.engine, "engine"),
            beta_fda=self.beta_fda,
            jitter_strength=self.jitter_strength,
            blur_sigma=self.blur_sigma,
        )

    def data_config(self) -> pullseg.data.DataConfig:
        return pullseg.data.DataConfig(
            classes=self.classes,
            height=self.height,
            width=self.width,
            n_source=self.n_source,
            n_target=self.n_target,
            n_held_out=self.n_held_out,
        )

    def architecture(self) -> pullseg.model.Architecture:
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise errors.ConfigInvalid("widths needs two positive channel counts")
        if min(self.feature_dim, self.projector_hidden, self.embed_dim) < 1:
            raise errors.ConfigInvalid("feature, hidden and embedding sizes must be positive")
        return pullseg.model.Architecture(
            classes=self.classes,
            height=self.height,
            width=self.width,
            widths=(int(self.widths[0]), int(self.widths[1])),
            feature_dim=self.feature_dim,
            projector_hidden=self.projector_hidden,
            embed_dim=self.embed_dim,
        )

    def pairing_config(self) -> pullseg.pairing.PairingConfig:
        return pullseg.pairing.PairingConfig(
            classes=self.classes,
            n=self.n,
            m=self.m,
            alpha=self.alpha,
            query_sampling=_enum(
                pullseg.pairing.QuerySampling, self.query_sampling, "query_sampling"
            ),
            negative_sampling=_enum(
                pullseg.pairing.NegativeSampling, self.negative_sampling, "negative_sampling"
            ),
            prototype_mode=_enum(
                pullseg.pairing.PrototypeMode, self.prototype_mode, "prototype_mode"
            ),
            query_domain=_enum(pullseg.pairing.PairDomain, self.query_domain, "query_domain"),
            positive_domain=_enum(
                pullseg.pairing.PairDomain, self.positive_domain, "positive_domain"
            ),
            negative_domain=_enum(
                pullseg.pairing.NegativeDomain, self.negative_domain, "negative_domain"
            ),
        )

    def loss_config(self) -> pullseg.losses.LossConfig:
        return pullseg.losses.LossConfig(
            tau=self.tau,
            lambda_pull=self.lambda_pull,
            pull_kind=_enum(pullseg.losses.PullKind, self.pull_kind, "pull_kind"),
            beta_drw=self.beta_drw,
            drw_mode=_enum(pullseg.losses.DrwMode, self.drw_mode, "drw_mode"),
            drw_divisor=_enum(pullseg.losses.DrwDivisor, self.drw_divisor, "drw_divisor"),
            fixed_weights=tuple(self.fixed_weights),
        )


###########
# Presets #
###########

def _direction(query: str, positive: str, negative: str, pseudo_target_ce: bool = False):
    return {
        "lambda_pull": 0.1,
        "query_domain": query,
        "positive_domain": positive,
        "negative_domain": negative,
        "pseudo_target_ce": pseudo_target_ce,
    }


PRESETS: typing.Dict[str, typing.Dict[str, typing.Any]] = {
    "source_only": {"lambda_pull": 0.0, "delta_p": 1.01},
    "self_training": {"lambda_pull": 0.0, "pseudo_target_ce": False},
    "fda_ce": {"lambda_pull": 0.0, "pseudo_target_ce": True},
    # pair-direction ablations, each on top of self-training
    "vanilla_contrast": _direction("source", "source", "source"),
    "source_to_target": _direction("source", "target", "source_target"),
    "source_to_pseudo_target": _direction("source", "pseudo_target", "source_target"),
    "pseudo_target_to_source_src_negatives": _direction("pseudo_target", "source", "source"),
    "full": _direction("pseudo_target", "source", "source_target"),
    "full_pseudo_target_ce": _direction("pseudo_target", "source", "source_target", True),
    "dg": {"mode": "dg", "engine": "color_jitter", "target_batch": 0},
}


def preset(name: str, base: typing.Optional[RunConfig] = None, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise errors.ConfigInvalid(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    values = dataclasses.asdict(base or RunConfig())
    values.update(PRESETS[name])
    values.update(overrides)
    return RunConfig(**values)


#############
# Text form #
#############


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg: RunConfig) -> str:
    return "".join(
        f"{field.name} = {_render_value(getattr(cfg, field.name))}\n"
        for field in dataclasses.fields(cfg)
    )


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if typing.get_origin(kind) is tuple:
            (item, *_) = typing.get_args(kind)
            return tuple(item(part.strip()) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        raise errors.ConfigInvalid(f"{name}: cannot read {raw!r}") from None


def parse(text: str, **overrides) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
    hints = typing.get_type_hints(RunConfig)
    values: typing.Dict[str, typing.Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise errors.ConfigInvalid(f"line {number}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in hints:
            raise errors.ConfigInvalid(f"line {number}: unknown key {key!r}")
        values[key] = _coerce(key, hints[key], raw)
    values.update(overrides)
    return RunConfig(**values)


def with_env(cfg: RunConfig) -> RunConfig:
    seed = pullseg.utils.env_int("T2S_SEED")
    if seed is None or seed == cfg.seed:
        return cfg
    pullseg.utils.log(f"Seed {cfg.seed} overridden by T2S_SEED={seed}", level="skip")
    return dataclasses.replace(cfg, seed=seed)


def load(path, **overrides) -> RunConfig:
    path = pathlib.Path(path)
    if path.is_dir():
        path = path / CONFIG_FILE
    try:
        text = path.read_text()
    except OSError as exc:
        raise errors.IoError(f"cannot read config {path}: {exc}") from exc
    return parse(text, **overrides)


def save(cfg: RunConfig, directory) -> pathlib.Path:
    path = pathlib.Path(directory) / CONFIG_FILE
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render(cfg))
    except OSError as exc:
        raise errors.IoError(f"cannot write {path}: {exc}") from exc
    return path


def config_hash(cfg: RunConfig) -> bytes:
    """SHA-256 of the canonical rendering, run-length knobs left out."""
    canonical = "".join(
        line for line in render(cfg).splitlines(keepends=True)
        if line.split(" = ", 1)[0] not in UNHASHED
    )
    return hashlib.sha256(canonical.encode()).digest()
