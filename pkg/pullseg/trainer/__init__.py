"""The mean-teacher training loop with the pulling objective."""
import csv
import dataclasses
import pathlib
import typing
import warnings

import multiprocess
import numpy as np
import psutil
import rich
import rich.progress
import rich.table

import pullseg.analysis
import pullseg.analysis.report
import pullseg.data
import pullseg.data.netpbm
import pullseg.losses
import pullseg.model
import pullseg.model.checkpoint
import pullseg.numerics
import pullseg.pairing
import pullseg.translate
import pullseg.utils
from pullseg.numerics import autograd
from pullseg.trainer import config
from pullseg.utils import errors

LOSS_FILE = "losses.csv"
SPLITS = ("source", "target", "held_out")


@dataclasses.dataclass
class TrainState:
    student: pullseg.model.ModelParams
    teacher: pullseg.model.TeacherState
    opt: pullseg.model.OptimState
    step: int = 0
    target_images_consumed: int = 0


@dataclasses.dataclass
class LossRow:
    step: int
    l_source: float
    l_target: float
    l_pull: typing.Optional[float]
    weighted_pull: float
    quality: typing.Optional[float]
    gamma: typing.Optional[float]
    weights: typing.Dict[int, float]

    @staticmethod
    def header(classes: int) -> typing.List[str]:
        return [
            "step",
            "L_source",
            "L_target",
            "L_pull",
            "lambda_L_pull",
            "q_mean",
            "gamma",
        ] + [f"w_{c}" for c in range(classes)]

    def fields(self, classes: int) -> typing.List[str]:
        def text(value):
            return "" if value is None else repr(float(value))

        return [
            str(self.step),
            text(self.l_source),
            text(self.l_target),
            text(self.l_pull),
            text(self.weighted_pull),
            text(self.quality),
            text(self.gamma),
        ] + [text(self.weights.get(c)) for c in range(classes)]


def init_state(cfg: config.RunConfig) -> TrainState:
    student = pullseg.model.init_params(
        cfg.architecture(), pullseg.numerics.Rng(cfg.seed).split("init")
    )
    return TrainState(
        student=student,
        teacher=pullseg.model.TeacherState.from_student(student, cfg.eta),
        opt=_optimizer(cfg, student),
    )


def _optimizer(cfg: config.RunConfig, params: pullseg.model.ModelParams):
    return pullseg.model.OptimState.create(
        params,
        lr_encoder=cfg.lr_encoder,
        lr_head=cfg.lr_head,
        weight_decay=cfg.weight_decay,
        t_warm=cfg.t_warm,
    )


def _flat_rows(maps: typing.Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([m.reshape(-1, m.shape[-1]) for m in maps])


def _small(maps: typing.Sequence[np.ndarray]) -> np.ndarray:
    stride = pullseg.model.FEATURE_STRIDE
    return np.concatenate([pullseg.data.downsample_labels(m, stride).ravel() for m in maps])


def reference_indices(rng: pullseg.numerics.Rng, sources: int, targets: int) -> typing.List[int]:
    """An independent uniform pick from the target batch for every source image."""
    if targets == 0:
        return [0] * sources
    return [
        int(rng.split("reference").split(k).generator().integers(targets))
        for k in range(sources)
    ]


##############
# Train step #
##############


def train_step(
    state: TrainState,
    batch: pullseg.data.MiniBatch,
    cfg: config.RunConfig,
    dump_pairs: typing.Optional[pathlib.Path] = None,
) -> typing.Tuple[TrainState, LossRow]:
    if cfg.is_dg and batch.target:
        raise errors.ConfigInvalid("dg mode must not see target images")
    if not cfg.is_dg and not batch.target:
        raise errors.ConfigInvalid("uda mode needs target images in every batch")

    rng = pullseg.numerics.Rng(cfg.seed).split("step").split(state.step)
    engine = cfg.engine_spec()
    loss_cfg = cfg.loss_config()
    teacher = state.teacher.params

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UserWarning)

        # pseudo-target images keep their source labels
        pseudo_target = []
        references = reference_indices(rng, len(batch.source), len(batch.target))
        for k, sample in enumerate(batch.source):
            reference = batch.target[references[k]].image if batch.target else None
            pseudo_target.append(
                pullseg.translate.translate(
                    engine, sample.image, reference, rng.split("translate").split(k)
                )
            )

        pls: typing.List[pullseg.model.PseudoLabel] = []
        teacher_target = []
        for sample in batch.target:
            out = pullseg.model.forward(teacher, sample.image)
            teacher_target.append(out)
            pls.append(pullseg.model.PseudoLabel.from_probs(out.probs.data, cfg.delta_p))

        mixed = []
        for k, (sample, pl) in enumerate(zip(batch.target, pls)):
            donor = batch.source[k % len(batch.source)]
            image, labels, _ = pullseg.translate.classmix(
                donor, sample.image, pl.labels, rng.split("mix").split(k)
            )
            if cfg.strong_aug:
                image = pullseg.translate.strong_augment(
                    image, cfg.jitter_strength, cfg.blur_sigma, rng.split("aug").split(k)
                )
            mixed.append((image, pl.with_labels(labels)))

        recorded = state.student.record()
        ce_images = pseudo_target if cfg.pseudo_target_ce else [s.image for s in batch.source]
        src_terms = [
            pullseg.losses.source_ce(pullseg.model.forward(recorded, image).probs, s.label)
            for image, s in zip(ce_images, batch.source)
        ]
        l_source = autograd.stack(src_terms).mean()

        l_target: pullseg.losses.Scalar = 0.0
        if mixed:
            trg_terms = [
                pullseg.losses.target_ce(pullseg.model.forward(recorded, image).probs, pl)
                for image, pl in mixed
            ]
            l_target = autograd.stack(trg_terms).mean()

        l_pull: typing.Optional[autograd.Tensor] = None
        pairs = None
        if loss_cfg.lambda_pull > 0:
            pairs = _build_pairs(
                recorded, teacher, batch, pseudo_target, teacher_target, pls, cfg, rng
            )
            if pairs is not None:
                l_pull = pullseg.losses.pull_loss(pairs, loss_cfg)
            else:
                pullseg.utils.log(f"Step {state.step}: no active classes, pull skipped", "skip")

        total = pullseg.losses.total_loss(
            l_source, l_target, l_pull if l_pull is not None else 0.0, loss_cfg.lambda_pull
        )
        grads = pullseg.model.backward(total, recorded)
        opt, student = pullseg.model.optimizer_step(state.opt, state.student, grads)
        teacher_state = pullseg.model.ema_update(state.teacher, student)

    for warning in caught:
        pullseg.utils.log(f"Step {state.step}: {warning.message}", level="warn")

    if dump_pairs is not None and pairs is not None:
        pullseg.pairing.dump_pairs(pairs, dump_pairs)

    row = LossRow(
        step=state.step + 1,
        l_source=autograd.lift(l_source).item(),
        l_target=autograd.lift(l_target).item(),
        l_pull=None if l_pull is None else l_pull.item(),
        weighted_pull=0.0 if l_pull is None else loss_cfg.lambda_pull * l_pull.item(),
        quality=float(np.mean([pl.quality for pl in pls])) if pls else None,
        gamma=None if pairs is None else pairs.gamma,
        weights={} if pairs is None else dict(pairs.drw_weights),
    )
    new_state = TrainState(
        student=student,
        teacher=teacher_state,
        opt=opt,
        step=state.step + 1,
        target_images_consumed=state.target_images_consumed + len(batch.target),
    )
    return new_state, row


def _build_pairs(recorded, teacher, batch, pseudo_target, teacher_target, pls, cfg, rng):
    arch = cfg.architecture()
    loss_cfg = cfg.loss_config()
    pairing_cfg = cfg.pairing_config()
    domains = pullseg.pairing.PairDomain
    query_images = (
        pseudo_target
        if pairing_cfg.query_domain is domains.pseudo_target
        else [s.image for s in batch.source]
    )
    student_rows = autograd.concat(
        [
            pullseg.model.forward(recorded, image).embeddings.reshape(-1, arch.embed_dim)
            for image in query_images
        ]
    )
    labels = _small([s.label for s in batch.source])
    teacher_source = _flat_rows(
        [pullseg.model.forward(teacher, s.image).embeddings.data for s in batch.source]
    )
    if cfg.is_dg:
        target_rows = target_labels = target_conf = None
    else:
        target_rows = _flat_rows([out.embeddings.data for out in teacher_target])
        target_labels = _small([pl.labels for pl in pls])
        target_conf = _small([pl.confidence for pl in pls])

    positive_rows = positive_labels = None
    if pairing_cfg.positive_domain is domains.pseudo_target:
        positive_rows = _flat_rows(
            [pullseg.model.forward(teacher, image).embeddings.data for image in pseudo_target]
        )
        positive_labels = labels
    elif pairing_cfg.positive_domain is domains.target:
        positive_rows, positive_labels = target_rows, target_labels

    pairs = pullseg.pairing.build_pair_batch(
        student_rows,
        labels,
        teacher_source,
        target_rows,
        target_labels,
        target_conf,
        pairing_cfg,
        rng.split("pairs"),
        positive_embeddings=positive_rows,
        positive_labels=positive_labels,
    )
    if not pairs.active:
        return None
    confidence = None if cfg.is_dg else pullseg.losses.class_confidence(pls, cfg.classes)
    pairs.drw_weights = pullseg.losses.drw_weights(
        confidence, loss_cfg.beta_drw, pairs.active, loss_cfg
    )
    pullseg.pairing.check_pair_batch(
        pairs,
        unit_keys=cfg.pairing_config().prototype_mode
        is pullseg.pairing.PrototypeMode.normalize_mean,
    )
    return pairs


##########
# Corpus #
##########


def load_corpus(data_dir) -> pullseg.data.SyntheticCorpus:
    data_dir = pathlib.Path(data_dir)
    source, target, held_out = (
        pullseg.data.netpbm.load_dataset(data_dir / split) for split in SPLITS
    )
    return pullseg.data.SyntheticCorpus(
        source, target.unlabeled(), pullseg.data.HeldOutDataset(held_out)
    )


def save_corpus(corpus: pullseg.data.SyntheticCorpus, data_dir):
    data_dir = pathlib.Path(data_dir)
    pullseg.data.netpbm.save_dataset(corpus.source, data_dir / "source")
    pullseg.data.netpbm.save_dataset(corpus.target, data_dir / "target")
    pullseg.data.netpbm.save_dataset(corpus.held_out.reveal(), data_dir / "held_out")


def make_corpus(cfg: config.RunConfig, data_dir=None) -> pullseg.data.SyntheticCorpus:
    if data_dir is not None:
        return load_corpus(data_dir)
    return pullseg.data.gen_synthetic_pair(
        cfg.data_config(), pullseg.numerics.Rng(cfg.seed).split("data")
    )


#######
# Run #
#######


@dataclasses.dataclass
class RunResult:
    state: TrainState
    checkpoint: pathlib.Path
    metrics: typing.List[pullseg.analysis.report.MetricRow]
    confusion: pullseg.analysis.ConfusionMatrix

    @property
    def final_miou(self) -> float:
        values = [r.value for r in self.metrics if r.metric == "miou"]
        return values[-1] if values else float("nan")


def checkpoint_path(out_dir, step: int) -> pathlib.Path:
    return pathlib.Path(out_dir) / f"ckpt_{step:06d}.ckpt"


def save_state(state: TrainState, cfg: config.RunConfig, out_dir) -> pathlib.Path:
    path = checkpoint_path(out_dir, state.step)
    pullseg.model.checkpoint.save_checkpoint(
        path,
        config.config_hash(cfg),
        pullseg.model.checkpoint.Checkpoint(
            state.step, state.student, state.teacher.params, state.opt.first, state.opt.second
        ),
    )
    return path


def resume_state(cfg: config.RunConfig, path) -> TrainState:
    ckpt = pullseg.model.checkpoint.load_checkpoint(
        path, cfg.architecture(), config.config_hash(cfg)
    )
    opt = dataclasses.replace(
        _optimizer(cfg, ckpt.student), first=ckpt.first, second=ckpt.second, step=ckpt.step
    )
    return TrainState(
        student=ckpt.student,
        teacher=pullseg.model.TeacherState(ckpt.teacher, cfg.eta),
        opt=opt,
        step=ckpt.step,
    )


def evaluate(
    params: pullseg.model.ModelParams, held_out: pullseg.data.HeldOutDataset
) -> pullseg.analysis.ConfusionMatrix:
    return pullseg.analysis.evaluate(params, held_out)


def _open_loss_log(path: pathlib.Path, classes: int, keep_through: int):
    """Start a fresh log, or keep the rows up to ``keep_through`` when resuming."""
    kept: typing.List[typing.List[str]] = []
    if keep_through > 0 and path.is_file():
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        kept = [r for r in rows[1:] if r and int(r[0]) <= keep_through]
    handle = open(path, "w", newline="")
    writer = csv.writer(handle)
    writer.writerow(LossRow.header(classes))
    writer.writerows(kept)
    return handle, writer


def run(
    cfg: config.RunConfig,
    out_dir,
    corpus: typing.Optional[pullseg.data.SyntheticCorpus] = None,
    data_dir=None,
    resume=None,
    run_name: str = "run",
    progress: bool = True,
) -> RunResult:
    out_dir = pathlib.Path(out_dir)
    corpus = corpus or make_corpus(cfg, data_dir)
    config.save(cfg, out_dir)

    state = resume_state(cfg, resume) if resume else init_state(cfg)
    if resume:
        pullseg.utils.log(f"Resuming {run_name} from step {state.step}")
    metrics: typing.List[pullseg.analysis.report.MetricRow] = []
    if resume and (out_dir / pullseg.analysis.report.METRICS_FILE).is_file():
        metrics = [
            r for r in pullseg.analysis.report.read_metrics(out_dir) if r.step <= state.step
        ]

    def evaluate_now():
        cm = evaluate(state.student, corpus.held_out)
        metrics.extend(pullseg.analysis.metric_rows(run_name, state.step, cm))
        pullseg.analysis.report.emit_report(metrics, out_dir)
        _, mean = pullseg.analysis.miou(cm)
        pullseg.utils.log(f"{run_name} step {state.step}: held-out mIoU {mean:.4f}")
        return cm

    target = None if cfg.is_dg else corpus.target
    steps: typing.Iterable[int] = range(state.step, cfg.iters)
    if progress:
        steps = rich.progress.track(steps, description=f"Training {run_name}...")
    try:
        handle, writer = _open_loss_log(out_dir / LOSS_FILE, cfg.classes, state.step)
    except OSError as exc:
        raise errors.IoError(f"cannot write {out_dir / LOSS_FILE}: {exc}") from exc

    with handle:
        for step in steps:
            batch = pullseg.data.sample_batch(
                corpus.source,
                target,
                cfg.source_batch,
                0 if cfg.is_dg else cfg.target_batch,
                pullseg.numerics.Rng(cfg.seed).split("batch").split(step),
            )
            state, row = train_step(state, batch, cfg)
            writer.writerow(row.fields(cfg.classes))
            handle.flush()
            if state.step % cfg.ckpt_every == 0 and state.step < cfg.iters:
                save_state(state, cfg, out_dir)
            if state.step % cfg.eval_every == 0 and state.step < cfg.iters:
                evaluate_now()

    final = save_state(state, cfg, out_dir)
    cm = evaluate_now()
    return RunResult(state, final, metrics, cm)


#########
# Sweep #
#########


def sweep_workers(jobs: int) -> int:
    workers = pullseg.utils.env_int("T2S_WORKERS") or psutil.cpu_count(logical=False) or 1
    return max(1, min(workers, jobs))


def _sweep_one(job) -> typing.Tuple[int, float]:
    text, seed, out_dir, data_dir = job
    cfg = config.parse(text, seed=seed)
    result = run(
        cfg, out_dir, data_dir=data_dir, run_name=f"seed{seed}", progress=False
    )
    return seed, result.final_miou


def sweep(
    cfg: config.RunConfig,
    seeds: typing.Sequence[int],
    out_dir,
    data_dir=None,
    workers: typing.Optional[int] = None,
) -> typing.Dict[int, float]:
    """Train one run per seed in worker processes; return held-out mIoU per seed."""
    if not seeds:
        raise errors.ConfigInvalid("a sweep needs at least one seed")
    out_dir = pathlib.Path(out_dir)
    text = config.render(cfg)
    jobs = [(text, seed, out_dir / f"seed_{seed}", data_dir) for seed in seeds]
    workers = workers or sweep_workers(len(jobs))
    pullseg.utils.log(f"Sweeping {len(jobs)} seeds on {workers} workers...")
    if workers == 1:
        results = [_sweep_one(job) for job in jobs]
    else:
        with multiprocess.Pool(processes=workers) as pool:
            results = pool.map(_sweep_one, jobs)
    return dict(sorted(results))


def print_sweep_table(title: str, results: typing.Dict[int, float]):
    table = rich.table.Table(
        rich.table.Column(header="Seed", style="green"),
        rich.table.Column("Held-out mIoU"),
        title=title,
    )
    for seed, value in results.items():
        table.add_row(str(seed), f"{100 * value:.2f}")
    table.add_row("[blue]median", f"[blue]{100 * float(np.median(list(results.values()))):.2f}")
    rich.print(table)
