import argparse
import pathlib
import sys

import numpy as np
import rich
import rich.table

import pullseg.analysis
import pullseg.analysis.report
import pullseg.data
import pullseg.data.netpbm
import pullseg.model.checkpoint
import pullseg.numerics
import pullseg.trainer
import pullseg.translate
import pullseg.utils
from pullseg.trainer import config
from pullseg.utils import errors


def _config_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="a key = value run configuration file.")
    parser.add_argument(
        "--preset", choices=sorted(config.PRESETS), help="apply a named ablation preset."
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a single configuration key (repeatable).",
    )
    parser.add_argument("--data", help="a dataset directory written by `t2s generate`.")


def _run_config(args) -> config.RunConfig:
    cfg = config.load(args.config) if args.config else config.RunConfig()
    if args.preset:
        cfg = config.preset(args.preset, cfg)
    if args.overrides:
        cfg = config.parse(config.render(cfg) + "\n".join(args.overrides) + "\n")
    return config.with_env(cfg)


def _checkpoint_config(ckpt: pathlib.Path) -> config.RunConfig:
    # the stored config must hash to the checkpoint header, so no env overrides
    return config.load(ckpt.parent)


def _load_params(ckpt: pathlib.Path, cfg: config.RunConfig):
    return pullseg.model.checkpoint.load_checkpoint(
        ckpt, cfg.architecture(), config.config_hash(cfg)
    ).student


def print_iou_table(title: str, cm: pullseg.analysis.ConfusionMatrix):
    iou, mean = pullseg.analysis.miou(cm)
    table = rich.table.Table(
        rich.table.Column(header="Class", style="green"),
        rich.table.Column("IoU"),
        title=title,
    )
    for cls, value in enumerate(iou):
        table.add_row(str(cls), "[blue]absent" if np.isnan(value) else f"{100 * value:.2f}")
    table.add_row("[green]mean", f"[green]{100 * mean:.2f}")
    rich.print(table)


###############
# Subcommands #
###############


def generate(args):
    cfg = _run_config(args)
    corpus = pullseg.trainer.make_corpus(cfg)
    pullseg.trainer.save_corpus(corpus, args.out)
    pullseg.utils.log(
        f"Wrote {len(corpus.source)} source, {len(corpus.target)} target and "
        f"{len(corpus.held_out)} held-out images to {args.out}"
    )


def train(args):
    cfg = _run_config(args)
    result = pullseg.trainer.run(cfg, args.out, data_dir=args.data, resume=args.resume)
    pullseg.utils.log(f"Final checkpoint: {result.checkpoint}")
    print_iou_table(f"Held-out target after {result.state.step} steps", result.confusion)


def evaluate(args):
    ckpt = pathlib.Path(args.ckpt)
    cfg = _checkpoint_config(ckpt)
    params = _load_params(ckpt, cfg)
    corpus = pullseg.trainer.make_corpus(cfg, args.data)
    cm = pullseg.trainer.evaluate(params, corpus.held_out)
    print_iou_table(f"Held-out target, {ckpt.name}", cm)


def translate(args):
    source = pullseg.data.netpbm.load_dataset(args.src)
    reference = pullseg.data.netpbm.load_dataset(args.ref) if args.ref else None
    engine = pullseg.translate.EngineSpec(
        kind=pullseg.translate.EngineKind(args.engine),
        beta_fda=args.beta,
        jitter_strength=args.jitter,
        blur_sigma=args.sigma,
    )
    if engine.needs_reference and reference is None:
        raise errors.ConfigInvalid("the fda engine needs --ref")
    out = pullseg.translate.translate_dataset(
        source, reference, engine, pullseg.numerics.Rng(args.seed)
    )
    pullseg.data.netpbm.save_dataset(out, args.out)
    pullseg.utils.log(f"Translated {len(out)} images into {args.out}")


def analyze(args):
    ckpt = pathlib.Path(args.ckpt)
    cfg = _checkpoint_config(ckpt)
    params = _load_params(ckpt, cfg)
    corpus = pullseg.trainer.make_corpus(cfg, args.data)
    cm = pullseg.trainer.evaluate(params, corpus.held_out)
    bank = pullseg.analysis.build_feature_bank(
        params,
        {
            pullseg.data.Domain.SOURCE: (
                [s.image for s in corpus.source.samples],
                [s.label for s in corpus.source.samples],
            ),
            pullseg.data.Domain.TARGET: (corpus.held_out.images, corpus.held_out.labels()),
        },
        features=args.features,
    )
    source_cm = pullseg.analysis.evaluate_source(params, corpus.source)
    step = pullseg.model.checkpoint.read_header(ckpt)[1]
    rows = pullseg.analysis.metric_rows(ckpt.stem, step, cm, bank, source_cm=source_cm)
    written = pullseg.analysis.report.emit_report(rows, args.out)
    if args.predictions:
        written += pullseg.analysis.report.predictions_dump(
            params, corpus.held_out.images, pathlib.Path(args.out) / "predictions"
        )
    print_iou_table(f"Held-out target, {ckpt.name}", cm)
    print_iou_table(f"Source, {ckpt.name}", source_cm)
    pullseg.utils.log(f"Wrote {len(written)} report files to {args.out}")


def sweep(args):
    cfg = _run_config(args)
    results = pullseg.trainer.sweep(cfg, args.seeds, args.out, data_dir=args.data)
    title = f"Sweep: {args.preset or 'custom'} over {len(results)} seeds"
    pullseg.trainer.print_sweep_table(title, results)


def dump_pairs(args):
    cfg = _run_config(args)
    if cfg.lambda_pull <= 0:
        raise errors.ConfigInvalid("pairs are only built when lambda_pull > 0")
    corpus = pullseg.trainer.make_corpus(cfg, args.data)
    state = pullseg.trainer.init_state(cfg)
    batch = pullseg.data.sample_batch(
        corpus.source,
        None if cfg.is_dg else corpus.target,
        cfg.source_batch,
        0 if cfg.is_dg else cfg.target_batch,
        pullseg.numerics.Rng(cfg.seed).split("batch").split(0),
    )
    pullseg.trainer.train_step(state, batch, cfg, dump_pairs=pathlib.Path(args.out))
    pullseg.utils.log(f"Wrote one step's pairs to {args.out}")


##########
# Parser #
##########


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("t2s")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="write a synthetic two-domain corpus.")
    _config_args(gen)
    gen.add_argument("--out", required=True, help="the dataset directory to create.")
    gen.set_defaults(func=generate)

    trn = commands.add_parser("train", help="train a student/teacher pair.")
    _config_args(trn)
    trn.add_argument("--out", required=True, help="the run directory.")
    trn.add_argument("--resume", help="a checkpoint to continue from.")
    trn.set_defaults(func=train)

    evl = commands.add_parser("eval", help="held-out mIoU of a checkpoint.")
    evl.add_argument("--ckpt", required=True, help="a checkpoint inside a run directory.")
    evl.add_argument("--data", help="a dataset directory; regenerated from the config if absent.")
    evl.set_defaults(func=evaluate)

    trl = commands.add_parser("translate", help="translate a dataset to pseudo-target style.")
    trl.add_argument("--src", required=True, help="the source dataset directory.")
    trl.add_argument("--ref", help="a target dataset supplying reference spectra.")
    trl.add_argument("--out", required=True, help="the output dataset directory.")
    trl.add_argument(
        "--engine", default="fda", choices=[kind.value for kind in pullseg.translate.EngineKind]
    )
    trl.add_argument("--beta", type=float, default=0.09, help="low-frequency band ratio.")
    trl.add_argument("--jitter", type=float, default=0.5, help="colour jitter strength.")
    trl.add_argument("--sigma", type=float, default=1.0, help="gaussian blur sigma.")
    trl.add_argument("--seed", type=int, default=0)
    trl.set_defaults(func=translate)

    ana = commands.add_parser("analyze", help="feature diagnostics and a metrics report.")
    ana.add_argument("--ckpt", required=True)
    ana.add_argument("--data")
    ana.add_argument("--out", required=True, help="the report directory.")
    ana.add_argument("--features", default="projector", choices=["projector", "encoder"])
    ana.add_argument(
        "--predictions", action="store_true", help="also dump colourised predictions."
    )
    ana.set_defaults(func=analyze)

    swp = commands.add_parser("sweep", help="train several seeds in parallel.")
    _config_args(swp)
    swp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    swp.add_argument("--out", required=True, help="the parent of the per-seed run directories.")
    swp.set_defaults(func=sweep)

    dmp = commands.add_parser("dump-pairs", help="write one step's contrastive pairs as CSV.")
    _config_args(dmp)
    dmp.add_argument("--out", required=True, help="the CSV file to write.")
    dmp.set_defaults(func=dump_pairs)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except errors.PullSegError as exc:
        pullseg.utils.log(f"{type(exc).__name__}: {exc}", level="error")
        sys.exit(errors.exit_code(exc))


if __name__ == "__main__":
    main()
