"""Directional reproductions on the default synthetic benchmark.

Each preset trains three seeds for 2000 steps; run with T2S_SLOW=1.
"""
import pathlib

import numpy as np
import pytest

import pullseg.analysis
import pullseg.data
import pullseg.model.checkpoint
import pullseg.trainer
from pullseg.trainer import config

SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("reproduction")
    results = {}
    for name in ("source_only", "self_training", "full", "dg"):
        cfg = config.preset(name)
        results[name] = (cfg, root / name, pullseg.trainer.sweep(cfg, SEEDS, root / name))
    dg_baseline = config.preset("source_only", mode="dg", engine="identity", target_batch=0)
    results["dg_source_only"] = (
        dg_baseline,
        root / "dg_source_only",
        pullseg.trainer.sweep(dg_baseline, SEEDS, root / "dg_source_only"),
    )
    return results


def _median(results):
    return float(np.median(list(results.values())))


def _median_seed(results):
    ordered = sorted(results, key=results.get)
    return ordered[len(ordered) // 2]


def _bank(cfg, run_dir: pathlib.Path, seed: int):
    seed_cfg = config.parse(config.render(cfg), seed=seed)
    ckpt = pullseg.model.checkpoint.load_checkpoint(
        pullseg.trainer.checkpoint_path(run_dir / f"seed_{seed}", seed_cfg.iters),
        seed_cfg.architecture(),
        config.config_hash(seed_cfg),
    )
    corpus = pullseg.trainer.make_corpus(seed_cfg)
    held = corpus.held_out
    return pullseg.analysis.build_feature_bank(
        ckpt.student,
        {
            pullseg.data.Domain.SOURCE: (
                [s.image for s in corpus.source.samples],
                [s.label for s in corpus.source.samples],
            ),
            pullseg.data.Domain.TARGET: (held.images, held.labels()),
        },
    )


def test_full_method_beats_both_baselines(runs):
    source_only = _median(runs["source_only"][2])
    baseline = _median(runs["self_training"][2])
    full = _median(runs["full"][2])
    assert source_only < baseline < full
    assert full >= source_only + 0.05
    assert full >= baseline + 0.01


def test_loss_logs_stay_finite(runs):
    _, full_dir, _ = runs["full"]
    for seed in SEEDS:
        lines = (full_dir / f"seed_{seed}" / pullseg.trainer.LOSS_FILE).read_text().splitlines()
        values = [float(v) for line in lines[1:] for v in line.split(",")[1:] if v]
        assert values and np.all(np.isfinite(values))


def test_pulling_makes_target_features_more_discriminative(runs):
    full_cfg, full_dir, full = runs["full"]
    src_cfg, src_dir, source_only = runs["source_only"]
    full_bank = _bank(full_cfg, full_dir, _median_seed(full))
    src_bank = _bank(src_cfg, src_dir, _median_seed(source_only))
    classes = full_cfg.classes
    better_ccd = sum(
        pullseg.analysis.ccd(full_bank, c) < pullseg.analysis.ccd(src_bank, c) for c in range(classes)
    )
    better_pdd = sum(
        pullseg.analysis.pdd(full_bank, c) < pullseg.analysis.pdd(src_bank, c) for c in range(classes)
    )
    assert better_ccd >= 3 and better_pdd >= 3


def test_pulling_raises_cross_domain_similarity(runs):
    full_cfg, full_dir, full = runs["full"]
    src_cfg, src_dir, source_only = runs["source_only"]
    after = pullseg.analysis.cross_domain_similarity(_bank(full_cfg, full_dir, _median_seed(full)))
    before = pullseg.analysis.cross_domain_similarity(
        _bank(src_cfg, src_dir, _median_seed(source_only))
    )
    improved = sum(
        after[c] is not None and before[c] is not None and after[c] > before[c] for c in after
    )
    assert improved >= 3


def test_domain_generalization_beats_source_only(runs):
    assert _median(runs["dg"][2]) >= _median(runs["dg_source_only"][2]) + 0.02
