"""Finite-difference checks of every objective through the whole network."""
import numpy as np
import pytest

import pullseg.losses
import pullseg.model
import pullseg.numerics
import pullseg.pairing
import pullseg.translate
from pullseg.numerics import autograd

EPS = 1e-4
TOLERANCE = 1e-4
ENTRIES_PER_TENSOR = 24


def _quadrant_labels(size=16):
    label = np.zeros((size, size), dtype=np.int64)
    label[: size // 2, size // 2 :] = 1
    label[size // 2 :, size // 2 :] = 2
    return label


@pytest.fixture
def batch(micro_params, random_image):
    sources = [random_image(seed=s) for s in (1, 2)]
    targets = [random_image(seed=s) for s in (3, 4)]
    labels = [_quadrant_labels(), _quadrant_labels().T.copy()]
    pseudo = [
        pullseg.translate.fda_translate(src, trg, 0.1) for src, trg in zip(sources, targets)
    ]
    pls = []
    for image in targets:
        probs = pullseg.model.forward(micro_params, image).probs.data
        pl = pullseg.model.PseudoLabel.from_probs(probs, 0.5)
        pls.append(pullseg.model.PseudoLabel(pl.labels, pl.confidence, 0.7))
    return dict(sources=sources, labels=labels, targets=targets, pls=pls, pseudo=pseudo)


@pytest.fixture
def template(micro_params, micro_cfg, batch):
    """One step's pairs, built once so every perturbation reuses the same draws."""
    stride = pullseg.model.FEATURE_STRIDE
    small = np.concatenate([lbl[::stride, ::stride].ravel() for lbl in batch["labels"]])
    embed = autograd.concat(
        [
            pullseg.model.forward(micro_params, img).embeddings.reshape(-1, 4)
            for img in batch["pseudo"]
        ]
    )
    teacher_src = np.concatenate(
        [
            pullseg.model.forward(micro_params, img).embeddings.data.reshape(-1, 4)
            for img in batch["sources"]
        ]
    )
    teacher_trg = np.concatenate(
        [
            pullseg.model.forward(micro_params, img).embeddings.data.reshape(-1, 4)
            for img in batch["targets"]
        ]
    )
    trg_labels = np.concatenate([pl.labels[::stride, ::stride].ravel() for pl in batch["pls"]])
    trg_conf = np.concatenate([pl.confidence[::stride, ::stride].ravel() for pl in batch["pls"]])
    pairs = pullseg.pairing.build_pair_batch(
        embed,
        small,
        teacher_src,
        teacher_trg,
        trg_labels,
        trg_conf,
        micro_cfg.pairing_config(),
        pullseg.numerics.Rng(11),
    )
    assert pairs.active
    pairs.drw_weights = pullseg.losses.drw_weights(
        pullseg.losses.class_confidence(batch["pls"], 3), 0.5, pairs.active
    )
    return pairs


def _objective(params, kind, batch, template):
    passes = []

    def fwd(image):
        out = pullseg.model.forward(params, image)
        passes.append(out)
        return out

    def source_term():
        return autograd.stack(
            [
                pullseg.losses.source_ce(fwd(img).probs, lbl)
                for img, lbl in zip(batch["sources"], batch["labels"])
            ]
        ).mean()

    def target_term():
        return autograd.stack(
            [
                pullseg.losses.target_ce(fwd(img).probs, pl)
                for img, pl in zip(batch["targets"], batch["pls"])
            ]
        ).mean()

    def pull_term(pull_kind):
        embed = autograd.concat(
            [fwd(img).embeddings.reshape(-1, 4) for img in batch["pseudo"]]
        ).normalize_rows()
        positions = template.queries.positions
        queries = pullseg.pairing.QuerySet(
            {c: embed.take(pos) for c, pos in positions.items()}, positions
        )
        pairs = pullseg.pairing.PairBatch(
            queries, template.positives, template.negatives, template.drw_weights
        )
        return pullseg.losses.pull_loss(pairs, pullseg.losses.LossConfig(pull_kind=pull_kind))

    if kind == "source":
        loss = source_term()
    elif kind == "target":
        loss = target_term()
    elif kind == "infonce":
        loss = pull_term(pullseg.losses.PullKind.infonce)
    elif kind == "mse":
        loss = pull_term(pullseg.losses.PullKind.mse)
    else:
        loss = pullseg.losses.total_loss(
            source_term(), target_term(), pull_term(pullseg.losses.PullKind.infonce), 0.1
        )
    signature = np.concatenate(
        [(a.data > 0).ravel() for out in passes for a in out.activations]
    )
    return loss, signature


@pytest.mark.parametrize("kind", ["source", "target", "infonce", "mse", "total"])
def test_analytic_gradients_match_finite_differences(kind, micro_params, batch, template):
    recorded = micro_params.record()
    loss, base_signature = _objective(recorded, kind, batch, template)
    grads = pullseg.model.backward(loss, recorded)

    gen = np.random.default_rng(0)
    checked = skipped = 0
    worst = 0.0
    for name in micro_params.names():
        value = micro_params.tensors[name]
        flat_count = value.size
        picks = gen.choice(flat_count, size=min(ENTRIES_PER_TENSOR, flat_count), replace=False)
        for flat_index in picks:
            index = np.unravel_index(flat_index, value.shape)
            plus, minus = micro_params.copy(), micro_params.copy()
            plus.tensors[name][index] += EPS
            minus.tensors[name][index] -= EPS
            up, up_signature = _objective(plus, kind, batch, template)
            down, down_signature = _objective(minus, kind, batch, template)
            if not (
                np.array_equal(up_signature, base_signature)
                and np.array_equal(down_signature, base_signature)
            ):
                skipped += 1
                continue
            numeric = (up.item() - down.item()) / (2 * EPS)
            analytic = grads[name][index]
            rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, rel)
            checked += 1

    assert checked > 0
    assert skipped <= 0.25 * (checked + skipped)
    assert worst < TOLERANCE


def test_unused_projector_gets_zero_gradient(micro_params, batch, template):
    recorded = micro_params.record()
    loss, _ = _objective(recorded, "source", batch, template)
    grads = pullseg.model.backward(loss, recorded)
    assert not np.any(grads["projector.conv1.weight"])
    assert not np.any(grads["projector.conv2.bias"])
    assert np.any(grads["encoder.conv1.weight"])
