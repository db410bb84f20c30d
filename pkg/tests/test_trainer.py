import numpy as np
import pytest
import torch

from crossmod.adaptation import AdaptationConfig, DomainCritic, build_dam
from crossmod.checkpoint import load_checkpoint
from crossmod.losses import wasserstein_1d
from crossmod.phantomgen import PhantomSpec, Volume, gen_case, standardize
from crossmod.segmenter import SegmenterConfig, build_segmenter
from crossmod.trainer import (
    AdversarialTrainConfig,
    SourceTrainConfig,
    TrainingDiverged,
    adapt_adversarial,
    adapted_predictor,
    evaluate,
    fit_critic,
    predict_volume,
    segmenter_predictor,
    step_decay,
    train_source,
)

TINY = SegmenterConfig(base_width=4, widths=(4, 4, 4, 4, 4, 4), up_widths=(4, 4, 4))
SPEC = PhantomSpec(shape=(6, 64, 64))


@pytest.fixture(scope="module")
def cases():
    a = [gen_case(SPEC, i, "A") for i in range(2)]
    b = [gen_case(SPEC, 100 + i, "B") for i in range(2)]
    return [standardize(v) for v, _ in a], [l for _, l in a], [standardize(v) for v, _ in b]


def test_step_decay():
    assert step_decay(1e-3, 0.95, 1500, 0) == 1e-3
    assert step_decay(1e-3, 0.95, 1500, 1499) == 1e-3
    assert step_decay(1e-3, 0.95, 1500, 1500) == pytest.approx(1e-3 * 0.95)
    assert step_decay(3e-4, 0.98, 100, 250) == pytest.approx(3e-4 * 0.98**2)


def test_config_validation():
    with pytest.raises(ValueError):
        SourceTrainConfig(lr=0)
    with pytest.raises(ValueError):
        AdversarialTrainConfig(ratio_mode="sometimes")


def test_source_training_is_deterministic(cases):
    vols, labs, _ = cases
    cfg = SourceTrainConfig(max_iters=5, seed=7)
    runs = []
    for _ in range(2):
        m = build_segmenter(TINY, seed=1)
        res = train_source(m, vols, labs, cfg)
        runs.append((res.curve, [p.detach().clone() for p in m.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_source_loss_decreases(cases, tmp_path):
    vols, labs, _ = cases
    m = build_segmenter(TINY, seed=0)
    res = train_source(m, vols, labs, SourceTrainConfig(max_iters=500), log_path=tmp_path / "c.csv")
    losses = [r["loss"] for r in res.curve]
    assert losses[-1] < losses[0]
    assert np.mean(losses[-20:]) < 0.8 * np.mean(losses[:20])
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "iteration,lr,loss,ce,dice"


def test_source_nan_aborts_with_checkpoint(cases, tmp_path):
    vols, labs, _ = cases
    bad = Volume(np.full(SPEC.shape, np.nan, dtype=np.float32))
    m = build_segmenter(TINY, seed=0)
    with pytest.raises(TrainingDiverged) as info:
        train_source(m, [bad], labs[:1], SourceTrainConfig(max_iters=3, augment=False), checkpoint_dir=tmp_path)
    assert info.value.checkpoint is not None
    ck = load_checkpoint(info.value.checkpoint)
    assert ck.meta["iteration"] == 0
    assert all(torch.isfinite(p).all() for p in m.parameters())


def _adapt(cases, n_joint=3, **kw):
    vols, _, tvols = cases
    m = build_segmenter(TINY, seed=0)
    m.eval()
    steps = []
    res = adapt_adversarial(
        m,
        vols,
        tvols,
        AdversarialTrainConfig(max_joint_updates=n_joint, **kw),
        AdaptationConfig(depth="mid"),
        on_step=lambda kind, r: steps.append((kind, max(p.abs().max().item() for p in r.dcm.parameters()))),
    )
    return m, res, steps


def test_adversarial_ratio_clip_and_frozen_source(cases):
    vols, _, tvols = cases
    m = build_segmenter(TINY, seed=0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    flags = [p.requires_grad for p in m.parameters()]
    steps = []
    res = adapt_adversarial(
        m, vols, tvols, AdversarialTrainConfig(max_joint_updates=3), AdaptationConfig(depth="mid"),
        on_step=lambda kind, r: steps.append((kind, max(p.abs().max().item() for p in r.dcm.parameters()))),
    )
    assert res.dcm_steps == 60 and res.dam_steps == 3
    assert [k for k, _ in steps] == (["dcm"] * 20 + ["dam"]) * 3
    assert all(v <= 0.03 for k, v in steps if k == "dcm")
    assert all(v <= 0.03 for v in res.max_abs_critic_param)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())
    assert [p.requires_grad for p in m.parameters()] == flags
    assert [r["dcm_steps"] for r in res.curve] == [20, 40, 60]
    assert not any(torch.equal(a, b) for a, b in zip(build_dam(m, 24).parameters(), res.dam.parameters()))


def test_reverse_ratio_mode(cases):
    _, res, steps = _adapt(cases, n_joint=2, ratio_mode="dam_per_dcm")
    assert res.dcm_steps == 2 and res.dam_steps == 40
    assert [k for k, _ in steps] == (["dcm"] + ["dam"] * 20) * 2


def test_adversarial_is_deterministic(cases):
    _, r1, _ = _adapt(cases, n_joint=2, seed=5)
    _, r2, _ = _adapt(cases, n_joint=2, seed=5)
    assert r1.curve == r2.curve


def test_adversarial_lr_schedule(cases):
    _, res, _ = _adapt(cases, n_joint=1)
    assert res.curve[0]["lr"] == 3e-4


def test_adversarial_nan_aborts(cases, tmp_path):
    vols, _, _ = cases
    bad = Volume(np.full(SPEC.shape, np.nan, dtype=np.float32))
    m = build_segmenter(TINY, seed=0)
    with pytest.raises(TrainingDiverged) as info:
        adapt_adversarial(m, vols, [bad], AdversarialTrainConfig(max_joint_updates=1), AdaptationConfig(),
                          checkpoint_dir=tmp_path)
    assert set(load_checkpoint(info.value.checkpoint).models()) == {"dam", "dcm"}
    assert all(p.requires_grad for p in m.parameters())


def test_adapted_predictor_matches_source_before_training(cases):
    vols, labs, _ = cases
    m = build_segmenter(TINY, seed=2)
    m.eval()
    cfg = AdaptationConfig(depth="shallow")
    dam = build_dam(m, cfg.resolve(m).depth)
    a = predict_volume(adapted_predictor(dam, m, cfg), vols[0])
    b = predict_volume(segmenter_predictor(m), vols[0])
    assert np.array_equal(a.data, b.data)
    report = evaluate(segmenter_predictor(m), vols, labs, 5)
    assert len(report.classes) == 4


@pytest.mark.parametrize("seed", [0])
def test_critic_estimate_tracks_separation(seed):
    est, w1 = [], []
    for delta in (0.5, 1.0, 2.0):
        g = torch.Generator().manual_seed(seed)
        s = torch.randn(512, 1, 1, 1, generator=g)
        q = torch.randn(512, 1, 1, 1, generator=g) + delta
        torch.manual_seed(seed)
        dcm = DomainCritic({1: (1, 1, 1)}, base_width=8, width_cap=32)
        est.append(fit_critic(dcm, {1: s}, {1: q}, steps=300, seed=seed))
        w1.append(wasserstein_1d(s.flatten().tolist(), q.flatten().tolist()))
    assert est[0] > 0 and est[0] < est[1] < est[2]
    assert np.argsort(est).tolist() == np.argsort(w1).tolist()
    assert est[2] / est[0] > 2.0
