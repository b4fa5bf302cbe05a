import numpy as np
import pytest

from atrc.autodiff import Tensor, gradcheck, softmax
from atrc.autodiff.checkpoint import CheckpointError
from atrc.contexts import CONTEXT_TYPES, ContextType
from atrc.pipeline import (
    ModelConfig,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    alpha_lr_for,
    build_model,
    build_tasks,
    evaluate,
    predict,
    run_search,
    task_loss,
    total_loss,
)
from atrc.pipeline.metrics import (
    boundary_f_measure,
    confusion_matrix,
    mean_angular_error,
    miou_from_confusion,
    rmse,
)
from atrc.synth_data import SceneSpec, dataset, stack_samples

SMALL = dict(width=6, feat=6, d_k=4, d_v=4, window=3)


@pytest.fixture(scope="module")
def data():
    return stack_samples(dataset(SceneSpec(height=8, width=8, color_mode="class"), 64))


@pytest.fixture(scope="module")
def tasks(data):
    return build_tasks(data, n_depth_bins=8, n_codewords=8)


@pytest.fixture(scope="module")
def tasks2(data):
    return build_tasks(data, names=("semseg", "depth"), n_depth_bins=6)


def _batch(data, n=4):
    return {k: v[:n] for k, v in data.items()}


def test_task_specs(tasks):
    names = [t.name for t in tasks]
    assert names == ["semseg", "depth", "normals", "boundary"]
    assert [t.loss_weight for t in tasks] == [1.0, 1.0, 10.0, 50.0]
    assert [t.gamma for t in tasks] == [0, 1, 1, 0]
    assert [t.regions.n_regions for t in tasks] == [4, 8, 8, 2]
    with pytest.raises(ValueError):
        build_tasks({}, names=("color",))


def test_forward_shapes_and_block_count(tasks, data):
    net = build_model(ModelConfig(mode="uniform", context="global", **SMALL), tasks)
    assert len(net.blocks) == 16
    out = net(_batch(data)["image"])
    expected = {"semseg": 4, "depth": 1, "normals": 3, "boundary": 1}
    for t, c in expected.items():
        assert out.preds[t].shape == (4, c, 8, 8)
    assert [out.aux[t.name].shape[1] for t in tasks] == [4, 8, 8, 2]


def test_mode_validation(tasks):
    with pytest.raises(ValueError):
        ModelConfig(mode="bogus")
    with pytest.raises(ValueError):
        ModelConfig(mode="uniform", context="far")
    with pytest.raises(ValueError):
        ModelConfig(mode="fixed")
    with pytest.raises(ValueError):
        build_model(ModelConfig(mode="single", **SMALL), tasks)
    with pytest.raises(ValueError):
        build_model(ModelConfig(mode="fixed", arch=["global"] * 3, **SMALL), tasks)
    assert len(build_model(ModelConfig(mode="none", **SMALL), tasks).blocks) == 0
    single = build_model(ModelConfig(mode="single", **SMALL), tasks[:1])
    assert list(single.pred) == ["semseg"]


def test_search_model_needs_weights(tasks, data):
    net = build_model(ModelConfig(mode="search", **SMALL), tasks)
    with pytest.raises(ValueError):
        net(_batch(data)["image"])


def test_no_self_attention_pins_diagonal(tasks2):
    net = build_model(ModelConfig(mode="no_self_attention", **SMALL), tasks2)
    assert net.pinned_blocks() == {0: ContextType.NONE, 3: ContextType.NONE}
    fixed = build_model(ModelConfig(mode="uniform", context="local", self_attention=False, **SMALL), tasks2)
    assert fixed.fixed_arch == [ContextType.NONE, ContextType.LOCAL, ContextType.LOCAL, ContextType.NONE]


def test_fuse_zero_init_starts_at_baseline(tasks2, data):
    net = build_model(ModelConfig(mode="uniform", context="global", **SMALL), tasks2)
    assert all(np.all(f.bn.gamma.data == 0) for f in net.fuse.values())
    silent, _ = predict(net, _batch(data, 4), cp_override={("semseg", "depth"): np.ones((4, 4, 8, 8))})
    ref, _ = predict(net, _batch(data, 4))
    assert np.array_equal(silent["semseg"], ref["semseg"])


def test_all_none_equals_baseline(tasks, data):
    """An all-none architecture distills nothing and is built as the baseline itself."""
    images = _batch(data, 8)["image"]
    base = build_model(ModelConfig(mode="none", **SMALL), tasks, seed=3)
    b = {k: v.copy() for k, v in base.state_dict().items()}
    ref = {t: p.data for t, p in base(images).preds.items()}
    for cfg in (ModelConfig(mode="uniform", context="none", **SMALL),
                ModelConfig(mode="fixed", arch=["none"] * 16, **SMALL)):
        net = build_model(cfg, tasks, seed=3)
        assert not net.distills and not net.blocks
        a = net.state_dict()
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        for t, pred in net(images).preds.items():
            assert np.array_equal(pred.data, ref[t])


def test_gt_region_maps(tasks2, data):
    net = build_model(ModelConfig(mode="uniform", context="t_label", region_source="gt", **SMALL), tasks2)
    batch = _batch(data, 2)
    out = net(batch["image"], labels=batch)
    a = out.a_hat["semseg"].data
    assert a.shape == (2, 64, 4)
    assert np.allclose(a.sum(axis=1), 1, atol=1e-6)
    for n in range(2):
        for r in range(4):
            members = batch["semseg"][n].ravel() == r
            if members.any():
                assert np.allclose(a[n, members, r], 1 / members.sum())
                assert np.all(a[n, ~members, r] == 0)
            else:
                assert np.allclose(a[n, :, r], 1 / 64)
    with pytest.raises(ValueError):
        net(batch["image"])


def test_gradcheck_full_model(tasks2, data):
    """Image and architecture-logit gradients through every candidate, float64."""
    net = build_model(ModelConfig(mode="search", region_source="gt", fuse_zero_init=False, **SMALL),
                      tasks2, seed=1)
    net.to_dtype(np.float64)
    batch = _batch(data, 2)
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, len(CONTEXT_TYPES)))
    image = batch["image"].astype(np.float64)

    def fn(img, z):
        w = softmax(z, axis=-1)
        out = net(img, [w[j] for j in range(4)], batch)
        loss = None
        for t in tasks2:
            term = task_loss(t, out.preds[t.name], batch[t.name])
            loss = term if loss is None else loss + term
        return loss

    rep = gradcheck(fn, [image, logits], tolerance=1e-4)
    assert rep.passed, rep


def test_trunk_gradients_ignore_aux_loss(tasks, data):
    net = build_model(ModelConfig(mode="uniform", context="s_label", fuse_zero_init=False, **SMALL), tasks)
    batch = _batch(data, 4)
    grads = []
    for with_aux in (True, False):
        net.zero_grad()
        out = net(batch["image"], labels=batch)
        loss, _ = total_loss(out.preds, out.aux if with_aux else {}, batch, tasks)
        loss.backward()
        grads.append([p.grad.copy() for p in net.trunk_parameters()])
        if with_aux:
            # the aux heads themselves do learn
            assert all(p.grad is not None for p in net.aux["depth"].parameters())
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_total_loss_composition(tasks, data):
    net = build_model(ModelConfig(mode="none", **SMALL), tasks)
    batch = _batch(data, 4)
    out = net(batch["image"])
    reg = Tensor(np.array(1.3, np.float32))
    loss, parts = total_loss(out.preds, out.aux, batch, tasks, reg, 0.05)
    expected = sum(t.loss_weight * (parts[t.name] + parts[f"aux_{t.name}"]) for t in tasks) + 0.05 * 1.3
    assert loss.item() == pytest.approx(expected, rel=1e-5)
    assert parts["total"] == loss.item()
    with pytest.raises(KeyError):
        total_loss(out.preds, out.aux, {"image": batch["image"]}, tasks)


def test_overfit_small_set(tasks2, data):
    cfg = TrainConfig(iters=200, batch_size=8, lr=0.03)
    net = build_model(ModelConfig(mode="fixed", arch=["global", "t_label", "s_label", "local"], **SMALL),
                      tasks2)
    tr = Trainer(net, tasks2, data, cfg, seed=0)
    tr.run()
    first = np.mean([h["total"] for h in tr.history[:5]])
    last = np.mean([h["total"] for h in tr.history[-10:]])
    assert last < 0.25 * first


def _params(net):
    return {k: v.copy() for k, v in net.state_dict().items()}


def test_training_is_deterministic(tasks2, data):
    cfg = TrainConfig(iters=4, batch_size=4)
    runs = []
    for _ in range(2):
        net = build_model(ModelConfig(mode="search", **SMALL), tasks2, seed=5)
        tr = Trainer(net, tasks2, data, cfg, seed=5)
        tr.run()
        runs.append((_params(net), tr.arch.alpha.data.copy()))
    for k in runs[0][0]:
        assert np.array_equal(runs[0][0][k], runs[1][0][k])
    assert np.array_equal(runs[0][1], runs[1][1])


def test_checkpoint_resume_is_bit_exact(tasks2, data, tmp_path):
    cfg = TrainConfig(iters=6, batch_size=4, alpha_lr=0.5)
    ref_net = build_model(ModelConfig(mode="search", **SMALL), tasks2, seed=2)
    ref = Trainer(ref_net, tasks2, data, cfg, seed=2)
    ref.run()

    net = build_model(ModelConfig(mode="search", **SMALL), tasks2, seed=2)
    first = Trainer(net, tasks2, data, cfg, seed=2)
    first.run(until=3)
    first.save(tmp_path / "ck.bin")
    resumed_net = build_model(ModelConfig(mode="search", **SMALL), tasks2, seed=99)
    resumed = Trainer(resumed_net, tasks2, data, cfg, seed=2)
    resumed.load(tmp_path / "ck.bin")
    assert resumed.iteration == 3
    resumed.run()
    a, b = _params(ref_net), _params(resumed_net)
    for k in a:
        assert np.array_equal(a[k], b[k]), k
    assert np.array_equal(ref.arch.alpha.data, resumed.arch.alpha.data)
    assert ref.arch.frozen == resumed.arch.frozen
    other = Trainer(build_model(ModelConfig(mode="search", **SMALL), tasks2), tasks2, data, cfg, seed=3)
    with pytest.raises(CheckpointError):
        other.load(tmp_path / "ck.bin")


def test_frozen_rows_stay_fixed_during_search(tasks2, data):
    cfg = TrainConfig(iters=3, batch_size=4, alpha_lr=0.1)
    net = build_model(ModelConfig(mode="search", **SMALL), tasks2)
    tr = Trainer(net, tasks2, data, cfg)
    tr.arch.alpha.data[2] = [0.0, 0.0, 2.0, 0.0, 0.0]
    tr.arch.update_freezes(0, 0.3)
    row = tr.arch.alpha.data[2].copy()
    before_other = tr.arch.alpha.data[[0, 1, 3]].copy()
    prefix = "blocks.depth__semseg.candidates."
    before = {k: v.copy() for k, v in net.state_dict().items() if k.startswith(prefix)}
    tr.run()
    assert np.array_equal(tr.arch.alpha.data[2], row)
    assert not np.array_equal(tr.arch.alpha.data[[0, 1, 3]], before_other)
    # the frozen block's unused candidates are no longer updated; the chosen one still is
    after = net.state_dict()
    for k, v in before.items():
        if k.startswith(prefix + "t_label."):
            continue
        assert np.array_equal(after[k], v), k
    assert any(not np.array_equal(after[k], v) for k, v in before.items() if k.startswith(prefix + "t_label."))


def test_non_finite_loss_raises(tasks2, data):
    bad = {k: v.copy() for k, v in _batch(data, 4).items()}
    bad["image"][0, 0, 0, 0] = np.nan
    tr = Trainer(build_model(ModelConfig(mode="none", **SMALL), tasks2), tasks2, bad,
                 TrainConfig(iters=2, batch_size=4))
    with pytest.raises(NonFiniteLossError):
        tr.step()


def test_trainer_rejects_tiny_dataset(tasks2, data):
    with pytest.raises(ValueError):
        Trainer(build_model(ModelConfig(mode="none", **SMALL), tasks2), tasks2, _batch(data, 2),
                TrainConfig(batch_size=4))


def test_run_search_records_votes_and_errors(tasks2, data):
    cfg = TrainConfig(iters=3, batch_size=4)
    res = run_search(ModelConfig(mode="search", **SMALL), tasks2, data, cfg, seeds=[0, 1])
    assert len(res.runs) == 2 and res.error is None and len(res.voted) == 4
    assert all(len(r.selections) == 4 for r in res.runs)
    bad = run_search(ModelConfig(mode="search", **SMALL), tasks2, _batch(data, 2), cfg, seeds=[0])
    assert bad.runs == [] and "ValueError" in bad.error


def test_alpha_lr_scaling():
    assert alpha_lr_for(40000) == pytest.approx(0.0005)
    assert alpha_lr_for(400) == pytest.approx(0.05)
    assert TrainConfig(iters=400).schedule().alpha_lr == pytest.approx(0.05)
    assert TrainConfig(iters=400, alpha_lr=0.01).schedule().alpha_lr == 0.01


def test_predict_collects_and_overrides_cp(tasks2, data):
    net = build_model(ModelConfig(mode="uniform", context="global", fuse_zero_init=False, **SMALL), tasks2)
    small = _batch(data, 6)
    preds, cps = predict(net, small, batch_size=4, collect_cp=[("semseg", "depth")])
    assert cps[("semseg", "depth")].shape == (6, 4, 8, 8)
    same, _ = predict(net, small, batch_size=4, cp_override={("semseg", "depth"): cps[("semseg", "depth")]})
    assert np.allclose(same["semseg"], preds["semseg"], atol=1e-6)
    zero, _ = predict(net, small, batch_size=4, cp_override={("semseg", "depth"): np.zeros((6, 4, 8, 8))})
    assert not np.allclose(zero["semseg"], preds["semseg"])
    assert np.array_equal(zero["depth"], preds["depth"])
    rep = evaluate(net, small)
    assert set(rep.values) == {"semseg", "depth"}


# --- metrics -----------------------------------------------------------------------------

def test_miou_oracle():
    rng = np.random.default_rng(0)
    pred, gt = rng.integers(0, 4, 200), rng.integers(0, 3, 200)
    ious = []
    for c in range(4):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        if union:
            ious.append(inter / union)
    assert miou_from_confusion(confusion_matrix(pred, gt, 4)) == pytest.approx(np.mean(ious))
    assert miou_from_confusion(confusion_matrix(gt, gt, 4)) == 1.0


def test_regression_metrics():
    assert rmse(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 3.0])) == pytest.approx(np.sqrt(4 / 3))
    p = np.array([[1.0, 0, 0], [0, 2.0, 0]]).reshape(2, 3, 1, 1)
    t = np.array([[0, 1.0, 0], [0, 1.0, 0]]).reshape(2, 3, 1, 1)
    assert mean_angular_error(p, t) == pytest.approx(45.0)


def _boundary_f_oracle(prob, gt):
    h, w = gt.shape
    best = 0.0
    for k in range(1, 21):
        p = prob >= k / 21
        def near(mask, i, j):
            return any(mask[y, x] for y in range(max(0, i - 1), min(h, i + 2))
                       for x in range(max(0, j - 1), min(w, j + 2)))
        mp = sum(near(gt, i, j) for i in range(h) for j in range(w) if p[i, j])
        mg = sum(near(p, i, j) for i in range(h) for j in range(w) if gt[i, j])
        prec = mp / p.sum() if p.sum() else 0.0
        rec = mg / gt.sum() if gt.sum() else 0.0
        if prec + rec:
            best = max(best, 2 * prec * rec / (prec + rec))
    return best


def test_boundary_f_measure_oracle():
    rng = np.random.default_rng(1)
    for _ in range(5):
        gt = rng.random((7, 9)) < 0.2
        prob = rng.random((7, 9))
        assert boundary_f_measure(prob, gt) == pytest.approx(_boundary_f_oracle(prob, gt))


def test_boundary_f_tolerance():
    gt = np.zeros((9, 9), bool)
    gt[4, :] = True
    assert boundary_f_measure(gt.astype(float), gt) == 1.0
    assert boundary_f_measure(np.roll(gt, 1, axis=0).astype(float), gt) == 1.0
    assert boundary_f_measure(np.roll(gt, 2, axis=0).astype(float), gt) == 0.0
    assert boundary_f_measure(np.zeros((3, 3)), np.zeros((3, 3), bool)) == 1.0
