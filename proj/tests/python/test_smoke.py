import pytest

import rebalance as rb


def synthetic(n=400, seed=3):
    spec = rb.SyntheticSpec()
    spec.n = n
    spec.d = 4
    spec.seed = seed
    return rb.generate_synthetic(spec)


def config(lr=1e-2, steps=200, seed=5):
    cfg = rb.OptimConfig()
    cfg.lr0 = lr
    cfg.total_steps = steps
    cfg.batch_size = 32
    cfg.seed = seed
    return cfg


def test_synthetic_shapes():
    ds = synthetic()
    assert ds.size == 400
    assert ds.dim == 4
    assert ds.num_classes == 2
    assert ds.has_spurious
    assert ds.num_groups == 4
    for i in range(ds.size):
        assert ds.group_of(i) == ds.class_labels[i] * 2 + ds.spurious_labels[i]


def test_train_and_evaluate():
    ds = synthetic()
    train, val = rb.split(ds, [0.5, 0.5], seed=1)
    assert train.size == 200 and val.size == 200
    report = rb.train_head(train, "unbalanced", config())
    assert len(report.loss_trace) == 200
    metrics = rb.evaluate(report.final_head, val)
    assert 0.0 <= metrics.average_accuracy <= 1.0
    assert metrics.worst_group_accuracy is not None
    assert sum(metrics.counts.values()) == val.size


def test_groupless_dataset_has_no_worst_group():
    ds = rb.EmbeddingDataset([[0.0], [1.0]], [0, 1], 2)
    metrics = rb.evaluate(rb.LinearHead.zeros(2, 1), ds)
    assert metrics.worst_group_accuracy is None
    assert metrics.per_group_accuracy == {}


def test_dfr_consumes_group_annotations():
    ds = synthetic(n=200)
    ledger = rb.AnnotationLedger(ds.size)
    rb.dfr(ds, config(steps=50), ledger)
    assert ledger.class_labels_revealed == ds.size
    assert ledger.group_labels_revealed == ds.size


def test_free_lunch_split_sizes():
    ds = synthetic()
    result = rb.free_lunch(ds, config(steps=50), config(steps=50), 0.1)
    assert result.erm_split.size == 360
    assert result.retrain_split.size == 40
    assert result.retrained_head.dim == ds.dim


def test_select_top_n_ties_to_lower_index():
    picked = rb.select_top_n([0.1, 5.0, 5.0, -1.0], 2)
    assert picked.indices == [1, 2]
    assert picked.costs == [5.0, 5.0]


def test_embeddings_roundtrip(tmp_path):
    ds = synthetic(n=64)
    path = str(tmp_path / "data.gemb")
    rb.save_embeddings(ds, path)
    back = rb.load_embeddings(path)
    assert back.size == ds.size
    assert back.features == ds.features
    assert back.class_labels == ds.class_labels
    assert back.spurious_labels == ds.spurious_labels


def test_head_roundtrip(tmp_path):
    head = rb.LinearHead([[1.0, 2.0], [3.0, 4.0]], [0.5, -0.5])
    path = str(tmp_path / "head.ghed")
    rb.save_head(head, path)
    assert rb.load_head(path) == head


def test_errors_surface_as_python_exceptions(tmp_path):
    with pytest.raises(rb.Error):
        rb.load_embeddings(str(tmp_path / "missing.gemb"))
    with pytest.raises(rb.Error):
        rb.kl_divergence([0.5, 0.5], [1.0, 0.0])
    bad = config(lr=-1.0)
    with pytest.raises(rb.Error):
        bad.validate()


def test_verify_theorem():
    check = rb.verify_theorem(trials=50, seed=1)
    assert check.trials == 50
    assert check.max_abs_deviation < 1e-10
    assert check.min_gap > 0.0


def test_softmax_and_total_variation():
    p = rb.softmax([0.0, 0.0])
    assert p == pytest.approx([0.5, 0.5])
    assert rb.total_variation(p, p) == 0.0
