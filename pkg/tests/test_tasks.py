import numpy as np
import pytest

from forgetlab.numcore import RngStream
from forgetlab.tasks import (
    CsvSchema,
    Split,
    StreamFormatError,
    TaskSpec,
    _split_stratified,
    gen_permuted_tasks,
    gen_split_blobs,
    gen_warm_start_corpus,
    load_csv,
    load_stream,
    reorder_stream,
    save_stream,
    shuffle_sequences,
)

from oracles import nearest_centroid_accuracy


def _stream(**kw):
    args = dict(num_tasks=3, classes_per_task=2, dim=5, samples_per_class=40, separation=4.0, noise=0.5, seed=0)
    args.update(kw)
    return gen_split_blobs(**args)


def test_blob_stream_shapes_and_labels():
    stream = _stream()
    assert len(stream.tasks) == 3
    for k, task in enumerate(stream.tasks):
        assert task.task_id == k
        assert task.class_count == 2
        for split in (task.train, task.val, task.test):
            assert split.inputs.shape[1] == 5
            assert set(np.unique(split.labels)) == {0, 1}


def test_blob_split_is_80_10_10_stratified():
    stream = _stream()
    for task in stream.tasks:
        for split, frac in ((task.train, 0.8), (task.val, 0.1), (task.test, 0.1)):
            for cls in (0, 1):
                assert np.sum(split.labels == cls) == int(round(frac * 40))
        total = task.train.labels.size + task.val.labels.size + task.test.labels.size
        assert total == 80


def test_blob_stream_is_deterministic():
    a, b = _stream(), _stream()
    for ta, tb in zip(a.tasks, b.tasks):
        np.testing.assert_array_equal(ta.train.inputs, tb.train.inputs)
        np.testing.assert_array_equal(ta.test.labels, tb.test.labels)
    c = _stream(seed=1)
    assert not np.array_equal(a.tasks[0].train.inputs, c.tasks[0].train.inputs)


def test_blob_means_lie_in_the_separation_box():
    stream = _stream(separation=6.0)
    assert stream.blob_meta is not None
    assert np.all(np.abs(stream.blob_meta.means) <= 3.0)
    assert stream.blob_meta.means.shape == (6, 5)


def test_well_separated_blobs_are_classifiable():
    stream = _stream(separation=10.0, noise=0.3, seed=2)
    task = stream.tasks[0]
    acc = nearest_centroid_accuracy(task.train.inputs, task.train.labels, task.test.inputs, task.test.labels)
    assert acc == 1.0


def test_split_stratified_keeps_class_proportions():
    rng = RngStream(0, "s")
    inputs = np.arange(200.0).reshape(100, 2)
    labels = np.repeat(np.arange(4), 25)
    train, val, test = _split_stratified(inputs, labels, rng)
    for cls in range(4):
        assert np.sum(val.labels == cls) == 2
        assert np.sum(test.labels == cls) == 2
        assert np.sum(train.labels == cls) == 21


def test_split_rows_stay_paired():
    # feature rows must travel with their labels through the shuffle
    rng = RngStream(1, "s")
    labels = np.repeat(np.arange(2), 30)
    inputs = np.stack([labels.astype(float), np.arange(60.0)], axis=1)
    for split in _split_stratified(inputs, labels, rng):
        np.testing.assert_array_equal(split.inputs[:, 0], split.labels.astype(float))


def test_permuted_tasks_first_is_identity():
    base = _stream().tasks[0]
    stream = gen_permuted_tasks(base, 4, seed=3)
    np.testing.assert_array_equal(stream.tasks[0].train.inputs, base.train.inputs)
    for task in stream.tasks[1:]:
        assert not np.array_equal(task.train.inputs, base.train.inputs)
        # permuting columns preserves per-row multisets
        np.testing.assert_allclose(np.sort(task.train.inputs, axis=1), np.sort(base.train.inputs, axis=1))
        np.testing.assert_array_equal(task.train.labels, base.train.labels)


def test_permuted_tasks_use_one_permutation_per_task():
    base = _stream().tasks[0]
    stream = gen_permuted_tasks(base, 3, seed=3)
    task = stream.tasks[2]
    # recover the permutation from train, verify it maps val and test too
    perm = [int(np.argmax(np.all(base.train.inputs == task.train.inputs[:, [j]], axis=0))) for j in range(5)]
    np.testing.assert_array_equal(task.val.inputs, base.val.inputs[:, perm])
    np.testing.assert_array_equal(task.test.inputs, base.test.inputs[:, perm])


def test_stream_roundtrip_is_bit_exact(tmp_path):
    stream = _stream(seed=4)
    save_stream(stream, tmp_path / "data")
    back = load_stream(tmp_path / "data")
    assert len(back.tasks) == len(stream.tasks)
    for ta, tb in zip(stream.tasks, back.tasks):
        assert (ta.task_id, ta.class_count) == (tb.task_id, tb.class_count)
        for sa, sb in ((ta.train, tb.train), (ta.val, tb.val), (ta.test, tb.test)):
            np.testing.assert_array_equal(sa.inputs, sb.inputs)
            np.testing.assert_array_equal(sa.labels, sb.labels)
    assert back.blob_meta is not None
    np.testing.assert_array_equal(back.blob_meta.means, stream.blob_meta.means)
    assert back.blob_meta.separation == stream.blob_meta.separation


def test_load_stream_rejects_garbage(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    (d / "manifest.json").write_text('{"format": "something-else"}')
    with pytest.raises(StreamFormatError):
        load_stream(d)


def test_load_csv_groups_by_task(tmp_path):
    path = tmp_path / "raw.csv"
    rows = ["f0,f1,y,t"]
    for t in (0, 1):
        for i in range(30):
            rows.append(f"{i + t},{i * 0.5},{i % 2},{t}")
    path.write_text("\n".join(rows) + "\n")
    stream = load_csv(path, CsvSchema(features=["f0", "f1"], label="y", task="t"))
    assert [task.task_id for task in stream.tasks] == [0, 1]
    for task in stream.tasks:
        assert task.class_count == 2
        n = task.train.labels.size + task.val.labels.size + task.test.labels.size
        assert n == 30
        assert task.val.labels.size == 3 and task.test.labels.size == 3


def test_load_csv_reports_file_and_line(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("f0,y\n1.0,0\noops,1\n")
    with pytest.raises(StreamFormatError, match=r"raw\.csv:3"):
        load_csv(path, CsvSchema(features=["f0"], label="y"))


def test_load_csv_missing_column(tmp_path):
    path = tmp_path / "raw.csv"
    path.write_text("f0,y\n1.0,0\n")
    with pytest.raises(StreamFormatError, match="missing column"):
        load_csv(path, CsvSchema(features=["f0", "f9"], label="y"))


def test_shuffle_sequences_are_seeded_permutations():
    stream = _stream()
    orders = shuffle_sequences(stream, 5, seed=9)
    assert len(orders) == 5
    for order in orders:
        assert sorted(order) == [0, 1, 2]
    assert orders == shuffle_sequences(stream, 5, seed=9)
    assert orders != shuffle_sequences(stream, 5, seed=10)
    assert len({tuple(o) for o in orders}) > 1  # not all identical


def test_reorder_stream_preserves_task_identity():
    stream = _stream()
    re = reorder_stream(stream, [2, 0, 1])
    assert [t.task_id for t in re.tasks] == [2, 0, 1]
    np.testing.assert_array_equal(re.tasks[0].train.inputs, stream.tasks[2].train.inputs)
    with pytest.raises(ValueError):
        reorder_stream(stream, [0, 1])
    with pytest.raises(ValueError):
        reorder_stream(stream, [0, 1, 1])


def test_warm_corpus_means_are_disjoint_from_stream():
    stream = _stream(separation=6.0, seed=5)
    corpus = gen_warm_start_corpus(stream, seed=11)
    assert corpus.class_count == 6
    assert corpus.inputs.shape == (6 * 40, 5)
    assert set(np.unique(corpus.labels)) == set(range(6))
    for mean in corpus.means:
        dists = np.linalg.norm(stream.blob_meta.means - mean, axis=1)
        assert np.min(dists) >= 3.0


def test_warm_corpus_is_deterministic_and_seed_sensitive():
    stream = _stream(separation=6.0, seed=5)
    a = gen_warm_start_corpus(stream, seed=11)
    b = gen_warm_start_corpus(stream, seed=11)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    c = gen_warm_start_corpus(stream, seed=12)
    assert not np.array_equal(a.means, c.means)


def test_warm_corpus_requires_blob_metadata():
    base = _stream().tasks[0]
    plain = gen_permuted_tasks(base, 2, seed=0)
    with pytest.raises(ValueError):
        gen_warm_start_corpus(plain, seed=0)


def test_generator_input_validation():
    with pytest.raises(ValueError):
        _stream(num_tasks=0)
    with pytest.raises(ValueError):
        _stream(classes_per_task=1)
    with pytest.raises(ValueError):
        _stream(samples_per_class=5)
    with pytest.raises(ValueError):
        _stream(separation=0.0)
