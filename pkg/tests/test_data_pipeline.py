import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from data_pipeline import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    Dataset,
    SplitConfig,
    StandardizerStats,
    SyntheticTaskConfig,
    Vocabulary,
    apply_standardizer,
    bayes_accuracy,
    encode_dataset,
    fit_standardizer,
    generate_synthetic,
    read_dataset,
    stratified_split,
    tokenize,
    write_dataset,
)
from errors import DataValidationError


def test_tokenize_adds_specials_and_pads():
    vocab = Vocabulary.from_tokens(["the", "cat"])
    ids, mask = tokenize("The cat sat", vocab, max_len=6)

    assert ids == [CLS_ID, vocab.lookup("the"), vocab.lookup("cat"), UNK_ID, SEP_ID, PAD_ID]
    assert mask == [1, 1, 1, 1, 1, 0]


def test_tokenize_truncates_head_and_keeps_sep():
    vocab = Vocabulary.from_tokens(["a", "b", "c", "d"])
    ids, mask = tokenize("a b c d", vocab, max_len=4)

    assert ids == [CLS_ID, vocab.lookup("a"), vocab.lookup("b"), SEP_ID]
    assert mask == [1, 1, 1, 1]


def test_tokenize_empty_text_and_short_max_len():
    vocab = Vocabulary()
    assert tokenize("", vocab, max_len=3) == ([CLS_ID, SEP_ID, PAD_ID], [1, 1, 0])
    with pytest.raises(DataValidationError):
        tokenize("x", vocab, max_len=1)


def test_vocabulary_orders_by_frequency_then_alphabetically():
    vocab = Vocabulary.build(["b a c", "a b", "a"])
    assert vocab.tokens()[4:] == ["a", "b", "c"]
    assert Vocabulary.build(["b a c", "a b", "a"], max_size=6).tokens()[4:] == ["a", "b"]


def test_standardizer_fits_train_statistics():
    aux = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    stats = fit_standardizer(aux)
    scaled = apply_standardizer(stats, aux)

    np.testing.assert_allclose(scaled[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(scaled[:, 0].std(), 1.0, atol=1e-12)
    np.testing.assert_array_equal(stats.stds[1], 1.0)
    np.testing.assert_array_equal(scaled[:, 1], 0.0)


def test_standardizer_rejects_tiny_training_sets_and_wrong_width(tmp_path):
    with pytest.raises(DataValidationError):
        fit_standardizer(np.zeros((0, 3)))
    with pytest.raises(DataValidationError):
        fit_standardizer(np.zeros((1, 3)))

    stats = fit_standardizer(np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(DataValidationError):
        apply_standardizer(stats, np.zeros((2, 4)))

    path = tmp_path / "stats.json"
    stats.save(path)
    restored = StandardizerStats.load(path)
    np.testing.assert_array_equal(restored.means, stats.means)


def _dataset(labels):
    labels = np.asarray(labels)
    return Dataset([f"w{i}" for i in range(len(labels))], np.arange(len(labels), dtype=float)[:, None], labels)


def test_stratified_split_preserves_class_proportions():
    dataset = _dataset([0] * 60 + [1] * 40)
    train, test = stratified_split(dataset, SplitConfig(test_fraction=0.25, seed=3))

    assert test.class_counts() == {0: 15, 1: 10}
    assert train.class_counts() == {0: 45, 1: 30}
    assert set(train.texts).isdisjoint(test.texts)


def test_stratified_split_rejects_single_example_or_missing_class():
    with pytest.raises(DataValidationError):
        stratified_split(_dataset([0, 0, 0, 1]), SplitConfig())
    with pytest.raises(DataValidationError):
        stratified_split(_dataset([1] * 10), SplitConfig())


def test_split_config_bounds():
    with pytest.raises(ValidationError):
        SplitConfig(test_fraction=1.0)


def test_bayes_accuracy_defaults():
    bayes = bayes_accuracy(SyntheticTaskConfig())

    assert bayes["joint"] == pytest.approx(0.98)
    assert bayes["text_only"] == pytest.approx(0.74)
    assert bayes["aux_only"] == 0.5


def test_synthetic_label_is_marker_xor_aux_sign_without_noise():
    config = SyntheticTaskConfig(n_examples=400, noise_rate=0.0, seed=5)
    dataset = generate_synthetic(config)

    has_marker = np.array([any(tok.startswith("mk") for tok in text.split()) for text in dataset.texts])
    hidden = dataset.aux[:, 0] > 0
    np.testing.assert_array_equal(dataset.labels, (has_marker ^ hidden).astype(int))
    assert dataset.class_counts() == {0: 200, 1: 200}
    assert np.all(np.abs(dataset.aux[:, 0]) >= 0.5)


def test_synthetic_config_validation():
    with pytest.raises(ValidationError):
        SyntheticTaskConfig(n_examples=0)
    with pytest.raises(ValidationError):
        SyntheticTaskConfig(vocab_size=2, n_marker_types=2)
    with pytest.raises(ValidationError):
        SyntheticTaskConfig(seq_len=1, markers_per_text=2)


def test_dataset_file_is_deterministic_and_readable(tmp_path):
    config = SyntheticTaskConfig(n_examples=50, seed=7)
    first = write_dataset(generate_synthetic(config), tmp_path / "a.csv")
    second = write_dataset(generate_synthetic(config), tmp_path / "b.csv")

    assert first.read_bytes() == second.read_bytes()
    assert len(first.read_text().splitlines()) == 51
    restored = read_dataset(first)
    assert restored.texts == generate_synthetic(config).texts
    np.testing.assert_array_equal(restored.aux, generate_synthetic(config).aux)


def test_dataset_file_quotes_commas_and_quotes(tmp_path):
    dataset = Dataset(['say "hi", then go'], np.array([[0.25]]), np.array([1]))
    path = write_dataset(dataset, tmp_path / "quoted.csv")

    assert path.read_text().splitlines()[1] == '"say ""hi"", then go",0.25,1'
    assert read_dataset(path).texts == ['say "hi", then go']


def test_read_dataset_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text('text,aux_0,label\n"ok",1.0,0\n"bad",1.0,2\n')
    with pytest.raises(DataValidationError, match=":3:"):
        read_dataset(path)

    path.write_text("words,label\n")
    with pytest.raises(DataValidationError):
        read_dataset(path)


def test_encode_dataset_shapes_and_batches():
    config = SyntheticTaskConfig(n_examples=20, seed=1)
    dataset = generate_synthetic(config)
    vocab = Vocabulary.build(dataset.texts)
    stats = fit_standardizer(dataset.aux)
    encoded = encode_dataset(dataset, vocab, max_len=14, stats=stats)

    assert encoded.token_ids.shape == (20, 14)
    assert encoded.mask[:, :12].all() and not encoded.mask[:, 12:].any()
    assert encoded.d_struct == 4
    assert [len(b) for b in encoded.iter_batches(8)] == [8, 8, 4]


def test_aux_alone_is_uninformative_without_interaction():
    dataset = generate_synthetic(SyntheticTaskConfig(n_examples=2000, interaction_strength=0.0, seed=3))

    for column in range(dataset.d_struct):
        values = dataset.aux[:, column]
        for threshold in (0.0, float(np.median(values))):
            accuracy = float(np.mean((values > threshold).astype(int) == dataset.labels))
            assert abs(max(accuracy, 1.0 - accuracy) - 0.5) <= 0.05
