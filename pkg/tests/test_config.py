from __future__ import annotations

import itertools
from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SNIPPET
from tinymark.config import (
    ACTIVATIONS,
    ModelSpec,
    dump_model_config,
    load_model_config,
    model_spec_from_dict,
    parse_model_config,
    scan_config_dir,
)
from tinymark.errors import ConfigSyntaxError, UnsupportedModelType, ValidationError
from tinymark.orchestrator import suite_dir

MINIMAL_FC = """
model_type: "FC"
denses_params: []
dataset:
    name: "randomset_regression"
    args:
        feature_dim: 1
"""


def test_snippet_parses_to_cnn_spec():
    spec = parse_model_config(SNIPPET)
    assert spec.model_type == "CNN"
    assert spec.convs_params == ((8, 3, 1), (0, 2, 2), (16, 3, 1), (0, 0, 0))
    assert spec.denses_params == (64, 16)
    assert spec.random_seed == 42
    assert spec.convs_dropout == 0.25
    assert spec.denses_dropout == 0.10
    assert spec.dataset.name == "mnist"
    assert spec.dataset.flat_features is False


def test_minimal_fc_has_no_hidden_layers():
    spec = parse_model_config(MINIMAL_FC)
    assert spec.model_type == "FC"
    assert spec.denses_params == ()
    assert spec.dataset.feature_dim == 1


@pytest.mark.parametrize("channels,kernel", list(itertools.product([0, 4], [0, 3])))
def test_conv_entry_sign_combinations(channels, kernel):
    doc = yaml.safe_load(SNIPPET)
    doc["convs_params"] = [[channels, kernel, 1]]
    if channels > 0 and kernel == 0:
        with pytest.raises(ValidationError) as info:
            model_spec_from_dict(doc)
        assert info.value.path == "convs_params[0]"
    else:
        spec = model_spec_from_dict(doc)
        assert spec.convs_params == ((channels, kernel, 1),)


def test_conv_with_zero_kernel_is_rejected_with_path():
    doc = yaml.safe_load(SNIPPET)
    doc["convs_params"] = [[8, 0, 1]]
    with pytest.raises(ValidationError, match=r"convs_params\[0\]"):
        model_spec_from_dict(doc)


def test_stride_must_be_positive_except_for_global_pooling():
    doc = yaml.safe_load(SNIPPET)
    doc["convs_params"] = [[8, 3, 0]]
    with pytest.raises(ValidationError, match=r"convs_params\[0\]\[2\]"):
        model_spec_from_dict(doc)


def test_unknown_keys_are_listed():
    with pytest.raises(ValidationError) as info:
        parse_model_config(MINIMAL_FC + "learning_rate: 0.1\noptimizer: adam\n")
    assert "learning_rate" in str(info.value) and "optimizer" in str(info.value)


def test_output_width_and_loss_are_not_config_keys():
    for key in ("output_dim", "loss"):
        with pytest.raises(ValidationError, match=key):
            parse_model_config(MINIMAL_FC + f"{key}: 3\n")


def test_malformed_document_is_a_syntax_error():
    with pytest.raises(ConfigSyntaxError):
        parse_model_config("model_type: [unclosed\n")


def test_unknown_model_type():
    with pytest.raises(UnsupportedModelType):
        parse_model_config(MINIMAL_FC.replace('"FC"', '"Transformer"'))


def test_fc_rejects_convolutions():
    with pytest.raises(ValidationError, match="convs_params"):
        parse_model_config(MINIMAL_FC + "convs_params: [[4, 3, 1]]\n")


def test_dense_widths_must_be_positive():
    with pytest.raises(ValidationError, match=r"denses_params\[1\]"):
        parse_model_config(MINIMAL_FC.replace("denses_params: []", "denses_params: [4, 0]"))


def test_classification_needs_two_classes():
    text = MINIMAL_FC.replace("randomset_regression", "randomset_classification").replace(
        "feature_dim: 1", "feature_dim: 4\n        num_classes: 1"
    )
    with pytest.raises(ValidationError, match="num_classes"):
        parse_model_config(text)


def test_dropout_must_be_a_fraction():
    with pytest.raises(ValidationError, match="denses_dropout"):
        parse_model_config(MINIMAL_FC + "denses_dropout: 1.0\n")


def test_rnn_keys_only_for_rnn_models():
    with pytest.raises(ValidationError, match="rnn_units"):
        parse_model_config(MINIMAL_FC + "rnn_units: 8\n")


def test_csv_path_must_exist_at_load(tmp_path):
    cfg = tmp_path / "m.yaml"
    cfg.write_text(
        'model_type: "FC"\ndenses_params: [4]\ndataset:\n  name: csv_file\n  args:\n    path: data.csv\n',
        encoding="utf-8",
    )
    with pytest.raises(ValidationError, match="path"):
        load_model_config(cfg)
    (tmp_path / "data.csv").write_text("1,2,3\n4,5,6\n", encoding="utf-8")
    spec = load_model_config(cfg)
    assert Path(spec.dataset.path) == tmp_path / "data.csv"


def test_scan_empty_directory(tmp_path):
    result = scan_config_dir(tmp_path)
    assert result.models == [] and result.diagnostics == []


def test_scan_orders_by_filename(tmp_path):
    for name in ("c", "a", "b"):
        (tmp_path / f"{name}.yaml").write_text(MINIMAL_FC, encoding="utf-8")
    (tmp_path / "notes.txt").write_text("ignored", encoding="utf-8")
    assert [n for n, _ in scan_config_dir(tmp_path).models] == ["a", "b", "c"]


def test_scan_collects_failures(tmp_path):
    (tmp_path / "a.yaml").write_text(MINIMAL_FC, encoding="utf-8")
    (tmp_path / "b.yaml").write_text("model_type: [", encoding="utf-8")
    (tmp_path / "c.yml").write_text(MINIMAL_FC, encoding="utf-8")
    result = scan_config_dir(tmp_path)
    assert [n for n, _ in result.models] == ["a", "c"]
    assert len(result.diagnostics) == 1 and result.diagnostics[0][0] == "b.yaml"


def test_scan_missing_directory(tmp_path):
    with pytest.raises(OSError):
        scan_config_dir(tmp_path / "absent")


def test_every_shipped_config_parses():
    result = scan_config_dir(suite_dir())
    assert result.diagnostics == []
    assert len(result.models) == 20


def test_parsing_is_pure():
    assert parse_model_config(SNIPPET) == parse_model_config(SNIPPET)
    assert parse_model_config(SNIPPET).digest() == parse_model_config(SNIPPET).digest()


@st.composite
def model_docs(draw):
    kind = draw(st.sampled_from(["FC", "CNN", "RNN"]))
    doc = {
        "model_type": kind,
        "denses_params": draw(st.lists(st.integers(1, 256), max_size=3)),
        "activation": draw(st.sampled_from(ACTIVATIONS)),
        "use_batch_norm": draw(st.booleans()),
        "denses_dropout": draw(st.sampled_from([0.0, 0.1, 0.25, 0.5])),
        "epochs": draw(st.integers(0, 100)),
        "batch_size": draw(st.integers(1, 128)),
        "random_seed": draw(st.integers(0, 2**31)),
    }
    if kind == "FC":
        doc["dataset"] = {"name": "randomset_regression", "args": {"feature_dim": draw(st.integers(1, 64))}}
    elif kind == "CNN":
        doc["convs_params"] = draw(
            st.lists(
                st.one_of(
                    st.tuples(st.integers(1, 16), st.integers(1, 3), st.integers(1, 2)),
                    st.tuples(st.just(0), st.integers(1, 2), st.integers(1, 2)),
                ),
                max_size=3,
            ).map(lambda xs: [list(x) for x in xs])
        )
        doc["dataset"] = {"name": "randomset_classification", "args": {"flat_features": False, "image_shape": [16, 16, 1], "num_classes": draw(st.integers(2, 10))}}
    else:
        doc["rnn_kind"] = draw(st.sampled_from(["simple", "lstm", "gru"]))
        doc["rnn_units"] = draw(st.integers(1, 64))
        doc["sequence_length"] = draw(st.integers(1, 100))
        if draw(st.booleans()):
            doc["embedding_dim"] = draw(st.integers(1, 32))
            doc["dataset"] = {"name": "randomset_sequence", "args": {"num_classes": draw(st.integers(2, 80))}}
        else:
            doc["dataset"] = {"name": "randomset_sequence", "args": {"feature_dim": draw(st.integers(1, 32))}}
    return doc


@settings(max_examples=150, deadline=None)
@given(model_docs())
def test_round_trip(doc):
    spec = model_spec_from_dict(doc)
    again = parse_model_config(dump_model_config(spec))
    assert isinstance(again, ModelSpec)
    assert again == spec
