import json

import numpy as np
import pytest

from core.cp import cp_predict_batch
from core.errors import CheckpointError, CheckpointVersionError, ConfigError, ShapeMismatchError
from core.model import (
    JuliaModel, loss, checkpoint_to_dict, checkpoint_from_dict, save_checkpoint, load_checkpoint
)
from core.models import SparseTensor


def _assert_same_parameters(a: JuliaModel, b: JuliaModel):
    assert a.shape == b.shape and a.R == b.R and a.F == b.F
    for x, y in zip(a.cp.factors, b.cp.factors):
        np.testing.assert_array_equal(x, y)
    if a.head is None:
        assert b.head is None
    else:
        np.testing.assert_array_equal(a.head.flatten(), b.head.flatten())


class TestPrediction:
    def test_additive_blocks(self, small_model):
        idx = np.array([[0, 0, 0], [3, 4, 5], [1, 2, 3]])
        expected = cp_predict_batch(small_model.cp, idx) + small_model.head.predict_batch(idx)
        np.testing.assert_array_equal(small_model.predict_batch(idx), expected)

    def test_single_index(self, small_model):
        assert small_model.predict((1, 2, 3)) == small_model.predict_batch(np.array([[1, 2, 3]]))[0]
        with pytest.raises(ShapeMismatchError):
            small_model.predict((4, 0, 0))

    def test_cp_only_model(self):
        model = JuliaModel.initialize((3, 3), 2, 0, seed=1)
        assert model.head is None
        idx = np.array([[0, 1], [2, 2]])
        np.testing.assert_array_equal(model.predict_batch(idx), cp_predict_batch(model.cp, idx))

    def test_head_only_model(self):
        model = JuliaModel.initialize((3, 3), 0, 2, seed=1)
        assert model.R == 0
        idx = np.array([[0, 1], [2, 2]])
        np.testing.assert_array_equal(model.predict_batch(idx), model.head.predict_batch(idx))

    def test_empty_rank_split_rejected(self):
        with pytest.raises(ConfigError):
            JuliaModel.initialize((3, 3), 0, 0, seed=1)

    def test_cp_draw_independent_of_head_rank(self):
        with_head = JuliaModel.initialize((4, 5), 2, 3, seed=9)
        without = JuliaModel.initialize((4, 5), 2, 0, seed=9)
        for a, b in zip(with_head.cp.factors, without.cp.factors):
            np.testing.assert_array_equal(a, b)


class TestLoss:
    def test_plain_sum_of_squares(self, small_model):
        idx = np.array([[0, 0, 0], [1, 1, 1]])
        tensor = SparseTensor(small_model.shape, idx, [1.0, -1.0])
        residuals = small_model.predict_batch(idx) - tensor.values
        assert loss(small_model, tensor) == pytest.approx(float(np.sum(residuals ** 2)))

    def test_entry_list_and_empty(self, small_model):
        tensor = SparseTensor(small_model.shape, [[0, 1, 2]], [0.5])
        assert loss(small_model, [((0, 1, 2), 0.5)]) == loss(small_model, tensor)
        assert loss(small_model, []) == 0.0

    def test_threaded_partitions(self, small_model, rng):
        idx = np.array(list(np.ndindex(*small_model.shape)))
        tensor = SparseTensor(small_model.shape, idx, rng.standard_normal(len(idx)))
        serial = loss(small_model, tensor)
        assert loss(small_model, tensor, workers=4) == pytest.approx(serial, rel=1e-12)
        assert loss(small_model, tensor, workers=4, deterministic=False) == pytest.approx(serial, rel=1e-12)
        assert loss(small_model, tensor, workers=4) == loss(small_model, tensor, workers=4)


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path, small_model):
        path = tmp_path / "model.ckpt.json"
        save_checkpoint(small_model, path)
        back = load_checkpoint(path)
        _assert_same_parameters(small_model, back)
        idx = np.array([[1, 2, 3], [3, 4, 5]])
        np.testing.assert_array_equal(back.predict_batch(idx), small_model.predict_batch(idx))

    def test_cp_only_has_null_head_fields(self, tmp_path):
        model = JuliaModel.initialize((3, 4), 2, 0, seed=0)
        doc = checkpoint_to_dict(model)
        assert doc['F'] == 0
        assert doc['embeddings'] is None and doc['out_bias'] is None
        path = tmp_path / "cp.json"
        save_checkpoint(model, path)
        _assert_same_parameters(model, load_checkpoint(path))

    def test_unknown_version(self, small_model):
        doc = checkpoint_to_dict(small_model)
        doc['version'] = 2
        with pytest.raises(CheckpointVersionError) as info:
            checkpoint_from_dict(doc)
        assert info.value.version == 2
        assert "2" in str(info.value)

    def test_inconsistent_dimensions(self, small_model):
        doc = checkpoint_to_dict(small_model)
        doc['shape'] = [4, 5, 7]
        with pytest.raises(CheckpointError):
            checkpoint_from_dict(doc)

    def test_missing_field(self, small_model):
        doc = checkpoint_to_dict(small_model)
        del doc['cp_factors']
        with pytest.raises(CheckpointError):
            checkpoint_from_dict(doc)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    @pytest.mark.parametrize("block", ['cp', 'head'])
    def test_non_finite_model_not_saved(self, tmp_path, small_model, block):
        if block == 'cp':
            small_model.cp.factors[0][0, 0] = np.nan
        else:
            small_model.head.out_bias = np.inf
        path = tmp_path / "model.ckpt.json"
        with pytest.raises(CheckpointError, match="non-finite"):
            save_checkpoint(small_model, path)
        assert not path.exists()

    def test_document_is_plain_json(self, small_model):
        text = json.dumps(checkpoint_to_dict(small_model))
        assert json.loads(text)['version'] == 1
