import io

import numpy as np
import pytest

from gptensor.sptensor import (
    EntryBatch,
    FormatError,
    SparseTensor,
    balanced_sample,
    parse_coo,
    split_folds,
    write_coo,
)


def parse_text(text: str) -> SparseTensor:
    return parse_coo(io.StringIO(text))


class TestParse:
    def test_basic(self):
        t = parse_text("2 2 2\n0 0 1.5\n1 1 -2.0\n")
        assert t.dims == (2, 2)
        assert t.num_entries == 2
        np.testing.assert_array_equal(t.indices, [[0, 0], [1, 1]])
        np.testing.assert_array_equal(t.values, [1.5, -2.0])

    def test_comments_and_blanks(self):
        t = parse_text("# header next\n\n2 3 3\n# entry\n0 0 1.0\n")
        assert t.num_entries == 1

    def test_index_out_of_range(self):
        with pytest.raises(FormatError, match=r"index 2 out of range for mode 3"):
            parse_text("3 2 2 2\n0 0 2 1.0\n")

    def test_duplicate_index_names_line(self):
        with pytest.raises(FormatError, match=r"line 3: duplicate index"):
            parse_text("2 2 2\n0 0 1.0\n0 0 2.0\n")

    def test_too_few_modes(self):
        with pytest.raises(FormatError, match=r"K must be at least 2"):
            parse_text("1 5\n0 1.0\n")

    def test_malformed_entry(self):
        with pytest.raises(FormatError, match=r"line 2"):
            parse_text("2 2 2\n0 x 1.0\n")
        with pytest.raises(FormatError, match=r"line 2"):
            parse_text("2 2 2\n0 0\n")

    def test_missing_header(self):
        with pytest.raises(FormatError, match=r"missing header"):
            parse_text("# only comments\n")

    def test_garbage_lines_always_name_their_line(self):
        rng = np.random.default_rng(5)
        tokens = ["0", "1", "x", "1.5", "-1", "99", "", "0.0.0"]
        for trial in range(200):
            n_lines = int(rng.integers(1, 6))
            body = "\n".join(
                " ".join(rng.choice(tokens, size=rng.integers(0, 6)))
                for _ in range(n_lines)
            )
            text = "2 3 3\n" + body + "\n"
            try:
                parse_text(text)
            except FormatError as exc:
                assert "line " in str(exc)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        idx = np.unique(
            np.stack([rng.integers(0, 9, size=40), rng.integers(0, 7, size=40)], axis=1),
            axis=0,
        )
        t = SparseTensor(dims=(9, 7), indices=idx, values=rng.normal(size=idx.shape[0]))
        buf = io.StringIO()
        write_coo(t, buf)
        again = parse_text(buf.getvalue())
        np.testing.assert_array_equal(again.indices, t.indices)
        np.testing.assert_array_equal(again.values, t.values)
        assert again.dims == t.dims


class TestTensorValidation:
    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            SparseTensor(dims=(3, 3), indices=[[0, 0], [0, 0]], values=[1.0, 2.0])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            SparseTensor(dims=(2, 2), indices=[[0, 2]], values=[1.0])

    def test_needs_two_modes(self):
        with pytest.raises(ValueError, match="2 modes"):
            SparseTensor(dims=(4,), indices=np.zeros((0, 1), dtype=int), values=[])


def grid_tensor(nnz: int, dims=(10, 10), seed: int = 0) -> SparseTensor:
    rng = np.random.default_rng(seed)
    flat = rng.choice(dims[0] * dims[1], size=nnz, replace=False)
    idx = np.stack(np.unravel_index(flat, dims), axis=1)
    vals = rng.normal(size=nnz)
    vals[vals == 0] = 1.0
    return SparseTensor(dims=dims, indices=idx, values=vals)


class TestBalancedSample:
    def test_counts(self):
        t = grid_tensor(5)
        batch = balanced_sample(t, seed=1)
        assert len(batch) == 10
        assert int(np.sum(batch.targets == 0.0)) == 5

    def test_no_collisions(self):
        t = grid_tensor(20, seed=3)
        excluded = {(0, 0), (1, 1), (2, 2)}
        batch = balanced_sample(t, excluded=excluded, seed=5)
        keys = {tuple(map(int, row)) for row in batch.indices}
        assert len(keys) == len(batch)
        observed = {tuple(map(int, row)) for row in t.indices}
        zeros = keys - observed
        assert not (zeros & excluded)
        assert not (zeros & observed)

    def test_deterministic(self):
        t = grid_tensor(12, seed=7)
        a = balanced_sample(t, seed=42)
        b = balanced_sample(t, seed=42)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_exhausted_zero_space(self):
        t = SparseTensor(dims=(2, 2), indices=[[0, 0], [0, 1], [1, 0]], values=[1, 1, 1])
        with pytest.raises(ValueError, match="reduce the nonzero set"):
            balanced_sample(t, excluded={(1, 1)}, seed=0)

    def test_binary_maps_values_to_one(self):
        t = SparseTensor(dims=(3, 3), indices=[[0, 0], [1, 2]], values=[5.0, -2.0])
        batch = balanced_sample(t, seed=0, binary=True)
        assert set(np.unique(batch.targets)) == {0.0, 1.0}
        assert int(np.sum(batch.targets == 1.0)) == 2

    def test_enumeration_regime(self):
        # Observed plus excluded cells pass half the grid: the sampler must
        # enumerate the complement, not spin on rejections.
        t = grid_tensor(40, dims=(10, 10), seed=9)
        observed = {tuple(map(int, r)) for r in t.indices}
        excluded = set()
        for i in range(10):
            for j in range(10):
                if (i, j) not in observed and len(excluded) < 15:
                    excluded.add((i, j))
        batch = balanced_sample(t, excluded=excluded, seed=2)
        assert len(batch) == 80
        keys = {tuple(map(int, r)) for r in batch.indices}
        assert not (keys - observed) & excluded


class TestSplitFolds:
    def test_partition_identity(self):
        t = grid_tensor(10, seed=11)
        folds = split_folds(t, num_folds=5, zero_test_count=3, seed=1)
        assert len(folds) == 5
        test_nonzeros = []
        for fold in folds:
            nz = fold.test.indices[fold.test.targets != 0]
            assert nz.shape[0] == 2
            test_nonzeros.extend(map(tuple, nz.tolist()))
        assert len(set(test_nonzeros)) == 10

    def test_train_test_disjoint(self):
        t = grid_tensor(12, seed=13)
        for fold in split_folds(t, num_folds=3, zero_test_count=4, seed=2):
            train_keys = {tuple(map(int, r)) for r in fold.train.indices}
            test_keys = {tuple(map(int, r)) for r in fold.test.indices}
            assert not (train_keys & test_keys)
            # balanced training: half the train entries are sampled zeros
            assert int(np.sum(fold.train.targets == 0.0)) * 2 == len(fold.train)

    def test_deterministic(self):
        t = grid_tensor(9, seed=17)
        a = split_folds(t, num_folds=3, zero_test_count=2, seed=5)
        b = split_folds(t, num_folds=3, zero_test_count=2, seed=5)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.train.indices, fb.train.indices)
            np.testing.assert_array_equal(fa.test.indices, fb.test.indices)

    def test_insufficient_entries(self):
        t = grid_tensor(3, seed=19)
        with pytest.raises(ValueError, match="nonzero entries"):
            split_folds(t, num_folds=5, zero_test_count=1, seed=0)
        with pytest.raises(ValueError, match="num_folds"):
            split_folds(t, num_folds=1, zero_test_count=1, seed=0)


class TestEntryBatch:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            EntryBatch(indices=np.zeros((2, 2), dtype=int), targets=np.zeros(3))

    def test_binary_check(self):
        assert EntryBatch(indices=[[0, 0]], targets=[1.0]).is_binary()
        assert not EntryBatch(indices=[[0, 0]], targets=[0.5]).is_binary()

    def test_slices_view_canonical_order(self):
        batch = EntryBatch(indices=[[0, 0], [1, 1], [2, 2]], targets=[1.0, 2.0, 3.0])
        part = batch.slice(1, 3)
        assert len(part) == 2
        np.testing.assert_array_equal(part.targets, [2.0, 3.0])
