import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headwise.arrowkernel import (
    ArrowSpec,
    BlockMask,
    active_runs,
    aggregate_sparsity,
    build_arrow_mask,
    dense_flops,
    dense_tiled_attention,
    flops_count,
    sparse_attention_forward,
    sparsity_ratio,
    window_for_sparsity,
)
from headwise.tensor import AttentionDims, FullyMaskedRowError, attention_reference, relative_error


def enumerate_active_pairs(n_visual, n_text, block, window):
    """Count active (query, key) token pairs one pair at a time."""
    n = n_visual + n_text
    blk = [i // block for i in range(n)]
    text_block = set(blk[i] for i in range(n_visual, n))
    count = 0
    for i in range(n):
        for j in range(n):
            bi, bj = blk[i], blk[j]
            if bi in text_block or bj in text_block or abs(bi - bj) <= window:
                count += 1
    return count


def rel_err(x, ref):
    return relative_error(x, ref)


class TestArrowMask:
    def test_worked_example(self):
        dims = AttentionDims(1, 64, 512, 128)
        mask = build_arrow_mask(ArrowSpec(0, dims, 128))
        assert mask.active.shape == (5, 5)
        # 4 diagonal visual blocks + row 4 (5) + column 4 above it (4)
        assert mask.active.sum() == 13
        assert sparsity_ratio(mask) == pytest.approx(0.48, abs=1e-12)
        assert mask.active_positions() == enumerate_active_pairs(512, 128, 128, 0)

    def test_window_covering_sequence_is_full(self):
        dims = AttentionDims(1, 8, 100, 20)
        spec = ArrowSpec(10, dims, 16)
        assert build_arrow_mask(spec).active.all()
        assert build_arrow_mask(ArrowSpec(spec.max_window, dims, 16)).active.all()

    def test_no_text_gives_block_diagonal(self):
        dims = AttentionDims(1, 8, 64, 0)
        mask = build_arrow_mask(ArrowSpec(0, dims, 16))
        assert np.array_equal(mask.active, np.eye(4, dtype=bool))

    def test_mixed_block_is_dense(self):
        # block 0 holds 13 visual + 3 text tokens
        dims = AttentionDims(1, 8, 13, 4)
        mask = build_arrow_mask(ArrowSpec(0, dims, 16))
        assert mask.active.all()

    def test_text_first_mirrors(self):
        dims = AttentionDims(1, 8, 64, 16, text_first=True)
        mask = build_arrow_mask(ArrowSpec(0, dims, 16))
        assert mask.active[0].all() and mask.active[:, 0].all()
        assert mask.active[1:, 1:].sum() == 4

    def test_zero_block_rejected(self):
        with pytest.raises(ValueError):
            build_arrow_mask(ArrowSpec(0, AttentionDims(1, 8, 16, 4), 0))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 90), st.integers(0, 30), st.integers(1, 33), st.integers(0, 8))
    def test_matches_pairwise_enumeration(self, n_v, n_t, block, w):
        mask = build_arrow_mask(ArrowSpec(w, AttentionDims(1, 4, n_v, n_t), block))
        assert mask.active_positions() == enumerate_active_pairs(n_v, n_t, block, w)
        assert np.array_equal(mask.active, mask.active.T)
        if n_t:
            assert mask.active.any(axis=1).all()


class TestFlops:
    def test_dense_formula(self):
        assert flops_count(BlockMask.full(64, 16), 8) == 4 * 8 * 64 * 64 == 131072

    def test_worked_example_ratio(self):
        mask = build_arrow_mask(ArrowSpec(0, AttentionDims(1, 64, 512, 128), 128))
        assert flops_count(mask, 64) / dense_flops(640, 64) == pytest.approx(0.52, abs=1e-12)

    def test_block_diagonal_quarter(self):
        mask = build_arrow_mask(ArrowSpec(0, AttentionDims(1, 8, 4 * 32, 0), 32))
        assert flops_count(mask, 8) * 4 == dense_flops(128, 8)

    def test_ragged_counts_true_coverage(self):
        # 20 tokens, block 8: lengths 8, 8, 4
        mask = BlockMask(8, 20, np.eye(3, dtype=bool))
        assert mask.active_positions() == 64 + 64 + 16

    @pytest.mark.parametrize("n_v,n_t,block", [(256, 32, 32), (130, 7, 16), (17, 0, 4)])
    def test_monotone_in_window(self, n_v, n_t, block):
        dims = AttentionDims(1, 16, n_v, n_t)
        spec = ArrowSpec(0, dims, block)
        counts = [
            flops_count(build_arrow_mask(ArrowSpec(w, dims, block)), 16)
            for w in range(spec.max_window + 1)
        ]
        assert counts == sorted(counts)
        assert counts[-1] == dense_flops(n_v + n_t, 16)

    def test_aggregate_counts_cached_as_sparse(self):
        full = dense_flops(64, 8)
        assert sparsity_ratio(BlockMask.full(64, 16)) == 0.0
        # one cached head (0 flops) next to one full head
        assert aggregate_sparsity([0, full], [full, full]) == 0.5


class TestActiveRuns:
    def test_runs(self):
        row = np.array([1, 1, 0, 1, 0, 0, 1, 1], dtype=bool)
        assert active_runs(row) == [(0, 2), (3, 4), (6, 8)]
        assert active_runs(np.zeros(3, bool)) == []


def _inputs(n, d, seed):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, d)) for _ in range(3)]


class TestSparseForward:
    def test_all_active_matches_dense(self):
        q, k, v = _inputs(100, 16, 0)
        out = sparse_attention_forward(*(x.astype(np.float32) for x in (q, k, v)),
                                       BlockMask.full(100, 32))
        ref = attention_reference(q[None], k[None], v[None])[0]
        assert rel_err(out, ref) <= 1e-5

    def test_arrow_against_masked_float64_oracle(self):
        dims = AttentionDims(1, 32, 256, 32)
        q, k, v = _inputs(288, 32, 1)
        for w in (0, 1, 3):
            mask = build_arrow_mask(ArrowSpec(w, dims, 32))
            out = sparse_attention_forward(*(x.astype(np.float32) for x in (q, k, v)), mask)
            ref = attention_reference(q[None], k[None], v[None], mask)[0]
            assert rel_err(out, ref) <= 1e-5

    def test_single_block_per_row_equals_restricted_attention(self):
        n, b = 48, 16
        q, k, v = _inputs(n, 8, 2)
        pick = [2, 0, 1]
        active = np.zeros((3, 3), dtype=bool)
        active[np.arange(3), pick] = True
        out = sparse_attention_forward(q, k, v, BlockMask(b, n, active))
        for i, j in enumerate(pick):
            qs, ks, vs = q[i * b:(i + 1) * b], k[j * b:(j + 1) * b], v[j * b:(j + 1) * b]
            s = qs @ ks.T / np.sqrt(8)
            p = np.exp(s - s.max(axis=1, keepdims=True))
            expect = (p / p.sum(axis=1, keepdims=True)) @ vs
            np.testing.assert_allclose(out[i * b:(i + 1) * b], expect, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("n", [17, 64, 130])
    @pytest.mark.parametrize("block", [8, 32])
    def test_ragged_sizes(self, n, block):
        n_t = max(1, n // 9)
        dims = AttentionDims(1, 16, n - n_t, n_t)
        q, k, v = _inputs(n, 16, n)
        for w in (0, 1, 2):
            mask = build_arrow_mask(ArrowSpec(w, dims, block))
            out = sparse_attention_forward(*(x.astype(np.float32) for x in (q, k, v)), mask)
            ref = attention_reference(q[None], k[None], v[None], mask)[0]
            assert rel_err(out, ref) <= 1e-5

    def test_streaming_matches_two_pass_softmax(self):
        # with V = I the output is the probability matrix
        n = 70
        dims = AttentionDims(1, 8, 60, 10)
        q, k, _ = _inputs(n, 8, 5)
        mask = build_arrow_mask(ArrowSpec(1, dims, 8))
        probs = sparse_attention_forward(q, k, np.eye(n), mask, merge_runs=False)
        allowed = np.kron(mask.active, np.ones((8, 8), bool))[:n, :n]
        s = np.where(allowed, q @ k.T / np.sqrt(8), -np.inf)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        assert np.max(np.abs(probs - p)) <= 1e-6
        assert np.all(probs[~allowed] == 0)

    def test_merged_and_blockwise_agree(self):
        dims = AttentionDims(1, 16, 200, 20)
        q, k, v = (x.astype(np.float32) for x in _inputs(220, 16, 6))
        mask = build_arrow_mask(ArrowSpec(2, dims, 16))
        a = sparse_attention_forward(q, k, v, mask)
        b = sparse_attention_forward(q, k, v, mask, merge_runs=False)
        assert rel_err(a, b) <= 1e-6

    def test_threads_do_not_change_result(self):
        dims = AttentionDims(1, 16, 200, 20)
        q, k, v = (x.astype(np.float32) for x in _inputs(220, 16, 7))
        mask = build_arrow_mask(ArrowSpec(1, dims, 16))
        a = sparse_attention_forward(q, k, v, mask, threads=1)
        b = sparse_attention_forward(q, k, v, mask, threads=4)
        assert np.array_equal(a, b)

    def test_deterministic(self):
        dims = AttentionDims(1, 16, 64, 8)
        q, k, v = (x.astype(np.float32) for x in _inputs(72, 16, 8))
        mask = build_arrow_mask(ArrowSpec(0, dims, 16))
        assert np.array_equal(
            sparse_attention_forward(q, k, v, mask), sparse_attention_forward(q, k, v, mask)
        )

    def test_fully_masked_row(self):
        active = np.array([[True, False], [False, False]])
        q = np.ones((8, 2))
        with pytest.raises(FullyMaskedRowError):
            sparse_attention_forward(q, q, q, BlockMask(4, 8, active))

    def test_dense_tiled_baseline(self):
        q, k, v = _inputs(150, 16, 9)
        ref = attention_reference(q[None], k[None], v[None])[0]
        assert rel_err(dense_tiled_attention(q, k, v, 32), ref) <= 1e-12


class TestWindowSearch:
    def test_large_sequence_targets(self):
        dims = AttentionDims(1, 64, 4096, 512)
        for target in (0.25, 0.5, 0.75):
            w, s = window_for_sparsity(dims, 128, target)
            assert abs(s - target) <= 0.02
        assert window_for_sparsity(dims, 128, 0.0) == (31, 0.0)
