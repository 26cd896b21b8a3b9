import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grid_and_tiles
from ssta.attention import (
    EmptyRowError,
    block_sparse_attention,
    dense_attention,
    masked_oracle_attention,
    ssta_attention,
    ssta_masks,
    ssta_masks_from_seed,
    token_block_ids,
)
from ssta.grid import AttentionInputs, ConfigError, GridSpec, TileSpec, WindowSpec, generate_fixture
from ssta.masking import BlockMask, SstaConfig
from ssta.metrics import compare, density

TOL = 1e-5


def inputs_from_tokens(q, k, v, thw):
    """Build inputs from (heads, tokens, D) arrays laid out on grid ``thw``."""
    heads, _, d = q.shape
    shape = (heads, *thw, d)
    return AttentionInputs(*(np.asarray(x, np.float32).reshape(shape) for x in (q, k, v)))


def full_mask(heads, blocks):
    return BlockMask(np.ones((heads, blocks, blocks), dtype=bool), "combined")


def identity_mask(heads, blocks):
    return BlockMask(np.broadcast_to(np.eye(blocks, dtype=bool), (heads, blocks, blocks)).copy(), "combined")


def random_mask(rng, heads, blocks, p=None):
    bits = rng.random((heads, blocks, blocks)) < (rng.uniform(0.05, 0.9) if p is None else p)
    bits[:, np.arange(blocks), np.arange(blocks)] = True
    return BlockMask(bits, "combined")


class TestDense:
    def test_single_token_returns_value(self):
        v = np.array([[[1.5, -2.0, 3.0, 0.25]]])
        x = inputs_from_tokens(np.ones((1, 1, 4)), np.ones((1, 1, 4)), v, (1, 1, 1))
        np.testing.assert_array_equal(dense_attention(x).o.reshape(1, 1, 4), v.astype(np.float32))

    def test_equal_logits_average_values(self):
        v = np.arange(12, dtype=float).reshape(1, 3, 4)
        x = inputs_from_tokens(np.zeros((1, 3, 4)), np.ones((1, 3, 4)), v, (1, 1, 3))
        out = dense_attention(x).o.reshape(3, 4)
        np.testing.assert_allclose(out, np.broadcast_to(v[0].mean(axis=0), (3, 4)), atol=1e-6)

    def test_large_logit_saturates_without_overflow(self):
        d = 4
        q = np.zeros((1, 2, d))
        q[0, :, 0] = 1000.0 * math.sqrt(d)
        k = np.zeros((1, 2, d))
        k[0, 1, 0] = 1.0  # logit 1000 for key 1, 0 for key 0
        v = np.array([[[0.0, 0, 0, 0], [1.0, 2, 3, 4]]])
        out = dense_attention(inputs_from_tokens(q, k, v, (1, 1, 2))).o.reshape(2, d)
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, np.tile(v[0, 1], (2, 1)), atol=1e-6)

    def test_matches_loop_reference(self, small_inputs):
        q, k, v = (t.astype(np.float64) for t in small_inputs.tokens())
        d = q.shape[-1]
        ref = np.empty_like(q)
        for h in range(q.shape[0]):
            for i in range(q.shape[1]):
                logits = np.array([q[h, i] @ k[h, j] for j in range(k.shape[1])]) / math.sqrt(d)
                w = np.exp(logits - logits.max())
                ref[h, i] = (w[:, None] * v[h]).sum(axis=0) / w.sum()
        got = dense_attention(small_inputs).o.reshape(ref.shape)
        np.testing.assert_allclose(got, ref, atol=1e-6)


class TestOracle:
    def test_hand_softmax_four_tokens(self):
        # two blocks of two tokens on a 1x1x4 line; identity mask keeps attention inside each block
        q = np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]])
        k = np.array([[[1.0, 0.0], [0.0, 2.0], [1.0, -1.0], [0.5, 0.5]]])
        v = np.array([[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [-1.0, 3.0]]])
        x = inputs_from_tokens(q, k, v, (1, 1, 4))
        tiles = TileSpec(1, 1, 2)
        out = masked_oracle_attention(x, identity_mask(1, 2), tiles).o.reshape(4, 2)
        s = 1 / math.sqrt(2)
        expected = []
        for i, (lo, hi) in enumerate([(0, 2), (0, 2), (2, 4), (2, 4)]):
            logits = [s * float(q[0, i] @ k[0, j]) for j in range(lo, hi)]
            w = [math.exp(z) for z in logits]
            expected.append([sum(wj * v[0, lo + j, c] for j, wj in enumerate(w)) / sum(w) for c in range(2)])
        np.testing.assert_allclose(out, np.array(expected), atol=1e-6)

    def test_full_mask_is_dense(self, small_inputs, small_tiles):
        blocks = small_tiles.block_count(small_inputs.grid)
        out = masked_oracle_attention(small_inputs, full_mask(2, blocks), small_tiles)
        assert compare(out, dense_attention(small_inputs)).max_abs <= TOL

    def test_block_ids(self):
        grid = GridSpec(1, 2, 2, 4, 1)
        ids = token_block_ids(grid, TileSpec(1, 2, 2))
        assert ids.tolist() == [0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]


class TestBlockSparse:
    @settings(max_examples=40)
    @given(grid_and_tiles(max_extent=6, max_heads=3, dims=(4, 8, 16)), st.integers(0, 2**16))
    def test_matches_oracle(self, case, seed):
        grid, tiles = case
        x = generate_fixture(grid, seed)
        blocks = tiles.block_count(grid)
        mask = random_mask(np.random.default_rng(seed), grid.heads, blocks)
        sparse = block_sparse_attention(x, mask, tiles, kv_chunk_blocks=1 + seed % 3)
        oracle = masked_oracle_attention(x, mask, tiles)
        assert compare(sparse, oracle).max_abs <= TOL
        assert sparse.stats.total_macs == density(mask, grid, tiles).sparse_macs

    def test_full_mask_is_dense(self, small_inputs, small_tiles):
        blocks = small_tiles.block_count(small_inputs.grid)
        out = block_sparse_attention(small_inputs, full_mask(2, blocks), small_tiles)
        assert compare(out, dense_attention(small_inputs)).max_abs <= TOL

    def test_half_density_halves_macs(self):
        grid = GridSpec(1, 2, 4, 4, 8)
        tiles = TileSpec(1, 2, 2)
        blocks = tiles.block_count(grid)
        assert blocks == 8
        bits = np.zeros((1, 8, 8), dtype=bool)
        for i in range(8):
            bits[0, i, [(i + j) % 8 for j in range(4)]] = True
        mask = BlockMask(bits, "combined")
        out = block_sparse_attention(generate_fixture(grid, 3), mask, tiles)
        dense_macs = density(full_mask(1, 8), grid, tiles).sparse_macs
        assert 2 * out.stats.total_macs == dense_macs
        assert out.stats.block_pairs == 32

    @given(grid_and_tiles(max_extent=4, max_heads=2), st.integers(0, 1000))
    def test_output_within_value_hull(self, case, seed):
        # softmax weights are convex, so each output coordinate lies between the value extremes
        grid, tiles = case
        x = generate_fixture(grid, seed)
        mask = random_mask(np.random.default_rng(seed), grid.heads, tiles.block_count(grid))
        o = block_sparse_attention(x, mask, tiles).o
        v = x.v.reshape(grid.heads, -1, grid.head_dim)
        o = o.reshape(v.shape)
        assert (o <= v.max(axis=1, keepdims=True) + 1e-6).all()
        assert (o >= v.min(axis=1, keepdims=True) - 1e-6).all()

    def test_key_permutation_within_block_is_transparent(self):
        grid = GridSpec(1, 2, 4, 4, 8)
        tiles = TileSpec(2, 2, 2)
        x = generate_fixture(grid, 5)
        mask = random_mask(np.random.default_rng(1), 1, tiles.block_count(grid), p=0.5)
        base = block_sparse_attention(x, mask, tiles).o
        # swap two tokens that share a block: (t0, y0, x0) and (t1, y1, x1)
        k, v = x.k.copy(), x.v.copy()
        for t in (k, v):
            t[0, 0, 0, 0], t[0, 1, 1, 1] = t[0, 1, 1, 1].copy(), t[0, 0, 0, 0].copy()
        swapped = block_sparse_attention(AttentionInputs(x.q, k, v), mask, tiles).o
        np.testing.assert_allclose(swapped, base, atol=1e-6)

    def test_threads_agree(self, small_inputs, small_tiles):
        mask = random_mask(np.random.default_rng(2), 2, small_tiles.block_count(small_inputs.grid))
        one = block_sparse_attention(small_inputs, mask, small_tiles, threads=1)
        many = block_sparse_attention(small_inputs, mask, small_tiles, threads=3)
        assert compare(one, many).max_abs <= 1e-6
        assert one.stats == many.stats

    def test_single_thread_is_bitwise_reproducible(self, small_inputs, small_tiles):
        mask = random_mask(np.random.default_rng(4), 2, small_tiles.block_count(small_inputs.grid))
        a = block_sparse_attention(small_inputs, mask, small_tiles).o
        b = block_sparse_attention(small_inputs, mask, small_tiles).o
        assert a.tobytes() == b.tobytes()

    def test_empty_row_rejected(self, small_inputs, small_tiles):
        blocks = small_tiles.block_count(small_inputs.grid)
        bits = np.ones((2, blocks, blocks), dtype=bool)
        bits[1, 3] = False
        with pytest.raises(EmptyRowError, match=r"\(head 1, block 3\)"):
            block_sparse_attention(small_inputs, BlockMask(bits, "combined"), small_tiles)
        with pytest.raises(EmptyRowError):
            masked_oracle_attention(small_inputs, BlockMask(bits, "combined"), small_tiles)

    def test_block_count_mismatch_rejected(self, small_inputs, small_tiles):
        with pytest.raises(ConfigError, match="blocks"):
            block_sparse_attention(small_inputs, full_mask(2, 3), small_tiles)

    def test_sta_mask_broadcasts_over_heads(self, small_inputs, small_tiles):
        from ssta.masking import sta_mask

        mask = sta_mask(small_tiles, small_inputs.grid, WindowSpec(1, 1, 1))
        a = block_sparse_attention(small_inputs, mask, small_tiles)
        b = masked_oracle_attention(small_inputs, mask, small_tiles)
        assert compare(a, b).max_abs <= TOL


class TestSsta:
    def test_vacuous_masks_reduce_to_dense(self, small_inputs, small_tiles):
        grid = small_inputs.grid
        block_grid = small_tiles.block_grid(grid)
        cfg = SstaConfig(top_k=small_tiles.block_count(grid), window=WindowSpec.full(block_grid))
        out, combined, _ = ssta_attention(small_inputs, small_tiles, cfg)
        assert combined.bits.all()
        assert compare(out, dense_attention(small_inputs)).max_abs <= TOL

    def test_union_with_full_window_is_dense(self, small_inputs, small_tiles):
        block_grid = small_tiles.block_grid(small_inputs.grid)
        cfg = SstaConfig(top_k=1, window=WindowSpec.full(block_grid), combine_mode="union")
        out, combined, _ = ssta_attention(small_inputs, small_tiles, cfg)
        assert combined.bits.all()
        assert compare(out, dense_attention(small_inputs)).max_abs <= TOL

    def test_identity_mask_on_clustered_fixture(self):
        # every block holds copies of one key; with a 1-block window only the diagonal survives
        tiles = TileSpec(1, 2, 2)
        centres = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        k = np.repeat(centres, 4, axis=0)[None]
        q = k.copy()
        v = np.random.default_rng(0).normal(size=(1, 8, 4))
        x = inputs_from_tokens(q, k, v, (2, 2, 2))
        cfg = SstaConfig(lambda_=1.0, beta=0.0, top_k=1, window=WindowSpec(1, 1, 1))
        out, combined, _ = ssta_attention(x, tiles, cfg)
        assert combined.bits[0].tolist() == [[True, False], [False, True]]
        per_block = v[0].reshape(2, 4, 4).mean(axis=1)
        np.testing.assert_allclose(out.o.reshape(2, 4, 4), np.repeat(per_block[:, None], 4, axis=1), atol=1e-6)

    def test_masks_are_deterministic(self, small_inputs, small_tiles):
        a = ssta_masks(small_inputs, small_tiles, SstaConfig(top_k=3))
        b = ssta_masks(small_inputs, small_tiles, SstaConfig(top_k=3))
        for x, y in zip(a[:3], b[:3]):
            assert x.equals(y)

    def test_streaming_masks_match_in_memory(self, small_grid, small_tiles):
        cfg = SstaConfig(top_k=3, combine_mode="union")
        mem = ssta_masks(generate_fixture(small_grid, 9, "unit-sphere"), small_tiles, cfg)
        streamed = ssta_masks_from_seed(small_grid, small_tiles, cfg, 9, "unit-sphere")
        for x, y in zip(mem[:3], streamed[:3]):
            assert x.equals(y)
        np.testing.assert_array_equal(mem[3].importance, streamed[3].importance)

    def test_sparse_matches_oracle_on_ssta_mask(self, small_inputs, small_tiles):
        out, combined, _ = ssta_attention(small_inputs, small_tiles, SstaConfig(top_k=2))
        oracle = masked_oracle_attention(small_inputs, combined, small_tiles)
        assert compare(out, oracle).max_abs <= TOL
