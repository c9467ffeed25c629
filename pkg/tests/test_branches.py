import numpy as np
import pytest
import torch

from conftest import rel_err
from ccreid.branches import (ROW_RANGES, branch_matrices, branch_row_mask,
                             partition, pool_matrix)


def overlap_pool_oracle(n_in, n_out):
    """Interval-overlap pooling weights recomputed with plain float loops."""
    w = np.zeros((n_out, n_in))
    step = n_in / n_out
    for i in range(n_out):
        lo, hi = i * step, (i + 1) * step
        for j in range(n_in):
            ov = min(hi, j + 1) - max(lo, j)
            if ov > 0:
                w[i, j] = ov / step
    return w


class TestPooling:
    @pytest.mark.parametrize("n_in,n_out", [(7, 6), (6, 7), (3, 7), (2, 7),
                                            (7, 7), (5, 3), (28, 7)])
    def test_rows_sum_to_one(self, n_in, n_out):
        w = pool_matrix(n_in, n_out)
        assert torch.allclose(w.sum(dim=1), torch.ones(n_out, dtype=torch.float64),
                              atol=0, rtol=0)

    @pytest.mark.parametrize("n_in,n_out", [(7, 6), (6, 7), (3, 7), (2, 7)])
    def test_matches_loop_oracle(self, n_in, n_out):
        w = pool_matrix(n_in, n_out).numpy()
        assert np.allclose(w, overlap_pool_oracle(n_in, n_out), atol=1e-12)

    def test_mass_conservation_7_to_6(self):
        # column sums of the 7->6 matrix are 6/7, so the pooled row-sum is
        # (6/7) times the original row-sum
        w = pool_matrix(7, 6)
        assert torch.allclose(w.sum(dim=0),
                              torch.full((7,), 6 / 7, dtype=torch.float64),
                              atol=1e-15)
        x = torch.arange(7, dtype=torch.float64)
        assert abs(float((w @ x).sum()) - 6 / 7 * float(x.sum())) < 1e-12


class TestPartition:
    def test_constant_map_stays_constant(self):
        x = torch.full((1, 3, 7, 7), 2.5, dtype=torch.float64)
        for branch in partition(x):
            assert branch.shape == (1, 3, 7, 7)
            assert torch.allclose(branch, torch.full_like(branch, 2.5))

    def test_row_gradient_orders_halves(self):
        # rows hold their own index; the lower half must average higher
        x = torch.arange(7, dtype=torch.float64).view(1, 1, 7, 1).expand(1, 1, 7, 7)
        branches = partition(x)
        f2, f3 = branches[1], branches[2]
        assert float(f2.mean()) < float(f3.mean())
        # derived oracle: apply the loop-computed weights directly
        rows6 = overlap_pool_oracle(7, 6) @ np.arange(7.0)
        assert rows6[:3].mean() < rows6[3:].mean()
        top = overlap_pool_oracle(3, 7) @ rows6[:3]
        bot = overlap_pool_oracle(3, 7) @ rows6[3:]
        assert abs(float(f2.mean()) - top.mean()) < 1e-12
        assert abs(float(f3.mean()) - bot.mean()) < 1e-12

    def test_third_ranges_tile_unit_interval(self):
        thirds = [ROW_RANGES[b] for b in ("F4", "F5", "F6")]
        assert thirds[0][0] == 0 and thirds[-1][1] == 1
        for (_, end), (start, _) in zip(thirds, thirds[1:]):
            assert end == start

    def test_rejects_too_few_rows(self):
        with pytest.raises(ValueError, match="at least 3"):
            partition(torch.zeros(1, 1, 2, 7, dtype=torch.float64))

    def test_partition_is_linear_with_exact_jacobian(self):
        # the Jacobian is the fixed row-mixing matrix; check one branch
        mats = branch_matrices(7)
        x = torch.randn(1, 1, 7, 1, dtype=torch.float64, requires_grad=True)
        y = partition(x.expand(1, 1, 7, 2))[4]  # F5
        y[0, 0, :, 0].sum().backward()
        analytic = x.grad.view(-1)
        expected = mats["F5"].sum(dim=0)
        assert rel_err(analytic, expected) < 1e-8

    def test_width_and_channels_untouched(self):
        x = torch.randn(2, 5, 7, 9, dtype=torch.float64)
        for branch in partition(x):
            assert branch.shape == (2, 5, 7, 9)


class TestRowMask:
    def test_bottom_half_of_224(self):
        assert branch_row_mask("F3", 224) == (112, 224)

    def test_middle_third_of_224(self):
        assert branch_row_mask("F5", 224) == (74, 150)

    @pytest.mark.parametrize("h", [6, 7, 64, 224])
    def test_whole_image(self, h):
        assert branch_row_mask("F1", h) == (0, h)

    def test_unknown_branch(self):
        with pytest.raises(ValueError, match="unknown branch"):
            branch_row_mask("F7", 64)

    @pytest.mark.parametrize("h", [6, 13, 64, 224])
    def test_granularity_masks_cover_image(self, h):
        for group in (("F2", "F3"), ("F4", "F5", "F6")):
            rows = set()
            for bid in group:
                lo, hi = branch_row_mask(bid, h)
                rows.update(range(lo, hi))
            assert rows == set(range(h))
