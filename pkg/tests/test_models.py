import numpy as np
import pytest

from maddc.models import (BusEngineModel, EntryExitModel, build_desk_storable,
                          conditional_logit_share, inclusive_value)
from maddc.models.storable import storable_flow_utility


@pytest.fixture(scope="module")
def bus_model():
    return BusEngineModel()


@pytest.fixture(scope="module")
def ee_model():
    return EntryExitModel(m_points=3, beta=0.95)


class TestBusEngine:
    def test_grid(self, bus_model):
        assert bus_model.n_states == 201
        assert bus_model.mileage[1] - bus_model.mileage[0] == 0.125
        assert bus_model.mileage[-1] == 25.0

    def test_flow_utilities(self, bus_model):
        assert bus_model.flow_utility(bus_model.state_index(0.0), 1) == 0.0
        assert bus_model.flow_utility(0, 0) == -2.0
        assert bus_model.flow_utility(77, 0) == -2.0
        assert abs(bus_model.flow_utility(bus_model.state_index(25.0), 1) - (-3.75)) <= 1e-15

    def test_cap_state_absorbs_under_maintain(self, bus_model):
        row = bus_model.transition_row(bus_model.state_index(25.0), 1)
        assert row[-1] == 1.0 and np.all(row[:-1] == 0.0)

    def test_replacement_rows_identical(self, bus_model):
        kern = bus_model.per_action_kernels()[0]
        assert np.max(np.abs(kern.matrix - kern.matrix[0])) == 0.0

    def test_rows_telescope_to_one(self, bus_model):
        for kern in bus_model.per_action_kernels():
            assert np.max(np.abs(kern.matrix.sum(axis=1) - 1.0)) <= 1e-14

    def test_no_mileage_decrease_under_maintain(self, bus_model):
        keep = bus_model.per_action_kernels()[1].matrix
        for i in range(bus_model.n_states):
            assert np.all(keep[i, :i] == 0.0)

    def test_off_grid_mileage_rejected(self, bus_model):
        with pytest.raises(ValueError):
            bus_model.state_index(0.1)


class TestEntryExit:
    def test_state_count(self, ee_model):
        assert ee_model.n_states == 2 * 3**5

    def test_inactive_payoff_zero(self, ee_model):
        flows = ee_model.flow_utility_matrix()
        assert np.all(flows[:, 0] == 0.0)

    def test_entry_cost_switch(self, ee_model):
        flows = ee_model.flow_utility_matrix()
        nz = ee_model.block
        z4 = ee_model.grid.points[:nz, 4]
        gap = flows[nz:, 1] - flows[:nz, 1]  # incumbent minus entrant, same (z, w)
        assert np.max(np.abs(gap - (1.0 + z4))) <= 1e-12

    def test_parameter_arithmetic(self, ee_model):
        # z = 0, w = 0, incumbent staying active: 0.5 * 1 - 1.5 = -1.0
        assert abs(ee_model.profit([0, 0, 0, 0], 0.0, 1, 1) - (-1.0)) <= 1e-14
        assert ee_model.profit([0.3, -1, 2, 0.7], 1.2, 0, 0) == 0.0
        # profit method agrees with the grid flow matrix
        flows = ee_model.flow_utility_matrix()
        for x in (0, ee_model.block + 5, ee_model.n_states - 1):
            lag, z = ee_model.grid.points[x, 0], ee_model.grid.points[x, 1:5]
            w = ee_model.grid.points[x, 5]
            assert abs(ee_model.profit(z, w, int(lag), 1) - flows[x, 1]) <= 1e-12

    def test_monotone_in_productivity_when_margin_positive(self, ee_model):
        flows = ee_model.flow_utility_matrix()
        nz = ee_model.block
        pts = ee_model.grid.points[nz:]
        z1, z2, w = pts[:, 1], pts[:, 2], pts[:, 5]
        margin = 0.5 + z1 - z2
        # group states sharing (z1..z4), compare along the w axis
        m = ee_model.m_points
        block = flows[nz:, 1].reshape(m, m, m, m, m)
        margin_grid = margin.reshape(m, m, m, m, m)[:, :, 0, 0, 0]
        diffs = np.diff(block, axis=4)
        for i in range(m):
            for j in range(m):
                if margin_grid[i, j] > 0:
                    assert np.all(diffs[i, j] > 0)

    def test_kronecker_operator_matches_dense(self, rng):
        model = EntryExitModel(m_points=3, beta=0.9)
        n = model.n_states
        probs = rng.random((n, 2)) + 0.05
        probs /= probs.sum(axis=1, keepdims=True)
        op = model.build_policy_operator(probs)
        dense = model.mixed_kernel_dense(probs)
        v = rng.standard_normal(n)
        assert np.max(np.abs(op.apply(v) - 0.9 * dense.matvec(v))) <= 1e-13
        assert np.max(np.abs(op.apply_adjoint(v) - 0.9 * dense.rmatvec(v))) <= 1e-13

    def test_per_action_kernels_match_expected_values(self, rng):
        model = EntryExitModel(m_points=2, beta=0.9)
        v = rng.standard_normal(model.n_states)
        kernels = model.per_action_kernels()
        direct = np.column_stack([k.matvec(v) for k in kernels])
        assert np.max(np.abs(model.expected_values(v) - direct)) <= 1e-13

    def test_dense_cap_guard(self):
        model = EntryExitModel(m_points=7)
        with pytest.raises(ValueError, match="cap"):
            model.per_action_kernels()


class TestInclusiveValue:
    def test_single_product_zero_utility(self):
        assert inclusive_value(np.array([[0.0]]), theta5=1.0, xi=[0.0],
                               delta=[0.0], j=5) == 0.0

    def test_identical_products_add_log_n(self):
        prices = np.full((4, 1), 2.0)
        out = inclusive_value(prices, theta5=-0.5, xi=[0.0, 0.0, 0.0, 0.0][:4],
                              delta=[0.0], j=0)
        assert abs(out - (-1.0 + np.log(4))) <= 1e-14

    def test_three_products_high_precision(self):
        # utilities (-1, 0, 2) via theta5 = 1 and prices as the utilities
        prices = np.array([[-1.0], [0.0], [2.0]])
        out = inclusive_value(prices, theta5=1.0, xi=[0, 0, 0], delta=[0.0], j=0)
        import mpmath
        expected = float(mpmath.log(mpmath.exp(-1) + 1 + mpmath.exp(2)))
        assert abs(out - expected) <= 1e-14

    def test_empty_choice_set(self):
        with pytest.raises(ValueError, match="no products"):
            inclusive_value(np.array([[np.nan]]), 1.0, [0.0], [0.0], 3)


class TestConditionalLogitShare:
    def test_single_product(self):
        out = conditional_logit_share(np.array([[1.7]]), -0.2, [0.3], [0.1], 23)
        assert np.allclose(out, [1.0])

    def test_identical_pair(self):
        out = conditional_logit_share(np.array([[2.0], [2.0]]), -0.5,
                                      [0.0, 0.0], [0.0], 40)
        assert np.allclose(out, [0.5, 0.5], atol=1e-15)

    def test_closed_form_quarter_three_quarters(self):
        prices = np.array([[0.0], [np.log(3.0)]])
        out = conditional_logit_share(prices, 1.0, [0.0, 0.0], [0.0], 0)
        assert np.allclose(out, [0.25, 0.75], atol=1e-14)


class TestStorableUtility:
    def test_zero_everything(self):
        assert storable_flow_utility(0, 0, 0, 0.0, (1.0, 2.0, 3.0, 4.0)) == 0.0

    def test_purchase_indicator_adds_theta4(self):
        theta = (2.020, -13.768, -3.197, -4.184)
        base = storable_flow_utility(5, 10, 0, 0.0, theta)
        # same consumption and landing inventory, positive quantity
        bought = storable_flow_utility(5, 10 - 23, 23, 0.0, theta)
        assert abs((bought - base) - theta[3]) <= 1e-12

    def test_parameter_arithmetic(self):
        theta = (2.020, -13.768, -3.197, -4.184)
        out = storable_flow_utility(40, 40, 0, 0.0, theta)
        assert abs(out - (2.020 * 0.5 - 13.768 * 0.25)) <= 1e-12

    def test_bounds_identified_in_error(self):
        with pytest.raises(ValueError, match="inventory 10, quantity 0"):
            storable_flow_utility(11, 10, 0, 0.0, (0, 0, 0, 0))


class TestDeskStorable:
    def test_degenerate_prices_single_bin(self):
        model = build_desk_storable(iv_bins=1, i_max=80)
        assert model.n_states == 81
        assert model.iv_kernel.matrix.shape == (1, 1)

    def test_counting_three_bins(self):
        model = build_desk_storable(iv_bins=3, i_max=80)
        assert model.n_states == 27 * 81 == 2187

    def test_paper_scale_count(self):
        model = build_desk_storable(iv_bins=5, i_max=80)
        assert model.n_states == 5**3 * 81 == 10125

    def test_kernel_factorizes_as_iv_times_point_mass(self, rng):
        model = build_desk_storable(iv_bins=2, i_max=12)
        V = rng.standard_normal(model.n_states)
        consumption = model.consumption_update(V)
        kernels = model.per_action_kernels_for_consumption(consumption)
        for jq, j in enumerate(model.packs):
            mat = kernels[jq].matrix
            for x in range(model.n_states):
                iv, inv = model.split_index(x)
                landing = inv + j - consumption[x, jq]
                row = mat[x].reshape(model.n_iv, model.n_inv)
                assert np.array_equal(row[:, landing], model.iv_kernel.matrix[iv])
                mask = np.ones(model.n_inv, dtype=bool)
                mask[landing] = False
                assert np.all(row[:, mask] == 0.0)

    def test_consumption_ties_break_low(self):
        # theta = 0 makes every feasible consumption equally good
        model = build_desk_storable(iv_bins=1, i_max=10, theta=(0, 0, 0, 0),
                                    iv_means=(0.0, 0.0, 0.0))
        consumption = model.consumption_update(np.zeros(model.n_states))
        inv = np.arange(model.n_inv)
        for jq, j in enumerate(model.packs):
            expected = np.maximum(0, inv + j - model.i_max)
            assert np.array_equal(consumption[:, jq], expected)

    def test_all_kernels_row_stochastic(self):
        model = build_desk_storable(iv_bins=3, i_max=20)
        consumption = model.consumption_update(np.zeros(model.n_states))
        for kern in model.per_action_kernels_for_consumption(consumption):
            assert kern.matrix.min() >= 0.0
            assert np.max(np.abs(kern.matrix.sum(axis=1) - 1.0)) <= 1e-12


class TestParamFiles:
    def test_bus_from_params_file(self, tmp_path):
        from maddc.params import read_flat_params
        path = tmp_path / "bus.params"
        path.write_text("# bus engine\ntheta1 = -0.2\nbeta = 0.85\n")
        model = BusEngineModel.from_params(read_flat_params(path))
        assert model.theta1 == -0.2 and model.beta == 0.85
        assert model.theta2 == 1.0  # untouched default

    def test_entry_exit_from_params(self):
        model = EntryExitModel.from_params(
            {"m_points": "3", "theta_vp": "0.4, 1.1, -0.9", "beta": "0.9"})
        assert model.m_points == 3
        assert model.theta_vp == (0.4, 1.1, -0.9)
        assert model.beta == 0.9

    def test_desk_storable_from_params(self):
        from maddc.models import desk_storable_from_params
        model = desk_storable_from_params(
            {"iv_bins": "2", "i_max": "40", "theta": "1,-2,-3,-4"})
        assert model.n_states == 8 * 41
        assert model.theta == (1.0, -2.0, -3.0, -4.0)
