import numpy as np
import pytest

from conftest import random_cell
from graphmem.errors import ConfigurationError
from graphmem.memory_maintenance import (
    MaintenanceConfig,
    maintenance_step,
    merge_similar_centroids,
    reset_dead_centroids,
    update_usage,
    write_back,
)
from oracles import oracle_write_back


def _unit(v):
    return v / np.linalg.norm(v)


def test_write_back_high_momentum_keeps_directions(rng):
    cell = random_cell(rng, momentum=30.0)
    before = cell.bank.centroids.data.copy()
    write_back(cell.bank, rng.normal(size=(6, 8)), rng.dirichlet(np.ones(4), size=6))
    assert np.abs(cell.bank.centroids.data - before).max() <= 1e-9
    assert (cell.bank.age == 1).all()


def test_write_back_zero_momentum_assigns_mean(rng):
    cell = random_cell(rng, momentum=-30.0)
    before = cell.bank.centroids.data.copy()
    states = rng.normal(size=(5, 8))
    w = np.zeros((5, 4))
    w[:, 3] = 1.0
    write_back(cell.bank, states, w)
    after = cell.bank.centroids.data
    np.testing.assert_allclose(after[3], _unit(states.mean(axis=0)), atol=1e-9)
    for i in range(3):  # unassigned slots keep their direction exactly
        np.testing.assert_allclose(after[i], before[i], atol=1e-9)


def test_write_back_matches_group_by_oracle(rng):
    for _ in range(10):
        cell = random_cell(rng, momentum=float(rng.normal()))
        states = rng.normal(size=(12, 8))
        w = rng.dirichlet(np.ones(4), size=12)
        expected = oracle_write_back(cell.bank.centroids.data,
                                     cell.bank.momentum.data[0, 0], states, w)
        write_back(cell.bank, states, w)
        assert np.abs(cell.bank.centroids.data - expected).max() <= 1e-10


def test_write_back_unit_norm_invariant(rng):
    cell = random_cell(rng, momentum=0.0)
    for _ in range(5):
        write_back(cell.bank, rng.normal(size=(9, 8)),
                   rng.dirichlet(np.ones(4), size=9))
        norms = np.linalg.norm(cell.bank.centroids.data, axis=1)
        assert np.abs(norms - 1.0).max() <= 1e-6


def test_update_usage_limits(rng):
    cell = random_cell(rng)
    before = cell.bank.usage.copy()
    w = rng.dirichlet(np.ones(4), size=6)
    update_usage(cell.bank, w, rho=1.0)
    np.testing.assert_array_equal(cell.bank.usage, before)
    update_usage(cell.bank, w, rho=0.0)
    np.testing.assert_allclose(cell.bank.usage, w.mean(axis=0), atol=1e-15)


def test_update_usage_geometric_convergence(rng):
    cell = random_cell(rng)
    cell.bank.usage = np.array([0.9, 0.05, 0.03, 0.02])
    uniform = np.full((8, 4), 0.25)
    rho = 0.9
    start_gap = np.abs(cell.bank.usage - 0.25).max()
    for k in range(1, 21):
        update_usage(cell.bank, uniform, rho=rho)
        gap = np.abs(cell.bank.usage - 0.25).max()
        assert abs(gap - start_gap * rho ** k) <= 1e-12


def test_reset_noop_when_healthy(rng):
    cell = random_cell(rng)
    count = reset_dead_centroids(cell.bank, rng.normal(size=(4, 8)), 1e-3, rng)
    assert count == 0


def test_reset_single_dead_slot_uses_batch_sample(rng):
    cell = random_cell(rng, f=16, h=8)
    usage = np.full(16, 0.1)
    usage[5] = 0.0
    cell.bank.usage = usage
    cell.bank.age = np.full(16, 7, dtype=np.int64)
    pool = rng.normal(size=(40, 8))
    count = reset_dead_centroids(cell.bank, pool, 1e-3, rng)
    assert count == 1
    slot = cell.bank.centroids.data[5]
    assert abs(np.linalg.norm(slot) - 1.0) <= 1e-9
    # replacement is one of the normalized pool rows
    normalized = pool / np.linalg.norm(pool, axis=1, keepdims=True)
    assert np.abs(normalized - slot).sum(axis=1).min() <= 1e-9
    assert cell.bank.usage[5] == 1.0 / 16
    assert cell.bank.age[5] == 0
    assert (cell.bank.age != 0).sum() == 15


def test_reset_majority_dead_takes_random_branch(rng):
    cell = random_cell(rng, f=16, h=8)
    usage = np.full(16, 0.1)
    usage[:10] = 0.0  # 10 of 16 dead: more than half
    cell.bank.usage = usage
    pool = rng.normal(size=(3, 8))  # pool too small for 10 anyway
    count = reset_dead_centroids(cell.bank, pool, 1e-3, rng)
    assert count == 10
    normalized = pool / np.linalg.norm(pool, axis=1, keepdims=True)
    for i in range(10):
        # random directions: none should coincide with a pool row
        assert np.abs(normalized - cell.bank.centroids.data[i]).sum(axis=1).min() > 1e-6


def test_reset_empty_pool_falls_back_to_random(rng):
    cell = random_cell(rng, f=16, h=8)
    usage = np.full(16, 0.1)
    usage[2] = 0.0
    cell.bank.usage = usage
    count = reset_dead_centroids(cell.bank, None, 1e-3, rng)
    assert count == 1
    assert abs(np.linalg.norm(cell.bank.centroids.data[2]) - 1.0) <= 1e-9


def test_merge_skips_below_threshold(rng):
    cell = random_cell(rng)
    cell.bank.age = np.full(4, 200, dtype=np.int64)
    # random unit vectors in 8-d are far from cosine 0.95
    assert merge_similar_centroids(cell.bank, 0.95, 100, rng) == 0


def _with_duplicate(rng, ages, usages):
    cell = random_cell(rng, f=4, h=8)
    c = cell.bank.centroids.data.copy()
    c[2] = c[0]  # exact duplicate pair (0, 2)
    cell.bank.centroids.assign(c)
    cell.bank.age = np.array(ages, dtype=np.int64)
    cell.bank.usage = np.array(usages, dtype=np.float64)
    return cell


def test_merge_respects_cooldown(rng):
    cell = _with_duplicate(rng, ages=[200, 200, 50, 200],
                           usages=[0.3, 0.2, 0.1, 0.4])
    assert merge_similar_centroids(cell.bank, 0.95, 100, rng,
                                   rng.normal(size=(10, 8))) == 0


def test_merge_replaces_lower_usage_member(rng):
    cell = _with_duplicate(rng, ages=[200, 200, 200, 200],
                           usages=[0.3, 0.2, 0.1, 0.4])
    kept = cell.bank.centroids.data[0].copy()
    count = merge_similar_centroids(cell.bank, 0.95, 100, rng,
                                    rng.normal(size=(10, 8)))
    assert count == 1
    np.testing.assert_array_equal(cell.bank.centroids.data[0], kept)
    assert np.abs(cell.bank.centroids.data[2] - kept).max() > 1e-3
    assert cell.bank.usage[2] == 0.25 and cell.bank.age[2] == 0
    assert cell.bank.usage[0] == 0.3 and cell.bank.age[0] == 200


def test_maintenance_step_composition_and_order(rng):
    # one dead slot (3) and one mature duplicate pair (0, 2)
    cell = _with_duplicate(rng, ages=[200, 200, 200, 200],
                           usages=[0.3, 0.2, 0.1, 0.0])
    config = MaintenanceConfig()
    report = maintenance_step(cell.bank, rng.normal(size=(20, 8)), config, rng)
    assert (report.resets, report.merges) == (1, 1)
    assert report.dead_before == 1
    assert cell.bank.age[3] == 0 and cell.bank.usage[3] == 0.25


def test_maintenance_dead_duplicate_handled_by_reset_only(rng):
    # slot 2 is both dead and the duplicate of slot 0: the reset phase
    # replaces it and its fresh age exempts it from the merge phase
    cell = _with_duplicate(rng, ages=[200, 200, 200, 200],
                           usages=[0.3, 0.2, 0.0, 0.4])
    config = MaintenanceConfig()
    report = maintenance_step(cell.bank, rng.normal(size=(20, 8)), config, rng)
    assert (report.resets, report.merges) == (1, 0)


def test_maintenance_idempotent_on_healthy_bank(rng):
    cell = random_cell(rng)
    cell.bank.age = np.full(4, 500, dtype=np.int64)
    config = MaintenanceConfig()
    first = maintenance_step(cell.bank, rng.normal(size=(10, 8)), config, rng)
    second = maintenance_step(cell.bank, rng.normal(size=(10, 8)), config, rng)
    assert (first.resets, first.merges) == (0, 0)
    assert (second.resets, second.merges) == (0, 0)


def test_maintenance_config_validation():
    with pytest.raises(ConfigurationError):
        MaintenanceConfig(rho=1.0).validate()
    with pytest.raises(ConfigurationError):
        MaintenanceConfig(delta_dead=0.0).validate()
    with pytest.raises(ConfigurationError):
        MaintenanceConfig(tau_merge=1.5).validate()
