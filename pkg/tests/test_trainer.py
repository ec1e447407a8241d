"""Tests for trainer.py"""

import math

import numpy as np
import pytest

from ucr.config import HyperParams
from ucr.errors import DataError, TrainingError
from ucr.synthdata import StreamSpec, generate_stream
from ucr.trainer import (
    METRICS_COLUMNS,
    LrSchedule,
    MetricsLog,
    MetricsRow,
    TrainState,
    train_domain,
    train_stream,
)


@pytest.fixture
def domains():
    spec = StreamSpec(
        num_domains=2, ids_per_domain=4, samples_per_id=8, cameras_per_domain=2, d_in=8,
        eval_ids=0, num_unseen=0, noise=0.01, camera_shift=0.0, latent_dim=8, style_shift=0.0,
        seed=1,
    )
    return generate_stream(spec).train_domains()


@pytest.fixture
def hp():
    return HyperParams(
        hidden_dims=(16,),
        d_emb=8,
        epochs_per_domain=2,
        iters_per_epoch=3,
        warmup_epochs=1,
        lr=1e-3,
        batch_current=(4, 2),
        batch_old=(4, 2),
        rerank_k1=6,
        rerank_k2=3,
        dbscan_min_pts=3,
        n_neg=5,
    )


def _split_first_step(rows):
    """Separate the (epoch 0, iter 0) row, where online, momentum and frozen still agree."""
    first = [r for r in rows if r.epoch == 0 and r.iter == 0]
    assert len(first) == 1
    return first[0], [r for r in rows if r is not first[0]]


class TestLrSchedule:
    """Tests for the warm-up schedule."""

    def test_linear_warmup(self):
        """Test linear warmup."""
        schedule = LrSchedule(1.0, 4)
        assert [schedule(e) for e in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]

    def test_no_warmup(self):
        """Test no warmup."""
        assert LrSchedule(0.1, 0)(0) == 0.1


class TestMetricsLog:
    """Tests for MetricsLog."""

    def test_csv_round_trip(self, tmp_path):
        """Test csv round trip."""
        log = MetricsLog()
        log.append(MetricsRow(0, 0, 0, 1.5, 0.0, 0.0, 1.5, 1e-3, 4))
        log.record_skip(0, 1, 2e-3)
        path = tmp_path / "metrics.csv"
        log.write_csv(path)
        loaded = MetricsLog.read_csv(path)
        assert loaded.rows[0] == log.rows[0]
        assert loaded.rows[1].iter == -1
        assert math.isnan(loaded.rows[1].loss_overall)
        assert loaded.skipped_epochs == 1

    def test_header(self):
        """Test empty log CSV header."""
        assert MetricsLog().to_csv() == ",".join(METRICS_COLUMNS) + "\n"

    def test_rejects_foreign_csv(self, tmp_path):
        """Test rejects foreign csv."""
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            MetricsLog.read_csv(path)


class TestTrainDomain:
    """Tests for a single domain of training."""

    def test_first_domain(self, domains, hp):
        """Test first domain."""
        state = TrainState.initial(8, hp)
        train_domain(state, domains[0], hp)
        rows = state.metrics.rows
        assert len(rows) == hp.epochs_per_domain * hp.iters_per_epoch
        assert all(r.loss_old == 0.0 and r.loss_sim == 0.0 for r in rows)
        assert all(np.isfinite(r.loss_current) for r in rows)
        assert state.domain_index == 1
        assert state.encoders.frozen is not None
        np.testing.assert_array_equal(
            state.encoders.frozen.flat(), state.encoders.momentum.flat()
        )
        clusters = state.committed_clusters[0]
        assert clusters >= 1
        assert state.bank.num_old == clusters
        assert clusters <= len(state.memory) <= hp.k_mem * clusters
        assert {e.key[0] for e in state.memory.entries} == {0}

    def test_lr_follows_warmup(self, domains, hp):
        """Test lr follows warmup."""
        state = TrainState.initial(8, hp.replace(warmup_epochs=2))
        train_domain(state, domains[0], hp.replace(warmup_epochs=2))
        assert {r.lr for r in state.metrics.rows if r.epoch == 0} == {5e-4}
        assert {r.lr for r in state.metrics.rows if r.epoch == 1} == {1e-3}

    def test_no_clusters_aborts(self, domains, hp):
        """Test no clusters aborts."""
        hp = hp.replace(dbscan_min_pts=100)
        state = TrainState.initial(8, hp)
        with pytest.raises(TrainingError, match="no epoch produced any cluster"):
            train_domain(state, domains[0], hp)
        assert state.metrics.skipped_epochs == hp.epochs_per_domain

    def test_online_moves_and_momentum_lags(self, domains, hp):
        """Test the momentum encoder trails the online encoder before the snapshot."""
        state = TrainState.initial(8, hp)
        start = state.encoders.online.flat().copy()
        captured = {}

        def on_epoch_end(s):
            captured["online"] = s.encoders.online.flat().copy()
            captured["momentum"] = s.encoders.momentum.flat().copy()

        train_domain(state, domains[0], hp, on_epoch_end=on_epoch_end)
        online_step = np.linalg.norm(captured["online"] - start)
        momentum_step = np.linalg.norm(captured["momentum"] - start)
        assert online_step > 0
        assert momentum_step < online_step


class TestTrainStream:
    """Tests for the full lifelong loop."""

    def test_empty_stream(self, hp):
        """Test empty stream."""
        with pytest.raises(DataError):
            train_stream([], hp)

    def test_rehearsal_terms_active_on_second_domain(self, domains, hp):
        """Test rehearsal terms active on second domain."""
        result = train_stream(domains, hp)
        second = [r for r in result.metrics.rows if r.domain_index == 1]
        assert second
        first, rest = _split_first_step(second)
        assert first.loss_sim == 0.0
        assert all(r.loss_sim > 0 for r in rest)
        assert all(r.loss_old > 0 for r in second)
        assert result.state.domain_index == 2
        assert len(result.state.committed_clusters) == 2
        keys = {e.key[0] for e in result.state.memory.entries}
        assert keys == {0, 1}

    def test_deterministic(self, domains, hp):
        """Test same seed gives identical runs."""
        a = train_stream(domains, hp)
        b = train_stream(domains, hp)
        assert a.metrics.to_csv() == b.metrics.to_csv()
        np.testing.assert_array_equal(a.momentum.flat(), b.momentum.flat())

    def test_seed_changes_run(self, domains, hp):
        """Test seed changes run."""
        a = train_stream(domains, hp)
        b = train_stream(domains, hp.replace(seed=7))
        assert not np.array_equal(a.momentum.flat(), b.momentum.flat())

    def test_hooks(self, domains, hp):
        """Test evaluation and progress hooks."""
        steps, epochs = [], []

        def eval_hook(step, params):
            assert params.d_in == 8
            return [step]

        result = train_stream(
            domains,
            hp,
            eval_hook=eval_hook,
            on_domain_end=lambda step, state: steps.append(step),
            on_epoch_end=lambda state: epochs.append((state.domain_index, state.epoch)),
        )
        assert result.evaluations == [0, 1]
        assert steps == [0, 1]
        assert epochs == [(0, 0), (0, 1), (1, 0), (1, 1)]

    @pytest.mark.parametrize(
        "use_old,use_sim",
        [(False, False), (True, False), (False, True)],
    )
    def test_rehearsal_switches(self, domains, hp, use_old, use_sim):
        """Test rehearsal switches."""
        result = train_stream(domains, hp.replace(use_old=use_old, use_sim=use_sim))
        second = [r for r in result.metrics.rows if r.domain_index == 1]
        first, rest = _split_first_step(second)
        assert all((r.loss_old > 0) == use_old for r in second)
        assert first.loss_sim == 0.0
        assert all((r.loss_sim > 0) == use_sim for r in rest)

    @pytest.mark.parametrize("variant", ["cluster_only", "cluster+hard", "cluster+cam"])
    def test_variants(self, domains, hp, variant):
        """Test every baseline variant trains."""
        result = train_stream(domains, hp.replace(baseline_variant=variant))
        assert all(np.isfinite(r.loss_overall) for r in result.metrics.rows)

    @pytest.mark.parametrize("policy", ["nearest", "farthest", "random"])
    def test_memory_policies(self, domains, hp, policy):
        """Test memory policies."""
        result = train_stream(domains, hp.replace(memory_policy=policy))
        assert len(result.state.memory) >= sum(result.state.committed_clusters)

    def test_frozen_encoder_constant_within_domain(self, domains, hp):
        """Test frozen encoder constant within domain."""
        snapshots = []

        def on_epoch_end(state):
            if state.domain_index == 1:
                snapshots.append(state.encoders.frozen.flat().copy())

        train_stream(domains, hp, on_epoch_end=on_epoch_end)
        assert len(snapshots) == hp.epochs_per_domain
        np.testing.assert_array_equal(snapshots[0], snapshots[-1])

    def test_cached_momentum_for_similarity(self, domains, hp):
        """Test cached momentum for similarity."""
        result = train_stream(domains, hp.replace(reembed_old_each_iter=False))
        second = [r for r in result.metrics.rows if r.domain_index == 1]
        first, rest = _split_first_step(second)
        assert first.loss_sim == 0.0
        assert rest
        assert all(r.loss_sim > 0 for r in rest)

    def test_mismatched_dimensions(self, domains, hp):
        """Test mismatched dimensions."""
        other = generate_stream(
            StreamSpec(num_domains=1, ids_per_domain=4, samples_per_id=4, d_in=6, eval_ids=0,
                       num_unseen=0)
        ).train_domains()
        with pytest.raises(DataError):
            train_stream([domains[0], other[0]], hp)
