import numpy as np
import pytest

from rplkg import baselines, selector
from rplkg.embedstore import SyntheticWorld, synth_encode
from rplkg.errors import ValidationError
from rplkg.evalharness import accuracy, sample_k_shot
from rplkg.selector import PromptBlock
from rplkg.trainloop import (ALPHA_GRID, DROPOUT_GRID, TAU_GRID,
                             WEIGHT_DECAY_GRID, TrainConfig, grid_search,
                             leaderboard_csv, train)


@pytest.fixture(scope="module")
def world():
    caches = synth_encode(SyntheticWorld(seed=7, n_classes=5, dim=64,
                                         prompts_per_class=8, noise_scale=0.1))
    task = sample_k_shot(caches.images, 16, seed=3, dataset_id="synth")
    return caches, PromptBlock.from_cache(caches.prompts), \
        PromptBlock.from_cache(caches.templates), task


class TestSearchGrids:
    def test_grid_constants(self):
        assert WEIGHT_DECAY_GRID == (3e-3, 1e-2, 5e-2, 0.1)
        assert TAU_GRID == (0.001, 0.01, 0.1)
        assert DROPOUT_GRID == (0.1, 0.3, 0.5, 0.7)
        assert ALPHA_GRID == (0.1, 0.3, 0.5, 0.7, 1.0)


class TestTrain:
    def test_zero_learning_rate_freezes_params(self, world):
        caches, block, tblock, task = world
        cfg = TrainConfig(learning_rate=0.0, epochs=3, seed=5)
        result = train(cfg, task, caches.images, block)
        reference = selector.init_params(block.dim, tau=cfg.tau, seed=cfg.seed,
                                         logit_scale=cfg.logit_scale)
        for name in ("w_q", "w_k", "w_v"):
            assert np.array_equal(getattr(result.params, name), getattr(reference, name))
        assert len(set(np.round(result.loss_trace, 12))) == 1

    def test_determinism_bit_identical(self, world):
        caches, block, tblock, task = world
        cfg = TrainConfig(epochs=5, seed=21, dropout=0.3)
        r1 = train(cfg, task, caches.images, block)
        r2 = train(cfg, task, caches.images, block)
        for name in ("w_q", "w_k", "w_v"):
            assert np.array_equal(getattr(r1.params, name), getattr(r2.params, name))
        assert r1.loss_trace == r2.loss_trace

    def test_planted_world_recovery(self, world):
        caches, block, tblock, task = world
        result = train(TrainConfig(seed=11, epochs=50, batch_size=16),
                       task, caches.images, block)
        assert result.final_train_acc >= 0.95
        X = caches.images.vectors[task.test_indices]
        y = caches.images.labels[task.test_indices]
        scores, trace = selector.score(result.params, X, block)
        assert accuracy(scores, y) >= 0.95
        chosen = trace.chosen[np.arange(y.size), y]
        planted = np.array(caches.planted)[y]
        assert np.mean(chosen == planted) >= 0.95

    def test_trained_beats_parameter_free_baselines(self, world):
        caches, block, tblock, task = world
        result = train(TrainConfig(seed=11, epochs=50, batch_size=16),
                       task, caches.images, block)
        X = caches.images.vectors[task.test_indices]
        y = caches.images.labels[task.test_indices]
        scores, _ = selector.score(result.params, X, block)
        rplkg_acc = accuracy(scores, y)
        assert rplkg_acc >= accuracy(baselines.random_prompt_scores(X, block, 0), y)
        assert rplkg_acc >= accuracy(baselines.average_prompt_scores(X, block), y)
        assert rplkg_acc >= accuracy(baselines.zeroshot_scores(X, tblock), y)

    def test_trace_lengths(self, world):
        caches, block, tblock, task = world
        cfg = TrainConfig(epochs=4, seed=0)
        result = train(cfg, task, caches.images, block)
        assert len(result.loss_trace) == 4
        assert len(result.val_acc_trace) == 4
        assert result.seconds_total >= 0

    def test_blend_requires_templates(self, world):
        caches, block, tblock, task = world
        cfg = TrainConfig(alpha_blend=0.5, epochs=1)
        with pytest.raises(ValidationError):
            train(cfg, task, caches.images, block, template_block=None)
        train(cfg, task, caches.images, block, template_block=tblock)

    def test_empty_train_split_rejected(self, world):
        caches, block, tblock, task = world
        bad = type(task)(dataset_id="x", k=1, seed=0,
                         train_indices=np.array([], dtype=np.int64),
                         val_indices=np.array([], dtype=np.int64),
                         test_indices=np.array([], dtype=np.int64))
        with pytest.raises(ValidationError):
            train(TrainConfig(epochs=1), bad, caches.images, block)


class TestGridSearch:
    def test_single_point_grid(self, world):
        caches, block, tblock, task = world
        base = TrainConfig(epochs=2, seed=1)
        best, cells = grid_search(task, caches.images, block, base_config=base,
                                  weight_decays=(0.01,), taus=(0.1,))
        assert len(cells) == 1
        assert best.weight_decay == 0.01 and best.tau == 0.1

    def test_leaderboard_length_is_grid_product(self, world):
        caches, block, tblock, task = world
        base = TrainConfig(epochs=1, seed=1)
        _, cells = grid_search(task, caches.images, block, base_config=base,
                               weight_decays=(0.0, 0.01), taus=(0.01, 0.1),
                               dropouts=(0.0,), alphas=(1.0,))
        assert len(cells) == 4
        csv = leaderboard_csv(cells)
        assert csv.count("\n") == 5  # header + 4 rows

    def test_tie_break_low_wd_then_low_tau(self, world):
        caches, block, tblock, task = world
        base = TrainConfig(epochs=1, seed=1, learning_rate=0.0)
        # lr=0 makes every cell score identically; wd does not matter at lr=0
        best, cells = grid_search(task, caches.images, block, base_config=base,
                                  weight_decays=(0.1, 3e-3), taus=(0.1, 0.001))
        assert best.weight_decay == 3e-3
        assert best.tau == 0.001

    def test_best_beats_worst_on_planted_world(self, world):
        caches, block, tblock, task = world
        base = TrainConfig(epochs=15, seed=1, batch_size=16)
        # a deliberately bad cell (huge weight decay) vs a sane one
        _, cells = grid_search(task, caches.images, block, base_config=base,
                               weight_decays=(1e-3, 40.0), taus=(0.01,))
        assert cells[0].val_accuracy >= cells[-1].val_accuracy

    def test_empty_grid_rejected(self, world):
        caches, block, tblock, task = world
        with pytest.raises(ValidationError):
            grid_search(task, caches.images, block, weight_decays=())
