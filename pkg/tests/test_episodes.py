import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metakws.dataset import SplitManifest
from helpers import check_extended_task, files_of
from metakws.episodes import (EpisodeConfig, EpisodeError, build_target_task, dump_tasks,
                              load_tasks, sample_meta_task)

EXT = EpisodeConfig(n_new=10, k_shot=5, query_per_class=15, variant="extended")


def test_counts(manifest, store):
    task = sample_meta_task(manifest.partition, manifest, EXT, np.random.default_rng(0), store)
    assert len(task.support) == 50 and len(task.query) == 180
    assert set(task.support_labels().tolist()) <= set(range(10))


def test_same_seed_same_task(manifest, store):
    a = sample_meta_task(manifest.partition, manifest, EXT, np.random.default_rng(5), store)
    b = sample_meta_task(manifest.partition, manifest, EXT, np.random.default_rng(5), store)
    assert a == b


def test_original_one_shot(manifest, store):
    cfg = replace(EXT, variant="original", k_shot=1)
    task = sample_meta_task(manifest.partition, manifest, cfg, np.random.default_rng(0), store)
    assert len(task.support) == 12
    assert sorted(task.support_labels().tolist()) == list(range(12))


def test_original_permutes_fixed_slots(manifest, store):
    cfg = replace(EXT, variant="original")
    slots = {sample_meta_task(manifest.partition, manifest, cfg, np.random.default_rng(s), store)
             .class_slots["silence"] for s in range(30)}
    assert len(slots) > 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_extended_invariants(manifest, store, seed):
    task = sample_meta_task(manifest.partition, manifest, EXT, np.random.default_rng(seed), store)
    check_extended_task(task, EXT, manifest)


@given(st.integers(1, 10), st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=30)
def test_extended_invariants_any_shape(manifest, store, n, k, q):
    cfg = EpisodeConfig(n_new=n, k_shot=k, query_per_class=q)
    task = sample_meta_task(manifest.partition, manifest, cfg, np.random.default_rng(n * 100 + k), store)
    check_extended_task(task, cfg, manifest)


def test_slot_assignment_is_uniform(manifest, store):
    """Each keyword lands in each of the 10 slots about equally often."""
    cfg = replace(EXT, n_new=10, k_shot=1, query_per_class=1)
    counts = np.zeros(10)
    target = manifest.partition.training_keywords[0]
    hits = 0
    for s in range(2000):
        task = sample_meta_task(manifest.partition, manifest, cfg, np.random.default_rng(s), store)
        if target in task.keyword_map:
            counts[task.keyword_map[target]] += 1
            hits += 1
    expected = hits / 10
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 < 27.9  # 99.9% quantile, 9 dof


def test_unknown_draws_cover_all_unknown_keywords(manifest, store):
    task = sample_meta_task(manifest.partition, manifest, replace(EXT, query_per_class=15),
                            np.random.default_rng(0), store)
    unk = [s.split("/")[0] for s, y in task.query if y == 11]
    assert set(unk) <= set(manifest.partition.unknown_keywords)
    assert len(set(unk)) >= 3


def test_too_many_new_classes(manifest, store):
    with pytest.raises(EpisodeError):
        sample_meta_task(manifest.partition, manifest, replace(EXT, n_new=21),
                         np.random.default_rng(0), store)


def test_insufficient_files(manifest, store):
    with pytest.raises(EpisodeError):
        sample_meta_task(manifest.partition, manifest, replace(EXT, k_shot=20, query_per_class=10),
                         np.random.default_rng(0), store)


def test_supervised_not_meta_trained(manifest, store):
    with pytest.raises(EpisodeError):
        sample_meta_task(manifest.partition, manifest, replace(EXT, variant="supervised"),
                         np.random.default_rng(0), store)


class TestTargetTask:
    def cfg(self, **kw):
        return EpisodeConfig(**{"k_shot": 5, "eval_per_class": 4, **kw})

    def test_extended_counts(self, manifest, store):
        task = build_target_task(manifest.partition, manifest, self.cfg(), np.random.default_rng(0), store)
        assert len(task.support) == 50
        assert len(task.query) == 12 * 4
        assert set(task.support_labels().tolist()) == set(range(10))
        assert not files_of(task.support) & files_of(task.query)

    def test_full_scale_query_size(self, manifest, store):
        """100 eval clips per user keyword (placeholder paths, never loaded)."""
        big = SplitManifest.from_dict(json.loads(manifest.to_json()))
        for kw in big.partition.user_keywords:
            big.splits["eval_pool"][kw] = [f"{kw}/eval_{i}.wav" for i in range(100)]
            big.splits["finetune_pool"][kw] = [f"{kw}/ft_{i}.wav" for i in range(10)]
        task = build_target_task(big.partition, big, EpisodeConfig(k_shot=5), np.random.default_rng(0), store)
        assert len(task.support) == 50
        assert len(task.query) == 1200
        assert np.bincount(task.query_labels()).tolist() == [100] * 12

    @pytest.mark.parametrize("variant", ["original", "supervised"])
    def test_baseline_support_has_fixed_classes(self, manifest, store, variant):
        task = build_target_task(manifest.partition, manifest, self.cfg(variant=variant),
                                 np.random.default_rng(0), store)
        assert len(task.support) == 60
        assert np.bincount(task.support_labels(), minlength=12).tolist() == [5] * 12

    def test_alphabetical_slots(self, manifest, store):
        task = build_target_task(manifest.partition, manifest, self.cfg(), np.random.default_rng(0), store)
        users = sorted(manifest.partition.user_keywords)
        assert task.keyword_map == {kw: i for i, kw in enumerate(users)}

    def test_pool_semantics(self, manifest, store):
        a = build_target_task(manifest.partition, manifest, self.cfg(), np.random.default_rng(1), store)
        b = build_target_task(manifest.partition, manifest, self.cfg(), np.random.default_rng(2), store)
        kw_query = lambda t: sorted(s for s, y in t.query if y < 10)
        assert kw_query(a) == kw_query(b)
        assert sorted(a.query_labels().tolist()) == sorted(b.query_labels().tolist())
        assert files_of(a.support) != files_of(b.support)

    def test_pool_exhaustion(self, manifest, store):
        with pytest.raises(EpisodeError):
            build_target_task(manifest.partition, manifest, self.cfg(k_shot=21),
                              np.random.default_rng(0), store)


def test_dump_and_load(manifest, store, tmp_path):
    tasks = [sample_meta_task(manifest.partition, manifest, EXT, np.random.default_rng(s), store, seed=s)
             for s in range(3)]
    dump_tasks(tasks, tmp_path / "t.jsonl")
    assert load_tasks(tmp_path / "t.jsonl") == tasks
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 3
