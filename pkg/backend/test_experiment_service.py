"""
Tests for the stage runner: hash planning, caching, upstream checks,
evaluation, recommendation, ablations, sweeps and the parameter report.

The pipeline tests share one smoke-scale run (see conftest.tiny_run).
"""

import os

import pytest

from artifact_store import load_module, read_json
from config import Config
from errors import InputError
from experiment_service import (
    STAGES,
    Pipeline,
    parameter_report,
    plan_hashes,
    run_ablations,
    run_sweep,
    scaling_report,
    synthetic_catalog,
)
from recommender_service import GenerativeRecommender


def _changed(first, second):
    return [stage for stage in STAGES if first[stage] != second[stage]]


class TestPlanHashes:
    """Test that each stage hash covers exactly what the stage reads."""

    def test_recommender_key_invalidates_downstream_only(self):
        base = plan_hashes(Config())
        changed = plan_hashes(Config().with_overrides(REC_LR=1e-3))
        assert _changed(base, changed) == list(STAGES[STAGES.index('rec-train-universal'):])

    def test_eval_cutoffs_only_touch_evaluation(self):
        assert _changed(plan_hashes(Config()), plan_hashes(Config({'EVAL_KS': '5'}))) == ['evaluate']

    def test_ablation_enters_at_its_stage(self):
        base = plan_hashes(Config())
        assert _changed(base, plan_hashes(Config({'ABLATION': 'no_specific'}))) == ['evaluate']
        assert _changed(base, plan_hashes(Config({'ABLATION': 'no_mtm'}))) == list(STAGES[1:])
        assert _changed(base, plan_hashes(Config({'ABLATION': 'no_adapter'})))[0] == 'sids-assign'

    def test_seed_changes_everything(self):
        assert _changed(plan_hashes(Config()), plan_hashes(Config({'SEED': '8'}))) == list(STAGES)


class TestPipelineRun:
    """Test the completed smoke-scale run."""

    def test_every_stage_complete(self, tiny_run):
        _, pipeline = tiny_run
        assert all(pipeline.store.is_complete(stage, pipeline.hashes[stage]) for stage in STAGES)

    def test_rerun_is_cached(self, tiny_run):
        config, _ = tiny_run
        results = Pipeline(config).run_all()
        assert [r['stage'] for r in results] == list(STAGES)
        assert all(r['cached'] for r in results)

    def test_fused_sids_cover_catalog(self, tiny_run):
        _, pipeline = tiny_run
        sid_map = pipeline.sid_map
        assert set(sid_map) == set(pipeline.catalog)
        assert len(set(sid_map.values())) == len(sid_map)

    def test_trees_hold_each_domain(self, tiny_run):
        _, pipeline = tiny_run
        for domain, tree in pipeline.trees.items():
            assert tree.item_count == sum(1 for item in pipeline.items if item.domain == domain)

    def test_metrics_report(self, tiny_run):
        _, pipeline = tiny_run
        report = pipeline.report()
        assert sorted(report.domains) == ['A', 'B']
        for domain, row in report.domains.items():
            assert 0.0 <= row['recall@5'] <= row['recall@10'] <= 1.0
            assert row['ndcg@10'] <= row['recall@10']
            assert row['users'] == len(pipeline.split.targets('test', domain))
            assert row['excluded'] == pipeline.split.excluded_count(domain)
        assert report.extra['invalid_sequences'] == 0
        assert report.extra['ranking'] == 'full target-domain catalog'

    def test_user_routing_report(self, tiny_run):
        _, pipeline = tiny_run
        with open(pipeline.stage_path('evaluate', 'user_routing.tsv'), encoding='utf-8') as handle:
            rows = [line.rstrip('\n').split('\t') for line in handle]
        assert len(rows) == sum(row['users'] for row in pipeline.report().domains.values())
        assert all(0.0 <= float(row[2]) <= 1.0 for row in rows)

    def test_evaluation_is_deterministic(self, tiny_run):
        _, pipeline = tiny_run
        before = pipeline.report().to_dict()
        assert pipeline.run_stage('evaluate', force=True)['success']
        assert pipeline.report().to_dict()['domains'] == before['domains']

    def test_unknown_stage(self, tiny_run):
        _, pipeline = tiny_run
        assert pipeline.run_stage('train-everything')['error_code'] == 'UNKNOWN_STAGE'


class TestUpstreamChecks:
    """Test missing and stale upstream artifacts."""

    def test_missing_upstream(self, tiny_config):
        result = Pipeline(tiny_config).run_stage('tokenizer-pretrain')
        assert result['success'] is False
        assert result['error_code'] == 'MISSING_UPSTREAM'
        assert result['stage'] == 'tokenizer-pretrain'

    def test_stale_upstream(self, tiny_run):
        config, pipeline = tiny_run
        result = Pipeline(config.with_overrides(SEED=8), store=pipeline.store).run_stage('tokenizer-pretrain')
        assert result['error_code'] == 'STALE_ARTIFACT'


class TestRecommend:
    """Test single-user recommendation."""

    def test_ranked_domain_items(self, tiny_run):
        _, pipeline = tiny_run
        user = pipeline.log.users()[0]
        ranked = pipeline.recommend(user, 'A', k=5)
        assert [rank for rank, _, _ in ranked] == [1, 2, 3, 4, 5]
        assert all(pipeline.catalog[item].domain == 'A' for _, item, _ in ranked)
        scores = [score for _, _, score in ranked]
        assert scores == sorted(scores, reverse=True)
        assert pipeline.recommend(user, 'A', k=5) == ranked

    def test_unknown_user(self, tiny_run):
        _, pipeline = tiny_run
        with pytest.raises(InputError):
            pipeline.recommend('nobody', 'A')

    def test_unknown_domain(self, tiny_run):
        _, pipeline = tiny_run
        with pytest.raises(InputError):
            pipeline.recommend(pipeline.log.users()[0], 'Z')


class TestVariants:
    """Test ablation variants, sweeps and the parameter report on the cached run."""

    def test_unconstrained_decoding_reuses_training(self, tiny_run):
        config, pipeline = tiny_run
        variant = Pipeline(config.with_overrides(ABLATION='no_prefix_tree'), store=pipeline.store)
        results = variant.run_all()
        assert all(r['success'] for r in results)
        assert [r['stage'] for r in results if not r['cached']] == ['evaluate']
        report = variant.report()
        assert report.extra['variant'] == 'no_prefix_tree'
        assert report.extra['invalid_sequences'] > 0
        assert pipeline.report().extra['invalid_sequences'] == 0

    def test_universal_only_scoring(self, tiny_run):
        config, pipeline = tiny_run
        variant = Pipeline(config.with_overrides(ABLATION='no_specific'), store=pipeline.store)
        assert variant.eval_variant() == 'universal'
        assert all(r['success'] for r in variant.run_all())
        assert not os.path.exists(variant.stage_path('evaluate', 'user_routing.tsv'))

    def test_ablation_table(self, tiny_run):
        config, _ = tiny_run
        result = run_ablations(config, ['no_prefix_tree'])
        assert result['success']
        labels = [row[0] for row in result['rows']]
        assert labels.count('Full model') == 2
        assert labels.count('No prefix tree') == 2
        assert all(row[3] == 0.0 for row in result['rows'] if row[0] == 'Full model')
        assert os.path.exists(result['path'])

    def test_sweep_at_configured_value_is_cached(self, tiny_run):
        config, pipeline = tiny_run
        result = run_sweep(config, 'dropout', [config.REC_EXPERT_DROPOUT])
        assert result['success']
        report = pipeline.report()
        assert [(row[1], row[2]) for row in result['rows']] == [
            (d, report.metric(d, 'ndcg@10')) for d in sorted(report.domains)
        ]

    def test_unknown_sweep_parameter(self, tiny_run):
        config, _ = tiny_run
        assert run_sweep(config, 'depth')['error_code'] == 'INPUT_ERROR'

    def test_parameter_report(self, tiny_run):
        config, _ = tiny_run
        result = parameter_report(config)
        rows = {name: (trainable, full) for name, trainable, full in result['rows']}
        trainable, full = rows['item adapter A']
        assert 0 < trainable < full
        assert 'user router' in rows
        assert [stage for stage, _ in result['timings']] == list(STAGES)
        assert os.path.exists(result['path'])

    def test_parameter_report_with_scaling(self, tiny_run):
        config, _ = tiny_run
        result = parameter_report(config, scaling=True)
        assert [row[0] for row in result['scaling']] == config.SCALING_SIZES
        assert os.path.exists(os.path.join(config.ARTIFACT_DIR, 'scaling.tsv'))


class TestLaterPhaseSettings:
    """Test that specific and user-router keys reach training when only they change."""

    def test_downstream_keys_are_used(self, tiny_run):
        config, pipeline = tiny_run
        variant = Pipeline(
            config.with_overrides(REC_SPECIFIC_EPOCHS=2, USER_ROUTER_EPOCHS=3, FUSION_ORDER='fuse_then_mask'),
            store=pipeline.store,
        )
        results = variant.run_all(until='user-router-train')
        assert all(r['success'] for r in results)
        assert [r['stage'] for r in results if not r['cached']] == ['rec-train-specific', 'user-router-train']

        histories = read_json(variant.stage_path('rec-train-specific', 'history.json'))
        assert sorted(histories) == ['A', 'B']
        assert all(len(history) == 3 for history in histories.values())

        model, manifest = load_module(
            variant.stage_path('user-router-train', 'recommender.npz'), GenerativeRecommender.from_spec)
        assert len(manifest['history']) == 4
        assert model.config.router_epochs == 3
        assert model.config.specific_epochs == 2
        assert model.config.fusion_order == 'fuse_then_mask'


class TestScalingReport:
    """Test decode cost against catalog size."""

    def test_beam_cost_is_bounded(self, tiny_run):
        config, _ = tiny_run
        result = scaling_report(config, beam=2)
        assert result['success']
        rows = result['rows']
        assert [row[0] for row in rows] == [4, 8, 16]
        depth = config.RQ_LEVELS + 1
        for _, beam_calls, beam_prefixes, _, full_calls, _, _ in rows:
            assert beam_calls == depth and full_calls == depth
            assert beam_prefixes <= 1 + (depth - 1) * 2
        full_prefixes = [row[5] for row in rows]
        assert full_prefixes == sorted(full_prefixes)
        # Every pair of 4 codes: 1 root + 4 first-level + 16 second-level prefixes
        assert full_prefixes[-1] == 21
        assert rows[-1][2] < full_prefixes[-1]

    def test_catalogs_are_nested(self, tiny_run):
        _, pipeline = tiny_run
        small = synthetic_catalog(pipeline.vocab, 4, seed=1)
        large = synthetic_catalog(pipeline.vocab, 8, seed=1)
        assert len(set(small.values())) == 4
        assert all(large[item_id] == sid for item_id, sid in small.items())

    def test_catalog_larger_than_code_space(self, tiny_run):
        config, _ = tiny_run
        with pytest.raises(InputError):
            scaling_report(config, sizes=[17])
