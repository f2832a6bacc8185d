"""
Experiment service module for the xdrec pipeline.

This module provides the stage runner that binds every pipeline step:
- Stage hashing over the configuration keys each stage reads, chained
  through upstream hashes, so re-runs reuse cached artifacts
- The nine training/assignment stages plus data and evaluation
- Model selection by validation Recall@10 during recommender training
- Ablation variants, hyper-parameter sweeps and the parameter report
- Single-user recommendation on the trained artifacts

Stage runners return result dictionaries in the same shape the rest of
the code base uses: {'success', 'message', 'error_code', ...}.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor

from artifact_store import ArtifactStore, load_module, read_json, save_module, write_json
from data_service import SynthConfig, ingest, load_labels, split_leave_last_out, synth_generate
from decoder_service import PrefixTree, beam_generate, build_tree, exhaustive_rank, unconstrained_generate
from errors import XDRecError, InputError
from metrics import MetricsReport, mean, recall_at_k
from nn_core import RngSeed, adapter_parameters, count_parameters
from records import SemanticID
from adapter_service import (
    adapter_name,
    assign_fused_sids,
    dump_embeddings,
    train_adapters,
    train_router,
    write_routing_report,
)
from recommender_service import (
    GenerativeRecommender,
    RecConfig,
    RouterSample,
    SidVocabulary,
    encode_history,
    encode_sequence,
    make_logits_fn,
    query_gamma,
    specific_name,
    train_specific,
    train_universal,
    train_user_router,
)
from router import VibRouter
from tokenizer_service import PretrainConfig, RqVae, assign_sids, pretrain, read_sids_tsv, write_sids_tsv

# Configure logging
logger = logging.getLogger(__name__)

STAGES = (
    'data',
    'tokenizer-pretrain',
    'adapters-train',
    'router-train',
    'sids-assign',
    'trie-build',
    'rec-train-universal',
    'rec-train-specific',
    'user-router-train',
    'evaluate',
)

UPSTREAM = {stage: ([STAGES[i - 1]] if i else []) for i, stage in enumerate(STAGES)}

STAGE_KEYS = {
    'data': [
        'USE_SYNTH', 'ITEMS_PATH', 'INTERACTIONS_PATH', 'SEED', 'SYNTH_DOMAINS', 'SYNTH_USERS',
        'SYNTH_ITEMS_PER_DOMAIN', 'SYNTH_CONCEPTS', 'SYNTH_SHARED_FRACTION', 'SYNTH_DOMAIN_SHIFT',
        'SYNTH_EMBEDDING_DIM', 'SYNTH_NOISE', 'SYNTH_MIN_LEN', 'SYNTH_MAX_LEN',
        'SYNTH_CROSS_USER_FRACTION', 'SYNTH_TRANSITION_STRENGTH', 'SYNTH_POPULARITY_EXPONENT',
    ],
    'tokenizer-pretrain': [
        'SEED', 'RQ_LEVELS', 'RQ_CODEBOOK_SIZE', 'RQ_LATENT_DIM', 'RQ_HIDDEN_DIM', 'RQ_HIDDEN_LAYERS',
        'RQ_BETA', 'RQ_MU', 'RQ_LAMBDA', 'RQ_MASK_RATE', 'RQ_EPOCHS', 'RQ_LR', 'RQ_BATCH',
        'RQ_WEIGHT_DECAY', 'RQ_CTX_DIM', 'RQ_CTX_LAYERS', 'RQ_CTX_HEADS',
    ],
    'adapters-train': [
        'ADAPTER_RANK', 'ADAPTER_ALPHA', 'ADAPTER_DROPOUT', 'ADAPTER_EPOCHS', 'ADAPTER_LR', 'ADAPTER_BATCH',
    ],
    'router-train': [
        'ROUTER_HIDDEN', 'ROUTER_LATENT_DIM', 'ROUTER_EPOCHS', 'ROUTER_LR', 'ROUTER_BATCH', 'VIB_WEIGHT',
    ],
    'sids-assign': [],
    'trie-build': ['REC_TAG_ITEMS'],
    'rec-train-universal': [
        'REC_LAYERS', 'REC_D_MODEL', 'REC_HEADS', 'REC_FF_DIM', 'REC_MAX_LEN', 'REC_TAG_ITEMS',
        'REC_LORA_TARGETS', 'REC_EXPERTS', 'REC_EXPERT_RANK', 'REC_EXPERT_ALPHA', 'REC_EXPERT_DROPOUT',
        'REC_GATE_MODE', 'REC_UNIVERSAL_EPOCHS', 'REC_LR', 'REC_BATCH', 'REC_WEIGHT_DECAY',
        'SELECT_BEST', 'SELECTION_USERS', 'DECODE_K', 'DECODE_BEAM',
    ],
    'rec-train-specific': ['REC_SPECIFIC_EPOCHS', 'REC_SPECIFIC_RANK', 'REC_SPECIFIC_ALPHA'],
    'user-router-train': [
        'ROUTER_HIDDEN', 'ROUTER_LATENT_DIM', 'USER_ROUTER_EPOCHS', 'USER_ROUTER_LR',
        'USER_ROUTER_BATCH', 'VIB_WEIGHT', 'FUSION_ORDER',
    ],
    'evaluate': ['DECODE_K', 'DECODE_BEAM', 'FUSION_ORDER', 'EVAL_KS'],
}

# First stage whose outputs an ablation changes; everything downstream follows through the hash chain
ABLATION_STAGE = {
    'no_mtm': 'tokenizer-pretrain',
    'no_adapter': 'sids-assign',
    'no_universal': 'rec-train-universal',
    'avg_gate': 'rec-train-universal',
    'no_specific': 'evaluate',
    'no_prefix_tree': 'evaluate',
}

ABLATION_LABELS = {
    'none': 'Full model',
    'no_mtm': 'No masked code modeling',
    'no_adapter': 'No item adapters',
    'no_specific': 'No specific expert',
    'no_universal': 'No universal experts',
    'avg_gate': 'Averaged experts',
    'no_prefix_tree': 'No prefix tree',
}

SWEEP_KEYS = {
    'experts': (['REC_EXPERTS'], 'SWEEP_EXPERTS'),
    'rank': (['REC_EXPERT_RANK', 'REC_SPECIFIC_RANK'], 'SWEEP_RANKS'),
    'alpha': (['REC_EXPERT_ALPHA', 'REC_SPECIFIC_ALPHA'], 'SWEEP_ALPHAS'),
    'dropout': (['REC_EXPERT_DROPOUT'], 'SWEEP_DROPOUTS'),
}

SELECTION_K = 10


def plan_hashes(config):
    """Stage name -> hash of its configuration keys, ablation variant and upstream hashes."""
    hashes = {}
    for stage in STAGES:
        upstream = [hashes[u] for u in UPSTREAM[stage]]
        if ABLATION_STAGE.get(config.ABLATION) == stage:
            upstream.append(f"variant={config.ABLATION}")
        hashes[stage] = config.config_hash(STAGE_KEYS[stage], upstream=upstream)
    return hashes


def _build_tokenizer(spec):
    return RqVae(spec['input_dim'], PretrainConfig(**spec['config']))


class Pipeline:
    """
    One configuration's view of the artifact store.

    Artifacts of completed stages are loaded lazily and cached on the
    instance; stages write into their own hash-keyed directory.
    """

    def __init__(self, config, store=None, dump_embeddings=False):
        self.config = config
        self.dump_embeddings = dump_embeddings
        self.store = store or ArtifactStore(config.ARTIFACT_DIR)
        self.hashes = plan_hashes(config)
        self._cache = {}
        self.runners = {
            'data': self._run_data,
            'tokenizer-pretrain': self._run_tokenizer,
            'adapters-train': self._run_adapters,
            'router-train': self._run_router,
            'sids-assign': self._run_sids,
            'trie-build': self._run_trie,
            'rec-train-universal': self._run_universal,
            'rec-train-specific': self._run_specific,
            'user-router-train': self._run_user_router,
            'evaluate': self._run_evaluate,
        }

    # -- paths and lazy loaders ------------------------------------------------

    def stage_path(self, stage, name):
        return self.store.path(stage, self.hashes[stage], name)

    def _cached(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def _data_manifest(self):
        return self.store.manifest('data', self.hashes['data'])

    @property
    def catalog(self):
        return self._load_data()[0]

    @property
    def log(self):
        return self._load_data()[1]

    @property
    def items(self):
        return [self.catalog[i] for i in sorted(self.catalog)]

    @property
    def domains(self):
        return sorted({item.domain for item in self.catalog.values()})

    def _load_data(self):
        def loader():
            manifest = self._data_manifest()
            return ingest(manifest['items_path'], manifest['interactions_path'])
        return self._cached('data', loader)

    @property
    def labels(self):
        return self._cached('labels', lambda: load_labels(self._data_manifest().get('labels_path') or ''))

    @property
    def split(self):
        return self._cached('split', lambda: split_leave_last_out(self.log))

    def tokenizer(self, stage='tokenizer-pretrain'):
        name = 'tokenizer.npz' if stage == 'tokenizer-pretrain' else 'tokenizer_adapted.npz'
        return self._cached(f'tokenizer:{stage}', lambda: load_module(self.stage_path(stage, name), _build_tokenizer)[0])

    def item_router(self):
        return self._cached('item-router', lambda: load_module(
            self.stage_path('router-train', 'item_router.npz'), lambda spec: VibRouter(**spec))[0])

    @property
    def sid_map(self):
        def loader():
            manifest = self.store.manifest('sids-assign', self.hashes['sids-assign'])
            return read_sids_tsv(self.stage_path('sids-assign', manifest['sid_file']))
        return self._cached('sids', loader)

    @property
    def vocab(self):
        return self._cached('vocab', lambda: SidVocabulary.from_dict(
            read_json(self.stage_path('trie-build', 'vocab.json'))))

    @property
    def trees(self):
        return self._cached('trees', lambda: {
            d: PrefixTree.load(self.stage_path('trie-build', f'trie_{d}.bin')) for d in self.domains
        })

    def recommender(self, stage, domain=None):
        """The model saved by a recommender stage (per-domain models under no_universal)."""
        name = 'recommender.npz' if domain is None else f'recommender_{domain}.npz'
        return self._cached(f'rec:{stage}:{domain}', lambda: load_module(
            self.stage_path(stage, name), GenerativeRecommender.from_spec)[0])

    @property
    def per_domain_models(self):
        return self.config.ABLATION == 'no_universal'

    def rec_config(self):
        values = self.config.get_recommender_config()
        return RecConfig(**values)

    # -- running ---------------------------------------------------------------

    def run_stage(self, stage, force=False):
        """
        Run one stage unless its artifacts already exist.

        Returns:
            dict: Result dictionary; failures carry error_code and the stage name
        """
        if stage not in self.runners:
            return {'success': False, 'message': f"Unknown stage '{stage}'", 'error_code': 'UNKNOWN_STAGE'}
        stage_hash = self.hashes[stage]
        if self.store.is_complete(stage, stage_hash) and not force:
            logger.info(f"[{stage}] cached ({stage_hash[:12]})")
            return {'success': True, 'message': f"{stage} cached", 'stage': stage, 'hash': stage_hash, 'cached': True}
        try:
            for upstream in UPSTREAM[stage]:
                self.store.require(upstream, self.hashes[upstream])
            self.store.stage_dir(stage, stage_hash, create=True)
            logger.info(f"[{stage}] running ({stage_hash[:12]})")
            started = time.perf_counter()
            info = self.runners[stage]() or {}
            info['elapsed_seconds'] = round(time.perf_counter() - started, 3)
            info['upstream'] = {u: self.hashes[u] for u in UPSTREAM[stage]}
            info['ablation'] = self.config.ABLATION
            self.store.complete(stage, stage_hash, info)
        except XDRecError as e:
            logger.error(f"[{stage}] {e.message}")
            result = e.to_result()
            result['stage'] = stage
            return result
        logger.info(f"[{stage}] complete in {info['elapsed_seconds']}s")
        return {'success': True, 'message': f"{stage} complete", 'stage': stage, 'hash': stage_hash, 'cached': False}

    def run_all(self, until='evaluate'):
        """Run every stage up to and including `until`, stopping at the first failure."""
        results = []
        for stage in STAGES[:STAGES.index(until) + 1]:
            result = self.run_stage(stage)
            results.append(result)
            if not result['success']:
                break
        return results

    # -- stages ----------------------------------------------------------------

    def _run_data(self):
        config = self.config
        if config.USE_SYNTH:
            out_dir = self.store.stage_dir('data', self.hashes['data'])
            synth_generate(SynthConfig(**config.get_synth_config()), out_dir=out_dir)
            return {
                'items_path': os.path.join(out_dir, 'items.jsonl'),
                'interactions_path': os.path.join(out_dir, 'interactions.jsonl'),
                'labels_path': os.path.join(out_dir, 'labels.json'),
            }
        for path in (config.ITEMS_PATH, config.INTERACTIONS_PATH):
            if not os.path.exists(path):
                raise InputError(f"Data file not found: {path}")
        ingest(config.ITEMS_PATH, config.INTERACTIONS_PATH)
        labels = os.path.join(os.path.dirname(config.ITEMS_PATH), 'labels.json')
        return {
            'items_path': os.path.abspath(config.ITEMS_PATH),
            'interactions_path': os.path.abspath(config.INTERACTIONS_PATH),
            'labels_path': labels if os.path.exists(labels) else None,
        }

    def _run_tokenizer(self):
        settings = PretrainConfig(**self.config.get_pretrain_config())
        model, history = pretrain(self.items, settings, self.config.SEED)
        save_module(self.stage_path('tokenizer-pretrain', 'tokenizer.npz'), model, model.spec(), history=history)
        write_sids_tsv(self.stage_path('tokenizer-pretrain', 'sids_universal.tsv'), assign_sids(self.items, model))
        return {'final_loss': history[-1]['total'], 'initial_loss': history[0]['total']}

    def _run_adapters(self):
        tokenizer = self.tokenizer()
        histories = train_adapters(self.items, tokenizer, self.config.get_adapter_config(), self.config.SEED)
        save_module(self.stage_path('adapters-train', 'tokenizer_adapted.npz'), tokenizer, tokenizer.spec())
        write_json(self.stage_path('adapters-train', 'history.json'), histories)
        return {'domains': sorted(histories)}

    def _run_router(self):
        tokenizer = self.tokenizer('adapters-train')
        router, history = train_router(self.items, tokenizer, self.config.get_router_config(), self.config.SEED)
        save_module(self.stage_path('router-train', 'item_router.npz'), router, router.spec(), history=history)
        return {'final_rec': history[-1]['l_rec'] if history else None}

    def _run_sids(self):
        items = self.items
        tokenizer = self.tokenizer('adapters-train')
        write_sids_tsv(self.stage_path('sids-assign', 'sids.tsv'), assign_sids(items, tokenizer))
        fused, routed = assign_fused_sids(items, tokenizer, self.item_router())
        write_sids_tsv(self.stage_path('sids-assign', 'sids_fused.tsv'), fused)
        write_routing_report(self.stage_path('sids-assign', 'routing_report.tsv'), items, routed)
        if self.dump_embeddings:
            dump_embeddings(self.stage_path('sids-assign', 'embeddings.jsonl'), items, routed)
        sid_file = 'sids.tsv' if self.config.ABLATION == 'no_adapter' else 'sids_fused.tsv'
        alphas = sorted(float(f.alpha) for f in routed.values())
        return {'sid_file': sid_file, 'median_alpha': alphas[len(alphas) // 2]}

    def _run_trie(self):
        sid_map = self.sid_map
        vocab = SidVocabulary.from_sid_map(
            sid_map, self.domains, [self.config.RQ_CODEBOOK_SIZE] * self.config.RQ_LEVELS,
            tag_items=self.config.REC_TAG_ITEMS,
        )
        write_json(self.stage_path('trie-build', 'vocab.json'), vocab.to_dict())
        nodes = {}
        for domain in self.domains:
            domain_map = {i: sid for i, sid in sid_map.items() if self.catalog[i].domain == domain}
            tree = build_tree(domain, domain_map, encode=vocab.sid_tokens)
            tree.save(self.stage_path('trie-build', f'trie_{domain}.bin'))
            nodes[domain] = tree.node_count
        return {'vocab_size': vocab.size, 'nodes': nodes}

    def _sequences(self, domain=None):
        vocab, sid_map, split = self.vocab, self.sid_map, self.split
        sequences = []
        for user_id in self.log.users():
            events = [e for e in split.train_events(user_id) if domain is None or e.domain == domain]
            if events:
                sequences.append(encode_sequence(events, sid_map, vocab, self.config.REC_MAX_LEN))
        return sequences

    def _selection_targets(self, domain=None):
        targets = self.split.targets('validation', domain)
        count = min(self.config.SELECTION_USERS, len(targets))
        picks = RngSeed(self.config.SEED, f'selection/{domain}').numpy().choice(len(targets), count, replace=False)
        return [targets[i] for i in sorted(picks)]

    def _selection_fn(self, model, variant, domain=None):
        if not self.config.SELECT_BEST:
            return None
        targets = self._selection_targets(domain)

        def select(epoch):
            hits = [recall_at_k(ranked, target, SELECTION_K)
                    for ranked, target, _, _ in (self.rank_target(model, s, 'validation', variant) for s in targets)]
            return mean(hits)
        return select

    def _run_universal(self):
        seed = self.config.SEED
        if self.per_domain_models:
            histories = {}
            for domain in self.domains:
                model = GenerativeRecommender(self.vocab, self.rec_config(), seed)
                histories[domain] = train_universal(
                    self._sequences(domain), model, seed, self._selection_fn(model, 'universal', domain))
                save_module(self.stage_path('rec-train-universal', f'recommender_{domain}.npz'),
                            model, model.spec(), history=histories[domain])
            return {'per_domain': True}
        model = GenerativeRecommender(self.vocab, self.rec_config(), seed)
        history = train_universal(self._sequences(), model, seed, self._selection_fn(model, 'universal'))
        save_module(self.stage_path('rec-train-universal', 'recommender.npz'), model, model.spec(), history=history)
        return {'final_loss': history[-1]['loss'], 'initial_loss': history[0]['loss']}

    def _run_specific(self):
        seed = self.config.SEED
        histories = {}
        if self.per_domain_models:
            for domain in self.domains:
                model = self.recommender('rec-train-universal', domain)
                model.apply_phase_settings(self.rec_config())
                histories[domain] = train_specific(
                    domain, self._sequences(domain), model, seed, self._selection_fn(model, 'specific', domain))
                save_module(self.stage_path('rec-train-specific', f'recommender_{domain}.npz'), model, model.spec())
        else:
            model = self.recommender('rec-train-universal').apply_phase_settings(self.rec_config())
            for domain in self.domains:
                histories[domain] = train_specific(
                    domain, self._sequences(domain), model, seed, self._selection_fn(model, 'specific', domain))
            save_module(self.stage_path('rec-train-specific', 'recommender.npz'), model, model.spec())
        write_json(self.stage_path('rec-train-specific', 'history.json'), histories)
        return {'domains': sorted(histories)}

    def _router_samples(self, model):
        samples = []
        for target in self.split.targets('validation'):
            events = self.split.validation_context(target.user_id, target.validation)
            context = encode_history(events, self.sid_map, model.vocab, target.domain, model.context_budget)
            path = tuple(model.vocab.sid_tokens(self.sid_map[target.validation.item_id]))
            samples.append(RouterSample(target.user_id, target.domain, context, path))
        return samples

    def _run_user_router(self):
        if self.per_domain_models:
            logger.info("Per-domain models use the specific expert alone; no user router is trained")
            return {'skipped': True}
        model = self.recommender('rec-train-specific').apply_phase_settings(self.rec_config())
        _, history = train_user_router(self._router_samples(model), model, self.trees, self.config.SEED)
        save_module(self.stage_path('user-router-train', 'recommender.npz'), model, model.spec(), history=history)
        return {'final_ce': history[-1]['l_ce'], 'initial_ce': history[0]['l_ce']}

    # -- evaluation ------------------------------------------------------------

    def eval_variant(self):
        if self.config.ABLATION == 'no_universal':
            return 'specific'
        if self.config.ABLATION == 'no_specific':
            return 'universal'
        return 'fused'

    def final_model(self, domain):
        if self.per_domain_models:
            return self.recommender('rec-train-specific', domain)
        return self.recommender('user-router-train')

    def rank_target(self, model, split, kind, variant):
        """
        Decode one held-out target.

        Returns:
            tuple: (ranked item ids, target item id, rejected sequences, gamma or None)
        """
        target = getattr(split, kind)
        if kind == 'validation':
            events = self.split.validation_context(split.user_id, target)
        else:
            events = self.split.test_context(split.user_id, target)
        context = encode_history(events, self.sid_map, model.vocab, split.domain, model.context_budget)
        ranked, invalid, gamma = self.decode(model, context, split.domain, variant)
        return [item for item, _ in ranked], target.item_id, invalid, gamma

    def decode(self, model, context, domain, variant, k=None, beam=None):
        settings = self.config.get_decoder_config()
        k = k or settings['k']
        beam = beam or max(settings['beam_width'], k)
        logits_fn = make_logits_fn(model, context, domain, variant)
        gamma = query_gamma(model, context) if variant == 'fused' else None
        tree = self.trees[domain]
        if settings['constrained']:
            ranked = beam_generate(logits_fn, tree, beam, k, gamma, settings['fusion_order'])
            return ranked, 0, gamma
        ranked, invalid = unconstrained_generate(
            logits_fn, tree, beam, k, model.vocab.size, gamma, settings['fusion_order'])
        return ranked, invalid, gamma

    def _run_evaluate(self):
        settings = self.config.get_eval_config()
        variant = self.eval_variant()
        report = MetricsReport(self.config.SEED, self.hashes['evaluate'], settings['ks'])
        invalid_total, decodes, routing = 0, 0, []
        labels = self.labels or {}
        logger.debug(f"Evaluating with {len(self.trees)} prefix trees and {len(self.sid_map)} semantic IDs")
        for domain in self.domains:
            model = self.final_model(domain)
            targets = self.split.targets('test', domain)
            with ThreadPoolExecutor(max_workers=settings['workers']) as pool:
                results = list(pool.map(lambda s: self.rank_target(model, s, 'test', variant), targets))
            report.add_domain(domain, [(r[0], r[1]) for r in results], self.split.excluded_count(domain))
            invalid_total += sum(r[2] for r in results)
            decodes += len(results)
            for split, result in zip(targets, results):
                if result[3] is not None:
                    routing.append((split.user_id, domain, result[3],
                                    labels.get('user_types', {}).get(split.user_id, '')))
        report.extra = {
            'variant': self.config.ABLATION,
            'decodes': decodes,
            'invalid_sequences': invalid_total,
            'beam_width': self.config.beam_width,
            'ranking': 'full target-domain catalog',
        }
        report.write(self.stage_path('evaluate', 'metrics.json'), self.stage_path('evaluate', 'metrics.tsv'))
        if routing:
            with open(self.stage_path('evaluate', 'user_routing.tsv'), 'w', encoding='utf-8') as handle:
                for user_id, domain, gamma, user_type in routing:
                    handle.write(f"{user_id}\t{domain}\t{gamma:.6f}\t{user_type}\n")
        for domain, row in sorted(report.domains.items()):
            logger.info(f"[evaluate] {domain}: " + ' '.join(
                f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        return {'invalid_sequences': invalid_total, 'decodes': decodes}

    def report(self):
        self.store.require('evaluate', self.hashes['evaluate'])
        return MetricsReport.load(self.stage_path('evaluate', 'metrics.json'))

    # -- serving ---------------------------------------------------------------

    def recommend(self, user_id, domain, k=None, beam=None):
        """
        Recommend items of a domain for a known user from their full history.

        Returns:
            list: (rank, item_id, log-probability)
        """
        if domain not in self.domains:
            raise InputError(f"Unknown domain '{domain}'")
        events = self.log.user_events(user_id)
        if not events:
            raise InputError(f"Unknown user '{user_id}'")
        model = self.final_model(domain)
        context = encode_history(events, self.sid_map, model.vocab, domain, model.context_budget)
        ranked, _, _ = self.decode(model, context, domain, self.eval_variant(), k=k, beam=beam)
        return [(rank, item_id, score) for rank, (item_id, score) in enumerate(ranked, start=1)]


def run_experiment(config, until='evaluate', dump_embeddings=False):
    """
    Run the pipeline for one configuration.

    Returns:
        dict: Result dictionary; on success 'report' holds the MetricsReport
    """
    pipeline = Pipeline(config, dump_embeddings=dump_embeddings)
    results = pipeline.run_all(until)
    failed = [r for r in results if not r['success']]
    if failed:
        return failed[0]
    result = {'success': True, 'message': f"Pipeline complete through {until}", 'stages': results}
    if until == 'evaluate':
        result['report'] = pipeline.report()
    return result


def run_ablations(config, variants=None):
    """
    Run the full model and each ablation variant.

    Returns:
        dict: Result dictionary with 'rows' of (variant, domain, ndcg@10, relative drop)
    """
    variants = variants or [v for v in ABLATION_LABELS if v != 'none']
    reports = {}
    for variant in ['none'] + [v for v in variants if v != 'none']:
        result = run_experiment(config.with_overrides(ABLATION=variant))
        if not result['success']:
            result['variant'] = variant
            return result
        reports[variant] = result['report']
    metric = f'ndcg@{max(config.EVAL_KS)}'
    full = reports['none']
    rows = []
    for variant, report in reports.items():
        for domain in sorted(report.domains):
            value = report.metric(domain, metric)
            base = full.metric(domain, metric)
            drop = (value - base) / base if base else 0.0
            rows.append((ABLATION_LABELS[variant], domain, value, drop,
                         report.extra.get('invalid_sequences', 0)))
    path = os.path.join(config.ARTIFACT_DIR, 'ablations.tsv')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"variant\tdomain\t{metric}\trelative_change\tinvalid_sequences\n")
        for label, domain, value, drop, invalid in rows:
            handle.write(f"{label}\t{domain}\t{value:.6f}\t{drop:+.4f}\t{invalid}\n")
    return {'success': True, 'message': f"Ablations written to {path}", 'rows': rows, 'path': path}


def run_sweep(config, parameter, values=None):
    """
    Re-run the pipeline for each value of one recommender hyper-parameter.

    Only stages whose keys change are re-run; the rest come from the cache.
    """
    if parameter not in SWEEP_KEYS:
        return {'success': False, 'message': f"Unknown sweep parameter '{parameter}'", 'error_code': 'INPUT_ERROR'}
    keys, default_values = SWEEP_KEYS[parameter]
    values = values if values is not None else getattr(config, default_values)
    rows = []
    for value in values:
        result = run_experiment(config.with_overrides(**{key: value for key in keys}))
        if not result['success']:
            result['value'] = value
            return result
        report = result['report']
        for domain in sorted(report.domains):
            rows.append((value, domain, report.metric(domain, 'ndcg@10'), report.metric(domain, 'recall@10')))
    path = os.path.join(config.ARTIFACT_DIR, f'sweep_{parameter}.tsv')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"{parameter}\tdomain\tndcg@10\trecall@10\n")
        for value, domain, ndcg, recall in rows:
            handle.write(f"{value}\t{domain}\t{ndcg:.6f}\t{recall:.6f}\n")
    return {'success': True, 'message': f"Sweep written to {path}", 'rows': rows, 'path': path}


def parameter_report(config, scaling=False):
    """
    Trainable parameters per phase against full fine-tuning of the same modules,
    plus wall-clock seconds per stage.

    With scaling=True the result also carries the decode-cost rows of
    scaling_report under 'scaling'.
    """
    pipeline = Pipeline(config)
    for stage in STAGES:
        pipeline.store.require(stage, pipeline.hashes[stage])
    rows = []
    tokenizer = pipeline.tokenizer('adapters-train')
    encoder_full = count_parameters(
        p for n, p in tokenizer.encoder.named_parameters() if '.adapters.' not in n)
    rows.append(('tokenizer', count_parameters(
        p for n, p in tokenizer.named_parameters() if '.adapters.' not in n), None))
    for domain in pipeline.domains:
        rows.append((f'item adapter {domain}', count_parameters(
            adapter_parameters(tokenizer.encoder, adapter_name(domain)).values()), encoder_full))
    rows.append(('item router', count_parameters(pipeline.item_router().parameters()), None))
    models = ({d: pipeline.final_model(d) for d in pipeline.domains} if pipeline.per_domain_models
              else {None: pipeline.final_model(pipeline.domains[0])})
    for key, model in models.items():
        suffix = f' ({key})' if key else ''
        backbone_full = count_parameters(
            p for n, p in model.backbone.named_parameters() if '.adapters.' not in n)
        rows.append((f'backbone{suffix}', backbone_full, None))
        experts = sum(count_parameters(adapter_parameters(model.backbone, n).values()) for n in model.mix.names)
        rows.append((f'universal experts + gate{suffix}',
                     experts + count_parameters(model.mix.gate.parameters()), backbone_full))
        for domain in model.specific_domains():
            rows.append((f'specific adapter {domain}{suffix}', count_parameters(
                adapter_parameters(model.backbone, specific_name(domain)).values()), backbone_full))
        if model.user_router is not None:
            rows.append((f'user router{suffix}', count_parameters(model.user_router.parameters()), None))
    timings = [(stage, pipeline.store.manifest(stage, pipeline.hashes[stage]).get('elapsed_seconds', 0.0))
               for stage in STAGES]
    path = os.path.join(config.ARTIFACT_DIR, 'param_report.tsv')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("component\ttrainable\tfull_finetune\tratio\n")
        for name, trainable, full in rows:
            ratio = f"{trainable / full:.4f}" if full else ''
            handle.write(f"{name}\t{trainable}\t{full or ''}\t{ratio}\n")
        handle.write("\nstage\tseconds\n")
        for stage, seconds in timings:
            handle.write(f"{stage}\t{seconds}\n")
    result = {'success': True, 'message': f"Parameter report written to {path}", 'rows': rows,
              'timings': timings, 'path': path}
    if scaling:
        result['scaling'] = scaling_report(config)['rows']
    return result



class CountingScorer:
    """Wraps a logits_fn and counts its calls and the prefixes it scores."""

    def __init__(self, logits_fn):
        self.logits_fn = logits_fn
        self.calls = 0
        self.prefixes = 0

    def __call__(self, prefixes):
        self.calls += 1
        self.prefixes += len(prefixes)
        return self.logits_fn(prefixes)


def synthetic_catalog(vocab, size, seed):
    """
    `size` distinct code paths drawn in the vocabulary's code space.

    Draws come from one seeded stream, so a smaller catalog is a prefix of
    a larger one.

    Raises:
        InputError: If the code space holds fewer than `size` paths
    """
    capacity = 1
    for codebook in vocab.codebook_sizes:
        capacity *= codebook
    if size > capacity:
        raise InputError(f"Catalog of {size} items exceeds the {capacity} available code paths")
    draws = RngSeed(seed, 'scaling/catalog').numpy()
    seen = {}
    while len(seen) < size:
        codes = tuple(int(draws.integers(0, k)) for k in vocab.codebook_sizes)
        seen.setdefault(codes, f"s{len(seen):06d}")
    return {item_id: SemanticID(codes) for codes, item_id in seen.items()}


def scaling_report(config, sizes=None, beam=None):
    """
    Decode cost of prefix-tree beam search against exhaustive ranking as the
    catalog grows.

    The trained model scores synthetic catalogs of increasing size for one
    held-out query. Beam search calls the model once per SID position and
    scores at most beam_width prefixes per call, whatever the catalog size.

    Returns:
        dict: Result dictionary with 'rows' of (size, beam calls, beam
        prefixes, beam seconds, exhaustive calls, exhaustive prefixes,
        exhaustive seconds)
    """
    pipeline = Pipeline(config)
    for stage in STAGES:
        pipeline.store.require(stage, pipeline.hashes[stage])
    settings = config.get_decoder_config()
    sizes = sorted(sizes or config.SCALING_SIZES)
    beam = beam or settings['beam_width']
    domain = pipeline.domains[0]
    model = pipeline.final_model(domain)
    variant = pipeline.eval_variant()
    query = pipeline.split.targets('test', domain)[0]
    events = pipeline.split.test_context(query.user_id, query.test)
    context = encode_history(events, pipeline.sid_map, model.vocab, domain, model.context_budget)
    gamma = query_gamma(model, context) if variant == 'fused' else None
    logits_fn = make_logits_fn(model, context, domain, variant)

    rows = []
    for size in sizes:
        tree = build_tree(domain, synthetic_catalog(model.vocab, size, config.SEED), encode=model.vocab.sid_tokens)
        k = min(settings['k'], beam, size)
        beam_scorer, full_scorer = CountingScorer(logits_fn), CountingScorer(logits_fn)
        started = time.perf_counter()
        beam_generate(beam_scorer, tree, beam, k, gamma, settings['fusion_order'])
        beam_seconds = time.perf_counter() - started
        started = time.perf_counter()
        exhaustive_rank(full_scorer, tree, gamma, settings['fusion_order'])
        full_seconds = time.perf_counter() - started
        rows.append((size, beam_scorer.calls, beam_scorer.prefixes, beam_seconds,
                     full_scorer.calls, full_scorer.prefixes, full_seconds))
        logger.info(f"Scaling {size} items: beam scored {beam_scorer.prefixes} prefixes in "
                    f"{beam_seconds:.3f}s, exhaustive {full_scorer.prefixes} in {full_seconds:.3f}s")

    path = os.path.join(config.ARTIFACT_DIR, 'scaling.tsv')
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write("items\tbeam_calls\tbeam_prefixes\tbeam_seconds\t"
                     "exhaustive_calls\texhaustive_prefixes\texhaustive_seconds\n")
        for size, b_calls, b_prefixes, b_seconds, f_calls, f_prefixes, f_seconds in rows:
            handle.write(f"{size}\t{b_calls}\t{b_prefixes}\t{b_seconds:.6f}\t"
                         f"{f_calls}\t{f_prefixes}\t{f_seconds:.6f}\n")
    return {'success': True, 'message': f"Scaling report written to {path}", 'rows': rows,
            'beam_width': beam, 'path': path}
