"""
Command-line entry point for the xdrec pipeline.

Every pipeline stage is a subcommand; `run` executes all of them in order.
Stages are idempotent: completed stages are reused from the artifact store.
Failures exit non-zero with a "[stage] message" diagnostic on stderr.

Usage:
    python run.py --config config/desk.conf run
    python run.py --config config/desk.conf recommend --user u00012 --domain B
    python run.py --config config/desk.conf ablate
"""

import argparse
import logging
import os
import sys

# Add backend directory to Python path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend'))

from config import ABLATIONS, Config, ConfigurationError
from errors import XDRecError
from experiment_service import (
    ABLATION_LABELS,
    STAGES,
    SWEEP_KEYS,
    Pipeline,
    parameter_report,
    run_ablations,
    run_sweep,
)
from gradcheck_suite import format_table, run_grad_checks

STAGE_COMMANDS = {'synth-gen': 'data'}
STAGE_COMMANDS.update({stage: stage for stage in STAGES if stage != 'data'})


def setup_logging(config):
    """
    Configure logging for the pipeline based on environment.

    Development mode: DEBUG level
    Production mode: WARNING level
    An explicit LOG_LEVEL wins over both.
    """
    if config.LOG_LEVEL:
        log_level = getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    else:
        log_level = logging.DEBUG if config.is_development() else logging.WARNING

    # Configure root logger
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(config.LOG_FILE)
        ],
        force=True
    )

    logger = logging.getLogger(__name__)
    logger.info(f"Running in {config.ENV.upper()} mode")
    logger.info(f"Logging level: {logging.getLevelName(log_level)}")
    return logger


def build_parser():
    parser = argparse.ArgumentParser(prog='xdrec', description='Generative cross-domain recommendation pipeline')
    parser.add_argument('--config', help='Key-value configuration file (e.g. config/desk.conf)')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one configuration key; may be repeated')
    parser.add_argument('--ablation', choices=ABLATIONS, help='Run under an ablation variant')
    parser.add_argument('--force', action='store_true', help='Re-run the stage even if its artifacts exist')
    commands = parser.add_subparsers(dest='command', required=True)

    for command in STAGE_COMMANDS:
        sub = commands.add_parser(command, help=f"Run the {STAGE_COMMANDS[command]} stage")
        if command == 'sids-assign':
            sub.add_argument('--dump-embeddings', action='store_true',
                             help='Also write z_uni/z_spec/z_fused per item as JSON lines')

    sub = commands.add_parser('run', help='Run every stage in order')
    sub.add_argument('--until', choices=STAGES, default='evaluate')
    sub.add_argument('--ablations', action='store_true', help='Also run every ablation variant')

    sub = commands.add_parser('recommend', help='Top-K items of a domain for one user')
    sub.add_argument('--user', required=True)
    sub.add_argument('--domain', required=True)
    sub.add_argument('--k', type=int)
    sub.add_argument('--beam', type=int)

    commands.add_parser('grad-check', help='Finite-difference check of every loss')

    sub = commands.add_parser('ablate', help='Run the full model and the ablation variants')
    sub.add_argument('--variants', nargs='*', choices=[v for v in ABLATIONS if v != 'none'])

    sub = commands.add_parser('sweep', help='Hyper-parameter sensitivity sweep')
    sub.add_argument('parameter', choices=sorted(SWEEP_KEYS))
    sub.add_argument('--values', nargs='*', type=float)

    sub = commands.add_parser('param-report', help='Trainable parameters per phase and wall-clock per stage')
    sub.add_argument('--scaling', action='store_true',
                     help='Also time beam search against exhaustive ranking over growing catalogs')
    commands.add_parser('serve', help='Serve recommendations over HTTP')
    return parser


def load_config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip().upper()] = value.strip()
    if args.ablation:
        overrides['ABLATION'] = args.ablation
    return Config.load(args.config, overrides=overrides)


def fail(stage, message):
    print(f"[{stage}] {message}", file=sys.stderr)
    return 1


def _report_result(result, stage):
    if not result['success']:
        return fail(result.get('stage', stage), result['message'])
    return 0


def _sweep_values(parameter, values):
    if values is None:
        return None
    return [int(v) for v in values] if parameter in ('experts', 'rank') else values


def dispatch(args, config, logger):
    command = args.command

    if command in STAGE_COMMANDS:
        pipeline = Pipeline(config, dump_embeddings=getattr(args, 'dump_embeddings', False))
        result = pipeline.run_stage(STAGE_COMMANDS[command], force=args.force)
        if result['success']:
            print(f"{result['stage']}\t{result['hash'][:12]}\t{'cached' if result['cached'] else 'done'}")
        return _report_result(result, STAGE_COMMANDS[command])

    if command == 'run':
        pipeline = Pipeline(config)
        for stage in STAGES[:STAGES.index(args.until) + 1]:
            result = pipeline.run_stage(stage, force=args.force)
            if not result['success']:
                return _report_result(result, stage)
            print(f"{stage}\t{result['hash'][:12]}\t{'cached' if result['cached'] else 'done'}")
        if args.until == 'evaluate':
            sys.stdout.write(pipeline.report().to_tsv())
        if args.ablations:
            return _report_result(run_ablations(config), 'ablate')
        return 0

    if command == 'recommend':
        ranked = Pipeline(config).recommend(args.user, args.domain, k=args.k, beam=args.beam)
        print("rank\titem_id\tlogprob")
        for rank, item_id, score in ranked:
            print(f"{rank}\t{item_id}\t{score:.6f}")
        return 0

    if command == 'grad-check':
        rows = run_grad_checks(config.GRADCHECK_EPSILON, config.GRADCHECK_TOLERANCE, config.SEED)
        sys.stdout.write(format_table(rows))
        failed = [row['loss'] for row in rows if not row['passed']]
        if failed:
            return fail('grad-check', f"{len(failed)} loss(es) exceed tolerance: {', '.join(failed)}")
        return 0

    if command == 'ablate':
        result = run_ablations(config, args.variants)
        if result['success']:
            print(f"variant\tdomain\tndcg@{max(config.EVAL_KS)}\trelative_change")
            for label, domain, value, drop, _ in result['rows']:
                print(f"{label}\t{domain}\t{value:.4f}\t{drop:+.2%}")
        return _report_result(result, 'ablate')

    if command == 'sweep':
        result = run_sweep(config, args.parameter, _sweep_values(args.parameter, args.values))
        if result['success']:
            logger.info(result['message'])
            print(f"{args.parameter}\tdomain\tndcg@10\trecall@10")
            for value, domain, ndcg, recall in result['rows']:
                print(f"{value}\t{domain}\t{ndcg:.4f}\t{recall:.4f}")
        return _report_result(result, 'sweep')

    if command == 'param-report':
        result = parameter_report(config, scaling=args.scaling)
        for name, trainable, full in result['rows']:
            print(f"{name}\t{trainable}\t{full or ''}")
        if args.scaling:
            print("items\tbeam_prefixes\tbeam_seconds\texhaustive_prefixes\texhaustive_seconds")
            for size, _, beam_prefixes, beam_seconds, _, full_prefixes, full_seconds in result['scaling']:
                print(f"{size}\t{beam_prefixes}\t{beam_seconds:.4f}\t{full_prefixes}\t{full_seconds:.4f}")
        return 0

    if command == 'serve':
        from app import configure_app
        serve_config = config.get_serve_config()
        logger.info(f"Host: {serve_config['host']}")
        logger.info(f"Port: {serve_config['port']}")
        configure_app(config).run(
            host=serve_config['host'],
            port=serve_config['port'],
            debug=config.is_development()
        )
        return 0

    return fail(command, 'Unknown command')


def main(argv=None):
    """
    Main entry point: parse arguments, load configuration, set up logging
    and dispatch the subcommand.

    Returns:
        int: Process exit code
    """
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigurationError as e:
        return fail('config', str(e))

    logger = setup_logging(config)
    logger.info("=" * 60)
    logger.info(f"xdrec {args.command} (ablation: {ABLATION_LABELS[config.ABLATION]})")
    logger.info("=" * 60)

    try:
        return dispatch(args, config, logger)
    except XDRecError as e:
        stage = e.context.get('stage') or args.command
        logger.error(f"[{stage}] {e.message}")
        return fail(stage, e.message)
    except ConfigurationError as e:
        return fail('config', str(e))
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}")
        return fail(args.command, f"Unexpected error: {e}")


if __name__ == '__main__':
    sys.exit(main())
