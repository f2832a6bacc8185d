"""
Flask application for the xdrec recommender.

This module provides the HTTP API over a trained pipeline:
- Health check with the configuration's stage status
- Top-K recommendations for a known user in a target domain
- The latest evaluation report

The pipeline is bound once with configure_app(config); every endpoint
answers with the JSON envelope {status, message, code, timestamp} on
failure.
"""

import logging
from datetime import datetime

from flask import Flask, jsonify, request
from flask_cors import CORS

from errors import XDRecError
from experiment_service import STAGES, Pipeline

# Configure logging
logger = logging.getLogger(__name__)

# Initialize Flask application
app = Flask(__name__)

# Configuration
app.json.sort_keys = False

# Pipeline bound by configure_app()
_pipeline = None

STATUS_CODES = {
    'INPUT_ERROR': 400,
    'UNKNOWN_ADAPTER': 404,
    'UNKNOWN_ITEM': 404,
    'DECODE_CONFIG_ERROR': 400,
    'MISSING_UPSTREAM': 503,
    'STALE_ARTIFACT': 503,
}


def configure_app(config, pipeline=None):
    """
    Bind a pipeline to the app and configure CORS from ALLOWED_ORIGINS.

    Returns:
        Flask: The configured application
    """
    global _pipeline

    _pipeline = pipeline or Pipeline(config)
    origins = config.get_serve_config()['origins']
    if origins == ['*']:
        CORS(app, allow_headers=['Content-Type'], methods=['GET', 'OPTIONS'])
    else:
        CORS(app, origins=origins, allow_headers=['Content-Type'], methods=['GET', 'OPTIONS'])
    logger.info(f"API bound to artifacts in {config.ARTIFACT_DIR}")
    return app


def get_pipeline():
    """
    Raises:
        RuntimeError: If configure_app() has not been called
    """
    if _pipeline is None:
        logger.error("Pipeline not configured. Call configure_app() first")
        raise RuntimeError("Pipeline not configured")
    return _pipeline


def error_response(message, code, status_code):
    return jsonify({
        'status': 'error',
        'message': message,
        'code': code,
        'timestamp': datetime.utcnow().isoformat()
    }), status_code


def _from_exception(e, endpoint):
    if isinstance(e, XDRecError):
        logger.warning(f"{endpoint} request failed: {e.message}")
        return error_response(e.message, e.error_code, STATUS_CODES.get(e.error_code, 500))
    logger.error(f"Unexpected error in {endpoint} endpoint: {e}")
    return error_response('Internal server error', 'INTERNAL_ERROR', 500)


@app.route('/api/health', methods=['GET'])
def health():
    """Report which stages of the bound configuration are complete."""
    try:
        pipeline = get_pipeline()
        stages = {stage: pipeline.store.is_complete(stage, pipeline.hashes[stage]) for stage in STAGES}
        return jsonify({
            'status': 'success',
            'ready': all(stages.values()),
            'ablation': pipeline.config.ABLATION,
            'stages': stages
        }), 200
    except Exception as e:
        return _from_exception(e, 'health')


@app.route('/api/recommend', methods=['GET'])
def recommend():
    """Recommend items of one domain for a user from their full history."""
    try:
        user = request.args.get('user')
        domain = request.args.get('domain')
        k = request.args.get('k', type=int)
        beam = request.args.get('beam', type=int)

        if not user or not domain:
            logger.warning("Recommend request missing user or domain")
            return error_response('Query parameters user and domain are required', 'VALIDATION_ERROR', 400)
        if (k is not None and k < 1) or (beam is not None and beam < 1):
            return error_response('k and beam must be positive integers', 'VALIDATION_ERROR', 400)

        ranked = get_pipeline().recommend(user, domain, k=k, beam=beam)

        logger.info(f"Recommended {len(ranked)} {domain} items for user: {user}")
        return jsonify({
            'status': 'success',
            'user': user,
            'domain': domain,
            'items': [{'rank': rank, 'item_id': item_id, 'logprob': score} for rank, item_id, score in ranked]
        }), 200

    except Exception as e:
        return _from_exception(e, 'recommend')


@app.route('/api/metrics', methods=['GET'])
def metrics():
    """Return the evaluation report of the bound configuration."""
    try:
        report = get_pipeline().report()
        return jsonify({
            'status': 'success',
            'report': report.to_dict()
        }), 200
    except Exception as e:
        return _from_exception(e, 'metrics')
